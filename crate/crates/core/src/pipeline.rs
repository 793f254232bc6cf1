//! The iterative reweight-and-retrain procedure: train a base model, build
//! the affinity cache from its embedding, retrain against G, and optionally
//! repeat, each round reading the previous round's model. Artifacts land in
//! a directory with a manifest written last, so a manifest's presence marks
//! a completed run.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::affinity::{
    build_affinity_cache, lambda_x_median_heuristic, lambda_y_median_heuristic, AffinityCache,
    AffinityError, AffinityWeighter, KernelConfig, Mode,
};
use crate::data::Dataset;
use crate::linear::{
    train_warp, train_warp_from, EmbeddingModel, ModelError, TrainConfig, TrainError, UnitWeighter,
};
use crate::util::sha256_hex;

pub const MANIFEST_MAGIC: &str = "awe-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.awe";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad manifest at line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error("bad pipeline config: {0}")]
    BadConfig(String),
    #[error("manifest has no {kind} for round {round}")]
    MissingArtifact { kind: &'static str, round: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Affinity(#[from] AffinityError),
}

/// Full pipeline configuration. `kernel.lambda_x` is a placeholder: the
/// effective value is `lambda_x` when set, otherwise the median heuristic
/// under each round's source model. Training seeds advance by one per round
/// so rounds draw independent streams; round 0 uses `train.seed` itself.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub rounds: usize,
    pub train: TrainConfig,
    pub kernel: KernelConfig,
    /// Fixed kernel bandwidth, or None for the per-round median heuristic.
    pub lambda_x: Option<f64>,
    /// Label-side bandwidth for mode embedded-xy; None = median heuristic.
    pub lambda_y: Option<f64>,
    pub warm_start: bool,
    pub out_dir: PathBuf,
    pub workers: usize,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.rounds == 0 {
            return Err(PipelineError::BadConfig("rounds must be at least 1".into()));
        }
        self.train.validate()?;
        if self.kernel.n == 0 {
            return Err(PipelineError::BadConfig(
                "kernel n must be at least 1".into(),
            ));
        }
        if !(self.kernel.bias >= 0.0) || !self.kernel.bias.is_finite() {
            return Err(PipelineError::BadConfig(
                "kernel bias must be nonnegative".into(),
            ));
        }
        if let Some(l) = self.lambda_x {
            if !(l > 0.0) || !l.is_finite() {
                return Err(PipelineError::BadConfig("lambda_x must be positive".into()));
            }
        }
        if let Some(l) = self.lambda_y {
            if !(l > 0.0) || !l.is_finite() {
                return Err(PipelineError::BadConfig("lambda_y must be positive".into()));
            }
        }
        Ok(())
    }

    /// Manifest `cfg` lines. Worker count is deliberately absent: artifacts
    /// do not depend on it, and neither should their bytes.
    fn cfg_entries(&self) -> Vec<(String, String)> {
        use crate::util::fmt_f64 as f;
        let t = &self.train;
        let k = &self.kernel;
        let opt = |v: Option<f64>| v.map_or_else(|| "median".to_string(), f);
        vec![
            ("rounds".into(), self.rounds.to_string()),
            (
                "warm_start".into(),
                if self.warm_start { "1" } else { "0" }.into(),
            ),
            ("dim".into(), t.dim.to_string()),
            ("learning_rate".into(), f(t.learning_rate)),
            ("margin".into(), f(t.margin)),
            ("epochs".into(), t.epochs.to_string()),
            (
                "max_negative_trials".into(),
                t.max_negative_trials
                    .map_or_else(|| "auto".to_string(), |v| v.to_string()),
            ),
            ("seed".into(), t.seed.to_string()),
            ("init_scale".into(), f(t.init_scale)),
            ("max_norm".into(), f(t.max_norm)),
            ("lambda_x".into(), opt(self.lambda_x)),
            ("lambda_y".into(), opt(self.lambda_y)),
            ("n".into(), k.n.to_string()),
            ("agg".into(), k.agg.as_str().into()),
            ("mode".into(), k.mode.as_str().into()),
            ("bias".into(), f(k.bias)),
            (
                "exclude_self".into(),
                if k.exclude_self { "1" } else { "0" }.into(),
            ),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestEntry {
    Model {
        round: usize,
        path: String,
        hash: String,
    },
    Cache {
        round: usize,
        path: String,
        hash: String,
    },
    Cfg {
        key: String,
        value: String,
    },
}

/// Ordered artifact index; preserves line order so files round-trip byte
/// for byte.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn model(&self, round: usize) -> Option<(&str, &str)> {
        self.entries.iter().find_map(|e| match e {
            ManifestEntry::Model {
                round: r,
                path,
                hash,
            } if *r == round => Some((path.as_str(), hash.as_str())),
            _ => None,
        })
    }

    pub fn cache(&self, round: usize) -> Option<(&str, &str)> {
        self.entries.iter().find_map(|e| match e {
            ManifestEntry::Cache {
                round: r,
                path,
                hash,
            } if *r == round => Some((path.as_str(), hash.as_str())),
            _ => None,
        })
    }

    pub fn cfg(&self, key: &str) -> Option<&str> {
        self.entries.iter().find_map(|e| match e {
            ManifestEntry::Cfg { key: k, value } if k == key => Some(value.as_str()),
            _ => None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_MAGIC);
        out.push('\n');
        for entry in &self.entries {
            match entry {
                ManifestEntry::Model { round, path, hash } => {
                    out.push_str(&format!("model {} {} {}\n", round, path, hash));
                }
                ManifestEntry::Cache { round, path, hash } => {
                    out.push_str(&format!("cache {} {} {}\n", round, path, hash));
                }
                ManifestEntry::Cfg { key, value } => {
                    out.push_str(&format!("cfg {}={}\n", key, value));
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        let fmt_err = |line: usize, detail: &str| PipelineError::Format {
            line,
            detail: detail.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, magic) = lines.next().ok_or_else(|| fmt_err(1, "empty file"))?;
        if magic != MANIFEST_MAGIC {
            return Err(fmt_err(1, &format!("expected '{}'", MANIFEST_MAGIC)));
        }
        let mut entries = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.first().copied() {
                Some("model") | Some("cache") => {
                    if words.len() != 4 {
                        return Err(fmt_err(line_no, "expected '<kind> <round> <path> <hash>'"));
                    }
                    let round: usize = words[1]
                        .parse()
                        .map_err(|_| fmt_err(line_no, "bad round"))?;
                    let hash = words[3].to_string();
                    if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
                        return Err(fmt_err(line_no, "hash must be 64 hex digits"));
                    }
                    let path = words[2].to_string();
                    let kind_is_model = words[0] == "model";
                    let duplicate = entries.iter().any(|e| match e {
                        ManifestEntry::Model { round: r, .. } => kind_is_model && *r == round,
                        ManifestEntry::Cache { round: r, .. } => !kind_is_model && *r == round,
                        _ => false,
                    });
                    if duplicate {
                        return Err(fmt_err(line_no, "duplicate artifact entry"));
                    }
                    entries.push(if kind_is_model {
                        ManifestEntry::Model { round, path, hash }
                    } else {
                        ManifestEntry::Cache { round, path, hash }
                    });
                }
                Some("cfg") => {
                    let rest = line.trim_start().strip_prefix("cfg").unwrap().trim_start();
                    let (key, value) = rest
                        .split_once('=')
                        .ok_or_else(|| fmt_err(line_no, "expected 'cfg key=value'"))?;
                    if key.is_empty() || key.contains(char::is_whitespace) {
                        return Err(fmt_err(line_no, "bad cfg key"));
                    }
                    entries.push(ManifestEntry::Cfg {
                        key: key.to_string(),
                        value: value.to_string(),
                    });
                }
                _ => return Err(fmt_err(line_no, "expected model, cache or cfg line")),
            }
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<String, PipelineError> {
        let text = self.to_text();
        fs::write(path, &text)?;
        Ok(sha256_hex(text.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = fs::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| PipelineError::Format {
            line: 1,
            detail: "manifest is not utf-8".into(),
        })?;
        Self::from_text(&text)
    }
}

#[derive(Debug)]
pub struct PipelineArtifacts {
    /// models[r] is the round-r model file.
    pub models: Vec<PathBuf>,
    /// caches[r - 1] is the round-r cache file, built from model r−1.
    pub caches: Vec<PathBuf>,
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
}

pub fn model_file_name(round: usize) -> String {
    format!("model{}.awe", round)
}

pub fn cache_file_name(round: usize) -> String {
    format!("cache{}.awe", round)
}

fn resolve_lambda_x(
    config: &PipelineConfig,
    model: &EmbeddingModel,
    train: &Dataset,
) -> Result<f64, PipelineError> {
    match config.lambda_x {
        Some(l) => Ok(l),
        None => Ok(lambda_x_median_heuristic(model, train, config.kernel.mode)?),
    }
}

fn resolve_lambda_y(config: &PipelineConfig, model: &EmbeddingModel) -> f64 {
    config
        .lambda_y
        .unwrap_or_else(|| lambda_y_median_heuristic(model))
}

fn smooth_params<'a>(
    config: &PipelineConfig,
    model: &'a EmbeddingModel,
) -> Option<(&'a EmbeddingModel, f64)> {
    match config.kernel.mode {
        Mode::EmbeddedXY => Some((model, resolve_lambda_y(config, model))),
        _ => None,
    }
}

/// Runs the full procedure. Round 0 trains unweighted; each round r ≥ 1
/// builds cache r from model r−1 over the original training set and trains
/// model r with G as the weighter. The manifest is written only after every
/// artifact it names.
pub fn run_pipeline(
    train: &Dataset,
    config: &PipelineConfig,
) -> Result<PipelineArtifacts, PipelineError> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)?;

    let mut manifest = Manifest::default();
    let mut models = Vec::new();
    let mut caches = Vec::new();

    let base = train_warp(train, &config.train, &UnitWeighter)?;
    let base_path = config.out_dir.join(model_file_name(0));
    let base_hash = base.save(&base_path)?;
    manifest.entries.push(ManifestEntry::Model {
        round: 0,
        path: model_file_name(0),
        hash: base_hash,
    });
    models.push(base_path);

    let mut prev = base;
    for round in 1..config.rounds {
        let lambda_x = resolve_lambda_x(config, &prev, train)?;
        let kernel = KernelConfig {
            lambda_x,
            ..config.kernel.clone()
        };
        let cache = build_affinity_cache(&prev, train, train, &kernel, config.workers)?;
        let cache_path = config.out_dir.join(cache_file_name(round));
        let cache_hash = cache.save(&cache_path)?;
        manifest.entries.push(ManifestEntry::Cache {
            round,
            path: cache_file_name(round),
            hash: cache_hash,
        });
        caches.push(cache_path);

        cache.ensure_covers(train)?;
        let weighter = AffinityWeighter::new(&cache, train, smooth_params(config, &prev))?;
        let round_train = TrainConfig {
            seed: config.train.seed.wrapping_add(round as u64),
            ..config.train.clone()
        };
        let model = if config.warm_start {
            train_warp_from(prev.clone(), train, &round_train, &weighter)?
        } else {
            train_warp(train, &round_train, &weighter)?
        };
        let model_path = config.out_dir.join(model_file_name(round));
        let model_hash = model.save(&model_path)?;
        manifest.entries.push(ManifestEntry::Model {
            round,
            path: model_file_name(round),
            hash: model_hash,
        });
        models.push(model_path);
        prev = model;
    }

    for (key, value) in config.cfg_entries() {
        manifest.entries.push(ManifestEntry::Cfg { key, value });
    }
    let manifest_path = config.out_dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    Ok(PipelineArtifacts {
        models,
        caches,
        manifest,
        manifest_path,
    })
}

/// Loads the round-r model named by a manifest, verifying the recorded
/// hash against the bytes on disk.
pub fn load_round_model(
    manifest: &Manifest,
    dir: &Path,
    round: usize,
) -> Result<(EmbeddingModel, String), PipelineError> {
    let (name, want_hash) = manifest
        .model(round)
        .ok_or(PipelineError::MissingArtifact {
            kind: "model",
            round,
        })?;
    let (model, hash) = EmbeddingModel::load(&dir.join(name))?;
    if hash != want_hash {
        return Err(AffinityError::FingerprintMismatch {
            expected: want_hash.to_string(),
            actual: hash,
        }
        .into());
    }
    Ok((model, hash))
}

/// Loads the round-r cache named by a manifest, verifying the recorded
/// hash.
pub fn load_round_cache(
    manifest: &Manifest,
    dir: &Path,
    round: usize,
) -> Result<AffinityCache, PipelineError> {
    let (name, want_hash) = manifest
        .cache(round)
        .ok_or(PipelineError::MissingArtifact {
            kind: "cache",
            round,
        })?;
    let (cache, hash) = AffinityCache::load(&dir.join(name))?;
    if hash != want_hash {
        return Err(AffinityError::FingerprintMismatch {
            expected: want_hash.to_string(),
            actual: hash,
        }
        .into());
    }
    Ok(cache)
}

/// G for held-out queries: neighbor lists are built fresh against the
/// training set with the source model and the cache's stored kernel
/// settings. Self exclusion is turned off, since query ids live in a
/// different id space from the training set. Errors if the supplied model
/// fingerprint does not match the one the cache was built from.
pub fn make_test_weighter<'a>(
    source_model: &'a EmbeddingModel,
    source_model_fingerprint: &str,
    train_cache: &AffinityCache,
    train: &'a Dataset,
    queries: &Dataset,
    lambda_y: Option<f64>,
    workers: usize,
) -> Result<AffinityWeighter<'a>, PipelineError> {
    train_cache.check_model(source_model_fingerprint)?;
    let kernel = KernelConfig {
        exclude_self: false,
        ..train_cache.kernel_config.clone()
    };
    let query_cache = build_affinity_cache(source_model, train, queries, &kernel, workers)?;
    query_cache.ensure_covers(queries)?;
    let smooth = match kernel.mode {
        Mode::EmbeddedXY => Some((
            source_model,
            lambda_y.unwrap_or_else(|| lambda_y_median_heuristic(source_model)),
        )),
        _ => None,
    };
    Ok(AffinityWeighter::new_owned(query_cache, train, smooth)?)
}
