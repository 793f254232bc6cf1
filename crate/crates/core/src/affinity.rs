//! The affinity function G: kernel weights over embedding-space nearest
//! neighbors, sparsified to the top n, aggregated per candidate label.
//!
//! G multiplies the bilinear score (see [`score_affinity`]); neighbor lists
//! are built once per query and cached in a versioned text artifact bound to
//! the producing model by content fingerprint. Also provides two scoring
//! variants over per-feature-pair weights: explicit sparse and low rank.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Dataset, Example, SparseVector};
use crate::linear::{dot, EmbeddingModel, ModelError, Weighter};
use crate::util::{fmt_f64, sha256_hex};

pub const CACHE_MAGIC: &str = "awe-cache v1";

/// Seed for the internal pair sampler of the median heuristics, fixed so
/// that the derived lambda is a pure function of model, data, and mode.
const MEDIAN_PAIR_SEED: u64 = 0xAFF1;
const MEDIAN_PAIRS: usize = 1000;

#[derive(Debug, Error)]
pub enum AffinityError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad cache file at line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error("empty training set")]
    EmptyTrain,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("label {label} out of range (y dim {dim})")]
    LabelOutOfRange { label: usize, dim: usize },
    #[error("no neighbor list for query id {0}")]
    UnknownQueryId(u64),
    #[error("neighbor id {0} not present in training set")]
    UnknownTrainId(u64),
    #[error("cache was built from model {expected}, got model {actual}")]
    FingerprintMismatch { expected: String, actual: String },
    #[error("bad kernel config: {0}")]
    BadConfig(String),
    #[error("mode embedded-xy needs a model and lambda_y for scoring")]
    MissingSmoothParams,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Agg {
    Sum,
    Max,
}

impl Agg {
    pub fn as_str(self) -> &'static str {
        match self {
            Agg::Sum => "sum",
            Agg::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sum" => Some(Agg::Sum),
            "max" => Some(Agg::Max),
            _ => None,
        }
    }
}

/// Distance space for the neighbor search. The embedded modes differ only
/// in the label factor applied at scoring time: `EmbeddedX` matches labels
/// exactly, `EmbeddedXY` weights neighbors by a kernel between label
/// embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    EmbeddedX,
    EmbeddedXY,
    Raw,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::EmbeddedX => "embedded-x",
            Mode::EmbeddedXY => "embedded-xy",
            Mode::Raw => "raw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "embedded-x" => Some(Mode::EmbeddedX),
            "embedded-xy" => Some(Mode::EmbeddedXY),
            "raw" => Some(Mode::Raw),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub lambda_x: f64,
    pub mode: Mode,
    pub agg: Agg,
    pub n: usize,
    pub bias: f64,
    pub exclude_self: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            lambda_x: 1.0,
            mode: Mode::EmbeddedX,
            agg: Agg::Sum,
            n: 20,
            bias: 0.0,
            exclude_self: true,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<(), AffinityError> {
        if !(self.lambda_x > 0.0) || !self.lambda_x.is_finite() {
            return Err(AffinityError::BadConfig(
                "lambda_x must be positive and finite".into(),
            ));
        }
        if self.n == 0 {
            return Err(AffinityError::BadConfig("n must be at least 1".into()));
        }
        if !(self.bias >= 0.0) || !self.bias.is_finite() {
            return Err(AffinityError::BadConfig(
                "bias must be nonnegative and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Top-n neighbors of one query: (train example id, kernel weight), weights
/// descending, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub query_id: u64,
    neighbors: Vec<(u64, f64)>,
}

impl NeighborList {
    pub fn new(query_id: u64, neighbors: Vec<(u64, f64)>) -> Self {
        Self {
            query_id,
            neighbors,
        }
    }

    pub fn neighbors(&self) -> &[(u64, f64)] {
        &self.neighbors
    }
}

/// `exp(-lambda * ||u_q - u_i||^2)`; panics on length mismatch.
pub fn kernel_weight(u_q: &[f64], u_i: &[f64], lambda_x: f64) -> f64 {
    assert_eq!(u_q.len(), u_i.len(), "kernel_weight: length mismatch");
    kernel_from_sq(lambda_x, squared_euclid(u_q, u_i))
}

fn kernel_from_sq(lambda: f64, d2: f64) -> f64 {
    (-lambda * d2).exp()
}

fn squared_euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc
}

/// Embeds every example of a dataset, in example order.
pub fn embed_dataset(model: &EmbeddingModel, data: &Dataset) -> Result<Vec<Vec<f64>>, ModelError> {
    data.examples()
        .iter()
        .map(|ex| model.embed_x(&ex.features))
        .collect()
}

fn check_dims(model: &EmbeddingModel, data: &Dataset, what: &str) -> Result<(), AffinityError> {
    if model.x_dim() != data.x_dim() || model.y_dim() != data.y_dim() {
        return Err(AffinityError::DimMismatch(format!(
            "model is {}x{}, {} is {}x{}",
            model.x_dim(),
            model.y_dim(),
            what,
            data.x_dim(),
            data.y_dim()
        )));
    }
    Ok(())
}

/// Candidate weights for one query against precomputed per-example context;
/// shared by the standalone and batched searches so both produce identical
/// bits.
fn select_neighbors(
    query_id: u64,
    weights: impl Iterator<Item = (u64, f64)>,
    config: &KernelConfig,
) -> NeighborList {
    let mut candidates: Vec<(u64, f64)> = weights
        .filter(|(id, _)| !(config.exclude_self && *id == query_id))
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(config.n);
    NeighborList::new(query_id, candidates)
}

fn knn_embed_inner(
    query_id: u64,
    query: &SparseVector,
    train: &Dataset,
    embedded_train: Option<&[Vec<f64>]>,
    model: &EmbeddingModel,
    config: &KernelConfig,
) -> Result<NeighborList, AffinityError> {
    let weights: Vec<(u64, f64)> = match config.mode {
        Mode::Raw => train
            .examples()
            .iter()
            .map(|ex| {
                (
                    ex.id,
                    kernel_from_sq(config.lambda_x, query.squared_distance(&ex.features)),
                )
            })
            .collect(),
        Mode::EmbeddedX | Mode::EmbeddedXY => {
            let e_q = model.embed_x(query)?;
            match embedded_train {
                Some(es) => train
                    .examples()
                    .iter()
                    .zip(es.iter())
                    .map(|(ex, e_i)| (ex.id, kernel_weight(&e_q, e_i, config.lambda_x)))
                    .collect(),
                None => train
                    .examples()
                    .iter()
                    .map(|ex| {
                        let e_i = model.embed_x(&ex.features)?;
                        Ok((ex.id, kernel_weight(&e_q, &e_i, config.lambda_x)))
                    })
                    .collect::<Result<_, AffinityError>>()?,
            }
        }
    };
    Ok(select_neighbors(query_id, weights.into_iter(), config))
}

/// Exact top-n neighbor search for one query in the configured distance
/// space.
pub fn knn_embed(
    model: &EmbeddingModel,
    train: &Dataset,
    query_id: u64,
    query: &SparseVector,
    config: &KernelConfig,
) -> Result<NeighborList, AffinityError> {
    config.validate()?;
    if train.is_empty() {
        return Err(AffinityError::EmptyTrain);
    }
    if let Some(max) = query.max_index() {
        if max >= train.x_dim() {
            return Err(AffinityError::DimMismatch(format!(
                "query feature index {} out of range for x dim {}",
                max,
                train.x_dim()
            )));
        }
    }
    check_dims(model, train, "train")?;
    knn_embed_inner(query_id, query, train, None, model, config)
}

/// Raw feature-space neighbor search with no model involved, for baselines
/// that never embed. Self matches are kept (external queries).
pub fn knn_raw(
    train: &Dataset,
    query: &SparseVector,
    lambda_x: f64,
    n: usize,
) -> Result<NeighborList, AffinityError> {
    if train.is_empty() {
        return Err(AffinityError::EmptyTrain);
    }
    if !(lambda_x > 0.0) || !lambda_x.is_finite() {
        return Err(AffinityError::BadConfig(
            "lambda_x must be positive and finite".into(),
        ));
    }
    if n == 0 {
        return Err(AffinityError::BadConfig("n must be at least 1".into()));
    }
    if let Some(max) = query.max_index() {
        if max >= train.x_dim() {
            return Err(AffinityError::DimMismatch(format!(
                "query feature index {} out of range for x dim {}",
                max,
                train.x_dim()
            )));
        }
    }
    let config = KernelConfig {
        lambda_x,
        mode: Mode::Raw,
        n,
        exclude_self: false,
        ..Default::default()
    };
    let weights = train.examples().iter().map(|ex| {
        (
            ex.id,
            kernel_from_sq(lambda_x, query.squared_distance(&ex.features)),
        )
    });
    Ok(select_neighbors(u64::MAX, weights, &config))
}

/// One neighbor list per query, built as a parallel map over queries. The
/// result is independent of worker count: every list is computed from the
/// same read-only inputs and collected in query order.
pub fn build_affinity_cache(
    model: &EmbeddingModel,
    train: &Dataset,
    queries: &Dataset,
    config: &KernelConfig,
    workers: usize,
) -> Result<AffinityCache, AffinityError> {
    config.validate()?;
    if train.is_empty() {
        return Err(AffinityError::EmptyTrain);
    }
    check_dims(model, train, "train")?;
    check_dims(model, queries, "queries")?;

    let embedded_train = match config.mode {
        Mode::Raw => None,
        _ => Some(embed_dataset(model, train)?),
    };
    let embedded_ref = embedded_train.as_deref();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| AffinityError::BadConfig(format!("thread pool: {}", e)))?;
    let lists: Vec<NeighborList> = pool.install(|| {
        queries
            .examples()
            .par_iter()
            .map(|q| knn_embed_inner(q.id, &q.features, train, embedded_ref, model, config))
            .collect::<Result<_, _>>()
    })?;

    let mut map = BTreeMap::new();
    for list in lists {
        map.insert(list.query_id, list);
    }
    Ok(AffinityCache {
        kernel_config: config.clone(),
        model_fingerprint: model.fingerprint(),
        lists: map,
    })
}

/// Neighbor lists for a set of queries, keyed by query id, bound to the
/// producing model by fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityCache {
    pub kernel_config: KernelConfig,
    pub model_fingerprint: String,
    lists: BTreeMap<u64, NeighborList>,
}

impl AffinityCache {
    pub fn list(&self, query_id: u64) -> Option<&NeighborList> {
        self.lists.get(&query_id)
    }

    pub fn lists(&self) -> impl Iterator<Item = &NeighborList> {
        self.lists.values()
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// Errors unless every example of `data` has a neighbor list.
    pub fn ensure_covers(&self, data: &Dataset) -> Result<(), AffinityError> {
        for ex in data.examples() {
            if !self.lists.contains_key(&ex.id) {
                return Err(AffinityError::UnknownQueryId(ex.id));
            }
        }
        Ok(())
    }

    /// Errors unless the given model fingerprint matches the one recorded
    /// at build time.
    pub fn check_model(&self, model_fingerprint: &str) -> Result<(), AffinityError> {
        if self.model_fingerprint != model_fingerprint {
            return Err(AffinityError::FingerprintMismatch {
                expected: self.model_fingerprint.clone(),
                actual: model_fingerprint.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let c = &self.kernel_config;
        let mut out = String::new();
        out.push_str(CACHE_MAGIC);
        out.push('\n');
        out.push_str(&format!(
            "model {} lambda_x {} n {} agg {} mode {} bias {} exclude_self {}\n",
            self.model_fingerprint,
            fmt_f64(c.lambda_x),
            c.n,
            c.agg.as_str(),
            c.mode.as_str(),
            fmt_f64(c.bias),
            if c.exclude_self { 1 } else { 0 }
        ));
        for list in self.lists.values() {
            out.push_str(&format!("{} {}", list.query_id, list.neighbors.len()));
            for &(id, w) in &list.neighbors {
                out.push_str(&format!(" {}:{}", id, fmt_f64(w)));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, AffinityError> {
        let fmt_err = |line: usize, detail: &str| AffinityError::Format {
            line,
            detail: detail.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, magic) = lines.next().ok_or_else(|| fmt_err(1, "empty file"))?;
        if magic != CACHE_MAGIC {
            return Err(fmt_err(1, &format!("expected '{}'", CACHE_MAGIC)));
        }
        let (_, header) = lines.next().ok_or_else(|| fmt_err(2, "missing header"))?;
        let words: Vec<&str> = header.split_whitespace().collect();
        let keys = [
            "model",
            "lambda_x",
            "n",
            "agg",
            "mode",
            "bias",
            "exclude_self",
        ];
        if words.len() != 14 {
            return Err(fmt_err(2, "expected 7 'key value' header fields"));
        }
        for (slot, key) in keys.iter().enumerate() {
            if words[2 * slot] != *key {
                return Err(fmt_err(2, &format!("expected '{}' field", key)));
            }
        }
        let model_fingerprint = words[1].to_string();
        if model_fingerprint.len() != 64
            || !model_fingerprint.bytes().all(|b| b.is_ascii_hexdigit())
        {
            return Err(fmt_err(2, "model fingerprint must be 64 hex digits"));
        }
        let lambda_x: f64 = words[3].parse().map_err(|_| fmt_err(2, "bad lambda_x"))?;
        let n: usize = words[5].parse().map_err(|_| fmt_err(2, "bad n"))?;
        let agg = Agg::parse(words[7]).ok_or_else(|| fmt_err(2, "agg must be sum or max"))?;
        let mode = Mode::parse(words[9])
            .ok_or_else(|| fmt_err(2, "mode must be embedded-x, embedded-xy or raw"))?;
        let bias: f64 = words[11].parse().map_err(|_| fmt_err(2, "bad bias"))?;
        let exclude_self = match words[13] {
            "0" => false,
            "1" => true,
            _ => return Err(fmt_err(2, "exclude_self must be 0 or 1")),
        };
        let kernel_config = KernelConfig {
            lambda_x,
            mode,
            agg,
            n,
            bias,
            exclude_self,
        };
        kernel_config.validate()?;

        let mut lists = BTreeMap::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                return Err(fmt_err(line_no, "blank line in neighbor section"));
            }
            let mut parts = line.split_whitespace();
            let query_id: u64 = parts
                .next()
                .ok_or_else(|| fmt_err(line_no, "missing query id"))?
                .parse()
                .map_err(|_| fmt_err(line_no, "bad query id"))?;
            let k: usize = parts
                .next()
                .ok_or_else(|| fmt_err(line_no, "missing neighbor count"))?
                .parse()
                .map_err(|_| fmt_err(line_no, "bad neighbor count"))?;
            if k > n {
                return Err(fmt_err(line_no, "neighbor count exceeds n"));
            }
            let mut neighbors = Vec::with_capacity(k);
            for pair in parts.by_ref() {
                let (id_s, w_s) = pair
                    .split_once(':')
                    .ok_or_else(|| fmt_err(line_no, "expected id:weight"))?;
                let id: u64 = id_s
                    .parse()
                    .map_err(|_| fmt_err(line_no, "bad neighbor id"))?;
                let w: f64 = w_s.parse().map_err(|_| fmt_err(line_no, "bad weight"))?;
                if !w.is_finite() || !(0.0..=1.0).contains(&w) {
                    return Err(fmt_err(line_no, "weight must be in [0, 1]"));
                }
                if let Some(&(prev_id, prev_w)) = neighbors.last() {
                    let ordered = w < prev_w || (w == prev_w && id > prev_id);
                    if !ordered {
                        return Err(fmt_err(
                            line_no,
                            "neighbors must be sorted by descending weight, ties by ascending id",
                        ));
                    }
                }
                if exclude_self && id == query_id {
                    return Err(fmt_err(line_no, "self neighbor under exclude_self"));
                }
                neighbors.push((id, w));
            }
            if neighbors.len() != k {
                return Err(fmt_err(line_no, "neighbor count does not match entries"));
            }
            if lists
                .insert(query_id, NeighborList::new(query_id, neighbors))
                .is_some()
            {
                return Err(fmt_err(line_no, "duplicate query id"));
            }
        }
        Ok(Self {
            kernel_config,
            model_fingerprint,
            lists,
        })
    }

    /// Writes the cache and returns the content fingerprint of the bytes
    /// written.
    pub fn save(&self, path: &Path) -> Result<String, AffinityError> {
        let text = self.to_text();
        fs::write(path, &text)?;
        Ok(sha256_hex(text.as_bytes()))
    }

    /// Loads a cache and the fingerprint of the bytes on disk.
    pub fn load(path: &Path) -> Result<(Self, String), AffinityError> {
        let bytes = fs::read(path)?;
        let fingerprint = sha256_hex(&bytes);
        let text = String::from_utf8(bytes).map_err(|_| AffinityError::Format {
            line: 1,
            detail: "cache file is not utf-8".into(),
        })?;
        Ok((Self::from_text(&text)?, fingerprint))
    }
}

/// Aggregates per-neighbor contributions for one label. `factor` returns
/// the label-match factor for a neighbor (None = does not contribute).
fn g_over_list(
    neighbors: &[(u64, f64)],
    agg: Agg,
    bias: f64,
    mut factor: impl FnMut(u64) -> Option<f64>,
) -> f64 {
    match agg {
        Agg::Sum => {
            let mut acc = 0.0;
            for &(id, w) in neighbors {
                if let Some(f) = factor(id) {
                    acc += w * f;
                }
            }
            acc + bias
        }
        Agg::Max => {
            let mut best = 0.0f64;
            for &(id, w) in neighbors {
                if let Some(f) = factor(id) {
                    best = best.max(w * f);
                }
            }
            best + bias
        }
    }
}

/// G for one neighbor list with the exact-label-indicator match: aggregate
/// the weights of neighbors whose label set contains `label`, plus bias.
pub fn affinity_g_list(
    list: &NeighborList,
    train: &Dataset,
    label: usize,
    agg: Agg,
    bias: f64,
) -> Result<f64, AffinityError> {
    if label >= train.y_dim() {
        return Err(AffinityError::LabelOutOfRange {
            label,
            dim: train.y_dim(),
        });
    }
    for &(id, _) in list.neighbors() {
        if train.by_id(id).is_none() {
            return Err(AffinityError::UnknownTrainId(id));
        }
    }
    Ok(g_over_list(list.neighbors(), agg, bias, |id| {
        let ex = train.by_id(id).expect("checked above");
        if ex.has_label(label) {
            Some(1.0)
        } else {
            None
        }
    }))
}

/// G looked up through a cache. Only valid for the indicator modes; use
/// [`AffinityScorer`] for embedded-xy.
pub fn affinity_g(
    cache: &AffinityCache,
    train: &Dataset,
    query_id: u64,
    label: usize,
) -> Result<f64, AffinityError> {
    if cache.kernel_config.mode == Mode::EmbeddedXY {
        return Err(AffinityError::MissingSmoothParams);
    }
    let list = cache
        .list(query_id)
        .ok_or(AffinityError::UnknownQueryId(query_id))?;
    affinity_g_list(
        list,
        train,
        label,
        cache.kernel_config.agg,
        cache.kernel_config.bias,
    )
}

/// `G * f(x, label)`.
pub fn score_affinity(
    model: &EmbeddingModel,
    g_value: f64,
    x: &SparseVector,
    label: usize,
) -> Result<f64, ModelError> {
    Ok(g_value * model.score_linear(x, label)?)
}

/// Smooth label-match factor for embedded-xy: a kernel between the
/// candidate label's embedding and the neighbor's summed label embedding,
/// both under the model the cache was built from.
struct SmoothLabelKernel<'a> {
    model: &'a EmbeddingModel,
    lambda_y: f64,
    /// Summed label embedding V y_i per train example, by position.
    label_sums: Vec<Vec<f64>>,
}

impl<'a> SmoothLabelKernel<'a> {
    fn new(
        model: &'a EmbeddingModel,
        lambda_y: f64,
        train: &Dataset,
    ) -> Result<Self, AffinityError> {
        if !(lambda_y > 0.0) || !lambda_y.is_finite() {
            return Err(AffinityError::BadConfig(
                "lambda_y must be positive and finite".into(),
            ));
        }
        check_dims(model, train, "train")?;
        let d = model.d();
        let label_sums = train
            .examples()
            .iter()
            .map(|ex| {
                let mut acc = vec![0.0; d];
                for &l in ex.labels() {
                    let col = model.v_col(l);
                    for r in 0..d {
                        acc[r] += col[r];
                    }
                }
                acc
            })
            .collect();
        Ok(Self {
            model,
            lambda_y,
            label_sums,
        })
    }

    fn factor(&self, label: usize, train_pos: usize) -> f64 {
        kernel_weight(
            self.model.v_col(label),
            &self.label_sums[train_pos],
            self.lambda_y,
        )
    }
}

/// Answers G(query, label) for every query covered by a cache, resolving
/// neighbor ids against the training set once up front. Handles all three
/// modes; embedded-xy needs the cache's source model plus lambda_y. The
/// cache may be borrowed or owned (owned caches back test-time weighters
/// built on the fly).
pub struct AffinityScorer<'a> {
    cache: Cow<'a, AffinityCache>,
    train: &'a Dataset,
    /// Train position per example id, shared by the indicator and smooth
    /// paths.
    positions: HashMap<u64, usize>,
    smooth: Option<SmoothLabelKernel<'a>>,
}

impl<'a> AffinityScorer<'a> {
    pub fn new(
        cache: &'a AffinityCache,
        train: &'a Dataset,
        smooth_params: Option<(&'a EmbeddingModel, f64)>,
    ) -> Result<Self, AffinityError> {
        Self::build(Cow::Borrowed(cache), train, smooth_params)
    }

    pub fn new_owned(
        cache: AffinityCache,
        train: &'a Dataset,
        smooth_params: Option<(&'a EmbeddingModel, f64)>,
    ) -> Result<Self, AffinityError> {
        Self::build(Cow::Owned(cache), train, smooth_params)
    }

    fn build(
        cache: Cow<'a, AffinityCache>,
        train: &'a Dataset,
        smooth_params: Option<(&'a EmbeddingModel, f64)>,
    ) -> Result<Self, AffinityError> {
        let positions: HashMap<u64, usize> = train
            .examples()
            .iter()
            .enumerate()
            .map(|(pos, ex)| (ex.id, pos))
            .collect();
        for list in cache.lists() {
            for &(id, _) in list.neighbors() {
                if !positions.contains_key(&id) {
                    return Err(AffinityError::UnknownTrainId(id));
                }
            }
        }
        let smooth = match (cache.kernel_config.mode, smooth_params) {
            (Mode::EmbeddedXY, Some((model, lambda_y))) => {
                Some(SmoothLabelKernel::new(model, lambda_y, train)?)
            }
            (Mode::EmbeddedXY, None) => return Err(AffinityError::MissingSmoothParams),
            (_, _) => None,
        };
        Ok(Self {
            cache,
            train,
            positions,
            smooth,
        })
    }

    pub fn cache(&self) -> &AffinityCache {
        &self.cache
    }

    pub fn g(&self, query_id: u64, label: usize) -> Result<f64, AffinityError> {
        let list = self
            .cache
            .list(query_id)
            .ok_or(AffinityError::UnknownQueryId(query_id))?;
        self.g_list(list, label)
    }

    pub fn g_list(&self, list: &NeighborList, label: usize) -> Result<f64, AffinityError> {
        if label >= self.train.y_dim() {
            return Err(AffinityError::LabelOutOfRange {
                label,
                dim: self.train.y_dim(),
            });
        }
        let c = &self.cache.kernel_config;
        Ok(g_over_list(list.neighbors(), c.agg, c.bias, |id| {
            let pos = self.positions[&id];
            match &self.smooth {
                Some(kernel) => Some(kernel.factor(label, pos)),
                None => {
                    if self.train.examples()[pos].has_label(label) {
                        Some(1.0)
                    } else {
                        None
                    }
                }
            }
        }))
    }
}

/// G as a training or scoring weighter, looked up by example id. `train`
/// supplies neighbor labels; the weighted examples themselves may be a
/// different set (held-out queries), as long as the cache covers their ids:
/// callers check that with [`AffinityCache::ensure_covers`] up front, since
/// [`Weighter::weight`] has no error channel and panics on a missing list.
pub struct AffinityWeighter<'a> {
    scorer: AffinityScorer<'a>,
}

impl<'a> AffinityWeighter<'a> {
    pub fn new(
        cache: &'a AffinityCache,
        train: &'a Dataset,
        smooth_params: Option<(&'a EmbeddingModel, f64)>,
    ) -> Result<Self, AffinityError> {
        Ok(Self {
            scorer: AffinityScorer::new(cache, train, smooth_params)?,
        })
    }

    pub fn new_owned(
        cache: AffinityCache,
        train: &'a Dataset,
        smooth_params: Option<(&'a EmbeddingModel, f64)>,
    ) -> Result<Self, AffinityError> {
        Ok(Self {
            scorer: AffinityScorer::new_owned(cache, train, smooth_params)?,
        })
    }

    pub fn scorer(&self) -> &AffinityScorer<'a> {
        &self.scorer
    }
}

impl Weighter for AffinityWeighter<'_> {
    fn weight(&self, example: &Example, label: usize) -> f64 {
        self.scorer
            .g(example.id, label)
            .expect("cache must cover every weighted example id")
    }
}

/// Explicit sparse per-feature-pair weights G_ij.
#[derive(Debug, Clone)]
pub struct ExplicitPairWeights {
    x_dim: usize,
    y_dim: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

impl ExplicitPairWeights {
    pub fn new(
        x_dim: usize,
        y_dim: usize,
        entries: impl IntoIterator<Item = ((usize, usize), f64)>,
    ) -> Result<Self, AffinityError> {
        let mut map = BTreeMap::new();
        for ((i, j), g) in entries {
            if i >= x_dim || j >= y_dim {
                return Err(AffinityError::DimMismatch(format!(
                    "pair ({}, {}) out of range for {}x{}",
                    i, j, x_dim, y_dim
                )));
            }
            if !g.is_finite() {
                return Err(AffinityError::BadConfig(
                    "pair weights must be finite".into(),
                ));
            }
            map.insert((i, j), g);
        }
        Ok(Self {
            x_dim,
            y_dim,
            entries: map,
        })
    }

    pub fn constant(x_dim: usize, y_dim: usize, value: f64) -> Self {
        let entries = (0..x_dim)
            .flat_map(|i| (0..y_dim).map(move |j| ((i, j), value)))
            .collect();
        Self {
            x_dim,
            y_dim,
            entries,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries.get(&(i, j)).copied().unwrap_or(0.0)
    }
}

/// Low-rank per-feature-pair weights G_ij = g_i . g_j with x-side columns
/// g_i and y-side columns g_j of dimension d_g.
#[derive(Debug, Clone)]
pub struct LowRankPairWeights {
    d_g: usize,
    gx: Vec<Vec<f64>>,
    gy: Vec<Vec<f64>>,
}

impl LowRankPairWeights {
    pub fn new(gx: Vec<Vec<f64>>, gy: Vec<Vec<f64>>) -> Result<Self, AffinityError> {
        let d_g = gx.first().or(gy.first()).map_or(0, |c| c.len());
        for col in gx.iter().chain(gy.iter()) {
            if col.len() != d_g {
                return Err(AffinityError::DimMismatch("ragged low-rank columns".into()));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(AffinityError::BadConfig(
                    "pair weights must be finite".into(),
                ));
            }
        }
        Ok(Self { d_g, gx, gy })
    }

    pub fn d_g(&self) -> usize {
        self.d_g
    }

    /// Materializes G_ij = g_i . g_j as explicit weights.
    pub fn materialize(&self) -> Result<ExplicitPairWeights, AffinityError> {
        let mut entries = Vec::new();
        for (i, gi) in self.gx.iter().enumerate() {
            for (j, gj) in self.gy.iter().enumerate() {
                entries.push(((i, j), dot(gi, gj)));
            }
        }
        ExplicitPairWeights::new(self.gx.len(), self.gy.len(), entries)
    }
}

fn check_pair_dims(
    model: &EmbeddingModel,
    x_dim: usize,
    y_dim: usize,
    x: &SparseVector,
    y: &SparseVector,
) -> Result<(), AffinityError> {
    if model.x_dim() != x_dim || model.y_dim() != y_dim {
        return Err(AffinityError::DimMismatch(format!(
            "model is {}x{}, weights are {}x{}",
            model.x_dim(),
            model.y_dim(),
            x_dim,
            y_dim
        )));
    }
    if let Some(max) = x.max_index() {
        if max >= x_dim {
            return Err(AffinityError::DimMismatch(format!(
                "x index {} out of range",
                max
            )));
        }
    }
    if let Some(max) = y.max_index() {
        if max >= y_dim {
            return Err(AffinityError::DimMismatch(format!(
                "y index {} out of range",
                max
            )));
        }
    }
    Ok(())
}

/// `sum_ij G_ij x_i (U_i . V_j) y_j` over the nonzero entries of x and y.
pub fn score_featurepair(
    model: &EmbeddingModel,
    weights: &ExplicitPairWeights,
    x: &SparseVector,
    y: &SparseVector,
) -> Result<f64, AffinityError> {
    check_pair_dims(model, weights.x_dim, weights.y_dim, x, y)?;
    let mut acc = 0.0;
    for &(i, xv) in x.entries() {
        for &(j, yv) in y.entries() {
            let g = weights.get(i, j);
            if g != 0.0 {
                acc += g * xv * dot(model.u_col(i), model.v_col(j)) * yv;
            }
        }
    }
    Ok(acc)
}

/// `sum_ij (g_i . g_j) x_i (U_i . V_j) y_j` without materializing G.
pub fn score_lowrank(
    model: &EmbeddingModel,
    weights: &LowRankPairWeights,
    x: &SparseVector,
    y: &SparseVector,
) -> Result<f64, AffinityError> {
    check_pair_dims(model, weights.gx.len(), weights.gy.len(), x, y)?;
    let mut acc = 0.0;
    for &(i, xv) in x.entries() {
        for &(j, yv) in y.entries() {
            let g = dot(&weights.gx[i], &weights.gy[j]);
            acc += g * xv * dot(model.u_col(i), model.v_col(j)) * yv;
        }
    }
    Ok(acc)
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_pair_lambda(m: usize, mut dist2: impl FnMut(usize, usize) -> f64) -> f64 {
    if m < 2 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(MEDIAN_PAIR_SEED);
    let mut d2s = Vec::with_capacity(MEDIAN_PAIRS);
    for _ in 0..MEDIAN_PAIRS {
        let a = rng.gen_range(0..m);
        let b = loop {
            let b = rng.gen_range(0..m);
            if b != a {
                break b;
            }
        };
        d2s.push(dist2(a, b));
    }
    let med = median(d2s);
    if med.is_finite() && med > 0.0 {
        1.0 / med
    } else {
        1.0
    }
}

/// Scale-adaptive default for lambda_x: the reciprocal of the median
/// squared distance over 1000 internally seeded random training pairs,
/// measured in the mode's distance space. Falls back to 1.0 when the
/// median is degenerate (fewer than 2 examples, or identical points).
pub fn lambda_x_median_heuristic(
    model: &EmbeddingModel,
    train: &Dataset,
    mode: Mode,
) -> Result<f64, AffinityError> {
    if train.len() < 2 {
        return Ok(1.0);
    }
    check_dims(model, train, "train")?;
    match mode {
        Mode::Raw => Ok(lambda_raw_median_heuristic(train)),
        _ => {
            let es = embed_dataset(model, train)?;
            Ok(median_pair_lambda(train.len(), |a, b| {
                squared_euclid(&es[a], &es[b])
            }))
        }
    }
}

/// The raw feature-space variant, for baselines with no model at all.
pub fn lambda_raw_median_heuristic(train: &Dataset) -> f64 {
    median_pair_lambda(train.len(), |a, b| {
        train.examples()[a]
            .features
            .squared_distance(&train.examples()[b].features)
    })
}

/// Same heuristic over label embedding columns, for the embedded-xy label
/// kernel.
pub fn lambda_y_median_heuristic(model: &EmbeddingModel) -> f64 {
    median_pair_lambda(model.y_dim(), |a, b| {
        squared_euclid(model.v_col(a), model.v_col(b))
    })
}

#[cfg(test)]
mod tests {
    // Oracles below are written as explicit index loops on purpose, to stay
    // independent of the library's own iteration style.
    #![allow(clippy::needless_range_loop)]

    use super::*;
    use crate::data::{parse_dataset, ParseOptions};
    use std::io::Cursor;

    fn sv(entries: &[(usize, f64)]) -> SparseVector {
        SparseVector::new(entries.to_vec()).unwrap()
    }

    fn identity_model(dim: usize, y_dim: usize) -> EmbeddingModel {
        let eye = |k: usize, n: usize| {
            (0..n)
                .map(|c| {
                    let mut col = vec![0.0; k];
                    col[c % k] = 1.0;
                    col
                })
                .collect::<Vec<_>>()
        };
        EmbeddingModel::from_columns(&eye(dim, dim), &eye(dim, y_dim), 1e9)
    }

    /// Five points on the plane with a three-way distance tie from (1,0).
    fn line_fixture() -> Dataset {
        let text = "#dims 2 3\n\
                    0 0:0.5\n\
                    1 0:2.0\n\
                    1 1:2.0\n\
                    2 0:1.0 1:1.0\n\
                    0 0:5.0 1:5.0\n";
        parse_dataset(Cursor::new(text), ParseOptions::default()).unwrap()
    }

    #[test]
    fn kernel_weight_examples() {
        let u = [0.3, -0.7, 2.0];
        assert_eq!(kernel_weight(&u, &u, 2.5), 1.0);

        let d = (2.0f64).ln().sqrt();
        assert!((kernel_weight(&[0.0], &[d], 1.0) - 0.5).abs() < 1e-15);

        let w = kernel_weight(&[1.0, 0.0], &[0.0, 1.0], 0.5);
        assert_eq!(w, (-1.0f64).exp());
        assert!((w - 0.3678794).abs() < 1e-7);
    }

    #[test]
    fn kernel_weight_strictly_decreasing_in_distance() {
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let d = k as f64 * 0.37;
            let w = kernel_weight(&[0.0], &[d], 0.8);
            assert!(w <= 1.0 && w > 0.0);
            assert!(w < last || d == 0.0);
            last = w;
        }
    }

    /// Independent oracle: dense distances, repeated max-extraction instead
    /// of a sort.
    fn brute_force_knn(
        model: &EmbeddingModel,
        train: &Dataset,
        query_id: u64,
        query: &SparseVector,
        config: &KernelConfig,
    ) -> Vec<(u64, f64)> {
        let densify = |v: &SparseVector, dim: usize| {
            let mut out = vec![0.0; dim];
            for &(i, x) in v.entries() {
                out[i] = x;
            }
            out
        };
        let point = |v: &SparseVector| match config.mode {
            Mode::Raw => densify(v, train.x_dim()),
            _ => model.embed_x(v).unwrap(),
        };
        let q = point(query);
        let mut pool: Vec<(u64, f64)> = train
            .examples()
            .iter()
            .filter(|ex| !(config.exclude_self && ex.id == query_id))
            .map(|ex| {
                let p = point(&ex.features);
                let d2: f64 = q.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
                (ex.id, (-config.lambda_x * d2).exp())
            })
            .collect();
        let mut picked = Vec::new();
        while picked.len() < config.n && !pool.is_empty() {
            let mut best = 0;
            for c in 1..pool.len() {
                let better = pool[c].1 > pool[best].1
                    || (pool[c].1 == pool[best].1 && pool[c].0 < pool[best].0);
                if better {
                    best = c;
                }
            }
            picked.push(pool.remove(best));
        }
        picked
    }

    #[test]
    fn knn_self_query_is_first_neighbor_with_weight_one() {
        let train = line_fixture();
        let model = identity_model(2, 3);
        let config = KernelConfig {
            exclude_self: false,
            n: 2,
            ..Default::default()
        };
        let q = &train.examples()[3];
        let list = knn_embed(&model, &train, q.id, &q.features, &config).unwrap();
        assert_eq!(list.neighbors()[0], (3, 1.0));
    }

    #[test]
    fn knn_exhausts_small_training_sets() {
        let train = line_fixture();
        let model = identity_model(2, 3);
        let config = KernelConfig {
            n: 50,
            exclude_self: false,
            ..Default::default()
        };
        let q = sv(&[(0, 1.0)]);
        assert_eq!(
            knn_embed(&model, &train, 99, &q, &config)
                .unwrap()
                .neighbors()
                .len(),
            5
        );
        let cfg_excl = KernelConfig {
            n: 50,
            exclude_self: true,
            ..Default::default()
        };
        assert_eq!(
            knn_embed(&model, &train, 2, &q, &cfg_excl)
                .unwrap()
                .neighbors()
                .len(),
            4
        );
    }

    #[test]
    fn knn_matches_brute_force_oracle_with_ties() {
        let train = line_fixture();
        let model = identity_model(2, 3);
        // Query (1, 0): examples 0, 1, 3 are all at squared distance 0.25,
        // 1.0, ... check the full order against the oracle either way.
        let q = sv(&[(0, 1.0)]);
        for n in [1, 3, 5] {
            for exclude_self in [false, true] {
                for mode in [Mode::EmbeddedX, Mode::Raw] {
                    let config = KernelConfig {
                        n,
                        exclude_self,
                        mode,
                        lambda_x: 0.7,
                        ..Default::default()
                    };
                    let got = knn_embed(&model, &train, 1, &q, &config).unwrap();
                    let want = brute_force_knn(&model, &train, 1, &q, &config);
                    assert_eq!(got.neighbors().len(), want.len());
                    for (g, w) in got.neighbors().iter().zip(&want) {
                        assert_eq!(g.0, w.0, "ids differ (n={}, excl={})", n, exclude_self);
                        assert!((g.1 - w.1).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn knn_tie_order_is_ascending_id() {
        // Three training points equidistant from the query.
        let text = "#dims 2 2\n\
                    0 0:2.0\n\
                    1 1:2.0\n\
                    0 0:-2.0\n";
        let train = parse_dataset(Cursor::new(text), ParseOptions::default()).unwrap();
        let model = identity_model(2, 2);
        let config = KernelConfig {
            n: 2,
            exclude_self: false,
            ..Default::default()
        };
        let list = knn_embed(&model, &train, 100, &SparseVector::empty(), &config).unwrap();
        let ids: Vec<u64> = list.neighbors().iter().map(|(id, _)| *id).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn identity_embedding_matches_raw_mode() {
        let train = line_fixture();
        let model = identity_model(2, 3);
        let q = sv(&[(0, 0.9), (1, 0.2)]);
        let base = KernelConfig {
            n: 4,
            lambda_x: 1.3,
            ..Default::default()
        };
        let emb = knn_embed(
            &model,
            &train,
            7,
            &q,
            &KernelConfig {
                mode: Mode::EmbeddedX,
                ..base.clone()
            },
        )
        .unwrap();
        let raw = knn_embed(
            &model,
            &train,
            7,
            &q,
            &KernelConfig {
                mode: Mode::Raw,
                ..base
            },
        )
        .unwrap();
        assert_eq!(emb.neighbors().len(), raw.neighbors().len());
        for (a, b) in emb.neighbors().iter().zip(raw.neighbors()) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_rejects_empty_train_and_bad_dims() {
        let model = identity_model(2, 3);
        let empty = Dataset::new(vec![], 2, 3).unwrap();
        let config = KernelConfig::default();
        assert!(matches!(
            knn_embed(&model, &empty, 0, &SparseVector::empty(), &config),
            Err(AffinityError::EmptyTrain)
        ));
        let train = line_fixture();
        assert!(matches!(
            knn_embed(&model, &train, 0, &sv(&[(9, 1.0)]), &config),
            Err(AffinityError::DimMismatch(_))
        ));
    }

    #[test]
    fn cache_matches_individual_searches() {
        let train = line_fixture();
        let model = identity_model(2, 3);
        let config = KernelConfig {
            n: 3,
            ..Default::default()
        };
        let cache = build_affinity_cache(&model, &train, &train, &config, 1).unwrap();
        assert_eq!(cache.len(), train.len());
        for q in train.examples() {
            let single = knn_embed(&model, &train, q.id, &q.features, &config).unwrap();
            assert_eq!(cache.list(q.id).unwrap(), &single);
        }
        assert_eq!(cache.model_fingerprint, model.fingerprint());
    }

    #[test]
    fn cache_is_worker_count_invariant() {
        let train = line_fixture();
        let model = identity_model(2, 3);
        let config = KernelConfig {
            n: 2,
            ..Default::default()
        };
        let one = build_affinity_cache(&model, &train, &train, &config, 1).unwrap();
        let four = build_affinity_cache(&model, &train, &train, &config, 4).unwrap();
        assert_eq!(one.to_text(), four.to_text());
    }

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let train = line_fixture();
        let model = identity_model(2, 3);
        let config = KernelConfig {
            n: 3,
            lambda_x: 0.37,
            bias: 0.001,
            agg: Agg::Max,
            ..Default::default()
        };
        let cache = build_affinity_cache(&model, &train, &train, &config, 1).unwrap();
        let text = cache.to_text();
        let back = AffinityCache::from_text(&text).unwrap();
        assert_eq!(back, cache);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn cache_file_save_load_and_fingerprint_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.awe");
        let train = line_fixture();
        let model = identity_model(2, 3);
        let cache =
            build_affinity_cache(&model, &train, &train, &KernelConfig::default(), 1).unwrap();
        let fp = cache.save(&path).unwrap();
        let (loaded, fp2) = AffinityCache::load(&path).unwrap();
        assert_eq!(fp, fp2);
        assert_eq!(loaded, cache);
        assert!(loaded.check_model(&model.fingerprint()).is_ok());
        let other = identity_model(2, 2);
        assert!(matches!(
            loaded.check_model(&other.fingerprint()),
            Err(AffinityError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn cache_parser_rejects_corruption() {
        let train = line_fixture();
        let model = identity_model(2, 3);
        let cache =
            build_affinity_cache(&model, &train, &train, &KernelConfig::default(), 1).unwrap();
        let text = cache.to_text();
        assert!(AffinityCache::from_text(&text.replace(CACHE_MAGIC, "junk v9")).is_err());
        assert!(AffinityCache::from_text(&text.replace("agg sum", "agg avg")).is_err());
        // Out-of-order neighbors: swap the first list's first two entries.
        let mut rows: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        let parts: Vec<String> = rows[2].split_whitespace().map(|s| s.to_string()).collect();
        if parts.len() >= 4 {
            let mut swapped = parts.clone();
            swapped.swap(2, 3);
            rows[2] = swapped.join(" ");
            let bad = rows.join("\n") + "\n";
            assert!(AffinityCache::from_text(&bad).is_err());
        }
        // Neighbor count mismatch: bump the declared k on the first list.
        let mut rows: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        let mut parts: Vec<String> = rows[2].split_whitespace().map(|s| s.to_string()).collect();
        parts[1] = (parts.len() - 1).to_string();
        rows[2] = parts.join(" ");
        let bumped = rows.join("\n") + "\n";
        assert!(AffinityCache::from_text(&bumped).is_err());
    }

    fn tiny_list() -> (NeighborList, Dataset) {
        // Train: id 0 has labels {0, 2}, id 1 has {1}, id 2 has {2}.
        let text = "#dims 2 3\n\
                    0,2 0:1.0\n\
                    1 0:2.0\n\
                    2 1:1.0\n";
        let train = parse_dataset(Cursor::new(text), ParseOptions::default()).unwrap();
        let list = NeighborList::new(9, vec![(1, 0.5), (0, 0.3), (2, 0.3)]);
        (list, train)
    }

    #[test]
    fn affinity_g_sum_max_and_bias() {
        let (list, train) = tiny_list();
        // Label 2 matches neighbors 0 (0.3) and 2 (0.3).
        let sum = affinity_g_list(&list, &train, 2, Agg::Sum, 0.0).unwrap();
        assert!((sum - 0.6).abs() < 1e-12);
        let max = affinity_g_list(&list, &train, 2, Agg::Max, 0.0).unwrap();
        assert!((max - 0.3).abs() < 1e-12);
        // Label 1 matches only neighbor 1 (0.5).
        assert!((affinity_g_list(&list, &train, 1, Agg::Sum, 0.0).unwrap() - 0.5).abs() < 1e-12);
        // Label 0 matches neighbor 0.
        assert!((affinity_g_list(&list, &train, 0, Agg::Max, 0.0).unwrap() - 0.3).abs() < 1e-12);
        // A label carried by no neighbor returns the bias exactly.
        let none = NeighborList::new(9, vec![(1, 0.5)]);
        assert_eq!(
            affinity_g_list(&none, &train, 2, Agg::Sum, 0.01).unwrap(),
            0.01
        );
        assert_eq!(
            affinity_g_list(&none, &train, 2, Agg::Max, 0.01).unwrap(),
            0.01
        );
    }

    #[test]
    fn affinity_g_error_paths() {
        let (list, train) = tiny_list();
        assert!(matches!(
            affinity_g_list(&list, &train, 7, Agg::Sum, 0.0),
            Err(AffinityError::LabelOutOfRange { label: 7, dim: 3 })
        ));
        let ghost = NeighborList::new(9, vec![(42, 0.5)]);
        assert!(matches!(
            affinity_g_list(&ghost, &train, 0, Agg::Sum, 0.0),
            Err(AffinityError::UnknownTrainId(42))
        ));
        let model = identity_model(2, 3);
        let cache =
            build_affinity_cache(&model, &train, &train, &KernelConfig::default(), 1).unwrap();
        assert!(matches!(
            affinity_g(&cache, &train, 777, 0),
            Err(AffinityError::UnknownQueryId(777))
        ));
    }

    #[test]
    fn scorer_matches_free_function_and_weighter() {
        let (_, train) = tiny_list();
        let model = identity_model(2, 3);
        let config = KernelConfig {
            n: 2,
            bias: 0.005,
            ..Default::default()
        };
        let cache = build_affinity_cache(&model, &train, &train, &config, 1).unwrap();
        let scorer = AffinityScorer::new(&cache, &train, None).unwrap();
        let weighter = AffinityWeighter::new(&cache, &train, None).unwrap();
        for q in train.examples() {
            for label in 0..3 {
                let a = affinity_g(&cache, &train, q.id, label).unwrap();
                let b = scorer.g(q.id, label).unwrap();
                let c = weighter.weight(q, label);
                assert_eq!(a, b);
                assert_eq!(b, c);
                assert!(a >= config.bias);
            }
        }
    }

    #[test]
    fn smooth_label_mode_requires_params_and_weights_all_neighbors() {
        let (_, train) = tiny_list();
        let model = identity_model(2, 3);
        let config = KernelConfig {
            mode: Mode::EmbeddedXY,
            n: 3,
            ..Default::default()
        };
        let cache = build_affinity_cache(&model, &train, &train, &config, 1).unwrap();
        assert!(matches!(
            AffinityScorer::new(&cache, &train, None),
            Err(AffinityError::MissingSmoothParams)
        ));
        let scorer = AffinityScorer::new(&cache, &train, Some((&model, 0.5))).unwrap();
        // Every neighbor contributes under the smooth label kernel, so G
        // exceeds 0 even for labels no neighbor carries exactly.
        let g = scorer.g(0, 1).unwrap();
        assert!(g > 0.0);
        // Oracle for one value: neighbors of query 0 with exclude_self are
        // ids 1 and 2 (identity embedding distances), each contributing
        // w_x * exp(-lambda_y ||V_label - V y_i||^2).
        let list = cache.list(0).unwrap();
        let mut want = 0.0;
        for &(id, w) in list.neighbors() {
            let ex = train.by_id(id).unwrap();
            let mut vy = vec![0.0; 2];
            for &l in ex.labels() {
                for r in 0..2 {
                    vy[r] += model.v_col(l)[r];
                }
            }
            let d2: f64 = model
                .v_col(1)
                .iter()
                .zip(&vy)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            want += w * (-0.5 * d2).exp();
        }
        assert!((g - want).abs() < 1e-12);
    }

    #[test]
    fn score_affinity_reduces_and_annihilates() {
        let model = identity_model(2, 3);
        let x = sv(&[(0, 0.7), (1, -0.3)]);
        for label in 0..3 {
            let lin = model.score_linear(&x, label).unwrap();
            assert_eq!(score_affinity(&model, 1.0, &x, label).unwrap(), lin);
            assert_eq!(score_affinity(&model, 0.0, &x, label).unwrap(), 0.0);
            assert!((score_affinity(&model, 0.8, &x, label).unwrap() - 0.8 * lin).abs() < 1e-15);
        }
    }

    fn random_model_xy(
        d: usize,
        x_dim: usize,
        y_dim: usize,
        seed: u64,
    ) -> (EmbeddingModel, SparseVector, SparseVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = EmbeddingModel::init_random(d, x_dim, y_dim, 1e9, 1.0, &mut rng);
        let x = SparseVector::new(vec![
            (0, rng.gen_range(-1.0..1.0)),
            (2, rng.gen_range(-1.0..1.0)),
            (4, rng.gen_range(-1.0..1.0)),
        ])
        .unwrap();
        let y = SparseVector::new(vec![
            (1, rng.gen_range(-1.0..1.0)),
            (3, rng.gen_range(-1.0..1.0)),
        ])
        .unwrap();
        (model, x, y)
    }

    #[test]
    fn featurepair_constant_one_reduces_to_linear() {
        let (model, x, _) = random_model_xy(3, 5, 4, 11);
        let ones = ExplicitPairWeights::constant(5, 4, 1.0);
        for label in 0..4 {
            let y = sv(&[(label, 1.0)]);
            let fp = score_featurepair(&model, &ones, &x, &y).unwrap();
            let lin = model.score_linear(&x, label).unwrap();
            assert!((fp - lin).abs() < 1e-12);
        }
        let zeros = ExplicitPairWeights::constant(5, 4, 0.0);
        assert_eq!(
            score_featurepair(&model, &zeros, &x, &sv(&[(0, 1.0)])).unwrap(),
            0.0
        );
    }

    #[test]
    fn featurepair_matches_double_sum_oracle() {
        let (model, x, y) = random_model_xy(3, 5, 4, 23);
        let mut entries = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..5 {
            for j in 0..4 {
                entries.push(((i, j), rng.gen_range(-2.0..2.0)));
            }
        }
        let weights = ExplicitPairWeights::new(5, 4, entries).unwrap();
        let got = score_featurepair(&model, &weights, &x, &y).unwrap();

        // Oracle: dense double sum over every (i, j) with its own dot.
        let densify = |v: &SparseVector, dim: usize| {
            let mut out = vec![0.0; dim];
            for &(i, val) in v.entries() {
                out[i] = val;
            }
            out
        };
        let xd = densify(&x, 5);
        let yd = densify(&y, 4);
        let mut want = 0.0;
        for i in 0..5 {
            for j in 0..4 {
                let uv: f64 = model
                    .u_col(i)
                    .iter()
                    .zip(model.v_col(j))
                    .map(|(a, b)| a * b)
                    .sum();
                want += weights.get(i, j) * xd[i] * uv * yd[j];
            }
        }
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn lowrank_reduces_and_matches_materialized() {
        let (model, x, y) = random_model_xy(3, 5, 4, 31);

        // d_g = 1 with all-ones factors is the constant G = 1.
        let ones = LowRankPairWeights::new(vec![vec![1.0]; 5], vec![vec![1.0]; 4]).unwrap();
        for label in 0..4 {
            let yl = sv(&[(label, 1.0)]);
            let lr = score_lowrank(&model, &ones, &x, &yl).unwrap();
            let lin = model.score_linear(&x, label).unwrap();
            assert!((lr - lin).abs() < 1e-12);
        }

        let zero_y =
            LowRankPairWeights::new(vec![vec![1.0, 2.0]; 5], vec![vec![0.0, 0.0]; 4]).unwrap();
        assert_eq!(score_lowrank(&model, &zero_y, &x, &y).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let gx: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let gy: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let lowrank = LowRankPairWeights::new(gx, gy).unwrap();
        let materialized = lowrank.materialize().unwrap();
        let a = score_lowrank(&model, &lowrank, &x, &y).unwrap();
        let b = score_featurepair(&model, &materialized, &x, &y).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn median_heuristic_scales_with_the_data() {
        let train = line_fixture();
        let model = identity_model(2, 3);
        let lam = lambda_x_median_heuristic(&model, &train, Mode::EmbeddedX).unwrap();
        assert!(lam.is_finite() && lam > 0.0);
        // Doubling every feature quadruples squared distances, so the
        // heuristic returns exactly a quarter of the original.
        let doubled_text = {
            let mut out = String::from("#dims 2 3\n");
            for ex in train.examples() {
                let labels: Vec<String> = ex.labels().iter().map(|l| l.to_string()).collect();
                out.push_str(&labels.join(","));
                for &(i, v) in ex.features.entries() {
                    out.push_str(&format!(" {}:{}", i, 2.0 * v));
                }
                out.push('\n');
            }
            out
        };
        let doubled = parse_dataset(Cursor::new(doubled_text), ParseOptions::default()).unwrap();
        let lam2 = lambda_x_median_heuristic(&model, &doubled, Mode::EmbeddedX).unwrap();
        assert!((lam2 - lam / 4.0).abs() <= 1e-12 * lam.abs());
        // Degenerate inputs fall back to 1.0.
        let single =
            parse_dataset(Cursor::new("#dims 2 3\n0 0:1.0\n"), ParseOptions::default()).unwrap();
        assert_eq!(
            lambda_x_median_heuristic(&model, &single, Mode::EmbeddedX).unwrap(),
            1.0
        );
        let lam_y = lambda_y_median_heuristic(&model);
        assert!(lam_y.is_finite() && lam_y > 0.0);
    }

    #[test]
    fn g_algebra_bounds_hold_on_fixture() {
        let train = line_fixture();
        let model = identity_model(2, 3);
        let full = KernelConfig {
            n: 100,
            exclude_self: false,
            ..Default::default()
        };
        let clipped = KernelConfig {
            n: 2,
            exclude_self: false,
            ..Default::default()
        };
        for q in train.examples() {
            let full_list = knn_embed(&model, &train, q.id, &q.features, &full).unwrap();
            let top = knn_embed(&model, &train, q.id, &q.features, &clipped).unwrap();
            for label in 0..3 {
                let g_sum = affinity_g_list(&top, &train, label, Agg::Sum, 0.0).unwrap();
                let g_max = affinity_g_list(&top, &train, label, Agg::Max, 0.0).unwrap();
                assert!(g_max <= g_sum + 1e-15);
                assert!(g_sum <= clipped.n as f64 * g_max + 1e-15);
                let g_full = affinity_g_list(&full_list, &train, label, Agg::Sum, 0.0).unwrap();
                assert!(g_sum <= g_full + 1e-15);
            }
        }
    }
}
