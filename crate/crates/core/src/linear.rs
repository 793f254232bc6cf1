//! Bilinear embedding scorer `f(x, y) = x^T U^T V y` and its WARP
//! stochastic trainer.
//!
//! The trainer is generic over a [`Weighter`] supplying a per-(example,
//! label) factor `G`; scoring inside the training loop uses the weighted
//! form `G(x, y) * (U x . V_y)` on positives and negatives alike, so the
//! trained objective matches the deployed scorer. [`UnitWeighter`] recovers
//! plain unweighted training bit for bit.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Dataset, Example, SparseVector};
use crate::util::{fmt_f64, sha256_hex};

pub const MODEL_MAGIC: &str = "awe-model v1";

/// Slack allowed on the max-norm invariant after projection rounding.
pub const NORM_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad model file at line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error("model contains a non-finite entry")]
    NonFinite,
    #[error("feature index {index} out of range (x dim {dim})")]
    FeatureIndexOutOfRange { index: usize, dim: usize },
    #[error("label {label} out of range (y dim {dim})")]
    LabelOutOfRange { label: usize, dim: usize },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("training example {id} has an empty label set")]
    ExampleWithoutLabels { id: u64 },
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("initial model dims (d={d}, dx={dx}, dy={dy}) do not match dataset/config")]
    InitialModelMismatch { d: usize, dx: usize, dy: usize },
}

/// The matrices `U` (d x Dx) and `V` (d x Dy), stored column major. Column
/// `U_i` is the embedding of input feature `i`, column `V_j` of label `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    d: usize,
    x_dim: usize,
    y_dim: usize,
    max_norm: f64,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl EmbeddingModel {
    pub fn zeros(d: usize, x_dim: usize, y_dim: usize, max_norm: f64) -> Self {
        Self {
            d,
            x_dim,
            y_dim,
            max_norm,
            u: vec![0.0; d * x_dim],
            v: vec![0.0; d * y_dim],
        }
    }

    /// Builds a model from explicit columns; panics on inconsistent lengths.
    pub fn from_columns(u_cols: &[Vec<f64>], v_cols: &[Vec<f64>], max_norm: f64) -> Self {
        let d = u_cols.first().map_or(0, |c| c.len());
        assert!(d > 0, "need at least one U column");
        let mut model = Self::zeros(d, u_cols.len(), v_cols.len(), max_norm);
        for (i, col) in u_cols.iter().enumerate() {
            assert_eq!(col.len(), d);
            model.u_col_mut(i).copy_from_slice(col);
        }
        for (j, col) in v_cols.iter().enumerate() {
            assert_eq!(col.len(), d);
            model.v_col_mut(j).copy_from_slice(col);
        }
        model
    }

    /// I.i.d. zero-mean uniform init with scale `init_scale / sqrt(d)`,
    /// followed by projection onto the max-norm ball.
    pub fn init_random(
        d: usize,
        x_dim: usize,
        y_dim: usize,
        max_norm: f64,
        init_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut model = Self::zeros(d, x_dim, y_dim, max_norm);
        let scale = init_scale / (d as f64).sqrt();
        for w in model.u.iter_mut() {
            *w = (2.0 * rng.gen::<f64>() - 1.0) * scale;
        }
        for w in model.v.iter_mut() {
            *w = (2.0 * rng.gen::<f64>() - 1.0) * scale;
        }
        for i in 0..x_dim {
            model.project_u(i);
        }
        for j in 0..y_dim {
            model.project_v(j);
        }
        model
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn max_norm(&self) -> f64 {
        self.max_norm
    }

    pub fn set_max_norm(&mut self, c: f64) {
        self.max_norm = c;
    }

    pub fn u_col(&self, i: usize) -> &[f64] {
        &self.u[i * self.d..(i + 1) * self.d]
    }

    pub fn v_col(&self, j: usize) -> &[f64] {
        &self.v[j * self.d..(j + 1) * self.d]
    }

    pub fn u_col_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.u[i * self.d..(i + 1) * self.d]
    }

    pub fn v_col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.v[j * self.d..(j + 1) * self.d]
    }

    fn project_u(&mut self, i: usize) {
        let c = self.max_norm;
        project_column(self.u_col_mut(i), c);
    }

    fn project_v(&mut self, j: usize) {
        let c = self.max_norm;
        project_column(self.v_col_mut(j), c);
    }

    /// Projects every column onto the max-norm ball. Used when adopting a
    /// warm-start model under a different `C`.
    pub fn project_all(&mut self) {
        for i in 0..self.x_dim {
            self.project_u(i);
        }
        for j in 0..self.y_dim {
            self.project_v(j);
        }
    }

    /// `U x`: the sparse combination of feature columns.
    pub fn embed_x(&self, x: &SparseVector) -> Result<Vec<f64>, ModelError> {
        if let Some(max) = x.max_index() {
            if max >= self.x_dim {
                return Err(ModelError::FeatureIndexOutOfRange {
                    index: max,
                    dim: self.x_dim,
                });
            }
        }
        let mut out = vec![0.0; self.d];
        for &(i, xv) in x.entries() {
            let col = self.u_col(i);
            for r in 0..self.d {
                out[r] += xv * col[r];
            }
        }
        Ok(out)
    }

    /// `f(x, label) = (U x) . V_label`, the one-hot-y case of the bilinear
    /// form.
    pub fn score_linear(&self, x: &SparseVector, label: usize) -> Result<f64, ModelError> {
        if label >= self.y_dim {
            return Err(ModelError::LabelOutOfRange {
                label,
                dim: self.y_dim,
            });
        }
        let e = self.embed_x(x)?;
        Ok(dot(&e, self.v_col(label)))
    }

    /// Scores a label against a precomputed embedding `U x`.
    pub fn score_from_embedding(&self, embedding: &[f64], label: usize) -> f64 {
        dot(embedding, self.v_col(label))
    }

    pub fn max_column_norm(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.x_dim {
            worst = worst.max(norm(self.u_col(i)));
        }
        for j in 0..self.y_dim {
            worst = worst.max(norm(self.v_col(j)));
        }
        worst
    }

    /// Canonical versioned text serialization; round-trips bit exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MODEL_MAGIC);
        out.push('\n');
        out.push_str(&format!(
            "d {} dx {} dy {} C {}\n",
            self.d,
            self.x_dim,
            self.y_dim,
            fmt_f64(self.max_norm)
        ));
        for i in 0..self.x_dim {
            push_row(&mut out, self.u_col(i));
        }
        for j in 0..self.y_dim {
            push_row(&mut out, self.v_col(j));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines().enumerate();
        let (_, magic) = lines.next().ok_or_else(|| format_err(1, "empty file"))?;
        if magic != MODEL_MAGIC {
            return Err(format_err(1, &format!("expected '{}'", MODEL_MAGIC)));
        }
        let (_, header) = lines
            .next()
            .ok_or_else(|| format_err(2, "missing header"))?;
        let words: Vec<&str> = header.split_whitespace().collect();
        if words.len() != 8
            || words[0] != "d"
            || words[2] != "dx"
            || words[4] != "dy"
            || words[6] != "C"
        {
            return Err(format_err(2, "expected 'd <d> dx <Dx> dy <Dy> C <C>'"));
        }
        let d: usize = words[1].parse().map_err(|_| format_err(2, "bad d"))?;
        let x_dim: usize = words[3].parse().map_err(|_| format_err(2, "bad dx"))?;
        let y_dim: usize = words[5].parse().map_err(|_| format_err(2, "bad dy"))?;
        let max_norm: f64 = words[7].parse().map_err(|_| format_err(2, "bad C"))?;
        if d == 0 || !max_norm.is_finite() || max_norm <= 0.0 {
            return Err(format_err(2, "d and C must be positive"));
        }

        let mut model = Self::zeros(d, x_dim, y_dim, max_norm);
        for i in 0..x_dim {
            let (line_no, line) = lines
                .next()
                .ok_or_else(|| format_err(3 + i, "missing U column"))?;
            parse_row(line, line_no + 1, model.u_col_mut(i))?;
        }
        for j in 0..y_dim {
            let (line_no, line) = lines
                .next()
                .ok_or_else(|| format_err(3 + x_dim + j, "missing V column"))?;
            parse_row(line, line_no + 1, model.v_col_mut(j))?;
        }
        if let Some((line_no, line)) = lines.next() {
            if !line.trim().is_empty() {
                return Err(format_err(line_no + 1, "trailing content"));
            }
        }
        Ok(model)
    }

    /// Writes the model and returns the content fingerprint of the bytes
    /// written.
    pub fn save(&self, path: &Path) -> Result<String, ModelError> {
        let text = self.to_text();
        fs::write(path, &text)?;
        Ok(sha256_hex(text.as_bytes()))
    }

    /// Loads a model and the fingerprint of the bytes on disk.
    pub fn load(path: &Path) -> Result<(Self, String), ModelError> {
        let bytes = fs::read(path)?;
        let fingerprint = sha256_hex(&bytes);
        let text =
            String::from_utf8(bytes).map_err(|_| format_err(1, "model file is not utf-8"))?;
        let model = Self::from_text(&text)?;
        Ok((model, fingerprint))
    }

    /// Fingerprint of the canonical serialization; equals the on-disk
    /// fingerprint for files written by [`EmbeddingModel::save`].
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

fn format_err(line: usize, detail: &str) -> ModelError {
    ModelError::Format {
        line,
        detail: detail.to_string(),
    }
}

fn push_row(out: &mut String, col: &[f64]) {
    for (r, &w) in col.iter().enumerate() {
        if r > 0 {
            out.push(' ');
        }
        out.push_str(&fmt_f64(w));
    }
    out.push('\n');
}

fn parse_row(line: &str, line_no: usize, into: &mut [f64]) -> Result<(), ModelError> {
    let mut count = 0;
    for (r, word) in line.split_whitespace().enumerate() {
        if r >= into.len() {
            return Err(format_err(line_no, "too many entries in row"));
        }
        let w: f64 = word
            .parse()
            .map_err(|_| format_err(line_no, &format!("bad float '{}'", word)))?;
        if !w.is_finite() {
            return Err(ModelError::NonFinite);
        }
        into[r] = w;
        count += 1;
    }
    if count != into.len() {
        return Err(format_err(
            line_no,
            &format!("expected {} entries, got {}", into.len(), count),
        ));
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

fn norm(col: &[f64]) -> f64 {
    dot(col, col).sqrt()
}

fn project_column(col: &mut [f64], max_norm: f64) {
    let nrm2 = dot(col, col);
    if nrm2 > max_norm * max_norm {
        let scale = max_norm / nrm2.sqrt();
        for w in col.iter_mut() {
            *w *= scale;
        }
    }
}

/// WARP hyperparameters. `max_negative_trials` of `None` means `Dy - 1`.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub epochs: usize,
    pub max_negative_trials: Option<usize>,
    pub seed: u64,
    pub init_scale: f64,
    pub max_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            learning_rate: 0.01,
            margin: 1.0,
            epochs: 30,
            max_negative_trials: None,
            seed: 0,
            init_scale: 1.0,
            max_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.dim == 0 {
            return Err(TrainError::BadConfig("dim must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig(
                "learning rate must be positive".into(),
            ));
        }
        if !(self.margin > 0.0) {
            return Err(TrainError::BadConfig("margin must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be positive".into()));
        }
        if self.max_negative_trials == Some(0) {
            return Err(TrainError::BadConfig(
                "max negative trials must be positive".into(),
            ));
        }
        if !(self.init_scale > 0.0) {
            return Err(TrainError::BadConfig("init scale must be positive".into()));
        }
        if !(self.max_norm > 0.0) {
            return Err(TrainError::BadConfig("max norm must be positive".into()));
        }
        Ok(())
    }
}

/// Per-(example, label) weight `G` applied multiplicatively to the bilinear
/// score. Implementations must be cheap: the trainer consults it for every
/// sampled label.
pub trait Weighter: Sync {
    fn weight(&self, example: &Example, label: usize) -> f64;
}

/// `G = 1` everywhere: plain unweighted training.
pub struct UnitWeighter;

impl Weighter for UnitWeighter {
    fn weight(&self, _example: &Example, _label: usize) -> f64 {
        1.0
    }
}

impl<F: Fn(&Example, usize) -> f64 + Sync> Weighter for F {
    fn weight(&self, example: &Example, label: usize) -> f64 {
        self(example, label)
    }
}

/// Outcome of a single WARP step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepReport {
    /// Number of negative draws used (N).
    pub draws: usize,
    pub violated: bool,
    /// floor((Dy - 1) / N), clamped to at least 1; 0 when nothing was drawn.
    pub rank_estimate: usize,
    /// The sampled violating negative, when there was one.
    pub negative: Option<usize>,
}

impl StepReport {
    fn noop() -> Self {
        Self {
            draws: 0,
            violated: false,
            rank_estimate: 0,
            negative: None,
        }
    }
}

/// Harmonic rank weight `L(k) = sum_{j=1..k} 1/j`. Panics if `k == 0`.
pub fn rank_weight(k: usize) -> f64 {
    assert!(k >= 1, "rank_weight needs k >= 1");
    let mut acc = 0.0;
    for j in 1..=k {
        acc += 1.0 / j as f64;
    }
    acc
}

/// One WARP update: sample negatives until `f(x, y-) + margin > f(x, y+)`
/// (scores already weighted), then apply the hinge SGD step scaled by
/// `learning_rate * L(rank_estimate)` and re-project every touched column.
pub fn warp_step(
    model: &mut EmbeddingModel,
    example: &Example,
    positive: usize,
    weighter: &dyn Weighter,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> StepReport {
    let d = model.d();
    let y_dim = model.y_dim();
    if y_dim <= 1 || example.labels().len() >= y_dim {
        return StepReport::noop();
    }

    let embedding = model
        .embed_x(&example.features)
        .expect("dataset validated against model dims");
    let g_pos = weighter.weight(example, positive);
    let f_pos = g_pos * dot(&embedding, model.v_col(positive));

    let max_trials = config.max_negative_trials.unwrap_or(y_dim - 1);
    let mut draws = 0;
    let mut violation: Option<(usize, f64)> = None;
    while draws < max_trials {
        let neg = loop {
            let candidate = rng.gen_range(0..y_dim);
            if !example.has_label(candidate) {
                break candidate;
            }
        };
        draws += 1;
        let g_neg = weighter.weight(example, neg);
        let f_neg = g_neg * dot(&embedding, model.v_col(neg));
        if f_neg + config.margin > f_pos {
            violation = Some((neg, g_neg));
            break;
        }
    }

    let (neg, g_neg) = match violation {
        Some(v) => v,
        None => {
            return StepReport {
                draws,
                violated: false,
                rank_estimate: 0,
                negative: None,
            }
        }
    };

    let rank_estimate = ((y_dim - 1) / draws).max(1);
    let step = config.learning_rate * rank_weight(rank_estimate);

    let v_pos_old = model.v_col(positive).to_vec();
    let v_neg_old = model.v_col(neg).to_vec();

    {
        let vp = model.v_col_mut(positive);
        for r in 0..d {
            vp[r] += step * g_pos * embedding[r];
        }
    }
    {
        let vn = model.v_col_mut(neg);
        for r in 0..d {
            vn[r] -= step * g_neg * embedding[r];
        }
    }
    for &(i, xv) in example.features.entries() {
        let uc = model.u_col_mut(i);
        for r in 0..d {
            uc[r] += step * xv * (g_pos * v_pos_old[r] - g_neg * v_neg_old[r]);
        }
    }

    for &(i, _) in example.features.entries() {
        model.project_u(i);
    }
    model.project_v(positive);
    model.project_v(neg);

    StepReport {
        draws,
        violated: true,
        rank_estimate,
        negative: Some(neg),
    }
}

fn validate_trainable(train: &Dataset) -> Result<(), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for ex in train.examples() {
        if ex.labels().is_empty() {
            return Err(TrainError::ExampleWithoutLabels { id: ex.id });
        }
    }
    Ok(())
}

fn train_loop(
    mut model: EmbeddingModel,
    train: &Dataset,
    config: &TrainConfig,
    weighter: &dyn Weighter,
    rng: &mut ChaCha8Rng,
) -> EmbeddingModel {
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for &pos in order.iter() {
            let example = &train.examples()[pos];
            let labels = example.labels();
            let positive = labels[rng.gen_range(0..labels.len())];
            warp_step(&mut model, example, positive, weighter, config, rng);
        }
    }
    model
}

/// Trains from a fresh random initialization. Deterministic given the seed.
pub fn train_warp(
    train: &Dataset,
    config: &TrainConfig,
    weighter: &dyn Weighter,
) -> Result<EmbeddingModel, TrainError> {
    config.validate()?;
    validate_trainable(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = EmbeddingModel::init_random(
        config.dim,
        train.x_dim(),
        train.y_dim(),
        config.max_norm,
        config.init_scale,
        &mut rng,
    );
    Ok(train_loop(model, train, config, weighter, &mut rng))
}

/// Trains starting from an existing model (warm start). The model adopts
/// `config.max_norm` and is re-projected before the first step.
pub fn train_warp_from(
    initial: EmbeddingModel,
    train: &Dataset,
    config: &TrainConfig,
    weighter: &dyn Weighter,
) -> Result<EmbeddingModel, TrainError> {
    config.validate()?;
    validate_trainable(train)?;
    if initial.d() != config.dim
        || initial.x_dim() != train.x_dim()
        || initial.y_dim() != train.y_dim()
    {
        return Err(TrainError::InitialModelMismatch {
            d: initial.d(),
            dx: initial.x_dim(),
            dy: initial.y_dim(),
        });
    }
    let mut model = initial;
    model.set_max_norm(config.max_norm);
    model.project_all();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(train_loop(model, train, config, weighter, &mut rng))
}

/// Ranks all labels by score, descending, ties broken by ascending label id.
pub fn rank_labels(y_dim: usize, score: impl Fn(usize) -> f64) -> Vec<usize> {
    // -0.0 compares equal to +0.0, so both must fall through to the id
    // tie-break; fold the sign away before the total order sees it.
    let canon = |v: f64| if v == 0.0 { 0.0 } else { v };
    let mut scored: Vec<(usize, f64)> = (0..y_dim)
        .map(|label| (label, canon(score(label))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(label, _)| label).collect()
}

/// Deterministic evaluation pass of the pairwise hinge surrogate: for each
/// example the mean over (positive, negative) label pairs of
/// `max(0, margin + f(x, y-) - f(x, y+))`, averaged over examples.
pub fn mean_hinge_loss(
    model: &EmbeddingModel,
    data: &Dataset,
    weighter: &dyn Weighter,
    margin: f64,
) -> f64 {
    let y_dim = model.y_dim();
    let mut total = 0.0;
    let mut counted = 0usize;
    for ex in data.examples() {
        let positives = ex.labels();
        if positives.is_empty() || positives.len() >= y_dim {
            continue;
        }
        let embedding = model.embed_x(&ex.features).expect("dims validated");
        let scores: Vec<f64> = (0..y_dim)
            .map(|label| weighter.weight(ex, label) * model.score_from_embedding(&embedding, label))
            .collect();
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for &p in positives {
            for y in 0..y_dim {
                if ex.has_label(y) {
                    continue;
                }
                acc += (margin + scores[y] - scores[p]).max(0.0);
                pairs += 1;
            }
        }
        total += acc / pairs as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}
