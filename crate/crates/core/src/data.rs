//! Sparse vectors, multi-label examples and datasets, the line-oriented
//! text format, and seeded train/test splitting.
//!
//! Dataset text format, one example per line:
//!
//! ```text
//! #dims <Dx> <Dy>
//! <label[,label...]> <idx>:<val> [<idx>:<val> ...]
//! ```
//!
//! The `#dims` header is optional on input (dims are inferred as max index
//! plus one when absent) and always written on output. Lines starting with
//! `#` are comments. The label field may be empty (leading space) when
//! parsing in labels-optional mode. A `#id <n>` comment pins the id of the
//! next example line; the writer only emits these when ids are not the
//! default 0..m-1 sequence, so plain files stay plain.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::util::fmt_f64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("unsorted feature index at line {line}")]
    UnsortedFeature { line: usize },
    #[error("duplicate feature index {index} at line {line}")]
    DuplicateFeature { line: usize, index: usize },
    #[error("non-finite feature value at line {line}")]
    NonFinite { line: usize },
    #[error("zero feature value at line {line} (zero entries must be omitted)")]
    ZeroValue { line: usize },
    #[error("feature index {index} >= declared x dim {dim} at line {line}")]
    FeatureIndexOutOfRange {
        line: usize,
        index: usize,
        dim: usize,
    },
    #[error("label {label} >= declared y dim {dim} at line {line}")]
    LabelOutOfRange {
        line: usize,
        label: usize,
        dim: usize,
    },
    #[error("empty label set at line {line} (enable labels-optional mode to accept)")]
    EmptyLabels { line: usize },
    #[error("duplicate example id {id}")]
    DuplicateId { id: u64 },
    #[error("dims declared twice and inconsistent: header ({0}, {1}) vs caller ({2}, {3})")]
    DimsConflict(usize, usize, usize, usize),
    #[error("cannot infer dims: no feature indices or labels present; declare dims")]
    CannotInferDims,
    #[error("invalid dims ({x_dim}, {y_dim}): both must be positive")]
    InvalidDims { x_dim: usize, y_dim: usize },
    #[error("sparse vector entries must have strictly increasing indices")]
    UnsortedEntries,
    #[error("sparse vector values must be finite and nonzero")]
    BadValue,
    #[error("test fraction {0} out of range (need 0 < fraction < 1)")]
    FractionOutOfRange(f64),
    #[error("dataset with {0} examples is too small to split")]
    TooSmallToSplit(usize),
}

/// Sparse vector with strictly increasing indices and finite nonzero values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn new(entries: Vec<(usize, f64)>) -> Result<Self, DataError> {
        for window in entries.windows(2) {
            if window[0].0 >= window[1].0 {
                return Err(DataError::UnsortedEntries);
            }
        }
        if entries.iter().any(|&(_, v)| !v.is_finite() || v == 0.0) {
            return Err(DataError::BadValue);
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.entries.last().map(|&(i, _)| i)
    }

    /// Squared Euclidean distance between two sparse vectors, by merge walk.
    pub fn squared_distance(&self, other: &SparseVector) -> f64 {
        let a = &self.entries;
        let b = &other.entries;
        let (mut i, mut j) = (0, 0);
        let mut acc = 0.0;
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => {
                    acc += a[i].1 * a[i].1;
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    acc += b[j].1 * b[j].1;
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    let d = a[i].1 - b[j].1;
                    acc += d * d;
                    i += 1;
                    j += 1;
                }
            }
        }
        for &(_, v) in &a[i..] {
            acc += v * v;
        }
        for &(_, v) in &b[j..] {
            acc += v * v;
        }
        acc
    }
}

/// One annotated input: sparse features plus a (possibly empty) label set.
/// Labels are kept sorted and deduplicated.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub features: SparseVector,
    labels: Vec<usize>,
}

impl Example {
    pub fn new(id: u64, features: SparseVector, labels: impl IntoIterator<Item = usize>) -> Self {
        let mut labels: Vec<usize> = labels.into_iter().collect();
        labels.sort_unstable();
        labels.dedup();
        Self {
            id,
            features,
            labels,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn has_label(&self, label: usize) -> bool {
        self.labels.binary_search(&label).is_ok()
    }
}

/// Immutable collection of examples with declared dimensions. Safe to share
/// read-only across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    x_dim: usize,
    y_dim: usize,
    id_index: HashMap<u64, usize>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, x_dim: usize, y_dim: usize) -> Result<Self, DataError> {
        if x_dim == 0 || y_dim == 0 {
            return Err(DataError::InvalidDims { x_dim, y_dim });
        }
        let mut id_index = HashMap::with_capacity(examples.len());
        for (pos, ex) in examples.iter().enumerate() {
            if id_index.insert(ex.id, pos).is_some() {
                return Err(DataError::DuplicateId { id: ex.id });
            }
            if let Some(max) = ex.features.max_index() {
                if max >= x_dim {
                    return Err(DataError::FeatureIndexOutOfRange {
                        line: pos + 1,
                        index: max,
                        dim: x_dim,
                    });
                }
            }
            if let Some(&max) = ex.labels.last() {
                if max >= y_dim {
                    return Err(DataError::LabelOutOfRange {
                        line: pos + 1,
                        label: max,
                        dim: y_dim,
                    });
                }
            }
        }
        Ok(Self {
            examples,
            x_dim,
            y_dim,
            id_index,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn by_id(&self, id: u64) -> Option<&Example> {
        self.id_index.get(&id).map(|&pos| &self.examples[pos])
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Accept examples whose label field is empty (line starts with a space).
    pub labels_optional: bool,
    /// Dims supplied by the caller; must agree with a `#dims` header if both
    /// are present.
    pub declared_dims: Option<(usize, usize)>,
}

/// Parses the dataset text format. Dims come from the header if present,
/// else from the caller, else are inferred as max index + 1.
pub fn parse_dataset(reader: impl BufRead, options: ParseOptions) -> Result<Dataset, DataError> {
    let mut header_dims: Option<(usize, usize)> = None;
    let mut examples: Vec<Example> = Vec::new();
    let mut next_id: u64 = 0;
    let mut pending_id: Option<u64> = None;
    let mut seen_ids: HashSet<u64> = HashSet::new();

    for (line_no, line) in reader.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut words = rest.split_whitespace();
            match words.next() {
                Some("dims") if line_no == 1 => {
                    let dx = words
                        .next()
                        .and_then(|w| w.parse::<usize>().ok())
                        .ok_or_else(|| malformed(line_no, "bad #dims header"))?;
                    let dy = words
                        .next()
                        .and_then(|w| w.parse::<usize>().ok())
                        .ok_or_else(|| malformed(line_no, "bad #dims header"))?;
                    if let Some((cx, cy)) = options.declared_dims {
                        if (dx, dy) != (cx, cy) {
                            return Err(DataError::DimsConflict(dx, dy, cx, cy));
                        }
                    }
                    header_dims = Some((dx, dy));
                }
                Some("id") => {
                    if let Some(id) = words.next().and_then(|w| w.parse::<u64>().ok()) {
                        pending_id = Some(id);
                    }
                }
                _ => {} // plain comment
            }
            continue;
        }

        let ex = parse_example_line(line, line_no, options.labels_optional)?;
        if let Some((dx, dy)) = header_dims.or(options.declared_dims) {
            if let Some(max) = ex.features.max_index() {
                if max >= dx {
                    return Err(DataError::FeatureIndexOutOfRange {
                        line: line_no,
                        index: max,
                        dim: dx,
                    });
                }
            }
            if let Some(&max) = ex.labels().last() {
                if max >= dy {
                    return Err(DataError::LabelOutOfRange {
                        line: line_no,
                        label: max,
                        dim: dy,
                    });
                }
            }
        }
        let id = pending_id.take().unwrap_or(next_id);
        if !seen_ids.insert(id) {
            return Err(DataError::DuplicateId { id });
        }
        next_id = id + 1;
        examples.push(Example { id, ..ex });
    }

    let dims = match (header_dims, options.declared_dims) {
        (Some((hx, hy)), Some((cx, cy))) if (hx, hy) != (cx, cy) => {
            return Err(DataError::DimsConflict(hx, hy, cx, cy));
        }
        (Some(d), _) | (None, Some(d)) => Some(d),
        (None, None) => None,
    };

    let (x_dim, y_dim) = match dims {
        Some((dx, dy)) => (dx, dy),
        None => {
            let dx = examples
                .iter()
                .filter_map(|e| e.features.max_index())
                .max()
                .map(|m| m + 1);
            let dy = examples
                .iter()
                .filter_map(|e| e.labels.last().copied())
                .max()
                .map(|m| m + 1);
            match (dx, dy) {
                (Some(dx), Some(dy)) => (dx, dy),
                _ => return Err(DataError::CannotInferDims),
            }
        }
    };

    Dataset::new(examples, x_dim, y_dim)
}

fn malformed(line: usize, detail: &str) -> DataError {
    DataError::Malformed {
        line,
        detail: detail.to_string(),
    }
}

fn parse_example_line(
    line: &str,
    line_no: usize,
    labels_optional: bool,
) -> Result<Example, DataError> {
    // The label field is everything before the first space. A leading space
    // means an empty label set.
    let (label_field, feature_field) = match line.find(' ') {
        Some(pos) => (&line[..pos], &line[pos + 1..]),
        None => (line, ""),
    };

    let mut labels: Vec<usize> = Vec::new();
    if label_field.is_empty() {
        if !labels_optional {
            return Err(DataError::EmptyLabels { line: line_no });
        }
    } else {
        for part in label_field.split(',') {
            let label = part
                .parse::<usize>()
                .map_err(|_| malformed(line_no, &format!("bad label '{}'", part)))?;
            labels.push(label);
        }
    }

    let mut entries: Vec<(usize, f64)> = Vec::new();
    for token in feature_field.split_whitespace() {
        let (idx_str, val_str) = token
            .split_once(':')
            .ok_or_else(|| malformed(line_no, &format!("feature token '{}' missing ':'", token)))?;
        let idx = idx_str
            .parse::<usize>()
            .map_err(|_| malformed(line_no, &format!("bad feature index '{}'", idx_str)))?;
        let val = val_str
            .parse::<f64>()
            .map_err(|_| malformed(line_no, &format!("bad feature value '{}'", val_str)))?;
        if !val.is_finite() {
            return Err(DataError::NonFinite { line: line_no });
        }
        if val == 0.0 {
            return Err(DataError::ZeroValue { line: line_no });
        }
        if let Some(&(prev, _)) = entries.last() {
            if idx == prev {
                return Err(DataError::DuplicateFeature {
                    line: line_no,
                    index: idx,
                });
            }
            if idx < prev {
                return Err(DataError::UnsortedFeature { line: line_no });
            }
        }
        entries.push((idx, val));
    }

    Ok(Example::new(0, SparseVector { entries }, labels))
}

/// Renders a dataset in canonical form: `#dims` header, values at 17
/// significant digits, `#id` comments only where ids deviate from 0..m-1.
/// `parse_dataset(write_dataset(d))` recovers `d` field for field.
pub fn write_dataset(dataset: &Dataset) -> String {
    let mut out = String::new();
    out.push_str(&format!("#dims {} {}\n", dataset.x_dim, dataset.y_dim));
    let mut next_id: u64 = 0;
    for ex in &dataset.examples {
        if ex.id != next_id {
            out.push_str(&format!("#id {}\n", ex.id));
        }
        next_id = ex.id + 1;
        let labels: Vec<String> = ex.labels.iter().map(|l| l.to_string()).collect();
        out.push_str(&labels.join(","));
        for &(idx, val) in ex.features.entries() {
            out.push(' ');
            out.push_str(&format!("{}:{}", idx, fmt_f64(val)));
        }
        if ex.labels.is_empty() && ex.features.entries().is_empty() {
            // A lone space keeps the row visible; a bare newline would read
            // back as a blank line and drop the example.
            out.push(' ');
        }
        out.push('\n');
    }
    out
}

/// Seed-deterministic disjoint partition into (train, test). Both parts keep
/// their original example ids and dims.
pub fn split_dataset(
    dataset: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::FractionOutOfRange(test_fraction));
    }
    let m = dataset.len();
    if m < 2 {
        return Err(DataError::TooSmallToSplit(m));
    }
    let n_test = ((m as f64 * test_fraction).round() as usize).clamp(1, m - 1);

    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let test_set: HashSet<usize> = order[..n_test].iter().copied().collect();

    let mut train_examples = Vec::with_capacity(m - n_test);
    let mut test_examples = Vec::with_capacity(n_test);
    for (pos, ex) in dataset.examples.iter().enumerate() {
        if test_set.contains(&pos) {
            test_examples.push(ex.clone());
        } else {
            train_examples.push(ex.clone());
        }
    }
    let train = Dataset::new(train_examples, dataset.x_dim, dataset.y_dim)?;
    let test = Dataset::new(test_examples, dataset.x_dim, dataset.y_dim)?;
    Ok((train, test))
}
