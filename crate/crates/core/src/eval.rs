//! Precision@k evaluation and the kernel-vote kNN baselines, in raw
//! feature space and in the learned embedding space.

use rayon::prelude::*;
use thiserror::Error;

use crate::affinity::{knn_embed, knn_raw, AffinityError, KernelConfig, Mode, NeighborList};
use crate::data::{Dataset, Example, SparseVector};
use crate::linear::{rank_labels, EmbeddingModel, ModelError, Weighter};
use crate::util::fmt_f64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test set")]
    EmptyTest,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the ranked label count {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("no k values requested")]
    NoKs,
    #[error(transparent)]
    Affinity(#[from] AffinityError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// `|top-k of ranked ∩ truth| / k`. Truth is a sorted label slice.
pub fn precision_at_k(ranked: &[usize], truth: &[usize], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if k > ranked.len() {
        return Err(EvalError::KTooLarge {
            k,
            len: ranked.len(),
        });
    }
    let hits = ranked[..k]
        .iter()
        .filter(|l| truth.binary_search(l).is_ok())
        .count();
    Ok(hits as f64 / k as f64)
}

/// A full label ranking per test example. Implementations must be pure and
/// shareable across evaluation workers.
pub trait Ranker: Sync {
    fn rank(&self, example: &Example) -> Vec<usize>;
}

/// Plain bilinear scorer ranking.
pub struct LinearRanker<'a> {
    pub model: &'a EmbeddingModel,
}

impl Ranker for LinearRanker<'_> {
    fn rank(&self, example: &Example) -> Vec<usize> {
        let e = self
            .model
            .embed_x(&example.features)
            .expect("test dims validated");
        rank_labels(self.model.y_dim(), |label| {
            self.model.score_from_embedding(&e, label)
        })
    }
}

/// Ranking by `G(x, y) * f(x, y)` for any weighter G, looked up by example.
pub struct WeightedRanker<'a> {
    pub model: &'a EmbeddingModel,
    pub weighter: &'a dyn Weighter,
}

impl Ranker for WeightedRanker<'_> {
    fn rank(&self, example: &Example) -> Vec<usize> {
        let e = self
            .model
            .embed_x(&example.features)
            .expect("test dims validated");
        rank_labels(self.model.y_dim(), |label| {
            self.weighter.weight(example, label) * self.model.score_from_embedding(&e, label)
        })
    }
}

/// Ranks labels by summed kernel weight over the k nearest training
/// examples carrying each label. With a model, distances are embedded;
/// without, raw feature-space. Self matches are kept: baseline queries are
/// expected to be held out.
pub fn knn_predict(
    train: &Dataset,
    query: &SparseVector,
    model: Option<&EmbeddingModel>,
    k: usize,
    lambda_x: f64,
) -> Result<Vec<usize>, EvalError> {
    let list = knn_neighbors(train, query, model, k, lambda_x)?;
    Ok(vote_ranking(train, &list))
}

fn knn_neighbors(
    train: &Dataset,
    query: &SparseVector,
    model: Option<&EmbeddingModel>,
    k: usize,
    lambda_x: f64,
) -> Result<NeighborList, EvalError> {
    let list = match model {
        Some(m) => {
            let config = KernelConfig {
                lambda_x,
                mode: Mode::EmbeddedX,
                n: k,
                exclude_self: false,
                ..Default::default()
            };
            knn_embed(m, train, u64::MAX, query, &config)?
        }
        None => knn_raw(train, query, lambda_x, k)?,
    };
    Ok(list)
}

fn vote_ranking(train: &Dataset, neighbors: &NeighborList) -> Vec<usize> {
    let mut votes = vec![0.0f64; train.y_dim()];
    for &(id, w) in neighbors.neighbors() {
        let ex = train
            .by_id(id)
            .expect("neighbor ids come from this training set");
        for &label in ex.labels() {
            votes[label] += w;
        }
    }
    rank_labels(train.y_dim(), |label| votes[label])
}

/// kNN baseline as a [`Ranker`].
pub struct KnnRanker<'a> {
    pub train: &'a Dataset,
    pub model: Option<&'a EmbeddingModel>,
    pub k: usize,
    pub lambda_x: f64,
}

impl Ranker for KnnRanker<'_> {
    fn rank(&self, example: &Example) -> Vec<usize> {
        knn_predict(
            self.train,
            &example.features,
            self.model,
            self.k,
            self.lambda_x,
        )
        .expect("baseline inputs validated")
    }
}

/// One evaluated algorithm: precision per requested k, in request order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub algorithm: String,
    pub precisions: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub evaluated: usize,
    pub skipped: usize,
}

/// (examples with non-empty truth, examples without).
pub fn truth_counts(test: &Dataset) -> (usize, usize) {
    let evaluated = test
        .examples()
        .iter()
        .filter(|ex| !ex.labels().is_empty())
        .count();
    (evaluated, test.len() - evaluated)
}

/// Mean precision@k over test examples with non-empty truth; empty-truth
/// examples are skipped and counted. Rankings run as a parallel map; the
/// means are accumulated in ascending example id order so the result is
/// identical for any worker count.
pub fn evaluate(
    algorithm: &str,
    ranker: &dyn Ranker,
    test: &Dataset,
    ks: &[usize],
    workers: usize,
) -> Result<EvalRow, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTest);
    }
    if ks.is_empty() {
        return Err(EvalError::NoKs);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let per_example: Vec<(u64, Option<Vec<f64>>)> = pool.install(|| {
        test.examples()
            .par_iter()
            .map(|ex| {
                if ex.labels().is_empty() {
                    return Ok((ex.id, None));
                }
                let ranked = ranker.rank(ex);
                let precs = ks
                    .iter()
                    .map(|&k| precision_at_k(&ranked, ex.labels(), k))
                    .collect::<Result<Vec<f64>, EvalError>>()?;
                Ok((ex.id, Some(precs)))
            })
            .collect::<Result<_, EvalError>>()
    })?;

    let mut ordered: Vec<&(u64, Option<Vec<f64>>)> = per_example.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);
    let mut sums = vec![0.0f64; ks.len()];
    let mut evaluated = 0usize;
    for (_, precs) in ordered {
        if let Some(precs) = precs {
            evaluated += 1;
            for (slot, p) in precs.iter().enumerate() {
                sums[slot] += p;
            }
        }
    }
    if evaluated == 0 {
        return Err(EvalError::EmptyTest);
    }
    let precisions = ks
        .iter()
        .zip(sums)
        .map(|(&k, s)| (k, s / evaluated as f64))
        .collect();
    Ok(EvalRow {
        algorithm: algorithm.to_string(),
        precisions,
    })
}

impl EvalReport {
    /// Aligned human-readable table.
    pub fn render_table(&self) -> String {
        let mut header: Vec<String> = vec!["algorithm".to_string()];
        if let Some(first) = self.rows.first() {
            for (k, _) in &first.precisions {
                header.push(format!("prec@{}", k));
            }
        }
        let mut grid: Vec<Vec<String>> = vec![header];
        for row in &self.rows {
            let mut cells = vec![row.algorithm.clone()];
            for (_, p) in &row.precisions {
                cells.push(format!("{:.4}", p));
            }
            grid.push(cells);
        }
        let cols = grid.iter().map(|r| r.len()).max().unwrap_or(0);
        let width = |c: usize| {
            grid.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.len())
                .max()
                .unwrap_or(0)
        };
        let widths: Vec<usize> = (0..cols).map(width).collect();
        let mut out = String::new();
        for row in &grid {
            for (c, cell) in row.iter().enumerate() {
                if c > 0 {
                    out.push_str("  ");
                }
                out.push_str(&format!("{:<w$}", cell, w = widths[c]));
            }
            while out.ends_with(' ') {
                out.pop();
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "evaluated {} skipped {}\n",
            self.evaluated, self.skipped
        ));
        out
    }

    /// One line per row: `<algorithm>\tprec@<k>=<float>...`, lossless
    /// floats.
    pub fn render_machine(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&row.algorithm);
            for (k, p) in &row.precisions {
                out.push_str(&format!("\tprec@{}={}", k, fmt_f64(*p)));
            }
            out.push('\n');
        }
        out
    }
}
