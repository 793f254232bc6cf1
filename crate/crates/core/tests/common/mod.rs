//! Shared test support: a seeded synthetic multiclass generator with
//! Gaussian cluster structure, label-flip noise, and off-cluster
//! distractor features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use awe_core::data::{Dataset, Example, SparseVector};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub train: usize,
    pub test: usize,
    pub labels: usize,
    pub x_dim: usize,
    /// Nonzero dims per cluster center.
    pub support: usize,
    /// Gaussian jitter around the center values.
    pub jitter: f64,
    /// High-variance distractor dims added per example, off the center.
    pub distractors: usize,
    pub distractor_scale: f64,
    /// Probability the observed label is flipped to a random other label.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            test: 500,
            labels: 20,
            x_dim: 100,
            support: 6,
            jitter: 0.35,
            distractors: 3,
            distractor_scale: 2.0,
            label_noise: 0.2,
            seed: 0,
        }
    }
}

/// Box-Muller standard normal draw (two uniforms per sample).
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates (train, test) with single-label examples. Train ids are
/// 0..train-1, test ids continue after them so the id spaces are disjoint.
pub fn generate(config: &SynthConfig) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // One sparse center per label: `support` dims dealt from a shuffled
    // pool, so centers stay as disjoint as the dimensionality allows and
    // only wrap when labels * support exceeds x_dim. Values sit near 1.
    let mut pool: Vec<usize> = Vec::new();
    let mut draw_dim = |rng: &mut ChaCha8Rng| {
        if pool.is_empty() {
            pool = (0..config.x_dim).collect();
            pool.shuffle(rng);
        }
        pool.pop().unwrap()
    };
    let centers: Vec<Vec<(usize, f64)>> = (0..config.labels)
        .map(|_| {
            let mut dims: Vec<usize> = (0..config.support).map(|_| draw_dim(&mut rng)).collect();
            dims.sort_unstable();
            dims.dedup();
            dims.into_iter()
                .map(|d| (d, 1.0 + 0.3 * normal(&mut rng)))
                .collect()
        })
        .collect();

    // Distractors land on dims no center uses, when any exist: channels
    // that carry no label signal, only variance.
    let mut is_support = vec![false; config.x_dim];
    for center in &centers {
        for &(dim, _) in center {
            is_support[dim] = true;
        }
    }
    let free_dims: Vec<usize> = (0..config.x_dim).filter(|&d| !is_support[d]).collect();

    let make_example = |id: u64, rng: &mut ChaCha8Rng| {
        let truth = rng.gen_range(0..config.labels);
        let mut features: BTreeMap<usize, f64> = BTreeMap::new();
        for &(dim, value) in &centers[truth] {
            features.insert(dim, value + config.jitter * normal(rng));
        }
        for _ in 0..config.distractors {
            let dim = match free_dims.is_empty() {
                true => rng.gen_range(0..config.x_dim),
                false => free_dims[rng.gen_range(0..free_dims.len())],
            };
            features.insert(dim, config.distractor_scale * normal(rng));
        }
        let observed = if rng.gen_bool(config.label_noise) {
            let mut other = rng.gen_range(0..config.labels);
            while other == truth {
                other = rng.gen_range(0..config.labels);
            }
            other
        } else {
            truth
        };
        let entries: Vec<(usize, f64)> = features.into_iter().filter(|(_, v)| *v != 0.0).collect();
        Example::new(id, SparseVector::new(entries).unwrap(), [observed])
    };

    let train_examples: Vec<Example> = (0..config.train)
        .map(|i| make_example(i as u64, &mut rng))
        .collect();
    let test_examples: Vec<Example> = (0..config.test)
        .map(|i| make_example((config.train + i) as u64, &mut rng))
        .collect();

    let train = Dataset::new(train_examples, config.x_dim, config.labels).unwrap();
    let test = Dataset::new(test_examples, config.x_dim, config.labels).unwrap();
    (train, test)
}
