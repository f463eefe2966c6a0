//! Synthetic classification tasks with tunable class confusability.
//!
//! Classes are split into consecutive groups of `group_size`. Every class
//! owns `clusters_per_class` Gaussian clusters whose centers are
//! `(1 - overlap) * own + overlap * shared`, where `shared` is a center
//! common to the whole group. Raising `overlap` pulls the classes of a group
//! together, so a trained teacher spreads probability over them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::content_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub clusters_per_class: usize,
    pub overlap: f64,
    /// Classes per confusable group.
    pub group_size: usize,
    /// Spread of the class and group centers.
    pub center_scale: f64,
    /// Standard deviation of samples around a cluster center.
    pub noise: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            input_dim: 16,
            clusters_per_class: 2,
            overlap: 0.8,
            group_size: 4,
            center_scale: 3.0,
            noise: 1.0,
            n_train: 2000,
            n_test: 1000,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.input_dim == 0 || self.clusters_per_class == 0 || self.group_size == 0 {
            return bad("input_dim, clusters_per_class and group_size must be positive");
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive");
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad("overlap must lie in [0, 1]");
        }
        if !(self.center_scale.is_finite() && self.center_scale > 0.0) {
            return bad("center_scale must be positive");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }
}

/// Row-major inputs with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub input_dim: usize,
    pub num_classes: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.x[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Little-endian dump used for hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.x.len() + 8 * self.y.len());
        out.extend_from_slice(&(self.input_dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u64).to_le_bytes());
        for v in &self.x {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &y in &self.y {
            out.extend_from_slice(&(y as u64).to_le_bytes());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub train: Dataset,
    pub test: Dataset,
}

impl SyntheticTask {
    /// SHA-256 over the train and test dumps.
    pub fn content_hash(&self) -> String {
        let mut b = self.train.to_bytes();
        b.extend(self.test.to_bytes());
        content_hash(&b)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| scale * normal.sample(rng)).collect()
}

pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let d = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let num_groups = spec.num_classes.div_ceil(spec.group_size);
    let shared: Vec<Vec<f64>> = (0..num_groups)
        .map(|_| gaussian_vec(&mut rng, d, spec.center_scale))
        .collect();
    let mut centers = Vec::with_capacity(spec.num_classes);
    for c in 0..spec.num_classes {
        let own = gaussian_vec(&mut rng, d, spec.center_scale);
        let mut class_centers = Vec::with_capacity(spec.clusters_per_class);
        for _ in 0..spec.clusters_per_class {
            // Clusters of one class sit near the class center.
            let jitter = gaussian_vec(&mut rng, d, 0.5 * spec.noise);
            class_centers.push(
                (0..d)
                    .map(|j| {
                        (1.0 - spec.overlap) * own[j]
                            + spec.overlap * shared[c / spec.group_size][j]
                            + jitter[j]
                    })
                    .collect::<Vec<f64>>(),
            );
        }
        centers.push(class_centers);
    }
    let sample = |n: usize, rng: &mut ChaCha8Rng| {
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            // Balanced labels, cluster chosen at random.
            let c = i % spec.num_classes;
            let center = &centers[c][rng.random_range(0..spec.clusters_per_class)];
            let noise = gaussian_vec(rng, d, spec.noise);
            x.extend(center.iter().zip(&noise).map(|(a, b)| a + b));
            y.push(c);
        }
        Dataset { input_dim: d, num_classes: spec.num_classes, x, y }
    };
    let train = sample(spec.n_train, &mut rng);
    let test = sample(spec.n_test, &mut rng);
    Ok(SyntheticTask { spec: spec.clone(), train, test })
}
