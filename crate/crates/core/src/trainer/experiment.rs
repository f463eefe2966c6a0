//! Multi-seed teacher/student comparisons on a synthetic task.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{gen_synthetic, SyntheticTask, SyntheticTaskSpec};
use super::distill::{dataset_logits, distill, train_plain, train_teacher, TrainOptions, TrainRecord};
use super::mlp::{Activation, Mlp, MlpSpec};
use crate::analysis::{class_profiles, knee_point_k, KneePoint};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::numeric::Temperature;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub task: SyntheticTaskSpec,
    pub teacher_hidden: Vec<usize>,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub student_hidden: Vec<usize>,
    /// Students see only the first `n` training samples; the teacher sees
    /// all of them.
    pub student_n_train: Option<usize>,
    pub activation: Activation,
    pub train: TrainOptions,
}

/// The teacher trains on 10000 samples, students on the first 500, at
/// learning rate 0.01.
impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            task: SyntheticTaskSpec { n_train: 10_000, ..SyntheticTaskSpec::default() },
            teacher_hidden: vec![128, 128],
            teacher_epochs: 30,
            teacher_lr: 0.05,
            student_hidden: vec![64],
            student_n_train: Some(500),
            activation: Activation::Relu,
            train: TrainOptions { lr: 0.01, ..TrainOptions::default() },
        }
    }
}

/// Distillation weights used with [`ExperimentSpec::default`]:
/// `w0 = 1, w1 = 2, w2 = 2`, `T = 4`.
pub const EXPERIMENT_WEIGHTS: (f64, f64, f64) = (1.0, 2.0, 2.0);

pub fn experiment_gdkd(k: usize) -> LossConfig {
    let (w0, w1, w2) = EXPERIMENT_WEIGHTS;
    LossConfig::gdkd(k, w0, w1, w2, 4.0)
}

/// Only the non-top leaf term, `w0 = w1 = 0`.
pub fn experiment_other_only(k: usize) -> LossConfig {
    LossConfig::gdkd(k, 0.0, 0.0, EXPERIMENT_WEIGHTS.2, 4.0)
}

/// The top-1 split with `beta = w2`.
pub fn experiment_top1() -> LossConfig {
    LossConfig { variant: crate::losses::Variant::Gdkd2, beta2: EXPERIMENT_WEIGHTS.2, ..LossConfig::default() }
}

fn widths(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(out);
    w
}

/// Everything derived from one seed: task, trained teacher, student spec
/// and training options. The seed drives data, both initializations and the
/// shuffle.
#[derive(Debug, Clone)]
pub struct SeedSetup {
    pub seed: u64,
    pub task: SyntheticTask,
    pub teacher: Mlp,
    pub student: MlpSpec,
    pub opts: TrainOptions,
}

impl ExperimentSpec {
    fn teacher_spec(&self, seed: u64) -> MlpSpec {
        let (d, c) = (self.task.input_dim, self.task.num_classes);
        MlpSpec::new(widths(d, &self.teacher_hidden, c), self.activation, seed.wrapping_add(1_000))
    }

    pub fn setup(&self, seed: u64) -> Result<SeedSetup> {
        let task = gen_synthetic(&SyntheticTaskSpec { seed, ..self.task.clone() })?;
        let teacher = train_teacher(&self.teacher_spec(seed), &task, self.teacher_epochs, self.teacher_lr)?;
        self.finish(seed, task, teacher)
    }

    /// Like [`setup`](Self::setup) with an already trained teacher.
    pub fn setup_with_teacher(&self, seed: u64, teacher: Mlp) -> Result<SeedSetup> {
        teacher.spec.check_task(self.task.input_dim, self.task.num_classes)?;
        let task = gen_synthetic(&SyntheticTaskSpec { seed, ..self.task.clone() })?;
        self.finish(seed, task, teacher)
    }

    fn finish(&self, seed: u64, mut task: SyntheticTask, teacher: Mlp) -> Result<SeedSetup> {
        let (d, c) = (self.task.input_dim, self.task.num_classes);
        let student = MlpSpec::new(widths(d, &self.student_hidden, c), self.activation, seed.wrapping_add(2_000));
        if let Some(n) = self.student_n_train {
            if n == 0 || n > task.train.len() {
                return Err(Error::Config(format!(
                    "student_n_train must lie in 1..={}, got {n}",
                    task.train.len()
                )));
            }
            task.train.x.truncate(n * d);
            task.train.y.truncate(n);
        }
        let opts = TrainOptions { seed: seed.wrapping_add(3_000), ..self.train.clone() };
        Ok(SeedSetup { seed, task, teacher, student, opts })
    }

    /// Builds the per-seed setups in parallel; order follows `seeds`.
    pub fn setups(&self, seeds: &[u64]) -> Result<Vec<SeedSetup>> {
        seeds.par_iter().map(|&s| self.setup(s)).collect()
    }
}

impl SeedSetup {
    /// Knee point of the teacher's class profiles on the training set.
    pub fn knee(&self, temperature: f64) -> Result<KneePoint<f64>> {
        let logits = dataset_logits(&self.teacher, &self.task.train)?;
        let profiles = class_profiles(&logits, &self.task.train.y, Temperature::new(temperature)?)?;
        knee_point_k(&profiles)
    }

    /// `None` trains the student with cross-entropy only.
    pub fn run(&self, cfg: Option<&LossConfig>) -> Result<Vec<TrainRecord>> {
        Ok(match cfg {
            Some(cfg) => distill(&self.teacher, &self.student, &self.task, cfg, &self.opts)?.records,
            None => train_plain(&self.student, &self.task, &self.opts, Some(&self.teacher))?.records,
        })
    }
}

/// Final-epoch metrics of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinalMetrics {
    pub seed: u64,
    pub test_accuracy: f64,
    pub nontop_prob_discrepancy: f64,
}

pub fn final_metrics(seed: u64, records: &[TrainRecord]) -> Result<FinalMetrics> {
    let last = records.last().ok_or_else(|| Error::Domain("no training records".into()))?;
    Ok(FinalMetrics {
        seed,
        test_accuracy: last.test_accuracy,
        nontop_prob_discrepancy: last.nontop_prob_discrepancy.unwrap_or(f64::NAN),
    })
}

/// Mean of a metric over runs.
pub fn mean_of(runs: &[FinalMetrics], f: impl Fn(&FinalMetrics) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}
