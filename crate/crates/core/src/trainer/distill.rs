use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, SyntheticTask};
use super::mlp::{Mlp, MlpSpec, Sgd};
use crate::analysis::nontop_prob_discrepancy;
use crate::error::{Error, Result};
use crate::gradients::{grad_cross_entropy, grad_objective, sample_magnitudes, GradMagnitudeReport, SampleMagnitudes};
use crate::losses::{total_objective, Anchor, LossConfig, Variant};
use crate::numeric::{cross_entropy, LogitVector, Temperature};
use crate::scalar::pairwise_mean;

/// Per-epoch metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub epoch: usize,
    /// Mean per-sample training objective over the epoch.
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Present for top-1 split variants.
    pub grad_report: Option<GradMagnitudeReport<f64>>,
    /// Mean non-top `|p_t - p_s|` on the test set; absent without a teacher.
    pub nontop_prob_discrepancy: Option<f64>,
}

/// Flat CSV form of [`TrainRecord`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecordRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub nontop_prob_discrepancy: Option<f64>,
    pub mean_abs_top: Option<f64>,
    pub mean_abs_nontop_topkd: Option<f64>,
    pub mean_abs_nontop_otherkd_weighted: Option<f64>,
    pub mean_abs_nontop_coupledkd: Option<f64>,
    #[serde(rename = "eta_T")]
    pub eta_t: Option<f64>,
    #[serde(rename = "eta_S")]
    pub eta_s: Option<f64>,
}

impl TrainRecord {
    pub fn to_row(&self) -> TrainRecordRow {
        let g = self.grad_report.as_ref();
        TrainRecordRow {
            epoch: self.epoch,
            train_loss: self.train_loss,
            test_accuracy: self.test_accuracy,
            nontop_prob_discrepancy: self.nontop_prob_discrepancy,
            mean_abs_top: g.map(|r| r.mean_abs_top),
            mean_abs_nontop_topkd: g.map(|r| r.mean_abs_nontop_topkd),
            mean_abs_nontop_otherkd_weighted: g.map(|r| r.mean_abs_nontop_otherkd_weighted),
            mean_abs_nontop_coupledkd: g.map(|r| r.mean_abs_nontop_coupledkd),
            eta_t: g.map(|r| r.eta_t),
            eta_s: g.map(|r| r.eta_s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seeds the minibatch shuffle.
    pub seed: u64,
    /// Temperature of the non-top discrepancy metric.
    pub metric_temperature: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.05,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            metric_temperature: 4.0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1), weight_decay >= 0".into()));
        }
        Temperature::new(self.metric_temperature)?;
        Ok(())
    }
}

/// What the student is trained on.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// One-hot cross-entropy only; no teacher term is evaluated.
    CrossEntropy,
    Distill(&'a LossConfig),
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub records: Vec<TrainRecord>,
    pub model: Mlp,
}

/// Frozen teacher logits for every sample of a dataset.
pub fn dataset_logits(model: &Mlp, data: &Dataset) -> Result<Vec<LogitVector<f64>>> {
    (0..data.len())
        .map(|i| {
            LogitVector::new(model.logits(data.input(i)))
                .map_err(|e| Error::InvalidInput(format!("logits of sample {i}: {e}")))
        })
        .collect()
}

pub fn accuracy(model: &Mlp, data: &Dataset) -> f64 {
    let hits = (0..data.len())
        .filter(|&i| {
            let z = model.logits(data.input(i));
            crate::numeric::argmax(&z) == data.y[i]
        })
        .count();
    hits as f64 / data.len() as f64
}

/// Returns the anchor class and `beta` when the config is a top-1 split.
fn top1_split(cfg: &LossConfig) -> Option<(Anchor, f64)> {
    match cfg.variant {
        Variant::Gdkd2 => Some((cfg.anchor, cfg.beta2)),
        Variant::Gdkd if cfg.k == 1 => Some((Anchor::TeacherTop, cfg.w2)),
        _ => None,
    }
}

struct Teacher<'a> {
    train: &'a [LogitVector<f64>],
    test: &'a [LogitVector<f64>],
}

fn train_loop(
    mut model: Mlp,
    task: &SyntheticTask,
    teacher: Option<Teacher<'_>>,
    objective: Objective<'_>,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    opts.validate()?;
    let data = &task.train;
    model.spec.check_task(data.input_dim, data.num_classes)?;
    if let Objective::Distill(cfg) = objective {
        cfg.validate(Some(data.num_classes))?;
        if teacher.is_none() {
            return Err(Error::Config("distillation needs teacher logits".into()));
        }
    }
    let metric_t = Temperature::new(opts.metric_temperature)?;
    let split = match objective {
        Objective::Distill(cfg) => top1_split(cfg),
        Objective::CrossEntropy => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Sgd::new(opts.lr, opts.momentum, opts.weight_decay, model.num_params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records: Vec<TrainRecord> = Vec::with_capacity(opts.epochs);
    let mut grad = vec![0.0; model.num_params()];

    for epoch in 0..opts.epochs {
        let diverged = |reason: String, records: &[TrainRecord]| Error::Diverged {
            epoch,
            reason,
            last_good: records.last().cloned().map(Box::new),
        };
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(data.len());
        let mut mags: Vec<SampleMagnitudes<f64>> = Vec::new();
        for batch in order.chunks(opts.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let cache = model.forward(data.input(i));
                let z_s = LogitVector::new(cache.logits.clone())
                    .map_err(|e| diverged(format!("student logits on sample {i}: {e}"), &records))?;
                let y = data.y[i];
                let (loss, d) = match objective {
                    Objective::CrossEntropy => (cross_entropy(&z_s, y)?, grad_cross_entropy(&z_s, y)?),
                    Objective::Distill(cfg) => {
                        let z_t = &teacher.as_ref().expect("checked above").train[i];
                        if let Some((anchor, beta)) = split {
                            let c = match anchor {
                                Anchor::TeacherTop => z_t.argmax(),
                                Anchor::Target => y,
                            };
                            let t = Temperature::new(cfg.temperature)?;
                            mags.push(sample_magnitudes(z_t, &z_s, c, beta, t)?);
                        }
                        let (o, g) = grad_objective(z_t, &z_s, y, cfg, epoch)?;
                        (o.total, g)
                    }
                };
                if !loss.is_finite() || d.values.iter().any(|v| !v.is_finite()) {
                    return Err(diverged(format!("non-finite loss {loss} on sample {i}"), &records));
                }
                losses.push(loss);
                model.backward(&cache, &d.values, &mut grad);
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            opt.step(&mut model.params, &grad);
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(diverged("non-finite parameters".into(), &records));
        }
        let train_loss = pairwise_mean(&losses).expect("non-empty training set");
        let nontop = match &teacher {
            Some(t) => {
                let test = dataset_logits(&model, &task.test)
                    .map_err(|e| diverged(e.to_string(), &records))?;
                let d: Vec<f64> = t
                    .test
                    .iter()
                    .zip(&test)
                    .map(|(zt, zs)| nontop_prob_discrepancy(zt, zs, metric_t))
                    .collect::<Result<_>>()?;
                pairwise_mean(&d)
            }
            None => None,
        };
        let grad_report = if mags.is_empty() {
            None
        } else {
            Some(GradMagnitudeReport::from_samples(epoch, &mags)?)
        };
        let record = TrainRecord {
            epoch,
            train_loss,
            test_accuracy: accuracy(&model, &task.test),
            grad_report,
            nontop_prob_discrepancy: nontop,
        };
        log::debug!("epoch {epoch}: loss {train_loss:.5} acc {:.4}", record.test_accuracy);
        records.push(record);
    }
    Ok(TrainRun { records, model })
}

/// Trains a teacher with plain cross-entropy; the shuffle is seeded from
/// the network seed.
pub fn train_teacher(spec: &MlpSpec, task: &SyntheticTask, epochs: usize, lr: f64) -> Result<Mlp> {
    let opts = TrainOptions { epochs, lr, seed: spec.seed, ..TrainOptions::default() };
    Ok(train_loop(Mlp::new(spec)?, task, None, Objective::CrossEntropy, &opts)?.model)
}

/// Plain cross-entropy training of a fresh student. With a teacher, records
/// include the non-top discrepancy to it.
pub fn train_plain(
    student_spec: &MlpSpec,
    task: &SyntheticTask,
    opts: &TrainOptions,
    teacher: Option<&Mlp>,
) -> Result<TrainRun> {
    let logits = teacher
        .map(|t| Ok::<_, Error>((dataset_logits(t, &task.train)?, dataset_logits(t, &task.test)?)))
        .transpose()?;
    let teacher = logits.as_ref().map(|(train, test)| Teacher { train, test });
    train_loop(Mlp::new(student_spec)?, task, teacher, Objective::CrossEntropy, opts)
}

/// Distills `teacher` into a fresh student built from `student_spec`.
///
/// Before training, the analytic parameter gradient of the objective is
/// checked against finite differences on the first training sample.
pub fn distill(
    teacher: &Mlp,
    student_spec: &MlpSpec,
    task: &SyntheticTask,
    cfg: &LossConfig,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    teacher.spec.check_task(task.train.input_dim, task.train.num_classes)?;
    student_spec.check_task(task.train.input_dim, task.train.num_classes)?;
    cfg.validate(Some(task.train.num_classes))?;
    opts.validate()?;
    let train = dataset_logits(teacher, &task.train)?;
    let test = dataset_logits(teacher, &task.test)?;
    let student = Mlp::new(student_spec)?;
    let err = backprop_check(&student, &train[0], task.train.input(0), task.train.y[0], cfg, cfg.warmup_epochs)?;
    if err > 1e-5 {
        return Err(Error::InvalidInput(format!(
            "backprop check failed: relative error {err:e} exceeds 1e-5"
        )));
    }
    train_loop(student, task, Some(Teacher { train: &train, test: &test }), Objective::Distill(cfg), opts)
}

/// Analytic gradient of the per-sample objective w.r.t. all parameters.
pub fn objective_param_grad(
    model: &Mlp,
    z_t: &LogitVector<f64>,
    x: &[f64],
    y: usize,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<Vec<f64>> {
    let cache = model.forward(x);
    let (_, d) = grad_objective(z_t, &LogitVector::new(cache.logits.clone())?, y, cfg, epoch)?;
    let mut g = vec![0.0; model.num_params()];
    model.backward(&cache, &d.values, &mut g);
    Ok(g)
}

/// `||analytic - fd|| / ||fd||` over all parameters, central differences
/// with step `1e-6`.
pub fn backprop_check(
    model: &Mlp,
    z_t: &LogitVector<f64>,
    x: &[f64],
    y: usize,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<f64> {
    let analytic = objective_param_grad(model, z_t, x, y, cfg, epoch)?;
    let mut probe = model.clone();
    let f = |m: &Mlp| -> Result<f64> {
        Ok(total_objective(z_t, &LogitVector::new(m.logits(x))?, y, cfg, epoch)?.total)
    };
    let h = 1e-6;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = f(&probe)?;
        probe.params[i] = orig - h;
        let down = f(&probe)?;
        probe.params[i] = orig;
        let fd = (up - down) / (2.0 * h);
        num += (a - fd) * (a - fd);
        den += fd * fd;
    }
    Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
}
