//! The distillation loss family.
//!
//! Every loss here is a weighted sum of KL terms over a two-level
//! decomposition of the teacher and student distributions:
//!
//! ```text
//! L = w0 * KL(b_t || b_s) + sum_m w_m * KL(p_t[G_m] || p_s[G_m])
//! ```
//!
//! where `b` holds the group masses and `p[G_m]` is the softmax renormalized
//! inside group `G_m`. Classical KD is the special case `w0 = 1`,
//! `w_m = b_t[m]`. Functions named `*_loss` evaluate the bare equations; `T^2`
//! scaling, logit standardization and warmup are applied only by
//! [`distillation_term`] and [`total_objective`].

mod config;
pub mod presets;

pub use config::{Anchor, LossConfig, Variant};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{cross_entropy, kl_from_log_probs, log_softmax, log_sum_exp, LogitVector, Temperature};
use crate::partition::{partition_gdkd3, partition_target, partition_topk, Partition};
use crate::scalar::{pairwise_mean, Scalar};

/// Ceiling for a single KL term. Reached only when probabilities underflow.
pub const KL_CAP: f64 = 1e6;

/// Per-term view of a decoupled loss.
///
/// `total = high_weight * high_kd + sum(weights_applied[m] * low_terms[m])`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown<S> {
    pub total: S,
    pub high_weight: S,
    pub high_kd: S,
    pub low_terms: Vec<S>,
    pub weights_applied: Vec<S>,
    /// Teacher group masses `b_t`.
    pub teacher_mass: Vec<S>,
    /// Some term hit [`KL_CAP`].
    pub saturated: bool,
}

impl<S: Scalar> LossBreakdown<S> {
    /// Recomputes the total from the parts.
    pub fn weighted_sum(&self) -> S {
        self.high_weight * self.high_kd
            + self
                .weights_applied
                .iter()
                .zip(&self.low_terms)
                .map(|(&w, &l)| w * l)
                .sum::<S>()
    }
}

/// Log-space group masses and leaf distributions of one logit vector.
pub(crate) struct LogDecomposition<S> {
    pub log_top: Vec<S>,
    pub log_leaves: Vec<Vec<S>>,
}

pub(crate) fn log_decompose<S: Scalar>(
    z: &LogitVector<S>,
    partition: &Partition,
    t: Temperature<S>,
) -> LogDecomposition<S> {
    let tv = t.get();
    let u: Vec<S> = z.as_slice().iter().map(|&v| v / tv).collect();
    let lse_all = log_sum_exp(&u);
    let mut log_top = Vec::with_capacity(partition.num_groups());
    let mut log_leaves = Vec::with_capacity(partition.num_groups());
    for group in partition.groups() {
        let ug: Vec<S> = group.iter().map(|&i| u[i]).collect();
        let lse_g = log_sum_exp(&ug);
        log_top.push(lse_g - lse_all);
        log_leaves.push(ug.into_iter().map(|v| v - lse_g).collect());
    }
    LogDecomposition { log_top, log_leaves }
}

fn guard<S: Scalar>(v: S, saturated: &mut bool) -> S {
    let cap = S::lit(KL_CAP);
    if v.is_nan() || v > cap {
        *saturated = true;
        cap
    } else {
        v
    }
}

/// A decoupled loss with its partition and weights fixed for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledPlan<S> {
    pub partition: Partition,
    pub high_weight: S,
    /// One weight per partition group.
    pub low_weights: Vec<S>,
}

/// What [`LossConfig`] resolves to for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum LossPlan<S> {
    Kd,
    Decoupled(DecoupledPlan<S>),
}

fn check_pair<S: Scalar>(z_t: &LogitVector<S>, z_s: &LogitVector<S>) -> Result<()> {
    z_t.ensure_same_len(z_s)
}

fn check_partition<S: Scalar>(z: &LogitVector<S>, p: &Partition) -> Result<()> {
    if p.num_classes() != z.len() {
        return Err(Error::Shape {
            expected: z.len(),
            got: p.num_classes(),
        });
    }
    Ok(())
}

/// Evaluates a decoupled plan.
pub fn evaluate_plan<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    plan: &DecoupledPlan<S>,
    t: Temperature<S>,
) -> Result<LossBreakdown<S>> {
    check_pair(z_t, z_s)?;
    check_partition(z_t, &plan.partition)?;
    if plan.low_weights.len() != plan.partition.num_groups() {
        return Err(Error::Config(format!(
            "{} group weights for {} groups",
            plan.low_weights.len(),
            plan.partition.num_groups()
        )));
    }
    let dt = log_decompose(z_t, &plan.partition, t);
    let ds = log_decompose(z_s, &plan.partition, t);
    let mut saturated = false;
    let high_kd = guard(kl_from_log_probs(&dt.log_top, &ds.log_top), &mut saturated);
    let low_terms: Vec<S> = dt
        .log_leaves
        .iter()
        .zip(&ds.log_leaves)
        .map(|(lt, ls)| guard(kl_from_log_probs(lt, ls), &mut saturated))
        .collect();
    let mut out = LossBreakdown {
        total: S::zero(),
        high_weight: plan.high_weight,
        high_kd,
        low_terms,
        weights_applied: plan.low_weights.clone(),
        teacher_mass: dt.log_top.iter().map(|v| v.exp()).collect(),
        saturated,
    };
    out.total = out.weighted_sum();
    Ok(out)
}

/// `KL(softmax(z_t/T) || softmax(z_s/T))`.
pub fn kd_loss<S: Scalar>(z_t: &LogitVector<S>, z_s: &LogitVector<S>, t: Temperature<S>) -> Result<S> {
    check_pair(z_t, z_s)?;
    let mut saturated = false;
    Ok(guard(
        kl_from_log_probs(&log_softmax(z_t, t), &log_softmax(z_s, t)),
        &mut saturated,
    ))
}

/// KD rewritten over `partition`: the top-level KL plus each leaf KL weighted
/// by the teacher's group mass. Its total equals [`kd_loss`].
pub fn kd_loss_decomposed<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    partition: &Partition,
    t: Temperature<S>,
) -> Result<LossBreakdown<S>> {
    check_partition(z_t, partition)?;
    let masses: Vec<S> = log_decompose(z_t, partition, t)
        .log_top
        .iter()
        .map(|v| v.exp())
        .collect();
    let plan = DecoupledPlan {
        partition: partition.clone(),
        high_weight: S::one(),
        low_weights: masses,
    };
    evaluate_plan(z_t, z_s, &plan, t)
}

/// `alpha * KL(b_t || b_s) + beta * KL(p̂_t || p̂_s)` around the target label.
pub fn dkd_loss<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    target: usize,
    alpha: S,
    beta: S,
    t: Temperature<S>,
) -> Result<LossBreakdown<S>> {
    let plan = DecoupledPlan {
        partition: partition_target(target, z_t.len())?,
        high_weight: alpha,
        low_weights: vec![S::zero(), beta],
    };
    evaluate_plan(z_t, z_s, &plan, t)
}

fn topk_plan<S: Scalar>(z_t: &LogitVector<S>, k: usize, w0: S, w1: S, w2: S) -> Result<DecoupledPlan<S>> {
    Ok(DecoupledPlan {
        partition: partition_topk(z_t, k)?,
        high_weight: w0,
        low_weights: vec![w1, w2],
    })
}

/// Two-group loss over the teacher top-k split:
/// `w0 * L_high + w1 * L_low-topk + w2 * L_low-other`.
pub fn gdkd_loss<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    cfg: &LossConfig,
) -> Result<LossBreakdown<S>> {
    if cfg.variant != Variant::Gdkd {
        return Err(Error::Config(format!(
            "gdkd_loss called with variant {}",
            cfg.variant.name()
        )));
    }
    cfg.validate(Some(z_t.len()))?;
    let plan = topk_plan(z_t, cfg.k, S::lit(cfg.w0), S::lit(cfg.w1), S::lit(cfg.w2))?;
    evaluate_plan(z_t, z_s, &plan, Temperature::new(S::lit(cfg.temperature))?)
}

/// Flat n-group loss: `weights = [w0, w1, .., wn]` for an n-group partition.
pub fn gdkd_n_loss<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    partition: &Partition,
    weights: &[S],
    t: Temperature<S>,
) -> Result<LossBreakdown<S>> {
    if weights.len() != partition.num_groups() + 1 {
        return Err(Error::Config(format!(
            "expected {} weights (w0 plus one per group), got {}",
            partition.num_groups() + 1,
            weights.len()
        )));
    }
    let plan = DecoupledPlan {
        partition: partition.clone(),
        high_weight: weights[0],
        low_weights: weights[1..].to_vec(),
    };
    evaluate_plan(z_t, z_s, &plan, t)
}

/// `KL(b_t || b_s) + beta2 * KL(p_t[rest] || p_s[rest])` with class `c`
/// isolated. With `c` the teacher argmax this is GDKD-top1.
pub fn gdkd2_loss<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    c: usize,
    beta2: S,
    t: Temperature<S>,
) -> Result<LossBreakdown<S>> {
    let plan = DecoupledPlan {
        partition: partition_target(c, z_t.len())?,
        high_weight: S::one(),
        low_weights: vec![S::zero(), beta2],
    };
    evaluate_plan(z_t, z_s, &plan, t)
}

fn dynamic_plan<S: Scalar>(z_t: &LogitVector<S>, cfg: &LossConfig) -> Result<DecoupledPlan<S>> {
    let t = Temperature::new(S::lit(cfg.temperature))?;
    let partition = partition_topk(z_t, cfg.k)?;
    let mass: Vec<S> = log_decompose(z_t, &partition, t)
        .log_top
        .iter()
        .map(|v| v.exp())
        .collect();
    let m = |v: Option<f64>, name: &str| {
        v.map(S::lit)
            .ok_or_else(|| Error::Config(format!("{} needs {name}", cfg.variant.name())))
    };
    let (w_top, w_other) = match cfg.variant {
        Variant::GdkdV1 => (m(cfg.m1, "m1")? * mass[0], m(cfg.m2, "m2")? * mass[1]),
        Variant::GdkdV2 => (S::lit(cfg.w1), m(cfg.m2, "m2")? * mass[1]),
        Variant::GdkdV3 => (m(cfg.m1, "m1")? * mass[0], S::lit(cfg.w2)),
        other => {
            return Err(Error::Config(format!(
                "dynamic-weight loss called with variant {}",
                other.name()
            )))
        }
    };
    Ok(DecoupledPlan {
        partition,
        high_weight: S::one(),
        low_weights: vec![w_top, w_other],
    })
}

/// Dynamic-weight variants: the leaf weights are `m * b_t[group]` for the
/// scaled terms. `weights_applied` records the per-sample realized weights.
pub fn gdkd_dynamic_loss<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    cfg: &LossConfig,
) -> Result<LossBreakdown<S>> {
    cfg.validate(Some(z_t.len()))?;
    let plan = dynamic_plan(z_t, cfg)?;
    evaluate_plan(z_t, z_s, &plan, Temperature::new(S::lit(cfg.temperature))?)
}

/// Resolves `cfg` into a concrete plan for one sample.
pub fn plan_for<S: Scalar>(
    z_t: &LogitVector<S>,
    target: usize,
    cfg: &LossConfig,
) -> Result<LossPlan<S>> {
    let c = z_t.len();
    let plan = match cfg.variant {
        Variant::Kd => return Ok(LossPlan::Kd),
        Variant::Dkd => DecoupledPlan {
            partition: partition_target(target, c)?,
            high_weight: S::lit(cfg.alpha),
            low_weights: vec![S::zero(), S::lit(cfg.beta)],
        },
        Variant::Gdkd => topk_plan(z_t, cfg.k, S::lit(cfg.w0), S::lit(cfg.w1), S::lit(cfg.w2))?,
        Variant::GdkdN => {
            let partition = match cfg.weights.len() {
                3 => partition_topk(z_t, cfg.k)?,
                4 => partition_gdkd3(z_t, cfg.k)?,
                n => {
                    return Err(Error::Config(format!(
                        "gdkd_n needs 3 or 4 weights, got {n}"
                    )))
                }
            };
            DecoupledPlan {
                partition,
                high_weight: S::lit(cfg.weights[0]),
                low_weights: cfg.weights[1..].iter().map(|&w| S::lit(w)).collect(),
            }
        }
        Variant::Gdkd2 => {
            let anchor = match cfg.anchor {
                Anchor::TeacherTop => z_t.argmax(),
                Anchor::Target => target,
            };
            DecoupledPlan {
                partition: partition_target(anchor, c)?,
                high_weight: S::one(),
                low_weights: vec![S::zero(), S::lit(cfg.beta2)],
            }
        }
        Variant::GdkdV1 | Variant::GdkdV2 | Variant::GdkdV3 => dynamic_plan(z_t, cfg)?,
    };
    Ok(LossPlan::Decoupled(plan))
}

/// Z-score normalization with the population standard deviation.
pub fn logit_standardize<S: Scalar>(z: &LogitVector<S>) -> Result<LogitVector<S>> {
    let n = S::from_usize_lossy(z.len());
    let mean = z.as_slice().iter().copied().sum::<S>() / n;
    let var = z
        .as_slice()
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<S>()
        / n;
    let std = var.sqrt();
    if !(std > S::zero()) || std < S::epsilon() * mean.abs() {
        return Err(Error::Degenerate(
            "cannot standardize logits with zero standard deviation".into(),
        ));
    }
    LogitVector::new(z.as_slice().iter().map(|&v| (v - mean) / std).collect())
}

/// The configured distillation loss before warmup and scaling. With
/// `use_ls` both logit vectors are standardized first.
pub fn distillation_term<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    target: usize,
    cfg: &LossConfig,
) -> Result<LossBreakdown<S>> {
    check_pair(z_t, z_s)?;
    let (zt, zs);
    let (z_t, z_s) = if cfg.use_ls {
        zt = logit_standardize(z_t)?;
        zs = logit_standardize(z_s)?;
        (&zt, &zs)
    } else {
        (z_t, z_s)
    };
    let t = Temperature::new(S::lit(cfg.temperature))?;
    match plan_for(z_t, target, cfg)? {
        LossPlan::Kd => {
            let v = kd_loss(z_t, z_s, t)?;
            Ok(LossBreakdown {
                total: v,
                high_weight: S::one(),
                high_kd: v,
                low_terms: Vec::new(),
                weights_applied: Vec::new(),
                teacher_mass: Vec::new(),
                saturated: v == S::lit(KL_CAP),
            })
        }
        LossPlan::Decoupled(plan) => evaluate_plan(z_t, z_s, &plan, t),
    }
}

/// Cross-entropy plus warmup-scaled distillation for one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveBreakdown<S> {
    pub total: S,
    pub cross_entropy: S,
    /// Unscaled distillation term.
    pub distill: S,
    pub warmup: S,
    /// `T^2` and LS multipliers.
    pub distill_scale: S,
    pub saturated: bool,
}

/// `ce_weight * CE(z_s, target) + warmup(epoch) * scale * distill`.
pub fn total_objective<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    target: usize,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<ObjectiveBreakdown<S>> {
    let ce = cross_entropy(z_s, target)?;
    let d = distillation_term(z_t, z_s, target, cfg)?;
    let warmup = S::lit(cfg.warmup_factor(epoch));
    let scale = S::lit(cfg.distill_scale());
    Ok(ObjectiveBreakdown {
        total: S::lit(cfg.ce_weight) * ce + warmup * (scale * d.total),
        cross_entropy: ce,
        distill: d.total,
        warmup,
        distill_scale: scale,
        saturated: d.saturated,
    })
}

/// One teacher/student pair with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSample<S> {
    pub teacher: LogitVector<S>,
    pub student: LogitVector<S>,
    pub target: usize,
}

/// Mean [`total_objective`] over a batch.
///
/// Samples are evaluated in parallel and reduced with a fixed-shape pairwise
/// sum, so the result does not depend on the thread count.
pub fn batch_objective<S: Scalar>(
    batch: &[DistillSample<S>],
    cfg: &LossConfig,
    epoch: usize,
) -> Result<S> {
    let per: Vec<S> = batch
        .par_iter()
        .map(|s| total_objective(&s.teacher, &s.student, s.target, cfg, epoch).map(|o| o.total))
        .collect::<Result<_>>()?;
    pairwise_mean(&per).ok_or_else(|| Error::Domain("empty batch".into()))
}

#[cfg(test)]
mod tests;
