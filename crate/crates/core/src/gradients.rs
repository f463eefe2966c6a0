//! Analytic gradients with respect to the student logits.
//!
//! Two independent routes exist. [`grad_topkd`], [`grad_otherkd`] and
//! [`grad_kd`] implement the closed forms for the top-1 split literally
//! (including the `eta_t / eta_s` ratio). [`grad_plan`] handles any partition
//! and weights using the per-group form
//!
//! ```text
//! d/du_i = w0 * (p_s[i] - b_t[g] * leaf_s[i]) + w_g * (leaf_s[i] - leaf_t[i])
//! ```
//!
//! with `u = z_s / T`, `g` the group of `i`. Both apply the `1/T` chain
//! factor. [`finite_diff`] is the oracle for both.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{
    distillation_term, log_decompose, logit_standardize, plan_for, DecoupledPlan, LossConfig,
    LossPlan, ObjectiveBreakdown, KL_CAP,
};
use crate::numeric::{cross_entropy, log_sum_exp, softmax, subset_softmax, LogitVector, Temperature};
use crate::partition::partition_target;
use crate::scalar::{pairwise_mean, Scalar};

/// `dL/dz_s`, one entry per class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradVector<S> {
    pub values: Vec<S>,
    /// A ratio guard clamped an intermediate value.
    pub saturated: bool,
}

impl<S: Scalar> GradVector<S> {
    fn new(values: Vec<S>) -> Self {
        Self {
            values,
            saturated: false,
        }
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn sum(&self) -> S {
        self.values.iter().copied().sum()
    }

    pub fn scale(mut self, s: S) -> Self {
        for v in &mut self.values {
            *v = *v * s;
        }
        self
    }

    /// Elementwise `a + s * b`.
    pub fn axpy(mut self, s: S, other: &Self) -> Self {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + s * b;
        }
        self.saturated |= other.saturated;
        self
    }

    /// `|a - b| <= atol + rtol * |b|` for every entry.
    pub fn allclose(&self, other: &Self, rtol: S, atol: S) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(&a, &b)| (a - b).abs() <= atol + rtol * b.abs())
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }
}

fn check<S: Scalar>(z_t: &LogitVector<S>, z_s: &LogitVector<S>, c: usize) -> Result<()> {
    z_t.ensure_same_len(z_s)?;
    if c >= z_t.len() {
        return Err(Error::Domain(format!(
            "class {c} out of range for {} classes",
            z_t.len()
        )));
    }
    Ok(())
}

/// Gradient of `KL(b_t || b_s)` for the split `[{c}, rest]`:
/// `p_s[c] - p_t[c]` at `c`, `p_s[i] (p_t[c] - (eta_t/eta_s) p_s[c])` elsewhere,
/// times `1/T`.
pub fn grad_topkd<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    c: usize,
    t: Temperature<S>,
) -> Result<GradVector<S>> {
    check(z_t, z_s, c)?;
    let pt = softmax(z_t, t);
    let ps = softmax(z_s, t);
    let (pt, ps) = (pt.as_slice(), ps.as_slice());

    let log_eta = |z: &LogitVector<S>| {
        let u: Vec<S> = z.as_slice().iter().map(|&v| v / t.get()).collect();
        let rest: Vec<S> = u
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != c)
            .map(|(_, &v)| v)
            .collect();
        log_sum_exp(&rest) - log_sum_exp(&u)
    };
    let mut ratio = (log_eta(z_t) - log_eta(z_s)).exp();
    let mut saturated = false;
    if !(ratio <= S::lit(KL_CAP)) {
        ratio = S::lit(KL_CAP);
        saturated = true;
    }

    let inv_t = S::one() / t.get();
    let values = (0..pt.len())
        .map(|i| {
            let g = if i == c {
                ps[c] - pt[c]
            } else {
                ps[i] * (pt[c] - ratio * ps[c])
            };
            g * inv_t
        })
        .collect();
    Ok(GradVector { values, saturated })
}

/// Gradient of `KL(p_t[rest] || p_s[rest])` for the split `[{c}, rest]`:
/// zero at `c`, `leaf_s[i] - leaf_t[i]` elsewhere, times `1/T`.
pub fn grad_otherkd<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    c: usize,
    t: Temperature<S>,
) -> Result<GradVector<S>> {
    check(z_t, z_s, c)?;
    let rest: Vec<usize> = (0..z_t.len()).filter(|&i| i != c).collect();
    let lt = subset_softmax(z_t, &rest, t)?;
    let ls = subset_softmax(z_s, &rest, t)?;
    let inv_t = S::one() / t.get();
    let mut values = vec![S::zero(); z_t.len()];
    for (j, &i) in rest.iter().enumerate() {
        values[i] = (ls.as_slice()[j] - lt.as_slice()[j]) * inv_t;
    }
    Ok(GradVector::new(values))
}

/// Gradient of `KL(p_t || p_s)`: `(p_s - p_t) / T`.
pub fn grad_kd<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    t: Temperature<S>,
) -> Result<GradVector<S>> {
    z_t.ensure_same_len(z_s)?;
    let pt = softmax(z_t, t);
    let ps = softmax(z_s, t);
    let inv_t = S::one() / t.get();
    Ok(GradVector::new(
        ps.as_slice()
            .iter()
            .zip(pt.as_slice())
            .map(|(&s, &q)| (s - q) * inv_t)
            .collect(),
    ))
}

/// Gradient of an arbitrary weighted decoupled loss.
pub fn grad_plan<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    plan: &DecoupledPlan<S>,
    t: Temperature<S>,
) -> Result<GradVector<S>> {
    z_t.ensure_same_len(z_s)?;
    if plan.partition.num_classes() != z_t.len() || plan.low_weights.len() != plan.partition.num_groups() {
        return Err(Error::Config("plan does not match the logit vectors".into()));
    }
    let dt = log_decompose(z_t, &plan.partition, t);
    let ds = log_decompose(z_s, &plan.partition, t);
    let inv_t = S::one() / t.get();
    let mut values = vec![S::zero(); z_t.len()];
    for (g, group) in plan.partition.groups().iter().enumerate() {
        let b_t = dt.log_top[g].exp();
        let log_b_s = ds.log_top[g];
        for (j, &i) in group.iter().enumerate() {
            let leaf_s = ds.log_leaves[g][j].exp();
            let leaf_t = dt.log_leaves[g][j].exp();
            let p_s = (log_b_s + ds.log_leaves[g][j]).exp();
            let high = p_s - b_t * leaf_s;
            let low = leaf_s - leaf_t;
            values[i] = (plan.high_weight * high + plan.low_weights[g] * low) * inv_t;
        }
    }
    Ok(GradVector::new(values))
}

/// Pulls a gradient back through `z -> (z - mean) / std` (population std).
fn standardize_backward<S: Scalar>(z: &LogitVector<S>, g_std: &[S]) -> Result<Vec<S>> {
    let zs = logit_standardize(z)?;
    let n = S::from_usize_lossy(z.len());
    let mean = z.as_slice().iter().copied().sum::<S>() / n;
    let std = (z
        .as_slice()
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<S>()
        / n)
        .sqrt();
    let g_mean = g_std.iter().copied().sum::<S>() / n;
    let gz_mean = g_std
        .iter()
        .zip(zs.as_slice())
        .map(|(&g, &v)| g * v)
        .sum::<S>()
        / n;
    Ok(g_std
        .iter()
        .zip(zs.as_slice())
        .map(|(&g, &v)| (g - g_mean - v * gz_mean) / std)
        .collect())
}

/// Gradient of `cfg.distill_scale() * distillation_term(..)`, i.e. the
/// configured distillation loss including `T^2`/LS scaling but not warmup.
pub fn grad_loss<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    target: usize,
    cfg: &LossConfig,
) -> Result<GradVector<S>> {
    z_t.ensure_same_len(z_s)?;
    let t = Temperature::new(S::lit(cfg.temperature))?;
    let (zt, zs);
    let (a, b) = if cfg.use_ls {
        zt = logit_standardize(z_t)?;
        zs = logit_standardize(z_s)?;
        (&zt, &zs)
    } else {
        (z_t, z_s)
    };
    let mut g = match plan_for(a, target, cfg)? {
        LossPlan::Kd => grad_kd(a, b, t)?,
        LossPlan::Decoupled(plan) => grad_plan(a, b, &plan, t)?,
    };
    if cfg.use_ls {
        g.values = standardize_backward(z_s, &g.values)?;
    }
    Ok(g.scale(S::lit(cfg.distill_scale())))
}

/// Gradient of `CE(z, target)` at temperature 1: `softmax(z) - onehot`.
pub fn grad_cross_entropy<S: Scalar>(z: &LogitVector<S>, target: usize) -> Result<GradVector<S>> {
    if target >= z.len() {
        return Err(Error::Domain(format!("target {target} out of range for {} classes", z.len())));
    }
    let mut g = softmax(z, Temperature::one()).into_inner();
    g[target] = g[target] - S::one();
    Ok(GradVector::new(g))
}

/// Value and gradient of the full per-sample training objective.
pub fn grad_objective<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    target: usize,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<(ObjectiveBreakdown<S>, GradVector<S>)> {
    let ce = cross_entropy(z_s, target)?;
    let d = distillation_term(z_t, z_s, target, cfg)?;
    let warmup = S::lit(cfg.warmup_factor(epoch));
    let scale = S::lit(cfg.distill_scale());
    let ce_weight = S::lit(cfg.ce_weight);
    let value = ObjectiveBreakdown {
        total: ce_weight * ce + warmup * (scale * d.total),
        cross_entropy: ce,
        distill: d.total,
        warmup,
        distill_scale: scale,
        saturated: d.saturated,
    };

    let grad = grad_cross_entropy(z_s, target)?.scale(ce_weight);
    let grad = if warmup > S::zero() {
        grad.axpy(warmup, &grad_loss(z_t, z_s, target, cfg)?)
    } else {
        grad
    };
    Ok((value, grad))
}

/// Central differences of `f` around `z`, step `h`.
pub fn finite_diff<S, F>(f: F, z: &LogitVector<S>, h: S) -> Result<GradVector<S>>
where
    S: Scalar,
    F: Fn(&LogitVector<S>) -> Result<S>,
{
    if !(h > S::zero()) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {h}")));
    }
    let base = z.as_slice();
    let two_h = h + h;
    let mut values = Vec::with_capacity(base.len());
    let mut probe = base.to_vec();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = f(&LogitVector::from_slice(&probe)?)?;
        probe[i] = base[i] - h;
        let minus = f(&LogitVector::from_slice(&probe)?)?;
        probe[i] = base[i];
        values.push((plus - minus) / two_h);
    }
    Ok(GradVector::new(values))
}

/// Non-top gradient magnitudes of one sample under the top-1 split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleMagnitudes<S> {
    pub top: S,
    pub nontop_topkd: S,
    pub nontop_otherkd_weighted: S,
    pub nontop_coupledkd: S,
    pub eta_t: S,
    pub eta_s: S,
}

/// Mean absolute gradient entries of the TopKD and OtherKD terms over the
/// non-top classes of one sample (top class `c`).
///
/// `nontop_otherkd_weighted` uses weight `beta`; `nontop_coupledkd` uses the
/// coupled KD weight `1 - p_t[c]`.
pub fn sample_magnitudes<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    c: usize,
    beta: S,
    t: Temperature<S>,
) -> Result<SampleMagnitudes<S>> {
    let top = grad_topkd(z_t, z_s, c, t)?;
    let other = grad_otherkd(z_t, z_s, c, t)?;
    let pt_c = softmax(z_t, t).as_slice()[c];
    let ps_c = softmax(z_s, t).as_slice()[c];
    let eta_t = S::one() - pt_c;
    let n = S::from_usize_lossy(z_t.len() - 1);
    let mean_abs = |g: &[S], w: S| {
        g.iter()
            .enumerate()
            .filter(|&(i, _)| i != c)
            .map(|(_, &v)| (w * v).abs())
            .sum::<S>()
            / n
    };
    Ok(SampleMagnitudes {
        top: top.values[c].abs(),
        nontop_topkd: mean_abs(&top.values, S::one()),
        nontop_otherkd_weighted: mean_abs(&other.values, beta),
        nontop_coupledkd: mean_abs(&other.values, eta_t),
        eta_t,
        eta_s: S::one() - ps_c,
    })
}

/// Batch/epoch mean of [`SampleMagnitudes`]; one CSV row per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradMagnitudeReport<S> {
    pub epoch: usize,
    pub mean_abs_top: S,
    pub mean_abs_nontop_topkd: S,
    pub mean_abs_nontop_otherkd_weighted: S,
    pub mean_abs_nontop_coupledkd: S,
    #[serde(rename = "eta_T")]
    pub eta_t: S,
    #[serde(rename = "eta_S")]
    pub eta_s: S,
}

pub const GRAD_REPORT_COLUMNS: [&str; 7] = [
    "epoch",
    "mean_abs_top",
    "mean_abs_nontop_topkd",
    "mean_abs_nontop_otherkd_weighted",
    "mean_abs_nontop_coupledkd",
    "eta_T",
    "eta_S",
];

impl<S: Scalar> GradMagnitudeReport<S> {
    /// Per-sample magnitudes averaged with a pairwise sum.
    pub fn from_samples(epoch: usize, samples: &[SampleMagnitudes<S>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Domain("gradient report over an empty batch".into()));
        }
        let col = |f: fn(&SampleMagnitudes<S>) -> S| {
            let v: Vec<S> = samples.iter().map(f).collect();
            pairwise_mean(&v).expect("non-empty")
        };
        Ok(Self {
            epoch,
            mean_abs_top: col(|s| s.top),
            mean_abs_nontop_topkd: col(|s| s.nontop_topkd),
            mean_abs_nontop_otherkd_weighted: col(|s| s.nontop_otherkd_weighted),
            mean_abs_nontop_coupledkd: col(|s| s.nontop_coupledkd),
            eta_t: col(|s| s.eta_t),
            eta_s: col(|s| s.eta_s),
        })
    }
}

/// A teacher/student pair with the class isolated by the top-1 split.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample<S> {
    pub teacher: LogitVector<S>,
    pub student: LogitVector<S>,
    pub anchor: usize,
}

/// Magnitude report over a batch. Parallel, with deterministic reduction.
pub fn grad_magnitude_report<S: Scalar>(
    batch: &[GradSample<S>],
    beta: S,
    t: Temperature<S>,
    epoch: usize,
) -> Result<GradMagnitudeReport<S>> {
    if batch.is_empty() {
        return Err(Error::Domain("gradient report over an empty batch".into()));
    }
    let per: Vec<SampleMagnitudes<S>> = batch
        .par_iter()
        .map(|s| sample_magnitudes(&s.teacher, &s.student, s.anchor, beta, t))
        .collect::<Result<_>>()?;
    GradMagnitudeReport::from_samples(epoch, &per)
}

/// Plan for the top-1 split with explicit weights; used by tests and the
/// verification suites to route TopKD/OtherKD through [`grad_plan`].
pub fn top1_plan<S: Scalar>(num_classes: usize, c: usize, high: S, other: S) -> Result<DecoupledPlan<S>> {
    Ok(DecoupledPlan {
        partition: partition_target(c, num_classes)?,
        high_weight: high,
        low_weights: vec![S::zero(), other],
    })
}
