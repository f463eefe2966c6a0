//! Numerically stable softmax, log-softmax and KL divergence.
//!
//! Everything that starts from logits goes through the log domain with
//! max-subtraction, so no intermediate `exp` overflows and no probability
//! that is representable in log space is lost to underflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Raw pre-softmax scores of one sample. At least two classes, all finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<S>", into = "Vec<S>", bound = "S: Scalar + Serialize + for<'a> Deserialize<'a>")]
pub struct LogitVector<S> {
    values: Vec<S>,
}

impl<S: Scalar> LogitVector<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "logit {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    pub fn from_slice(values: &[S]) -> Result<Self> {
        Self::new(values.to_vec())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<S> {
        self.values
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }

    /// Adds `c` to every entry.
    pub fn shifted(&self, c: S) -> Result<Self> {
        Self::new(self.values.iter().map(|&v| v + c).collect())
    }

    pub(crate) fn ensure_same_len(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(())
    }
}

impl<S: Scalar> TryFrom<Vec<S>> for LogitVector<S> {
    type Error = Error;
    fn try_from(v: Vec<S>) -> Result<Self> {
        Self::new(v)
    }
}

impl<S> From<LogitVector<S>> for Vec<S> {
    fn from(z: LogitVector<S>) -> Self {
        z.values
    }
}

/// A probability vector: entries in [0, 1] summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbVector<S> {
    values: Vec<S>,
}

impl<S: Scalar> ProbVector<S> {
    /// Validates entries and normalization.
    ///
    /// The sum tolerance is 1e-9 plus a few ulps per entry, which is exactly
    /// 1e-9 for practical purposes in `f64` and scales up for `f32`.
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        if let Some(i) = values
            .iter()
            .position(|&v| !v.is_finite() || v < S::zero() || v > S::one())
        {
            return Err(Error::InvalidInput(format!(
                "probability {i} = {} outside [0, 1]",
                values[i]
            )));
        }
        let sum = crate::scalar::pairwise_sum(&values);
        if (sum - S::one()).abs() > Self::sum_tolerance(values.len()) {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self { values })
    }

    fn sum_tolerance(len: usize) -> S {
        S::lit(1e-9) + S::from_usize_lossy(4 * len) * S::epsilon()
    }

    /// Wraps values already known to be a distribution (softmax output).
    pub(crate) fn new_unchecked(values: Vec<S>) -> Self {
        Self { values }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<S> {
        self.values
    }

    /// Shannon entropy in nats, with 0 log 0 = 0.
    pub fn entropy(&self) -> S {
        -self
            .values
            .iter()
            .filter(|&&p| p > S::zero())
            .map(|&p| p * p.ln())
            .sum::<S>()
    }
}

/// Softmax temperature, strictly positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct Temperature<S>(S);

impl<S: Scalar> Temperature<S> {
    pub fn new(t: S) -> Result<Self> {
        if !t.is_finite() || t <= S::zero() {
            return Err(Error::Domain(format!("temperature must be > 0, got {t}")));
        }
        Ok(Self(t))
    }

    pub fn one() -> Self {
        Self(S::one())
    }

    #[inline]
    pub fn get(self) -> S {
        self.0
    }
}

pub(crate) fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `log Σ exp(x_i)` with max-subtraction. `-inf` for an empty slice.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let m = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if m == S::neg_infinity() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<S>().ln()
}

fn scaled<S: Scalar>(z: &[S], t: Temperature<S>) -> Vec<S> {
    let t = t.get();
    if t == S::one() {
        z.to_vec()
    } else {
        z.iter().map(|&v| v / t).collect()
    }
}

/// `log softmax(z / T)`.
pub fn log_softmax<S: Scalar>(z: &LogitVector<S>, t: Temperature<S>) -> Vec<S> {
    let u = scaled(z.as_slice(), t);
    let lse = log_sum_exp(&u);
    u.into_iter().map(|v| v - lse).collect()
}

/// `softmax(z / T)`.
pub fn softmax<S: Scalar>(z: &LogitVector<S>, t: Temperature<S>) -> ProbVector<S> {
    let u = scaled(z.as_slice(), t);
    let m = u.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = u.iter().map(|&v| (v - m).exp()).collect();
    let total: S = e.iter().copied().sum();
    ProbVector::new_unchecked(e.into_iter().map(|v| v / total).collect())
}

pub(crate) fn check_subset(indices: &[usize], num_classes: usize) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::EmptyPartition);
    }
    let mut seen = vec![false; num_classes];
    for &i in indices {
        if i >= num_classes {
            return Err(Error::Domain(format!(
                "class index {i} out of range for {num_classes} classes"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidInput(format!("class index {i} repeated")));
        }
    }
    Ok(())
}

/// Log of the softmax restricted to `indices`, in the order given.
pub fn subset_log_softmax<S: Scalar>(
    z: &LogitVector<S>,
    indices: &[usize],
    t: Temperature<S>,
) -> Result<Vec<S>> {
    check_subset(indices, z.len())?;
    let tv = t.get();
    let u: Vec<S> = indices.iter().map(|&i| z.as_slice()[i] / tv).collect();
    let lse = log_sum_exp(&u);
    Ok(u.into_iter().map(|v| v - lse).collect())
}

/// Softmax renormalized over `indices` only, in the order given.
pub fn subset_softmax<S: Scalar>(
    z: &LogitVector<S>,
    indices: &[usize],
    t: Temperature<S>,
) -> Result<ProbVector<S>> {
    check_subset(indices, z.len())?;
    let tv = t.get();
    let u: Vec<S> = indices.iter().map(|&i| z.as_slice()[i] / tv).collect();
    let m = u.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = u.iter().map(|&v| (v - m).exp()).collect();
    let total: S = e.iter().copied().sum();
    Ok(ProbVector::new_unchecked(
        e.into_iter().map(|v| v / total).collect(),
    ))
}

/// `KL(p || q)` in nats.
///
/// Returns `+inf` when `p_i > 0` where `q_i = 0`; never NaN.
pub fn kl_divergence<S: Scalar>(p: &ProbVector<S>, q: &ProbVector<S>) -> Result<S> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut acc = S::zero();
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        if pi == S::zero() {
            continue;
        }
        if qi == S::zero() {
            return Ok(S::infinity());
        }
        acc = acc + pi * (pi.ln() - qi.ln());
    }
    Ok(acc.max(S::zero()))
}

/// `KL(p || q)` from log-probabilities: `Σ exp(lp_i) (lp_i - lq_i)`.
///
/// Entries with `lp_i = -inf` contribute nothing. The sum is clamped at zero
/// to absorb rounding.
pub fn kl_from_log_probs<S: Scalar>(log_p: &[S], log_q: &[S]) -> S {
    debug_assert_eq!(log_p.len(), log_q.len());
    let mut acc = S::zero();
    for (&lp, &lq) in log_p.iter().zip(log_q) {
        if lp == S::neg_infinity() {
            continue;
        }
        acc = acc + lp.exp() * (lp - lq);
    }
    acc.max(S::zero())
}

/// Cross-entropy `-log softmax(z)_target` at temperature 1.
pub fn cross_entropy<S: Scalar>(z: &LogitVector<S>, target: usize) -> Result<S> {
    if target >= z.len() {
        return Err(Error::Domain(format!(
            "target {target} out of range for {} classes",
            z.len()
        )));
    }
    let lse = log_sum_exp(z.as_slice());
    Ok(lse - z.as_slice()[target])
}
