//! Diagnostics on teacher (and student) predictive distributions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_softmax, softmax, LogitVector, Temperature};
use crate::partition::rank_order;
use crate::scalar::{pairwise_mean, pairwise_sum, Scalar};

/// Average softened teacher prediction over the samples of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPredictionProfile<S> {
    pub class_id: usize,
    pub num_samples: usize,
    pub mean_probs: Vec<S>,
    /// Class indices by descending mean probability, ties to the lower index.
    pub top_indices: Vec<usize>,
}

impl<S: Scalar> ClassPredictionProfile<S> {
    /// Mean probabilities sorted in descending order.
    pub fn sorted_curve(&self) -> Vec<S> {
        self.top_indices.iter().map(|&i| self.mean_probs[i]).collect()
    }

    /// Mass of the top class divided by the mass of ranks 2..=k.
    ///
    /// A diagnostic for how spread out the profile is; large values mean a
    /// sharp, single-peaked prediction.
    pub fn multimodality_ratio(&self, k: usize) -> Result<S> {
        let c = self.mean_probs.len();
        if k < 2 || k > c {
            return Err(Error::Domain(format!("ratio needs 2 <= k <= {c}, got {k}")));
        }
        let curve = self.sorted_curve();
        let rest = pairwise_sum(&curve[1..k]);
        Ok(curve[0] / rest)
    }

    /// Number of classes whose mean probability exceeds `threshold`.
    pub fn classes_above(&self, threshold: S) -> usize {
        self.mean_probs.iter().filter(|&&p| p > threshold).count()
    }
}

fn check_labels(n: usize, labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape { expected: n, got: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Domain(format!("label {bad} out of range for {num_classes} classes")));
    }
    Ok(())
}

fn common_width<S: Scalar>(rows: &[LogitVector<S>]) -> Result<usize> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Domain("empty batch".into()))?
        .len();
    for r in rows {
        if r.len() != first {
            return Err(Error::Shape { expected: first, got: r.len() });
        }
    }
    Ok(first)
}

/// Indices of samples per class, in input order.
fn by_class(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        out[y].push(i);
    }
    out
}

/// Column-wise pairwise mean of selected rows.
fn column_means<S: Scalar>(rows: &[Vec<S>], members: &[usize], width: usize) -> Vec<S> {
    let mut col = Vec::with_capacity(members.len());
    (0..width)
        .map(|j| {
            col.clear();
            col.extend(members.iter().map(|&i| rows[i][j]));
            pairwise_mean(&col).unwrap_or_else(S::zero)
        })
        .collect()
}

/// Per-class mean of `softmax(z_t, T)`. Classes without samples are skipped.
pub fn class_profiles<S: Scalar>(
    teacher: &[LogitVector<S>],
    labels: &[usize],
    t: Temperature<S>,
) -> Result<Vec<ClassPredictionProfile<S>>> {
    let c = common_width(teacher)?;
    check_labels(teacher.len(), labels, c)?;
    let probs: Vec<Vec<S>> = teacher
        .par_iter()
        .map(|z| softmax(z, t).into_inner())
        .collect();
    let groups = by_class(labels, c);
    for (cls, g) in groups.iter().enumerate() {
        if g.is_empty() {
            log::warn!("class {cls} has no samples; profile omitted");
        }
    }
    Ok(groups
        .par_iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(cls, g)| {
            let mean_probs = column_means(&probs, g, c);
            let top_indices = rank_order(&mean_probs);
            ClassPredictionProfile { class_id: cls, num_samples: g.len(), mean_probs, top_indices }
        })
        .collect())
}

/// Original and top-removed renormalized probabilities of the non-top classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancementReport<S> {
    pub top_class: usize,
    /// `(class, p_i, p_renorm_i)` for every class except the top one.
    pub entries: Vec<(usize, S, S)>,
    /// Whether every renormalized entry strictly exceeds the original.
    pub holds: bool,
}

/// Compares each non-top probability with its value after removing the top
/// class and renormalizing.
///
/// The comparison is made on log-probabilities, so it stays strict even when
/// a probability underflows in linear space.
pub fn enhancement_check<S: Scalar>(z_t: &LogitVector<S>, t: Temperature<S>) -> EnhancementReport<S> {
    let top = z_t.argmax();
    let lp = log_softmax(z_t, t);
    let rest: Vec<usize> = (0..z_t.len()).filter(|&i| i != top).collect();
    let scaled: Vec<S> = rest.iter().map(|&i| z_t.as_slice()[i] / t.get()).collect();
    let lse = crate::numeric::log_sum_exp(&scaled);
    let mut holds = true;
    let entries = rest
        .iter()
        .zip(&scaled)
        .map(|(&i, &s)| {
            let lr = s - lse;
            holds &= lr > lp[i];
            (i, lp[i].exp(), lr.exp())
        })
        .collect();
    EnhancementReport { top_class: top, entries, holds }
}

/// Result of the knee-point rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KneePoint<S> {
    pub k: usize,
    /// True when the curve had no positive curvature and `k` fell back to 1.
    pub degenerate: bool,
    /// The averaged descending curve the rule was applied to.
    pub curve: Vec<S>,
}

/// Picks `k` at the largest second difference of a descending curve.
///
/// `d2[i] = y[i-1] - 2 y[i] + y[i+1]` for interior `i`; the first maximum
/// wins. A curve with no curvature above `1e-12 * max|y|` gives `k = 1`
/// flagged degenerate.
pub fn knee_from_curve<S: Scalar>(curve: &[S]) -> Result<KneePoint<S>> {
    let c = curve.len();
    if c < 2 {
        return Err(Error::Domain(format!("knee curve needs at least 2 points, got {c}")));
    }
    if curve.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in knee curve".into()));
    }
    let scale = curve.iter().fold(S::zero(), |m, v| m.max(v.abs()));
    let mut best: Option<(usize, S)> = None;
    for i in 1..c.saturating_sub(1) {
        let d2 = curve[i - 1] - S::lit(2.0) * curve[i] + curve[i + 1];
        if best.is_none_or(|(_, b)| d2 > b) {
            best = Some((i, d2));
        }
    }
    let (k, degenerate) = match best {
        Some((i, d2)) if d2 > S::lit(1e-12) * scale => (i.clamp(1, c - 1), false),
        _ => (1, true),
    };
    Ok(KneePoint { k, degenerate, curve: curve.to_vec() })
}

/// Sorts each profile descending, averages the curves and applies
/// [`knee_from_curve`].
pub fn knee_point_k<S: Scalar>(profiles: &[ClassPredictionProfile<S>]) -> Result<KneePoint<S>> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::Domain("no profiles".into()))?;
    let c = first.mean_probs.len();
    let curves: Vec<Vec<S>> = profiles
        .iter()
        .map(|p| {
            if p.mean_probs.len() != c {
                return Err(Error::Shape { expected: c, got: p.mean_probs.len() });
            }
            Ok(p.sorted_curve())
        })
        .collect::<Result<_>>()?;
    let all: Vec<usize> = (0..curves.len()).collect();
    knee_from_curve(&column_means(&curves, &all, c))
}

/// Mean absolute teacher/student differences binned by true class.
///
/// Row `y`, column `j` holds the mean over samples labelled `y` of
/// `|z_t[j] - z_s[j]|` (and the same for probabilities at temperature `T`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyMatrix<S> {
    pub logit_diff: Vec<Vec<S>>,
    pub prob_diff: Vec<Vec<S>>,
    pub row_counts: Vec<usize>,
    pub diagonal_masked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancySummary<S> {
    pub mean_logit_diff: S,
    pub mean_prob_diff: S,
    pub entries: usize,
}

impl<S: Scalar> DiscrepancyMatrix<S> {
    pub fn num_classes(&self) -> usize {
        self.row_counts.len()
    }

    /// Mean over populated rows, skipping the diagonal when masked.
    pub fn summary(&self) -> DiscrepancySummary<S> {
        let c = self.num_classes();
        let mut logit = Vec::new();
        let mut prob = Vec::new();
        for y in (0..c).filter(|&y| self.row_counts[y] > 0) {
            for j in 0..c {
                if self.diagonal_masked && j == y {
                    continue;
                }
                logit.push(self.logit_diff[y][j]);
                prob.push(self.prob_diff[y][j]);
            }
        }
        DiscrepancySummary {
            mean_logit_diff: pairwise_mean(&logit).unwrap_or_else(S::zero),
            mean_prob_diff: pairwise_mean(&prob).unwrap_or_else(S::zero),
            entries: logit.len(),
        }
    }
}

pub fn discrepancy_matrix<S: Scalar>(
    teacher: &[LogitVector<S>],
    student: &[LogitVector<S>],
    labels: &[usize],
    t: Temperature<S>,
    diagonal_masked: bool,
) -> Result<DiscrepancyMatrix<S>> {
    let c = common_width(teacher)?;
    if student.len() != teacher.len() {
        return Err(Error::Shape { expected: teacher.len(), got: student.len() });
    }
    if common_width(student)? != c {
        return Err(Error::Shape { expected: c, got: student[0].len() });
    }
    check_labels(teacher.len(), labels, c)?;
    let (logit_rows, prob_rows): (Vec<Vec<S>>, Vec<Vec<S>>) = teacher
        .par_iter()
        .zip(student.par_iter())
        .map(|(zt, zs)| {
            let dl = zt.as_slice().iter().zip(zs.as_slice()).map(|(a, b)| (*a - *b).abs()).collect();
            let (pt, ps) = (softmax(zt, t), softmax(zs, t));
            let dp = pt.as_slice().iter().zip(ps.as_slice()).map(|(a, b)| (*a - *b).abs()).collect();
            (dl, dp)
        })
        .unzip();
    let groups = by_class(labels, c);
    let (logit_diff, prob_diff) = groups
        .par_iter()
        .map(|g| (column_means(&logit_rows, g, c), column_means(&prob_rows, g, c)))
        .unzip();
    Ok(DiscrepancyMatrix {
        logit_diff,
        prob_diff,
        row_counts: groups.iter().map(Vec::len).collect(),
        diagonal_masked,
    })
}

/// Mean over non-top classes of `|p_t[i] - p_s[i]|`, the top class being the
/// teacher's argmax.
pub fn nontop_prob_discrepancy<S: Scalar>(
    z_t: &LogitVector<S>,
    z_s: &LogitVector<S>,
    t: Temperature<S>,
) -> Result<S> {
    z_t.ensure_same_len(z_s)?;
    let top = z_t.argmax();
    let (pt, ps) = (softmax(z_t, t), softmax(z_s, t));
    let diffs: Vec<S> = (0..z_t.len())
        .filter(|&i| i != top)
        .map(|i| (pt.as_slice()[i] - ps.as_slice()[i]).abs())
        .collect();
    Ok(pairwise_mean(&diffs).unwrap_or_else(S::zero))
}
