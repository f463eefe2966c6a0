//! Class-index partitions and the two-level decomposition of a distribution.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{LogitVector, ProbVector};
use crate::scalar::Scalar;

/// How a partition was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// `[{t}, rest]` around the ground-truth label.
    TargetLabel,
    /// `[top-k of teacher, rest]`.
    TopK,
    /// `[{top-1}, {ranks 2..k}, rest]`.
    Top1TopKRest,
    Explicit,
}

/// Mutually exclusive, jointly exhaustive groups of class indices.
///
/// Each group is stored in ascending index order. Serializes as a bare array
/// of index arrays; deserialized partitions are tagged [`Strategy::Explicit`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct Partition {
    groups: Vec<Vec<usize>>,
    strategy: Strategy,
    num_classes: usize,
}

impl Partition {
    /// Builds an explicit partition, validating exclusivity and coverage of
    /// `0..num_classes`.
    pub fn explicit(groups: Vec<Vec<usize>>, num_classes: usize) -> Result<Self> {
        Self::build(groups, num_classes, Strategy::Explicit)
    }

    fn build(mut groups: Vec<Vec<usize>>, num_classes: usize, strategy: Strategy) -> Result<Self> {
        if groups.len() < 2 {
            return Err(Error::InvalidPartition(format!(
                "need at least 2 groups, got {}",
                groups.len()
            )));
        }
        let mut owner = vec![usize::MAX; num_classes];
        for (g, group) in groups.iter_mut().enumerate() {
            if group.is_empty() {
                return Err(Error::EmptyPartition);
            }
            group.sort_unstable();
            for &i in group.iter() {
                if i >= num_classes {
                    return Err(Error::InvalidPartition(format!(
                        "class {i} out of range for {num_classes} classes"
                    )));
                }
                if owner[i] != usize::MAX {
                    return Err(Error::InvalidPartition(format!(
                        "class {i} appears in groups {} and {g}",
                        owner[i]
                    )));
                }
                owner[i] = g;
            }
        }
        if let Some(missing) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::InvalidPartition(format!(
                "class {missing} is not covered"
            )));
        }
        Ok(Self {
            groups,
            strategy,
            num_classes,
        })
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, m: usize) -> &[usize] {
        &self.groups[m]
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Group index of every class.
    pub fn group_of(&self) -> Vec<usize> {
        let mut owner = vec![0; self.num_classes];
        for (g, group) in self.groups.iter().enumerate() {
            for &i in group {
                owner[i] = g;
            }
        }
        owner
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.groups).expect("index arrays always serialize")
    }
}

impl TryFrom<Vec<Vec<usize>>> for Partition {
    type Error = Error;
    fn try_from(groups: Vec<Vec<usize>>) -> Result<Self> {
        let n = groups.iter().map(Vec::len).sum();
        Self::explicit(groups, n)
    }
}

impl From<Partition> for Vec<Vec<usize>> {
    fn from(p: Partition) -> Self {
        p.groups
    }
}

/// Strict total order on classes: larger logit first, then lower index.
fn rank_cmp<S: Scalar>(z: &[S], a: usize, b: usize) -> Ordering {
    z[b].partial_cmp(&z[a])
        .expect("logits are finite")
        .then(a.cmp(&b))
}

/// Indices of the `k` largest logits (as a set, ascending).
///
/// Uses selection rather than a full sort. Because the comparator is a strict
/// total order the selected set is unique, so ties resolve deterministically
/// to the lowest class indices.
pub fn top_k_indices<S: Scalar>(z: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(z, a, b));
    }
    let mut top = idx[..k.min(z.len())].to_vec();
    top.sort_unstable();
    top
}

/// Class indices sorted by descending logit (ties: lower index first).
pub fn rank_order<S: Scalar>(z: &[S]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| rank_cmp(z, a, b));
    idx
}

fn complement(n: usize, taken: &[usize]) -> Vec<usize> {
    let mut mask = vec![false; n];
    for &i in taken {
        mask[i] = true;
    }
    (0..n).filter(|&i| !mask[i]).collect()
}

/// `[top-k teacher classes, rest]`.
pub fn partition_topk<S: Scalar>(z_teacher: &LogitVector<S>, k: usize) -> Result<Partition> {
    let c = z_teacher.len();
    if k < 1 || k >= c {
        return Err(Error::Domain(format!("k must be in [1, {}], got {k}", c - 1)));
    }
    let top = top_k_indices(z_teacher.as_slice(), k);
    let rest = complement(c, &top);
    Partition::build(vec![top, rest], c, Strategy::TopK)
}

/// `[{t}, rest]`.
pub fn partition_target(target: usize, num_classes: usize) -> Result<Partition> {
    if num_classes < 2 {
        return Err(Error::Domain(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if target >= num_classes {
        return Err(Error::Domain(format!(
            "target {target} out of range for {num_classes} classes"
        )));
    }
    let rest = complement(num_classes, &[target]);
    Partition::build(vec![vec![target], rest], num_classes, Strategy::TargetLabel)
}

/// `[{top-1}, {ranks 2..k}, rest]`.
pub fn partition_gdkd3<S: Scalar>(z_teacher: &LogitVector<S>, k: usize) -> Result<Partition> {
    let c = z_teacher.len();
    if k < 2 || k >= c {
        return Err(Error::Domain(format!(
            "three-way partition needs k in [2, {}], got {k}",
            c - 1
        )));
    }
    let top = top_k_indices(z_teacher.as_slice(), k);
    let first = z_teacher.argmax();
    let second: Vec<usize> = top.iter().copied().filter(|&i| i != first).collect();
    let rest = complement(c, &top);
    Partition::build(vec![vec![first], second, rest], c, Strategy::Top1TopKRest)
}

/// Group masses plus the within-group renormalized distributions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecomposedDistribution<S> {
    pub top_level: Vec<S>,
    pub leaves: Vec<Vec<S>>,
    /// `true` for groups whose mass was exactly zero; their leaf is uniform.
    pub degenerate: Vec<bool>,
}

impl<S: Scalar> DecomposedDistribution<S> {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }

    /// `b_m * leaf_m[j]` scattered back to class order.
    pub fn reconstruct(&self, partition: &Partition) -> Vec<S> {
        let mut p = vec![S::zero(); partition.num_classes()];
        for (m, group) in partition.groups().iter().enumerate() {
            for (j, &i) in group.iter().enumerate() {
                p[i] = self.top_level[m] * self.leaves[m][j];
            }
        }
        p
    }
}

/// Splits `p` into group masses and renormalized leaves.
pub fn decompose<S: Scalar>(
    p: &ProbVector<S>,
    partition: &Partition,
) -> Result<DecomposedDistribution<S>> {
    if p.len() != partition.num_classes() {
        return Err(Error::Shape {
            expected: partition.num_classes(),
            got: p.len(),
        });
    }
    let probs = p.as_slice();
    let n = partition.num_groups();
    let mut top_level = Vec::with_capacity(n);
    let mut leaves = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    for group in partition.groups() {
        let mass: S = group.iter().map(|&i| probs[i]).sum();
        top_level.push(mass);
        if mass > S::zero() {
            leaves.push(group.iter().map(|&i| probs[i] / mass).collect());
            degenerate.push(false);
        } else {
            let u = S::one() / S::from_usize_lossy(group.len());
            leaves.push(vec![u; group.len()]);
            degenerate.push(true);
        }
    }
    Ok(DecomposedDistribution {
        top_level,
        leaves,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{softmax, subset_softmax, Temperature};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use super::Strategy;

    fn z(v: &[f64]) -> LogitVector<f64> {
        LogitVector::from_slice(v).unwrap()
    }

    /// Exhaustive reference for the tie-break rule: the k smallest classes
    /// under (value desc, index asc), found by repeated linear scans.
    fn brute_topk(v: &[f64], k: usize) -> Vec<usize> {
        let mut taken = vec![false; v.len()];
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for i in 0..v.len() {
                if taken[i] {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) if v[i] > v[b] => Some(i),
                    keep => keep,
                };
            }
            taken[best.unwrap()] = true;
        }
        (0..v.len()).filter(|&i| taken[i]).collect()
    }

    #[test]
    fn topk_examples() {
        let p = partition_topk(&z(&[3.0, 1.0, 4.0, 2.0]), 2).unwrap();
        assert_eq!(p.groups(), &[vec![0, 2], vec![1, 3]]);
        assert_eq!(p.strategy(), Strategy::TopK);

        let p = partition_topk(&z(&[5.0, 5.0, 5.0, 1.0]), 2).unwrap();
        assert_eq!(p.groups(), &[vec![0, 1], vec![2, 3]]);
        assert_eq!(brute_topk(&[5.0, 5.0, 5.0, 1.0], 2), vec![0, 1]);

        let mut v = vec![0.0; 100];
        v[0] = 9.0;
        let p = partition_topk(&z(&v), 5).unwrap();
        assert_eq!(p.group(0), &[0, 1, 2, 3, 4]);
        assert_eq!(p.group(1).len(), 95);
    }

    #[test]
    fn topk_domain_errors() {
        let a = z(&[1.0, 2.0, 3.0]);
        assert!(matches!(partition_topk(&a, 0), Err(Error::Domain(_))));
        assert!(matches!(partition_topk(&a, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn target_examples() {
        assert_eq!(partition_target(2, 4).unwrap().groups(), &[vec![2], vec![0, 1, 3]]);
        assert_eq!(partition_target(0, 2).unwrap().groups(), &[vec![0], vec![1]]);
        let p = partition_target(99, 100).unwrap();
        assert_eq!(p.group(0), &[99]);
        assert_eq!(p.group(1), (0..99).collect::<Vec<_>>().as_slice());
        assert!(matches!(partition_target(4, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn gdkd3_examples() {
        let p = partition_gdkd3(&z(&[3.0, 1.0, 4.0, 2.0]), 2).unwrap();
        assert_eq!(p.groups(), &[vec![2], vec![0], vec![1, 3]]);
        let p = partition_gdkd3(&z(&[1.0, 2.0, 3.0, 4.0, 5.0]), 3).unwrap();
        assert_eq!(p.groups(), &[vec![4], vec![2, 3], vec![0, 1]]);
        let p = partition_gdkd3(&z(&[7.0, 7.0, 0.0]), 2).unwrap();
        assert_eq!(p.groups(), &[vec![0], vec![1], vec![2]]);
        assert!(partition_gdkd3(&z(&[1.0, 2.0, 3.0]), 1).is_err());
        assert!(partition_gdkd3(&z(&[1.0, 2.0, 3.0]), 3).is_err());
    }

    #[test]
    fn explicit_validation() {
        assert!(Partition::explicit(vec![vec![0, 1], vec![2]], 3).is_ok());
        assert!(matches!(
            Partition::explicit(vec![vec![0, 1, 2]], 3),
            Err(Error::InvalidPartition(_))
        ));
        assert!(matches!(
            Partition::explicit(vec![vec![0, 1], vec![]], 2),
            Err(Error::EmptyPartition)
        ));
        assert!(Partition::explicit(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(Partition::explicit(vec![vec![0], vec![2]], 3).is_err());
        assert!(Partition::explicit(vec![vec![0], vec![1, 3]], 3).is_err());
    }

    #[test]
    fn json_is_array_of_arrays() {
        let p = partition_topk(&z(&[3.0, 1.0, 4.0, 2.0]), 2).unwrap();
        assert_eq!(p.to_json(), "[[0,2],[1,3]]");
        let back: Partition = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(back.groups(), p.groups());
        assert_eq!(back.strategy(), Strategy::Explicit);
        assert!(serde_json::from_str::<Partition>("[[0,1],[1]]").is_err());
    }

    #[test]
    fn decompose_examples() {
        let part = Partition::explicit(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let d = decompose(&ProbVector::new(vec![0.25; 4]).unwrap(), &part).unwrap();
        assert_eq!(d.top_level, vec![0.5, 0.5]);
        assert_eq!(d.leaves, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);

        let part = partition_target(0, 4).unwrap();
        let d = decompose(&ProbVector::new(vec![0.7, 0.1, 0.1, 0.1]).unwrap(), &part).unwrap();
        assert_abs_diff_eq!(d.top_level[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(d.top_level[1], 0.3, epsilon = 1e-15);
        assert_eq!(d.leaves[0], vec![1.0]);
        for &x in &d.leaves[1] {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }

        let part = Partition::explicit(vec![vec![0, 1], vec![2]], 3).unwrap();
        let d = decompose(&ProbVector::new(vec![0.6, 0.3, 0.1]).unwrap(), &part).unwrap();
        assert_abs_diff_eq!(d.top_level[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(d.top_level[1], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(d.leaves[0][0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.leaves[0][1], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(d.leaves[1], vec![1.0]);
        assert!(!d.any_degenerate());
    }

    #[test]
    fn zero_mass_group_is_flagged_uniform() {
        let part = Partition::explicit(vec![vec![0], vec![1, 2]], 3).unwrap();
        let d = decompose(&ProbVector::new(vec![1.0, 0.0, 0.0]).unwrap(), &part).unwrap();
        assert_eq!(d.degenerate, vec![false, true]);
        assert_eq!(d.leaves[1], vec![0.5, 0.5]);
    }

    fn logits() -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0..10.0_f64, 3..60)
    }

    /// Random partition of `0..n` into 2..=4 groups.
    fn random_groups(n: usize, labels: &[usize]) -> Option<Vec<Vec<usize>>> {
        let g = labels.iter().max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); g];
        for (i, &l) in labels.iter().enumerate().take(n) {
            groups[l].push(i);
        }
        groups.retain(|x| !x.is_empty());
        (groups.len() >= 2).then_some(groups)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn topk_matches_brute_force(
            v in prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 0.5, 2.0]), 3..30),
            kk in 1usize..29,
        ) {
            let k = 1 + kk % (v.len() - 1);
            let p = partition_topk(&z(&v), k).unwrap();
            let expected = brute_topk(&v, k);
            prop_assert_eq!(p.group(0), expected.as_slice());
            // determinism
            prop_assert_eq!(p, partition_topk(&z(&v), k).unwrap());
        }

        #[test]
        fn decomposition_reconstructs(
            v in logits(),
            labels in prop::collection::vec(0usize..4, 60),
            temp in 0.5..5.0_f64,
        ) {
            let Some(groups) = random_groups(v.len(), &labels) else { return Ok(()) };
            let part = Partition::explicit(groups, v.len()).unwrap();
            let a = z(&v);
            let tt = Temperature::new(temp).unwrap();
            let p = softmax(&a, tt);
            let d = decompose(&p, &part).unwrap();
            prop_assert!((d.top_level.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for leaf in &d.leaves {
                prop_assert!((leaf.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            for (x, y) in d.reconstruct(&part).iter().zip(p.as_slice()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            // two routes to the leaves
            for (m, group) in part.groups().iter().enumerate() {
                let direct = subset_softmax(&a, group, tt).unwrap();
                for (x, y) in direct.as_slice().iter().zip(&d.leaves[m]) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn renormalized_nontop_exceeds_original(v in logits(), temp in 0.5..5.0_f64) {
            let a = z(&v);
            let tt = Temperature::new(temp).unwrap();
            let part = partition_topk(&a, 1).unwrap();
            let p = softmax(&a, tt);
            let d = decompose(&p, &part).unwrap();
            for (j, &i) in part.group(1).iter().enumerate() {
                prop_assert!(d.leaves[1][j] > p.as_slice()[i]);
            }
        }
    }
}
