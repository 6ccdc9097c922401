//! Longtailness metrics and cardinality-adjacent class splitting.
//!
//! Four scalar measures of how far a label distribution is from uniform:
//! the max/min ratio, KL divergence to uniform, total absolute deviation
//! from uniform, and the Gini coefficient. Larger values mean a more
//! long-tailed distribution; a uniform distribution scores (1, 0, 0, 0).

use serde::{Deserialize, Serialize};

use crate::distribution::ClassDistribution;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    Natural,
    Base2,
}

impl LogBase {
    fn apply<F: Real>(self, x: F) -> F {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Base2 => x.log2(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport<F> {
    pub ratio: F,
    pub kl: F,
    pub abs_dev: F,
    pub gini: F,
    pub log_base: LogBase,
}

/// N_max / N_min.
pub fn imbalance_ratio<F: Real>(dist: &ClassDistribution) -> F {
    let max = dist.counts().iter().map(|&(_, n)| n).max().unwrap_or(1);
    let min = dist.counts().iter().map(|&(_, n)| n).min().unwrap_or(1);
    F::from_u64(max).unwrap() / F::from_u64(min).unwrap()
}

/// KL divergence from the class distribution to uniform: sum p_i log(p_i / (1/C)).
pub fn imbalance_kl<F: Real>(dist: &ClassDistribution, base: LogBase) -> F {
    let n = F::from_u64(dist.total()).unwrap();
    let c = F::from_usize_lossy(dist.num_classes());
    dist.counts()
        .iter()
        .map(|&(_, ni)| {
            let p = F::from_u64(ni).unwrap() / n;
            p * base.apply(p * c)
        })
        .sum()
}

/// Sum of |1/C - N_i/N| over classes.
pub fn imbalance_abs<F: Real>(dist: &ClassDistribution) -> F {
    let n = F::from_u64(dist.total()).unwrap();
    let c_inv = F::one() / F::from_usize_lossy(dist.num_classes());
    dist.counts()
        .iter()
        .map(|&(_, ni)| (c_inv - F::from_u64(ni).unwrap() / n).abs())
        .sum()
}

/// Gini coefficient: sort counts ascending, sum (2i - C - 1) N_(i) / (C sum N).
pub fn gini<F: Real>(dist: &ClassDistribution) -> F {
    let mut counts: Vec<u64> = dist.counts().iter().map(|&(_, n)| n).collect();
    counts.sort_unstable();
    let c = counts.len() as i64;
    let num: i64 = counts
        .iter()
        .enumerate()
        .map(|(idx, &n)| (2 * (idx as i64 + 1) - c - 1) * n as i64)
        .sum();
    F::from_i64(num).unwrap() / (F::from_i64(c).unwrap() * F::from_u64(dist.total()).unwrap())
}

pub fn report<F: Real>(dist: &ClassDistribution, base: LogBase) -> ImbalanceReport<F> {
    ImbalanceReport {
        ratio: imbalance_ratio(dist),
        kl: imbalance_kl(dist, base),
        abs_dev: imbalance_abs(dist),
        gini: gini(dist),
        log_base: base,
    }
}

/// One contiguous cardinality band of classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    /// Member classes, sorted by id; expert output index = position here.
    pub class_ids: Vec<u32>,
    /// Average shot: mean train samples per class within the subset.
    pub avg_shot: f64,
}

/// Ordered partition of classes into cardinality-adjacent subsets,
/// fewest-shot first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardinalitySplit {
    pub thresholds: Vec<u64>,
    pub subsets: Vec<Subset>,
}

impl CardinalitySplit {
    pub fn num_subsets(&self) -> usize {
        self.subsets.len()
    }

    /// Subset index for a class, or None if the class is not in the split.
    pub fn subset_of(&self, class_id: u32) -> Option<usize> {
        self.subsets
            .iter()
            .position(|s| s.class_ids.binary_search(&class_id).is_ok())
    }

    /// (subset index, index of the class within the subset's sorted ids).
    pub fn locate(&self, class_id: u32) -> Option<(usize, usize)> {
        self.subsets.iter().enumerate().find_map(|(l, s)| {
            s.class_ids.binary_search(&class_id).ok().map(|pos| (l, pos))
        })
    }

    /// Smallest average shot across subsets (the few-shot subset's).
    pub fn min_avg_shot(&self) -> f64 {
        self.subsets
            .iter()
            .map(|s| s.avg_shot)
            .fold(f64::INFINITY, f64::min)
    }

    /// Human-readable band label for subset `l` (few/.../many pattern).
    pub fn band_label(&self, l: usize) -> String {
        let last = self.subsets.len() - 1;
        match l {
            0 if self.thresholds.is_empty() => "all".into(),
            0 => format!("<= {}", self.thresholds[0]),
            i if i == last => format!("> {}", self.thresholds[last - 1]),
            i => format!("({}, {}]", self.thresholds[i - 1], self.thresholds[i]),
        }
    }
}

/// Split classes into bands by train cardinality. Bands are half-open with
/// the boundary count in the lower band: S_1 holds N_c <= T_1, S_{j+1} holds
/// T_j < N_c <= T_{j+1}, and the last band holds N_c > T_{L-1}. An empty
/// threshold list yields a single subset with every class.
pub fn split_by_thresholds(
    dist: &ClassDistribution,
    thresholds: &[u64],
) -> Result<CardinalitySplit> {
    if !thresholds.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidSpec(format!(
            "thresholds must be strictly increasing, got {thresholds:?}"
        )));
    }
    let num_subsets = thresholds.len() + 1;
    let mut members: Vec<Vec<(u32, u64)>> = vec![Vec::new(); num_subsets];
    for &(id, n) in dist.counts() {
        let band = thresholds.iter().position(|&t| n <= t).unwrap_or(num_subsets - 1);
        members[band].push((id, n));
    }

    let mut subsets = Vec::with_capacity(num_subsets);
    let split_for_labels = CardinalitySplit {
        thresholds: thresholds.to_vec(),
        subsets: vec![
            Subset {
                class_ids: vec![],
                avg_shot: 0.0
            };
            num_subsets
        ],
    };
    for (l, mut band) in members.into_iter().enumerate() {
        if band.is_empty() {
            return Err(Error::EmptyBand(format!(
                "no classes in band {}",
                split_for_labels.band_label(l)
            )));
        }
        band.sort_unstable_by_key(|&(id, _)| id);
        let avg_shot = band.iter().map(|&(_, n)| n as f64).sum::<f64>() / band.len() as f64;
        subsets.push(Subset {
            class_ids: band.into_iter().map(|(id, _)| id).collect(),
            avg_shot,
        });
    }
    Ok(CardinalitySplit {
        thresholds: thresholds.to_vec(),
        subsets,
    })
}

/// Thresholds at the given cardinality quantiles (fractions in (0,1)),
/// taken from the ascending-sorted counts.
pub fn quantile_thresholds(dist: &ClassDistribution, fractions: &[f64]) -> Result<Vec<u64>> {
    let mut counts: Vec<u64> = dist.counts().iter().map(|&(_, n)| n).collect();
    counts.sort_unstable();
    let mut out = Vec::new();
    for &q in fractions {
        if !(0.0..1.0).contains(&q) {
            return Err(Error::InvalidSpec(format!("quantile {q} outside [0,1)")));
        }
        let idx = ((counts.len() as f64 * q) as usize).min(counts.len() - 1);
        out.push(counts[idx]);
    }
    out.dedup();
    if !out.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidSpec(
            "quantile thresholds are not strictly increasing".into(),
        ));
    }
    Ok(out)
}

/// One labeled metric row of a Table-1-style comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow<F> {
    pub name: String,
    pub report: ImbalanceReport<F>,
}

/// Entire-set report plus one report per subset, computed on each subset's
/// counts alone.
pub fn longtailness_comparison<F: Real>(
    dist: &ClassDistribution,
    split: &CardinalitySplit,
    base: LogBase,
) -> Result<Vec<ComparisonRow<F>>> {
    let mut rows = vec![ComparisonRow {
        name: "entire".to_string(),
        report: report(dist, base),
    }];
    for (l, subset) in split.subsets.iter().enumerate() {
        let sub_dist = dist.restrict(&subset.class_ids)?;
        rows.push(ComparisonRow {
            name: format!("subset {} [{}]", l + 1, split.band_label(l)),
            report: report(&sub_dist, base),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(counts: &[u64]) -> ClassDistribution {
        ClassDistribution::from_counts(counts).unwrap()
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(imbalance_ratio::<f64>(&dist(&[5, 1280])), 256.0);
        assert_eq!(imbalance_ratio::<f64>(&dist(&[100, 100, 100])), 1.0);
        assert_eq!(imbalance_ratio::<f64>(&dist(&[2, 2, 4])), 2.0);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(imbalance_kl::<f64>(&dist(&[7, 7, 7]), LogBase::Natural), 0.0);
        // 0.5 ln 1.5 + 0.5 ln 0.75
        let v = imbalance_kl::<f64>(&dist(&[4, 2, 2]), LogBase::Natural);
        assert!((v - 0.058891).abs() < 1e-6, "{v}");
        let v2 = imbalance_kl::<f64>(&dist(&[4, 2, 2]), LogBase::Base2);
        assert!((v2 - v / std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn abs_examples() {
        assert_eq!(imbalance_abs::<f64>(&dist(&[3, 3])), 0.0);
        let v = imbalance_abs::<f64>(&dist(&[4, 2, 2]));
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        let v10 = imbalance_abs::<f64>(&dist(&[40, 20, 20]));
        assert!((v10 - v).abs() < 1e-12);
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini::<f64>(&dist(&[5, 5, 5, 5])), 0.0);
        let v = gini::<f64>(&dist(&[2, 2, 4]));
        assert!((v - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(gini::<f64>(&dist(&[1, 3])), 0.25);
    }

    #[test]
    fn report_bundles_metrics() {
        let r = report::<f64>(&dist(&[2, 2, 4]), LogBase::Natural);
        assert_eq!(r.ratio, 2.0);
        assert!((r.kl - 0.058891).abs() < 1e-6);
        assert!((r.abs_dev - 0.33333).abs() < 1e-4);
        assert!((r.gini - 0.16667).abs() < 1e-4);
    }

    #[test]
    fn split_band_assignment() {
        // thresholds {20, 100}: 5 -> few, 50 -> medium, 500 -> many
        let d = ClassDistribution::new(vec![(0, 500), (1, 50), (2, 5), (3, 20), (4, 100)]).unwrap();
        let split = split_by_thresholds(&d, &[20, 100]).unwrap();
        assert_eq!(split.subsets[0].class_ids, vec![2, 3]); // boundary 20 is few
        assert_eq!(split.subsets[1].class_ids, vec![1, 4]); // boundary 100 is medium
        assert_eq!(split.subsets[2].class_ids, vec![0]);
        assert_eq!(split.subset_of(3), Some(0));
        assert_eq!(split.locate(4), Some((1, 1)));
    }

    #[test]
    fn split_no_thresholds_is_single_subset() {
        let d = dist(&[5, 10, 20]);
        let split = split_by_thresholds(&d, &[]).unwrap();
        assert_eq!(split.num_subsets(), 1);
        assert_eq!(split.subsets[0].class_ids, vec![0, 1, 2]);
    }

    #[test]
    fn split_empty_band_is_error() {
        let d = dist(&[500, 400]);
        match split_by_thresholds(&d, &[20, 100]) {
            Err(Error::EmptyBand(msg)) => assert!(msg.contains("20"), "{msg}"),
            other => panic!("expected empty band error, got {other:?}"),
        }
    }

    #[test]
    fn avg_shot_is_subset_mean() {
        let d = dist(&[10, 30, 200]);
        let split = split_by_thresholds(&d, &[100]).unwrap();
        assert_eq!(split.subsets[0].avg_shot, 20.0);
        assert_eq!(split.subsets[1].avg_shot, 200.0);
        assert_eq!(split.min_avg_shot(), 20.0);
    }

    #[test]
    fn comparison_rows() {
        let d = dist(&[100, 100, 1]);
        let split = split_by_thresholds(&d, &[10]).unwrap();
        let rows = longtailness_comparison::<f64>(&d, &split, LogBase::Natural).unwrap();
        assert_eq!(rows.len(), 3);
        // single-class subset is uniform
        assert_eq!(rows[1].report.ratio, 1.0);
        assert_eq!(rows[1].report.gini, 0.0);
        // two equal-count classes likewise
        assert_eq!(rows[2].report.kl, 0.0);
    }

    proptest! {
        #[test]
        fn scale_invariance(counts in proptest::collection::vec(1u64..200, 1..30), k in 1u64..20) {
            let a = report::<f64>(&dist(&counts), LogBase::Natural);
            let scaled: Vec<u64> = counts.iter().map(|&n| n * k).collect();
            let b = report::<f64>(&dist(&scaled), LogBase::Natural);
            prop_assert!((a.ratio - b.ratio).abs() < 1e-9);
            prop_assert!((a.kl - b.kl).abs() < 1e-9);
            prop_assert!((a.abs_dev - b.abs_dev).abs() < 1e-9);
            prop_assert!((a.gini - b.gini).abs() < 1e-9);
        }

        #[test]
        fn permutation_invariance(counts in proptest::collection::vec(1u64..200, 2..30)) {
            let a = report::<f64>(&dist(&counts), LogBase::Natural);
            let mut rev = counts.clone();
            rev.reverse();
            let b = report::<f64>(&dist(&rev), LogBase::Natural);
            prop_assert!((a.ratio - b.ratio).abs() < 1e-12);
            prop_assert!((a.kl - b.kl).abs() < 1e-12);
            prop_assert!((a.abs_dev - b.abs_dev).abs() < 1e-12);
            prop_assert!((a.gini - b.gini).abs() < 1e-12);
        }

        #[test]
        fn metric_bounds(counts in proptest::collection::vec(1u64..500, 1..40)) {
            let r = report::<f64>(&dist(&counts), LogBase::Natural);
            prop_assert!(r.ratio >= 1.0);
            prop_assert!(r.kl >= -1e-12);
            prop_assert!((0.0..2.0).contains(&r.abs_dev));
            prop_assert!((-1e-12..1.0).contains(&r.gini));
        }

        #[test]
        fn gini_matches_mean_absolute_difference(counts in proptest::collection::vec(1u64..300, 1..50)) {
            // brute-force double loop: sum |N_i - N_j| / (2 C sum N)
            let c = counts.len() as f64;
            let total: u64 = counts.iter().sum();
            let mut mad = 0.0;
            for &a in &counts {
                for &b in &counts {
                    mad += (a as f64 - b as f64).abs();
                }
            }
            let expected = mad / (2.0 * c * total as f64);
            let got = gini::<f64>(&dist(&counts));
            prop_assert!((got - expected).abs() < 1e-10, "{} vs {}", got, expected);
        }

        #[test]
        fn split_partitions_exactly_once(counts in proptest::collection::vec(1u64..300, 2..30)) {
            let d = dist(&counts);
            let thresholds = quantile_thresholds(&d, &[0.33, 0.66]).unwrap_or_default();
            if let Ok(split) = split_by_thresholds(&d, &thresholds) {
                let mut seen: Vec<u32> = split.subsets.iter().flat_map(|s| s.class_ids.clone()).collect();
                seen.sort_unstable();
                let mut all: Vec<u32> = d.counts().iter().map(|&(id, _)| id).collect();
                all.sort_unstable();
                prop_assert_eq!(seen, all);
            }
        }
    }
}
