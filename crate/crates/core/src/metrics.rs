//! Average precision, precision-recall curves and the corrupted-instance
//! identification rate.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// 1-based position in the ranking.
    pub rank: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Indices sorted by descending score; equal scores keep input order.
fn ranking(scores: &[(f64, bool)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].0.total_cmp(&scores[a].0));
    order
}

/// One precision/recall point per rank of the descending-score ranking.
pub fn pr_curve(scores: &[(f64, bool)]) -> Result<Vec<PrPoint>> {
    let positives = scores.iter().filter(|(_, y)| *y).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "precision-recall needs at least one positive".into(),
        ));
    }
    let mut hits = 0usize;
    Ok(ranking(scores)
        .into_iter()
        .enumerate()
        .map(|(n, i)| {
            if scores[i].1 {
                hits += 1;
            }
            PrPoint {
                rank: n + 1,
                precision: hits as f64 / (n + 1) as f64,
                recall: hits as f64 / positives as f64,
            }
        })
        .collect())
}

/// Step-wise area under a PR curve: `sum (R_n - R_{n-1}) * P_n`.
pub fn area_under(curve: &[PrPoint]) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for p in curve {
        area += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    area
}

/// Average precision over `(score, is_positive)` pairs, no interpolation.
pub fn average_precision(scores: &[(f64, bool)]) -> Result<f64> {
    let positives = scores.iter().filter(|(_, y)| *y).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (n, i) in ranking(scores).into_iter().enumerate() {
        if scores[i].1 {
            hits += 1;
            sum += hits as f64 / (n + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Fraction of `selected` that is in `corrupted`; 0 for an empty selection.
pub fn hit_fraction<S: AsRef<str>>(selected: &[S], corrupted: &BTreeSet<String>) -> f64 {
    if selected.is_empty() {
        return 0.0;
    }
    let hits = selected.iter().filter(|id| corrupted.contains(id.as_ref())).count();
    hits as f64 / selected.len() as f64
}

/// Mean per-iteration hit fraction. Empty iterations count as 0.
pub fn ci2r<S: AsRef<str>>(selected_per_iteration: &[Vec<S>], corrupted: &BTreeSet<String>) -> Result<f64> {
    if selected_per_iteration.is_empty() {
        return Err(Error::UndefinedMetric("CI2R needs at least one iteration".into()));
    }
    let total: f64 = selected_per_iteration.iter().map(|s| hit_fraction(s, corrupted)).sum();
    Ok(total / selected_per_iteration.len() as f64)
}

pub fn write_pr_csv(path: &Path, curve: &[PrPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank", "precision", "recall"])?;
    for p in curve {
        w.write_record([p.rank.to_string(), p.precision.to_string(), p.recall.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perfect_ranking() {
        let s = [(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
        assert_eq!(average_precision(&s).unwrap(), 1.0);
    }

    #[test]
    fn hand_case() {
        let s = [(3.0, true), (2.0, false), (1.0, true)];
        assert!((average_precision(&s).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!((area_under(&pr_curve(&s).unwrap()) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn all_positive() {
        let s = [(0.1, true), (0.7, true), (0.3, true)];
        assert_eq!(average_precision(&s).unwrap(), 1.0);
    }

    #[test]
    fn no_positives() {
        assert!(matches!(
            average_precision(&[(0.2, false)]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(pr_curve(&[]).is_err());
    }

    #[test]
    fn ties_keep_input_order() {
        assert_eq!(average_precision(&[(0.5, true), (0.5, false)]).unwrap(), 1.0);
        assert_eq!(average_precision(&[(0.5, false), (0.5, true)]).unwrap(), 0.5);
    }

    #[test]
    fn two_item_curve() {
        let c = pr_curve(&[(0.2, false), (0.9, true)]).unwrap();
        assert_eq!(
            c,
            vec![
                PrPoint {
                    rank: 1,
                    precision: 1.0,
                    recall: 1.0
                },
                PrPoint {
                    rank: 2,
                    precision: 0.5,
                    recall: 1.0
                },
            ]
        );
    }

    #[test]
    fn ci2r_examples() {
        let c = set(&["a", "b", "c"]);
        assert_eq!(ci2r(&[vec!["a", "b"]], &c).unwrap(), 1.0);
        assert_eq!(ci2r(&[vec!["x", "y"]], &c).unwrap(), 0.0);
        assert_eq!(ci2r(&[vec!["a", "b"], vec!["c", "z"]], &c).unwrap(), 0.75);
        assert_eq!(ci2r(&[vec!["a"], Vec::<&str>::new()], &c).unwrap(), 0.5);
        assert!(ci2r::<&str>(&[], &c).is_err());
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 1..40)) {
            prop_assume!(data.iter().any(|(_, y)| *y));
            let ap = average_precision(&data).unwrap();
            let t: Vec<(f64, bool)> = data.iter().map(|&(s, y)| (s.exp() * 3.0 + 1.0, y)).collect();
            prop_assert_eq!(ap, average_precision(&t).unwrap());
        }

        #[test]
        fn curve_integrates_to_ap(data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..40)) {
            prop_assume!(data.iter().any(|(_, y)| *y));
            let curve = pr_curve(&data).unwrap();
            prop_assert!(curve.windows(2).all(|w| w[0].recall <= w[1].recall));
            prop_assert!((area_under(&curve) - average_precision(&data).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn ci2r_order_invariant(mut sel in prop::collection::vec(prop::collection::vec(0u8..20, 1..6), 1..6)) {
            let c: BTreeSet<String> = (0..20).filter(|i| i % 3 == 0).map(|i| i.to_string()).collect();
            let as_str = |s: &Vec<Vec<u8>>| s.iter().map(|l| l.iter().map(|i| i.to_string()).collect::<Vec<_>>()).collect::<Vec<_>>();
            let a = ci2r(&as_str(&sel), &c).unwrap();
            sel.reverse();
            for l in &mut sel { l.reverse(); }
            let b = ci2r(&as_str(&sel), &c).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
