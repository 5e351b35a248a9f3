//! Classification and multiset metrics.

use std::collections::BTreeMap;

use crate::downstream::EventMultiset;
use crate::error::{data_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores<T> {
    pub class: T,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of true instances.
    pub support: usize,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Precision, recall and F1 of every class seen in either sequence, in class
/// order. A class never predicted has precision 0.
pub fn per_class_scores<T: Ord + Clone>(predictions: &[T], labels: &[T]) -> Result<Vec<ClassScores<T>>> {
    if predictions.len() != labels.len() {
        return Err(data_err(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(data_err("no predictions to score"));
    }
    // (true positives, predicted, actual)
    let mut counts: BTreeMap<&T, (usize, usize, usize)> = BTreeMap::new();
    for (p, l) in predictions.iter().zip(labels) {
        counts.entry(p).or_default().1 += 1;
        let c = counts.entry(l).or_default();
        c.2 += 1;
        if p == l {
            c.0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(class, (tp, predicted, actual))| {
            let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
            ClassScores { class: class.clone(), precision, recall, f1: f1(precision, recall), support: actual }
        })
        .collect())
}

/// Support-weighted mean of per-class F1; classes without true instances
/// carry no weight.
pub fn weighted_f1<T: Ord + Clone>(predictions: &[T], labels: &[T]) -> Result<f64> {
    let scores = per_class_scores(predictions, labels)?;
    let n = labels.len() as f64;
    Ok(scores.iter().map(|s| s.f1 * s.support as f64 / n).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Multiset precision and recall with intersection `Σ min(gt, pred)`.
pub fn multiset_prf(gt: &EventMultiset, pred: &EventMultiset) -> Result<Prf> {
    let (g, p) = (gt.total(), pred.total());
    if g == 0 || p == 0 {
        return Err(data_err("multiset metrics need nonempty multisets"));
    }
    let inter: u32 = gt.counts.iter().map(|(t, &n)| n.min(pred.get(t))).sum();
    let precision = f64::from(inter) / f64::from(p);
    let recall = f64::from(inter) / f64::from(g);
    Ok(Prf { precision, recall, f1: f1(precision, recall) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Status;

    #[test]
    fn weighted_f1_examples() {
        assert_eq!(weighted_f1(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        let w = weighted_f1(&["a", "b", "b"], &["a", "a", "b"]).unwrap();
        assert!((w - 2.0 / 3.0).abs() < 1e-12);
        let w = weighted_f1(&["a", "a", "a", "a"], &["a", "a", "b", "b"]).unwrap();
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
        assert!(weighted_f1::<&str>(&[], &[]).is_err());
        assert!(weighted_f1(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn per_class_handles_unseen_predictions() {
        let s = per_class_scores(&["c", "a"], &["a", "a"]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].precision, s[0].recall, s[0].support), (1.0, 0.5, 2));
        assert_eq!((s[1].f1, s[1].support), (0.0, 0));
    }

    fn ms(items: &[(&str, Status, u32)]) -> EventMultiset {
        let mut m = EventMultiset::default();
        for (s, st, n) in items {
            m.insert((s.to_string(), *st), *n);
        }
        m
    }

    #[test]
    fn multiset_examples() {
        let gt = ms(&[("s1", Status::On, 2), ("s2", Status::Off, 1)]);
        let pred = ms(&[("s1", Status::On, 1), ("s3", Status::On, 2)]);
        let r = multiset_prf(&gt, &pred).unwrap();
        for v in [r.precision, r.recall, r.f1] {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let same = multiset_prf(&gt, &gt).unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let disjoint = multiset_prf(&gt, &ms(&[("s9", Status::On, 3)])).unwrap();
        assert_eq!((disjoint.precision, disjoint.recall, disjoint.f1), (0.0, 0.0, 0.0));
        assert!(multiset_prf(&gt, &EventMultiset::default()).is_err());
    }
}
