//! Evaluation metrics.

use crate::error::{Error, Result};

/// `counts[true][pred]` over `num_classes` classes.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != pred.len() {
        return Err(Error::Data(format!("{} labels for {} predictions", truth.len(), pred.len())));
    }
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Data(format!("class index out of range: {t}, {p}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 of the pooled true/false positive counts. For single-label
/// predictions this equals accuracy.
pub fn micro_f1(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<f64> {
    let m = confusion_matrix(truth, pred, num_classes)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for c in 0..num_classes {
        tp += m[c][c];
        fp += (0..num_classes).filter(|&r| r != c).map(|r| m[r][c]).sum::<u64>();
        fn_ += (0..num_classes).filter(|&p| p != c).map(|p| m[c][p]).sum::<u64>();
    }
    Ok(f1(tp, fp, fn_))
}

/// Unweighted mean of per-class F1. Classes absent from both truth and
/// prediction score 0.
pub fn macro_f1(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<f64> {
    let m = confusion_matrix(truth, pred, num_classes)?;
    let total: f64 = (0..num_classes)
        .map(|c| {
            let tp = m[c][c];
            let fp = (0..num_classes).filter(|&r| r != c).map(|r| m[r][c]).sum::<u64>();
            let fn_ = (0..num_classes).filter(|&p| p != c).map(|p| m[c][p]).sum::<u64>();
            f1(tp, fp, fn_)
        })
        .sum();
    Ok(total / num_classes as f64)
}

pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Data(format!("rmse over {} targets and {} predictions", truth.len(), pred.len())));
    }
    let mse = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum::<f64>() / truth.len() as f64;
    Ok(mse.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_f1(truth: &[usize], pred: &[usize], k: usize) -> (f64, f64) {
        let mut per_class = Vec::new();
        let (mut tp_all, mut fp_all, mut fn_all) = (0.0, 0.0, 0.0);
        for c in 0..k {
            let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
            let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
            let fn_ = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            per_class.push(if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 });
            tp_all += tp;
            fp_all += fp;
            fn_all += fn_;
        }
        let p = tp_all / (tp_all + fp_all);
        let r = tp_all / (tp_all + fn_all);
        let micro = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (micro, per_class.iter().sum::<f64>() / k as f64)
    }

    #[test]
    fn fixture_values() {
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [0, 1, 1, 1, 2, 0];
        assert!((micro_f1(&truth, &pred, 3).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        // per-class F1: 0.5, 0.8, 2/3
        let expected = (0.5 + 0.8 + 2.0 / 3.0) / 3.0;
        assert!((macro_f1(&truth, &pred, 3).unwrap() - expected).abs() < 1e-15);
        assert_eq!(accuracy(&truth, &pred), 4.0 / 6.0);
        assert!(micro_f1(&truth, &pred, 2).is_err());
    }

    #[test]
    fn rmse_values() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let (micro, macro_) = brute_force_f1(&truth, &pred, 4);
            prop_assert!((micro_f1(&truth, &pred, 4).unwrap() - micro).abs() < 1e-12);
            prop_assert!((macro_f1(&truth, &pred, 4).unwrap() - macro_).abs() < 1e-12);
            prop_assert!((micro - accuracy(&truth, &pred)).abs() < 1e-12);
        }
    }
}
