//! Confusion matrix, balanced accuracy, weighted F1 and macro one-vs-rest
//! AUROC / average precision.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `C x C` counts; rows are ground truth, columns predictions.
pub type Confusion = Vec<Vec<usize>>;

pub fn confusion_matrix(truth: &[usize], pred: &[usize], c: usize) -> Result<Confusion> {
    if truth.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "{} truth labels vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut m = vec![vec![0; c]; c];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= c || p >= c {
            return Err(Error::Invalid(format!("label {} >= class count {c}", t.max(p))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Mean per-class recall.
pub fn balanced_accuracy(conf: &Confusion) -> Result<f64> {
    let mut total = 0.0;
    for (i, row) in conf.iter().enumerate() {
        let n: usize = row.iter().sum();
        if n == 0 {
            return Err(Error::Data(format!("class {i} has no ground-truth samples")));
        }
        total += row[i] as f64 / n as f64;
    }
    Ok(total / conf.len() as f64)
}

/// Per-class F1 averaged with weights proportional to class support.
pub fn weighted_f1(conf: &Confusion) -> Result<f64> {
    let c = conf.len();
    let n: usize = conf.iter().flatten().sum();
    if n == 0 {
        return Err(Error::Data("weighted F1 of an empty confusion matrix".into()));
    }
    let mut out = 0.0;
    for i in 0..c {
        let tp = conf[i][i] as f64;
        let support: usize = conf[i].iter().sum();
        let predicted: usize = conf.iter().map(|r| r[i]).sum();
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        out += f1 * support as f64 / n as f64;
    }
    Ok(out)
}

/// Midranks (1-based) of `v`; tied values share their average rank.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outscores a random negative (ties
/// count one half). `None` when either group is empty.
pub fn auroc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &b)| b).map(|(r, _)| r).sum();
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Some(u / (p as f64 * n as f64))
}

/// Step-sum average precision: mean of precision@k over the positives in
/// descending-score order, ties broken by ascending index.
pub fn average_precision(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count();
    if p == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0;
    let mut total = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Some(total / p as f64)
}

fn macro_ovr(
    truth: &[usize],
    prob: &[Vec<f64>],
    c: usize,
    name: &str,
    f: fn(&[bool], &[f64]) -> Option<f64>,
) -> Result<f64> {
    if truth.len() != prob.len() {
        return Err(Error::Invalid(format!(
            "{} labels vs {} probability rows",
            truth.len(),
            prob.len()
        )));
    }
    if let Some(r) = prob.iter().find(|r| r.len() != c) {
        return Err(Error::Invalid(format!("probability row of width {} for {c} classes", r.len())));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= c) {
        return Err(Error::Invalid(format!("label {t} >= class count {c}")));
    }
    let mut present = vec![false; c];
    truth.iter().for_each(|&t| present[t] = true);
    if present.iter().filter(|&&b| b).count() < 2 {
        return Err(Error::Data(format!("{name} needs at least two classes in the ground truth")));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for k in 0..c {
        if !present[k] {
            warn!("{name}: class {k} absent from ground truth; excluded from the macro average");
            continue;
        }
        let pos: Vec<bool> = truth.iter().map(|&t| t == k).collect();
        let scores: Vec<f64> = prob.iter().map(|r| r[k]).collect();
        sum += f(&pos, &scores).expect("class present with negatives");
        used += 1;
    }
    Ok(sum / used as f64)
}

/// Macro one-vs-rest AUROC over the classes present in `truth`.
pub fn auroc_macro(truth: &[usize], prob: &[Vec<f64>], c: usize) -> Result<f64> {
    macro_ovr(truth, prob, c, "auroc", auroc)
}

/// Macro one-vs-rest average precision over the classes present in `truth`.
pub fn auprc_macro(truth: &[usize], prob: &[Vec<f64>], c: usize) -> Result<f64> {
    macro_ovr(truth, prob, c, "auprc", average_precision)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// The four headline metrics and their mean, in report key order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub bal_acc: f64,
    pub w_f1: f64,
    pub auprc: f64,
    pub auroc: f64,
    pub mean: f64,
}

impl MetricsReport {
    pub fn new(bal_acc: f64, w_f1: f64, auprc: f64, auroc: f64) -> Self {
        Self {
            bal_acc,
            w_f1,
            auprc,
            auroc,
            mean: (bal_acc + w_f1 + auprc + auroc) / 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsBundle {
    pub confusion: Confusion,
    pub report: MetricsReport,
}

/// All metrics from ground truth and per-class probabilities; predictions
/// are the per-row argmax.
pub fn compute_metrics(truth: &[usize], prob: &[Vec<f64>], c: usize) -> Result<MetricsBundle> {
    let pred: Vec<usize> = prob.iter().map(|r| argmax(r)).collect();
    let confusion = confusion_matrix(truth, &pred, c)?;
    let report = MetricsReport::new(
        balanced_accuracy(&confusion)?,
        weighted_f1(&confusion)?,
        auprc_macro(truth, prob, c)?,
        auroc_macro(truth, prob, c)?,
    );
    Ok(MetricsBundle { confusion, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_hand_count() {
        assert_eq!(confusion_matrix(&[0, 0, 1], &[0, 1, 1], 2).unwrap(), [[1, 1], [0, 1]]);
        assert_eq!(confusion_matrix(&[], &[], 2).unwrap(), [[0, 0], [0, 0]]);
        assert!(confusion_matrix(&[2], &[0], 2).is_err());
    }

    #[test]
    fn balanced_accuracy_cases() {
        assert_eq!(balanced_accuracy(&vec![vec![3, 0], vec![0, 2]]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&vec![vec![2, 0], vec![1, 1]]).unwrap(), 0.75);
        assert_eq!(balanced_accuracy(&vec![vec![4, 0], vec![3, 0]]).unwrap(), 0.5);
        assert!(balanced_accuracy(&vec![vec![1, 0], vec![0, 0]]).is_err());
    }

    #[test]
    fn weighted_f1_cases() {
        let m = confusion_matrix(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert!((weighted_f1(&m).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(weighted_f1(&vec![vec![2, 0], vec![0, 2]]).unwrap(), 1.0);
        // class 1 never predicted, never recalled
        assert!((weighted_f1(&vec![vec![2, 0], vec![2, 0]]).unwrap() - 0.5 * (2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn auroc_cases() {
        let pos = [true, true, false, false];
        assert_eq!(auroc(&pos, &[0.9, 0.4, 0.5, 0.1]), Some(0.75));
        assert_eq!(auroc(&pos, &[0.9, 0.8, 0.2, 0.1]), Some(1.0));
        assert_eq!(auroc(&pos, &[0.3; 4]), Some(0.5));
        assert_eq!(auroc(&[true, true], &[0.1, 0.2]), None);
    }

    #[test]
    fn average_precision_cases() {
        assert_eq!(average_precision(&[true, false, false], &[0.9, 0.8, 0.1]), Some(1.0));
        assert_eq!(average_precision(&[true, false], &[0.4, 0.9]), Some(0.5));
        assert_eq!(average_precision(&[true, true, false], &[0.9, 0.8, 0.1]), Some(1.0));
    }

    #[test]
    fn macro_excludes_absent_and_rejects_single_class() {
        let prob = vec![vec![0.8, 0.1, 0.1], vec![0.2, 0.7, 0.1], vec![0.6, 0.3, 0.1]];
        assert!(auroc_macro(&[0, 1, 0], &prob, 3).is_ok());
        assert!(auroc_macro(&[0, 0, 0], &prob, 3).is_err());
        assert!(auprc_macro(&[1, 1, 1], &prob, 3).is_err());
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let truth = [0, 1, 2, 1];
        let prob: Vec<Vec<f64>> = truth
            .iter()
            .map(|&t| (0..3).map(|k| if k == t { 0.9 } else { 0.05 }).collect())
            .collect();
        let b = compute_metrics(&truth, &prob, 3).unwrap();
        assert_eq!(b.report, MetricsReport::new(1.0, 1.0, 1.0, 1.0));
        assert_eq!(b.report.mean, 1.0);
    }

    #[test]
    fn report_json_keys() {
        let v = serde_json::to_value(MetricsReport::new(0.801, 0.829, 0.931, 0.970)).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        let mut expect = vec!["bal_acc", "w_f1", "auprc", "auroc", "mean"];
        expect.sort();
        assert_eq!(keys, expect);
    }
}
