use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification quality of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub balanced_accuracy: f64,
    pub cohen_kappa: f64,
    pub weighted_f1: f64,
    pub auroc: f64,
    pub auc_pr: f64,
}

impl MetricBundle {
    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.balanced_accuracy)
            && unit(self.weighted_f1)
            && unit(self.auroc)
            && unit(self.auc_pr)
            && (-1.0..=1.0).contains(&self.cohen_kappa)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `counts[true][pred]` over `k` classes.
pub fn confusion_matrix(labels: &[usize], preds: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k]; k];
    for (&t, &p) in labels.iter().zip(preds) {
        m[t][p] += 1;
    }
    m
}

/// Mean recall over the classes that occur in the labels.
pub fn balanced_accuracy(cm: &[Vec<u64>]) -> f64 {
    let recalls: Vec<f64> = cm
        .iter()
        .enumerate()
        .filter(|(_, row)| row.iter().sum::<u64>() > 0)
        .map(|(i, row)| row[i] as f64 / row.iter().sum::<u64>() as f64)
        .collect();
    recalls.iter().sum::<f64>() / recalls.len().max(1) as f64
}

/// `(pₒ − pₑ) / (1 − pₑ)`.
pub fn cohen_kappa(cm: &[Vec<u64>]) -> Result<f64> {
    let k = cm.len();
    let n: u64 = cm.iter().flatten().sum();
    let present = cm.iter().filter(|r| r.iter().sum::<u64>() > 0).count();
    if n == 0 || present < 2 {
        return Err(Error::UndefinedMetric("kappa needs at least two label classes".into()));
    }
    let n = n as f64;
    let po = (0..k).map(|i| cm[i][i] as f64).sum::<f64>() / n;
    let pe = (0..k)
        .map(|i| {
            let row = cm[i].iter().sum::<u64>() as f64;
            let col = cm.iter().map(|r| r[i]).sum::<u64>() as f64;
            row * col
        })
        .sum::<f64>()
        / (n * n);
    if pe >= 1.0 {
        return Err(Error::UndefinedMetric("kappa undefined when chance agreement is 1".into()));
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(cm: &[Vec<u64>]) -> f64 {
    let k = cm.len();
    let n: u64 = cm.iter().flatten().sum();
    let mut total = 0.0;
    for i in 0..k {
        let support = cm[i].iter().sum::<u64>();
        if support == 0 {
            continue;
        }
        let tp = cm[i][i] as f64;
        let fp = cm.iter().map(|r| r[i]).sum::<u64>() as f64 - tp;
        let fnn = support as f64 - tp;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fnn) };
        total += support as f64 * f1;
    }
    total / n.max(1) as f64
}

/// Area under the ROC curve via the Mann–Whitney rank statistic (ties get average ranks).
pub fn auroc_binary(positive: &[bool], scores: &[f64]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both positive and negative samples".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            if positive[t] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Average precision: `Σ (Rₙ − Rₙ₋₁)·Pₙ` over descending score thresholds.
pub fn average_precision(positive: &[bool], scores: &[f64]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUC-PR needs a positive sample".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &t in &idx[i..=j] {
            if positive[t] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Metrics for single-label classification from per-class scores.
///
/// Two-column scores are treated as binary (class 1 positive); wider scores use
/// macro one-vs-rest AUROC and AUC-PR over the classes present in the labels.
pub fn compute_metrics(labels: &[usize], scores: &[Vec<f64>]) -> Result<MetricBundle> {
    if labels.is_empty() || labels.len() != scores.len() {
        return Err(Error::UndefinedMetric(format!("{} labels for {} score rows", labels.len(), scores.len())));
    }
    let k = scores[0].len();
    if scores.iter().any(|r| r.len() != k) || labels.iter().any(|&l| l >= k) {
        return Err(Error::Dimension(format!("labels must index {k} score columns")));
    }
    let preds: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    let cm = confusion_matrix(labels, &preds, k);
    let kappa = cohen_kappa(&cm)?;
    let (auroc, auc_pr) = if k == 2 {
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        (auroc_binary(&pos, &s)?, average_precision(&pos, &s)?)
    } else {
        let mut roc = Vec::new();
        let mut pr = Vec::new();
        for c in 0..k {
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            if !pos.contains(&true) || !pos.contains(&false) {
                continue;
            }
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            roc.push(auroc_binary(&pos, &s)?);
            pr.push(average_precision(&pos, &s)?);
        }
        (roc.iter().sum::<f64>() / roc.len() as f64, pr.iter().sum::<f64>() / pr.len() as f64)
    };
    Ok(MetricBundle {
        balanced_accuracy: balanced_accuracy(&cm),
        cohen_kappa: kappa,
        weighted_f1: weighted_f1(&cm),
        auroc,
        auc_pr,
    })
}

/// Metrics for independent binary labels from per-class probabilities.
///
/// AUROC and AUC-PR are macro averages over classes with both outcomes present.
/// Balanced accuracy and kappa average the per-class binary values at a 0.5
/// threshold; weighted F1 weights per-class F1 by positive support.
pub fn compute_multilabel_metrics(labels: &[Vec<bool>], probs: &[Vec<f64>]) -> Result<MetricBundle> {
    if labels.is_empty() || labels.len() != probs.len() {
        return Err(Error::UndefinedMetric("label/score count mismatch".into()));
    }
    let k = labels[0].len();
    let (mut roc, mut pr, mut bal, mut kap) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut f1_sum, mut support_sum) = (0.0, 0.0);
    for c in 0..k {
        let pos: Vec<bool> = labels.iter().map(|l| l[c]).collect();
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let y: Vec<usize> = pos.iter().map(|&b| b as usize).collect();
        let yhat: Vec<usize> = s.iter().map(|&v| (v >= 0.5) as usize).collect();
        let cm = confusion_matrix(&y, &yhat, 2);
        let support = y.iter().sum::<usize>() as f64;
        if support > 0.0 {
            let tp = cm[1][1] as f64;
            let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + cm[0][1] as f64 + cm[1][0] as f64) };
            f1_sum += support * f1;
            support_sum += support;
        }
        if !pos.contains(&true) || !pos.contains(&false) {
            continue;
        }
        roc.push(auroc_binary(&pos, &s)?);
        pr.push(average_precision(&pos, &s)?);
        bal.push(balanced_accuracy(&cm));
        kap.push(cohen_kappa(&cm)?);
    }
    if roc.is_empty() {
        return Err(Error::UndefinedMetric("no label column has both outcomes".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricBundle {
        balanced_accuracy: mean(&bal),
        cohen_kappa: mean(&kap),
        weighted_f1: if support_sum > 0.0 { f1_sum / support_sum } else { 0.0 },
        auroc: mean(&roc),
        auc_pr: mean(&pr),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(preds: &[usize], k: usize) -> Vec<Vec<f64>> {
        preds.iter().map(|&p| (0..k).map(|c| if c == p { 0.9 } else { 0.1 / (k - 1) as f64 }).collect()).collect()
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1, 0];
        let m = compute_metrics(&y, &onehot(&y, 3)).unwrap();
        assert_eq!((m.balanced_accuracy, m.cohen_kappa, m.weighted_f1), (1.0, 1.0, 1.0));
        assert_eq!(m.auroc, 1.0);
    }

    #[test]
    fn binary_hand_case() {
        // confusion [[2,1],[1,2]]
        let y = [0, 0, 0, 1, 1, 1];
        let p = [0, 0, 1, 1, 1, 0];
        let m = compute_metrics(&y, &onehot(&p, 2)).unwrap();
        assert!((m.balanced_accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.cohen_kappa - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_predictor() {
        let y = [0, 1, 0, 1];
        let m = compute_metrics(&y, &onehot(&[0; 4], 2)).unwrap();
        assert_eq!(m.balanced_accuracy, 0.5);
        assert_eq!(m.cohen_kappa, 0.0);
        assert_eq!(m.auroc, 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(compute_metrics(&[1, 1], &onehot(&[1, 0], 2)), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auroc_rank_invariance() {
        let pos = [true, false, true, false, false, true];
        let s = [0.3, 0.1, 0.3, 0.35, -2.0, 0.9];
        let a = auroc_binary(&pos, &s).unwrap();
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 1.0).collect();
        assert_eq!(a, auroc_binary(&pos, &t).unwrap());
    }

    #[test]
    fn balanced_accuracy_ignores_duplication_of_a_class() {
        let y = [0, 0, 1, 1, 2];
        let p = [0, 1, 1, 1, 0];
        let b = compute_metrics(&y, &onehot(&p, 3)).unwrap().balanced_accuracy;
        let y2 = [0, 0, 1, 1, 2, 1, 1];
        let p2 = [0, 1, 1, 1, 0, 1, 1];
        assert_eq!(b, compute_metrics(&y2, &onehot(&p2, 3)).unwrap().balanced_accuracy);
    }

    #[test]
    fn average_precision_hand_case() {
        // descending: P(1) N P N → AP = 0.5·1 + 0.5·(2/3)
        let ap = average_precision(&[true, false, true, false], &[0.9, 0.8, 0.7, 0.1]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn multilabel_metrics() {
        let y = vec![vec![true, false], vec![false, true], vec![true, true], vec![false, false]];
        let p = vec![vec![0.9, 0.2], vec![0.1, 0.7], vec![0.8, 0.6], vec![0.3, 0.4]];
        let m = compute_multilabel_metrics(&y, &p).unwrap();
        assert_eq!(m.auroc, 1.0);
        assert_eq!(m.balanced_accuracy, 1.0);
        assert!(m.is_valid());
    }
}
