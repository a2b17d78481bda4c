//! Multi-class evaluation: confusion matrix, Micro/Macro-F1, one-vs-rest
//! macro AUC and cross-client macro averaging.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result};
use crate::model::{argmax_rows, forward_probs, ModelParams};

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<usize>,
}

pub fn confusion_matrix(
    y_true: &[usize],
    y_pred: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(domain_err(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = Array2::zeros((num_classes, num_classes));
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= num_classes || p >= num_classes {
            return Err(domain_err(format!(
                "label pair ({t}, {p}) out of range for {num_classes} classes"
            )));
        }
        counts[[t, p]] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn get(&self, truth: usize, pred: usize) -> usize {
        self.counts[[truth, pred]]
    }

    pub fn total(&self) -> usize {
        self.counts.sum()
    }

    fn trace(&self) -> usize {
        self.counts.diag().sum()
    }

    pub fn accuracy(&self) -> Result<f64> {
        self.non_empty()?;
        Ok(self.trace() as f64 / self.total() as f64)
    }

    fn non_empty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(domain_err("empty confusion matrix"));
        }
        Ok(())
    }

    /// `(tp, fp, fn)` for class `c`.
    fn class_counts(&self, c: usize) -> (usize, usize, usize) {
        let tp = self.counts[[c, c]];
        let predicted = self.counts.column(c).sum();
        let actual = self.counts.row(c).sum();
        (tp, predicted - tp, actual - tp)
    }

    /// F1 per class; a class with no TP, FP or FN scores 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.num_classes())
            .map(|c| {
                let (tp, fp, fn_) = self.class_counts(c);
                let denom = 2 * tp + fp + fn_;
                if denom == 0 {
                    0.0
                } else {
                    (2 * tp) as f64 / denom as f64
                }
            })
            .collect()
    }

    pub fn micro_f1(&self) -> Result<f64> {
        self.non_empty()?;
        let (tp, fp, fn_) = (0..self.num_classes())
            .map(|c| self.class_counts(c))
            .fold((0, 0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
        Ok((2 * tp) as f64 / (2 * tp + fp + fn_) as f64)
    }

    pub fn macro_f1(&self) -> Result<f64> {
        self.non_empty()?;
        let f1 = self.per_class_f1();
        Ok(f1.iter().sum::<f64>() / f1.len() as f64)
    }
}

pub fn micro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.micro_f1()
}

pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.macro_f1()
}

/// Mann-Whitney AUC of `scores` for `positive[i] == true` vs the rest;
/// tied pairs count one half. `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // average 1-based ranks over runs of equal scores
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC averaged uniformly over the classes present in `y_true`.
pub fn auc_ovr_macro(y_true: &[usize], probs: ArrayView2<'_, f64>) -> Result<f64> {
    if y_true.len() != probs.nrows() {
        return Err(domain_err(format!(
            "{} labels vs {} probability rows",
            y_true.len(),
            probs.nrows()
        )));
    }
    let c = probs.ncols();
    for row in probs.rows() {
        let s: f64 = row.sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(domain_err("probability rows must be distributions"));
        }
    }
    if let Some(&bad) = y_true.iter().find(|&&y| y >= c) {
        return Err(domain_err(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut present = vec![false; c];
    for &y in y_true {
        present[y] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(domain_err("AUC needs at least two classes in y_true"));
    }
    let mut total = 0.0;
    let mut used = 0;
    for class in (0..c).filter(|&k| present[k]) {
        let scores: Vec<f64> = probs.column(class).to_vec();
        let positive: Vec<bool> = y_true.iter().map(|&y| y == class).collect();
        if let Some(a) = binary_auc(&scores, &positive) {
            total += a;
            used += 1;
        }
    }
    Ok(total / used as f64)
}

/// Metrics of one model on one client split (or their cross-client mean
/// when `client` is `None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub client: Option<usize>,
    pub round: usize,
    pub sample_ratio: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// `None` when the split holds a single class.
    pub auc: Option<f64>,
    pub per_class_f1: Vec<f64>,
}

/// Evaluate `params` on one labeled split.
pub fn evaluate(
    params: &ModelParams,
    features: &Array2<f64>,
    labels: &[usize],
    client: Option<usize>,
    round: usize,
    sample_ratio: f64,
) -> Result<EvalRecord> {
    let probs = forward_probs(params, features.view())?;
    let preds = argmax_rows(&probs);
    let cm = confusion_matrix(labels, &preds, params.num_classes())?;
    let single_class = labels.iter().all(|&y| Some(&y) == labels.first());
    Ok(EvalRecord {
        client,
        round,
        sample_ratio,
        micro_f1: cm.micro_f1()?,
        macro_f1: cm.macro_f1()?,
        auc: if single_class {
            None
        } else {
            Some(auc_ovr_macro(labels, probs.view())?)
        },
        per_class_f1: cm.per_class_f1(),
    })
}

/// Unweighted mean of every metric across clients; AUC over the clients
/// where it is defined.
pub fn cross_client_macro(records: &[EvalRecord]) -> Result<EvalRecord> {
    let first = records
        .first()
        .ok_or_else(|| domain_err("cross-client average needs at least one record"))?;
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let mut per_class = vec![0.0; first.per_class_f1.len()];
    for r in records {
        for (acc, v) in per_class.iter_mut().zip(&r.per_class_f1) {
            *acc += v;
        }
    }
    per_class.iter_mut().for_each(|v| *v /= n);
    Ok(EvalRecord {
        client: None,
        round: first.round,
        sample_ratio: mean(&|r| r.sample_ratio),
        micro_f1: mean(&|r| r.micro_f1),
        macro_f1: mean(&|r| r.macro_f1),
        auc: {
            let defined: Vec<f64> = records.iter().filter_map(|r| r.auc).collect();
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
        },
        per_class_f1: per_class,
    })
}
