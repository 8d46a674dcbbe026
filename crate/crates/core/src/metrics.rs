//! Multi-label evaluation: mean average precision plus per-class and
//! overall precision/recall/F1, each in an "all" flavor (predict when the
//! confidence exceeds 0.5, i.e. the logit exceeds 0) and a "top-3" flavor
//! (predict the three highest-scoring classes per sample).
//!
//! Classes with zero positives in the eval split are skipped in per-class
//! averages and in mAP. AP is the uninterpolated sum of P@k at positive
//! ranks divided by the number of positives, ranking by descending score
//! with ties broken by ascending sample index.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::Serialize;

/// Scores (logits) and binary labels for an eval split, both `[N×C]`.
#[derive(Debug, Clone)]
pub struct EvalBatch {
    scores: Tensor,
    labels: Tensor,
}

impl EvalBatch {
    pub fn new(scores: Tensor, labels: Tensor) -> Result<Self> {
        if scores.shape() != labels.shape() || scores.rank() != 2 {
            return Err(Error::shape("eval_batch", scores.shape(), labels.shape()));
        }
        if !scores.is_finite() {
            return Err(Error::Contract("eval scores must be finite".into()));
        }
        if labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("eval labels must be exactly 0 or 1".into()));
        }
        Ok(EvalBatch { scores, labels })
    }

    pub fn num_samples(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn score(&self, sample: usize, class: usize) -> f32 {
        self.scores.data()[sample * self.num_classes() + class]
    }

    pub fn label(&self, sample: usize, class: usize) -> bool {
        self.labels.data()[sample * self.num_classes() + class] == 1.0
    }
}

/// The six precision/recall/F1 aggregates of one flavor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrfAggregate {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    #[serde(rename = "or")]
    pub or_: f64,
    pub of1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub map: f64,
    pub all: PrfAggregate,
    pub top3: PrfAggregate,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "mAP,CP,CR,CF1,OP,OR,OF1,top3_CP,top3_CR,top3_CF1,top3_OP,top3_OR,top3_OF1";

    pub fn to_csv_row(&self) -> String {
        let a = &self.all;
        let t = &self.top3;
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.map, a.cp, a.cr, a.cf1, a.op, a.or_, a.of1, t.cp, t.cr, t.cf1, t.op, t.or_, t.of1
        )
    }

    /// Flat JSON object with one key per metric.
    pub fn to_flat_json(&self) -> serde_json::Value {
        let a = &self.all;
        let t = &self.top3;
        serde_json::json!({
            "mAP": self.map,
            "CP": a.cp, "CR": a.cr, "CF1": a.cf1,
            "OP": a.op, "OR": a.or_, "OF1": a.of1,
            "top3_CP": t.cp, "top3_CR": t.cr, "top3_CF1": t.cf1,
            "top3_OP": t.op, "top3_OR": t.or_, "top3_OF1": t.of1,
        })
    }
}

/// AP of one class. `None` when the class has no positive labels and must
/// be excluded from mAP averaging.
pub fn average_precision(scores: &[f32], labels: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), labels.len());
    let npos = labels.iter().filter(|&&l| l).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort: equal scores keep ascending sample index
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (k, &idx) in order.iter().enumerate() {
        if labels[idx] {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / npos as f64)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Predicted class set of one sample.
fn predictions(batch: &EvalBatch, sample: usize, top3: bool, threshold_in_top3: bool) -> Vec<bool> {
    let c = batch.num_classes();
    if !top3 {
        return (0..c).map(|k| batch.score(sample, k) > 0.0).collect();
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        batch
            .score(sample, b)
            .partial_cmp(&batch.score(sample, a))
            .unwrap()
    });
    let mut pred = vec![false; c];
    for &k in order.iter().take(3.min(c)) {
        pred[k] = !threshold_in_top3 || batch.score(sample, k) > 0.0;
    }
    pred
}

/// The six P/R/F1 aggregates for one flavor, with the default rank-only
/// top-3 convention.
pub fn prf_suite(batch: &EvalBatch, top3: bool) -> PrfAggregate {
    prf_suite_with(batch, top3, false)
}

/// Same, optionally also requiring the 0.5 confidence rule inside the
/// top-3 set.
pub fn prf_suite_with(batch: &EvalBatch, top3: bool, threshold_in_top3: bool) -> PrfAggregate {
    let (n, c) = (batch.num_samples(), batch.num_classes());
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fng = vec![0usize; c];
    let mut positives = vec![0usize; c];
    for i in 0..n {
        let pred = predictions(batch, i, top3, threshold_in_top3);
        for k in 0..c {
            let truth = batch.label(i, k);
            if truth {
                positives[k] += 1;
            }
            match (pred[k], truth) {
                (true, true) => tp[k] += 1,
                (true, false) => fp[k] += 1,
                (false, true) => fng[k] += 1,
                (false, false) => {}
            }
        }
    }
    // per-class averages over classes that have positives
    let mut cp_sum = 0.0;
    let mut cr_sum = 0.0;
    let mut counted = 0usize;
    for k in 0..c {
        if positives[k] == 0 {
            continue;
        }
        counted += 1;
        cp_sum += ratio(tp[k], tp[k] + fp[k]);
        cr_sum += ratio(tp[k], tp[k] + fng[k]);
    }
    let cp = if counted == 0 { 0.0 } else { cp_sum / counted as f64 };
    let cr = if counted == 0 { 0.0 } else { cr_sum / counted as f64 };
    let tp_all: usize = tp.iter().sum();
    let fp_all: usize = fp.iter().sum();
    let fn_all: usize = fng.iter().sum();
    let op = ratio(tp_all, tp_all + fp_all);
    let or_ = ratio(tp_all, tp_all + fn_all);
    PrfAggregate {
        cp,
        cr,
        cf1: f1(cp, cr),
        op,
        or_,
        of1: f1(op, or_),
    }
}

/// Full report: mAP plus both P/R/F1 flavors, rank-only top-3.
pub fn evaluate(batch: &EvalBatch) -> Result<MetricsReport> {
    evaluate_with(batch, false)
}

pub fn evaluate_with(batch: &EvalBatch, threshold_in_top3: bool) -> Result<MetricsReport> {
    let (n, c) = (batch.num_samples(), batch.num_classes());
    let mut ap_sum = 0.0f64;
    let mut ap_count = 0usize;
    for k in 0..c {
        let scores: Vec<f32> = (0..n).map(|i| batch.score(i, k)).collect();
        let labels: Vec<bool> = (0..n).map(|i| batch.label(i, k)).collect();
        if let Some(ap) = average_precision(&scores, &labels) {
            ap_sum += ap;
            ap_count += 1;
        }
    }
    if ap_count == 0 {
        return Err(Error::Contract(
            "evaluate: no class has a positive label".into(),
        ));
    }
    Ok(MetricsReport {
        map: ap_sum / ap_count as f64,
        all: prf_suite_with(batch, false, threshold_in_top3),
        top3: prf_suite_with(batch, true, threshold_in_top3),
    })
}
