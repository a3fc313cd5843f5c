//! Micro-averaged span evaluation.

use std::collections::BTreeSet;

use crate::epe::{Polarity, Span};

/// Whether a predicted span must also carry the right polarity to count.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MatchMode {
    SpanOnly,
    SpanAndPolarity,
}

/// Aggregated precision, recall, and micro F1, with the underlying counts.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: Option<f64>,
    pub n_gold: usize,
    pub n_pred: usize,
    pub n_correct: usize,
}

impl EvalReport {
    fn from_counts(n_gold: usize, n_pred: usize, n_correct: usize) -> EvalReport {
        let precision = if n_pred == 0 { 0.0 } else { n_correct as f64 / n_pred as f64 };
        let recall = if n_gold == 0 { 0.0 } else { n_correct as f64 / n_gold as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalReport { precision, recall, f1, accuracy: None, n_gold, n_pred, n_correct }
    }
}

fn keyed(spans: &[Span], mode: MatchMode) -> BTreeSet<(usize, usize, Option<Polarity>)> {
    spans
        .iter()
        .map(|s| match mode {
            MatchMode::SpanOnly => (s.start, s.end, None),
            MatchMode::SpanAndPolarity => (s.start, s.end, s.label),
        })
        .collect()
}

/// Micro-averaged precision, recall, and F1 over per-example span sets. A
/// prediction is correct iff its boundaries (and polarity, in
/// `SpanAndPolarity` mode) match a gold span exactly. Zero denominators give
/// zero precision or recall, and F1 is zero when both are.
pub fn span_prf1(gold: &[Vec<Span>], pred: &[Vec<Span>], mode: MatchMode) -> EvalReport {
    assert_eq!(gold.len(), pred.len(), "gold and prediction example counts differ");
    let mut n_gold = 0;
    let mut n_pred = 0;
    let mut n_correct = 0;
    for (g, p) in gold.iter().zip(pred) {
        let gk = keyed(g, mode);
        let pk = keyed(p, mode);
        n_gold += gk.len();
        n_pred += pk.len();
        n_correct += gk.intersection(&pk).count();
    }
    EvalReport::from_counts(n_gold, n_pred, n_correct)
}

/// One row of the training/evaluation metrics log. Absent entries serialize
/// as empty CSV fields.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub task: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
}

impl MetricsRow {
    pub fn loss(epoch: usize, split: &str, task: &str, loss: f64) -> MetricsRow {
        MetricsRow {
            epoch,
            split: split.to_string(),
            task: task.to_string(),
            precision: None,
            recall: None,
            f1: None,
            accuracy: None,
            loss: Some(loss),
        }
    }

    pub fn report(epoch: usize, split: &str, task: &str, r: &EvalReport) -> MetricsRow {
        MetricsRow {
            epoch,
            split: split.to_string(),
            task: task.to_string(),
            precision: Some(r.precision),
            recall: Some(r.recall),
            f1: Some(r.f1),
            accuracy: r.accuracy,
            loss: None,
        }
    }

    pub fn accuracy(epoch: usize, split: &str, task: &str, acc: f64) -> MetricsRow {
        MetricsRow {
            epoch,
            split: split.to_string(),
            task: task.to_string(),
            precision: None,
            recall: None,
            f1: None,
            accuracy: Some(acc),
            loss: None,
        }
    }
}

/// Serializes metrics rows as CSV under the fixed header
/// `epoch,split,task,P,R,F1,acc,loss`.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut out = String::from("epoch,split,task,P,R,F1,acc,loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.split,
            r.task,
            cell(r.precision),
            cell(r.recall),
            cell(r.f1),
            cell(r.accuracy),
            cell(r.loss),
        ));
    }
    out
}

/// Fraction of positions where prediction equals gold.
pub fn accuracy<T: PartialEq>(gold: &[T], pred: &[T]) -> f64 {
    assert_eq!(gold.len(), pred.len(), "gold and prediction counts differ");
    if gold.is_empty() {
        return 0.0;
    }
    let correct = gold.iter().zip(pred).filter(|(a, b)| a == b).count();
    correct as f64 / gold.len() as f64
}
