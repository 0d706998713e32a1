//! Turning classifier scores into label sets, micro/macro F1, and embedding
//! export for external visualization.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::DenseMatrix;
use crate::error::{Error, Result};
use crate::graph::{renormalized_filter, AttributedNetwork, DomainPair};
use crate::model::{embed, ModelParams, TaskMode};

/// Decision threshold for multi-label scores.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Predicted label set per node; never empty.
    pub labels: Vec<Vec<usize>>,
    pub scores: DenseMatrix,
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    // Strict comparison keeps the lowest index on ties.
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Multi-label: every label scoring above 0.5, or the argmax label when none
/// does. Multi-class: the argmax label. Ties go to the lowest index.
pub fn threshold_predict(scores: &DenseMatrix, mode: TaskMode) -> PredictionSet {
    let labels = scores
        .rows()
        .into_iter()
        .map(|row| match mode {
            TaskMode::MultiClass => vec![argmax(row)],
            TaskMode::MultiLabel => {
                let above: Vec<usize> = (0..row.len()).filter(|&k| row[k] > THRESHOLD).collect();
                if above.is_empty() && !row.is_empty() {
                    vec![argmax(row)]
                } else {
                    above
                }
            }
        })
        .collect();
    PredictionSet {
        labels,
        scores: scores.clone(),
    }
}

/// Per-label true positive, false positive and false negative counts.
fn confusion(
    pred: &[Vec<usize>],
    truth: &[Vec<usize>],
    label_count: usize,
) -> Result<Vec<(u64, u64, u64)>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth rows",
            pred.len(),
            truth.len()
        )));
    }
    let mut counts = vec![(0u64, 0u64, 0u64); label_count];
    let mut in_pred = vec![false; label_count];
    let mut in_truth = vec![false; label_count];
    for (p, t) in pred.iter().zip(truth) {
        in_pred.iter_mut().for_each(|b| *b = false);
        in_truth.iter_mut().for_each(|b| *b = false);
        for (set, mark) in [(p, &mut in_pred), (t, &mut in_truth)] {
            for &l in set {
                if l >= label_count {
                    return Err(Error::LabelRange {
                        label: l,
                        labels: label_count,
                    });
                }
                mark[l] = true;
            }
        }
        for l in 0..label_count {
            match (in_pred[l], in_truth[l]) {
                (true, true) => counts[l].0 += 1,
                (true, false) => counts[l].1 += 1,
                (false, true) => counts[l].2 += 1,
                (false, false) => {}
            }
        }
    }
    Ok(counts)
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// F1 over (node, label) decisions pooled across all labels.
pub fn micro_f1(pred: &[Vec<usize>], truth: &[Vec<usize>], label_count: usize) -> Result<f64> {
    let (tp, fp, fn_) = confusion(pred, truth, label_count)?
        .into_iter()
        .fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2));
    Ok(f1(tp, fp, fn_))
}

/// Unweighted mean of per-label F1 over all `label_count` labels. A label
/// with no true positives, false positives or false negatives scores 0.
pub fn macro_f1(pred: &[Vec<usize>], truth: &[Vec<usize>], label_count: usize) -> Result<f64> {
    if label_count == 0 {
        return Ok(0.0);
    }
    let counts = confusion(pred, truth, label_count)?;
    let total: f64 = counts.iter().map(|&(tp, fp, fn_)| f1(tp, fp, fn_)).sum();
    Ok(total / label_count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub micro_f1: f64,
    pub macro_f1: f64,
}

/// Scores `nodes` of `net` against their ground-truth labels.
pub fn score_nodes(
    scores: &DenseMatrix,
    net: &AttributedNetwork,
    nodes: &[usize],
    mode: TaskMode,
) -> Result<F1Scores> {
    let pred = threshold_predict(scores, mode);
    let picked: Vec<Vec<usize>> = nodes.iter().map(|&i| pred.labels[i].clone()).collect();
    let truth: Vec<Vec<usize>> = nodes.iter().map(|&i| net.labels()[i].clone()).collect();
    Ok(F1Scores {
        micro_f1: micro_f1(&picked, &truth, net.label_count())?,
        macro_f1: macro_f1(&picked, &truth, net.label_count())?,
    })
}

fn push_rows(out: &mut String, domain: &str, emb: &DenseMatrix, net: &AttributedNetwork) {
    for (i, row) in emb.rows().into_iter().enumerate() {
        let _ = write!(out, "{i}\t{domain}");
        for v in row {
            let _ = write!(out, "\t{v:?}");
        }
        let labels: Vec<String> = net.labels()[i].iter().map(|l| l.to_string()).collect();
        let _ = writeln!(out, "\t{}", labels.join(","));
    }
}

/// Renders dropout-free representations of both networks as TSV:
/// `node, domain, emb_0..emb_{d-1}, labels`. Both networks must already be
/// on the model's input vocabulary.
pub fn embeddings_tsv(
    params: &ModelParams,
    source: &AttributedNetwork,
    target: &AttributedNetwork,
) -> Result<String> {
    let mut out = String::new();
    let width = params
        .generator
        .layers
        .last()
        .map(|l| l.weight.ncols())
        .unwrap_or(0);
    out.push_str("node\tdomain");
    for k in 0..width {
        let _ = write!(out, "\temb_{k}");
    }
    out.push_str("\tlabels\n");
    for (domain, net) in [("source", source), ("target", target)] {
        let filter = renormalized_filter(net)?;
        let emb = embed(params, &filter, &Arc::new(net.features().clone()))?;
        push_rows(&mut out, domain, &emb, net);
    }
    Ok(out)
}

pub fn export_embeddings(params: &ModelParams, pair: &DomainPair, path: &Path) -> Result<()> {
    let text = embeddings_tsv(params, &pair.source, &pair.target)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
