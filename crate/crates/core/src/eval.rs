//! Decoding, label error rates and the continual-learning metrics.

use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fb::viterbi;
use crate::graph::Graph;
use crate::net::ModelParams;
use crate::synth::Utterance;

/// Edit distance with unit substitution, insertion and deletion costs.
pub fn levenshtein(hyp: &[usize], reference: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, &h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Drop consecutive duplicates: `[1, 1, 2, 2, 1] -> [1, 2, 1]`.
pub fn collapse_repeats(frames: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(frames.len());
    for &l in frames {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

/// Error counts of one test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorCount {
    pub edits: usize,
    pub reference_labels: usize,
}

impl ErrorCount {
    /// Micro-averaged error in percent: total edits over total reference labels.
    pub fn rate(&self) -> f64 {
        if self.reference_labels == 0 {
            return 0.0;
        }
        100.0 * self.edits as f64 / self.reference_labels as f64
    }
}

/// Score hypothesis/reference pairs (already collapsed).
pub fn score_pairs(pairs: &[(Vec<usize>, Vec<usize>)]) -> ErrorCount {
    pairs.iter().fold(
        ErrorCount {
            edits: 0,
            reference_labels: 0,
        },
        |acc, (hyp, reference)| ErrorCount {
            edits: acc.edits + levenshtein(hyp, reference),
            reference_labels: acc.reference_labels + reference.len(),
        },
    )
}

/// Collapsed best-path labels of one utterance.
pub fn decode(model: &ModelParams<f64>, graph: &Graph<f64>, utt: &Utterance) -> Result<Vec<usize>> {
    let emissions = model.emissions(&utt.features)?;
    let (_, frames) = viterbi(graph, &emissions)?;
    Ok(collapse_repeats(&frames))
}

/// Viterbi-decode every utterance and score against its reference. An
/// utterance without a path counts as deleting its whole reference.
pub fn decode_and_score(
    model: &ModelParams<f64>,
    graph: &Graph<f64>,
    test: &[Utterance],
) -> Result<ErrorCount> {
    let hyps: Vec<Result<Vec<usize>>> = test.par_iter().map(|u| decode(model, graph, u)).collect();
    let mut pairs = Vec::with_capacity(test.len());
    for (u, hyp) in test.iter().zip(hyps) {
        match hyp {
            Ok(h) => pairs.push((h, u.labels.clone())),
            Err(Error::NoPath { frame, .. }) => {
                warn!("decode: {} has no path (frame {frame}), scored as deletions", u.id);
                pairs.push((Vec::new(), u.labels.clone()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(score_pairs(&pairs))
}

/// `1 - (wer_cl - wer_comb) / (wer_ft - wer_comb)`.
pub fn gap_recovery(wer_cl: f64, wer_comb: f64, wer_ft: f64) -> Result<f64> {
    let gap = wer_ft - wer_comb;
    if gap == 0.0 {
        return Err(Error::DegenerateGap(wer_ft));
    }
    Ok(1.0 - (wer_cl - wer_comb) / gap)
}

/// `1 - cwer / cwer_src`: improvement on the target domain.
pub fn relative_learning(cwer: f64, cwer_src: f64) -> Result<f64> {
    if cwer_src.is_nan() || cwer_src <= 0.0 {
        return Err(Error::invalid(format!("source error on target must be > 0, got {cwer_src}")));
    }
    Ok(1.0 - cwer / cwer_src)
}

/// `pwer / pwer_src - 1`: degradation on the past domains (averaged).
pub fn relative_forgetting(pwer: f64, pwer_src: f64) -> Result<f64> {
    if pwer_src.is_nan() || pwer_src <= 0.0 {
        return Err(Error::invalid(format!("source error on past domains must be > 0, got {pwer_src}")));
    }
    Ok(pwer / pwer_src - 1.0)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// One row of a triangular evaluation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub method: String,
    /// `(domain, error %)` for every domain evaluated at this step.
    pub errors: Vec<(String, f64)>,
}

impl EvalRow {
    pub fn average(&self) -> f64 {
        mean(&self.errors.iter().map(|e| e.1).collect::<Vec<_>>())
    }

    pub fn error(&self, domain: &str) -> Option<f64> {
        self.errors.iter().find(|e| e.0 == domain).map(|e| e.1)
    }
}

/// `step,method,<domains...>,Avg`; cells of domains not evaluated at a step are
/// left empty.
pub fn eval_matrix_csv(rows: &[EvalRow], domains: &[&str]) -> String {
    let mut out = format!("step,method,{},Avg\n", domains.join(","));
    for row in rows {
        write!(out, "{},{}", row.step, row.method).expect("String write");
        for d in domains {
            match row.error(d) {
                Some(e) => write!(out, ",{e:.4}"),
                None => write!(out, ","),
            }
            .expect("String write");
        }
        writeln!(out, ",{:.4}", row.average()).expect("String write");
    }
    out
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub method: String,
    pub gap_recovery: Option<f64>,
    pub rel_learning: Option<f64>,
    pub rel_forgetting: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("step,method,gap_recovery,rel_learning,rel_forgetting\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            r.method,
            cell(r.gap_recovery),
            cell(r.rel_learning),
            cell(r.rel_forgetting)
        )
        .expect("String write");
    }
    out
}
