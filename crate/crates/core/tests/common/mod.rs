#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use seqcl::synth::{default_pipeline_specs, generate_domain, Dataset};
use seqcl::{Arc, Graph, Matrix};

/// Random trimmed acceptor with at most `max_states` states and
/// `max_labels` labels; weights drawn from [-2, 0].
pub fn random_graph(rng: &mut ChaCha8Rng, max_states: usize, max_labels: usize) -> Graph {
    loop {
        let n = rng.random_range(1..=max_states);
        let p = rng.random_range(1..=max_labels);
        let mut arcs = Vec::new();
        for s in 0..n {
            for d in 0..n {
                for l in 0..p {
                    if rng.random_bool(0.3) {
                        arcs.push((s, d, l, rng.random_range(-2.0..=0.0)));
                    }
                }
            }
        }
        let finals: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.4) {
                    rng.random_range(-2.0..=0.0)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();

        let mut fwd = vec![false; n];
        fwd[0] = true;
        let mut bwd: Vec<bool> = finals.iter().map(|f| f.is_finite()).collect();
        for _ in 0..n {
            for &(s, d, _, _) in &arcs {
                if fwd[s] {
                    fwd[d] = true;
                }
                if bwd[d] {
                    bwd[s] = true;
                }
            }
        }
        let keep: Vec<bool> = (0..n).map(|s| fwd[s] && bwd[s]).collect();
        if !keep[0] {
            continue;
        }
        let mut index = vec![usize::MAX; n];
        let mut m = 0;
        for s in 0..n {
            if keep[s] {
                index[s] = m;
                m += 1;
            }
        }
        let kept: Vec<Arc> = arcs
            .iter()
            .filter(|a| keep[a.0] && keep[a.1])
            .map(|&(s, d, l, w)| Arc {
                source: index[s],
                dest: index[d],
                label: l,
                log_weight: w,
            })
            .collect();
        if kept.is_empty() {
            continue;
        }
        let kept_finals: Vec<f64> = (0..n).filter(|&s| keep[s]).map(|s| finals[s]).collect();
        return Graph::new(m, 0, kept_finals, kept, p).expect("trimmed graph is valid");
    }
}

/// Every complete path of exactly `t` arcs as (labels, score) where the
/// score adds arc weights, emissions and the final weight.
pub fn enumerate_paths(graph: &Graph, emissions: &Matrix) -> Vec<(Vec<usize>, f64)> {
    let t_total = emissions.rows();
    let mut out = Vec::new();
    let mut stack = vec![(graph.start(), Vec::new(), 0.0)];
    while let Some((state, labels, score)) = stack.pop() {
        if labels.len() == t_total {
            let f = graph.final_log_weight(state);
            if f.is_finite() {
                out.push((labels, score + f));
            }
            continue;
        }
        let t = labels.len();
        for a in graph.arcs().iter().filter(|a| a.source == state) {
            let mut next = labels.clone();
            next.push(a.label);
            stack.push((a.dest, next, score + a.log_weight + emissions[(t, a.label)]));
        }
    }
    out
}

/// Total log-probability and label occupancies by enumeration, `None` when
/// no complete path exists.
pub fn brute_force(graph: &Graph, emissions: &Matrix) -> Option<(f64, Matrix)> {
    let paths = enumerate_paths(graph, emissions);
    if paths.is_empty() {
        return None;
    }
    let max = paths.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let total = max + paths.iter().map(|p| (p.1 - max).exp()).sum::<f64>().ln();
    let mut gamma = Matrix::zeros(emissions.rows(), graph.num_labels());
    for (labels, score) in &paths {
        let w = (score - total).exp();
        for (t, &l) in labels.iter().enumerate() {
            gamma[(t, l)] += w;
        }
    }
    Some((total, gamma))
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// The five default domains shrunk to `seed_utts` / `other_utts`
/// utterances for fast pipeline tests.
pub fn small_domains(master_seed: u64, seed_utts: usize, other_utts: usize) -> Vec<Dataset> {
    default_pipeline_specs(master_seed)
        .into_iter()
        .enumerate()
        .map(|(i, mut spec)| {
            spec.num_utts = if i == 0 { seed_utts } else { other_utts };
            generate_domain(&spec).expect("default spec is valid")
        })
        .collect()
}
