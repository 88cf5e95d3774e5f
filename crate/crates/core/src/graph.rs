//! Epsilon-free weighted acceptors used as numerator and denominator graphs.
//!
//! Every arc consumes exactly one label (one frame). Weights are natural-log
//! probabilities; a final weight of negative infinity marks a non-final
//! state.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc<F> {
    pub source: usize,
    pub dest: usize,
    pub label: usize,
    pub log_weight: F,
}

/// Validated graph with arcs sorted by `(source, label, dest)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph<F> {
    num_states: usize,
    start: usize,
    final_log_weights: Vec<F>,
    arcs: Vec<Arc<F>>,
    num_labels: usize,
    // arcs leaving state s are arcs[offsets[s]..offsets[s + 1]]
    offsets: Vec<usize>,
}

impl<F: Real> Graph<F> {
    pub fn new(
        num_states: usize,
        start: usize,
        final_log_weights: Vec<F>,
        mut arcs: Vec<Arc<F>>,
        num_labels: usize,
    ) -> Result<Self> {
        if num_states == 0 {
            return Err(Error::invalid("graph has no states"));
        }
        if start >= num_states {
            return Err(Error::invalid(format!("start state {start} out of range")));
        }
        if final_log_weights.len() != num_states {
            return Err(Error::invalid("final weight vector length differs from state count"));
        }
        if num_labels == 0 {
            return Err(Error::invalid("graph needs at least one label"));
        }
        for (s, &w) in final_log_weights.iter().enumerate() {
            if w.is_nan() || w == F::infinity() {
                return Err(Error::invalid(format!("final weight of state {s} is {w}")));
            }
        }
        if !final_log_weights.iter().any(|w| w.is_finite()) {
            return Err(Error::invalid("graph has no final state"));
        }
        for a in &arcs {
            if a.source >= num_states || a.dest >= num_states {
                return Err(Error::invalid(format!(
                    "arc {}->{} references a state outside 0..{num_states}",
                    a.source, a.dest
                )));
            }
            if a.label >= num_labels {
                return Err(Error::invalid(format!(
                    "arc label {} not below label count {num_labels}",
                    a.label
                )));
            }
            if !a.log_weight.is_finite() {
                return Err(Error::invalid(format!(
                    "arc {}->{} has non-finite weight",
                    a.source, a.dest
                )));
            }
        }
        arcs.sort_by_key(|a| (a.source, a.label, a.dest));

        let mut offsets = vec![0usize; num_states + 1];
        for a in &arcs {
            offsets[a.source + 1] += 1;
        }
        for s in 0..num_states {
            offsets[s + 1] += offsets[s];
        }

        let graph = Self {
            num_states,
            start,
            final_log_weights,
            arcs,
            num_labels,
            offsets,
        };
        graph.check_trim()?;
        Ok(graph)
    }

    /// Every state must be reachable from the start and able to reach a
    /// final state.
    fn check_trim(&self) -> Result<()> {
        let mut reachable = vec![false; self.num_states];
        let mut stack = vec![self.start];
        reachable[self.start] = true;
        while let Some(s) = stack.pop() {
            for a in self.arcs_from(s) {
                if !reachable[a.dest] {
                    reachable[a.dest] = true;
                    stack.push(a.dest);
                }
            }
        }
        if let Some(s) = reachable.iter().position(|r| !r) {
            return Err(Error::invalid(format!("state {s} is unreachable from the start")));
        }

        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); self.num_states];
        for a in &self.arcs {
            incoming[a.dest].push(a.source);
        }
        let mut coaccessible: Vec<bool> =
            self.final_log_weights.iter().map(|w| w.is_finite()).collect();
        let mut stack: Vec<usize> = (0..self.num_states).filter(|&s| coaccessible[s]).collect();
        while let Some(s) = stack.pop() {
            for &p in &incoming[s] {
                if !coaccessible[p] {
                    coaccessible[p] = true;
                    stack.push(p);
                }
            }
        }
        if let Some(s) = coaccessible.iter().position(|c| !c) {
            return Err(Error::invalid(format!("state {s} cannot reach a final state")));
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn arcs(&self) -> &[Arc<F>] {
        &self.arcs
    }

    pub fn arcs_from(&self, state: usize) -> &[Arc<F>] {
        &self.arcs[self.offsets[state]..self.offsets[state + 1]]
    }

    pub fn final_log_weight(&self, state: usize) -> F {
        self.final_log_weights[state]
    }

    pub fn final_log_weights(&self) -> &[F] {
        &self.final_log_weights
    }

    pub fn is_final(&self, state: usize) -> bool {
        self.final_log_weights[state].is_finite()
    }

    /// Text serialization: a `STATES n START s LABELS p` header, one
    /// `ARC src dst label weight` line per arc and one `FINAL state weight`
    /// line per final state. Weights carry 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "STATES {} START {} LABELS {}\n",
            self.num_states, self.start, self.num_labels
        );
        for a in &self.arcs {
            writeln!(
                out,
                "ARC {} {} {} {:.16e}",
                a.source,
                a.dest,
                a.label,
                a.log_weight.as_f64()
            )
            .expect("writing to a String");
        }
        for (s, w) in self.final_log_weights.iter().enumerate() {
            if w.is_finite() {
                writeln!(out, "FINAL {s} {:.16e}", w.as_f64()).expect("writing to a String");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty graph file".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 6 || h[0] != "STATES" || h[2] != "START" || h[4] != "LABELS" {
            return Err(Error::Format(format!("bad graph header: {header}")));
        }
        let num_states = parse_field::<usize>(h[1])?;
        let start = parse_field::<usize>(h[3])?;
        let num_labels = parse_field::<usize>(h[5])?;

        let mut finals = vec![F::neg_infinity(); num_states];
        let mut arcs = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["ARC", src, dst, label, w] => arcs.push(Arc {
                    source: parse_field(src)?,
                    dest: parse_field(dst)?,
                    label: parse_field(label)?,
                    log_weight: F::of(parse_field::<f64>(w)?),
                }),
                ["FINAL", s, w] => {
                    let s: usize = parse_field(s)?;
                    if s >= num_states {
                        return Err(Error::Format(format!("final state {s} out of range")));
                    }
                    finals[s] = F::of(parse_field::<f64>(w)?);
                }
                _ => return Err(Error::Format(format!("bad graph line: {line}"))),
            }
        }
        Self::new(num_states, start, finals, arcs, num_labels)
    }
}

fn parse_field<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("cannot parse field {s:?}")))
}

/// Chain graph for one reference label sequence.
///
/// State `i` sits before `labels[i]`; the arc `i -> i+1` emits `labels[i]`.
/// With `allow_self_loops` every non-final state also loops on its own label,
/// so every monotonic alignment of `labels` to `T >= labels.len()` frames is a
/// path. All weights are zero.
pub fn build_numerator_graph<F: Real>(
    labels: &[usize],
    num_labels: usize,
    allow_self_loops: bool,
) -> Result<Graph<F>> {
    if labels.is_empty() {
        return Err(Error::invalid("numerator graph needs a non-empty label sequence"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_labels) {
        return Err(Error::invalid(format!(
            "label {bad} not below label count {num_labels}"
        )));
    }
    let n = labels.len();
    let mut arcs = Vec::with_capacity(2 * n);
    for (i, &label) in labels.iter().enumerate() {
        arcs.push(Arc {
            source: i,
            dest: i + 1,
            label,
            log_weight: F::zero(),
        });
        if allow_self_loops {
            arcs.push(Arc {
                source: i,
                dest: i,
                label,
                log_weight: F::zero(),
            });
        }
    }
    let mut finals = vec![F::neg_infinity(); n + 1];
    finals[n] = F::zero();
    Graph::new(n + 1, 0, finals, arcs, num_labels)
}

/// Label-bigram denominator graph.
///
/// State 0 is the start state and state `a + 1` remembers that label `a` was
/// emitted last. The arc into state `b + 1` emits `b` and carries
/// `log p(b | previous)`; label states are final with `log p(end | a)`.
/// Zero-probability transitions are omitted.
pub fn build_denominator_graph<F: Real>(lm: &BigramLm<F>) -> Result<Graph<F>> {
    let p = lm.num_labels();
    if p == 0 {
        return Err(Error::invalid("denominator graph needs at least one label"));
    }
    let boundary = lm.boundary();
    let mut arcs = Vec::with_capacity((p + 1) * p);
    for from in 0..=p {
        let (state, context) = if from == 0 { (0, boundary) } else { (from, from - 1) };
        for b in 0..p {
            let w = lm.log_prob(context, b);
            if w.is_finite() {
                arcs.push(Arc {
                    source: state,
                    dest: b + 1,
                    label: b,
                    log_weight: w,
                });
            }
        }
    }
    let mut finals = vec![F::neg_infinity(); p + 1];
    for a in 0..p {
        finals[a + 1] = lm.log_prob(a, boundary);
    }
    Graph::new(p + 1, 0, finals, arcs, p)
}

/// Bigram language model over `P` labels plus a sentence boundary.
///
/// `log_probs` is `(P+1) x (P+1)`; index `P` is the boundary, so row `P` holds
/// `log p(. | <s>)` and column `P` holds `log p(</s> | .)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramLm<F> {
    num_labels: usize,
    log_probs: Matrix<F>,
}

impl<F: Real> BigramLm<F> {
    pub fn new(num_labels: usize, log_probs: Matrix<F>) -> Result<Self> {
        if log_probs.shape() != (num_labels + 1, num_labels + 1) {
            return Err(Error::invalid(format!(
                "bigram table is {:?}, expected {}x{}",
                log_probs.shape(),
                num_labels + 1,
                num_labels + 1
            )));
        }
        let tol = (F::epsilon().as_f64() * 100.0).max(1e-9);
        for (r, row) in log_probs.iter_rows().enumerate() {
            if row.iter().any(|v| v.is_nan() || *v == F::infinity()) {
                return Err(Error::invalid(format!("bigram row {r} has NaN or +inf")));
            }
            let mass: f64 = row.iter().map(|v| v.as_f64().exp()).sum();
            if (mass - 1.0).abs() > tol {
                return Err(Error::invalid(format!("bigram row {r} sums to {mass}")));
            }
        }
        Ok(Self {
            num_labels,
            log_probs,
        })
    }

    /// Build from a probability table (rows are normalized by the caller).
    pub fn from_probs(num_labels: usize, probs: &Matrix<F>) -> Result<Self> {
        Self::new(num_labels, probs.map(|p| p.ln()))
    }

    /// Every row uniform over all `P + 1` columns.
    pub fn uniform(num_labels: usize) -> Self {
        let n = num_labels + 1;
        let w = -F::of(n as f64).ln();
        Self {
            num_labels,
            log_probs: Matrix::filled(n, n, w),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn boundary(&self) -> usize {
        self.num_labels
    }

    pub fn log_prob(&self, from: usize, to: usize) -> F {
        self.log_probs[(from, to)]
    }

    pub fn prob(&self, from: usize, to: usize) -> F {
        self.log_probs[(from, to)].exp()
    }

    pub fn log_probs(&self) -> &Matrix<F> {
        &self.log_probs
    }
}

/// Add-k smoothed bigram estimate from label transcripts.
///
/// Each transcript contributes `<s> l0`, `l_i l_{i+1}` and `l_last </s>`
/// counts. `smoothing_count` is added to every cell of the table before
/// row normalization; rows that end up with no mass (a label never seen as a
/// predecessor with `k = 0`) fall back to uniform.
pub fn estimate_bigram_lm<F: Real>(
    transcripts: &[Vec<usize>],
    num_labels: usize,
    smoothing_count: f64,
) -> Result<BigramLm<F>> {
    if !(smoothing_count >= 0.0 && smoothing_count.is_finite()) {
        return Err(Error::invalid("smoothing count must be finite and nonnegative"));
    }
    if num_labels == 0 {
        return Err(Error::invalid("bigram model needs at least one label"));
    }
    if transcripts.iter().all(Vec::is_empty) {
        return Err(Error::invalid("no non-empty transcript to estimate a bigram model"));
    }
    let n = num_labels + 1;
    let boundary = num_labels;
    let mut counts = vec![vec![smoothing_count; n]; n];
    for t in transcripts.iter().filter(|t| !t.is_empty()) {
        if let Some(&bad) = t.iter().find(|&&l| l >= num_labels) {
            return Err(Error::invalid(format!("transcript label {bad} out of range")));
        }
        counts[boundary][t[0]] += 1.0;
        for w in t.windows(2) {
            counts[w[0]][w[1]] += 1.0;
        }
        counts[t[t.len() - 1]][boundary] += 1.0;
    }
    let mut log_probs = Matrix::zeros(n, n);
    for (r, row) in counts.iter().enumerate() {
        let total: f64 = row.iter().sum();
        for (c, &count) in row.iter().enumerate() {
            let p = if total > 0.0 { count / total } else { 1.0 / n as f64 };
            log_probs[(r, c)] = F::of(p.ln());
        }
    }
    BigramLm::new(num_labels, log_probs)
}

/// Fold a per-frame self-loop probability `s` into a label bigram so it
/// scores frame-level label sequences: from a label state, the same label
/// repeats with probability `s + (1 - s) p(a|a)` and every other successor
/// (including the end) keeps `(1 - s)` of its mass. The start row is unchanged.
pub fn with_self_loops<F: Real>(lm: &BigramLm<F>, s: F) -> Result<BigramLm<F>> {
    if !(s >= F::zero() && s < F::one()) {
        return Err(Error::invalid(format!("self-loop probability {s} outside [0, 1)")));
    }
    let p = lm.num_labels();
    let probs = Matrix::from_fn(p + 1, p + 1, |r, c| {
        let base = lm.prob(r, c);
        if r == p {
            base
        } else if r == c {
            s + (F::one() - s) * base
        } else {
            (F::one() - s) * base
        }
    });
    BigramLm::from_probs(p, &probs)
}

/// Self-loop probability matching the observed number of labels per frame:
/// `1 - labels / frames`, the value for which a geometric duration model has
/// the observed mean duration.
pub fn estimate_self_loop_prob(frames_and_labels: impl IntoIterator<Item = (usize, usize)>) -> Result<f64> {
    let (mut frames, mut labels) = (0usize, 0usize);
    for (t, n) in frames_and_labels {
        if n > t {
            return Err(Error::invalid(format!("{n} labels cannot align to {t} frames")));
        }
        frames += t;
        labels += n;
    }
    if frames == 0 {
        return Err(Error::invalid("no frames to estimate a self-loop probability"));
    }
    Ok(1.0 - labels as f64 / frames as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arc(source: usize, dest: usize, label: usize, w: f64) -> Arc<f64> {
        Arc {
            source,
            dest,
            label,
            log_weight: w,
        }
    }

    /// All label sequences of length `t` accepted by the graph, with their
    /// summed path weights (final weight included).
    fn enumerate_paths(g: &Graph<f64>, t: usize) -> Vec<(Vec<usize>, f64)> {
        let mut out = Vec::new();
        fn rec(
            g: &Graph<f64>,
            state: usize,
            left: usize,
            labels: &mut Vec<usize>,
            w: f64,
            out: &mut Vec<(Vec<usize>, f64)>,
        ) {
            if left == 0 {
                if g.is_final(state) {
                    out.push((labels.clone(), w + g.final_log_weight(state)));
                }
                return;
            }
            for a in g.arcs_from(state) {
                labels.push(a.label);
                rec(g, a.dest, left - 1, labels, w + a.log_weight, out);
                labels.pop();
            }
        }
        rec(g, g.start(), t, &mut Vec::new(), 0.0, &mut out);
        out
    }

    #[test]
    fn numerator_single_label() {
        let g = build_numerator_graph::<f64>(&[2], 3, false).unwrap();
        assert_eq!(g.num_states(), 2);
        assert_eq!(g.arcs(), &[arc(0, 1, 2, 0.0)]);
        assert!(g.is_final(1) && !g.is_final(0));
    }

    #[test]
    fn numerator_with_self_loops() {
        let g = build_numerator_graph::<f64>(&[0, 1], 2, true).unwrap();
        assert_eq!(g.num_states(), 3);
        assert_eq!(
            g.arcs(),
            &[arc(0, 0, 0, 0.0), arc(0, 1, 0, 0.0), arc(1, 1, 1, 0.0), arc(1, 2, 1, 0.0)]
        );
        assert!(g.is_final(2));
    }

    #[test]
    fn numerator_paths_three_frames() {
        let g = build_numerator_graph::<f64>(&[0, 1], 2, true).unwrap();
        let mut seqs: Vec<Vec<usize>> = enumerate_paths(&g, 3).into_iter().map(|p| p.0).collect();
        seqs.sort();
        assert_eq!(seqs, vec![vec![0, 0, 1], vec![0, 1, 1]]);
    }

    /// All ways of stretching `labels` to `t` frames, each label at least once.
    fn monotonic_alignments(labels: &[usize], t: usize) -> Vec<Vec<usize>> {
        if labels.is_empty() {
            return if t == 0 { vec![vec![]] } else { vec![] };
        }
        let mut out = Vec::new();
        for d in 1..=t.saturating_sub(labels.len() - 1) {
            for mut rest in monotonic_alignments(&labels[1..], t - d) {
                let mut seq = vec![labels[0]; d];
                seq.append(&mut rest);
                out.push(seq);
            }
        }
        out
    }

    #[test]
    fn numerator_paths_are_monotonic_alignments() {
        let refs: [&[usize]; 5] = [&[0], &[1, 0], &[1, 1], &[0, 2, 1], &[2, 2, 2]];
        for labels in refs {
            let g = build_numerator_graph::<f64>(labels, 3, true).unwrap();
            for t in labels.len()..=5 {
                let mut got: Vec<Vec<usize>> =
                    enumerate_paths(&g, t).into_iter().map(|p| p.0).collect();
                let mut want = monotonic_alignments(labels, t);
                got.sort();
                want.sort();
                // repeated labels make distinct paths collapse to one label sequence
                want.dedup();
                let n_paths = got.len();
                got.dedup();
                assert_eq!(got, want, "labels {labels:?} T={t}");
                assert!(n_paths >= want.len());
            }
        }
    }

    #[test]
    fn numerator_rejects_bad_input() {
        assert!(build_numerator_graph::<f64>(&[], 2, true).is_err());
        assert!(build_numerator_graph::<f64>(&[0, 2], 2, true).is_err());
    }

    #[test]
    fn denominator_single_label_closure() {
        let lm = BigramLm::<f64>::uniform(1);
        let g = build_denominator_graph(&lm).unwrap();
        assert_eq!(g.num_states(), 2);
        let half = 0.5f64.ln();
        for t in 1..5 {
            let paths = enumerate_paths(&g, t);
            assert_eq!(paths.len(), 1);
            assert!((paths[0].1 - (t as f64 * half + half)).abs() < 1e-12);
        }
    }

    #[test]
    fn denominator_uniform_two_labels_length_two() {
        let lm = BigramLm::<f64>::uniform(2);
        let g = build_denominator_graph(&lm).unwrap();
        let total: f64 = enumerate_paths(&g, 2).iter().map(|p| p.1.exp()).sum();
        assert!((total - 4.0 / 27.0).abs() < 1e-12);
    }

    #[test]
    fn denominator_omits_zero_probability_arcs() {
        let probs = Matrix::from_rows(&[
            vec![0.5, 0.0, 0.5],
            vec![0.3, 0.3, 0.4],
            vec![0.5, 0.5, 0.0],
        ])
        .unwrap();
        let lm = BigramLm::<f64>::from_probs(2, &probs).unwrap();
        let g = build_denominator_graph(&lm).unwrap();
        for t in 1..=5 {
            for (seq, _) in enumerate_paths(&g, t) {
                assert!(!seq.windows(2).any(|w| w == [0, 1]), "{seq:?}");
            }
        }
    }

    #[test]
    fn denominator_path_weight_is_lm_logprob() {
        let lm = estimate_bigram_lm::<f64>(&[vec![0, 1, 1, 2], vec![2, 0]], 3, 0.5).unwrap();
        let g = build_denominator_graph(&lm).unwrap();
        for (seq, w) in enumerate_paths(&g, 3) {
            let b = lm.boundary();
            let mut want = lm.log_prob(b, seq[0]);
            for pair in seq.windows(2) {
                want += lm.log_prob(pair[0], pair[1]);
            }
            want += lm.log_prob(seq[2], b);
            assert!((w - want).abs() < 1e-12);
        }
    }

    #[test]
    fn denominator_closure_mass_bounded() {
        let lm = estimate_bigram_lm::<f64>(&[vec![0, 1, 0], vec![1], vec![1, 1, 0]], 2, 0.3)
            .unwrap();
        let g = build_denominator_graph(&lm).unwrap();
        let mut prefix = 0.0;
        for len in 1..=10 {
            let mass: f64 = enumerate_paths(&g, len).iter().map(|p| p.1.exp()).sum();
            assert!(mass >= 0.0);
            prefix += mass;
            assert!(prefix <= 1.0 + 1e-9, "len {len}: {prefix}");
        }
        // what is missing is exactly p(</s> | <s>) plus the tail beyond 10 labels
        let empty = lm.prob(2, 2);
        assert!(prefix + empty > 0.95);
    }

    #[test]
    fn estimate_counts_by_hand() {
        let lm = estimate_bigram_lm::<f64>(&[vec![0, 0]], 1, 0.0).unwrap();
        assert!((lm.prob(0, 0) - 0.5).abs() < 1e-15);
        assert!((lm.prob(0, 1) - 0.5).abs() < 1e-15);
        assert!((lm.prob(1, 0) - 1.0).abs() < 1e-15);

        let lm = estimate_bigram_lm::<f64>(&[vec![0], vec![1]], 2, 0.0).unwrap();
        assert!((lm.prob(2, 0) - 0.5).abs() < 1e-15);
        assert!((lm.prob(2, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn estimate_large_smoothing_is_nearly_uniform() {
        let lm = estimate_bigram_lm::<f64>(&[vec![0, 1, 2, 0, 0]], 3, 1e9).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert!((lm.prob(r, c) - 0.25).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn estimate_rejects_empty() {
        assert!(estimate_bigram_lm::<f64>(&[vec![], vec![]], 2, 1.0).is_err());
        assert!(estimate_bigram_lm::<f64>(&[], 2, 1.0).is_err());
    }

    #[test]
    fn validation_rejects_bad_graphs() {
        let fin = vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        // state 2 unreachable
        assert!(Graph::new(3, 0, fin.clone(), vec![arc(0, 1, 0, 0.0)], 1).is_err());
        // state 2 is a dead end
        assert!(
            Graph::new(3, 0, fin.clone(), vec![arc(0, 1, 0, 0.0), arc(0, 2, 0, 0.0)], 1).is_err()
        );
        // non-finite arc weight
        assert!(Graph::new(
            2,
            0,
            vec![f64::NEG_INFINITY, 0.0],
            vec![arc(0, 1, 0, f64::NAN)],
            1
        )
        .is_err());
        // no final state
        assert!(Graph::new(
            2,
            0,
            vec![f64::NEG_INFINITY; 2],
            vec![arc(0, 1, 0, 0.0)],
            1
        )
        .is_err());
    }

    #[test]
    fn arcs_are_sorted_deterministically() {
        let arcs = vec![arc(1, 2, 0, -1.0), arc(0, 2, 1, -0.5), arc(0, 1, 1, -0.1), arc(0, 1, 0, -0.2)];
        let fin = vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0];
        let g = Graph::new(3, 0, fin.clone(), arcs.clone(), 2).unwrap();
        let mut rev = arcs;
        rev.reverse();
        let g2 = Graph::new(3, 0, fin, rev, 2).unwrap();
        assert_eq!(g, g2);
        let keys: Vec<_> = g.arcs().iter().map(|a| (a.source, a.label, a.dest)).collect();
        assert_eq!(keys, vec![(0, 0, 1), (0, 1, 1), (0, 1, 2), (1, 0, 2)]);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let lm = estimate_bigram_lm::<f64>(&[vec![0, 1, 2], vec![2, 2, 1, 0]], 3, 0.7).unwrap();
        let g = build_denominator_graph(&lm).unwrap();
        let text = g.to_text();
        assert!(text.starts_with("STATES 4 START 0 LABELS 3\n"));
        let back = Graph::<f64>::from_text(&text).unwrap();
        assert_eq!(back, g);
        for (a, b) in back.arcs().iter().zip(g.arcs()) {
            assert_eq!(a.log_weight.to_bits(), b.log_weight.to_bits());
        }
    }

    #[test]
    fn text_parse_errors() {
        assert!(Graph::<f64>::from_text("").is_err());
        assert!(Graph::<f64>::from_text("STATES 2 START 0\n").is_err());
        assert!(Graph::<f64>::from_text("STATES 2 START 0 LABELS 1\nARC 0 1 x 0\n").is_err());
    }

    #[test]
    fn self_loops_keep_rows_normalized() {
        let lm = estimate_bigram_lm::<f64>(&[vec![0, 1, 2], vec![2, 0]], 3, 0.5).unwrap();
        let looped = with_self_loops(&lm, 0.4).unwrap();
        for r in 0..4 {
            let total: f64 = (0..4).map(|c| looped.prob(r, c)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!((looped.prob(0, 0) - (0.4 + 0.6 * lm.prob(0, 0))).abs() < 1e-15);
        assert!((looped.prob(0, 1) - 0.6 * lm.prob(0, 1)).abs() < 1e-15);
        assert_eq!(looped.prob(3, 1), lm.prob(3, 1));
        let same = with_self_loops(&lm, 0.0).unwrap();
        for (a, b) in same.log_probs().as_slice().iter().zip(lm.log_probs().as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(with_self_loops(&lm, 1.0).is_err());
    }

    #[test]
    fn self_loop_estimate_from_counts() {
        // 3 labels over 6 frames and 1 over 2: mean duration 2
        let s = estimate_self_loop_prob([(6, 3), (2, 1)]).unwrap();
        assert!((s - 0.5).abs() < 1e-15);
        assert_eq!(estimate_self_loop_prob([(3, 3)]).unwrap(), 0.0);
        assert!(estimate_self_loop_prob([(2, 3)]).is_err());
        assert!(estimate_self_loop_prob([]).is_err());
    }
}
