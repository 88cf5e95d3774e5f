//! Log-domain forward-backward and Viterbi over a [`Graph`] given per-frame
//! label scores.
//!
//! A path of length `T` takes one arc per frame; its score is the sum of arc
//! weights, the emission scores of the arc labels and the final weight of the
//! state it ends in.

use crate::error::{Error, GraphRole, Result};
use crate::graph::Graph;
use crate::matrix::{log_add, Matrix};
use crate::Real;

/// `T x P` natural-log scores, one row per frame.
pub type EmissionMatrix<F> = Matrix<F>;

/// `T x P` posteriors of each label at each frame.
pub type OccupancyMatrix<F> = Matrix<F>;

#[derive(Debug, Clone)]
pub struct ForwardBackward<F> {
    /// Total log-probability from the forward pass.
    pub total_logprob: F,
    /// The same quantity from the backward pass; kept for consistency checks.
    pub backward_logprob: F,
    pub occupancies: OccupancyMatrix<F>,
}

fn check_emissions<F: Real>(graph: &Graph<F>, emissions: &EmissionMatrix<F>) -> Result<()> {
    if emissions.rows() == 0 {
        return Err(Error::invalid("emission matrix has no frames"));
    }
    if emissions.cols() != graph.num_labels() {
        return Err(Error::invalid(format!(
            "emissions have {} labels, graph has {}",
            emissions.cols(),
            graph.num_labels()
        )));
    }
    if !emissions.all_finite() {
        return Err(Error::invalid("emission matrix contains non-finite values"));
    }
    Ok(())
}

/// Forward table `alpha[t * S + s]` for `t = 0..=T`.
fn forward<F: Real>(graph: &Graph<F>, emissions: &EmissionMatrix<F>) -> Result<Vec<F>> {
    let s_count = graph.num_states();
    let t_count = emissions.rows();
    let ninf = F::neg_infinity();
    let mut alpha = vec![ninf; (t_count + 1) * s_count];
    alpha[graph.start()] = F::zero();
    for t in 0..t_count {
        let e = emissions.row(t);
        let (done, rest) = alpha.split_at_mut((t + 1) * s_count);
        let cur = &done[t * s_count..];
        let next = &mut rest[..s_count];
        let mut any = false;
        for a in graph.arcs() {
            let from = cur[a.source];
            if from == ninf {
                continue;
            }
            next[a.dest] = log_add(next[a.dest], from + a.log_weight + e[a.label]);
            any = true;
        }
        if !any {
            return Err(Error::NoPath {
                graph: GraphRole::Unspecified,
                frame: t,
            });
        }
    }
    Ok(alpha)
}

/// Total log-probability, occupancies and a backward-pass total.
pub fn forward_backward<F: Real>(
    graph: &Graph<F>,
    emissions: &EmissionMatrix<F>,
) -> Result<ForwardBackward<F>> {
    check_emissions(graph, emissions)?;
    let s_count = graph.num_states();
    let t_count = emissions.rows();
    let ninf = F::neg_infinity();

    let alpha = forward(graph, emissions)?;
    let last = &alpha[t_count * s_count..];
    let total = last
        .iter()
        .zip(graph.final_log_weights())
        .fold(ninf, |acc, (&a, &f)| log_add(acc, a + f));
    if total == ninf {
        return Err(Error::NoPath {
            graph: GraphRole::Unspecified,
            frame: t_count,
        });
    }

    let mut beta = vec![ninf; (t_count + 1) * s_count];
    beta[t_count * s_count..].copy_from_slice(graph.final_log_weights());
    for t in (0..t_count).rev() {
        let e = emissions.row(t);
        let (head, tail) = beta.split_at_mut((t + 1) * s_count);
        let cur = &mut head[t * s_count..];
        let next = &tail[..s_count];
        for a in graph.arcs() {
            let to = next[a.dest];
            if to == ninf {
                continue;
            }
            cur[a.source] = log_add(cur[a.source], a.log_weight + e[a.label] + to);
        }
    }
    let backward_total = beta[graph.start()];

    let mut gamma = Matrix::zeros(t_count, graph.num_labels());
    for t in 0..t_count {
        let e = emissions.row(t);
        let a_t = &alpha[t * s_count..(t + 1) * s_count];
        let b_next = &beta[(t + 1) * s_count..(t + 2) * s_count];
        let row = gamma.row_mut(t);
        for a in graph.arcs() {
            let (from, to) = (a_t[a.source], b_next[a.dest]);
            if from == ninf || to == ninf {
                continue;
            }
            row[a.label] += (from + a.log_weight + e[a.label] + to - total).exp();
        }
    }

    Ok(ForwardBackward {
        total_logprob: total,
        backward_logprob: backward_total,
        occupancies: gamma,
    })
}

/// `(log p(x | graph), gamma)`.
pub fn logprob_and_occupancies<F: Real>(
    graph: &Graph<F>,
    emissions: &EmissionMatrix<F>,
) -> Result<(F, OccupancyMatrix<F>)> {
    let fb = forward_backward(graph, emissions)?;
    Ok((fb.total_logprob, fb.occupancies))
}

/// Forward pass only; cheaper when occupancies are not needed.
pub fn total_logprob<F: Real>(graph: &Graph<F>, emissions: &EmissionMatrix<F>) -> Result<F> {
    check_emissions(graph, emissions)?;
    let s_count = graph.num_states();
    let t_count = emissions.rows();
    let alpha = forward(graph, emissions)?;
    let total = alpha[t_count * s_count..]
        .iter()
        .zip(graph.final_log_weights())
        .fold(F::neg_infinity(), |acc, (&a, &f)| log_add(acc, a + f));
    if total == F::neg_infinity() {
        return Err(Error::NoPath {
            graph: GraphRole::Unspecified,
            frame: t_count,
        });
    }
    Ok(total)
}

/// Best complete path: its score and per-frame labels.
///
/// Ties go to the arc that comes first in `(source, label, dest)` order and,
/// at the end, to the lowest-numbered final state.
pub fn viterbi<F: Real>(graph: &Graph<F>, emissions: &EmissionMatrix<F>) -> Result<(F, Vec<usize>)> {
    check_emissions(graph, emissions)?;
    let s_count = graph.num_states();
    let t_count = emissions.rows();
    let ninf = F::neg_infinity();
    let arcs = graph.arcs();

    let mut score = vec![ninf; s_count];
    score[graph.start()] = F::zero();
    let mut back = vec![usize::MAX; t_count * s_count];
    let mut next = vec![ninf; s_count];
    for t in 0..t_count {
        let e = emissions.row(t);
        next.fill(ninf);
        let bp = &mut back[t * s_count..(t + 1) * s_count];
        for (i, a) in arcs.iter().enumerate() {
            let from = score[a.source];
            if from == ninf {
                continue;
            }
            let cand = from + a.log_weight + e[a.label];
            if cand > next[a.dest] {
                next[a.dest] = cand;
                bp[a.dest] = i;
            }
        }
        if next.iter().all(|&v| v == ninf) {
            return Err(Error::NoPath {
                graph: GraphRole::Unspecified,
                frame: t,
            });
        }
        std::mem::swap(&mut score, &mut next);
    }

    let mut best = ninf;
    let mut best_state = None;
    for (s, (&v, &f)) in score.iter().zip(graph.final_log_weights()).enumerate() {
        if v + f > best {
            best = v + f;
            best_state = Some(s);
        }
    }
    let mut state = best_state.ok_or(Error::NoPath {
        graph: GraphRole::Unspecified,
        frame: t_count,
    })?;

    let mut labels = vec![0; t_count];
    for t in (0..t_count).rev() {
        let a = &arcs[back[t * s_count + state]];
        labels[t] = a.label;
        state = a.source;
    }
    Ok((best, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_denominator_graph, build_numerator_graph, Arc, BigramLm};

    fn single_arc_graph() -> Graph<f64> {
        Graph::new(
            2,
            0,
            vec![f64::NEG_INFINITY, 0.0],
            vec![Arc {
                source: 0,
                dest: 1,
                label: 0,
                log_weight: -0.5,
            }],
            1,
        )
        .unwrap()
    }

    #[test]
    fn single_path() {
        let g = single_arc_graph();
        let e = Matrix::from_rows(&[vec![-1.0]]).unwrap();
        let (total, gamma) = logprob_and_occupancies(&g, &e).unwrap();
        assert!((total - -1.5).abs() < 1e-15);
        assert!((gamma[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn no_path_reports_frame() {
        let g = single_arc_graph();
        let e = Matrix::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        match logprob_and_occupancies(&g, &e) {
            Err(Error::NoPath { frame, .. }) => assert_eq!(frame, 1),
            other => panic!("expected NoPath, got {other:?}"),
        }
        let chain = build_numerator_graph::<f64>(&[0, 0, 0], 1, false).unwrap();
        let short = Matrix::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        match viterbi(&chain, &short) {
            Err(Error::NoPath { frame, .. }) => assert_eq!(frame, 2),
            other => panic!("expected NoPath, got {other:?}"),
        }
    }

    #[test]
    fn label_count_mismatch() {
        let g = single_arc_graph();
        let e = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            logprob_and_occupancies(&g, &e),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn frame_shift_invariance() {
        let lm = BigramLm::<f64>::uniform(3);
        let g = build_denominator_graph(&lm).unwrap();
        let e = Matrix::from_rows(&[
            vec![0.1, -0.4, 1.2],
            vec![-2.0, 0.3, 0.0],
            vec![0.5, 0.5, -1.0],
        ])
        .unwrap();
        let (t0, g0) = logprob_and_occupancies(&g, &e).unwrap();
        let mut shifted = e.clone();
        for v in shifted.row_mut(1) {
            *v += 3.25;
        }
        let (t1, g1) = logprob_and_occupancies(&g, &shifted).unwrap();
        assert!((t1 - t0 - 3.25).abs() < 1e-12);
        for (a, b) in g0.as_slice().iter().zip(g1.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn viterbi_on_chain_returns_reference() {
        let labels = [2, 0, 1, 1, 3];
        let g = build_numerator_graph::<f64>(&labels, 4, false).unwrap();
        let e = Matrix::from_fn(5, 4, |t, p| ((t * 7 + p * 3) % 5) as f64 * -0.3);
        let (_, path) = viterbi(&g, &e).unwrap();
        assert_eq!(path, labels);
    }

    #[test]
    fn viterbi_follows_dominant_emissions() {
        let lm = BigramLm::<f64>::uniform(2);
        let g = build_denominator_graph(&lm).unwrap();
        let e = Matrix::from_fn(6, 2, |_, p| if p == 1 { 5.0 } else { -5.0 });
        let (_, path) = viterbi(&g, &e).unwrap();
        assert_eq!(path, vec![1; 6]);
    }

    #[test]
    fn works_in_single_precision() {
        let lm = BigramLm::<f32>::uniform(2);
        let g = build_denominator_graph(&lm).unwrap();
        let e = Matrix::from_rows(&[vec![0.2f32, -0.1], vec![0.0, 0.4]]).unwrap();
        let fb = forward_backward(&g, &e).unwrap();
        assert!((fb.total_logprob - fb.backward_logprob).abs() < 1e-5);
        for s in fb.occupancies.row_sums() {
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
