//! Training objectives: LF-MMI and the three forgetting regularizers.
//!
//! Everything here is an objective to be **maximized**. Output-level terms
//! return their gradient with respect to the emission matrix (to be pushed
//! through [`ModelParams::backward`]); EWC returns a parameter gradient.
//! Objectives are summed over frames of one utterance.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;

use crate::codec::{BinReader, BinWriter};
use crate::error::{Error, GraphRole, Result};
use crate::fb::{forward_backward, EmissionMatrix, OccupancyMatrix};
use crate::graph::Graph;
use crate::matrix::{log_sum_exp, softmax_rows, Matrix};
use crate::net::ModelParams;
use crate::Real;

/// Objective value and its gradient with respect to the emissions.
#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    pub objective: F,
    pub grad: Matrix<F>,
}

/// Anything with a feature matrix and a reference label sequence.
pub trait Example<F> {
    fn features(&self) -> &Matrix<F>;
    fn labels(&self) -> &[usize];
}

fn check_shape<F: Real>(what: &str, m: &Matrix<F>, emissions: &EmissionMatrix<F>) -> Result<()> {
    if m.shape() != emissions.shape() {
        return Err(Error::invalid(format!(
            "{what} is {:?} but emissions are {:?}",
            m.shape(),
            emissions.shape()
        )));
    }
    Ok(())
}

fn check_alpha<F: Real>(alpha: F) -> Result<()> {
    if !(alpha >= F::zero() && alpha.is_finite()) {
        return Err(Error::invalid(format!("regularizer scale must be >= 0, got {alpha}")));
    }
    Ok(())
}

/// `log p(x | num) - log p(x | den)` with gradient `gamma_num - gamma_den`.
pub fn lfmmi<F: Real>(
    num_graph: &Graph<F>,
    den_graph: &Graph<F>,
    emissions: &EmissionMatrix<F>,
) -> Result<LossOutput<F>> {
    let num = forward_backward(num_graph, emissions).map_err(|e| e.with_role(GraphRole::Numerator))?;
    let den =
        forward_backward(den_graph, emissions).map_err(|e| e.with_role(GraphRole::Denominator))?;
    let mut grad = num.occupancies;
    grad.add_scaled(&den.occupancies, -F::one());
    Ok(LossOutput {
        objective: num.total_logprob - den.total_logprob,
        grad,
    })
}

/// Frame-level cross-entropy `sum y_src * log softmax(emissions)`, unscaled.
pub fn lwf_cross_entropy<F: Real>(emissions: &EmissionMatrix<F>, y_src: &Matrix<F>) -> Result<F> {
    lwf(emissions, y_src, F::one()).map(|o| o.objective)
}

/// Frame-level LWF: `alpha * sum_{t,p} y_src[t][p] * log y[t][p]` where `y` is
/// the row-wise softmax of the emissions. Gradient `alpha * (y_src - y)`.
pub fn lwf<F: Real>(
    emissions: &EmissionMatrix<F>,
    y_src: &Matrix<F>,
    alpha: F,
) -> Result<LossOutput<F>> {
    check_alpha(alpha)?;
    check_shape("reference posterior matrix", y_src, emissions)?;
    let tol = F::of(1e-6);
    for (t, s) in y_src.row_sums().into_iter().enumerate() {
        if (s - F::one()).abs() > tol || y_src.row(t).iter().any(|&v| v < F::zero()) {
            return Err(Error::invalid(format!(
                "reference posterior row {t} is not a distribution (sum {s})"
            )));
        }
    }
    let y = softmax_rows(emissions);
    let mut objective = F::zero();
    let mut grad = Matrix::zeros(emissions.rows(), emissions.cols());
    for t in 0..emissions.rows() {
        let (ys, yt) = (y_src.row(t), y.row(t));
        let e = emissions.row(t);
        let lse = log_sum_exp(e);
        let g = grad.row_mut(t);
        for p in 0..ys.len() {
            if ys[p] > F::zero() {
                // log softmax computed from the logits, not from y, to stay finite
                objective += ys[p] * (e[p] - lse);
            }
            g[p] = alpha * (ys[p] - yt[p]);
        }
    }
    Ok(LossOutput {
        objective: alpha * objective,
        grad,
    })
}

/// Sequence-level LWF on denominator occupancies.
///
/// With `include_offset`: `alpha * sum gamma_src * emissions - alpha * log p(x | den)`,
/// gradient `alpha * (gamma_src - gamma_den)`, which vanishes when the live
/// emissions equal the ones that produced `gamma_src`.
/// Without it only the first term is used (gradient `alpha * gamma_src`); that
/// variant is unbalanced and exists as a negative control.
pub fn denlwf<F: Real>(
    den_graph: &Graph<F>,
    emissions: &EmissionMatrix<F>,
    gamma_src: &OccupancyMatrix<F>,
    alpha: F,
    include_offset: bool,
) -> Result<LossOutput<F>> {
    check_alpha(alpha)?;
    check_shape("reference occupancy matrix", gamma_src, emissions)?;
    let cross: F = gamma_src
        .as_slice()
        .iter()
        .zip(emissions.as_slice())
        .map(|(&g, &e)| g * e)
        .sum();
    if !include_offset {
        return Ok(LossOutput {
            objective: alpha * cross,
            grad: gamma_src.scale(alpha),
        });
    }
    let den =
        forward_backward(den_graph, emissions).map_err(|e| e.with_role(GraphRole::Denominator))?;
    let mut grad = gamma_src.clone();
    grad.add_scaled(&den.occupancies, -F::one());
    Ok(LossOutput {
        objective: alpha * (cross - den.total_logprob),
        grad: grad.scale(alpha),
    })
}

/// Parameters and Fisher diagonal saved at the end of one CL step.
#[derive(Debug, Clone, PartialEq)]
pub struct ClSnapshot<F> {
    pub step: usize,
    pub params: Vec<F>,
    pub fisher: Vec<F>,
}

impl<F: Real> ClSnapshot<F> {
    pub fn new(step: usize, params: Vec<F>, fisher: Vec<F>) -> Result<Self> {
        if params.len() != fisher.len() {
            return Err(Error::invalid("snapshot parameter and Fisher lengths differ"));
        }
        if fisher.iter().any(|&f| !f.is_finite() || f < F::zero()) {
            return Err(Error::invalid("Fisher diagonal must be finite and nonnegative"));
        }
        Ok(Self {
            step,
            params,
            fisher,
        })
    }
}

/// EWC: `-alpha * sum_d sum_j F_j^d (theta_j^d - theta_j)^2` and its gradient
/// `-2 alpha * sum_d F_j^d (theta_j - theta_j^d)`.
pub fn ewc_penalty<F: Real>(
    params: &[F],
    snapshots: &[ClSnapshot<F>],
    alpha: F,
) -> Result<(F, Vec<F>)> {
    check_alpha(alpha)?;
    let mut objective = F::zero();
    let mut grad = vec![F::zero(); params.len()];
    let two = F::of(2.0);
    for snap in snapshots {
        if snap.params.len() != params.len() || snap.fisher.len() != params.len() {
            return Err(Error::invalid(format!(
                "snapshot of step {} has {} parameters, model has {}",
                snap.step,
                snap.params.len(),
                params.len()
            )));
        }
        for j in 0..params.len() {
            let diff = params[j] - snap.params[j];
            objective += snap.fisher[j] * diff * diff;
            grad[j] -= two * alpha * snap.fisher[j] * diff;
        }
    }
    Ok((-alpha * objective, grad))
}

/// Proximal step on the EWC penalty with step size `lr`: the minimizer of
/// `|theta - params|^2 / (2 lr) + alpha * sum_d sum_j F_j^d (theta_j - theta_j^d)^2`,
/// computed in closed form and written back into `params`. Unlike an explicit
/// gradient step it stays stable for any `lr * alpha * F`.
pub fn ewc_proximal_step<F: Real>(
    params: &mut [F],
    snapshots: &[ClSnapshot<F>],
    alpha: F,
    lr: F,
) -> Result<()> {
    check_alpha(alpha)?;
    if !lr.is_finite() || lr < F::zero() {
        return Err(Error::invalid("learning rate must be finite and nonnegative"));
    }
    for snap in snapshots {
        if snap.params.len() != params.len() {
            return Err(Error::invalid(format!(
                "snapshot of step {} has {} parameters, model has {}",
                snap.step,
                snap.params.len(),
                params.len()
            )));
        }
    }
    let c = F::of(2.0) * lr * alpha;
    for (j, p) in params.iter_mut().enumerate() {
        let mut weight = F::zero();
        let mut pull = F::zero();
        for snap in snapshots {
            weight += snap.fisher[j];
            pull += snap.fisher[j] * snap.params[j];
        }
        *p = (*p + c * pull) / (F::one() + c * weight);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FisherEstimate<F> {
    /// Median-normalized diagonal (raw if `normalized` is false).
    pub diagonal: Vec<F>,
    /// Median of the raw running mean.
    pub raw_median: F,
    pub normalized: bool,
    pub utterances_used: usize,
}

/// Lower median; exact for odd and even lengths alike.
fn lower_median<F: Real>(values: &[F]) -> F {
    let mut sorted: Vec<F> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("Fisher values are finite"));
    sorted[(sorted.len() - 1) / 2]
}

/// Per-parameter LF-MMI gradient of one utterance.
pub fn utterance_mmi_gradient<F: Real>(
    model: &ModelParams<F>,
    features: &Matrix<F>,
    num_graph: &Graph<F>,
    den_graph: &Graph<F>,
) -> Result<Vec<F>> {
    let (emissions, cache) = model.forward(features)?;
    let out = lfmmi(num_graph, den_graph, &emissions)?;
    model.backward(&cache, &out.grad)
}

/// Diagonal Fisher estimate: running mean over utterances of the squared
/// per-utterance LF-MMI gradient, then divided by its median so the median
/// becomes 1. Normalization is skipped (with a warning) if the median is below
/// `1e-12`. Utterances without a numerator or denominator path are skipped.
pub fn estimate_fisher<F, E, B>(
    model: &ModelParams<F>,
    examples: &[E],
    den_graph: &Graph<F>,
    num_graph_builder: B,
) -> Result<FisherEstimate<F>>
where
    F: Real,
    E: Example<F>,
    B: Fn(&[usize]) -> Result<Graph<F>>,
{
    if examples.is_empty() {
        return Err(Error::invalid("Fisher estimation needs at least one utterance"));
    }
    let mut mean = vec![F::zero(); model.len()];
    let mut used = 0usize;
    for (i, ex) in examples.iter().enumerate() {
        let num = num_graph_builder(ex.labels())?;
        let grad = match utterance_mmi_gradient(model, ex.features(), &num, den_graph) {
            Ok(g) => g,
            Err(Error::NoPath { graph, frame }) => {
                warn!("fisher: utterance {i} skipped, no path in {graph} graph at frame {frame}");
                continue;
            }
            Err(e) => return Err(e),
        };
        used += 1;
        let n = F::of(used as f64);
        for (m, g) in mean.iter_mut().zip(grad) {
            *m += (g * g - *m) / n;
        }
    }
    if used == 0 {
        return Err(Error::invalid("no utterance produced a Fisher contribution"));
    }
    let raw_median = lower_median(&mean);
    let normalized = raw_median >= F::of(1e-12);
    if normalized {
        for v in &mut mean {
            *v /= raw_median;
        }
    } else {
        warn!("fisher: median {raw_median} below 1e-12, leaving the diagonal unnormalized");
    }
    Ok(FisherEstimate {
        diagonal: mean,
        raw_median,
        normalized,
        utterances_used: used,
    })
}

/// Cached per-utterance targets computed from the source model before a step.
/// Entries are `None` for utterances that had to be excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCache<F> {
    pub kind: ReferenceKind,
    pub entries: Vec<Option<Matrix<F>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    /// Softmax of source-model emissions.
    Posteriors,
    /// Denominator occupancies of source-model emissions.
    DenOccupancies,
}

const REFERENCE_MAGIC: &[u8; 8] = b"SQCLREFS";

impl<F: Real> ReferenceCache<F> {
    pub fn get(&self, index: usize) -> Option<&Matrix<F>> {
        self.entries.get(index).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `SQCLREFS`, version, kind (u32), entry count (u64), then per entry a
    /// presence flag (u32) and for present entries `T`, `P` (u32) and the
    /// row-major values as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
        w.header(REFERENCE_MAGIC)?;
        w.u32(match self.kind {
            ReferenceKind::Posteriors => 0,
            ReferenceKind::DenOccupancies => 1,
        })?;
        w.u64(self.entries.len() as u64)?;
        for entry in &self.entries {
            match entry {
                None => w.u32(0)?,
                Some(m) => {
                    w.u32(1)?;
                    w.u32(m.rows() as u32)?;
                    w.u32(m.cols() as u32)?;
                    let flat: Vec<f64> = m.as_slice().iter().map(|v| v.as_f64()).collect();
                    w.f64_slice(&flat)?;
                }
            }
        }
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::new(BufReader::new(File::open(path)?));
        r.header(REFERENCE_MAGIC)?;
        let kind = match r.u32()? {
            0 => ReferenceKind::Posteriors,
            1 => ReferenceKind::DenOccupancies,
            k => return Err(Error::Format(format!("unknown reference kind {k}"))),
        };
        let count = r.u64()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            match r.u32()? {
                0 => entries.push(None),
                1 => {
                    let rows = r.u32()? as usize;
                    let cols = r.u32()? as usize;
                    let vals = r.f64_slice(rows * cols)?.into_iter().map(F::of).collect();
                    entries.push(Some(Matrix::from_vec(rows, cols, vals)?));
                }
                f => return Err(Error::Format(format!("bad presence flag {f}"))),
            }
        }
        r.finish()?;
        Ok(Self { kind, entries })
    }
}

/// Row-wise softmax of the source model's emissions for every utterance.
pub fn compute_reference_posteriors<F: Real, E: Example<F>>(
    source: &ModelParams<F>,
    examples: &[E],
) -> Result<ReferenceCache<F>> {
    let entries = examples
        .iter()
        .map(|ex| source.emissions(ex.features()).map(|e| Some(softmax_rows(&e))))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReferenceCache {
        kind: ReferenceKind::Posteriors,
        entries,
    })
}

/// Denominator occupancies of the source model's emissions. Utterances with
/// no denominator path are logged and left out.
pub fn compute_reference_den_occupancies<F: Real, E: Example<F>>(
    source: &ModelParams<F>,
    den_graph: &Graph<F>,
    examples: &[E],
) -> Result<ReferenceCache<F>> {
    let mut entries = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let emissions = source.emissions(ex.features())?;
        match forward_backward(den_graph, &emissions) {
            Ok(fb) => entries.push(Some(fb.occupancies)),
            Err(Error::NoPath { frame, .. }) => {
                warn!("reference occupancies: utterance {i} has no denominator path (frame {frame})");
                entries.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ReferenceCache {
        kind: ReferenceKind::DenOccupancies,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_denominator_graph, build_numerator_graph, BigramLm};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn emissions() -> Matrix<f64> {
        Matrix::from_rows(&[vec![0.3, -1.2, 0.5], vec![1.0, 0.1, -0.4], vec![-0.2, 0.8, 0.0]])
            .unwrap()
    }

    #[test]
    fn lfmmi_same_graph_cancels() {
        let g = build_denominator_graph(&BigramLm::<f64>::uniform(3)).unwrap();
        let out = lfmmi(&g, &g, &emissions()).unwrap();
        assert_close(out.objective, 0.0, 1e-12);
        assert!(out.grad.max_abs() < 1e-12);
    }

    #[test]
    fn lfmmi_subgraph_is_nonpositive() {
        let lm = BigramLm::<f64>::uniform(3);
        let den = build_denominator_graph(&lm).unwrap();
        // same states, subset of arcs, identical weights
        let arcs: Vec<_> = den.arcs().iter().copied().filter(|a| a.label != 1).collect();
        let finals = den.final_log_weights().to_vec();
        let num = Graph::new(den.num_states(), 0, finals, arcs, 3);
        // state 2 (label 1) is unreachable without label-1 arcs
        assert!(num.is_err());
        let num = build_numerator_graph::<f64>(&[0, 2], 3, true).unwrap();
        let out = lfmmi(&num, &den, &emissions()).unwrap();
        // not a subgraph in weights, but the full-sum still has more mass
        assert!(out.objective.is_finite());
        let sub_arcs: Vec<_> = den
            .arcs()
            .iter()
            .copied()
            .filter(|a| !(a.source == 1 && a.dest == 3))
            .collect();
        let sub = Graph::new(4, 0, den.final_log_weights().to_vec(), sub_arcs, 3).unwrap();
        let out = lfmmi(&sub, &den, &emissions()).unwrap();
        assert!(out.objective <= 0.0);
        for s in out.grad.row_sums() {
            assert_close(s, 0.0, 1e-9);
        }
    }

    #[test]
    fn lfmmi_tags_failing_graph() {
        let den = build_denominator_graph(&BigramLm::<f64>::uniform(3)).unwrap();
        let num = build_numerator_graph::<f64>(&[0, 1, 2, 0], 3, true).unwrap();
        match lfmmi(&num, &den, &emissions()) {
            Err(Error::NoPath { graph, .. }) => assert_eq!(graph, GraphRole::Numerator),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lwf_hand_example() {
        let e = Matrix::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap();
        let y_src = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let out = lwf(&e, &y_src, 1.0).unwrap();
        assert_close(out.objective, 0.5 * 0.25f64.ln() + 0.5 * 0.75f64.ln(), 1e-15);
        assert_close(out.grad[(0, 0)], 0.25, 1e-15);
        assert_close(out.grad[(0, 1)], -0.25, 1e-15);
    }

    #[test]
    fn lwf_matched_distributions() {
        let e = emissions();
        let y = softmax_rows(&e);
        let alpha = 0.7;
        let out = lwf(&e, &y, alpha).unwrap();
        assert!(out.grad.max_abs() < 1e-15);
        let entropy: f64 = y
            .iter_rows()
            .map(|r| -r.iter().map(|p| p * p.ln()).sum::<f64>())
            .sum();
        assert_close(out.objective, -alpha * entropy, 1e-12);

        let zero = lwf(&e, &y, 0.0).unwrap();
        assert_eq!(zero.objective, 0.0);
        assert_eq!(zero.grad.max_abs(), 0.0);
    }

    #[test]
    fn lwf_rejects_unnormalized_reference() {
        let e = emissions();
        let bad = Matrix::filled(3, 3, 0.4);
        assert!(matches!(lwf(&e, &bad, 1.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn denlwf_zero_at_source() {
        let den = build_denominator_graph(&BigramLm::<f64>::uniform(3)).unwrap();
        let e = emissions();
        let (_, gamma_src) = crate::fb::logprob_and_occupancies(&den, &e).unwrap();
        let out = denlwf(&den, &e, &gamma_src, 0.6, true).unwrap();
        assert!(out.grad.max_abs() < 1e-9);
        let zero = denlwf(&den, &e, &gamma_src, 0.0, true).unwrap();
        assert_eq!(zero.objective, 0.0);
        assert_eq!(zero.grad.max_abs(), 0.0);
    }

    #[test]
    fn denlwf_without_offset_is_unbalanced() {
        let den = build_denominator_graph(&BigramLm::<f64>::uniform(3)).unwrap();
        let e = emissions();
        let (_, gamma_src) = crate::fb::logprob_and_occupancies(&den, &e).unwrap();
        let alpha = 0.6;
        let out = denlwf(&den, &e.scale(0.5), &gamma_src, alpha, false).unwrap();
        for s in out.grad.row_sums() {
            assert_close(s, alpha, 1e-9);
        }
        let balanced = denlwf(&den, &e.scale(0.5), &gamma_src, alpha, true).unwrap();
        for s in balanced.grad.row_sums() {
            assert_close(s, 0.0, 1e-9);
        }
    }

    #[test]
    fn ewc_cases() {
        let theta = vec![0.5, -1.0, 2.0];
        let snap = ClSnapshot::new(0, theta.clone(), vec![1.0, 3.0, 0.5]).unwrap();
        let (obj, grad) = ewc_penalty(&theta, std::slice::from_ref(&snap), 300.0).unwrap();
        assert_eq!(obj, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));

        let ones = ClSnapshot::new(0, vec![0.0; 3], vec![1.0; 3]).unwrap();
        let v = [0.2, -0.1, 0.3];
        let alpha = 2.0;
        let (obj, grad) = ewc_penalty(&v, &[ones], alpha).unwrap();
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        assert_close(obj, -alpha * norm2, 1e-15);
        for (g, x) in grad.iter().zip(v) {
            assert_close(*g, -2.0 * alpha * x, 1e-15);
        }

        let short = ClSnapshot::new(0, vec![0.0; 2], vec![1.0; 2]).unwrap();
        assert!(ewc_penalty(&v, &[short], 1.0).is_err());
        assert!(ClSnapshot::new(0, vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn lower_median_is_exact() {
        assert_eq!(lower_median(&[3.0, 1.0, 2.0, 10.0]), 2.0);
        assert_eq!(lower_median(&[5.0]), 5.0);
    }

    #[test]
    fn reference_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refs.bin");
        let cache = ReferenceCache {
            kind: ReferenceKind::DenOccupancies,
            entries: vec![Some(emissions()), None, Some(Matrix::filled(1, 3, 1.0 / 3.0))],
        };
        cache.save(&path).unwrap();
        let back = ReferenceCache::<f64>::load(&path).unwrap();
        assert_eq!(back, cache);
    }

    #[test]
    fn ewc_prox_satisfies_stationarity() {
        let snaps = vec![
            ClSnapshot::new(0, vec![1.0, -2.0], vec![0.5, 40.0]).unwrap(),
            ClSnapshot::new(1, vec![0.0, 3.0], vec![2.0, 0.0]).unwrap(),
        ];
        let start = [0.3f64, 0.7];
        let (alpha, lr) = (300.0f64, 2e-3f64);
        let mut theta = start.to_vec();
        ewc_proximal_step(&mut theta, &snaps, alpha, lr).unwrap();
        // (theta - start) / lr equals the penalty gradient at the new point
        let (_, grad) = ewc_penalty(&theta, &snaps, alpha).unwrap();
        for j in 0..2 {
            let lhs = (theta[j] - start[j]) / lr;
            assert!((lhs - grad[j]).abs() < 1e-9 * (1.0 + grad[j].abs()), "{lhs} vs {}", grad[j]);
        }
        // stiff coordinate lands near its anchor instead of overshooting
        assert!((theta[1] + 2.0).abs() < 0.1);
    }

    #[test]
    fn ewc_prox_matches_explicit_step_for_small_rates() {
        let snaps = vec![ClSnapshot::new(0, vec![1.0], vec![3.0]).unwrap()];
        let lr = 1e-7f64;
        let mut theta = vec![0.0f64];
        ewc_proximal_step(&mut theta, &snaps, 2.0, lr).unwrap();
        let (_, grad) = ewc_penalty(&[0.0], &snaps, 2.0).unwrap();
        assert!((theta[0] - lr * grad[0]).abs() < 1e-5 * (lr * grad[0]).abs());
    }
}
