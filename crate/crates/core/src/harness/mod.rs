//! Continual-learning experiment driver: seed training, expansion steps per
//! method, the combined-data baseline and scale sweeps.

mod config;
mod output;
mod state;

pub use config::{derive_seed, Method, MethodSpec, PipelineConfig};
pub use output::{
    aggregate_metrics, iter_log_csv, markdown_report, read_summary, sweep_csv, write_comb_run,
    write_pipeline_run, CombOutcome, PipelineOutcome, RunSummary, StepSummary, SweepRow,
};
pub use state::{ClState, StepRecord};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{decode_and_score, EvalRow};
use crate::graph::{
    build_denominator_graph, build_numerator_graph, estimate_bigram_lm, estimate_self_loop_prob,
    with_self_loops, BigramLm, Graph,
};
use crate::losses::{
    compute_reference_den_occupancies, compute_reference_posteriors, denlwf, estimate_fisher,
    ewc_penalty, ewc_proximal_step, lfmmi, lwf, lwf_cross_entropy, ClSnapshot, ReferenceCache,
};
use crate::net::{sgd_step, ModelParams};
use crate::synth::{Dataset, Utterance};

/// Per-minibatch training log entry. Objective values are summed over the
/// utterances of the minibatch and measured before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub f_mmi: f64,
    pub f_reg: f64,
    /// Frame-level LWF cross-entropy against the source posteriors, logged for
    /// LWF and DenLWF runs only (never back-propagated for DenLWF).
    pub lwf_ce: Option<f64>,
    /// Largest absolute entry of the regularizer gradient (emission-level for
    /// LWF/DenLWF, parameter-level for EWC).
    pub reg_grad_inf_norm: f64,
}

/// Result of one training step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: ClState,
    pub method: String,
    pub iters: Vec<IterRecord>,
    /// Targets the regularizer was trained against, if any.
    pub references: Option<ReferenceCache<f64>>,
    /// Seed step only: errors on every domain.
    pub full_eval: Option<EvalRow>,
}

enum Regularizer<'a> {
    None,
    Ewc {
        snapshots: &'a [ClSnapshot<f64>],
        alpha: f64,
    },
    Lwf {
        refs: &'a ReferenceCache<f64>,
        alpha: f64,
    },
    DenLwf {
        refs: &'a ReferenceCache<f64>,
        alpha: f64,
        offset: bool,
    },
}

struct TrainJob<'a> {
    data: &'a [Utterance],
    num_graphs: &'a [Graph<f64>],
    den: &'a Graph<f64>,
    reg: Regularizer<'a>,
    /// Reference posteriors used only for the cross-entropy log column.
    ce_refs: Option<&'a ReferenceCache<f64>>,
    epochs: usize,
    learning_rate: f64,
    /// Distinguishes shuffling streams of different steps.
    stream: u64,
}

struct UttContribution {
    f_mmi: f64,
    f_reg: f64,
    lwf_ce: Option<f64>,
    reg_inf: f64,
    grad: Vec<f64>,
}

/// Shared experiment context: datasets, the decoding graph and the worker
/// pool. The first domain is the seed domain; later domains are expansion
/// targets in order.
pub struct Lab {
    config: PipelineConfig,
    names: Vec<String>,
    train: Vec<Vec<Utterance>>,
    test: Vec<Vec<Utterance>>,
    decode_graph: Graph<f64>,
    pool: rayon::ThreadPool,
}

impl Lab {
    pub fn new(config: PipelineConfig, domains: &[Dataset]) -> Result<Self> {
        config.validate()?;
        if domains.is_empty() {
            return Err(Error::invalid("at least one domain is required"));
        }
        let arch = config.architecture();
        for d in domains {
            if d.num_labels != arch.num_labels || d.feature_dim != arch.feature_dim {
                return Err(Error::invalid(format!(
                    "domain {} has {} labels and dimension {}, expected {} and {}",
                    d.name, d.num_labels, d.feature_dim, arch.num_labels, arch.feature_dim
                )));
            }
        }
        let train: Vec<Vec<Utterance>> = domains.iter().map(Dataset::train).collect();
        let all_train: Vec<&Utterance> = train.iter().flatten().collect();
        let decode_graph = build_denominator_graph(&frame_bigram(
            &all_train,
            arch.num_labels,
            config.decode_lm_smoothing,
            config.self_loop_prob,
        )?)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        Ok(Self {
            names: domains.iter().map(|d| d.name.clone()).collect(),
            train,
            test: domains.iter().map(Dataset::test).collect(),
            config,
            decode_graph,
            pool,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn domain_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_domains(&self) -> usize {
        self.names.len()
    }

    pub fn decode_graph(&self) -> &Graph<f64> {
        &self.decode_graph
    }

    fn den_lm_for(&self, data: &[Utterance]) -> Result<BigramLm<f64>> {
        let refs: Vec<&Utterance> = data.iter().collect();
        frame_bigram(
            &refs,
            self.config.architecture().num_labels,
            self.config.den_lm_smoothing,
            self.config.self_loop_prob,
        )
    }

    fn numerator_graphs(&self, data: &[Utterance]) -> Result<Vec<Graph<f64>>> {
        let p = self.config.architecture().num_labels;
        data.iter().map(|u| build_numerator_graph(&u.labels, p, true)).collect()
    }

    /// Error (%) of `model` on one domain's test set.
    pub fn evaluate_domain(&self, model: &ModelParams<f64>, domain: usize) -> Result<f64> {
        self.pool
            .install(|| decode_and_score(model, &self.decode_graph, &self.test[domain]))
            .map(|c| c.rate())
    }

    pub fn evaluate(&self, model: &ModelParams<f64>, domains: &[usize], step: usize, method: &str) -> Result<EvalRow> {
        let errors = domains
            .iter()
            .map(|&d| Ok((self.names[d].clone(), self.evaluate_domain(model, d)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalRow {
            step,
            method: method.to_string(),
            errors,
        })
    }

    fn initial_model(&self) -> Result<ModelParams<f64>> {
        ModelParams::xavier(
            self.config.architecture(),
            derive_seed(self.config.master_seed, "init", 0, 0),
        )
    }

    fn utterance_contribution(
        &self,
        model: &ModelParams<f64>,
        job: &TrainJob<'_>,
        index: usize,
    ) -> Result<Option<UttContribution>> {
        let utt = &job.data[index];
        let (emissions, cache) = model.forward(&utt.features)?;
        if !emissions.all_finite() {
            return Err(Error::Numerical(format!("non-finite emissions for {}", utt.id)));
        }
        let mmi = match lfmmi(&job.num_graphs[index], job.den, &emissions) {
            Ok(o) => o,
            Err(Error::NoPath { graph, frame }) => {
                warn!("{}: no path in {graph} graph at frame {frame}, dropped", utt.id);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let mut grad = mmi.grad;
        let mut f_reg = 0.0;
        let mut reg_inf = 0.0;
        let reg_out = match &job.reg {
            Regularizer::Lwf { refs, alpha } => match refs.get(index) {
                Some(y_src) => Some(lwf(&emissions, y_src, *alpha)?),
                None => None,
            },
            Regularizer::DenLwf { refs, alpha, offset } => match refs.get(index) {
                Some(g_src) => match denlwf(job.den, &emissions, g_src, *alpha, *offset) {
                    Ok(o) => Some(o),
                    Err(Error::NoPath { .. }) => None,
                    Err(e) => return Err(e),
                },
                None => None,
            },
            Regularizer::None | Regularizer::Ewc { .. } => None,
        };
        if let Some(out) = reg_out {
            f_reg = out.objective;
            reg_inf = out.grad.max_abs();
            grad.add_scaled(&out.grad, 1.0);
        }
        let lwf_ce = match job.ce_refs.and_then(|r| r.get(index)) {
            Some(y_src) => Some(lwf_cross_entropy(&emissions, y_src)?),
            None => None,
        };
        let grad = model.backward(&cache, &grad)?;
        Ok(Some(UttContribution {
            f_mmi: mmi.objective,
            f_reg,
            lwf_ce,
            reg_inf,
            grad,
        }))
    }

    /// Minibatch SGD with momentum. Utterance contributions may be computed in
    /// parallel but are always summed in utterance order.
    fn train(&self, model: &mut ModelParams<f64>, job: &TrainJob<'_>) -> Result<Vec<IterRecord>> {
        let n = job.data.len();
        let batch = self.config.minibatch_size;
        let batches_per_epoch = n.div_ceil(batch);
        let total_iters = (batches_per_epoch * job.epochs).max(1);
        let mut velocity = vec![0.0; model.len()];
        let mut log = Vec::with_capacity(total_iters);
        let mut iteration = 0usize;
        for epoch in 0..job.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.config.master_seed,
                "shuffle",
                job.stream,
                epoch as u64,
            ));
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let contributions: Vec<Result<Option<UttContribution>>> = self.pool.install(|| {
                    chunk
                        .par_iter()
                        .map(|&i| self.utterance_contribution(model, job, i))
                        .collect()
                });
                let mut grad = vec![0.0; model.len()];
                let mut rec = IterRecord {
                    iteration,
                    f_mmi: 0.0,
                    f_reg: 0.0,
                    lwf_ce: None,
                    reg_grad_inf_norm: 0.0,
                };
                for c in contributions {
                    let c = c.map_err(|e| match e {
                        Error::Numerical(m) => Error::Numerical(format!("iteration {iteration}: {m}")),
                        e => e,
                    })?;
                    let Some(c) = c else { continue };
                    rec.f_mmi += c.f_mmi;
                    rec.f_reg += c.f_reg;
                    rec.reg_grad_inf_norm = rec.reg_grad_inf_norm.max(c.reg_inf);
                    if let Some(ce) = c.lwf_ce {
                        *rec.lwf_ce.get_or_insert(0.0) += ce;
                    }
                    for (g, v) in grad.iter_mut().zip(&c.grad) {
                        *g += v;
                    }
                }
                if let Regularizer::Ewc { snapshots, alpha } = &job.reg {
                    // logged only: the penalty enters through the proximal step below
                    let (obj, ewc_grad) = ewc_penalty(model.values(), snapshots, *alpha)?;
                    rec.f_reg += obj;
                    rec.reg_grad_inf_norm = ewc_grad.iter().fold(0.0, |m, g| m.max(g.abs()));
                }
                if !(rec.f_mmi.is_finite() && rec.f_reg.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "objective diverged at iteration {iteration} (F_MMI {}, F_reg {})",
                        rec.f_mmi, rec.f_reg
                    )));
                }
                let progress = iteration as f64 / total_iters as f64;
                let lr = job.learning_rate * (1.0 - (1.0 - self.config.lr_final_fraction) * progress);
                sgd_step(model.values_mut(), &grad, lr, self.config.momentum, &mut velocity)
                    .map_err(|e| Error::Numerical(format!("iteration {iteration}: {e}")))?;
                if let Regularizer::Ewc { snapshots, alpha } = &job.reg {
                    if *alpha > 0.0 {
                        ewc_proximal_step(model.values_mut(), snapshots, *alpha, lr)?;
                    }
                }
                log.push(rec);
                iteration += 1;
            }
        }
        Ok(log)
    }

    /// Train the seed model on the first domain with plain LF-MMI.
    pub fn train_seed(&self) -> Result<StepOutcome> {
        let data = &self.train[0];
        if data.is_empty() {
            return Err(Error::invalid("seed domain has no training utterances"));
        }
        let mut model = self.initial_model()?;
        let den_lm = self.den_lm_for(data)?;
        let den = build_denominator_graph(&den_lm)?;
        let num_graphs = self.numerator_graphs(data)?;
        let job = TrainJob {
            data,
            num_graphs: &num_graphs,
            den: &den,
            reg: Regularizer::None,
            ce_refs: None,
            epochs: self.config.seed_epochs,
            learning_rate: self.config.seed_learning_rate,
            stream: 0,
        };
        let iters = self.train(&mut model, &job)?;
        let all: Vec<usize> = (0..self.num_domains()).collect();
        let full_eval = self.evaluate(&model, &all, 0, "seed")?;
        let eval = EvalRow {
            step: 0,
            method: "seed".into(),
            errors: vec![full_eval.errors[0].clone()],
        };
        info!("seed model: {:?}", full_eval.errors);
        let record = StepRecord {
            step: 0,
            target: self.names[0].clone(),
            eval,
            cwer_src: None,
            pwer_src: None,
        };
        Ok(StepOutcome {
            state: ClState {
                model,
                step: 0,
                seen: vec![0],
                snapshots: Vec::new(),
                den_lm: den_lm.clone(),
                seed_den_lm: den_lm,
                history: vec![record],
            },
            method: "seed".into(),
            iters,
            references: None,
            full_eval: Some(full_eval),
        })
    }

    /// One expansion step from `state` onto domain `target`.
    pub fn expand_step(&self, state: &ClState, target: usize, spec: MethodSpec) -> Result<StepOutcome> {
        if target >= self.num_domains() {
            return Err(Error::invalid(format!("no domain with index {target}")));
        }
        if state.seen.contains(&target) {
            return Err(Error::invalid(format!("domain {} was already trained", self.names[target])));
        }
        let source_domain = *state.seen.last().expect("state has a trained model");
        let data = &self.train[target];
        if data.is_empty() {
            return Err(Error::invalid(format!("domain {} has no training data", self.names[target])));
        }
        let step = state.step + 1;
        let source = &state.model;

        let den_lm = if self.config.freeze_den_graph {
            state.seed_den_lm.clone()
        } else {
            self.den_lm_for(data)?
        };
        let den = build_denominator_graph(&den_lm)?;
        let num_graphs = self.numerator_graphs(data)?;

        let mut snapshots = state.snapshots.clone();
        let mut references = None;
        let mut ce_refs = None;
        match spec.method {
            Method::Ft => {}
            Method::Ewc => {
                if snapshots.len() < state.seen.len() {
                    let source_den = build_denominator_graph(&state.den_lm)?;
                    let p = source.architecture().num_labels;
                    let fisher = self.pool.install(|| {
                        estimate_fisher(source, &self.train[source_domain], &source_den, |labels| {
                            build_numerator_graph(labels, p, true)
                        })
                    })?;
                    snapshots.push(ClSnapshot::new(state.step, source.values().to_vec(), fisher.diagonal)?);
                }
            }
            Method::Lwf => {
                let y_src = compute_reference_posteriors(source, data)?;
                references = Some(y_src.clone());
                ce_refs = Some(y_src);
            }
            Method::Denlwf => {
                let gamma_graph = if self.config.gamma_src_previous_graph {
                    build_denominator_graph(&state.den_lm)?
                } else {
                    den.clone()
                };
                references = Some(compute_reference_den_occupancies(source, &gamma_graph, data)?);
                ce_refs = Some(compute_reference_posteriors(source, data)?);
            }
            Method::Comb => {
                return Err(Error::invalid("the combined baseline is not a continual-learning step"));
            }
        }

        let cwer_src = self.evaluate_domain(source, target)?;
        let prev = state.history.last().expect("state has history");
        let pwer_src = prev.eval.average();

        let reg = match spec.method {
            Method::Ewc => Regularizer::Ewc {
                snapshots: &snapshots,
                alpha: spec.alpha,
            },
            Method::Lwf => Regularizer::Lwf {
                refs: references.as_ref().expect("computed above"),
                alpha: spec.alpha,
            },
            Method::Denlwf => Regularizer::DenLwf {
                refs: references.as_ref().expect("computed above"),
                alpha: spec.alpha,
                offset: spec.denlwf_offset,
            },
            _ => Regularizer::None,
        };
        let mut model = source.clone();
        let job = TrainJob {
            data,
            num_graphs: &num_graphs,
            den: &den,
            reg,
            ce_refs: ce_refs.as_ref(),
            epochs: self.config.epochs_per_step,
            learning_rate: self.config.learning_rate,
            stream: step as u64 * 1000 + target as u64,
        };
        let iters = self.train(&mut model, &job)?;

        let mut seen = state.seen.clone();
        seen.push(target);
        let label = spec.label();
        let eval = self.evaluate(&model, &seen, step, &label)?;
        info!("{label} step {step} -> {}: avg {:.2}", self.names[target], eval.average());
        let mut history = state.history.clone();
        history.push(StepRecord {
            step,
            target: self.names[target].clone(),
            eval,
            cwer_src: Some(cwer_src),
            pwer_src: Some(pwer_src),
        });
        Ok(StepOutcome {
            state: ClState {
                model,
                step,
                seen,
                snapshots,
                den_lm,
                seed_den_lm: state.seed_den_lm.clone(),
                history,
            },
            method: label,
            iters,
            references,
            full_eval: None,
        })
    }

    /// Every remaining domain in order, starting from a seed outcome.
    pub fn run_steps(&self, seed: &StepOutcome, spec: MethodSpec) -> Result<Vec<StepOutcome>> {
        let mut steps: Vec<StepOutcome> = Vec::with_capacity(self.num_domains() - 1);
        for target in 1..self.num_domains() {
            let state = steps.last().map_or(&seed.state, |s| &s.state);
            let next = self.expand_step(state, target, spec)?;
            steps.push(next);
        }
        Ok(steps)
    }

    /// Seed training followed by every expansion step for one method.
    pub fn run_pipeline(&self, spec: MethodSpec) -> Result<PipelineOutcome> {
        let seed = self.train_seed()?;
        let steps = self.run_steps(&seed, spec)?;
        Ok(PipelineOutcome { spec, seed, steps })
    }

    /// One model trained from scratch on the training data of all domains.
    pub fn train_combined(&self) -> Result<CombOutcome> {
        let data: Vec<Utterance> = self.train.iter().flatten().cloned().collect();
        let mut model = self.initial_model()?;
        let den_lm = self.den_lm_for(&data)?;
        let den = build_denominator_graph(&den_lm)?;
        let num_graphs = self.numerator_graphs(&data)?;
        let job = TrainJob {
            data: &data,
            num_graphs: &num_graphs,
            den: &den,
            reg: Regularizer::None,
            ce_refs: None,
            epochs: self.config.comb_epochs,
            learning_rate: self.config.seed_learning_rate,
            stream: u64::MAX,
        };
        let iters = self.train(&mut model, &job)?;
        let all: Vec<usize> = (0..self.num_domains()).collect();
        let eval = self.evaluate(&model, &all, 0, "comb")?;
        info!("comb model: {:?}", eval.errors);
        Ok(CombOutcome { model, eval, iters })
    }

    /// Re-run one expansion step from `source` for every (method, scale).
    pub fn sweep_alpha(
        &self,
        source: &ClState,
        target: usize,
        alphas: &[f64],
        methods: &[Method],
    ) -> Result<Vec<SweepRow>> {
        let mut rows = Vec::with_capacity(alphas.len() * methods.len());
        for &method in methods {
            for &alpha in alphas {
                let spec = MethodSpec {
                    method,
                    alpha,
                    denlwf_offset: self.config.denlwf_offset,
                };
                let out = self.expand_step(source, target, spec)?;
                let record = out.state.history.last().expect("step recorded").clone();
                rows.push(SweepRow {
                    method: spec.label(),
                    alpha,
                    eval: record.eval,
                });
            }
        }
        Ok(rows)
    }
}

/// Label bigram of the transcripts with the frame self-loop folded in.
fn frame_bigram(
    data: &[&Utterance],
    num_labels: usize,
    smoothing: f64,
    self_loop: Option<f64>,
) -> Result<BigramLm<f64>> {
    let transcripts: Vec<Vec<usize>> = data.iter().map(|u| u.labels.clone()).collect();
    let lm = estimate_bigram_lm(&transcripts, num_labels, smoothing)?;
    let s = match self_loop {
        Some(s) => s,
        None => estimate_self_loop_prob(data.iter().map(|u| (u.features.rows(), u.labels.len())))?,
    };
    with_self_loops(&lm, s)
}
