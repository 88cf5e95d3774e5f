//! Run directories, summaries and report tables.
//!
//! A pipeline run directory contains `config.json`, `checkpoints/step_k.bin`
//! (model), `checkpoints/step_k.state` (full continual-learning state),
//! `checkpoints/step_k.refs.bin` (regularizer targets, when used),
//! `logs/step_k_iters.csv`, `results/eval_matrix.csv`, `results/metrics.csv`
//! and `results/summary.json`. Nothing time-dependent is written, so identical
//! runs give identical directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{MethodSpec, PipelineConfig};
use super::{IterRecord, StepOutcome};
use crate::error::Result;
use crate::eval::{eval_matrix_csv, gap_recovery, mean, metrics_csv, EvalRow, MetricRow};
use crate::net::ModelParams;

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub spec: MethodSpec,
    pub seed: StepOutcome,
    pub steps: Vec<StepOutcome>,
}

#[derive(Debug, Clone)]
pub struct CombOutcome {
    pub model: ModelParams<f64>,
    pub eval: EvalRow,
    pub iters: Vec<IterRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub alpha: f64,
    pub eval: EvalRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub target: String,
    pub eval: EvalRow,
    pub average: f64,
    pub cwer_src: Option<f64>,
    pub pwer_src: Option<f64>,
    pub rel_learning: Option<f64>,
    pub rel_forgetting: Option<f64>,
}

/// Contents of `results/summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub alpha: f64,
    pub config: PipelineConfig,
    pub domains: Vec<String>,
    /// Triangular evaluation, one entry per step (empty for the combined run).
    pub steps: Vec<StepSummary>,
    /// Seed model on every domain.
    pub seed_eval: Option<EvalRow>,
    /// Combined-data model on every domain.
    pub comb_eval: Option<EvalRow>,
}

impl RunSummary {
    pub fn from_pipeline(config: &PipelineConfig, domains: &[String], outcome: &PipelineOutcome) -> Self {
        let last = outcome.steps.last().map_or(&outcome.seed.state, |s| &s.state);
        let steps = last
            .history
            .iter()
            .map(|r| StepSummary {
                step: r.step,
                target: r.target.clone(),
                eval: r.eval.clone(),
                average: r.eval.average(),
                cwer_src: r.cwer_src,
                pwer_src: r.pwer_src,
                rel_learning: r.rel_learning(),
                rel_forgetting: r.rel_forgetting(),
            })
            .collect();
        Self {
            method: outcome.spec.label(),
            alpha: outcome.spec.alpha,
            config: config.clone(),
            domains: domains.to_vec(),
            steps,
            seed_eval: outcome.seed.full_eval.clone(),
            comb_eval: None,
        }
    }

    pub fn from_comb(config: &PipelineConfig, domains: &[String], comb: &CombOutcome) -> Self {
        Self {
            method: "comb".into(),
            alpha: 0.0,
            config: config.clone(),
            domains: domains.to_vec(),
            steps: Vec::new(),
            seed_eval: None,
            comb_eval: Some(comb.eval.clone()),
        }
    }

    pub fn eval_rows(&self) -> Vec<EvalRow> {
        match &self.comb_eval {
            Some(c) => vec![c.clone()],
            None => self.steps.iter().map(|s| s.eval.clone()).collect(),
        }
    }
}

pub fn iter_log_csv(iters: &[IterRecord]) -> String {
    let mut out = String::from("iteration,f_mmi,f_reg,lwf_ce,reg_grad_inf_norm\n");
    for r in iters {
        let ce = r.lwf_ce.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", r.iteration, r.f_mmi, r.f_reg, ce, r.reg_grad_inf_norm)
            .expect("String write");
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow], domains: &[String]) -> String {
    let mut out = format!("method,alpha,{},Avg\n", domains.join(","));
    for r in rows {
        write!(out, "{},{}", r.method, r.alpha).expect("String write");
        for d in domains {
            match r.eval.error(d) {
                Some(e) => write!(out, ",{e:.4}"),
                None => write!(out, ","),
            }
            .expect("String write");
        }
        writeln!(out, ",{:.4}", r.eval.average()).expect("String write");
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn domain_refs(domains: &[String]) -> Vec<&str> {
    domains.iter().map(String::as_str).collect()
}

/// Relative learning/forgetting of one run; gap recovery is filled in only
/// when fine-tuning and combined summaries are supplied.
pub fn aggregate_metrics(runs: &[RunSummary]) -> Vec<MetricRow> {
    let ft = runs.iter().find(|r| r.method == "ft");
    let comb = runs.iter().find_map(|r| r.comb_eval.as_ref());
    let mut rows = Vec::new();
    for run in runs.iter().filter(|r| r.comb_eval.is_none()) {
        for s in run.steps.iter().filter(|s| s.step > 0) {
            let gap = match (ft.and_then(|f| f.steps.iter().find(|x| x.step == s.step)), comb) {
                (Some(ft_step), Some(comb)) => {
                    let comb_errs: Vec<f64> = s
                        .eval
                        .errors
                        .iter()
                        .filter_map(|(d, _)| comb.error(d))
                        .collect();
                    gap_recovery(s.average, mean(&comb_errs), ft_step.average).ok()
                }
                _ => None,
            };
            rows.push(MetricRow {
                step: s.step,
                method: run.method.clone(),
                gap_recovery: gap,
                rel_learning: s.rel_learning,
                rel_forgetting: s.rel_forgetting,
            });
        }
    }
    rows
}

pub fn write_pipeline_run(
    dir: &Path,
    config: &PipelineConfig,
    domains: &[String],
    outcome: &PipelineOutcome,
) -> Result<RunSummary> {
    let (ckpt, logs, results) = (dir.join("checkpoints"), dir.join("logs"), dir.join("results"));
    for d in [&ckpt, &logs, &results] {
        fs::create_dir_all(d)?;
    }
    let mut resolved = config.clone();
    resolved.method = outcome.spec.method;
    resolved.set_alpha(outcome.spec.method, outcome.spec.alpha);
    resolved.denlwf_offset = outcome.spec.denlwf_offset;
    write_json(&dir.join("config.json"), &resolved)?;

    for step in std::iter::once(&outcome.seed).chain(&outcome.steps) {
        let k = step.state.step;
        step.state.model.save(&ckpt.join(format!("step_{k}.bin")))?;
        step.state.save(&ckpt.join(format!("step_{k}.state")))?;
        if let Some(refs) = &step.references {
            refs.save(&ckpt.join(format!("step_{k}.refs.bin")))?;
        }
        fs::write(logs.join(format!("step_{k}_iters.csv")), iter_log_csv(&step.iters))?;
    }

    let summary = RunSummary::from_pipeline(&resolved, domains, outcome);
    fs::write(
        results.join("eval_matrix.csv"),
        eval_matrix_csv(&summary.eval_rows(), &domain_refs(domains)),
    )?;
    fs::write(
        results.join("metrics.csv"),
        metrics_csv(&aggregate_metrics(std::slice::from_ref(&summary))),
    )?;
    write_json(&results.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn write_comb_run(
    dir: &Path,
    config: &PipelineConfig,
    domains: &[String],
    comb: &CombOutcome,
) -> Result<RunSummary> {
    let (ckpt, logs, results) = (dir.join("checkpoints"), dir.join("logs"), dir.join("results"));
    for d in [&ckpt, &logs, &results] {
        fs::create_dir_all(d)?;
    }
    let mut resolved = config.clone();
    resolved.method = super::Method::Comb;
    write_json(&dir.join("config.json"), &resolved)?;
    comb.model.save(&ckpt.join("comb.bin"))?;
    fs::write(logs.join("comb_iters.csv"), iter_log_csv(&comb.iters))?;
    let summary = RunSummary::from_comb(&resolved, domains, comb);
    fs::write(
        results.join("eval_matrix.csv"),
        eval_matrix_csv(&summary.eval_rows(), &domain_refs(domains)),
    )?;
    write_json(&results.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn read_summary(run_dir: &Path) -> Result<RunSummary> {
    let path = run_dir.join("results").join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Markdown tables: evaluation matrices per run and the metric table.
pub fn markdown_report(runs: &[RunSummary], metrics: &[MetricRow]) -> String {
    let mut out = String::from("# Continual-learning report\n\n");
    if let Some(seed) = runs.iter().find_map(|r| r.seed_eval.as_ref()) {
        out.push_str("## Seed and combined models\n\n");
        let domains: Vec<&str> = seed.errors.iter().map(|e| e.0.as_str()).collect();
        writeln!(out, "| Model | {} | Avg |", domains.join(" | ")).expect("String write");
        writeln!(out, "|---|{}---|", "---|".repeat(domains.len())).expect("String write");
        let mut line = |name: &str, row: &EvalRow| {
            let cells: Vec<String> = domains
                .iter()
                .map(|d| row.error(d).map(|e| format!("{e:.1}")).unwrap_or_default())
                .collect();
            writeln!(out, "| {name} | {} | {:.1} |", cells.join(" | "), row.average())
                .expect("String write");
        };
        line("Seed", seed);
        if let Some(comb) = runs.iter().find_map(|r| r.comb_eval.as_ref()) {
            line("Comb", comb);
        }
        out.push('\n');
    }

    let mut by_step: BTreeMap<usize, Vec<(&str, &StepSummary)>> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.comb_eval.is_none()) {
        for s in &r.steps {
            by_step.entry(s.step).or_default().push((r.method.as_str(), s));
        }
    }
    if !by_step.is_empty() {
        out.push_str("## Error rates (%) after each step\n\n");
        for (step, entries) in &by_step {
            let domains: Vec<&str> = entries[0].1.eval.errors.iter().map(|e| e.0.as_str()).collect();
            writeln!(out, "### Step {step} (target {})\n", entries[0].1.target).expect("String write");
            writeln!(out, "| Method | {} | Avg |", domains.join(" | ")).expect("String write");
            writeln!(out, "|---|{}---|", "---|".repeat(domains.len())).expect("String write");
            for (method, s) in entries {
                let cells: Vec<String> = domains
                    .iter()
                    .map(|d| s.eval.error(d).map(|e| format!("{e:.1}")).unwrap_or_default())
                    .collect();
                writeln!(out, "| {method} | {} | {:.1} |", cells.join(" | "), s.average)
                    .expect("String write");
            }
            out.push('\n');
        }
    }

    if !metrics.is_empty() {
        out.push_str("## Gap recovery, relative learning and forgetting (%)\n\n");
        out.push_str("| Step | Method | Gap recovery | Rel. learning | Rel. forgetting |\n|---|---|---|---|---|\n");
        let pct = |v: Option<f64>| v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into());
        for m in metrics {
            writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                m.step,
                m.method,
                pct(m.gap_recovery),
                pct(m.rel_learning),
                pct(m.rel_forgetting)
            )
            .expect("String write");
        }
    }
    out
}
