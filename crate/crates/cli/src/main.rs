//! `seqcl` command-line driver.
//!
//! Exit codes: 0 on success, 1 on a usage or configuration error, 2 on a
//! runtime failure (missing files, numerical divergence, ...).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;

use seqcl::harness::{
    aggregate_metrics, markdown_report, read_summary, sweep_csv, write_comb_run, write_pipeline_run,
    ClState, Lab, Method, MethodSpec, PipelineConfig, PipelineOutcome, RunSummary, StepOutcome,
};
use seqcl::synth::{default_pipeline_specs, generate_domain, read_domains, write_dataset};

#[derive(Parser)]
#[command(name = "seqcl", version, about = "Sequence-level continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the five synthetic domains.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        master_seed: u64,
    },
    /// Train the seed model on the first domain.
    TrainSeed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run one expansion step from a saved state.
    Expand {
        #[arg(long)]
        data: PathBuf,
        /// A `checkpoints/step_k.state` file.
        #[arg(long)]
        state: PathBuf,
        /// Target domain name.
        #[arg(long)]
        target: String,
        #[arg(long)]
        method: Method,
        /// Regularizer scale; defaults to the configured value for the method.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Seed training plus every expansion step, or the combined baseline.
    RunPipeline {
        #[arg(long)]
        data: PathBuf,
        /// ft, ewc, lwf, denlwf, comb or all.
        #[arg(long)]
        method: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Repeat one expansion step over a list of regularizer scales.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "lwf,denlwf")]
        methods: Vec<Method>,
        /// Start from this saved state instead of training a seed model.
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long, default_value = "E")]
        target: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Render Markdown tables and plot-ready CSV files from run directories.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Output directory; defaults to `<first run>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Flat TOML file of configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set epochs_per_step=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] seqcl::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn require_exists(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        })
    }
}

/// Defaults, then the config file, then `--set` and dedicated flags.
fn resolve_config(common: &CommonArgs) -> CliResult<PipelineConfig> {
    let mut table = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_at(path))?;
            text.parse::<toml::Table>()
                .map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for item in &common.overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        table.insert(key.trim().to_string(), value);
    }
    if let Some(seed) = common.master_seed {
        let seed = i64::try_from(seed).map_err(|_| usage("--master-seed is too large"))?;
        table.insert("master_seed".into(), toml::Value::Integer(seed));
    }
    if let Some(threads) = common.threads {
        table.insert("threads".into(), toml::Value::Integer(threads as i64));
    }
    let config: PipelineConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| usage(format!("invalid configuration: {}", e.message())))?;
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn open_lab(data: &Path, config: PipelineConfig) -> CliResult<Lab> {
    require_exists(data)?;
    let domains = read_domains(data)?;
    Ok(Lab::new(config, &domains)?)
}

fn domain_index(lab: &Lab, name: &str) -> CliResult<usize> {
    lab.domain_names()
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| usage(format!("unknown domain {name:?}")))
}

fn run_method(lab: &Lab, config: &PipelineConfig, method: Method, out: &Path) -> CliResult<()> {
    let domains = lab.domain_names().to_vec();
    if method == Method::Comb {
        let comb = lab.train_combined()?;
        write_comb_run(out, config, &domains, &comb)?;
    } else {
        let mut config = config.clone();
        config.method = method;
        let outcome = lab.run_pipeline(MethodSpec::from_config(&config))?;
        write_pipeline_run(out, &config, &domains, &outcome)?;
    }
    info!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { out, master_seed } => {
            for spec in default_pipeline_specs(master_seed) {
                let dataset = generate_domain(&spec)?;
                write_dataset(&dataset, &out.join(&spec.name))?;
            }
            info!("wrote {}", out.display());
        }
        Command::TrainSeed { data, out, common } => {
            let config = resolve_config(&common)?;
            let lab = open_lab(&data, config.clone())?;
            let seed = lab.train_seed()?;
            let outcome = PipelineOutcome {
                spec: MethodSpec::from_config(&config),
                seed,
                steps: Vec::new(),
            };
            write_pipeline_run(&out, &config, lab.domain_names(), &outcome)?;
        }
        Command::Expand {
            data,
            state,
            target,
            method,
            alpha,
            out,
            common,
        } => {
            if method == Method::Comb {
                return Err(usage("comb is not an expansion method"));
            }
            let mut config = resolve_config(&common)?;
            config.method = method;
            if let Some(a) = alpha {
                config.set_alpha(method, a);
            }
            config.validate().map_err(|e| usage(e.to_string()))?;
            require_exists(&state)?;
            let lab = open_lab(&data, config.clone())?;
            let target = domain_index(&lab, &target)?;
            let source = ClState::load(&state)?;
            let step = lab.expand_step(&source, target, MethodSpec::from_config(&config))?;
            // The source state stands in for the seed entry of the run directory.
            let seed = StepOutcome {
                state: source,
                method: "source".into(),
                iters: Vec::new(),
                references: None,
                full_eval: None,
            };
            let outcome = PipelineOutcome {
                spec: MethodSpec::from_config(&config),
                seed,
                steps: vec![step],
            };
            write_pipeline_run(&out, &config, lab.domain_names(), &outcome)?;
        }
        Command::RunPipeline {
            data,
            method,
            out,
            common,
        } => {
            let config = resolve_config(&common)?;
            let lab = open_lab(&data, config.clone())?;
            if method == "all" {
                for m in Method::ALL {
                    run_method(&lab, &config, m, &out.join(m.name()))?;
                }
            } else {
                let m: Method = method.parse().map_err(|e: seqcl::Error| usage(e.to_string()))?;
                run_method(&lab, &config, m, &out)?;
            }
        }
        Command::Sweep {
            data,
            alphas,
            methods,
            state,
            target,
            out,
            common,
        } => {
            if let Some(m) = methods.iter().find(|m| matches!(m, Method::Comb)) {
                return Err(usage(format!("{m} cannot be swept")));
            }
            let config = resolve_config(&common)?;
            let lab = open_lab(&data, config.clone())?;
            let target = domain_index(&lab, &target)?;
            let source = match &state {
                Some(path) => {
                    require_exists(path)?;
                    ClState::load(path)?
                }
                None => lab.train_seed()?.state,
            };
            let rows = lab.sweep_alpha(&source, target, &alphas, &methods)?;
            fs::create_dir_all(&out).map_err(io_at(&out))?;
            let mut resolved = serde_json::to_string_pretty(&config).map_err(seqcl::Error::from)?;
            resolved.push('\n');
            fs::write(out.join("config.json"), resolved).map_err(io_at(&out))?;
            let domains = rows.first().map(|r| r.eval.errors.iter().map(|e| e.0.clone()).collect::<Vec<_>>());
            let csv = sweep_csv(&rows, &domains.unwrap_or_default());
            fs::write(out.join("sweep.csv"), &csv).map_err(io_at(&out))?;
            let mut json = serde_json::to_string_pretty(&rows).map_err(seqcl::Error::from)?;
            json.push('\n');
            fs::write(out.join("sweep.json"), json).map_err(io_at(&out))?;
            print!("{csv}");
        }
        Command::Report { runs, out } => {
            let summaries = collect_summaries(&runs)?;
            let metrics = aggregate_metrics(&summaries);
            let out = out.unwrap_or_else(|| runs[0].join("report"));
            fs::create_dir_all(&out).map_err(io_at(&out))?;
            let md = markdown_report(&summaries, &metrics);
            fs::write(out.join("report.md"), &md).map_err(io_at(&out))?;
            fs::write(out.join("metrics.csv"), seqcl::eval::metrics_csv(&metrics)).map_err(io_at(&out))?;
            fs::write(out.join("lwf_ce.csv"), lwf_ce_csv(&runs)?).map_err(io_at(&out))?;
            for run in &runs {
                let sweep = run.join("sweep.csv");
                if sweep.exists() {
                    fs::copy(&sweep, out.join("sweep.csv")).map_err(io_at(&sweep))?;
                }
            }
            print!("{md}");
        }
    }
    Ok(())
}

/// A run directory, or a directory whose subdirectories are run directories
/// (as written by `run-pipeline --method all`).
fn run_dirs(path: &Path) -> CliResult<Vec<PathBuf>> {
    require_exists(path)?;
    if path.join("results").join("summary.json").exists() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_at(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("results").join("summary.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        let missing = path.join("results").join("summary.json");
        return Err(CliError::Io {
            path: missing,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no run summary found"),
        });
    }
    Ok(dirs)
}

fn collect_summaries(runs: &[PathBuf]) -> CliResult<Vec<RunSummary>> {
    let mut out = Vec::new();
    for run in runs {
        for dir in run_dirs(run)? {
            out.push(read_summary(&dir)?);
        }
    }
    Ok(out)
}

/// Long-format cross-entropy trajectories of every LWF and DenLWF run.
fn lwf_ce_csv(runs: &[PathBuf]) -> CliResult<String> {
    let mut out = String::from("method,step,iteration,lwf_ce\n");
    for run in runs {
        for dir in run_dirs(run)? {
            let summary = read_summary(&dir)?;
            for step in summary.steps.iter().filter(|s| s.step > 0) {
                let path = dir.join("logs").join(format!("step_{}_iters.csv", step.step));
                if !path.exists() {
                    continue;
                }
                let text = fs::read_to_string(&path).map_err(io_at(&path))?;
                for line in text.lines().skip(1) {
                    let cols: Vec<&str> = line.split(',').collect();
                    if let (Some(it), Some(ce)) = (cols.first(), cols.get(3)) {
                        if !ce.is_empty() {
                            writeln!(out, "{},{},{it},{ce}", summary.method, step.step).expect("String write");
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(1),
                CliError::Run(_) | CliError::Io { .. } => ExitCode::from(2),
            }
        }
    }
}
