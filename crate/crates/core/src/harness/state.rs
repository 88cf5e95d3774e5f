use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::eval::{mean, relative_forgetting, relative_learning, EvalRow};
use crate::graph::BigramLm;
use crate::losses::ClSnapshot;
use crate::matrix::Matrix;
use crate::net::ModelParams;

const STATE_MAGIC: &[u8; 8] = b"SQCLSTAT";

/// Evaluation bookkeeping for one completed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub target: String,
    /// Errors on every domain trained so far, target last.
    pub eval: EvalRow,
    /// Error of the source model on the target test set.
    pub cwer_src: Option<f64>,
    /// Source model's mean error over the past domains.
    pub pwer_src: Option<f64>,
}

impl StepRecord {
    pub fn cwer(&self) -> f64 {
        self.eval.error(&self.target).expect("target is always evaluated")
    }

    /// Mean error over the domains other than the target.
    pub fn pwer(&self) -> Option<f64> {
        let past: Vec<f64> = self
            .eval
            .errors
            .iter()
            .filter(|(d, _)| d != &self.target)
            .map(|e| e.1)
            .collect();
        (!past.is_empty()).then(|| mean(&past))
    }

    pub fn rel_learning(&self) -> Option<f64> {
        self.cwer_src.and_then(|src| relative_learning(self.cwer(), src).ok())
    }

    pub fn rel_forgetting(&self) -> Option<f64> {
        match (self.pwer(), self.pwer_src) {
            (Some(p), Some(src)) => relative_forgetting(p, src).ok(),
            _ => None,
        }
    }
}

/// Everything carried from one continual-learning step to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct ClState {
    pub model: ModelParams<f64>,
    /// Index of the last completed step (0 = seed training).
    pub step: usize,
    /// Domain indices trained so far, in order.
    pub seen: Vec<usize>,
    /// EWC memory, one entry per past step. Always empty for other methods.
    pub snapshots: Vec<ClSnapshot<f64>>,
    /// Label bigram behind the denominator graph of the last step.
    pub den_lm: BigramLm<f64>,
    /// Label bigram behind the seed step's denominator graph.
    pub seed_den_lm: BigramLm<f64>,
    pub history: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    seen: Vec<usize>,
    history: Vec<StepRecord>,
    snapshot_steps: Vec<usize>,
}

fn write_lm<W: Write>(w: &mut BinWriter<W>, lm: &BigramLm<f64>) -> Result<()> {
    w.u32(lm.num_labels() as u32)?;
    w.f64_slice(lm.log_probs().as_slice())
}

fn read_lm<R: Read>(r: &mut BinReader<R>) -> Result<BigramLm<f64>> {
    let p = r.u32()? as usize;
    if p > 1 << 16 {
        return Err(Error::Format(format!("implausible label count {p}")));
    }
    let vals = r.f64_slice((p + 1) * (p + 1))?;
    BigramLm::new(p, Matrix::from_vec(p + 1, p + 1, vals)?)
}

impl ClState {
    /// Binary state file: `SQCLSTAT`, version, a length-prefixed JSON block
    /// (step, seen domains, history), the model checkpoint, the EWC snapshots
    /// and both bigram tables. Floats are stored bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
        w.header(STATE_MAGIC)?;
        let meta = StateMeta {
            step: self.step,
            seen: self.seen.clone(),
            history: self.history.clone(),
            snapshot_steps: self.snapshots.iter().map(|s| s.step).collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        w.u64(json.len() as u64)?;
        let mut inner = w.into_inner();
        inner.write_all(&json)?;
        let mut w = BinWriter::new(inner);
        self.model.write_to(&mut w)?;
        w.u64(self.snapshots.len() as u64)?;
        for s in &self.snapshots {
            w.f64_vec(&s.params)?;
            w.f64_vec(&s.fisher)?;
        }
        write_lm(&mut w, &self.den_lm)?;
        write_lm(&mut w, &self.seed_den_lm)?;
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = BufReader::new(File::open(path)?);
        let mut r = BinReader::new(&mut file);
        r.header(STATE_MAGIC)?;
        let len = r.u64()? as usize;
        if len > 1 << 30 {
            return Err(Error::Format("implausible metadata length".into()));
        }
        let mut json = vec![0u8; len];
        file.read_exact(&mut json)?;
        let meta: StateMeta = serde_json::from_slice(&json)?;
        let mut r = BinReader::new(file);
        let model = ModelParams::read_from(&mut r)?;
        let n = r.u64()? as usize;
        if n != meta.snapshot_steps.len() {
            return Err(Error::Format("snapshot count disagrees with metadata".into()));
        }
        let mut snapshots = Vec::with_capacity(n);
        for &step in &meta.snapshot_steps {
            let params = r.f64_vec()?;
            let fisher = r.f64_vec()?;
            snapshots.push(ClSnapshot::new(step, params, fisher)?);
        }
        let den_lm = read_lm(&mut r)?;
        let seed_den_lm = read_lm(&mut r)?;
        r.finish()?;
        Ok(Self {
            model,
            step: meta.step,
            seen: meta.seen,
            snapshots,
            den_lm,
            seed_den_lm,
            history: meta.history,
        })
    }
}
