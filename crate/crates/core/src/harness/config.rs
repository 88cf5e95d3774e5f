use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Architecture;
use crate::synth::{FEATURE_DIM, NUM_LABELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Plain fine-tuning, no regularizer.
    Ft,
    Ewc,
    Lwf,
    Denlwf,
    /// One model trained on all domains at once.
    Comb,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ft, Method::Ewc, Method::Lwf, Method::Denlwf, Method::Comb];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::Ewc => "ewc",
            Method::Lwf => "lwf",
            Method::Denlwf => "denlwf",
            Method::Comb => "comb",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?} (ft, ewc, lwf, denlwf, comb)")))
    }
}

/// Fully resolved experiment configuration. Every field has a default, so a
/// config file only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub method: Method,
    pub master_seed: u64,
    pub alpha_lwf: f64,
    pub alpha_denlwf: f64,
    pub alpha_ewc: f64,
    pub seed_epochs: usize,
    pub epochs_per_step: usize,
    pub comb_epochs: usize,
    pub seed_learning_rate: f64,
    pub learning_rate: f64,
    /// Learning rate at the end of a training run as a fraction of the
    /// initial one; the rate decays linearly per iteration. 1.0 keeps it fixed.
    pub lr_final_fraction: f64,
    pub momentum: f64,
    pub minibatch_size: usize,
    /// Add-k smoothing of the denominator label bigram.
    pub den_lm_smoothing: f64,
    /// Add-k smoothing of the decoding label bigram.
    pub decode_lm_smoothing: f64,
    /// Per-frame self-loop probability folded into the denominator and
    /// decoding bigrams. `None` estimates it from the training data as
    /// `1 - labels / frames`.
    pub self_loop_prob: Option<f64>,
    /// Keep the seed step's denominator graph for every later step instead of
    /// re-estimating it on each target domain.
    pub freeze_den_graph: bool,
    /// Compute reference occupancies with the previous step's denominator
    /// graph rather than the current one.
    pub gamma_src_previous_graph: bool,
    /// DenLWF offsetting term. Turning it off gives the unbalanced variant.
    pub denlwf_offset: bool,
    pub context_radius: usize,
    pub hidden_dims: Vec<usize>,
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            method: Method::Ft,
            master_seed: 1,
            alpha_lwf: 1.0,
            alpha_denlwf: 0.6,
            alpha_ewc: 300.0,
            seed_epochs: 10,
            epochs_per_step: 10,
            comb_epochs: 10,
            seed_learning_rate: 5e-4,
            learning_rate: 5e-4,
            lr_final_fraction: 0.2,
            momentum: 0.9,
            minibatch_size: 8,
            den_lm_smoothing: 1.0,
            decode_lm_smoothing: 1.0,
            self_loop_prob: None,
            freeze_den_graph: false,
            gamma_src_previous_graph: false,
            denlwf_offset: true,
            context_radius: 1,
            hidden_dims: vec![32, 32],
            threads: 1,
        }
    }
}

impl PipelineConfig {
    pub fn alpha(&self, method: Method) -> f64 {
        match method {
            Method::Ewc => self.alpha_ewc,
            Method::Lwf => self.alpha_lwf,
            Method::Denlwf => self.alpha_denlwf,
            Method::Ft | Method::Comb => 0.0,
        }
    }

    pub fn set_alpha(&mut self, method: Method, alpha: f64) {
        match method {
            Method::Ewc => self.alpha_ewc = alpha,
            Method::Lwf => self.alpha_lwf = alpha,
            Method::Denlwf => self.alpha_denlwf = alpha,
            Method::Ft | Method::Comb => {}
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            feature_dim: FEATURE_DIM,
            context_radius: self.context_radius,
            hidden_dims: self.hidden_dims.clone(),
            num_labels: NUM_LABELS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("alpha_lwf", self.alpha_lwf),
            ("alpha_denlwf", self.alpha_denlwf),
            ("alpha_ewc", self.alpha_ewc),
        ] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite value >= 0")));
            }
        }
        if self.minibatch_size == 0 {
            return Err(Error::invalid("minibatch_size must be positive"));
        }
        if self.threads == 0 {
            return Err(Error::invalid("threads must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.seed_learning_rate > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(Error::invalid("lr_final_fraction must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.den_lm_smoothing > 0.0 && self.decode_lm_smoothing > 0.0) {
            // with k = 0 a frame repeat has zero probability under a label bigram
            return Err(Error::invalid("bigram smoothing must be positive"));
        }
        if let Some(s) = self.self_loop_prob {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::invalid("self_loop_prob must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Which regularizer a training step uses and at what scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSpec {
    pub method: Method,
    pub alpha: f64,
    pub denlwf_offset: bool,
}

impl MethodSpec {
    pub fn from_config(config: &PipelineConfig) -> Self {
        Self {
            method: config.method,
            alpha: config.alpha(config.method),
            denlwf_offset: config.denlwf_offset,
        }
    }

    pub fn new(method: Method, alpha: f64) -> Self {
        Self {
            method,
            alpha,
            denlwf_offset: true,
        }
    }

    /// Label used in file names and tables (`denlwf-nooffset` for the
    /// unbalanced variant).
    pub fn label(&self) -> String {
        if self.method == Method::Denlwf && !self.denlwf_offset {
            "denlwf-nooffset".to_string()
        } else {
            self.method.to_string()
        }
    }
}

/// Stateless seed derivation so every random stream is a pure function of
/// the master seed and where it is used.
pub fn derive_seed(master: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for byte in tag.bytes() {
        h = (h ^ u64::from(byte)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut x = master ^ h.rotate_left(17) ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.rotate_left(41);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
