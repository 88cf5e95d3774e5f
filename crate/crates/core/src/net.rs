//! Context-window feed-forward network producing per-frame label scores.
//!
//! Frames `t-r..=t+r` are spliced (edge frames replicated), passed through
//! affine+tanh hidden layers and a final affine layer. Outputs are raw
//! log-scores; nothing is normalized.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::fb::EmissionMatrix;
use crate::matrix::Matrix;
use crate::Real;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SQCLMODL";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub feature_dim: usize,
    pub context_radius: usize,
    pub hidden_dims: Vec<usize>,
    pub num_labels: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            feature_dim: 6,
            context_radius: 1,
            hidden_dims: vec![32, 32],
            num_labels: 8,
        }
    }
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        self.feature_dim * (2 * self.context_radius + 1)
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden_dims);
        dims.push(self.num_labels);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_labels == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

/// Network weights flattened into one vector. Layer `k` stores its
/// `fan_out x fan_in` weight matrix row-major, followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    arch: Architecture,
    values: Vec<F>,
}

/// Activations kept by [`ModelParams::forward`] for the matching backward call.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    fingerprint: u64,
    input: Matrix<F>,
    hidden: Vec<Matrix<F>>,
}

struct LayerView {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

impl<F: Real> ModelParams<F> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_params();
        Ok(Self {
            arch,
            values: vec![F::zero(); n],
        })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(arch: Architecture, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = params.layers();
        for l in &layers {
            let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for w in &mut params.values[l.weights..l.bias] {
                *w = F::of(rng.random_range(-limit..limit));
            }
        }
        Ok(params)
    }

    pub fn from_values(arch: Architecture, values: Vec<F>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.num_params() {
            return Err(Error::invalid(format!(
                "parameter vector has {} values, architecture needs {}",
                values.len(),
                arch.num_params()
            )));
        }
        Ok(Self { arch, values })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn layers(&self) -> Vec<LayerView> {
        let mut offset = 0;
        self.arch
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let view = LayerView {
                    fan_in,
                    fan_out,
                    weights: offset,
                    bias: offset + fan_in * fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                view
            })
            .collect()
    }

    /// Order-sensitive hash of the parameter bits, used to detect stale caches.
    pub fn fingerprint(&self) -> u64 {
        self.values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.as_f64().to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    fn splice(&self, features: &Matrix<F>) -> Matrix<F> {
        let (t_count, d) = features.shape();
        let r = self.arch.context_radius as isize;
        let mut input = Matrix::zeros(t_count, self.arch.input_dim());
        for t in 0..t_count {
            let row = input.row_mut(t);
            for (k, off) in (-r..=r).enumerate() {
                let src = (t as isize + off).clamp(0, t_count as isize - 1) as usize;
                row[k * d..(k + 1) * d].copy_from_slice(features.row(src));
            }
        }
        input
    }

    fn affine(&self, layer: &LayerView, x: &[F], out: &mut [F]) {
        let w = &self.values[layer.weights..layer.bias];
        let b = &self.values[layer.bias..layer.bias + layer.fan_out];
        for (o, y) in out.iter_mut().enumerate() {
            let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
            let mut acc = b[o];
            for (&wi, &xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *y = acc;
        }
    }

    /// Emissions for a `T x d` feature matrix plus the cache for [`Self::backward`].
    pub fn forward(&self, features: &Matrix<F>) -> Result<(EmissionMatrix<F>, ForwardCache<F>)> {
        if features.rows() == 0 {
            return Err(Error::invalid("utterance has no frames"));
        }
        if features.cols() != self.arch.feature_dim {
            return Err(Error::invalid(format!(
                "features have dimension {}, network expects {}",
                features.cols(),
                self.arch.feature_dim
            )));
        }
        if !features.all_finite() {
            return Err(Error::invalid("features contain non-finite values"));
        }
        let t_count = features.rows();
        let layers = self.layers();
        let input = self.splice(features);
        let mut hidden: Vec<Matrix<F>> = Vec::with_capacity(layers.len() - 1);
        let mut out = Matrix::zeros(t_count, self.arch.num_labels);
        for (k, layer) in layers.iter().enumerate() {
            let prev = if k == 0 { &input } else { &hidden[k - 1] };
            let mut next = Matrix::zeros(t_count, layer.fan_out);
            for t in 0..t_count {
                self.affine(layer, prev.row(t), next.row_mut(t));
            }
            if k + 1 < layers.len() {
                for v in next.as_mut_slice() {
                    *v = v.tanh();
                }
                hidden.push(next);
            } else {
                out = next;
            }
        }
        let cache = ForwardCache {
            fingerprint: self.fingerprint(),
            input,
            hidden,
        };
        Ok((out, cache))
    }

    pub fn emissions(&self, features: &Matrix<F>) -> Result<EmissionMatrix<F>> {
        self.forward(features).map(|(e, _)| e)
    }

    /// Gradient of `sum_{t,p} grad[t][p] * emissions[t][p]` with respect to
    /// every parameter.
    pub fn backward(&self, cache: &ForwardCache<F>, grad: &Matrix<F>) -> Result<Vec<F>> {
        if cache.fingerprint != self.fingerprint() {
            return Err(Error::invalid("forward cache does not belong to these parameters"));
        }
        let t_count = cache.input.rows();
        if grad.shape() != (t_count, self.arch.num_labels) {
            return Err(Error::invalid(format!(
                "output gradient is {:?}, expected ({t_count}, {})",
                grad.shape(),
                self.arch.num_labels
            )));
        }
        let layers = self.layers();
        let mut dparams = vec![F::zero(); self.values.len()];
        let mut delta = grad.clone();
        for (k, layer) in layers.iter().enumerate().rev() {
            let prev = if k == 0 { &cache.input } else { &cache.hidden[k - 1] };
            let w = &self.values[layer.weights..layer.bias];
            let mut dprev = Matrix::zeros(t_count, layer.fan_in);
            {
                let (dw, db) = dparams[layer.weights..layer.bias + layer.fan_out]
                    .split_at_mut(layer.bias - layer.weights);
                for t in 0..t_count {
                    let d = delta.row(t);
                    let x = prev.row(t);
                    let dx = dprev.row_mut(t);
                    for (o, &g) in d.iter().enumerate() {
                        if g == F::zero() {
                            continue;
                        }
                        db[o] += g;
                        let wrow = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                        let dwrow = &mut dw[o * layer.fan_in..(o + 1) * layer.fan_in];
                        for i in 0..layer.fan_in {
                            dwrow[i] += g * x[i];
                            dx[i] += g * wrow[i];
                        }
                    }
                }
            }
            if k > 0 {
                // through tanh: d/da tanh(a) = 1 - h^2
                for (dv, &h) in dprev.as_mut_slice().iter_mut().zip(prev.as_slice()) {
                    *dv *= F::one() - h * h;
                }
            }
            delta = dprev;
        }
        Ok(dparams)
    }

    pub fn write_to<W: Write>(&self, w: &mut BinWriter<W>) -> Result<()> {
        w.header(CHECKPOINT_MAGIC)?;
        w.u32(self.arch.feature_dim as u32)?;
        w.u32(self.arch.context_radius as u32)?;
        w.u32(self.arch.num_labels as u32)?;
        w.u32(self.arch.hidden_dims.len() as u32)?;
        for &h in &self.arch.hidden_dims {
            w.u32(h as u32)?;
        }
        let flat: Vec<f64> = self.values.iter().map(|v| v.as_f64()).collect();
        w.f64_vec(&flat)
    }

    pub fn read_from<R: Read>(r: &mut BinReader<R>) -> Result<Self> {
        r.header(CHECKPOINT_MAGIC)?;
        let feature_dim = r.u32()? as usize;
        let context_radius = r.u32()? as usize;
        let num_labels = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        if n_hidden > 64 {
            return Err(Error::Format(format!("implausible hidden layer count {n_hidden}")));
        }
        let hidden_dims = (0..n_hidden)
            .map(|_| r.u32().map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let arch = Architecture {
            feature_dim,
            context_radius,
            hidden_dims,
            num_labels,
        };
        let values = r.f64_vec()?.into_iter().map(F::of).collect();
        Self::from_values(arch, values).map_err(|e| Error::Format(e.to_string()))
    }

    /// Checkpoint file: `SQCLMODL`, format version, dimensions, then the
    /// parameter vector as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
        self.write_to(&mut w)?;
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::new(BufReader::new(File::open(path)?));
        let params = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(params)
    }
}

/// One step of gradient ascent with heavy-ball momentum:
/// `v <- momentum * v + grad`, `params <- params + learning_rate * v`.
pub fn sgd_step<F: Real>(
    params: &mut [F],
    grad: &[F],
    learning_rate: F,
    momentum: F,
    velocity: &mut [F],
) -> Result<()> {
    if params.len() != grad.len() || params.len() != velocity.len() {
        return Err(Error::invalid(format!(
            "sgd shapes differ: params {}, grad {}, velocity {}",
            params.len(),
            grad.len(),
            velocity.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at parameter {i}")));
    }
    for ((p, &g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p += learning_rate * *v;
    }
    Ok(())
}
