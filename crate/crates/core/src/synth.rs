//! Reproducible synthetic domains: a label bigram language plus a Gaussian
//! frame emission process seen through a per-domain affine channel.
//!
//! # On-disk layout
//!
//! A dataset directory holds three files:
//!
//! * `manifest.json`: name, label count, feature dimension, file names and one
//!   record per utterance (`id`, `split`, `num_frames`, `num_labels`,
//!   `feature_offset`). Utterances are listed in generation order.
//! * `features.bin`: the 8-byte tag `SQCLFEAT`, a `u32` format version, then
//!   every utterance's `num_frames x feature_dim` matrix row-major as
//!   little-endian f64, concatenated in manifest order. `feature_offset` is the
//!   byte offset of an utterance's first value.
//! * `labels.txt`: one line per utterance, `id` followed by its labels,
//!   whitespace separated, in manifest order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{BinReader, BinWriter, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::graph::BigramLm;
use crate::losses::Example;
use crate::matrix::Matrix;

const FEATURE_MAGIC: &[u8; 8] = b"SQCLFEAT";
const FEATURE_HEADER_BYTES: u64 = 12;

pub const NUM_LABELS: usize = 8;
pub const FEATURE_DIM: usize = 6;
pub const DOMAIN_NAMES: [&str; 5] = ["A", "B", "C", "D", "E"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub domain: String,
    pub split: Split,
    pub features: Matrix<f64>,
    pub labels: Vec<usize>,
}

impl Example<f64> for Utterance {
    fn features(&self) -> &Matrix<f64> {
        &self.features
    }

    fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_labels: usize,
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.split == split)
            .cloned()
            .collect()
    }

    pub fn train(&self) -> Vec<Utterance> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<Utterance> {
        self.split(Split::Test)
    }

    pub fn transcripts(&self, split: Split) -> Vec<Vec<usize>> {
        self.utterances
            .iter()
            .filter(|u| u.split == split)
            .map(|u| u.labels.clone())
            .collect()
    }
}

/// Everything needed to generate one domain.
#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub name: String,
    pub seed: u64,
    pub num_utts: usize,
    /// Inclusive range of labels per utterance.
    pub utt_len_range: (usize, usize),
    pub label_lm: BigramLm<f64>,
    /// `P x d` class means.
    pub emission_means: Matrix<f64>,
    /// `d x d` channel matrix applied to every noisy frame.
    pub channel_transform: Matrix<f64>,
    pub channel_bias: Vec<f64>,
    pub noise_std: f64,
    /// Inclusive range of frames per label.
    pub frames_per_label_range: (usize, usize),
}

impl DomainSpec {
    pub fn num_labels(&self) -> usize {
        self.label_lm.num_labels()
    }

    pub fn feature_dim(&self) -> usize {
        self.emission_means.cols()
    }

    fn validate(&self) -> Result<()> {
        let p = self.num_labels();
        let d = self.feature_dim();
        if self.num_utts == 0 {
            return Err(Error::invalid("domain needs at least one utterance"));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be positive"));
        }
        let (lmin, lmax) = self.utt_len_range;
        let (fmin, fmax) = self.frames_per_label_range;
        if lmin == 0 || lmin > lmax {
            return Err(Error::invalid(format!("bad utterance length range {lmin}..={lmax}")));
        }
        if fmin == 0 || fmin > fmax {
            return Err(Error::invalid(format!("bad frames-per-label range {fmin}..={fmax}")));
        }
        if self.emission_means.rows() != p || d == 0 {
            return Err(Error::invalid("emission means must be P x d with d > 0"));
        }
        if self.channel_transform.shape() != (d, d) || self.channel_bias.len() != d {
            return Err(Error::invalid("channel transform must be d x d with a length-d bias"));
        }
        for context in 0..=p {
            let mass: f64 = (0..p).map(|b| self.label_lm.prob(context, b)).sum();
            if mass <= 0.0 {
                return Err(Error::invalid(format!(
                    "label LM row {context} gives no mass to any label"
                )));
            }
        }
        Ok(())
    }
}

/// Draw from `p(. | context)` restricted to real labels (the boundary column
/// is ignored; utterance length is drawn separately).
fn sample_label(lm: &BigramLm<f64>, context: usize, rng: &mut impl Rng) -> usize {
    let p = lm.num_labels();
    let mass: f64 = (0..p).map(|b| lm.prob(context, b)).sum();
    let mut u = rng.random::<f64>() * mass;
    for b in 0..p {
        let w = lm.prob(context, b);
        if u < w {
            return b;
        }
        u -= w;
    }
    // rounding at the top of the range
    (0..p).rev().find(|&b| lm.prob(context, b) > 0.0).expect("row has mass")
}

/// Generate every utterance of a domain. Utterance `i` goes to the test split
/// when `i % 10 == 9`, otherwise to train.
pub fn generate_domain(spec: &DomainSpec) -> Result<Dataset> {
    spec.validate()?;
    let p = spec.num_labels();
    let d = spec.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let boundary = spec.label_lm.boundary();

    let mut utterances = Vec::with_capacity(spec.num_utts);
    let mut clean = vec![0.0; d];
    for i in 0..spec.num_utts {
        let len = rng.random_range(spec.utt_len_range.0..=spec.utt_len_range.1);
        let mut labels = Vec::with_capacity(len);
        let mut context = boundary;
        for _ in 0..len {
            let l = sample_label(&spec.label_lm, context, &mut rng);
            labels.push(l);
            context = l;
        }
        let mut frames: Vec<f64> = Vec::new();
        for &l in &labels {
            let dur = rng.random_range(spec.frames_per_label_range.0..=spec.frames_per_label_range.1);
            for _ in 0..dur {
                for (k, c) in clean.iter_mut().enumerate() {
                    *c = spec.emission_means[(l, k)] + noise.sample(&mut rng);
                }
                for r in 0..d {
                    let row = spec.channel_transform.row(r);
                    let v: f64 = row.iter().zip(&clean).map(|(a, b)| a * b).sum();
                    frames.push(v + spec.channel_bias[r]);
                }
            }
        }
        let n_frames = frames.len() / d;
        utterances.push(Utterance {
            id: format!("{}-{i:05}", spec.name),
            domain: spec.name.clone(),
            split: if i % 10 == 9 { Split::Test } else { Split::Train },
            features: Matrix::from_vec(n_frames, d, frames)?,
            labels,
        });
    }
    Ok(Dataset {
        name: spec.name.clone(),
        num_labels: p,
        feature_dim: d,
        utterances,
    })
}

fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Matrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
fn random_rotation(d: usize, rng: &mut impl Rng) -> Matrix<f64> {
    let g = standard_normal_matrix(d, d, rng);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    for r in 0..d {
        let mut v = g.row(r).to_vec();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / norm).collect());
    }
    Matrix::from_rows(&q).expect("square")
}

/// `exp(angle * S)` restricted to one random plane: a rotation by `angle`
/// radians of the plane spanned by two random orthonormal directions.
fn plane_rotation(d: usize, angle: f64, rng: &mut impl Rng) -> Matrix<f64> {
    let basis = random_rotation(d, rng);
    let (u, v) = (basis.row(0).to_vec(), basis.row(1).to_vec());
    let (c, s) = (angle.cos(), angle.sin());
    Matrix::from_fn(d, d, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id + (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j])
    })
}

fn matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
    })
}

/// Random bigram over `p` labels with no immediate repeats and a fixed end
/// probability. `concentration` below 1 gives peaky rows.
fn random_label_lm(p: usize, concentration: f64, end_prob: f64, rng: &mut impl Rng) -> BigramLm<f64> {
    let gamma = rand_distr::Gamma::new(concentration, 1.0).expect("positive shape");
    let n = p + 1;
    let mut probs = Matrix::zeros(n, n);
    for r in 0..n {
        let mut w: Vec<f64> = (0..p)
            .map(|b| if b == r { 0.0 } else { gamma.sample(rng) + 1e-3 })
            .collect();
        let total: f64 = w.iter().sum();
        let label_mass = if r == p { 1.0 } else { 1.0 - end_prob };
        for v in &mut w {
            *v *= label_mass / total;
        }
        probs.row_mut(r)[..p].copy_from_slice(&w);
        probs[(r, p)] = 1.0 - label_mass;
    }
    BigramLm::from_probs(p, &probs).expect("rows normalized")
}

/// `(1 - w) * I + w * m`.
fn toward_identity(m: &Matrix<f64>, w: f64) -> Matrix<f64> {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        (1.0 - w) * id + w * m[(i, j)]
    })
}

/// Mix two label LMs row by row: `(1 - w) * a + w * b`.
fn blend_lm(a: &BigramLm<f64>, b: &BigramLm<f64>, w: f64) -> BigramLm<f64> {
    let n = a.num_labels() + 1;
    let probs = Matrix::from_fn(n, n, |r, c| (1.0 - w) * a.prob(r, c) + w * b.prob(r, c));
    BigramLm::from_probs(a.num_labels(), &probs).expect("convex mix of normalized rows")
}

/// The five default domains.
///
/// `A` is the seed domain (2000 training utterances); `B` to `E` have 500
/// training utterances each. `B` is a mild rotation of `A`, `C` a moderate
/// shift with lower noise, `D` and `E` mix in a random orthogonal map and
/// have label languages of their own.
pub fn default_pipeline_specs(master_seed: u64) -> Vec<DomainSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed ^ 0x5eed_d0ba_1a5e_0001);
    let (p, d) = (NUM_LABELS, FEATURE_DIM);
    let means = standard_normal_matrix(p, d, &mut rng).scale(1.6);
    let base_lm = random_label_lm(p, 0.5, 0.12, &mut rng);
    let identity = Matrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 });

    let bias = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<f64> {
        let n = Normal::new(0.0, scale).expect("positive scale");
        (0..d).map(|_| n.sample(rng)).collect()
    };

    struct Shape {
        transform: Matrix<f64>,
        bias: Vec<f64>,
        noise: f64,
        lm: BigramLm<f64>,
        num_utts: usize,
    }

    let b_lm = random_label_lm(p, 0.5, 0.12, &mut rng);
    let c_lm = random_label_lm(p, 0.5, 0.12, &mut rng);
    let d_lm = random_label_lm(p, 0.4, 0.12, &mut rng);
    let e_lm = random_label_lm(p, 0.4, 0.12, &mut rng);
    let shapes = vec![
        Shape {
            transform: identity.clone(),
            bias: vec![0.0; d],
            noise: 1.0,
            lm: base_lm.clone(),
            num_utts: 2222,
        },
        Shape {
            transform: plane_rotation(d, 0.5, &mut rng),
            bias: bias(&mut rng, 0.4),
            noise: 1.0,
            lm: blend_lm(&base_lm, &b_lm, 0.3),
            num_utts: 555,
        },
        Shape {
            transform: matmul(&plane_rotation(d, 0.7, &mut rng), &plane_rotation(d, 0.4, &mut rng)),
            bias: bias(&mut rng, 0.5),
            noise: 0.7,
            lm: blend_lm(&base_lm, &c_lm, 0.3),
            num_utts: 555,
        },
        Shape {
            transform: toward_identity(&random_rotation(d, &mut rng).scale(1.3), 0.3),
            bias: bias(&mut rng, 0.45),
            noise: 0.9,
            lm: d_lm,
            num_utts: 555,
        },
        Shape {
            transform: toward_identity(&random_rotation(d, &mut rng).scale(0.9), 0.4),
            bias: bias(&mut rng, 0.6),
            noise: 0.9,
            lm: e_lm,
            num_utts: 555,
        },
    ];

    shapes
        .into_iter()
        .zip(DOMAIN_NAMES)
        .enumerate()
        .map(|(i, (s, name))| DomainSpec {
            name: name.to_string(),
            seed: master_seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(i as u64 + 1),
            num_utts: s.num_utts,
            utt_len_range: (4, 10),
            label_lm: s.lm,
            emission_means: means.clone(),
            channel_transform: s.transform,
            channel_bias: s.bias,
            noise_std: s.noise,
            frames_per_label_range: (1, 3),
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    name: String,
    num_labels: usize,
    feature_dim: usize,
    features_file: String,
    labels_file: String,
    utterances: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    split: Split,
    num_frames: usize,
    num_labels: usize,
    feature_offset: u64,
}

/// Write `manifest.json`, `features.bin` and `labels.txt` into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut feats = BinWriter::new(BufWriter::new(File::create(dir.join("features.bin"))?));
    feats.header(FEATURE_MAGIC)?;
    let mut labels = BufWriter::new(File::create(dir.join("labels.txt"))?);
    let mut entries = Vec::with_capacity(dataset.utterances.len());
    let mut offset = FEATURE_HEADER_BYTES;
    for u in &dataset.utterances {
        feats.f64_slice(u.features.as_slice())?;
        let line: Vec<String> = u.labels.iter().map(ToString::to_string).collect();
        writeln!(labels, "{} {}", u.id, line.join(" "))?;
        entries.push(ManifestEntry {
            id: u.id.clone(),
            split: u.split,
            num_frames: u.features.rows(),
            num_labels: u.labels.len(),
            feature_offset: offset,
        });
        offset += (u.features.as_slice().len() * 8) as u64;
    }
    feats.into_inner().flush()?;
    labels.flush()?;
    let manifest = Manifest {
        format: "seqcl-dataset".into(),
        version: FORMAT_VERSION,
        name: dataset.name.clone(),
        num_labels: dataset.num_labels,
        feature_dim: dataset.feature_dim,
        features_file: "features.bin".into(),
        labels_file: "labels.txt".into(),
        utterances: entries,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", manifest_path.display()),
        ))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != "seqcl-dataset" || manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{} is not a version {FORMAT_VERSION} seqcl dataset",
            manifest_path.display()
        )));
    }
    let label_text = fs::read_to_string(dir.join(&manifest.labels_file))?;
    let label_lines: Vec<&str> = label_text.lines().collect();
    if label_lines.len() != manifest.utterances.len() {
        return Err(Error::Format("label file and manifest disagree on utterance count".into()));
    }

    let mut feats = BinReader::new(BufReader::new(File::open(dir.join(&manifest.features_file))?));
    feats.header(FEATURE_MAGIC)?;
    let d = manifest.feature_dim;
    let mut offset = FEATURE_HEADER_BYTES;
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for (entry, line) in manifest.utterances.iter().zip(label_lines) {
        if entry.feature_offset != offset {
            return Err(Error::Format(format!("utterance {} has a bad feature offset", entry.id)));
        }
        let values = feats.f64_slice(entry.num_frames * d)?;
        offset += (values.len() * 8) as u64;
        let mut fields = line.split_whitespace();
        if fields.next() != Some(entry.id.as_str()) {
            return Err(Error::Format(format!("label line for {} out of order", entry.id)));
        }
        let labels = fields
            .map(|f| f.parse::<usize>().map_err(|_| Error::Format(format!("bad label {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != entry.num_labels || labels.iter().any(|&l| l >= manifest.num_labels) {
            return Err(Error::Format(format!("labels of {} are inconsistent", entry.id)));
        }
        utterances.push(Utterance {
            id: entry.id.clone(),
            domain: manifest.name.clone(),
            split: entry.split,
            features: Matrix::from_vec(entry.num_frames, d, values)?,
            labels,
        });
    }
    feats.finish()?;
    Ok(Dataset {
        name: manifest.name,
        num_labels: manifest.num_labels,
        feature_dim: d,
        utterances,
    })
}

/// Read the datasets of every default domain from `dir/<name>/`.
pub fn read_domains(dir: &Path) -> Result<Vec<Dataset>> {
    DOMAIN_NAMES.iter().map(|n| read_dataset(&dir.join(n))).collect()
}


#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(noise: f64) -> DomainSpec {
        let mut spec = default_pipeline_specs(3).remove(0);
        spec.num_utts = 30;
        spec.noise_std = noise;
        spec
    }

    #[test]
    fn deterministic_generation() {
        let a = generate_domain(&tiny_spec(0.5)).unwrap();
        let b = generate_domain(&tiny_spec(0.5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_limit_hits_the_means() {
        let spec = tiny_spec(1e-12);
        let ds = generate_domain(&spec).unwrap();
        for u in &ds.utterances {
            // durations are unknown here, but every frame must be some label's mean
            for r in 0..u.features.rows() {
                let frame = u.features.row(r);
                let hit = u.labels.iter().any(|&l| {
                    spec.emission_means
                        .row(l)
                        .iter()
                        .zip(frame)
                        .all(|(m, f)| (m - f).abs() < 1e-9)
                });
                assert!(hit);
            }
            let (lo, hi) = spec.frames_per_label_range;
            assert!(u.features.rows() >= u.labels.len() * lo);
            assert!(u.features.rows() <= u.labels.len() * hi);
        }
    }

    #[test]
    fn split_is_ninety_ten() {
        let ds = generate_domain(&tiny_spec(0.5)).unwrap();
        assert_eq!(ds.test().len(), 3);
        assert_eq!(ds.train().len(), 27);
    }

    #[test]
    fn default_specs_shape() {
        let specs = default_pipeline_specs(42);
        assert_eq!(specs.len(), 5);
        let train: Vec<usize> = specs.iter().map(|s| s.num_utts - s.num_utts / 10).collect();
        assert_eq!(train, vec![2000, 500, 500, 500, 500]);
        for s in &specs {
            assert_eq!(s.num_labels(), NUM_LABELS);
            assert_eq!(s.feature_dim(), FEATURE_DIM);
            // no immediate repeats so collapsing frame labels is lossless
            for a in 0..NUM_LABELS {
                assert_eq!(s.label_lm.prob(a, a), 0.0);
            }
        }
        let again = default_pipeline_specs(42);
        for (a, b) in specs.iter().zip(&again) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.channel_transform, b.channel_transform);
            assert_eq!(a.label_lm, b.label_lm);
        }
        assert_ne!(default_pipeline_specs(43)[0].emission_means, specs[0].emission_means);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = tiny_spec(0.5);
        s.noise_std = 0.0;
        assert!(generate_domain(&s).is_err());
        let mut s = tiny_spec(0.5);
        s.frames_per_label_range = (0, 2);
        assert!(generate_domain(&s).is_err());
        let mut s = tiny_spec(0.5);
        s.channel_bias.pop();
        assert!(generate_domain(&s).is_err());
    }
}
