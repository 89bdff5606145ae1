//! Multilayer perceptron binary classifier.
//!
//! Hidden layers use ReLU, the single output unit a sigmoid; the loss is
//! binary cross-entropy. All parameters live in one flat `f64` vector, which
//! is the unit exchanged between server and clients.
//!
//! Flat layout, per layer in order: the weight matrix row-major as
//! `[out][in]`, followed by the `out` biases.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{self, domain};

/// Clamp applied to probabilities inside [`bce_loss`].
pub const BCE_CLIP: f64 = 1e-12;

/// Largest double below 1; forward outputs are clamped to stay strictly inside (0, 1).
const P_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid layer sizes {0:?}: need at least input and output, all widths >= 1, output width 1")]
    InvalidLayers(Vec<usize>),
    #[error("input has {found} features, model expects {expected}")]
    InputLength { expected: usize, found: usize },
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("parameter vector has length {found}, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    values: Vec<f64>,
}

/// Number of flat parameters for `layer_sizes`.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_layers(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) || *layer_sizes.last().unwrap() != 1 {
        return Err(ModelError::InvalidLayers(layer_sizes.to_vec()));
    }
    Ok(())
}

impl MlpParams {
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        check_layers(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            values: vec![0.0; param_count(layer_sizes)],
        })
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes)?;
        let mut rng = seed::rng(seed::derive(seed, &[domain::INIT]));
        let mut offset = 0;
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p.values[offset..offset + fan_in * fan_out] {
                *v = rng.random_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(p)
    }

    /// Rebuilds parameters from a flat vector. Finiteness is not checked
    /// here; see [`MlpParams::all_finite`].
    pub fn from_flat(layer_sizes: &[usize], values: Vec<f64>) -> Result<Self> {
        check_layers(layer_sizes)?;
        let expected = param_count(layer_sizes);
        if values.len() != expected {
            return Err(ModelError::LengthMismatch {
                expected,
                found: values.len(),
            });
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            values,
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `(weights, biases)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let offset: usize = param_count(&self.layer_sizes[..=l]);
        let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let w = &self.values[offset..offset + fan_in * fan_out];
        let b = &self.values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        (w, b)
    }

    fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Output probability `h(x; theta)`.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(ModelError::InputLength {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput);
        }
        Ok(self.predict(x))
    }

    /// [`MlpParams::forward`] without input validation.
    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x)).clamp(f64::MIN_POSITIVE, P_MAX)
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        let last = self.num_layers() - 1;
        for l in 0..=last {
            let mut z = affine(self, l, &a);
            if l < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a[0]
    }
}

fn affine(p: &MlpParams, l: usize, a: &[f64]) -> Vec<f64> {
    let (w, b) = p.layer(l);
    let fan_in = a.len();
    b.iter()
        .enumerate()
        .map(|(o, bias)| {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            row.iter().zip(a).fold(*bias, |acc, (wi, ai)| acc + wi * ai)
        })
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with `p` clamped to `[BCE_CLIP, 1 - BCE_CLIP]`.
pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean BCE over a batch.
pub fn mean_loss<'a, I>(p: &MlpParams, batch: I) -> f64
where
    I: IntoIterator<Item = (&'a [f64], u8)>,
{
    let (sum, n) = batch
        .into_iter()
        .fold((0.0, 0usize), |(s, n), (x, y)| (s + bce_loss(p.predict(x), y), n + 1));
    sum / n as f64
}

/// Mean gradient of the BCE loss over `batch`, in flat layout.
///
/// The output layer uses the fused sigmoid/BCE residual `p - y`.
/// An empty batch yields the zero vector.
pub fn backward<'a, I>(p: &MlpParams, batch: I) -> Vec<f64>
where
    I: IntoIterator<Item = (&'a [f64], u8)>,
{
    let nl = p.num_layers();
    let mut grad = vec![0.0; p.len()];
    let offsets: Vec<usize> = (0..nl).map(|l| param_count(&p.layer_sizes[..=l])).collect();
    let mut count = 0usize;
    // inputs[l] is the activation fed into layer l.
    let mut inputs: Vec<Vec<f64>> = vec![Vec::new(); nl];
    for (x, y) in batch {
        count += 1;
        inputs[0].clear();
        inputs[0].extend_from_slice(x);
        let mut out = Vec::new();
        for l in 0..nl {
            let mut z = affine(p, l, &inputs[l]);
            if l + 1 < nl {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                inputs[l + 1] = z;
            } else {
                out = z;
            }
        }
        let mut delta = vec![sigmoid(out[0]) - f64::from(y)];
        for l in (0..nl).rev() {
            let a = &inputs[l];
            let fan_in = a.len();
            let (w, _) = p.layer(l);
            let off = offsets[l];
            for (o, d) in delta.iter().enumerate() {
                let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                row.iter_mut().zip(a).for_each(|(g, ai)| *g += d * ai);
                grad[off + fan_in * delta.len() + o] += d;
            }
            if l > 0 {
                // ReLU derivative: the stored activation is positive iff z > 0.
                delta = (0..fan_in)
                    .map(|i| {
                        if a[i] > 0.0 {
                            delta.iter().enumerate().map(|(o, d)| w[o * fan_in + i] * d).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
    }
    if count > 0 {
        let inv = count as f64;
        grad.iter_mut().for_each(|g| *g /= inv);
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            config,
        }
    }

    /// In-place bias-corrected Adam update.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grad.len() != params.len() {
            return Err(ModelError::LengthMismatch {
                expected: self.first_moment.len(),
                found: grad.len().min(params.len()),
            });
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Functional form of one Adam step.
pub fn adam_step(p: &MlpParams, g: &[f64], s: &AdamState) -> Result<(MlpParams, AdamState)> {
    let mut p = p.clone();
    let mut s = s.clone();
    s.apply(&mut p.values, g)?;
    Ok((p, s))
}

/// Plain gradient step `theta -= lr * g`.
pub fn sgd_step(params: &mut [f64], grad: &[f64], learning_rate: f64) {
    params.iter_mut().zip(grad).for_each(|(p, g)| *p -= learning_rate * g);
}

/// Optimizer with its per-run state.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd { learning_rate: f64 },
}

impl Optimizer {
    /// Fresh optimizer state for `len` parameters.
    pub fn new(kind: OptimizerKind, len: usize, adam: AdamConfig) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(len, adam)),
            OptimizerKind::Sgd => Optimizer::Sgd {
                learning_rate: adam.learning_rate,
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        match self {
            Optimizer::Adam(s) => s.apply(params, grad),
            Optimizer::Sgd { learning_rate } => {
                sgd_step(params, grad, *learning_rate);
                Ok(())
            }
        }
    }
}

// Binary checkpoint layout, all integers and floats little-endian:
//   magic    8 bytes  "FSIMMLP1"
//   L        u32      number of layer sizes
//   sizes    L x u64
//   count    u64      number of parameter values
//   values   count x f64
const CHECKPOINT_MAGIC: &[u8; 8] = b"FSIMMLP1";

#[derive(Serialize, Deserialize)]
struct JsonCheckpoint {
    layer_sizes: Vec<usize>,
    values: Vec<f64>,
}

pub fn encode_checkpoint(p: &MlpParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + 8 * (p.layer_sizes.len() + 1 + p.len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(p.layer_sizes.len() as u32).to_le_bytes());
    for &s in &p.layer_sizes {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    for v in &p.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<MlpParams, String> {
    struct Cursor<'a>(&'a [u8]);
    impl Cursor<'_> {
        fn take<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
            if self.0.len() < N {
                return Err("truncated".into());
            }
            let (head, rest) = self.0.split_at(N);
            self.0 = rest;
            Ok(head.try_into().expect("split at N"))
        }
    }
    let mut c = Cursor(bytes);
    if &c.take::<8>()? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let l = u32::from_le_bytes(c.take()?) as usize;
    if l > 1024 {
        return Err(format!("implausible layer count {l}"));
    }
    let sizes = (0..l)
        .map(|_| c.take().map(|b| u64::from_le_bytes(b) as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let count = u64::from_le_bytes(c.take()?) as usize;
    if c.0.len() != count * 8 {
        return Err(format!("expected {count} values, found {} bytes", c.0.len()));
    }
    let values =
        c.0.chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
    MlpParams::from_flat(&sizes, values).map_err(|e| e.to_string())
}

pub fn write_checkpoint_binary(p: &MlpParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(p)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_checkpoint_json(p: &MlpParams, path: &Path) -> Result<()> {
    let io_err = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    let doc = JsonCheckpoint {
        layer_sizes: p.layer_sizes.clone(),
        values: p.values.clone(),
    };
    serde_json::to_writer(&mut f, &doc).map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    f.write_all(b"\n").map_err(io_err)
}

/// Reads either checkpoint format, detected from the leading bytes.
pub fn read_checkpoint(path: &Path) -> Result<MlpParams> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |reason: String| ModelError::Checkpoint {
        path: path.display().to_string(),
        reason,
    };
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        decode_checkpoint(&bytes).map_err(bad)
    } else {
        let doc: JsonCheckpoint = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
        MlpParams::from_flat(&doc.layer_sizes, doc.values).map_err(|e| bad(e.to_string()))
    }
}
