//! Fully connected tanh networks for the value function and the density.
//!
//! Both networks share one architecture and differ only in their output head.
//! Inputs are mapped affinely from the domain box to `[-1, 1]` first.

use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::economy::ModelParams;
use crate::error::{AbhError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ABHPINN1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputHead {
    Identity,
    Softplus,
}

impl OutputHead {
    fn tag(self) -> u8 {
        match self {
            OutputHead::Identity => 0,
            OutputHead::Softplus => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(OutputHead::Identity),
            1 => Ok(OutputHead::Softplus),
            t => Err(AbhError::Format(format!("unknown output head tag {t}"))),
        }
    }
}

/// Weights and biases of one network. `weights[l]` maps layer `l` to layer
/// `l + 1` and has shape `(sizes[l + 1], sizes[l])`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub head: OutputHead,
}

pub fn default_layer_sizes(width: usize, hidden_layers: usize) -> Vec<usize> {
    let mut sizes = vec![3];
    sizes.extend(std::iter::repeat_n(width, hidden_layers));
    sizes.push(1);
    sizes
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes[0] != 3 || *sizes.last().unwrap() != 1 || sizes.contains(&0) {
        return Err(AbhError::Config(format!(
            "layer sizes {sizes:?} must start with 3, end with 1 and be positive"
        )));
    }
    Ok(())
}

impl MlpParams {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(seed: u64, layer_sizes: &[usize], head: OutputHead) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(&mut rng)));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            head,
        })
    }

    /// All-zero parameters.
    pub fn zeros(layer_sizes: &[usize], head: OutputHead) -> Result<Self> {
        let mut p = Self::init(0, layer_sizes, head)?;
        p.weights.iter_mut().for_each(|w| w.fill(0.0));
        Ok(p)
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|p| p[1] * (p[0] + 1)).sum()
    }

    /// Parameters in canonical order: layer by layer, weights row-major then
    /// biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(AbhError::Config(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for x in w.iter_mut() {
                *x = flat[k];
                k += 1;
            }
            for x in b.iter_mut() {
                *x = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Plain forward evaluation at one point (no derivatives).
    pub fn eval_point(&self, scaler: &InputScaler, x: [f64; 3]) -> f64 {
        let mut h: Vec<f64> = scaler.scale(x).to_vec();
        let last = self.num_layers() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next: Vec<f64> = w
                .rows()
                .into_iter()
                .zip(b.iter())
                .map(|(row, bias)| row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + bias)
                .collect();
            if l < last {
                next.iter_mut().for_each(|v| *v = crate::autodiff::tanh(*v));
            }
            h = next;
        }
        match self.head {
            OutputHead::Identity => h[0],
            OutputHead::Softplus => crate::autodiff::softplus(h[0]),
        }
    }

    /// Checkpoint bytes: magic, u32 layer count, u32 sizes, u8 head tag, then
    /// every weight matrix (row-major) followed by every bias vector, all
    /// little-endian f64.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * (self.layer_sizes.len() + 1) + 1 + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.num_layers() as u32).to_le_bytes());
        for &s in &self.layer_sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.push(self.head.tag());
        for w in &self.weights {
            for x in w.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for b in &self.biases {
            for x in b.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| AbhError::Format(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("bad network checkpoint magic"));
        }
        let u32_at = |off: usize| -> Result<usize> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or_else(|| fail("truncated network header"))
        };
        let layers = u32_at(8)?;
        if layers == 0 || layers > 1024 {
            return Err(fail("implausible layer count"));
        }
        let mut sizes = Vec::with_capacity(layers + 1);
        for i in 0..=layers {
            sizes.push(u32_at(12 + 4 * i)?);
        }
        check_sizes(&sizes).map_err(|e| AbhError::Format(e.to_string()))?;
        let head_off = 12 + 4 * (layers + 1);
        let head = OutputHead::from_tag(*bytes.get(head_off).ok_or_else(|| fail("truncated network header"))?)?;
        let n_params: usize = sizes.windows(2).map(|p| p[1] * (p[0] + 1)).sum();
        let body = head_off + 1;
        if bytes.len() != body + 8 * n_params {
            return Err(fail(&format!(
                "network checkpoint is {} bytes, header implies {}",
                bytes.len(),
                body + 8 * n_params
            )));
        }
        let mut vals = bytes[body..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut weights = Vec::with_capacity(layers);
        for p in sizes.windows(2) {
            let data: Vec<f64> = vals.by_ref().take(p[0] * p[1]).collect();
            weights.push(Array2::from_shape_vec((p[1], p[0]), data).map_err(|e| fail(&e.to_string()))?);
        }
        let mut biases = Vec::with_capacity(layers);
        for p in sizes.windows(2) {
            biases.push(Array1::from_iter(vals.by_ref().take(p[1])));
        }
        Ok(MlpParams {
            layer_sizes: sizes,
            weights,
            biases,
            head,
        })
    }
}

/// Affine map of each input from its domain interval onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputScaler {
    lower: [f64; 3],
    upper: [f64; 3],
}

impl InputScaler {
    pub fn new(lower: [f64; 3], upper: [f64; 3]) -> Result<Self> {
        if (0..3).any(|k| !(lower[k] < upper[k])) {
            return Err(AbhError::Config("scaler bounds must satisfy lower < upper".into()));
        }
        Ok(InputScaler { lower, upper })
    }

    pub fn for_model(params: &ModelParams) -> Result<Self> {
        Self::new(params.lower(), params.upper())
    }

    pub fn lower(&self) -> [f64; 3] {
        self.lower
    }

    pub fn upper(&self) -> [f64; 3] {
        self.upper
    }

    /// d(scaled)/d(raw) per input.
    pub fn slopes(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| 2.0 / (self.upper[k] - self.lower[k]))
    }

    pub fn scale(&self, x: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| 2.0 * (x[k] - self.lower[k]) / (self.upper[k] - self.lower[k]) - 1.0)
    }

    pub fn unscale(&self, s: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| self.lower[k] + 0.5 * (s[k] + 1.0) * (self.upper[k] - self.lower[k]))
    }

    pub fn contains(&self, x: [f64; 3]) -> bool {
        (0..3).all(|k| x[k] >= self.lower[k] && x[k] <= self.upper[k])
    }

    pub fn check(&self, x: [f64; 3]) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(AbhError::Domain {
                a: x[0],
                z: x[1],
                t: x[2],
            })
        }
    }
}

/// A network whose parameters live on a tape, either as inputs (trainable,
/// so a loss can be differentiated with respect to them) or as constants
/// (frozen).
#[derive(Clone, Debug)]
pub struct TapeNet {
    weights: Vec<Vec<Var>>,
    biases: Vec<Vec<Var>>,
    sizes: Vec<usize>,
    head: OutputHead,
}

impl TapeNet {
    pub fn record(tape: &mut Tape, params: &MlpParams, trainable: bool) -> Self {
        let mut leaf = |x: f64| if trainable { tape.input(x) } else { tape.constant(x) };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (w, b) in params.weights.iter().zip(&params.biases) {
            weights.push(w.iter().map(|&x| leaf(x)).collect());
            biases.push(b.iter().map(|&x| leaf(x)).collect());
        }
        TapeNet {
            weights,
            biases,
            sizes: params.layer_sizes.clone(),
            head: params.head,
        }
    }

    /// Parameter variables in canonical order (matches [`MlpParams::flat`]).
    pub fn params(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn eval(&self, tape: &mut Tape, scaler: &InputScaler, x: [Var; 3]) -> Var {
        let slopes = scaler.slopes();
        let lower = scaler.lower();
        let mut h: Vec<Var> = (0..3)
            .map(|k| {
                let shifted = tape.add_const(x[k], -lower[k]);
                let s = tape.scale(shifted, slopes[k]);
                tape.add_const(s, -1.0)
            })
            .collect();
        let last = self.weights.len() - 1;
        let mut terms = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let fan_in = self.sizes[l];
            let mut next = Vec::with_capacity(b.len());
            for (row, &bias) in w.chunks(fan_in).zip(b) {
                terms.clear();
                for (&wk, &hk) in row.iter().zip(&h) {
                    terms.push(tape.mul(wk, hk));
                }
                terms.push(bias);
                let pre = tape.sum(&terms);
                next.push(if l < last { tape.tanh(pre) } else { pre });
            }
            h = next;
        }
        match self.head {
            OutputHead::Identity => h[0],
            OutputHead::Softplus => tape.softplus(h[0]),
        }
    }
}

/// A network evaluated at one point on a fresh tape, with the point
/// coordinates and the parameters exposed as tape inputs.
pub struct NetOnTape {
    pub tape: Tape,
    pub a: Var,
    pub z: Var,
    pub t: Var,
    pub out: Var,
    pub net: TapeNet,
}

fn eval_on_tape(params: &MlpParams, scaler: &InputScaler, a: f64, z: f64, t: f64) -> Result<NetOnTape> {
    scaler.check([a, z, t])?;
    let mut tape = Tape::with_capacity(4 * params.num_params());
    let net = TapeNet::record(&mut tape, params, true);
    let (va, vz, vt) = (tape.input(a), tape.input(z), tape.input(t));
    let out = net.eval(&mut tape, scaler, [va, vz, vt]);
    tape.check_finite()?;
    Ok(NetOnTape {
        tape,
        a: va,
        z: vz,
        t: vt,
        out,
        net,
    })
}

pub fn eval_value(params: &MlpParams, scaler: &InputScaler, a: f64, z: f64, t: f64) -> Result<NetOnTape> {
    debug_assert_eq!(params.head, OutputHead::Identity);
    eval_on_tape(params, scaler, a, z, t)
}

pub fn eval_density(params: &MlpParams, scaler: &InputScaler, a: f64, z: f64, t: f64) -> Result<NetOnTape> {
    debug_assert_eq!(params.head, OutputHead::Softplus);
    eval_on_tape(params, scaler, a, z, t)
}
