//! Two-phase training of the value and density networks with periodic
//! equilibrium price updates.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::economy::{ModelParams, Prices};
use crate::error::{AbhError, Result};
use crate::fd_oracle::{FieldValues, SolutionField};
use crate::jet::{self, Channel, Channels};
use crate::losses::{self, DensityTerms, LossBreakdown, LossContext, LossWeights, MassGrid, PriceSource};
use crate::net::{default_layer_sizes, InputScaler, MlpParams, OutputHead};
use crate::par::Execution;
use crate::sampler::{build_mesh, lattice, sample_batch, QuadratureMesh, SamplingScheme};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// Leading steps that train the value network alone at fixed prices.
    pub pretrain_steps: usize,
    /// Steps run with Adam before both networks switch to SGD.
    pub adam_steps: usize,
    pub adam_lr: f64,
    pub sgd_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub equilibrium_update_every: usize,
    pub price_damping: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Nodes of the price path over `[0, T]`; also the mass-penalty times.
    pub time_nodes: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub batch_size: usize,
    pub grid_per_dim: usize,
    pub sampling: SamplingScheme,
    /// Quadrature mesh used for the mass penalty and for capital during
    /// training.
    pub train_mesh_a: usize,
    pub train_mesh_z: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 25_000,
            pretrain_steps: 2_500,
            adam_steps: 7_500,
            adam_lr: 1e-3,
            sgd_lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            equilibrium_update_every: 5,
            price_damping: 0.1,
            seed: 42,
            weights: LossWeights::default(),
            time_nodes: 11,
            width: 128,
            hidden_layers: 3,
            batch_size: 100,
            grid_per_dim: 11,
            sampling: SamplingScheme::Lattice,
            train_mesh_a: 21,
            train_mesh_z: 11,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.pretrain_steps <= self.adam_steps && self.pretrain_steps <= self.total_steps) {
            v.push(format!(
                "steps must satisfy pretrain_steps ({}) <= adam_steps ({}) and pretrain_steps <= total_steps ({})",
                self.pretrain_steps, self.adam_steps, self.total_steps
            ));
        }
        for (name, x) in [
            ("adam_lr", self.adam_lr),
            ("sgd_lr", self.sgd_lr),
            ("adam_eps", self.adam_eps),
            ("clip_norm", self.clip_norm),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("{name} = {x} must be positive"));
            }
        }
        for (name, x) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&x) {
                v.push(format!("{name} = {x} must lie in [0, 1)"));
            }
        }
        if !(self.price_damping > 0.0 && self.price_damping <= 1.0) {
            v.push(format!("price_damping = {} must lie in (0, 1]", self.price_damping));
        }
        for (name, x, min) in [
            ("equilibrium_update_every", self.equilibrium_update_every, 1),
            ("time_nodes", self.time_nodes, 2),
            ("width", self.width, 1),
            ("hidden_layers", self.hidden_layers, 1),
            ("batch_size", self.batch_size, 1),
            ("grid_per_dim", self.grid_per_dim, 2),
            ("train_mesh_a", self.train_mesh_a, 2),
            ("train_mesh_z", self.train_mesh_z, 2),
        ] {
            if x < min {
                v.push(format!("{name} = {x} must be at least {min}"));
            }
        }
        v.extend(self.weights.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(AbhError::Config(v.join("; ")))
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        default_layer_sizes(self.width, self.hidden_layers)
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerState {
    pub fn adam(dim: usize) -> Self {
        OptimizerState {
            kind: OptimizerKind::Adam,
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step_count: 0,
        }
    }

    /// Switches to plain SGD, dropping the moments.
    pub fn switch_to_sgd(&mut self) {
        self.kind = OptimizerKind::Sgd;
        self.first_moment.clear();
        self.second_moment.clear();
    }
}

fn check_grads(grads: &[f64], step: usize) -> Result<()> {
    match grads.iter().position(|g| !g.is_finite()) {
        None => Ok(()),
        Some(k) => Err(AbhError::numeric(
            "optimizer step",
            step,
            format!("gradient component {k} is {}", grads[k]),
        )),
    }
}

/// Bias-corrected Adam update. Non-finite gradients leave everything
/// untouched and report the step index.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, lr: f64, hp: &AdamParams) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(state.kind, OptimizerKind::Adam);
    check_grads(grads, state.step_count as usize)?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + hp.eps);
    }
    Ok(())
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    check_grads(grads, 0)?;
    params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g);
    Ok(())
}

/// Rescales `grads` onto the ball of radius `max_norm` if it lies outside.
pub fn clip_gradients(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
}

// ---------------------------------------------------------------------------
// Equilibrium path
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumPath {
    pub t_nodes: Vec<f64>,
    pub k: Vec<f64>,
    pub r: Vec<f64>,
    pub w: Vec<f64>,
    pub y: Vec<f64>,
}

impl EquilibriumPath {
    pub fn from_capital(model: &ModelParams, t_nodes: Vec<f64>, k: Vec<f64>) -> Result<Self> {
        assert_eq!(t_nodes.len(), k.len());
        let prices = k.iter().map(|&x| model.prices_from_capital(x)).collect::<Result<Vec<_>>>()?;
        Ok(EquilibriumPath {
            r: prices.iter().map(|p| p.r).collect(),
            w: prices.iter().map(|p| p.w).collect(),
            y: k.iter().map(|&x| model.output(x)).collect(),
            t_nodes,
            k,
        })
    }

    pub fn constant(model: &ModelParams, t_nodes: Vec<f64>, k: f64) -> Result<Self> {
        let n = t_nodes.len();
        Self::from_capital(model, t_nodes, vec![k; n])
    }

    /// Damped move towards `measured`: `(1 - xi) K_old + xi K_measured`.
    pub fn damped_update(&self, model: &ModelParams, measured: &[f64], xi: f64) -> Result<Self> {
        let k = self.k.iter().zip(measured).map(|(old, new)| (1.0 - xi) * old + xi * new).collect();
        Self::from_capital(model, self.t_nodes.clone(), k)
    }

    /// Linear interpolation weight for `t`, clamped to the path.
    fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.t_nodes.len();
        if t <= self.t_nodes[0] {
            return (0, 0.0);
        }
        if t >= self.t_nodes[n - 1] {
            return (n - 2, 1.0);
        }
        let j = self.t_nodes.partition_point(|&x| x <= t).saturating_sub(1).min(n - 2);
        (j, (t - self.t_nodes[j]) / (self.t_nodes[j + 1] - self.t_nodes[j]))
    }
}

impl PriceSource for EquilibriumPath {
    fn prices_at(&self, t: f64) -> Prices {
        let (j, s) = self.locate(t);
        let lerp = |v: &[f64]| (1.0 - s) * v[j] + s * v[j + 1];
        Prices { r: lerp(&self.r), w: lerp(&self.w), k: lerp(&self.k) }
    }
}

/// Aggregate capital implied by the density network at each time node.
pub fn measure_capital(
    model: &ModelParams,
    density: &MlpParams,
    scaler: &InputScaler,
    mesh: &QuadratureMesh,
    t_nodes: &[f64],
    exec: Execution,
) -> Result<Vec<f64>> {
    let pts: Vec<[f64; 3]> = t_nodes.iter().flat_map(|&t| mesh.points_at(t)).collect();
    let g = jet::evaluate(density, scaler, &pts, Channels::VALUE, exec)?;
    g.get(Channel::Value)
        .chunks(mesh.len())
        .map(|block| model.aggregate_capital(mesh, block))
        .collect()
}

/// Measures capital from the density network and applies the damped update
/// to `previous`.
pub fn compute_equilibrium_path(
    model: &ModelParams,
    density: &MlpParams,
    scaler: &InputScaler,
    mesh: &QuadratureMesh,
    previous: &EquilibriumPath,
    damping: f64,
    exec: Execution,
) -> Result<EquilibriumPath> {
    let measured = measure_capital(model, density, scaler, mesh, &previous.t_nodes, exec)?;
    previous.damped_update(model, &measured, damping)
}

// ---------------------------------------------------------------------------
// Training state and loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: usize,
    pub value: MlpParams,
    pub density: MlpParams,
    pub value_opt: OptimizerState,
    pub density_opt: OptimizerState,
    pub path: EquilibriumPath,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossBreakdown>,
}

impl PartialEq for TrainState {
    fn eq(&self, o: &Self) -> bool {
        self.step == o.step
            && self.value == o.value
            && self.density == o.density
            && self.value_opt == o.value_opt
            && self.density_opt == o.density_opt
            && self.path == o.path
            && self.rng == o.rng
            && self.history.len() == o.history.len()
            && self
                .history
                .iter()
                .zip(&o.history)
                .all(|(a, b)| a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

pub struct Trainer {
    model: ModelParams,
    config: TrainConfig,
    scaler: InputScaler,
    mass_grid: MassGrid,
    state: TrainState,
}

/// Capital of the initial distribution, measured on a fine mesh.
pub fn initial_capital(model: &ModelParams) -> Result<f64> {
    let mesh = build_mesh(model, 101, 101)?;
    model.aggregate_capital_with(&mesh, |a, z| model.initial_density(a, z))
}

impl Trainer {
    pub fn new(model: ModelParams, config: TrainConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let sizes = config.layer_sizes();
        let value = MlpParams::init(config.seed, &sizes, OutputHead::Identity)?;
        let density = MlpParams::init(config.seed ^ 0x9E37_79B9_7F4A_7C15, &sizes, OutputHead::Softplus)?;
        let t_nodes = lattice(0.0, model.horizon, config.time_nodes);
        let path = EquilibriumPath::constant(&model, t_nodes, initial_capital(&model)?)?;
        let state = TrainState {
            step: 0,
            value_opt: OptimizerState::adam(value.num_params()),
            density_opt: OptimizerState::adam(density.num_params()),
            value,
            density,
            path,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            history: Vec::with_capacity(config.total_steps),
        };
        Self::from_state(model, config, state)
    }

    pub fn from_state(model: ModelParams, config: TrainConfig, state: TrainState) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let sizes = config.layer_sizes();
        if state.value.layer_sizes != sizes || state.density.layer_sizes != sizes {
            return Err(AbhError::Config(format!(
                "state networks have layer sizes {:?}, configuration expects {sizes:?}",
                state.value.layer_sizes
            )));
        }
        if state.path.t_nodes.len() != config.time_nodes {
            return Err(AbhError::Config("state price path does not match time_nodes".into()));
        }
        let scaler = InputScaler::for_model(&model)?;
        let mesh = build_mesh(&model, config.train_mesh_a, config.train_mesh_z)?;
        let mass_grid = MassGrid::new(mesh, state.path.t_nodes.clone())?;
        Ok(Trainer { model, config, scaler, mass_grid, state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn scaler(&self) -> &InputScaler {
        &self.scaler
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.total_steps
    }

    fn apply(&self, params: &mut MlpParams, opt: &mut OptimizerState, mut grads: Vec<f64>) -> Result<()> {
        clip_gradients(&mut grads, self.config.clip_norm);
        let mut flat = params.flat();
        match opt.kind {
            OptimizerKind::Adam => {
                let hp = AdamParams {
                    beta1: self.config.adam_beta1,
                    beta2: self.config.adam_beta2,
                    eps: self.config.adam_eps,
                };
                adam_step(&mut flat, &grads, opt, self.config.adam_lr, &hp)?;
            }
            OptimizerKind::Sgd => {
                sgd_step(&mut flat, &grads, self.config.sgd_lr)?;
                opt.step_count += 1;
            }
        }
        params.set_flat(&flat)
    }

    /// Runs one global step and returns its loss breakdown.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let s = self.state.step;
        self.step_inner().map_err(|e| match e {
            AbhError::Numeric { context, index, detail } => AbhError::Numeric {
                context: "training step",
                index: s,
                detail: format!("{context} at index {index}: {detail}"),
            },
            other => other,
        })
    }

    fn step_inner(&mut self) -> Result<LossBreakdown> {
        let s = self.state.step;
        let cfg = &self.config;
        let joint = s >= cfg.pretrain_steps;
        if s == cfg.adam_steps {
            self.state.value_opt.switch_to_sgd();
            self.state.density_opt.switch_to_sgd();
        }
        if joint && (s - cfg.pretrain_steps).is_multiple_of(cfg.equilibrium_update_every) {
            self.state.path = compute_equilibrium_path(
                &self.model,
                &self.state.density,
                &self.scaler,
                self.mass_grid.mesh(),
                &self.state.path,
                cfg.price_damping,
                cfg.execution,
            )?;
        }
        let batch = sample_batch(&mut self.state.rng, &self.model, cfg.batch_size, cfg.grid_per_dim, cfg.sampling)?;

        let path = self.state.path.clone();
        let ctx = LossContext {
            model: &self.model,
            scaler: &self.scaler,
            prices: &path,
            exec: cfg.execution,
        };
        let (value_terms, value_grad) = losses::value_objective(&ctx, &self.state.value, &batch, &cfg.weights)?;
        let mut value = self.state.value.clone();
        let mut value_opt = self.state.value_opt.clone();
        self.apply(&mut value, &mut value_opt, value_grad)?;

        let (density_terms, density_update) = if joint {
            let (terms, grad) =
                losses::density_objective(&ctx, &self.state.density, &value, &batch, &self.mass_grid, &cfg.weights)?;
            let mut density = self.state.density.clone();
            let mut density_opt = self.state.density_opt.clone();
            self.apply(&mut density, &mut density_opt, grad)?;
            (terms, Some((density, density_opt)))
        } else {
            (DensityTerms::default(), None)
        };

        let breakdown = LossBreakdown::from_terms(&value_terms, &density_terms, &cfg.weights);
        if !breakdown.total.is_finite() {
            return Err(AbhError::numeric("total loss", s, format!("{breakdown:?}")));
        }
        self.state.value = value;
        self.state.value_opt = value_opt;
        if let Some((density, opt)) = density_update {
            self.state.density = density;
            self.state.density_opt = opt;
        }
        self.state.history.push(breakdown);
        self.state.step += 1;
        Ok(breakdown)
    }

    /// Steps until `end` steps are complete, calling `hook` after each one.
    pub fn run_until(&mut self, end: usize, mut hook: impl FnMut(&TrainState) -> Result<()>) -> Result<()> {
        let end = end.min(self.config.total_steps);
        while self.state.step < end {
            self.step()?;
            hook(&self.state)?;
        }
        Ok(())
    }

    /// Value-network phase at prices fixed by the initial distribution.
    pub fn pretrain(&mut self) -> Result<()> {
        self.run_until(self.config.pretrain_steps, |_| Ok(()))
    }

    /// Runs the remaining steps of the schedule.
    pub fn train(&mut self, hook: impl FnMut(&TrainState) -> Result<()>) -> Result<()> {
        self.run_until(self.config.total_steps, hook)
    }
}

// ---------------------------------------------------------------------------
// State files
// ---------------------------------------------------------------------------

pub const STATE_MAGIC: &[u8; 8] = b"ABHSTATE";
pub const STATE_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        xs.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let out = &self.buf[self.pos..e];
                self.pos = e;
                Ok(out)
            }
            None => Err(AbhError::Format("state file is truncated".into())),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(AbhError::Format("state file is truncated".into()));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
}

fn write_opt(w: &mut Writer, o: &OptimizerState) {
    w.u8(match o.kind {
        OptimizerKind::Adam => 0,
        OptimizerKind::Sgd => 1,
    });
    w.u64(o.step_count);
    w.f64s(&o.first_moment);
    w.f64s(&o.second_moment);
}

fn read_opt(r: &mut Reader) -> Result<OptimizerState> {
    let kind = match r.u8()? {
        0 => OptimizerKind::Adam,
        1 => OptimizerKind::Sgd,
        t => return Err(AbhError::Format(format!("unknown optimizer tag {t}"))),
    };
    Ok(OptimizerState {
        kind,
        step_count: r.u64()?,
        first_moment: r.f64s()?,
        second_moment: r.f64s()?,
    })
}

impl TrainState {
    /// Binary state: magic, u32 version, u64 step, RNG (32-byte seed, u64
    /// stream, u128 word position), price path, both optimizers, loss history
    /// and both network checkpoints. Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(STATE_MAGIC);
        w.u32(STATE_VERSION);
        w.u64(self.step as u64);
        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.0.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        for v in [&self.path.t_nodes, &self.path.k, &self.path.r, &self.path.w, &self.path.y] {
            w.f64s(v);
        }
        write_opt(&mut w, &self.value_opt);
        write_opt(&mut w, &self.density_opt);
        w.u64(self.history.len() as u64);
        w.u32(LossBreakdown::COLUMNS.len() as u32);
        for b in &self.history {
            b.values().iter().for_each(|x| w.0.extend_from_slice(&x.to_le_bytes()));
        }
        w.bytes(&self.value.serialize());
        w.bytes(&self.density.serialize());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != STATE_MAGIC {
            return Err(AbhError::Format("bad state file magic".into()));
        }
        let mut r = Reader { buf: bytes, pos: 8 };
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(AbhError::Format(format!(
                "state file version {version}, expected {STATE_VERSION}"
            )));
        }
        let step = r.u64()? as usize;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let path = EquilibriumPath {
            t_nodes: r.f64s()?,
            k: r.f64s()?,
            r: r.f64s()?,
            w: r.f64s()?,
            y: r.f64s()?,
        };
        let n = path.t_nodes.len();
        if n < 2 || [&path.k, &path.r, &path.w, &path.y].iter().any(|v| v.len() != n) {
            return Err(AbhError::Format("inconsistent price path lengths".into()));
        }
        let value_opt = read_opt(&mut r)?;
        let density_opt = read_opt(&mut r)?;
        let rows = r.len(8 * LossBreakdown::COLUMNS.len())?;
        if r.u32()? as usize != LossBreakdown::COLUMNS.len() {
            return Err(AbhError::Format("loss history column count mismatch".into()));
        }
        let mut history = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut v = [0.0; 12];
            for x in v.iter_mut() {
                *x = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            }
            history.push(LossBreakdown::from_values(v));
        }
        let value = MlpParams::deserialize(r.bytes()?)?;
        let density = MlpParams::deserialize(r.bytes()?)?;
        if r.pos != bytes.len() {
            return Err(AbhError::Format("trailing bytes after state".into()));
        }
        if history.len() != step {
            return Err(AbhError::Format("loss history length differs from step counter".into()));
        }
        for (o, p) in [(&value_opt, &value), (&density_opt, &density)] {
            let want = if o.kind == OptimizerKind::Adam { p.num_params() } else { 0 };
            if o.first_moment.len() != want || o.second_moment.len() != want {
                return Err(AbhError::Format("optimizer moments do not match the network".into()));
            }
        }
        Ok(TrainState { step, value, density, value_opt, density_opt, path, rng, history })
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &state.to_bytes())
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    match std::fs::read(path) {
        Ok(b) => TrainState::from_bytes(&b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(AbhError::NotFound(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

// ---------------------------------------------------------------------------
// Sampling a trained solution
// ---------------------------------------------------------------------------

/// Trained networks and price path, sampled like a transition solution.
#[derive(Clone, Debug)]
pub struct PinnSolution {
    pub model: ModelParams,
    pub scaler: InputScaler,
    pub value: MlpParams,
    pub density: MlpParams,
    pub path: EquilibriumPath,
    pub exec: Execution,
}

impl PinnSolution {
    pub fn from_state(model: &ModelParams, state: &TrainState, exec: Execution) -> Result<Self> {
        Ok(PinnSolution {
            model: model.clone(),
            scaler: InputScaler::for_model(model)?,
            value: state.value.clone(),
            density: state.density.clone(),
            path: state.path.clone(),
            exec,
        })
    }

    /// `v`, `v_a` and `g` at arbitrary points of the domain.
    pub fn evaluate(&self, pts: &[[f64; 3]]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let v = jet::evaluate(&self.value, &self.scaler, pts, Channels::VALUE.with(Channel::DA), self.exec)?;
        let g = jet::evaluate(&self.density, &self.scaler, pts, Channels::VALUE, self.exec)?;
        Ok((v.get(Channel::Value).to_vec(), v.get(Channel::DA).to_vec(), g.get(Channel::Value).to_vec()))
    }
}

impl SolutionField for PinnSolution {
    fn fields(&self, t: f64, points: &[(f64, f64)]) -> Result<FieldValues> {
        let pts: Vec<[f64; 3]> = points.iter().map(|&(a, z)| [a, z, t]).collect();
        let (v, va, g) = self.evaluate(&pts)?;
        let c = va.iter().map(|&x| self.model.optimal_consumption(x)).collect();
        Ok(FieldValues { v, c, g })
    }

    fn capital(&self, t: f64) -> f64 {
        self.path.prices_at(t).k
    }

    fn rate(&self, t: f64) -> f64 {
        self.path.prices_at(t).r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> TrainConfig {
        TrainConfig {
            total_steps: 30,
            pretrain_steps: 8,
            adam_steps: 20,
            width: 8,
            hidden_layers: 2,
            batch_size: 12,
            train_mesh_a: 9,
            train_mesh_z: 5,
            equilibrium_update_every: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut st = OptimizerState::adam(3);
        adam_step(&mut p, &[3.0, -0.2, 1e-3], &mut st, 0.01, &AdamParams::default()).unwrap();
        for (x, start) in p.iter().zip([1.0, -2.0, 0.5]) {
            assert!(((x - start).abs() - 0.01).abs() < 1e-6);
        }
        assert!(p[0] < 1.0 && p[1] > -2.0);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![1.0, 2.0];
        let mut st = OptimizerState::adam(2);
        adam_step(&mut p, &[1.0, 1.0], &mut st, 0.1, &AdamParams::default()).unwrap();
        let (m, v) = (st.first_moment.clone(), st.second_moment.clone());
        let before = p.clone();
        let mut st0 = OptimizerState::adam(2);
        let mut q = vec![1.0, 2.0];
        adam_step(&mut q, &[0.0, 0.0], &mut st0, 0.1, &AdamParams::default()).unwrap();
        assert_eq!(q, vec![1.0, 2.0]);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1, &AdamParams::default()).unwrap();
        assert!(st.first_moment[0] < m[0] && st.second_moment[0] < v[0]);
        assert_ne!(p, before); // momentum still moves the parameters
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut p = vec![1.0];
        let mut st = OptimizerState::adam(1);
        assert!(matches!(
            adam_step(&mut p, &[f64::NAN], &mut st, 0.1, &AdamParams::default()),
            Err(AbhError::Numeric { .. })
        ));
        assert_eq!((p[0], st.step_count), (1.0, 0));
        assert!(sgd_step(&mut p, &[f64::INFINITY], 0.1).is_err());
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0];
        sgd_step(&mut p, &[2.0], 0.1).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
        let mut q = vec![0.3, 0.4];
        sgd_step(&mut q, &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(q, vec![0.3, 0.4]);
        let (mut a, mut b) = (vec![1.0, 2.0], vec![1.0, 2.0]);
        sgd_step(&mut a, &[0.6, -0.2], 0.1).unwrap();
        sgd_step(&mut b, &[0.3, -0.1], 0.2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clipping() {
        let mut g = vec![6.0, 8.0];
        clip_gradients(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut h = vec![0.3, 0.4];
        clip_gradients(&mut h, 1.0);
        assert_eq!(h, vec![0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut v: Vec<f64> = (0..7).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let max = rng.gen_range(0.1..5.0);
            clip_gradients(&mut v, max);
            assert!(v.iter().map(|x| x * x).sum::<f64>().sqrt() <= max * (1.0 + 1e-12));
        }
    }

    #[test]
    fn equilibrium_path_examples() {
        let m = ModelParams::default();
        let k0 = initial_capital(&m).unwrap();
        assert!((k0 - 1.0).abs() < 1e-3, "{k0}");
        let t = lattice(0.0, 10.0, 11);
        let path = EquilibriumPath::constant(&m, t.clone(), 2.0).unwrap();
        let measured = vec![2.46; 11];
        let undamped = path.damped_update(&m, &measured, 1.0).unwrap();
        assert_eq!(undamped.k, measured);
        assert!((undamped.r[10] - 0.1097).abs() < 1e-4);
        let damped = path.damped_update(&m, &measured, 0.1).unwrap();
        assert!((damped.k[0] - 2.046).abs() < 1e-12);
        for j in 0..11 {
            let p = m.prices_from_capital(damped.k[j]).unwrap();
            assert!((p.r - damped.r[j]).abs() < 1e-12 && (p.w - damped.w[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn path_interpolates_linearly() {
        let m = ModelParams::default();
        let path = EquilibriumPath::from_capital(&m, vec![0.0, 5.0, 10.0], vec![1.0, 2.0, 4.0]).unwrap();
        let p = path.prices_at(2.5);
        assert!((p.r - 0.5 * (path.r[0] + path.r[1])).abs() < 1e-15);
        assert_eq!(path.prices_at(10.0).r, path.r[2]);
        assert_eq!(path.prices_at(0.0).w, path.w[0]);
        assert!((path.prices_at(7.5).k - 3.0).abs() < 1e-15);
    }

    #[test]
    fn capital_of_initial_density_network_free() {
        // a density network pinned to a constant gives mean wealth 2.5
        let m = ModelParams::default();
        let s = InputScaler::for_model(&m).unwrap();
        let mut g = MlpParams::zeros(&[3, 2, 1], OutputHead::Softplus).unwrap();
        g.biases[1][0] = 0.3;
        let mesh = build_mesh(&m, 21, 11).unwrap();
        let k = measure_capital(&m, &g, &s, &mesh, &[0.0, 5.0], Execution::Sequential).unwrap();
        assert!(k.iter().all(|x| (x - 2.5).abs() < 1e-12));
    }

    #[test]
    fn schedule_freeze_and_switch() {
        let cfg = small_config();
        let mut tr = Trainer::new(ModelParams::default(), cfg.clone()).unwrap();
        let density0 = tr.state().density.clone();
        let path0 = tr.state().path.clone();
        let mut seen = Vec::new();
        tr.run_until(cfg.pretrain_steps, |s| {
            seen.push(s.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, (1..=8).collect::<Vec<_>>());
        assert_eq!(tr.state().density, density0);
        assert_eq!(tr.state().path, path0);
        assert!(tr.state().history.iter().all(|b| b.kf == 0.0 && b.mass == 0.0));

        let value_before = tr.state().value.clone();
        tr.step().unwrap();
        assert_ne!(tr.state().density, density0);
        assert_ne!(tr.state().value, value_before);
        assert_ne!(tr.state().path, path0);

        tr.run_until(cfg.adam_steps, |_| Ok(())).unwrap();
        assert_eq!(tr.state().value_opt.kind, OptimizerKind::Adam);
        tr.step().unwrap();
        assert_eq!(tr.state().value_opt.kind, OptimizerKind::Sgd);
        assert_eq!(tr.state().density_opt.kind, OptimizerKind::Sgd);
        tr.train(|_| Ok(())).unwrap();
        assert_eq!(tr.state().history.len(), cfg.total_steps);
        let p = &tr.state().path;
        for j in 0..p.k.len() {
            assert!(p.k[j] >= 0.0 && p.k[j] <= 5.0);
            let q = ModelParams::default().prices_from_capital(p.k[j]).unwrap();
            assert!((q.r - p.r[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn runs_are_deterministic_across_execution_modes() {
        let run = |exec| {
            let cfg = TrainConfig { execution: exec, ..small_config() };
            let mut tr = Trainer::new(ModelParams::default(), cfg).unwrap();
            tr.train(|_| Ok(())).unwrap();
            tr.into_state()
        };
        let a = run(Execution::Parallel);
        let b = run(Execution::Parallel);
        let c = run(Execution::Sequential);
        assert!(a == b);
        assert!(a == c);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("state.bin");
        let cfg = small_config();
        let mut full = Trainer::new(ModelParams::default(), cfg.clone()).unwrap();
        full.run_until(12, |_| Ok(())).unwrap();
        save_state(full.state(), &file).unwrap();
        full.run_until(22, |_| Ok(())).unwrap();

        let state = load_state(&file).unwrap();
        let mut resumed = Trainer::from_state(ModelParams::default(), cfg, state).unwrap();
        resumed.run_until(22, |_| Ok(())).unwrap();
        assert!(resumed.state() == full.state());
    }

    #[test]
    fn state_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_state(&dir.path().join("none.bin")), Err(AbhError::NotFound(_))));
        let mut tr = Trainer::new(ModelParams::default(), small_config()).unwrap();
        tr.run_until(3, |_| Ok(())).unwrap();
        let bytes = tr.state().to_bytes();
        assert!(TrainState::from_bytes(&bytes).unwrap() == *tr.state());
        for cut in [bytes.len() - 1, bytes.len() / 2, 20] {
            assert!(matches!(TrainState::from_bytes(&bytes[..cut]), Err(AbhError::Format(_))));
        }
        let mut v2 = bytes.clone();
        v2[8] = 2;
        let err = TrainState::from_bytes(&v2).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn config_validation_collects_all_problems() {
        let cfg = TrainConfig { adam_lr: -1.0, price_damping: 0.0, adam_steps: 1, ..TrainConfig::default() };
        let v = cfg.violations();
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn pinn_solution_samples_consumption_from_value_slope() {
        use crate::fd_oracle::{compare, solve_transition, FdGrid, TransitionOptions};
        let m = ModelParams::default();
        let tr = Trainer::new(m.clone(), small_config()).unwrap();
        let sol = PinnSolution::from_state(&m, tr.state(), Execution::Sequential).unwrap();
        let f = sol.fields(1.0, &[(0.5, 1.0), (3.0, 1.2)]).unwrap();
        for (k, &(a, z)) in [(0.5, 1.0), (3.0, 1.2)].iter().enumerate() {
            let h = 1e-5;
            let va = (sol.value.eval_point(&sol.scaler, [a + h, z, 1.0]) - sol.value.eval_point(&sol.scaler, [a - h, z, 1.0])) / (2.0 * h);
            assert!((f.c[k] - m.optimal_consumption(va)).abs() < 1e-6 * f.c[k].max(1.0));
            assert!((f.v[k] - sol.value.eval_point(&sol.scaler, [a, z, 1.0])).abs() < 1e-12);
        }
        assert_eq!(sol.capital(3.3), tr.state().path.k[0]);
        let fd = solve_transition(&m, &FdGrid { n_a: 21, n_z: 3, n_t: 11 }, None, &TransitionOptions::default()).unwrap();
        let rep = compare(&fd, &sol, 8.0).unwrap();
        assert!(rep.rel_l2_c.is_finite() && rep.rel_l2_v.is_finite() && rep.rel_l2_g.is_finite());
        assert!(rep.k_rel_max > 0.0);
    }
}
