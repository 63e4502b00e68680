//! Loss terms for the value and density networks.
//!
//! Two routes compute the same residuals:
//!
//! * the batch route runs the network through [`crate::jet`] and applies a
//!   small per-point residual head, which is what training uses;
//! * the tape route records the network and all its input derivatives on a
//!   single [`Tape`], with the density flux differentiated as a product.
//!
//! Both routes share the residual expressions below, and the tests hold them
//! to each other and to finite differences.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::economy::{ModelParams, Prices};
use crate::error::{AbhError, Result};
use crate::jet::{self, Channel, Channels, Jets};
use crate::net::{InputScaler, MlpParams, TapeNet};
use crate::par::Execution;
use crate::sampler::{CollocationBatch, QuadratureMesh};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_hjb_pde: f64,
    pub w_kf_pde: f64,
    pub w_ic_v: f64,
    pub w_ic_g: f64,
    /// Shared by the four value-function faces.
    pub w_bc: f64,
    pub w_mass: f64,
    pub w_phys: f64,
    /// Zero-flux penalty on the density at the four faces. Off by default.
    pub w_flux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_hjb_pde: 0.1,
            w_kf_pde: 0.1,
            w_ic_v: 1.0,
            w_ic_g: 1.0,
            w_bc: 0.1,
            w_mass: 1.0,
            w_phys: 0.1,
            w_flux: 0.0,
        }
    }
}

impl LossWeights {
    pub fn violations(&self) -> Vec<String> {
        [
            ("w_hjb_pde", self.w_hjb_pde),
            ("w_kf_pde", self.w_kf_pde),
            ("w_ic_v", self.w_ic_v),
            ("w_ic_g", self.w_ic_g),
            ("w_bc", self.w_bc),
            ("w_mass", self.w_mass),
            ("w_phys", self.w_phys),
            ("w_flux", self.w_flux),
        ]
        .into_iter()
        .filter(|(_, w)| !(w.is_finite() && *w >= 0.0))
        .map(|(name, w)| format!("{name} = {w} must be a finite nonnegative number"))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(AbhError::Config(v.join("; ")))
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            w_hjb_pde: k * self.w_hjb_pde,
            w_kf_pde: k * self.w_kf_pde,
            w_ic_v: k * self.w_ic_v,
            w_ic_g: k * self.w_ic_g,
            w_bc: k * self.w_bc,
            w_mass: k * self.w_mass,
            w_phys: k * self.w_phys,
            w_flux: k * self.w_flux,
        }
    }
}

/// Raw (unweighted) loss terms of one step, plus their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub hjb: f64,
    pub kf: f64,
    pub ic_v: f64,
    pub ic_g: f64,
    pub bc_a_min: f64,
    pub bc_a_max: f64,
    pub bc_z_min: f64,
    pub bc_z_max: f64,
    pub mass: f64,
    pub phys: f64,
    pub flux: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 12] = [
        "hjb", "kf", "ic_v", "ic_g", "bc_a_min", "bc_a_max", "bc_z_min", "bc_z_max", "mass", "phys", "flux",
        "total",
    ];

    pub fn values(&self) -> [f64; 12] {
        [
            self.hjb,
            self.kf,
            self.ic_v,
            self.ic_g,
            self.bc_a_min,
            self.bc_a_max,
            self.bc_z_min,
            self.bc_z_max,
            self.mass,
            self.phys,
            self.flux,
            self.total,
        ]
    }

    pub fn from_values(v: [f64; 12]) -> Self {
        LossBreakdown {
            hjb: v[0],
            kf: v[1],
            ic_v: v[2],
            ic_g: v[3],
            bc_a_min: v[4],
            bc_a_max: v[5],
            bc_z_min: v[6],
            bc_z_max: v[7],
            mass: v[8],
            phys: v[9],
            flux: v[10],
            total: v[11],
        }
    }

    pub fn from_terms(value: &ValueTerms, density: &DensityTerms, weights: &LossWeights) -> Self {
        let mut b = LossBreakdown {
            hjb: value.hjb,
            kf: density.kf,
            ic_v: value.ic,
            ic_g: density.ic,
            bc_a_min: value.bc[0],
            bc_a_max: value.bc[1],
            bc_z_min: value.bc[2],
            bc_z_max: value.bc[3],
            mass: density.mass,
            phys: value.phys,
            flux: density.flux,
            total: 0.0,
        };
        b.total = total_loss(&b, weights);
        b
    }
}

/// Weighted sum of the raw terms.
pub fn total_loss(b: &LossBreakdown, w: &LossWeights) -> f64 {
    w.w_hjb_pde * b.hjb
        + w.w_kf_pde * b.kf
        + w.w_ic_v * b.ic_v
        + w.w_ic_g * b.ic_g
        + w.w_bc * (b.bc_a_min + b.bc_a_max + b.bc_z_min + b.bc_z_max)
        + w.w_mass * b.mass
        + w.w_phys * b.phys
        + w.w_flux * b.flux
}

/// Interest rate and wage as functions of model time.
pub trait PriceSource {
    fn prices_at(&self, t: f64) -> Prices;
}

impl PriceSource for Prices {
    fn prices_at(&self, _t: f64) -> Prices {
        *self
    }
}

/// A scalar loss and its gradient with respect to one network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Shared inputs of every loss evaluation.
#[derive(Clone, Copy)]
pub struct LossContext<'a> {
    pub model: &'a ModelParams,
    pub scaler: &'a InputScaler,
    pub prices: &'a dyn PriceSource,
    pub exec: Execution,
}

/// Quadrature mesh replicated over a set of times, for the mass penalty.
#[derive(Clone, Debug)]
pub struct MassGrid {
    mesh: QuadratureMesh,
    t_nodes: Vec<f64>,
    points: Vec<[f64; 3]>,
}

impl MassGrid {
    pub fn new(mesh: QuadratureMesh, t_nodes: Vec<f64>) -> Result<Self> {
        if t_nodes.is_empty() {
            return Err(AbhError::Config("mass penalty needs at least one time node".into()));
        }
        let points = t_nodes.iter().flat_map(|&t| mesh.points_at(t)).collect();
        Ok(MassGrid { mesh, t_nodes, points })
    }

    pub fn mesh(&self) -> &QuadratureMesh {
        &self.mesh
    }

    pub fn t_nodes(&self) -> &[f64] {
        &self.t_nodes
    }
}

// ---------------------------------------------------------------------------
// Residual expressions
// ---------------------------------------------------------------------------

fn utility_expr(tape: &mut Tape, m: &ModelParams, c: Var) -> Var {
    if (m.gamma - 1.0).abs() < 1e-12 {
        tape.ln(c)
    } else {
        let p = tape.powf(c, 1.0 - m.gamma);
        tape.scale(p, 1.0 / (1.0 - m.gamma))
    }
}

/// `[v, v_a, v_z, v_t, v_zz]` at `(a, z)` to the HJB residual
/// `rho v - u(c*) - v_a mu_a - mu_z v_z - sigma^2 v_zz / 2 - v_t`.
pub fn hjb_expr(tape: &mut Tape, m: &ModelParams, p: &Prices, a: f64, z: f64, ch: [Var; 5]) -> Var {
    let [v, va, vz, vt, vzz] = ch;
    let clamped = tape.max_const(va, m.marginal_value_floor);
    let c = tape.powf(clamped, -1.0 / m.gamma);
    let u = utility_expr(tape, m, c);
    let neg_c = tape.neg(c);
    let mu_a = tape.add_const(neg_c, m.income(a, z, p));
    let discount = tape.scale(v, m.rho);
    let wealth = tape.mul(va, mu_a);
    let drift = tape.scale(vz, m.drift_z(z));
    let diffusion = tape.scale(vzz, 0.5 * m.variance_z(z));
    let outflow = tape.sum(&[u, wealth, drift, diffusion, vt]);
    tape.sub(discount, outflow)
}

/// `[g, g_a, g_z, g_t, g_zz]` to the expanded KF residual, with the marginal
/// value `v_a` and its slope `v_aa` held fixed.
#[allow(clippy::too_many_arguments)]
pub fn kf_expr(tape: &mut Tape, m: &ModelParams, p: &Prices, a: f64, z: f64, va: f64, vaa: f64, ch: [Var; 5]) -> Var {
    let [g, ga, gz, gt, gzz] = ch;
    let mu_a = m.savings_drift(a, z, m.optimal_consumption(va), p);
    let dmu_a = p.r - m.optimal_consumption_slope(va) * vaa;
    let level = tape.scale(g, dmu_a + m.drift_z_slope());
    let wealth = tape.scale(ga, mu_a);
    let drift = tape.scale(gz, m.drift_z(z));
    let diffusion = tape.scale(gzz, -0.5 * m.variance_z(z));
    tape.sum(&[gt, level, wealth, drift, diffusion])
}

/// Value of `build` over fresh inputs and its gradient in those inputs.
fn head_gradient<const N: usize>(
    inputs: [f64; N],
    build: impl FnOnce(&mut Tape, [Var; N]) -> Var,
) -> Result<(f64, [f64; N])> {
    let mut tape = Tape::with_capacity(32);
    let vars = inputs.map(|x| tape.input(x));
    let root = build(&mut tape, vars);
    tape.check_finite()?;
    let g = tape.gradient(root, &vars)?;
    let mut out = [0.0; N];
    out.copy_from_slice(&g);
    Ok((tape.value(root), out))
}

const HJB_CHANNELS: [Channel; 5] = [Channel::Value, Channel::DA, Channel::DZ, Channel::DT, Channel::DZZ];
const KF_CHANNELS: [Channel; 5] = HJB_CHANNELS;

fn gather<const N: usize>(jets: &Jets, list: [Channel; N], i: usize) -> [f64; N] {
    list.map(|c| jets.get(c)[i])
}

fn scatter_add<const N: usize>(adj: &mut Jets, list: [Channel; N], i: usize, k: f64, d: [f64; N]) {
    for (c, x) in list.into_iter().zip(d) {
        adj.get_mut(c)[i] += k * x;
    }
}

fn non_empty<T>(what: &str, pts: &[T]) -> Result<()> {
    if pts.is_empty() {
        Err(AbhError::Config(format!("{what} batch is empty")))
    } else {
        Ok(())
    }
}

fn bad_residual(context: &'static str, i: usize, x: [f64; 3], r: f64) -> AbhError {
    AbhError::numeric(context, i, format!("residual {r} at (a, z, t) = ({}, {}, {})", x[0], x[1], x[2]))
}

// ---------------------------------------------------------------------------
// Heads: jets in, (mean loss, adjoint of the jets) out
// ---------------------------------------------------------------------------

fn hjb_head(ctx: &LossContext, pts: &[[f64; 3]], v: &Jets) -> Result<(f64, Jets)> {
    let n = pts.len() as f64;
    let mut adj = v.zeros_like();
    let mut loss = 0.0;
    for (i, x) in pts.iter().enumerate() {
        let p = ctx.prices.prices_at(x[2]);
        let (r, d) = head_gradient(gather(v, HJB_CHANNELS, i), |tape, ch| {
            hjb_expr(tape, ctx.model, &p, x[0], x[1], ch)
        })
        .map_err(|_| bad_residual("hjb residual", i, *x, f64::NAN))?;
        if !r.is_finite() {
            return Err(bad_residual("hjb residual", i, *x, r));
        }
        loss += r * r / n;
        scatter_add(&mut adj, HJB_CHANNELS, i, 2.0 * r / n, d);
    }
    Ok((loss, adj))
}

fn phys_head(v: &Jets) -> (f64, Jets) {
    let n = v.len() as f64;
    let mut adj = v.zeros_like();
    let mut loss = 0.0;
    for i in 0..v.len() {
        let va = v.get(Channel::DA)[i];
        let vaa = v.get(Channel::DAA)[i];
        let dec = va.min(0.0);
        let convex = vaa.max(0.0);
        loss += (dec * dec + convex * convex) / n;
        adj.get_mut(Channel::DA)[i] = 2.0 * dec / n;
        adj.get_mut(Channel::DAA)[i] = 2.0 * convex / n;
    }
    (loss, adj)
}

/// Mean squared difference between the value channel and `target(i)`.
fn fit_head(g: &Jets, target: impl Fn(usize) -> f64) -> (f64, Jets) {
    let n = g.len() as f64;
    let mut adj = g.zeros_like();
    let mut loss = 0.0;
    for i in 0..g.len() {
        let e = g.get(Channel::Value)[i] - target(i);
        loss += e * e / n;
        adj.get_mut(Channel::Value)[i] = 2.0 * e / n;
    }
    (loss, adj)
}

/// Mean squared value of one derivative channel, measured from `target(i)`.
fn slope_head(v: &Jets, ch: Channel, target: impl Fn(usize) -> Result<f64>) -> Result<(f64, Jets)> {
    let n = v.len() as f64;
    let mut adj = v.zeros_like();
    let mut loss = 0.0;
    for i in 0..v.len() {
        let e = v.get(ch)[i] - target(i)?;
        loss += e * e / n;
        adj.get_mut(ch)[i] = 2.0 * e / n;
    }
    Ok((loss, adj))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Face {
    AMin,
    AMax,
    ZMin,
    ZMax,
}

impl Face {
    const ALL: [Face; 4] = [Face::AMin, Face::AMax, Face::ZMin, Face::ZMax];

    fn points(self, batch: &CollocationBatch) -> &[[f64; 3]] {
        match self {
            Face::AMin => &batch.boundary_a_min,
            Face::AMax => &batch.boundary_a_max,
            Face::ZMin => &batch.boundary_z_min,
            Face::ZMax => &batch.boundary_z_max,
        }
    }

    fn channel(self) -> Channel {
        match self {
            Face::AMin | Face::AMax => Channel::DA,
            Face::ZMin | Face::ZMax => Channel::DZ,
        }
    }
}

fn bc_head(ctx: &LossContext, face: Face, pts: &[[f64; 3]], v: &Jets) -> Result<(f64, Jets)> {
    slope_head(v, face.channel(), |i| match face {
        Face::AMin => {
            let x = pts[i];
            let p = ctx.prices.prices_at(x[2]);
            ctx.model.marginal_utility(ctx.model.income(ctx.model.a_min, x[1], &p))
        }
        _ => Ok(0.0),
    })
}

fn kf_head(ctx: &LossContext, pts: &[[f64; 3]], g: &Jets, v: &Jets) -> Result<(f64, Jets)> {
    let n = pts.len() as f64;
    let mut adj = g.zeros_like();
    let mut loss = 0.0;
    for (i, x) in pts.iter().enumerate() {
        let p = ctx.prices.prices_at(x[2]);
        let (va, vaa) = (v.get(Channel::DA)[i], v.get(Channel::DAA)[i]);
        let (r, d) = head_gradient(gather(g, KF_CHANNELS, i), |tape, ch| {
            kf_expr(tape, ctx.model, &p, x[0], x[1], va, vaa, ch)
        })
        .map_err(|_| bad_residual("kf residual", i, *x, f64::NAN))?;
        if !r.is_finite() {
            return Err(bad_residual("kf residual", i, *x, r));
        }
        loss += r * r / n;
        scatter_add(&mut adj, KF_CHANNELS, i, 2.0 * r / n, d);
    }
    Ok((loss, adj))
}

fn mass_head(grid: &MassGrid, g: &Jets) -> (f64, Jets) {
    let w = grid.mesh.weights();
    let nt = grid.t_nodes.len() as f64;
    let vals = g.get(Channel::Value);
    let mut adj = g.zeros_like();
    let mut loss = 0.0;
    for (j, block) in vals.chunks(w.len()).enumerate() {
        let e = grid.mesh.integrate(block) - 1.0;
        loss += e * e / nt;
        let k = 2.0 * e / nt;
        let out = &mut adj.get_mut(Channel::Value)[j * w.len()..(j + 1) * w.len()];
        out.iter_mut().zip(w).for_each(|(o, wk)| *o = k * wk);
    }
    (loss, adj)
}

/// Zero-flux penalty: `mu_a g` on the wealth faces, `mu_z g - sigma^2 g_z / 2`
/// on the productivity faces. `pts` lists the a-face points first.
fn flux_head(ctx: &LossContext, pts: &[[f64; 3]], n_a_face: usize, g: &Jets, v: &Jets) -> (f64, Jets) {
    let m = ctx.model;
    let n = pts.len() as f64;
    let mut adj = g.zeros_like();
    let mut loss = 0.0;
    for (i, x) in pts.iter().enumerate() {
        let gv = g.get(Channel::Value)[i];
        if i < n_a_face {
            let p = ctx.prices.prices_at(x[2]);
            let mu_a = m.savings_drift(x[0], x[1], m.optimal_consumption(v.get(Channel::DA)[i]), &p);
            let f = mu_a * gv;
            loss += f * f / n;
            adj.get_mut(Channel::Value)[i] = 2.0 * f / n * mu_a;
        } else {
            let half_var = 0.5 * m.variance_z(x[1]);
            let f = m.drift_z(x[1]) * gv - half_var * g.get(Channel::DZ)[i];
            loss += f * f / n;
            adj.get_mut(Channel::Value)[i] = 2.0 * f / n * m.drift_z(x[1]);
            adj.get_mut(Channel::DZ)[i] = -2.0 * f / n * half_var;
        }
    }
    (loss, adj)
}

fn ic_points(pairs: &[[f64; 2]]) -> Vec<[f64; 3]> {
    pairs.iter().map(|p| [p[0], p[1], 0.0]).collect()
}

fn value_channels() -> Channels {
    Channels::ALL.with(Channel::DAA)
}

fn add_into(total: &mut [f64], k: f64, g: &[f64]) {
    total.iter_mut().zip(g).for_each(|(t, x)| *t += k * x);
}

/// Runs `params` over `pts`, applies `head`, and pulls the adjoint back.
fn single_head(
    ctx: &LossContext,
    params: &MlpParams,
    pts: &[[f64; 3]],
    channels: Channels,
    head: impl FnOnce(&Jets) -> Result<(f64, Jets)>,
) -> Result<LossTerm> {
    let (jets, trace) = jet::forward(params, ctx.scaler, pts, channels, ctx.exec)?;
    let (value, adj) = head(&jets)?;
    let grad = jet::backward(params, &trace, &adj, ctx.exec);
    jet::first_non_finite("loss gradient", &grad)?;
    Ok(LossTerm { value, grad })
}

// ---------------------------------------------------------------------------
// Individual loss terms
// ---------------------------------------------------------------------------

pub fn hjb_residual_loss(ctx: &LossContext, value: &MlpParams, pts: &[[f64; 3]]) -> Result<LossTerm> {
    non_empty("interior", pts)?;
    single_head(ctx, value, pts, Channels::ALL, |v| hjb_head(ctx, pts, v))
}

pub fn ic_loss_value(ctx: &LossContext, value: &MlpParams, pairs: &[[f64; 2]]) -> Result<LossTerm> {
    non_empty("initial-time", pairs)?;
    let pts = ic_points(pairs);
    single_head(ctx, value, &pts, Channels::VALUE, |v| {
        Ok(fit_head(v, |i| ctx.model.initial_value_guess(pts[i][0], pts[i][1])))
    })
}

/// The four face losses in the order a_min, a_max, z_min, z_max.
pub fn bc_losses_value(ctx: &LossContext, value: &MlpParams, batch: &CollocationBatch) -> Result<[LossTerm; 4]> {
    let terms = Face::ALL.map(|face| {
        let pts = face.points(batch);
        non_empty("boundary", pts)?;
        single_head(ctx, value, pts, Channels::VALUE.with(face.channel()), |v| {
            bc_head(ctx, face, pts, v)
        })
    });
    let [a, b, c, d] = terms;
    Ok([a?, b?, c?, d?])
}

pub fn phys_loss_value(ctx: &LossContext, value: &MlpParams, pts: &[[f64; 3]]) -> Result<LossTerm> {
    non_empty("interior", pts)?;
    single_head(ctx, value, pts, Channels::VALUE.with(Channel::DAA), |v| Ok(phys_head(v)))
}

/// KF residual loss. The value network is read but never differentiated, so
/// the gradient covers the density parameters only.
pub fn kf_residual_loss(
    ctx: &LossContext,
    density: &MlpParams,
    value: &MlpParams,
    pts: &[[f64; 3]],
) -> Result<LossTerm> {
    non_empty("interior", pts)?;
    let v = jet::evaluate(value, ctx.scaler, pts, Channels::VALUE.with(Channel::DAA), ctx.exec)?;
    single_head(ctx, density, pts, Channels::ALL, |g| kf_head(ctx, pts, g, &v))
}

pub fn ic_loss_density(ctx: &LossContext, density: &MlpParams, pairs: &[[f64; 2]]) -> Result<LossTerm> {
    non_empty("initial-time", pairs)?;
    let pts = ic_points(pairs);
    single_head(ctx, density, &pts, Channels::VALUE, |g| {
        Ok(fit_head(g, |i| ctx.model.initial_density(pts[i][0], pts[i][1])))
    })
}

pub fn mass_loss(ctx: &LossContext, density: &MlpParams, grid: &MassGrid) -> Result<LossTerm> {
    single_head(ctx, density, &grid.points, Channels::VALUE, |g| Ok(mass_head(grid, g)))
}

fn flux_points(batch: &CollocationBatch) -> (Vec<[f64; 3]>, usize) {
    let mut pts: Vec<[f64; 3]> = batch.boundary_a_min.iter().chain(&batch.boundary_a_max).copied().collect();
    let n_a = pts.len();
    pts.extend(batch.boundary_z_min.iter().chain(&batch.boundary_z_max));
    (pts, n_a)
}

pub fn flux_loss(ctx: &LossContext, density: &MlpParams, value: &MlpParams, batch: &CollocationBatch) -> Result<LossTerm> {
    let (pts, n_a) = flux_points(batch);
    non_empty("boundary", &pts)?;
    let v = jet::evaluate(value, ctx.scaler, &pts, Channels::VALUE.with(Channel::DA), ctx.exec)?;
    single_head(ctx, density, &pts, Channels::VALUE.with(Channel::DZ), |g| {
        Ok(flux_head(ctx, &pts, n_a, g, &v))
    })
}

// ---------------------------------------------------------------------------
// Fused objectives used by the trainer
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ValueTerms {
    pub hjb: f64,
    pub ic: f64,
    /// a_min, a_max, z_min, z_max.
    pub bc: [f64; 4],
    pub phys: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DensityTerms {
    pub kf: f64,
    pub ic: f64,
    pub mass: f64,
    pub flux: f64,
}

/// Every value-network term on one batch and the gradient of their weighted
/// sum. The interior points are run through the network once for both the
/// HJB residual and the shape penalty.
pub fn value_objective(
    ctx: &LossContext,
    value: &MlpParams,
    batch: &CollocationBatch,
    w: &LossWeights,
) -> Result<(ValueTerms, Vec<f64>)> {
    non_empty("interior", &batch.interior)?;
    non_empty("initial-time", &batch.initial_time)?;
    let mut grad = vec![0.0; value.num_params()];
    let mut terms = ValueTerms::default();

    let pts = &batch.interior;
    let (jets, trace) = jet::forward(value, ctx.scaler, pts, value_channels(), ctx.exec)?;
    let (hjb, mut adj) = hjb_head(ctx, pts, &jets)?;
    let (phys, adj_phys) = phys_head(&jets);
    adj.scale(w.w_hjb_pde);
    adj.add_scaled(w.w_phys, &adj_phys);
    add_into(&mut grad, 1.0, &jet::backward(value, &trace, &adj, ctx.exec));
    terms.hjb = hjb;
    terms.phys = phys;

    let ic = ic_loss_value(ctx, value, &batch.initial_time)?;
    add_into(&mut grad, w.w_ic_v, &ic.grad);
    terms.ic = ic.value;

    let bc = bc_losses_value(ctx, value, batch)?;
    for (k, t) in bc.iter().enumerate() {
        add_into(&mut grad, w.w_bc, &t.grad);
        terms.bc[k] = t.value;
    }
    jet::first_non_finite("value gradient", &grad)?;
    Ok((terms, grad))
}

/// Every density-network term on one batch and the gradient of their
/// weighted sum, with the value network frozen.
pub fn density_objective(
    ctx: &LossContext,
    density: &MlpParams,
    value: &MlpParams,
    batch: &CollocationBatch,
    grid: &MassGrid,
    w: &LossWeights,
) -> Result<(DensityTerms, Vec<f64>)> {
    let mut grad = vec![0.0; density.num_params()];
    let kf = kf_residual_loss(ctx, density, value, &batch.interior)?;
    add_into(&mut grad, w.w_kf_pde, &kf.grad);
    let ic = ic_loss_density(ctx, density, &batch.initial_time)?;
    add_into(&mut grad, w.w_ic_g, &ic.grad);
    let mass = mass_loss(ctx, density, grid)?;
    add_into(&mut grad, w.w_mass, &mass.grad);
    let mut flux_value = 0.0;
    if w.w_flux > 0.0 {
        let flux = flux_loss(ctx, density, value, batch)?;
        add_into(&mut grad, w.w_flux, &flux.grad);
        flux_value = flux.value;
    }
    jet::first_non_finite("density gradient", &grad)?;
    Ok((
        DensityTerms {
            kf: kf.value,
            ic: ic.value,
            mass: mass.value,
            flux: flux_value,
        },
        grad,
    ))
}

// ---------------------------------------------------------------------------
// Tape route
// ---------------------------------------------------------------------------

/// A residual recorded with all its input derivatives on one tape.
pub struct ResidualTape {
    pub tape: Tape,
    pub residual: Var,
    /// Trainable parameters in canonical order.
    pub params: Vec<Var>,
    /// The point coordinates `a, z, t`.
    pub inputs: [Var; 3],
}

fn point_inputs(tape: &mut Tape, scaler: &InputScaler, x: [f64; 3]) -> Result<[Var; 3]> {
    scaler.check(x)?;
    Ok(x.map(|c| tape.input(c)))
}

fn record_hjb(tape: &mut Tape, ctx: &LossContext, net: &TapeNet, x: [f64; 3]) -> Result<(Var, [Var; 3])> {
    let xs = point_inputs(tape, ctx.scaler, x)?;
    let v = net.eval(tape, ctx.scaler, xs);
    let d = tape.grad_vars(v, &xs);
    let vzz = tape.grad_vars(d[1], &[xs[1]])[0];
    let p = ctx.prices.prices_at(x[2]);
    let r = hjb_expr(tape, ctx.model, &p, x[0], x[1], [v, d[0], d[1], d[2], vzz]);
    Ok((r, xs))
}

fn record_kf(
    tape: &mut Tape,
    ctx: &LossContext,
    density: &TapeNet,
    value: &TapeNet,
    x: [f64; 3],
) -> Result<(Var, [Var; 3])> {
    let m = ctx.model;
    let xs = point_inputs(tape, ctx.scaler, x)?;
    let [a, z, t] = xs;
    let p = ctx.prices.prices_at(x[2]);
    let v = value.eval(tape, ctx.scaler, xs);
    let va = tape.grad_vars(v, &[a])[0];
    let clamped = tape.max_const(va, m.marginal_value_floor);
    let c = tape.powf(clamped, -1.0 / m.gamma);
    let ra = tape.scale(a, p.r);
    let wz = tape.scale(z, p.w);
    let income = tape.add(ra, wz);
    let mu_a = tape.sub(income, c);
    let g = density.eval(tape, ctx.scaler, xs);

    let flux_a = tape.mul(mu_a, g);
    let div_a = tape.grad_vars(flux_a, &[a])[0];
    let zr = tape.scale(z, -m.z_reversion);
    let mu_z = tape.add_const(zr, m.mu_z + m.z_reversion * m.z_center());
    let flux_z = tape.mul(mu_z, g);
    let div_z = tape.grad_vars(flux_z, &[z])[0];
    let spread = tape.scale(g, m.variance_z(x[1]));
    let spread_z = tape.grad_vars(spread, &[z])[0];
    let spread_zz = tape.grad_vars(spread_z, &[z])[0];
    let half = tape.scale(spread_zz, -0.5);
    let gt = tape.grad_vars(g, &[t])[0];
    let r = tape.sum(&[gt, div_a, div_z, half]);
    Ok((r, xs))
}

/// HJB residual at one point with the value network trainable.
pub fn hjb_residual_tape(ctx: &LossContext, value: &MlpParams, x: [f64; 3]) -> Result<ResidualTape> {
    let mut tape = Tape::new();
    let net = TapeNet::record(&mut tape, value, true);
    let (residual, inputs) = record_hjb(&mut tape, ctx, &net, x)?;
    tape.check_finite()?;
    Ok(ResidualTape { tape, residual, params: net.params(), inputs })
}

/// KF residual at one point with the density network trainable and the
/// value network recorded as constants.
pub fn kf_residual_tape(ctx: &LossContext, density: &MlpParams, value: &MlpParams, x: [f64; 3]) -> Result<ResidualTape> {
    let mut tape = Tape::new();
    let frozen = TapeNet::record(&mut tape, value, false);
    let net = TapeNet::record(&mut tape, density, true);
    let (residual, inputs) = record_kf(&mut tape, ctx, &net, &frozen, x)?;
    tape.check_finite()?;
    Ok(ResidualTape { tape, residual, params: net.params(), inputs })
}

fn mean_square_on_tape(tape: &mut Tape, residuals: &[Var]) -> Var {
    let squares: Vec<Var> = residuals.iter().map(|&r| tape.square(r)).collect();
    let s = tape.sum(&squares);
    tape.scale(s, 1.0 / residuals.len() as f64)
}

/// [`hjb_residual_loss`] computed entirely on one tape.
pub fn hjb_loss_on_tape(ctx: &LossContext, value: &MlpParams, pts: &[[f64; 3]]) -> Result<LossTerm> {
    non_empty("interior", pts)?;
    let mut tape = Tape::new();
    let net = TapeNet::record(&mut tape, value, true);
    let residuals = pts
        .iter()
        .map(|x| record_hjb(&mut tape, ctx, &net, *x).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let loss = mean_square_on_tape(&mut tape, &residuals);
    tape.check_finite()?;
    let grad = tape.param_gradient(loss, &net.params())?;
    Ok(LossTerm { value: tape.value(loss), grad })
}

/// [`kf_residual_loss`] computed entirely on one tape.
pub fn kf_loss_on_tape(ctx: &LossContext, density: &MlpParams, value: &MlpParams, pts: &[[f64; 3]]) -> Result<LossTerm> {
    non_empty("interior", pts)?;
    let mut tape = Tape::new();
    let frozen = TapeNet::record(&mut tape, value, false);
    let net = TapeNet::record(&mut tape, density, true);
    let residuals = pts
        .iter()
        .map(|x| record_kf(&mut tape, ctx, &net, &frozen, *x).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let loss = mean_square_on_tape(&mut tape, &residuals);
    tape.check_finite()?;
    let grad = tape.param_gradient(loss, &net.params())?;
    Ok(LossTerm { value: tape.value(loss), grad })
}
