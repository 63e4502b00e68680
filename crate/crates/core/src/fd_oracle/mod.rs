//! Finite-difference solver for the same finite-horizon transition, used to
//! check the network solution.
//!
//! Grid values are stored wealth-major, `k = i * n_z + j`, so coupling in
//! wealth sits `n_z` entries off the diagonal and every linear system is
//! banded. The HJB is stepped backwards implicitly with an upwind wealth
//! drift; the KF is stepped forwards with the transpose of the same
//! generator, which conserves mass exactly.

mod banded;
mod compare;

pub use banded::Banded;
pub use compare::{compare, CompareReport, FieldValues, SolutionField};

use serde::{Deserialize, Serialize};

use crate::economy::{ModelParams, Prices};
use crate::error::{AbhError, Result};
use crate::sampler::lattice;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdGrid {
    pub n_a: usize,
    /// One node gives the pure wealth problem at the middle productivity.
    pub n_z: usize,
    pub n_t: usize,
}

impl Default for FdGrid {
    fn default() -> Self {
        FdGrid { n_a: 101, n_z: 21, n_t: 101 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitionOptions {
    pub max_outer: usize,
    pub tol: f64,
    pub damping: f64,
    /// Pseudo-time step of the stationary solve for the terminal value.
    pub stationary_step: f64,
    pub stationary_tol: f64,
    pub stationary_max_iter: usize,
}

impl Default for TransitionOptions {
    fn default() -> Self {
        TransitionOptions {
            max_outer: 200,
            tol: 1e-5,
            damping: 0.5,
            stationary_step: 1000.0,
            stationary_tol: 1e-8,
            stationary_max_iter: 1000,
        }
    }
}

impl FdGrid {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_a < 3 {
            v.push(format!("fd n_a = {} must be at least 3", self.n_a));
        }
        if self.n_z == 2 || self.n_z == 0 {
            v.push(format!("fd n_z = {} must be 1 or at least 3", self.n_z));
        }
        if self.n_t < 2 {
            v.push(format!("fd n_t = {} must be at least 2", self.n_t));
        }
        v
    }
}

impl TransitionOptions {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.max_outer == 0 {
            v.push("fd max_outer must be positive".into());
        }
        if !(self.tol > 0.0) {
            v.push(format!("fd tol = {} must be positive", self.tol));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            v.push(format!("fd damping = {} must lie in (0, 1]", self.damping));
        }
        if !(self.stationary_step > 0.0) {
            v.push(format!("fd stationary_step = {} must be positive", self.stationary_step));
        }
        v
    }
}

/// Node coordinates and spacings of a grid on the model box.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub a: Vec<f64>,
    pub z: Vec<f64>,
    pub t: Vec<f64>,
    pub da: f64,
    pub dz: f64,
    pub dt: f64,
}

impl Mesh {
    pub fn new(m: &ModelParams, grid: &FdGrid) -> Result<Self> {
        let v = grid.violations();
        if !v.is_empty() {
            return Err(AbhError::Config(v.join("; ")));
        }
        let a = lattice(m.a_min, m.a_max, grid.n_a);
        let (z, dz) = if grid.n_z == 1 {
            (vec![m.z_center()], m.z_max - m.z_min)
        } else {
            (lattice(m.z_min, m.z_max, grid.n_z), (m.z_max - m.z_min) / (grid.n_z - 1) as f64)
        };
        let t = lattice(0.0, m.horizon, grid.n_t);
        Ok(Mesh {
            da: (m.a_max - m.a_min) / (grid.n_a - 1) as f64,
            dt: m.horizon / (grid.n_t - 1) as f64,
            a,
            z,
            t,
            dz,
        })
    }

    pub fn n_state(&self) -> usize {
        self.a.len() * self.z.len()
    }

    fn cell(&self) -> f64 {
        self.da * self.dz
    }

    /// Discrete mass `sum g da dz`.
    pub fn mass(&self, g: &[f64]) -> f64 {
        g.iter().sum::<f64>() * self.cell()
    }

    /// Discrete mean wealth.
    pub fn mean_wealth(&self, g: &[f64]) -> f64 {
        let nz = self.z.len();
        g.iter().enumerate().map(|(k, x)| self.a[k / nz] * x).sum::<f64>() * self.cell()
    }
}

/// Direction of the wealth difference chosen at a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(i8)]
pub enum Upwind {
    Backward = -1,
    Zero = 0,
    Forward = 1,
}

/// Consumption, its utility and the savings drift at every node of one
/// time slice.
#[derive(Clone, Debug)]
struct Policy {
    c: Vec<f64>,
    u: Vec<f64>,
    drift: Vec<f64>,
    dir: Vec<Upwind>,
}

fn utility(m: &ModelParams, c: f64) -> f64 {
    if (m.gamma - 1.0).abs() < 1e-12 {
        c.ln()
    } else {
        c.powf(1.0 - m.gamma) / (1.0 - m.gamma)
    }
}

fn policy(m: &ModelParams, mesh: &Mesh, p: &Prices, v: &[f64]) -> Result<Policy> {
    let (na, nz) = (mesh.a.len(), mesh.z.len());
    let n = na * nz;
    let mut out = Policy {
        c: vec![0.0; n],
        u: vec![0.0; n],
        drift: vec![0.0; n],
        dir: vec![Upwind::Zero; n],
    };
    for i in 0..na {
        for j in 0..nz {
            let k = i * nz + j;
            let income = m.income(mesh.a[i], mesh.z[j], p);
            if !(income > 0.0) {
                return Err(AbhError::Oracle(format!(
                    "income {income} is not positive at (a, z) = ({}, {})",
                    mesh.a[i], mesh.z[j]
                )));
            }
            let at_income = income.powf(-m.gamma);
            let fwd = if i + 1 < na { (v[k + nz] - v[k]) / mesh.da } else { at_income };
            let bwd = if i > 0 { (v[k] - v[k - nz]) / mesh.da } else { at_income };
            let s_fwd = income - m.optimal_consumption(fwd);
            let s_bwd = income - m.optimal_consumption(bwd);
            let (dir, va) = if s_fwd > 0.0 {
                (Upwind::Forward, fwd)
            } else if s_bwd < 0.0 {
                (Upwind::Backward, bwd)
            } else {
                (Upwind::Zero, at_income)
            };
            let c = if dir == Upwind::Zero { income } else { m.optimal_consumption(va) };
            out.c[k] = c;
            out.u[k] = utility(m, c);
            out.drift[k] = if dir == Upwind::Zero { 0.0 } else { income - c };
            out.dir[k] = dir;
        }
    }
    Ok(out)
}

/// Rows of the generator: `(column, rate)` pairs including the diagonal.
type Generator = Vec<Vec<(usize, f64)>>;

/// Generator of the controlled process for a given wealth drift. Flows out
/// of the box are dropped, so every row sums to zero.
fn generator(m: &ModelParams, mesh: &Mesh, drift: &[f64]) -> Generator {
    let (na, nz) = (mesh.a.len(), mesh.z.len());
    let mut rows = Vec::with_capacity(na * nz);
    let diff = if nz > 1 { 0.5 * m.sigma_z * m.sigma_z / (mesh.dz * mesh.dz) } else { 0.0 };
    for i in 0..na {
        for j in 0..nz {
            let k = i * nz + j;
            let mut row = Vec::with_capacity(5);
            let mut diag = 0.0;
            let up = if i + 1 < na { drift[k].max(0.0) / mesh.da } else { 0.0 };
            let down = if i > 0 { -drift[k].min(0.0) / mesh.da } else { 0.0 };
            if down > 0.0 {
                row.push((k - nz, down));
            }
            if up > 0.0 {
                row.push((k + nz, up));
            }
            diag -= up + down;
            if nz > 1 {
                let mu = m.drift_z(mesh.z[j]);
                let zu = if j + 1 < nz { diff + mu.max(0.0) / mesh.dz } else { 0.0 };
                let zd = if j > 0 { diff - mu.min(0.0) / mesh.dz } else { 0.0 };
                if zd > 0.0 {
                    row.push((k - 1, zd));
                }
                if zu > 0.0 {
                    row.push((k + 1, zu));
                }
                diag -= zu + zd;
            }
            row.push((k, diag));
            rows.push(row);
        }
    }
    rows
}

/// Solves `[(1/dt + rho) I - A] v = u + v_next / dt`.
fn implicit_hjb_step(m: &ModelParams, mesh: &Mesh, gen: &Generator, u: &[f64], v_next: &[f64], dt: f64) -> std::result::Result<Vec<f64>, usize> {
    let n = mesh.n_state();
    let mut a = Banded::zeros(n, mesh.z.len());
    for (k, row) in gen.iter().enumerate() {
        a.add(k, k, 1.0 / dt + m.rho);
        for &(l, rate) in row {
            a.add(k, l, -rate);
        }
    }
    let mut rhs: Vec<f64> = u.iter().zip(v_next).map(|(u, v)| u + v / dt).collect();
    a.solve(&mut rhs)?;
    Ok(rhs)
}

/// Value function of the stationary problem at fixed prices, by implicit
/// pseudo-time iteration from `start`.
pub fn stationary_value(m: &ModelParams, mesh: &Mesh, p: &Prices, start: Option<&[f64]>, opts: &TransitionOptions) -> Result<Vec<f64>> {
    let nz = mesh.z.len();
    let mut v: Vec<f64> = match start {
        Some(v) => v.to_vec(),
        None => (0..mesh.n_state())
            .map(|k| utility(m, m.income(mesh.a[k / nz], mesh.z[k % nz], p)) / m.rho)
            .collect(),
    };
    for _ in 0..opts.stationary_max_iter {
        let pol = policy(m, mesh, p, &v)?;
        let gen = generator(m, mesh, &pol.drift);
        let next = implicit_hjb_step(m, mesh, &gen, &pol.u, &v, opts.stationary_step)
            .map_err(|row| AbhError::Oracle(format!("stationary HJB solve failed at row {row}")))?;
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change < opts.stationary_tol {
            return Ok(v);
        }
    }
    Err(AbhError::Oracle(format!(
        "stationary HJB did not settle within {} iterations",
        opts.stationary_max_iter
    )))
}

/// Output of the backward sweep, one vector per time node.
#[derive(Clone, Debug)]
pub struct HjbSweep {
    pub v: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub drift: Vec<Vec<f64>>,
    pub dir: Vec<Vec<Upwind>>,
}

/// Implicit upwind backward sweep from `v_terminal` at the last time node.
/// The policy used on `[t_n, t_{n+1}]` comes from `v(t_{n+1})` and is
/// reported at `t_n`.
pub fn hjb_backward_sweep(m: &ModelParams, mesh: &Mesh, prices: &[Prices], v_terminal: &[f64]) -> Result<HjbSweep> {
    let nt = mesh.t.len();
    assert_eq!(prices.len(), nt);
    let mut v = vec![Vec::new(); nt];
    let mut c = vec![Vec::new(); nt];
    let mut drift = vec![Vec::new(); nt];
    let mut dir = vec![Vec::new(); nt];
    v[nt - 1] = v_terminal.to_vec();
    let last = policy(m, mesh, &prices[nt - 1], v_terminal)?;
    c[nt - 1] = last.c;
    drift[nt - 1] = last.drift;
    dir[nt - 1] = last.dir;
    for n in (0..nt - 1).rev() {
        let pol = policy(m, mesh, &prices[n], &v[n + 1])?;
        let gen = generator(m, mesh, &pol.drift);
        v[n] = implicit_hjb_step(m, mesh, &gen, &pol.u, &v[n + 1], mesh.dt)
            .map_err(|row| AbhError::Oracle(format!("HJB solve failed at time index {n}, row {row}")))?;
        c[n] = pol.c;
        drift[n] = pol.drift;
        dir[n] = pol.dir;
    }
    Ok(HjbSweep { v, c, drift, dir })
}

/// Forward KF sweep `g_{n+1} = (I - dt A_n^T)^{-1} g_n` with the generator
/// implied by the consumption array. Returns the densities and the largest
/// per-step mass drift before renormalisation.
pub fn kf_forward_sweep(
    m: &ModelParams,
    mesh: &Mesh,
    c: &[Vec<f64>],
    prices: &[Prices],
    g_initial: &[f64],
) -> Result<(Vec<Vec<f64>>, f64)> {
    let nt = mesh.t.len();
    let nz = mesh.z.len();
    let n = mesh.n_state();
    if g_initial.iter().any(|&x| x < 0.0) {
        return Err(AbhError::Oracle("initial density has negative entries".into()));
    }
    let mut g = Vec::with_capacity(nt);
    g.push(g_initial.to_vec());
    let mut worst: f64 = 0.0;
    for step in 0..nt - 1 {
        let drift: Vec<f64> = (0..n)
            .map(|k| m.savings_drift(mesh.a[k / nz], mesh.z[k % nz], c[step][k], &prices[step]))
            .collect();
        let gen = generator(m, mesh, &drift);
        let mut a = Banded::zeros(n, nz);
        for (k, row) in gen.iter().enumerate() {
            a.add(k, k, 1.0);
            for &(l, rate) in row {
                a.add(l, k, -mesh.dt * rate);
            }
        }
        let before = mesh.mass(&g[step]);
        let mut next = g[step].clone();
        a.solve(&mut next)
            .map_err(|row| AbhError::Oracle(format!("KF solve failed at time index {step}, row {row}")))?;
        if let Some(k) = next.iter().position(|&x| x < -1e-12) {
            return Err(AbhError::Oracle(format!(
                "negative density {} at time index {}, node {k}",
                next[k],
                step + 1
            )));
        }
        next.iter_mut().for_each(|x| *x = x.max(0.0));
        let drift_in_mass = (mesh.mass(&next) - before).abs();
        worst = worst.max(drift_in_mass);
        if drift_in_mass > 1e-12 {
            let k = before / mesh.mass(&next);
            next.iter_mut().for_each(|x| *x *= k);
        }
        g.push(next);
    }
    Ok((g, worst))
}

/// Initial density on the grid, scaled to unit discrete mass.
pub fn initial_density_on(m: &ModelParams, mesh: &Mesh) -> Vec<f64> {
    let nz = mesh.z.len();
    let mut g: Vec<f64> = (0..mesh.n_state())
        .map(|k| m.initial_density(mesh.a[k / nz], mesh.z[k % nz]))
        .collect();
    let mass = mesh.mass(&g);
    g.iter_mut().for_each(|x| *x /= mass);
    g
}

/// Converged transition. Arrays are indexed `[time][i * n_z + j]`.
#[derive(Clone, Debug)]
pub struct FdSolution {
    pub mesh: Mesh,
    pub v: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub drift: Vec<Vec<f64>>,
    pub dir: Vec<Vec<Upwind>>,
    pub k_path: Vec<f64>,
    pub r_path: Vec<f64>,
    pub w_path: Vec<f64>,
    pub outer_iterations: usize,
    /// Max relative change of the capital path per outer iteration.
    pub residual_history: Vec<f64>,
    /// Largest per-step change of discrete mass in the KF sweep.
    pub max_mass_drift: f64,
}

fn prices_along(m: &ModelParams, k: &[f64]) -> Result<Vec<Prices>> {
    k.iter().map(|&x| m.prices_from_capital(x)).collect()
}

/// Damped fixed point on the capital path: prices, terminal value, backward
/// HJB, forward KF, measured capital.
pub fn solve_transition(m: &ModelParams, grid: &FdGrid, g_initial: Option<&[f64]>, opts: &TransitionOptions) -> Result<FdSolution> {
    m.validate()?;
    let v = opts.violations();
    if !v.is_empty() {
        return Err(AbhError::Config(v.join("; ")));
    }
    let mesh = Mesh::new(m, grid)?;
    let g0 = match g_initial {
        Some(g) => g.to_vec(),
        None => initial_density_on(m, &mesh),
    };
    if (mesh.mass(&g0) - 1.0).abs() > 1e-10 {
        return Err(AbhError::Oracle("initial density does not have unit mass".into()));
    }
    let nt = mesh.t.len();
    let mut k_path = vec![mesh.mean_wealth(&g0); nt];
    let mut history = Vec::new();
    let mut terminal: Option<Vec<f64>> = None;
    for iter in 1..=opts.max_outer {
        let prices = prices_along(m, &k_path)?;
        let vt = stationary_value(m, &mesh, &prices[nt - 1], terminal.as_deref(), opts)?;
        let sweep = hjb_backward_sweep(m, &mesh, &prices, &vt)?;
        let (g, mass_drift) = kf_forward_sweep(m, &mesh, &sweep.c, &prices, &g0)?;
        let measured: Vec<f64> = g.iter().map(|x| mesh.mean_wealth(x)).collect();
        let change = measured
            .iter()
            .zip(&k_path)
            .map(|(new, old)| ((new - old) / old).abs())
            .fold(0.0, f64::max);
        history.push(change);
        if change < opts.tol {
            return Ok(FdSolution {
                r_path: prices.iter().map(|p| p.r).collect(),
                w_path: prices.iter().map(|p| p.w).collect(),
                k_path,
                mesh,
                v: sweep.v,
                c: sweep.c,
                g,
                drift: sweep.drift,
                dir: sweep.dir,
                outer_iterations: iter,
                residual_history: history,
                max_mass_drift: mass_drift,
            });
        }
        terminal = Some(vt);
        k_path = k_path
            .iter()
            .zip(&measured)
            .map(|(old, new)| (1.0 - opts.damping) * old + opts.damping * new)
            .collect();
    }
    Err(AbhError::NonConvergence {
        iterations: opts.max_outer,
        last: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

impl FdSolution {
    /// Fraction of `(i, j, n)` with `v` nondecreasing from `i` to `i + 1`.
    pub fn monotone_fraction(&self) -> f64 {
        let nz = self.mesh.z.len();
        let (mut ok, mut total) = (0usize, 0usize);
        for v in &self.v {
            for k in 0..v.len() - nz {
                total += 1;
                ok += (v[k + nz] >= v[k]) as usize;
            }
        }
        ok as f64 / total as f64
    }

    /// Fraction of interior wealth nodes with a nonpositive second difference.
    pub fn concave_fraction(&self) -> f64 {
        let nz = self.mesh.z.len();
        let (mut ok, mut total) = (0usize, 0usize);
        for v in &self.v {
            for k in nz..v.len() - nz {
                total += 1;
                ok += (v[k + nz] - 2.0 * v[k] + v[k - nz] <= 1e-12) as usize;
            }
        }
        ok as f64 / total as f64
    }

    /// Fraction of nodes whose difference direction matches the sign of the
    /// resulting drift.
    pub fn upwind_consistent_fraction(&self) -> f64 {
        let (mut ok, mut total) = (0usize, 0usize);
        for (d, s) in self.dir.iter().zip(&self.drift) {
            for (dir, s) in d.iter().zip(s) {
                total += 1;
                ok += match dir {
                    Upwind::Forward => *s > 0.0,
                    Upwind::Backward => *s < 0.0,
                    Upwind::Zero => *s == 0.0,
                } as usize;
            }
        }
        ok as f64 / total as f64
    }

    /// Largest savings drift on the upper wealth face.
    pub fn max_drift_at_a_max(&self) -> f64 {
        let nz = self.mesh.z.len();
        let start = (self.mesh.a.len() - 1) * nz;
        self.drift
            .iter()
            .flat_map(|d| d[start..].iter().copied())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mass_errors(&self) -> Vec<f64> {
        self.g.iter().map(|g| (self.mesh.mass(g) - 1.0).abs()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> (ModelParams, FdGrid, TransitionOptions) {
        (
            ModelParams::default(),
            FdGrid { n_a: 41, n_z: 5, n_t: 21 },
            TransitionOptions::default(),
        )
    }

    #[test]
    fn zero_drift_keeps_density_fixed() {
        let mut m = ModelParams::default();
        m.sigma_z = 0.0;
        let mesh = Mesh::new(&m, &FdGrid { n_a: 21, n_z: 3, n_t: 6 }).unwrap();
        let prices = vec![Prices { r: 0.25, w: 0.7, k: 1.0 }; 6];
        let nz = mesh.z.len();
        let c: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..mesh.n_state()).map(|k| m.income(mesh.a[k / nz], mesh.z[k % nz], &prices[0])).collect())
            .collect();
        let g0 = initial_density_on(&m, &mesh);
        let (g, _) = kf_forward_sweep(&m, &mesh, &c, &prices, &g0).unwrap();
        assert!(g.iter().all(|x| x == &g0));
    }

    #[test]
    fn positive_savings_raise_mean_wealth_and_conserve_mass() {
        let m = ModelParams::default();
        let mesh = Mesh::new(&m, &FdGrid { n_a: 41, n_z: 5, n_t: 11 }).unwrap();
        let prices = vec![Prices { r: 0.25, w: 0.7, k: 1.0 }; 11];
        let nz = mesh.z.len();
        let c: Vec<Vec<f64>> = (0..11)
            .map(|_| (0..mesh.n_state()).map(|k| 0.5 * m.income(mesh.a[k / nz], mesh.z[k % nz], &prices[0])).collect())
            .collect();
        let g0 = initial_density_on(&m, &mesh);
        let (g, drift) = kf_forward_sweep(&m, &mesh, &c, &prices, &g0).unwrap();
        assert!(drift < 1e-10);
        for w in g.windows(2) {
            assert!(mesh.mean_wealth(&w[1]) > mesh.mean_wealth(&w[0]));
            assert!((mesh.mass(&w[1]) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn one_dimensional_problem_is_increasing_and_concave() {
        let mut m = ModelParams::default();
        m.sigma_z = 0.0;
        let mesh = Mesh::new(&m, &FdGrid { n_a: 101, n_z: 1, n_t: 11 }).unwrap();
        let p = m.prices_from_capital(2.0).unwrap();
        let v = stationary_value(&m, &mesh, &p, None, &TransitionOptions::default()).unwrap();
        for k in 1..v.len() - 1 {
            assert!(v[k + 1] > v[k]);
            assert!(v[k + 1] - 2.0 * v[k] + v[k - 1] <= 1e-12);
        }
    }

    #[test]
    fn transition_properties() {
        let (m, grid, opts) = quick();
        let sol = solve_transition(&m, &grid, None, &opts).unwrap();
        let mesh = &sol.mesh;
        let k0 = mesh.mean_wealth(&initial_density_on(&m, mesh));
        assert!((sol.k_path[0] - k0).abs() < 1e-12);
        assert!((k0 - 1.0).abs() < 0.01);
        assert!(sol.mass_errors().iter().all(|e| *e < 1e-10));
        assert!(sol.max_mass_drift < 1e-10);
        assert_eq!(sol.monotone_fraction(), 1.0);
        assert!(sol.concave_fraction() >= 0.99);
        assert_eq!(sol.upwind_consistent_fraction(), 1.0);
        assert!(sol.max_drift_at_a_max() <= 0.0);
        for n in 0..sol.k_path.len() {
            let p = m.prices_from_capital(sol.k_path[n]).unwrap();
            assert!((p.r - sol.r_path[n]).abs() < 1e-12 && (p.w - sol.w_path[n]).abs() < 1e-12);
        }
        assert!(sol.g.iter().flatten().all(|x| *x >= 0.0));
    }

    #[test]
    fn non_convergence_reports_history() {
        let (m, grid, mut opts) = quick();
        opts.max_outer = 2;
        opts.tol = 1e-14;
        match solve_transition(&m, &grid, None, &opts) {
            Err(AbhError::NonConvergence { iterations, history, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(history.len(), 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
