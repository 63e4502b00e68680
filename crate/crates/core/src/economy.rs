//! Closed-form pieces of the economy: CRRA preferences, Cobb-Douglas prices,
//! the optimal consumption rule, drifts, initial conditions and aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{AbhError, Result};
use crate::sampler::QuadratureMesh;

/// Economic constants and the state-space box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// CRRA coefficient.
    pub gamma: f64,
    /// Discount rate.
    pub rho: f64,
    /// Productivity volatility.
    pub sigma_z: f64,
    /// Constant part of the productivity drift.
    pub mu_z: f64,
    /// Mean-reversion speed towards the middle of the productivity range.
    /// Zero gives driftless reflected Brownian motion.
    pub z_reversion: f64,
    pub alpha: f64,
    pub delta: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub horizon: f64,
    pub ic_wealth_mean: f64,
    pub ic_wealth_sd: f64,
    /// Smallest admissible consumption for `utility`.
    pub consumption_floor: f64,
    /// Floor applied to the marginal value before inverting marginal utility.
    pub marginal_value_floor: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            gamma: 2.0,
            rho: 0.05,
            sigma_z: 0.02,
            mu_z: 0.0,
            z_reversion: 0.0,
            alpha: 0.3,
            delta: 0.05,
            a_min: 0.0,
            a_max: 5.0,
            z_min: 0.5,
            z_max: 1.5,
            horizon: 10.0,
            ic_wealth_mean: 1.0,
            ic_wealth_sd: 0.2,
            consumption_floor: 1e-6,
            marginal_value_floor: 1e-6,
        }
    }
}

/// Factor prices implied by an aggregate capital stock.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prices {
    pub r: f64,
    pub w: f64,
    pub k: f64,
}

impl ModelParams {
    /// Every violated constraint, one message per field.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                out.push(msg.to_string());
            }
        };
        let finite = [
            self.gamma,
            self.rho,
            self.sigma_z,
            self.mu_z,
            self.z_reversion,
            self.alpha,
            self.delta,
            self.a_min,
            self.a_max,
            self.z_min,
            self.z_max,
            self.horizon,
            self.ic_wealth_mean,
            self.ic_wealth_sd,
            self.consumption_floor,
            self.marginal_value_floor,
        ]
        .iter()
        .all(|x| x.is_finite());
        check(finite, "model parameters must be finite");
        check(self.gamma > 0.0, "gamma must be > 0");
        check(self.rho >= 0.0, "rho must be >= 0");
        check(self.sigma_z >= 0.0, "sigma_z must be >= 0");
        check(self.z_reversion >= 0.0, "z_reversion must be >= 0");
        check(self.alpha > 0.0 && self.alpha < 1.0, "alpha must lie in (0, 1)");
        check(self.delta >= 0.0, "delta must be >= 0");
        check(self.a_min < self.a_max, "a_min must be < a_max");
        check(self.z_min < self.z_max, "z_min must be < z_max");
        check(self.z_min > 0.0, "z_min must be > 0");
        check(self.horizon > 0.0, "horizon must be > 0");
        check(self.ic_wealth_sd > 0.0, "ic_wealth_sd must be > 0");
        check(self.consumption_floor > 0.0, "consumption_floor must be > 0");
        check(self.marginal_value_floor > 0.0, "marginal_value_floor must be > 0");
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(AbhError::Config(v.join("; ")))
        }
    }

    pub fn lower(&self) -> [f64; 3] {
        [self.a_min, self.z_min, 0.0]
    }

    pub fn upper(&self) -> [f64; 3] {
        [self.a_max, self.z_max, self.horizon]
    }

    pub fn contains(&self, a: f64, z: f64, t: f64) -> bool {
        (self.a_min..=self.a_max).contains(&a)
            && (self.z_min..=self.z_max).contains(&z)
            && (0.0..=self.horizon).contains(&t)
    }

    pub fn utility(&self, c: f64) -> Result<f64> {
        if !(c >= self.consumption_floor) {
            return Err(AbhError::numeric(
                "utility",
                0,
                format!("consumption {c} below the floor {}", self.consumption_floor),
            ));
        }
        Ok(if self.gamma == 1.0 {
            c.ln()
        } else {
            c.powf(1.0 - self.gamma) / (1.0 - self.gamma)
        })
    }

    pub fn marginal_utility(&self, c: f64) -> Result<f64> {
        if !(c >= self.consumption_floor) {
            return Err(AbhError::numeric(
                "marginal utility",
                0,
                format!("consumption {c} below the floor {}", self.consumption_floor),
            ));
        }
        Ok(c.powf(-self.gamma))
    }

    /// Inverse marginal utility with the marginal value clamped from below.
    pub fn optimal_consumption(&self, v_a: f64) -> f64 {
        v_a.max(self.marginal_value_floor).powf(-1.0 / self.gamma)
    }

    /// Derivative of [`Self::optimal_consumption`] in `v_a` (right-hand at the clamp).
    pub fn optimal_consumption_slope(&self, v_a: f64) -> f64 {
        if v_a >= self.marginal_value_floor {
            -v_a.powf(-1.0 / self.gamma - 1.0) / self.gamma
        } else {
            0.0
        }
    }

    pub fn income(&self, a: f64, z: f64, prices: &Prices) -> f64 {
        prices.w * z + prices.r * a
    }

    pub fn savings_drift(&self, a: f64, z: f64, c: f64, prices: &Prices) -> f64 {
        self.income(a, z, prices) - c
    }

    pub fn z_center(&self) -> f64 {
        0.5 * (self.z_min + self.z_max)
    }

    pub fn drift_z(&self, z: f64) -> f64 {
        self.mu_z + self.z_reversion * (self.z_center() - z)
    }

    pub fn drift_z_slope(&self) -> f64 {
        -self.z_reversion
    }

    /// `sigma_z(z)^2`.
    pub fn variance_z(&self, _z: f64) -> f64 {
        self.sigma_z * self.sigma_z
    }

    pub fn prices_from_capital(&self, k: f64) -> Result<Prices> {
        if !(k > 0.0) || !k.is_finite() {
            return Err(AbhError::Equilibrium(format!("aggregate capital {k} is not positive")));
        }
        Ok(Prices {
            r: self.alpha * k.powf(self.alpha - 1.0) - self.delta,
            w: (1.0 - self.alpha) * k.powf(self.alpha),
            k,
        })
    }

    pub fn output(&self, k: f64) -> f64 {
        k.powf(self.alpha)
    }

    /// Heuristic value at t = 0.
    pub fn initial_value_guess(&self, a: f64, z: f64) -> f64 {
        (1.0 + a + z * z).ln()
    }

    /// Truncated Gaussian in wealth times a uniform density in productivity,
    /// normalised to unit mass on the box.
    pub fn initial_density(&self, a: f64, _z: f64) -> f64 {
        let m = self.ic_wealth_mean;
        let s = self.ic_wealth_sd;
        let cdf = |x: f64| 0.5 * libm::erfc(-(x - m) / (s * std::f64::consts::SQRT_2));
        let mass = cdf(self.a_max) - cdf(self.a_min);
        let x = (a - m) / s;
        let pdf = (-0.5 * x * x).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        pdf / mass / (self.z_max - self.z_min)
    }

    /// Mean wealth of a density sampled on `mesh` (values in mesh point
    /// order). The density is normalised by its own quadrature mass first.
    pub fn aggregate_capital(&self, mesh: &QuadratureMesh, density: &[f64]) -> Result<f64> {
        let mass = mesh.integrate(density);
        if !(mass >= 1e-8) {
            return Err(AbhError::Equilibrium(format!("density mass {mass:.3e} is degenerate")));
        }
        let first_moment: f64 = mesh
            .points()
            .zip(mesh.weights())
            .zip(density)
            .map(|(((a, _), w), g)| w * a * g)
            .sum();
        Ok(first_moment / mass)
    }

    pub fn aggregate_capital_with(
        &self,
        mesh: &QuadratureMesh,
        density: impl Fn(f64, f64) -> f64,
    ) -> Result<f64> {
        let values: Vec<f64> = mesh.points().map(|(a, z)| density(a, z)).collect();
        self.aggregate_capital(mesh, &values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::build_mesh;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn crra_values() {
        let m = ModelParams::default();
        assert_eq!(m.utility(1.0).unwrap(), -1.0);
        assert_eq!(m.marginal_utility(1.0).unwrap(), 1.0);
        assert_eq!(m.utility(2.0).unwrap(), -0.5);
        assert_eq!(m.marginal_utility(2.0).unwrap(), 0.25);
        assert!(m.utility(1e-9).is_err());
        let grid: Vec<f64> = (0..100).map(|i| 0.1 + 4.9 * i as f64 / 99.0).collect();
        for w in grid.windows(2) {
            assert!(m.marginal_utility(w[1]).unwrap() < m.marginal_utility(w[0]).unwrap());
        }
    }

    #[test]
    fn marginal_utility_is_derivative_of_utility() {
        let m = ModelParams::default();
        let h = 1e-6;
        for i in 0..50 {
            let c = 0.2 + 0.1 * i as f64;
            let fd = (m.utility(c + h).unwrap() - m.utility(c - h).unwrap()) / (2.0 * h);
            assert!(close(fd, m.marginal_utility(c).unwrap(), 1e-8), "c={c}");
        }
    }

    #[test]
    fn consumption_rule() {
        let m = ModelParams::default();
        assert_eq!(m.optimal_consumption(1.0), 1.0);
        assert_eq!(m.optimal_consumption(4.0), 0.5);
        assert_eq!(m.optimal_consumption(0.25), 2.0);
        // clamp below the floor
        assert!(close(m.optimal_consumption(-3.0), 1000.0, 1e-9));
        for i in 0..50 {
            let x = 1e-3 + 0.37 * i as f64;
            let c = m.optimal_consumption(x);
            assert!(close(m.marginal_utility(c).unwrap(), x, 1e-10 * x.max(1.0)));
        }
    }

    #[test]
    fn savings_examples() {
        let m = ModelParams::default();
        let p = Prices { r: 0.25, w: 0.7, k: 1.0 };
        assert!(close(m.savings_drift(1.0, 1.0, 0.95, &p), 0.0, 1e-15));
        assert!(close(m.savings_drift(0.0, 1.0, 0.2, &p), 0.5, 1e-15));
        let inc = m.income(3.3, 0.8, &p);
        assert_eq!(m.savings_drift(3.3, 0.8, inc, &p), 0.0);
    }

    #[test]
    fn price_examples() {
        let m = ModelParams::default();
        let p = m.prices_from_capital(1.0).unwrap();
        assert!(close(p.r, 0.25, 1e-12) && close(p.w, 0.7, 1e-12));
        let p = m.prices_from_capital(2.46).unwrap();
        assert!(close(p.r, 0.1097, 1e-4), "r = {}", p.r);
        assert!(close(p.w, 0.9170, 1e-4), "w = {}", p.w);
        let k0 = (m.alpha / m.delta).powf(1.0 / (1.0 - m.alpha));
        assert!(close(k0, 12.93, 0.01), "k0 = {k0}");
        assert!(close(m.prices_from_capital(k0).unwrap().r, 0.0, 1e-12));
        assert!(m.prices_from_capital(0.0).is_err());
        assert!(m.prices_from_capital(-1.0).is_err());
    }

    #[test]
    fn prices_monotone_in_capital() {
        let m = ModelParams::default();
        let ks: Vec<f64> = (0..100).map(|i| 0.1 + 9.9 * i as f64 / 99.0).collect();
        for w in ks.windows(2) {
            let (p0, p1) = (m.prices_from_capital(w[0]).unwrap(), m.prices_from_capital(w[1]).unwrap());
            assert!(p1.r < p0.r && p1.w > p0.w);
        }
    }

    #[test]
    fn initial_value_examples() {
        let m = ModelParams::default();
        assert!(close(m.initial_value_guess(0.0, 0.5), 1.25f64.ln(), 1e-15));
        assert!(close(m.initial_value_guess(1.0, 1.0), 3f64.ln(), 1e-15));
        let vals: Vec<f64> = (0..50).map(|i| m.initial_value_guess(0.1 * i as f64, 0.9)).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn initial_density_examples() {
        let m = ModelParams::default();
        let mesh = build_mesh(&m, 201, 201).unwrap();
        let vals: Vec<f64> = mesh.points().map(|(a, z)| m.initial_density(a, z)).collect();
        assert!(close(mesh.integrate(&vals), 1.0, 1e-6));
        assert!(m.initial_density(1.0, 1.0) > m.initial_density(2.0, 1.0));
        assert_eq!(m.initial_density(0.8, 0.7), m.initial_density(0.8, 1.3));
        assert!(close(m.initial_density(1.0, 1.0), 1.9947, 1e-4));
    }

    #[test]
    fn aggregate_capital_examples() {
        let m = ModelParams::default();
        let mesh = build_mesh(&m, 101, 101).unwrap();
        let k = m.aggregate_capital_with(&mesh, |_, _| 0.2).unwrap();
        assert!(close(k, 2.5, 1e-12));

        let narrow = |a: f64, _z: f64| {
            let x = (a - 1.0) / 0.05;
            (-0.5 * x * x).exp() / (0.05 * (2.0 * std::f64::consts::PI).sqrt())
        };
        let k = m.aggregate_capital_with(&mesh, narrow).unwrap();
        assert!(close(k, 1.0, 0.01));

        let k1 = m.aggregate_capital_with(&mesh, |a, z| m.initial_density(a, z)).unwrap();
        let k3 = m.aggregate_capital_with(&mesh, |a, z| 3.0 * m.initial_density(a, z)).unwrap();
        assert!(close(k1, k3, 1e-12));
        assert!(m.aggregate_capital_with(&mesh, |_, _| 0.0).is_err());
    }

    #[test]
    fn violations_are_collected() {
        let m = ModelParams {
            gamma: -1.0,
            a_max: -1.0,
            ..ModelParams::default()
        };
        let v = m.violations();
        assert_eq!(v.len(), 2);
        assert!(v[0].contains("gamma"));
        assert!(ModelParams::default().validate().is_ok());
    }
}
