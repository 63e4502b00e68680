use serde::Serialize;

use super::FdSolution;
use crate::error::{AbhError, Result};

/// Value, consumption and density at a set of points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldValues {
    pub v: Vec<f64>,
    pub c: Vec<f64>,
    pub g: Vec<f64>,
}

/// Anything that can be sampled like a transition solution.
pub trait SolutionField {
    fn fields(&self, t: f64, points: &[(f64, f64)]) -> Result<FieldValues>;
    fn capital(&self, t: f64) -> f64;
    fn rate(&self, t: f64) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub rel_l2_v: f64,
    pub rel_l2_c: f64,
    pub rel_l2_g: f64,
    pub k_abs_max: f64,
    pub k_rel_max: f64,
    pub r_abs_max: f64,
    pub times: Vec<f64>,
    pub points_per_time: usize,
}

fn bracket(nodes: &[f64], x: f64) -> (usize, f64) {
    let n = nodes.len();
    if n == 1 {
        return (0, 0.0);
    }
    let x = x.clamp(nodes[0], nodes[n - 1]);
    let h = (nodes[n - 1] - nodes[0]) / (n - 1) as f64;
    let i = (((x - nodes[0]) / h).floor() as usize).min(n - 2);
    (i, (x - nodes[i]) / h)
}

fn interp_path(t_nodes: &[f64], path: &[f64], t: f64) -> f64 {
    let (n, s) = bracket(t_nodes, t);
    if s == 0.0 {
        path[n]
    } else {
        (1.0 - s) * path[n] + s * path[n + 1]
    }
}

impl FdSolution {
    fn bilinear(&self, field: &[f64], a: f64, z: f64) -> f64 {
        let nz = self.mesh.z.len();
        let (i, sa) = bracket(&self.mesh.a, a);
        let (j, sz) = bracket(&self.mesh.z, z);
        let at = |di: usize, dj: usize| {
            let (ii, jj) = ((i + di).min(self.mesh.a.len() - 1), (j + dj).min(nz - 1));
            field[ii * nz + jj]
        };
        (1.0 - sa) * ((1.0 - sz) * at(0, 0) + sz * at(0, 1)) + sa * ((1.0 - sz) * at(1, 0) + sz * at(1, 1))
    }

    fn sample(&self, arrays: &[Vec<f64>], t: f64, points: &[(f64, f64)]) -> Vec<f64> {
        let (n, s) = bracket(&self.mesh.t, t);
        let n1 = (n + 1).min(arrays.len() - 1);
        points
            .iter()
            .map(|&(a, z)| {
                let lo = self.bilinear(&arrays[n], a, z);
                if s == 0.0 {
                    lo
                } else {
                    (1.0 - s) * lo + s * self.bilinear(&arrays[n1], a, z)
                }
            })
            .collect()
    }
}

impl SolutionField for FdSolution {
    fn fields(&self, t: f64, points: &[(f64, f64)]) -> Result<FieldValues> {
        Ok(FieldValues {
            v: self.sample(&self.v, t, points),
            c: self.sample(&self.c, t, points),
            g: self.sample(&self.g, t, points),
        })
    }

    fn capital(&self, t: f64) -> f64 {
        interp_path(&self.mesh.t, &self.k_path, t)
    }

    fn rate(&self, t: f64) -> f64 {
        interp_path(&self.mesh.t, &self.r_path, t)
    }
}

/// Compares `other` with the oracle on the oracle's grid nodes at every
/// time node up to `t_cut`.
pub fn compare(oracle: &FdSolution, other: &dyn SolutionField, t_cut: f64) -> Result<CompareReport> {
    let mesh = &oracle.mesh;
    let points: Vec<(f64, f64)> = mesh
        .a
        .iter()
        .flat_map(|&a| mesh.z.iter().map(move |&z| (a, z)))
        .collect();
    let times: Vec<(usize, f64)> = mesh
        .t
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, t)| t <= t_cut + 1e-12)
        .collect();
    if times.is_empty() {
        return Err(AbhError::Config(format!("no oracle time node at or before {t_cut}")));
    }
    let mut num = [0.0f64; 3];
    let mut den = [0.0f64; 3];
    let (mut k_abs, mut k_rel, mut r_abs) = (0.0f64, 0.0f64, 0.0f64);
    for &(n, t) in &times {
        let got = other.fields(t, &points)?;
        let want = [&oracle.v[n], &oracle.c[n], &oracle.g[n]];
        for (f, have) in [&got.v, &got.c, &got.g].into_iter().enumerate() {
            if have.len() != points.len() {
                return Err(AbhError::Config("solution returned the wrong number of values".into()));
            }
            for (x, y) in have.iter().zip(want[f]) {
                num[f] += (x - y).powi(2);
                den[f] += y * y;
            }
        }
        let dk = (other.capital(t) - oracle.k_path[n]).abs();
        k_abs = k_abs.max(dk);
        k_rel = k_rel.max(dk / oracle.k_path[n].abs());
        r_abs = r_abs.max((other.rate(t) - oracle.r_path[n]).abs());
    }
    let rel = |f: usize| (num[f] / den[f]).sqrt();
    Ok(CompareReport {
        rel_l2_v: rel(0),
        rel_l2_c: rel(1),
        rel_l2_g: rel(2),
        k_abs_max: k_abs,
        k_rel_max: k_rel,
        r_abs_max: r_abs,
        times: times.iter().map(|&(_, t)| t).collect(),
        points_per_time: points.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::economy::ModelParams;
    use crate::fd_oracle::{solve_transition, FdGrid, TransitionOptions};

    #[test]
    fn oracle_matches_itself_and_interpolates_nodes() {
        let m = ModelParams::default();
        let sol = solve_transition(&m, &FdGrid { n_a: 21, n_z: 3, n_t: 11 }, None, &TransitionOptions::default()).unwrap();
        let rep = compare(&sol, &sol, 0.8 * m.horizon).unwrap();
        assert_eq!(rep.rel_l2_v, 0.0);
        assert_eq!(rep.rel_l2_g, 0.0);
        assert_eq!(rep.k_abs_max, 0.0);
        assert_eq!(rep.times.len(), 9);
        let mid = 0.5 * (sol.mesh.t[2] + sol.mesh.t[3]);
        let k = sol.capital(mid);
        assert!((k - 0.5 * (sol.k_path[2] + sol.k_path[3])).abs() < 1e-12);
    }
}
