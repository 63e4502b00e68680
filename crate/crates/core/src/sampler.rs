//! Collocation batches drawn from a lattice over the domain box, and tensor
//! trapezoid meshes for mass and capital quadrature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::economy::ModelParams;
use crate::error::{AbhError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingScheme {
    /// Points drawn with replacement from a regular lattice.
    #[default]
    Lattice,
    /// Points drawn uniformly from the continuous box.
    Continuous,
}

/// One training batch. Points are `[a, z, t]`; `initial_time` holds `[a, z]`
/// pairs at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct CollocationBatch {
    pub interior: Vec<[f64; 3]>,
    pub boundary_a_min: Vec<[f64; 3]>,
    pub boundary_a_max: Vec<[f64; 3]>,
    pub boundary_z_min: Vec<[f64; 3]>,
    pub boundary_z_max: Vec<[f64; 3]>,
    pub initial_time: Vec<[f64; 2]>,
}

/// `n` evenly spaced nodes on `[lo, hi]` with both ends hit exactly.
pub fn lattice(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            if k + 1 == n {
                hi
            } else {
                lo + (hi - lo) * (k as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

struct Axis {
    lo: f64,
    hi: f64,
    nodes: Vec<f64>,
}

impl Axis {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, scheme: SamplingScheme) -> f64 {
        match scheme {
            SamplingScheme::Lattice => self.nodes[rng.gen_range(0..self.nodes.len())],
            SamplingScheme::Continuous => rng.gen_range(self.lo..=self.hi),
        }
    }
}

pub fn sample_batch<R: Rng + ?Sized>(
    rng: &mut R,
    params: &ModelParams,
    n_interior: usize,
    grid_per_dim: usize,
    scheme: SamplingScheme,
) -> Result<CollocationBatch> {
    if grid_per_dim < 2 {
        return Err(AbhError::Config("grid_per_dim must be >= 2".into()));
    }
    let [alo, zlo, tlo] = params.lower();
    let [ahi, zhi, thi] = params.upper();
    let axes = [
        Axis { lo: alo, hi: ahi, nodes: lattice(alo, ahi, grid_per_dim) },
        Axis { lo: zlo, hi: zhi, nodes: lattice(zlo, zhi, grid_per_dim) },
        Axis { lo: tlo, hi: thi, nodes: lattice(tlo, thi, grid_per_dim) },
    ];
    let point = |rng: &mut R| -> [f64; 3] {
        [
            axes[0].draw(rng, scheme),
            axes[1].draw(rng, scheme),
            axes[2].draw(rng, scheme),
        ]
    };
    let interior = (0..n_interior).map(|_| point(rng)).collect();
    let pinned = |dim: usize, value: f64, rng: &mut R| -> Vec<[f64; 3]> {
        (0..n_interior)
            .map(|_| {
                let mut p = point(rng);
                p[dim] = value;
                p
            })
            .collect()
    };
    let boundary_a_min = pinned(0, alo, rng);
    let boundary_a_max = pinned(0, ahi, rng);
    let boundary_z_min = pinned(1, zlo, rng);
    let boundary_z_max = pinned(1, zhi, rng);
    let initial_time = (0..n_interior)
        .map(|_| [axes[0].draw(rng, scheme), axes[1].draw(rng, scheme)])
        .collect();
    Ok(CollocationBatch {
        interior,
        boundary_a_min,
        boundary_a_max,
        boundary_z_min,
        boundary_z_max,
        initial_time,
    })
}

/// Tensor-product trapezoid rule on the `(a, z)` box. Points are ordered
/// wealth-major: index `i * n_z + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureMesh {
    a_nodes: Vec<f64>,
    z_nodes: Vec<f64>,
    weights: Vec<f64>,
}

fn trapezoid_weights(nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { nodes[i] - nodes[i - 1] } else { 0.0 };
            let right = if i + 1 < n { nodes[i + 1] - nodes[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

pub fn build_mesh(params: &ModelParams, n_a: usize, n_z: usize) -> Result<QuadratureMesh> {
    if n_a < 2 || n_z < 2 {
        return Err(AbhError::Config("quadrature mesh needs at least 2 nodes per axis".into()));
    }
    let a_nodes = lattice(params.a_min, params.a_max, n_a);
    let z_nodes = lattice(params.z_min, params.z_max, n_z);
    let wa = trapezoid_weights(&a_nodes);
    let wz = trapezoid_weights(&z_nodes);
    let weights = wa.iter().flat_map(|x| wz.iter().map(move |y| x * y)).collect();
    Ok(QuadratureMesh {
        a_nodes,
        z_nodes,
        weights,
    })
}

impl QuadratureMesh {
    pub fn a_nodes(&self) -> &[f64] {
        &self.a_nodes
    }

    pub fn z_nodes(&self) -> &[f64] {
        &self.z_nodes
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.a_nodes
            .iter()
            .flat_map(move |&a| self.z_nodes.iter().map(move |&z| (a, z)))
    }

    /// Mesh points at a fixed time, as network inputs.
    pub fn points_at(&self, t: f64) -> Vec<[f64; 3]> {
        self.points().map(|(a, z)| [a, z, t]).collect()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.weights.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}
