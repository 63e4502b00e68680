use abh_core::economy::ModelParams;
use abh_core::fd_oracle::{solve_transition, FdGrid, SolutionField, TransitionOptions};

/// L2 distance of `v(0, .)` between two solutions on the coarse nodes.
fn v_change(coarse: &abh_core::fd_oracle::FdSolution, fine: &abh_core::fd_oracle::FdSolution) -> f64 {
    let pts: Vec<(f64, f64)> = coarse
        .mesh
        .a
        .iter()
        .flat_map(|&a| coarse.mesh.z.iter().map(move |&z| (a, z)))
        .collect();
    let a = coarse.fields(0.0, &pts).unwrap().v;
    let b = fine.fields(0.0, &pts).unwrap().v;
    let n = pts.len() as f64;
    (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
}

#[test]
fn halving_steps_shrinks_the_change_in_v() {
    let m = ModelParams::default();
    let opts = TransitionOptions::default();
    let levels: Vec<_> = [(26, 11), (51, 21), (101, 41)]
        .into_iter()
        .map(|(n_a, n_t)| solve_transition(&m, &FdGrid { n_a, n_z: 5, n_t }, None, &opts).unwrap())
        .collect();
    let d1 = v_change(&levels[0], &levels[1]);
    let d2 = v_change(&levels[1], &levels[2]);
    assert!(d2 < d1, "{d1} then {d2}");
}

#[test]
fn single_productivity_node_solves_the_wealth_problem() {
    let mut m = ModelParams::default();
    m.sigma_z = 0.0;
    let sol = solve_transition(&m, &FdGrid { n_a: 51, n_z: 1, n_t: 21 }, None, &TransitionOptions::default()).unwrap();
    assert_eq!(sol.mesh.z, vec![1.0]);
    assert!(sol.mass_errors().iter().all(|e| *e < 1e-10));
    assert_eq!(sol.monotone_fraction(), 1.0);
    assert!(sol.k_path.windows(2).all(|w| w[1] >= w[0] - 1e-9));
}

#[test]
fn capital_path_starts_at_initial_mean_wealth() {
    let m = ModelParams::default();
    let sol = solve_transition(&m, &FdGrid { n_a: 41, n_z: 5, n_t: 11 }, None, &TransitionOptions::default()).unwrap();
    let g0 = abh_core::fd_oracle::initial_density_on(&m, &sol.mesh);
    assert_eq!(sol.g[0], g0);
    assert!((sol.k_path[0] - sol.mesh.mean_wealth(&g0)).abs() < 1e-12);
    assert!(*sol.residual_history.last().unwrap() < TransitionOptions::default().tol);
}
