use abh_core::economy::ModelParams;
use abh_core::fd_oracle::{compare, solve_transition, FdGrid, TransitionOptions};
use abh_core::par::Execution;
use abh_core::trainer::{PinnSolution, TrainConfig, TrainState, Trainer};

fn config(execution: Execution) -> TrainConfig {
    TrainConfig {
        total_steps: 40,
        pretrain_steps: 10,
        adam_steps: 30,
        width: 16,
        hidden_layers: 2,
        batch_size: 20,
        train_mesh_a: 11,
        train_mesh_z: 5,
        execution,
        ..TrainConfig::default()
    }
}

fn run(execution: Execution) -> TrainState {
    let mut tr = Trainer::new(ModelParams::default(), config(execution)).unwrap();
    tr.train(|_| Ok(())).unwrap();
    tr.into_state()
}

#[test]
fn execution_mode_does_not_change_the_run() {
    let a = run(Execution::Parallel);
    let b = run(Execution::Sequential);
    assert!(a == b);
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn schedule_phases_show_in_the_history() {
    let s = run(Execution::Parallel);
    assert_eq!(s.history.len(), 40);
    assert!(s.history[..10].iter().all(|l| l.kf == 0.0 && l.mass == 0.0));
    assert!(s.history[10..].iter().all(|l| l.kf > 0.0));
    assert!(s.history.iter().all(|l| l.total.is_finite()));
}

#[test]
fn trained_state_compares_against_the_oracle() {
    let m = ModelParams::default();
    let s = run(Execution::Parallel);
    let fd = solve_transition(&m, &FdGrid { n_a: 21, n_z: 3, n_t: 11 }, None, &TransitionOptions::default()).unwrap();
    let sol = PinnSolution::from_state(&m, &s, Execution::Parallel).unwrap();
    let rep = compare(&fd, &sol, 0.8 * m.horizon).unwrap();
    assert!(rep.rel_l2_c.is_finite() && rep.k_rel_max.is_finite());
    assert_eq!(rep.points_per_time, 63);
}
