use abh_core::economy::ModelParams;
use abh_core::jet::{self, Channel, Channels};
use abh_core::net::{default_layer_sizes, InputScaler, MlpParams, OutputHead};
use abh_core::par::Execution;
use abh_core::sampler::lattice;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn cube(m: &ModelParams, n: usize) -> Vec<[f64; 3]> {
    let a = lattice(m.a_min, m.a_max, n);
    let z = lattice(m.z_min, m.z_max, n);
    let t = lattice(0.0, m.horizon, n);
    let mut pts = Vec::with_capacity(n * n * n);
    for &a in &a {
        for &z in &z {
            for &t in &t {
                pts.push([a, z, t]);
            }
        }
    }
    pts
}

fn bench(c: &mut Criterion) {
    let m = ModelParams::default();
    let scaler = InputScaler::for_model(&m).unwrap();
    let net = MlpParams::init(1, &default_layer_sizes(128, 3), OutputHead::Identity).unwrap();
    let pts = cube(&m, 11);
    let modes = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

    let mut g = c.benchmark_group("jet_forward_all_channels");
    g.sample_size(10);
    for (name, exec) in modes {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| jet::evaluate(&net, &scaler, &pts, Channels::ALL, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("jet_backward_all_channels");
    g.sample_size(10);
    for (name, exec) in modes {
        let (jets, trace) = jet::forward(&net, &scaler, &pts, Channels::ALL, exec).unwrap();
        let mut adjoint = jets.zeros_like();
        adjoint.get_mut(Channel::DAA).fill(1.0);
        adjoint.get_mut(Channel::Value).fill(1.0);
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| jet::backward(&net, &trace, &adjoint, exec))
        });
    }
    g.finish();

    let mesh_pts: Vec<[f64; 3]> = cube(&m, 101).into_iter().filter(|p| p[2] == 0.0).collect();
    let mut g = c.benchmark_group("density_on_mesh");
    g.sample_size(10);
    for (name, exec) in modes {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| jet::evaluate(&net, &scaler, &mesh_pts, Channels::VALUE, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
