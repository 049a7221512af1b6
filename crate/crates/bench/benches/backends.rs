use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use softgrasp::fem::{self, BoundaryConditions, MaterialParams};
use softgrasp::kelvinlet::{deform, KelvinletParams};
use softgrasp::mesh::synth::OrganShape;
use softgrasp::neural::{Model, Network, Normalization, Regime};
use softgrasp_bench::{grasps, organ};

fn kelvinlet(c: &mut Criterion) {
    let mesh = organ(OrganShape::large());
    let params = KelvinletParams::default();
    let mut group = c.benchmark_group("kelvinlet_10k");
    for n in [1, 2] {
        let g = grasps(&mesh, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &g, |b, g| {
            b.iter(|| deform(&mesh, g, &params).unwrap())
        });
    }
    group.finish();
}

fn neural(c: &mut Criterion) {
    let mesh = organ(OrganShape::large());
    let g = grasps(&mesh, 2);
    let model = Model {
        network: Network::init(0),
        regime: Regime::Residual,
        lambda_reg: 0.0,
        arity: 2,
        kelvinlet: KelvinletParams::default(),
        norm: Normalization::identity(),
        seed: 0,
    };
    let mut group = c.benchmark_group("neural_10k");
    group.sample_size(20);
    group.bench_function("residual_2", |b| b.iter(|| model.predict(&mesh, &g).unwrap()));
    group.finish();
}

fn fem_linear(c: &mut Criterion) {
    let mesh = organ(OrganShape::desk());
    let bc = BoundaryConditions::from_grasps(&mesh, &grasps(&mesh, 2)).unwrap();
    let mut group = c.benchmark_group("fem_desk");
    group.sample_size(10);
    group.bench_function("linear", |b| {
        b.iter(|| fem::solve(&mesh, &MaterialParams::linear_liver(), &bc).unwrap())
    });
    group.bench_function("mooney_rivlin", |b| {
        b.iter(|| fem::solve(&mesh, &MaterialParams::mooney_rivlin_liver(), &bc).unwrap())
    });
    group.finish();
}

criterion_group!(benches, kelvinlet, neural, fem_linear);
criterion_main!(benches);
