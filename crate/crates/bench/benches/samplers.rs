use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use qfpme_core::trajectory::{simulate_belavkin, simulate_classical, simulate_kraus_jump, KrausSetup, ModelTag, RunSpec};
use qfpme_core::{bose_einstein, BangBang, DensityMatrix, Engine, RngStream};

fn samplers(c: &mut Criterion) {
    let n_b = bose_einstein(1.0, 1.0);
    let run = RunSpec::new(0.01, 1000);

    let two_level = BangBang::new(1.0, 0.1, n_b, 0.5, 1.0).unwrap();
    let mut i = 0;
    c.bench_function("classical 1000 steps", |b| {
        b.iter(|| {
            i += 1;
            simulate_classical(black_box(&two_level), &run, RngStream::new(1, i)).unwrap()
        })
    });

    let engine = Engine::new(1.0, 0.2, 0.1, n_b, 0.2, 1.0).unwrap();
    let model = engine.qfpme().unwrap();
    let rho = DensityMatrix::thermal(&engine.thermodynamic_hamiltonian(), 1.0).unwrap();
    c.bench_function("belavkin engine 1000 steps", |b| {
        b.iter(|| {
            i += 1;
            simulate_belavkin(black_box(&model), &rho, &run, RngStream::new(1, i), None).unwrap()
        })
    });

    let setup = KrausSetup::with_grid_final(&model, ModelTag::Engine, &rho, run.dt, run.steps, 401).unwrap();
    c.bench_function("kraus engine 1000 steps", |b| {
        b.iter(|| {
            i += 1;
            simulate_kraus_jump(black_box(&setup), &run, RngStream::new(1, i), None).unwrap()
        })
    });
}

criterion_group!(benches, samplers);
criterion_main!(benches);
