//! Sequential against parallel fan-out on the two hot loops: independent KMC
//! replicas and Monte Carlo sampling of the variational quadratic form.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lattice_gas::diffusion::{estimate_quadratic_blocks, BasisSpec, LocalFunctionBasis, SamplingOptions};
use lattice_gas::dynamics::{run_until, RateModel, TrajectoryRecorder};
use lattice_gas::thermo::sample_profile_configuration;
use lattice_gas::{BoundaryData, CylinderLattice, DisorderField, DisorderLaw, Execution, ThermoContext};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn replicas(c: &mut Criterion) {
    let law = DisorderLaw::TwoPointSymmetric { bound: 1.0 };
    let lattice = Arc::new(CylinderLattice::new(1, 32, 1).unwrap());
    let field = DisorderField::sample(lattice, law, 1).unwrap();
    let ctx = ThermoContext::new(law).unwrap();
    let model = Arc::new(RateModel::new(&field, &ctx, &BoundaryData::constant(0.2, 0.8)).unwrap());
    let recorder = TrajectoryRecorder::new(vec![0.05], 2);
    let mut group = c.benchmark_group("kmc_replicas");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| {
                mode.map(16, |r| {
                    let eta = sample_profile_configuration(&field, |_| 0.5, &ctx, r as u64).unwrap();
                    run_until(model.clone(), eta, 0.05, &recorder, 100 + r as u64).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let law = DisorderLaw::TwoPointSymmetric { bound: 1.0 };
    let ctx = ThermoContext::new(law).unwrap();
    let basis = LocalFunctionBasis::from_spec(2, &BasisSpec::monomials(1)).unwrap();
    let mut group = c.benchmark_group("variational_sampling");
    group.sample_size(10);
    for (name, mode) in MODES {
        let options = SamplingOptions::new(20_000, 3).with_execution(mode);
        group.bench_with_input(BenchmarkId::from_parameter(name), &options, |b, options| {
            b.iter(|| estimate_quadratic_blocks(&basis, &ctx, 0.5, options).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, replicas, sampling);
criterion_main!(benches);
