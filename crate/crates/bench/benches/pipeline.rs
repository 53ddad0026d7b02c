use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tendon_core::dataio::{Population, TendonType};
use tendon_core::fidelity::{FidelityPriorSpec, SelectionTarget, XiPrior, XI_PRIOR_MEAN};
use tendon_core::mixed::{initial_states, MixedData, MixedTarget, Parameterization};
use tendon_core::samplers::{LogDensity, LogDensityGrad};
use tendon_core::synth::{generate_experiment, generate_population, uniform_stretch_grid, PopulationSpec, SyntheticSpec};
use tendon_core::{engineering_stress, ModelParams};

fn params() -> ModelParams {
    ModelParams::new(2.86652, 931.429, 1.0223607, 1.0497468).unwrap()
}

fn stress(c: &mut Criterion) {
    let p = params();
    let grid = uniform_stretch_grid(0.12, 1000);
    c.bench_function("engineering_stress/1000", |b| {
        b.iter(|| grid.iter().map(|&l| engineering_stress(black_box(l), &p).unwrap()).sum::<f64>())
    });
}

fn selection_density(c: &mut Criterion) {
    let mut group = c.benchmark_group("selection_log_density");
    for n in [60, 120, 240] {
        let spec = SyntheticSpec::new(params(), uniform_stretch_grid(0.12, n), 0.387, 1);
        let exp = generate_experiment(&spec).unwrap();
        let target = SelectionTarget::new(&exp, 0.387, &FidelityPriorSpec::default(), XiPrior::default()).unwrap();
        let mut x = XI_PRIOR_MEAN.to_vec();
        x.extend(std::iter::repeat_n(0.1, n));
        group.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| b.iter(|| target.log_density(black_box(x))));
    }
    group.finish();
}

fn mixed_gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("mixed_log_density_grad");
    for n_e in [6, 18] {
        let mut sigma_pop = [[0.0; 4]; 4];
        for (k, sd) in [0.3, 0.15, 0.2, 0.2].iter().enumerate() {
            sigma_pop[k][k] = sd * sd;
        }
        let spec = PopulationSpec {
            tendon_type: TendonType::Sdft,
            mu_pop: XI_PRIOR_MEAN,
            sigma_pop,
            n_experiments: n_e,
            stretch: uniform_stretch_grid(0.07, 61),
            noise_sd: 0.387,
            sigma_obs: 0.387,
            damage_offset: None,
            seed: 3,
        };
        let pop: Population = generate_population(&spec).unwrap().population;
        for param in [Parameterization::Centered, Parameterization::NonCentered] {
            let target = MixedTarget::new(MixedData::from_population(&pop).unwrap(), param).unwrap();
            let x = initial_states(&target, 1, 0.0, 0).unwrap().remove(0);
            let mut g = vec![0.0; x.len()];
            group.bench_with_input(BenchmarkId::new(format!("{param:?}"), n_e), &x, |b, x| {
                b.iter(|| target.log_density_grad(black_box(x), &mut g))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, stress, selection_density, mixed_gradient);
criterion_main!(benches);
