use freemcg_core::attribution::{attribute, AttributionConfig, SpatialLayout, TimestepSampling};
use freemcg_core::counterfactual::{ascent_cf, reverse_diffusion_cf, CfConfig};
use freemcg_core::diffusion::{AffineSubspacePrior, NoiseSchedule};
use freemcg_core::evaluation::{mean_l2, tangent_report, TwoClassTask};
use freemcg_core::models::{Classifier, LinearSoftmax};
use freemcg_core::rng::{standard_normal, Purpose, SeedStream};
use nalgebra::DMatrix;

fn subspace_setup(latent: Option<DMatrix<f64>>) -> (AffineSubspacePrior, LinearSoftmax) {
    let mut rng = SeedStream::new(5).rng(Purpose::Custom(0), 0, 0);
    let spanning = DMatrix::from_columns(&[standard_normal(&mut rng, 10), standard_normal(&mut rng, 10)]);
    let prior = AffineSubspacePrior::from_spanning_set(standard_normal(&mut rng, 10), &spanning, latent).unwrap();
    let w = DMatrix::from_fn(3, 10, |_, _| standard_normal(&mut rng, 1)[0]);
    (prior, LinearSoftmax::new(w, standard_normal(&mut rng, 3)).unwrap())
}

#[test]
fn attribution_gradient_stays_on_subspace() {
    let s = NoiseSchedule::default();
    for latent in [None, Some(DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.4]))] {
        let (prior, model) = subspace_setup(latent);
        let mut rng = SeedStream::new(6).rng(Purpose::Custom(1), 0, 0);
        let x = prior.sample(&mut rng) + standard_normal(&mut rng, 10) * 0.3;
        for sampling in [TimestepSampling::Grid, TimestepSampling::Random] {
            let cfg = AttributionConfig {
                particles_per_t: 20,
                seed: 3,
                sampling,
                ..Default::default()
            };
            let map = attribute(&model, &prior, &s, &x, SpatialLayout::flat(10), &cfg).unwrap();
            assert!(map.raw_gradient.norm() > 0.0);
            let report = tangent_report(&map.raw_gradient, &prior).unwrap();
            assert!(report.off_manifold_ratio <= 1e-6, "{report:?}");
        }
    }
}

#[test]
fn constant_classifier_gives_zero_map() {
    let (prior, _) = subspace_setup(None);
    let model = LinearSoftmax::constant(3, 10);
    let x = prior.origin().clone();
    let cfg = AttributionConfig {
        particles_per_t: 10,
        ..Default::default()
    };
    let map = attribute(&model, &prior, &NoiseSchedule::default(), &x, SpatialLayout::flat(10), &cfg).unwrap();
    assert!(map.values.iter().all(|&v| v == 0.0));
}

#[test]
fn attribution_is_deterministic_per_seed() {
    let (prior, model) = subspace_setup(Some(DMatrix::identity(2, 2)));
    let x = prior.origin().clone();
    let s = NoiseSchedule::default();
    let cfg = AttributionConfig {
        particles_per_t: 15,
        seed: 77,
        ..Default::default()
    };
    let a = attribute(&model, &prior, &s, &x, SpatialLayout::flat(10), &cfg).unwrap();
    let b = attribute(&model, &prior, &s, &x, SpatialLayout::flat(10), &cfg).unwrap();
    assert_eq!(a, b);
    let c = attribute(&model, &prior, &s, &x, SpatialLayout::flat(10), &AttributionConfig { seed: 78, ..cfg }).unwrap();
    assert_ne!(a.raw_gradient, c.raw_gradient);
}

#[test]
fn ascent_reaches_target_on_manifold() {
    let task = TwoClassTask::standard();
    let s = NoiseSchedule::default();
    let median = task.median_log_density(1, 2001, 0).unwrap();
    // Start from the class-0 mode: ascent leaves the off-axis coordinate
    // nearly untouched, so an atypical input would carry its own low density.
    let x = nalgebra::DVector::from_column_slice(&[-2.0, 0.0]);
    for seed in 0..5 {
        let cfg = CfConfig {
            iters: 30,
            seed,
            ..CfConfig::ascent(1)
        };
        let r = ascent_cf(&task.model, &task.prior, &s, &x, &cfg).unwrap();
        assert!(r.flipped, "seed {seed}: {}", r.x_cf);
        let ld = task.prior.log_density(&r.x_cf);
        assert!(ld >= median - 2.0, "seed {seed}: log density {ld} vs median {median}");
    }
}

#[test]
fn reverse_diffusion_flips_and_logs_sign_structure() {
    let task = TwoClassTask::standard();
    let s = NoiseSchedule::default();
    for seed in 0..5 {
        let x = task.input(0, seed).unwrap();
        let cfg = CfConfig {
            grad_norm: false,
            seed,
            ..CfConfig::reverse(1)
        };
        let r = reverse_diffusion_cf(&task.model, &task.prior, &s, &x, &cfg).unwrap();
        assert!(r.flipped);
        assert_eq!(r.direction_weights.len(), cfg.ddim_steps);

        let mean = r.final_particles.iter().fold(x.clone() * 0.0, |a, p| a + p) / r.final_particles.len() as f64;
        assert!((&mean - &r.x_cf).amax() <= 1e-12);

        // Input-level weight at the first iterate: original class negative,
        // target positive.
        let p0 = task.model.eval(&x).unwrap().softmax();
        let w_input = freemcg_core::enkf::direction_weight(freemcg_core::models::ClassIndex(1), &p0).unwrap();
        assert!(w_input.values()[0] <= -p0.values()[0] + 1e-15);
        assert!(w_input.values()[1] > 0.0);
        let w = &r.direction_weights[0];
        assert!(w[0] < 0.0 && w[1] > 0.0, "{w}");
        assert!(w.sum().abs() < 1e-12);
    }
}

#[test]
fn stronger_anchoring_never_moves_further() {
    let task = TwoClassTask::standard();
    let s = NoiseSchedule::default();
    let mut means = Vec::new();
    for beta in [0.0, 0.05, 0.2] {
        let results: Vec<_> = (0..8)
            .map(|seed| {
                let x = task.input(0, seed).unwrap();
                let cfg = CfConfig {
                    beta,
                    grad_norm: false,
                    particles: 50,
                    ddim_steps: 50,
                    seed,
                    ..CfConfig::reverse(1)
                };
                reverse_diffusion_cf(&task.model, &task.prior, &s, &x, &cfg).unwrap()
            })
            .collect();
        means.push(mean_l2(&results).unwrap());
    }
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
}

#[test]
fn counterfactuals_are_deterministic_per_seed() {
    let task = TwoClassTask::standard();
    let s = NoiseSchedule::default();
    let x = task.input(0, 9).unwrap();
    let cfg = CfConfig {
        particles: 20,
        ddim_steps: 20,
        seed: 4,
        ..CfConfig::reverse(1)
    };
    let a = reverse_diffusion_cf(&task.model, &task.prior, &s, &x, &cfg).unwrap();
    let b = reverse_diffusion_cf(&task.model, &task.prior, &s, &x, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn reverse_counterfactuals_stay_closer_than_fresh_target_samples() {
    let task = TwoClassTask::standard();
    let s = NoiseSchedule::default();
    let mut cf_l2 = 0.0;
    let mut regen_l2 = 0.0;
    for seed in 0..50 {
        let x = task.input(0, seed).unwrap();
        let cfg = CfConfig {
            grad_norm: false,
            seed,
            ..CfConfig::reverse(1)
        };
        let r = reverse_diffusion_cf(&task.model, &task.prior, &s, &x, &cfg).unwrap();
        assert!(r.flipped);
        cf_l2 += r.l2;
        regen_l2 += (&x - task.input(1, 1000 + seed).unwrap()).norm();
    }
    assert!(cf_l2 < regen_l2, "counterfactual {} vs regenerated {}", cf_l2 / 50.0, regen_l2 / 50.0);
}
