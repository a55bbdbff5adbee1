//! Acceptance checks, one PASS/FAIL line each. Run with
//! `cargo test -p freemcg-cli --test acceptance`.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use freemcg_core::attribution::{attribute, postprocess, AttributionConfig, SpatialLayout};
use freemcg_core::counterfactual::{reverse_diffusion_cf, CfConfig};
use freemcg_core::diffusion::{gmm_denoise, AffineSubspacePrior, GaussianMixturePrior, NoiseSchedule};
use freemcg_core::enkf::{cov_action_span_check, direction_weight, ensemble_stats, ParticleEnsemble};
use freemcg_core::evaluation::{
    curve_toy, default_fractions, flip_rate, road_curve, tangent_report, toy_order_scan, BlobTask, CurveToyConfig,
    TwoClassTask, DEFAULT_NOISE_STD,
};
use freemcg_core::models::{
    oracle_log_prob_gradient, predict, ClassIndex, Classifier, LinearSoftmax, OracleClassifier, ProbVector,
    RbfSoftmax,
};
use freemcg_core::rng::{standard_normal, Purpose, SeedStream};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const C1_RESIDUAL: f64 = 1e-10;
const C2_MIN_SLOPE: f64 = 2.5;
const C3_SPAN: f64 = 1e-10;
const C3_OFF_SPAN: f64 = 1e-6;
const C4_RATIO: f64 = 0.05;
const C5_RELATIVE: f64 = 1e-5;
const C5_STEP: f64 = 1e-4;
const C6_TOLERANCE: f64 = 1e-4;
const C6_SPACING: f64 = 0.01;
const C7_FLIP_RATE: f64 = 0.9;
const C7_NATS: f64 = 2.0;
const C8_TOLERANCE: f64 = 1e-15;
const C9_FREEMCG_WINS: f64 = 0.8;
const C9_ORACLE_WINS: f64 = 0.9;

struct Outcome {
    passed: bool,
    detail: String,
}

fn criterion(id: u32, name: &str, budget: Duration, check: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = check();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let passed = out.passed && in_time;
    println!(
        "{} {id:>2} {name}: {} [{:.2?}, budget {:.0?}{}]",
        if passed { "PASS" } else { "FAIL" },
        out.detail,
        elapsed,
        budget,
        if in_time { "" } else { ", over budget" }
    );
    passed
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn c1_linear_exactness() -> Outcome {
    let seeds = SeedStream::new(1001);
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let mut rng = seeds.rng(Purpose::Custom(0), trial, 0);
        let d = rng.random_range(1..=32);
        let n = rng.random_range(2..=8);
        let w = random_matrix(&mut rng, n, d);
        let b = random_matrix(&mut rng, n, 1).column(0).into();
        let model = LinearSoftmax::new(w, b).unwrap();
        for k in [3, 10, 100] {
            let xs = (0..k).map(|_| standard_normal(&mut rng, d)).collect();
            let stats = ensemble_stats(&ParticleEnsemble::evaluate(&model, xs).unwrap()).unwrap();
            worst = worst.max((&stats.cov_xf - &stats.cov_xx * model.weights().transpose()).norm());
        }
    }
    Outcome {
        passed: worst <= C1_RESIDUAL,
        detail: format!("max |C_xf - C_xx W^T|_F = {worst:.3e} (<= {C1_RESIDUAL:e})"),
    }
}

fn c2_order() -> Outcome {
    let r = toy_order_scan().unwrap();
    Outcome {
        passed: r.slope_defined && r.fitted_slope >= C2_MIN_SLOPE,
        detail: format!(
            "slope {:.4} over deltas {:?}, residuals {:?} (>= {C2_MIN_SLOPE})",
            r.fitted_slope, r.deltas, r.residuals
        ),
    }
}

fn c3_span() -> Outcome {
    let seeds = SeedStream::new(1003);
    let mut worst_span: f64 = 0.0;
    for trial in 0..200u64 {
        let mut rng = seeds.rng(Purpose::Custom(0), trial, 0);
        let d = rng.random_range(2..=40);
        let k = rng.random_range(2..=d + 5);
        let xs = (0..k).map(|_| standard_normal(&mut rng, d)).collect();
        let e = ParticleEnsemble::evaluate(&LinearSoftmax::constant(2, d), xs).unwrap();
        worst_span = worst_span.max(cov_action_span_check(&e, &standard_normal(&mut rng, d)).unwrap());
    }

    let mut rng = seeds.rng(Purpose::Custom(1), 0, 0);
    let spanning = DMatrix::from_columns(&[standard_normal(&mut rng, 10), standard_normal(&mut rng, 10)]);
    let prior = AffineSubspacePrior::from_spanning_set(standard_normal(&mut rng, 10), &spanning, None).unwrap();
    let model = LinearSoftmax::new(random_matrix(&mut rng, 3, 10), DVector::zeros(3)).unwrap();
    let x = prior.sample(&mut rng) + standard_normal(&mut rng, 10) * 0.3;
    let cfg = AttributionConfig {
        seed: 3,
        ..Default::default()
    };
    let map = attribute(&model, &prior, &NoiseSchedule::default(), &x, SpatialLayout::flat(10), &cfg).unwrap();
    let ratio = tangent_report(&map.raw_gradient, &prior).unwrap().off_manifold_ratio;
    Outcome {
        passed: worst_span <= C3_SPAN && ratio <= C3_OFF_SPAN && map.raw_gradient.norm() > 0.0,
        detail: format!(
            "span residual {worst_span:.3e} (<= {C3_SPAN:e}), subspace off-span ratio {ratio:.3e} (<= {C3_OFF_SPAN:e})"
        ),
    }
}

fn c4_curve_toy() -> Outcome {
    let cfg = CurveToyConfig::default();
    let r = curve_toy(&cfg).unwrap();
    let closer = r
        .points
        .iter()
        .filter(|p| p.ensemble_angle_deg < p.raw_angle_deg)
        .count();
    Outcome {
        passed: r.points.len() == 10 && closer == r.points.len() && r.max_off_tangent_ratio <= C4_RATIO,
        detail: format!(
            "ensemble closer to tangent at {closer}/{} points, max off-tangent ratio {:.3e} (<= {C4_RATIO}) at radius {}",
            r.points.len(),
            r.max_off_tangent_ratio,
            cfg.radius
        ),
    }
}

fn log_prob(model: &dyn Classifier, x: &DVector<f64>, c: ClassIndex) -> f64 {
    model.eval(x).unwrap().softmax().get(c).ln()
}

fn worst_fd_error(model: &dyn OracleClassifier, seed: u64) -> f64 {
    let seeds = SeedStream::new(seed);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let mut rng = seeds.rng(Purpose::Custom(0), i, 0);
        let x = standard_normal(&mut rng, model.dim_in());
        let c = ClassIndex(rng.random_range(0..model.dim_out()));
        let p = model.eval(&x).unwrap().softmax();
        let g = oracle_log_prob_gradient(&model.jacobian(&x).unwrap(), &p, c).unwrap();
        let fd = DVector::from_fn(x.len(), |j, _| {
            let mut up = x.clone();
            let mut down = x.clone();
            up[j] += C5_STEP;
            down[j] -= C5_STEP;
            (log_prob(model, &up, c) - log_prob(model, &down, c)) / (2.0 * C5_STEP)
        });
        worst = worst.max((&g - &fd).norm() / g.norm().max(1e-8));
    }
    worst
}

fn c5_softmax_gradient() -> Outcome {
    let mut rng = SeedStream::new(1005).rng(Purpose::Custom(1), 0, 0);
    let linear = LinearSoftmax::new(random_matrix(&mut rng, 4, 6), DVector::from_fn(4, |i, _| 0.1 * i as f64)).unwrap();
    let rbf = RbfSoftmax::new(random_matrix(&mut rng, 3, 5) * 2.0, 1.7).unwrap();
    let e_lin = worst_fd_error(&linear, 1);
    let e_rbf = worst_fd_error(&rbf, 2);
    Outcome {
        passed: e_lin <= C5_RELATIVE && e_rbf <= C5_RELATIVE,
        detail: format!("max relative error linear {e_lin:.3e}, rbf {e_rbf:.3e} (<= {C5_RELATIVE:e})"),
    }
}

/// Midpoint-rule posterior mean on a grid covering six standard deviations
/// around every component.
fn quadrature_posterior_mean(prior: &GaussianMixturePrior, x_t: &DVector<f64>, alpha_bar: f64) -> DVector<f64> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for j in 0..prior.n_components() {
        for i in 0..2 {
            let sd = prior.covariance(j)[(i, i)].sqrt();
            lo[i] = lo[i].min(prior.mean(j)[i] - 6.0 * sd);
            hi[i] = hi[i].max(prior.mean(j)[i] + 6.0 * sd);
        }
    }
    let nx = ((hi[0] - lo[0]) / C6_SPACING).ceil() as usize;
    let ny = ((hi[1] - lo[1]) / C6_SPACING).ceil() as usize;
    let (sa, var) = (alpha_bar.sqrt(), 1.0 - alpha_bar);
    let mut terms = Vec::with_capacity(nx * ny);
    for a in 0..nx {
        for b in 0..ny {
            let p = DVector::from_column_slice(&[
                lo[0] + (a as f64 + 0.5) * C6_SPACING,
                lo[1] + (b as f64 + 0.5) * C6_SPACING,
            ]);
            let lw = prior.log_density(&p) - (x_t - &p * sa).norm_squared() / (2.0 * var);
            terms.push((p, lw));
        }
    }
    let max = terms.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    let mut num = DVector::zeros(2);
    let mut den = 0.0;
    for (p, lw) in &terms {
        let w = (lw - max).exp();
        num += p * w;
        den += w;
    }
    num / den
}

fn c6_tweedie() -> Outcome {
    let prior = GaussianMixturePrior::new(
        vec![0.4, 0.6],
        vec![
            DVector::from_column_slice(&[-0.8, 0.6]),
            DVector::from_column_slice(&[1.1, -0.4]),
        ],
        vec![
            DMatrix::from_row_slice(2, 2, &[0.25, 0.06, 0.06, 0.18]),
            DMatrix::from_row_slice(2, 2, &[0.20, -0.07, -0.07, 0.30]),
        ],
    )
    .unwrap();
    let s = NoiseSchedule::default();
    let queries = [[-1.2, 0.9], [0.1, 0.1], [0.7, -0.8], [1.6, 0.5], [-0.3, -1.1]];
    let mut worst: f64 = 0.0;
    for t in [50, 200, 500] {
        let a = s.alpha_bar(t);
        for q in queries {
            let x_t = DVector::from_column_slice(&q) * a.sqrt();
            let closed = gmm_denoise(&x_t, t, &prior, &s).unwrap();
            worst = worst.max((closed - quadrature_posterior_mean(&prior, &x_t, a)).amax());
        }
    }
    Outcome {
        passed: worst <= C6_TOLERANCE,
        detail: format!("max deviation from quadrature {worst:.3e} over 5 points x 3 levels (<= {C6_TOLERANCE:e})"),
    }
}

fn reverse_runs(task: &TwoClassTask, grad_norm: bool) -> (f64, f64, f64) {
    let s = NoiseSchedule::default();
    let results: Vec<_> = (0..50)
        .map(|seed| {
            let x = task.input(0, seed).unwrap();
            let cfg = CfConfig {
                grad_norm,
                seed,
                ..CfConfig::reverse(1)
            };
            reverse_diffusion_cf(&task.model, &task.prior, &s, &x, &cfg).unwrap()
        })
        .collect();
    let mean_ld = results.iter().map(|r| task.prior.log_density(&r.x_cf)).sum::<f64>() / results.len() as f64;
    let mean_l2 = results.iter().map(|r| r.l2).sum::<f64>() / results.len() as f64;
    (flip_rate(&results).unwrap(), mean_ld, mean_l2)
}

fn c7_counterfactuals() -> Outcome {
    let task = TwoClassTask::standard();
    let median = task.median_log_density(1, 2001, 0).unwrap();
    let (rate, ld, l2) = reverse_runs(&task, false);
    let (rate_n, ld_n, l2_n) = reverse_runs(&task, true);
    Outcome {
        passed: rate >= C7_FLIP_RATE && (ld - median).abs() <= C7_NATS,
        detail: format!(
            "flip rate {rate:.2} (>= {C7_FLIP_RATE}), mean log-density {ld:.3} vs class-1 median {median:.3} \
             (within {C7_NATS} nats), mean l2 {l2:.3}; info: unit-normalized gradient gives flip rate {rate_n:.2}, \
             log-density {ld_n:.3}, l2 {l2_n:.3}"
        ),
    }
}

fn c8_direction_weights() -> Outcome {
    let p = ProbVector::from_slice(&[0.7, 0.1, 0.1, 0.1]).unwrap();
    let w0 = direction_weight(ClassIndex(0), &p).unwrap();
    let w1 = direction_weight(ClassIndex(1), &p).unwrap();
    let dev = |w: &DVector<f64>, e: &[f64]| w.iter().zip(e).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let d0 = dev(w0.values(), &[0.3, -0.1, -0.1, -0.1]);
    let d1 = dev(w1.values(), &[-0.7, 0.9, -0.1, -0.1]);
    Outcome {
        passed: d0 <= C8_TOLERANCE && d1 <= C8_TOLERANCE,
        detail: format!(
            "e_0 - p = {:?}, e_1 - p = {:?}, max deviation {:.1e} (<= {C8_TOLERANCE:e})",
            w0.values().as_slice(),
            w1.values().as_slice(),
            d0.max(d1)
        ),
    }
}

fn c9_road() -> Outcome {
    let task = BlobTask::standard();
    let s = NoiseSchedule::default();
    let fractions = default_fractions();
    let auc = |x: &DVector<f64>, raw: &DVector<f64>, seed: u64| {
        let map = postprocess(raw, task.layout).unwrap();
        road_curve(&task.model, x, task.layout, &map, &fractions, DEFAULT_NOISE_STD, seed)
            .unwrap()
            .auc
    };
    let (mut free_wins, mut oracle_wins) = (0, 0);
    for seed in 0..50u64 {
        let x = task.input(seed);
        let cfg = AttributionConfig {
            seed,
            ..Default::default()
        };
        let free = attribute(&task.model, &task.prior, &s, &x, task.layout, &cfg).unwrap();
        let c = predict(&task.model, &x).unwrap();
        let p = task.model.eval(&x).unwrap().softmax();
        let oracle = oracle_log_prob_gradient(&task.model.jacobian(&x).unwrap(), &p, c).unwrap();
        let random = auc(&x, &task.random_scores(seed), seed);
        free_wins += usize::from(auc(&x, &free.raw_gradient, seed) < random);
        oracle_wins += usize::from(auc(&x, &oracle, seed) < random);
    }
    let (f, o) = (free_wins as f64 / 50.0, oracle_wins as f64 / 50.0);
    Outcome {
        passed: f >= C9_FREEMCG_WINS && o >= C9_ORACLE_WINS,
        detail: format!(
            "AUC below random: FreeMCG {free_wins}/50 (>= {C9_FREEMCG_WINS}), oracle gradient {oracle_wins}/50 (>= {C9_ORACLE_WINS})"
        ),
    }
}

fn cli(args: &[&str], dir: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_freemcg"))
        .args(args)
        .current_dir(dir)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let runs: [(&[&str], &str); 6] = [
        (&["example", "--task", "blob", "--seed", "4", "--out", "ex"], "ex/manifest.json"),
        (
            &["attribute", "--input", "ex/input.f32", "--model", "ex/model.json", "--prior", "ex/prior.json",
              "--particles", "20", "--seed", "4", "--out", "attr/map.f32"],
            "attr/map.f32.manifest.json",
        ),
        (
            &["road", "--input", "ex/input.f32", "--model", "ex/model.json", "--map", "attr/map.f32",
              "--seed", "4", "--out", "road"],
            "road/manifest.json",
        ),
        (&["verify", "--seed", "4", "--out", "verify"], "verify/manifest.json"),
        (&["example", "--task", "two-class", "--seed", "4", "--out", "two"], "two/manifest.json"),
        (
            &["counterfactual", "--input", "two/input.f32", "--model", "two/model.json", "--prior", "two/prior.json",
              "--target-class", "1", "--seed", "4", "--out", "cf"],
            "cf/manifest.json",
        ),
    ];
    let mut identical = 0;
    for (args, manifest) in runs {
        if !cli(args, d) {
            continue;
        }
        let first = fs::read(d.join(manifest)).unwrap_or_default();
        if !cli(args, d) {
            continue;
        }
        let second = fs::read(d.join(manifest)).unwrap_or_default();
        identical += usize::from(!first.is_empty() && first == second);
    }
    Outcome {
        passed: identical == 6,
        detail: format!("{identical}/6 commands produced byte-identical manifests on repeat"),
    }
}

fn main() {
    let s = Duration::from_secs;
    let results = [
        criterion(1, "linear covariance exactness", s(1), c1_linear_exactness),
        criterion(2, "residual order", s(1), c2_order),
        criterion(3, "span property", s(5), c3_span),
        criterion(4, "curved-manifold toy", s(1), c4_curve_toy),
        criterion(5, "softmax gradient identity", s(2), c5_softmax_gradient),
        criterion(6, "mixture Tweedie oracle", s(10), c6_tweedie),
        criterion(7, "counterfactual flips on manifold", s(120), c7_counterfactuals),
        criterion(8, "direction weights", s(1), c8_direction_weights),
        criterion(9, "removal-curve ordering", s(60), c9_road),
        criterion(10, "CLI determinism", s(120), c10_determinism),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
