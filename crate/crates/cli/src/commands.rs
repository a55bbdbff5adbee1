use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use freemcg_core::attribution::{attribute, AttributionConfig, AttributionMap, SpatialLayout, TimestepSampling};
use freemcg_core::counterfactual::{generate, CfConfig, CfMode, CounterfactualResult};
use freemcg_core::diffusion::{BuiltinPrior, DdimParams, GuidanceScale, NoiseSchedule, PriorFile};
use freemcg_core::evaluation::{
    default_fractions, road_curve, run_verification, BlobTask, TwoClassTask, DEFAULT_NOISE_STD,
};
use freemcg_core::models::{predict, BuiltinClassifier, ClassifierFile};
use freemcg_core::Error as CoreError;
use nalgebra::DVector;
use serde::Serialize;

use crate::array::{read_array, write_array, write_image, Array};
use crate::config::{
    require, resolve, AttributeArgs, Command, CounterfactualArgs, ExampleArgs, ModeArg, RoadArgs, SweepArgs,
    TaskArg, VerifyArgs,
};
use crate::exit::{CheckFailed, ConfigError};
use crate::manifest::write_manifest;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;
pub const DEFAULT_MAX_GRID: usize = 64;
pub const DEFAULT_REPEATS: usize = 10;

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Attribute(a) => run_attribute(a),
        Command::Counterfactual(a) => run_counterfactual(a),
        Command::Road(a) => run_road(a),
        Command::Verify(a) => run_verify(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Example(a) => run_example(a),
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
struct ScheduleConfig {
    #[serde(rename = "T")]
    steps: usize,
    beta_min: f64,
    beta_max: f64,
}

impl ScheduleConfig {
    fn new(steps: Option<usize>, beta_min: Option<f64>, beta_max: Option<f64>) -> Self {
        Self {
            steps: steps.unwrap_or(DEFAULT_STEPS),
            beta_min: beta_min.unwrap_or(DEFAULT_BETA_MIN),
            beta_max: beta_max.unwrap_or(DEFAULT_BETA_MAX),
        }
    }

    fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)?)
    }
}

fn load_model(path: &Path) -> Result<BuiltinClassifier> {
    let text = fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    ClassifierFile::from_json(&text).with_context(|| format!("model file {}", path.display()))
}

fn load_prior(path: &Path) -> Result<BuiltinPrior> {
    let text = fs::read_to_string(path).with_context(|| format!("reading prior {}", path.display()))?;
    PriorFile::from_json(&text).with_context(|| format!("prior file {}", path.display()))
}

fn load_input(path: &Path) -> Result<(Array, SpatialLayout)> {
    let x = read_array(path)?;
    let layout = SpatialLayout::from_shape(&x.shape).with_context(|| format!("input {}", path.display()))?;
    Ok((x, layout))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<PathBuf> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

/// Map shape as written to disk: `[d]` for vector inputs, `[h, w]` otherwise.
fn map_shape(input_shape: &[usize], layout: SpatialLayout) -> Vec<usize> {
    if input_shape.len() == 1 {
        vec![input_shape[0]]
    } else {
        vec![layout.height, layout.width]
    }
}

#[derive(Serialize)]
struct AttributeConfig<'a> {
    input: &'a Path,
    model: &'a Path,
    prior: &'a Path,
    schedule: ScheduleConfig,
    attribution: &'a AttributionConfig,
    normalize: bool,
    out: &'a Path,
    ppm: Option<&'a Path>,
}

fn run_attribute(args: &AttributeArgs) -> Result<()> {
    let r = resolve(args, args.config.as_deref())?;
    let input = require(r.input, "input")?;
    let model_path = require(r.model, "model")?;
    let prior_path = require(r.prior, "prior")?;
    let out = require(r.out, "out")?;
    let schedule_cfg = ScheduleConfig::new(r.steps, r.beta_min, r.beta_max);
    let defaults = AttributionConfig::default();
    let cfg = AttributionConfig {
        timesteps: r.timesteps.unwrap_or(defaults.timesteps),
        particles_per_t: r.particles.unwrap_or(defaults.particles_per_t),
        seed: r.seed.unwrap_or(0),
        target_class: r.target_class,
        sampling: if r.random_t.unwrap_or(false) {
            TimestepSampling::Random
        } else {
            TimestepSampling::Grid
        },
    };
    let normalize = r.normalize.unwrap_or(false);

    let (x, layout) = load_input(&input)?;
    let model = load_model(&model_path)?;
    let prior = load_prior(&prior_path)?;
    let schedule = schedule_cfg.build()?;
    let predicted = predict(&model, &x.data)?;
    let mut map = attribute(&model, &prior, &schedule, &x.data, layout, &cfg)?;
    if map.degenerate {
        eprintln!("warning: every particle ensemble was degenerate; the map is zero");
    }
    if normalize {
        map = map.max_normalized();
    }

    create_parent(&out)?;
    let mut outputs = Vec::new();
    outputs.extend(write_array(&out, &map_shape(&x.shape, layout), &map.values)?);
    outputs.extend(write_array(&with_suffix(&out, ".raw"), &x.shape, map.raw_gradient.as_slice())?);
    if let Some(img) = &r.ppm {
        create_parent(img)?;
        write_image(img, &map.values, map.height, map.width)?;
        outputs.push(img.clone());
    }
    let config = AttributeConfig {
        input: &input,
        model: &model_path,
        prior: &prior_path,
        schedule: schedule_cfg,
        attribution: &cfg,
        normalize,
        out: &out,
        ppm: r.ppm.as_deref(),
    };
    write_manifest(
        &with_suffix(&out, ".manifest.json"),
        "attribute",
        cfg.seed,
        config,
        &[&input, &model_path, &prior_path],
        &outputs,
    )?;
    println!(
        "attribution for class {} (predicted {}) written to {}",
        cfg.target_class.unwrap_or(predicted.index()),
        predicted,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct CfSettings {
    mode: ModeArg,
    target_class: usize,
    alpha: f64,
    beta: f64,
    t_start: usize,
    particles: usize,
    ddim_steps: usize,
    eta: f64,
    iters: usize,
    grad_norm: bool,
    seed: u64,
}

impl CfSettings {
    fn to_config(&self) -> Result<CfConfig> {
        Ok(CfConfig {
            target_class: self.target_class,
            alpha: self.alpha,
            beta: self.beta,
            t_start: self.t_start,
            particles: self.particles,
            ddim: DdimParams::new(self.eta, GuidanceScale::Stabilized)?,
            ddim_steps: self.ddim_steps,
            iters: self.iters,
            grad_norm: self.grad_norm,
            seed: self.seed,
        })
    }
}

fn mode_defaults(mode: ModeArg, target_class: usize) -> CfConfig {
    match mode {
        ModeArg::Reverse => CfConfig::reverse(target_class),
        ModeArg::Ascent => CfConfig::ascent(target_class),
    }
}

#[derive(Serialize)]
struct CfConfigRecord<'a> {
    input: &'a Path,
    model: &'a Path,
    prior: &'a Path,
    schedule: ScheduleConfig,
    counterfactual: &'a CfSettings,
    out: &'a Path,
}

#[derive(Serialize)]
struct CfReport<'a> {
    mode: ModeArg,
    target_class: usize,
    original_class: usize,
    predicted: usize,
    flipped: bool,
    l2: f64,
    logit_history: Vec<&'a [f64]>,
    direction_weights: Vec<&'a [f64]>,
}

fn run_counterfactual(args: &CounterfactualArgs) -> Result<()> {
    let r = resolve(args, args.config.as_deref())?;
    let input = require(r.input, "input")?;
    let model_path = require(r.model, "model")?;
    let prior_path = require(r.prior, "prior")?;
    let out = require(r.out, "out")?;
    let target_class = require(r.target_class, "target_class")?;
    let mode = r.mode.unwrap_or(ModeArg::Reverse);
    let base = mode_defaults(mode, target_class);
    let settings = CfSettings {
        mode,
        target_class,
        alpha: r.alpha.unwrap_or(base.alpha),
        beta: r.beta.unwrap_or(base.beta),
        t_start: r.t_start.unwrap_or(base.t_start),
        particles: r.particles.unwrap_or(base.particles),
        ddim_steps: r.ddim_steps.unwrap_or(base.ddim_steps),
        eta: r.eta.unwrap_or(base.ddim.eta),
        iters: r.iters.unwrap_or(base.iters),
        grad_norm: r.grad_norm.unwrap_or(base.grad_norm),
        seed: r.seed.unwrap_or(0),
    };
    let schedule_cfg = ScheduleConfig::new(r.steps, r.beta_min, r.beta_max);

    let (x, _) = load_input(&input)?;
    let model = load_model(&model_path)?;
    let prior = load_prior(&prior_path)?;
    let schedule = schedule_cfg.build()?;
    let original = predict(&model, &x.data)?;
    let result = generate(mode.into(), &model, &prior, &schedule, &x.data, &settings.to_config()?)?;

    create_dir(&out)?;
    let traj_dir = out.join("trajectory");
    create_dir(&traj_dir)?;
    let mut outputs = Vec::new();
    outputs.extend(write_array(&out.join("x_cf.f32"), &x.shape, result.x_cf.as_slice())?);
    for (i, snap) in result.trajectory.iter().enumerate() {
        outputs.extend(write_array(&traj_dir.join(format!("step_{i:04}.f32")), &x.shape, snap.as_slice())?);
    }
    let report = CfReport {
        mode,
        target_class,
        original_class: original.index(),
        predicted: result.predicted.index(),
        flipped: result.flipped,
        l2: result.l2,
        logit_history: result.logit_history.iter().map(|v| v.as_slice()).collect(),
        direction_weights: result.direction_weights.iter().map(|v| v.as_slice()).collect(),
    };
    outputs.push(write_json(&out.join("report.json"), &report)?);
    let config = CfConfigRecord {
        input: &input,
        model: &model_path,
        prior: &prior_path,
        schedule: schedule_cfg,
        counterfactual: &settings,
        out: &out,
    };
    write_manifest(
        &out.join("manifest.json"),
        "counterfactual",
        settings.seed,
        config,
        &[&input, &model_path, &prior_path],
        &outputs,
    )?;
    println!(
        "counterfactual: class {} -> {} (target {}), flipped = {}, l2 = {:.6}",
        original,
        result.predicted,
        target_class,
        result.flipped,
        result.l2
    );
    Ok(())
}

#[derive(Serialize)]
struct RoadConfig<'a> {
    input: &'a Path,
    model: &'a Path,
    map: &'a Path,
    fractions: &'a [f64],
    noise_std: f64,
    seed: u64,
    out: &'a Path,
}

fn run_road(args: &RoadArgs) -> Result<()> {
    let r = resolve(args, args.config.as_deref())?;
    let input = require(r.input, "input")?;
    let model_path = require(r.model, "model")?;
    let map_path = require(r.map, "map")?;
    let out = require(r.out, "out")?;
    let fractions = r.fractions.unwrap_or_else(default_fractions);
    let noise_std = r.noise_std.unwrap_or(DEFAULT_NOISE_STD);
    let seed = r.seed.unwrap_or(0);

    let (x, layout) = load_input(&input)?;
    let model = load_model(&model_path)?;
    let m = read_array(&map_path)?;
    if m.data.len() != layout.pixels() {
        return Err(ConfigError(format!(
            "map {} has {} values but the input has {} pixels",
            map_path.display(),
            m.data.len(),
            layout.pixels()
        ))
        .into());
    }
    let map = AttributionMap {
        values: m.data.as_slice().to_vec(),
        height: layout.height,
        width: layout.width,
        raw_gradient: DVector::zeros(0),
        degenerate: false,
    };
    let curve = road_curve(&model, &x.data, layout, &map, &fractions, noise_std, seed)?;

    create_dir(&out)?;
    let mut outputs = vec![write_json(&out.join("road.json"), &curve)?];
    let csv = out.join("road.csv");
    fs::write(&csv, curve.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    outputs.push(csv);
    let config = RoadConfig {
        input: &input,
        model: &model_path,
        map: &map_path,
        fractions: &fractions,
        noise_std,
        seed,
        out: &out,
    };
    write_manifest(&out.join("manifest.json"), "road", seed, config, &[&input, &model_path, &map_path], &outputs)?;
    println!("road auc = {:.6}", curve.auc);
    Ok(())
}

#[derive(Serialize)]
struct VerifyConfig<'a> {
    seed: u64,
    out: &'a Path,
}

fn run_verify(args: &VerifyArgs) -> Result<()> {
    let r = resolve(args, args.config.as_deref())?;
    let out = require(r.out, "out")?;
    let seed = r.seed.unwrap_or(0);
    let report = run_verification(seed)?;
    create_dir(&out)?;
    let outputs = vec![write_json(&out.join("verify.json"), &report)?];
    write_manifest(&out.join("manifest.json"), "verify", seed, VerifyConfig { seed, out: &out }, &[], &outputs)?;
    for c in &report.checks {
        println!(
            "{:<32} {:>12.4e}  (threshold {:e})  {}",
            c.name,
            c.value,
            c.threshold,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    if !report.passed() {
        return Err(CheckFailed("verification checks failed".into()).into());
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct SweepConfig<'a> {
    input: &'a Path,
    model: &'a Path,
    prior: &'a Path,
    schedule: ScheduleConfig,
    mode: ModeArg,
    target_class: usize,
    alpha: &'a [f64],
    beta: &'a [f64],
    t_start: &'a [usize],
    particles: &'a [usize],
    eta: &'a [f64],
    ddim_steps: usize,
    iters: usize,
    grad_norm: bool,
    repeats: usize,
    max_grid: usize,
    seed: u64,
    out: &'a Path,
}

fn nonempty<T>(values: &[T], key: &str) -> Result<()> {
    if values.is_empty() {
        return Err(ConfigError(format!("grid list --{} is empty", key.replace('_', "-"))).into());
    }
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    let r = resolve(args, args.config.as_deref())?;
    let input = require(r.input, "input")?;
    let model_path = require(r.model, "model")?;
    let prior_path = require(r.prior, "prior")?;
    let out = require(r.out, "out")?;
    let target_class = require(r.target_class, "target_class")?;
    let mode = r.mode.unwrap_or(ModeArg::Reverse);
    let base = mode_defaults(mode, target_class);
    let alpha = r.alpha.unwrap_or_else(|| vec![base.alpha]);
    let beta = r.beta.unwrap_or_else(|| vec![base.beta]);
    let t_start = r.t_start.unwrap_or_else(|| vec![base.t_start]);
    let particles = r.particles.unwrap_or_else(|| vec![base.particles]);
    let eta = r.eta.unwrap_or_else(|| vec![base.ddim.eta]);
    nonempty(&alpha, "alpha")?;
    nonempty(&beta, "beta")?;
    nonempty(&t_start, "t_start")?;
    nonempty(&particles, "particles")?;
    nonempty(&eta, "eta")?;
    let max_grid = r.max_grid.unwrap_or(DEFAULT_MAX_GRID);
    let grid_size = alpha.len() * beta.len() * t_start.len() * particles.len() * eta.len();
    if grid_size > max_grid {
        return Err(ConfigError(format!(
            "grid has {grid_size} points, more than the cap of {max_grid} (raise --max-grid to allow it)"
        ))
        .into());
    }
    let repeats = r.repeats.unwrap_or(DEFAULT_REPEATS);
    if repeats == 0 {
        return Err(ConfigError("--repeats must be at least 1".into()).into());
    }
    let ddim_steps = r.ddim_steps.unwrap_or(base.ddim_steps);
    let iters = r.iters.unwrap_or(base.iters);
    let grad_norm = r.grad_norm.unwrap_or(base.grad_norm);
    let seed = r.seed.unwrap_or(0);
    let schedule_cfg = ScheduleConfig::new(r.steps, r.beta_min, r.beta_max);

    let (x, layout) = load_input(&input)?;
    let model = load_model(&model_path)?;
    let prior = load_prior(&prior_path)?;
    let schedule = schedule_cfg.build()?;

    let mut auc_cache: BTreeMap<usize, f64> = BTreeMap::new();
    let mut csv = String::from("mode,alpha,beta,t_start,particles,eta,repeats,diverged,flip_rate,mean_l2,auc\n");
    for &a in &alpha {
        for &b in &beta {
            for &t in &t_start {
                for &k in &particles {
                    for &e in &eta {
                        let settings = CfSettings {
                            mode,
                            target_class,
                            alpha: a,
                            beta: b,
                            t_start: t,
                            particles: k,
                            ddim_steps,
                            eta: e,
                            iters,
                            grad_norm,
                            seed,
                        };
                        let mut results: Vec<CounterfactualResult> = Vec::with_capacity(repeats);
                        let mut diverged = 0;
                        for i in 0..repeats {
                            let cfg = CfConfig {
                                seed: seed.wrapping_add(i as u64),
                                ..settings.to_config()?
                            };
                            match generate(CfMode::from(mode), &model, &prior, &schedule, &x.data, &cfg) {
                                Ok(res) => results.push(res),
                                Err(CoreError::Divergence { .. }) => diverged += 1,
                                Err(err) => return Err(err.into()),
                            }
                        }
                        let flips = results.iter().filter(|r| r.flipped).count();
                        let flip_rate = flips as f64 / repeats as f64;
                        let mean_l2 = if results.is_empty() {
                            f64::NAN
                        } else {
                            results.iter().map(|r| r.l2).sum::<f64>() / results.len() as f64
                        };
                        let auc = match auc_cache.get(&k) {
                            Some(&v) => v,
                            None => {
                                let cfg = AttributionConfig {
                                    particles_per_t: k,
                                    seed,
                                    ..AttributionConfig::default()
                                };
                                let map = attribute(&model, &prior, &schedule, &x.data, layout, &cfg)?;
                                let v = road_curve(&model, &x.data, layout, &map, &default_fractions(), DEFAULT_NOISE_STD, seed)?.auc;
                                auc_cache.insert(k, v);
                                v
                            }
                        };
                        let mode_name = match mode {
                            ModeArg::Ascent => "ascent",
                            ModeArg::Reverse => "reverse",
                        };
                        csv.push_str(&format!(
                            "{mode_name},{a},{b},{t},{k},{e},{repeats},{diverged},{flip_rate},{mean_l2},{auc}\n"
                        ));
                    }
                }
            }
        }
    }

    create_dir(&out)?;
    let csv_path = out.join("sweep.csv");
    fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
    let config = SweepConfig {
        input: &input,
        model: &model_path,
        prior: &prior_path,
        schedule: schedule_cfg,
        mode,
        target_class,
        alpha: &alpha,
        beta: &beta,
        t_start: &t_start,
        particles: &particles,
        eta: &eta,
        ddim_steps,
        iters,
        grad_norm,
        repeats,
        max_grid,
        seed,
        out: &out,
    };
    write_manifest(
        &out.join("manifest.json"),
        "sweep",
        seed,
        config,
        &[&input, &model_path, &prior_path],
        &[csv_path],
    )?;
    println!("sweep: {grid_size} grid points x {repeats} runs written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct ExampleConfig<'a> {
    task: TaskArg,
    class: usize,
    seed: u64,
    out: &'a Path,
}

fn run_example(args: &ExampleArgs) -> Result<()> {
    let r = resolve(args, args.config.as_deref())?;
    let out = require(r.out, "out")?;
    let task = r.task.unwrap_or(TaskArg::TwoClass);
    let class = r.class.unwrap_or(0);
    let seed = r.seed.unwrap_or(0);
    create_dir(&out)?;
    let (model, prior, x, shape) = match task {
        TaskArg::TwoClass => {
            let t = TwoClassTask::standard();
            let x = t.input(class, seed)?;
            (ClassifierFile::from(&t.model), PriorFile::from(&t.prior), x, vec![2])
        }
        TaskArg::Blob => {
            let t = BlobTask::standard();
            let x = t.input(seed);
            (
                ClassifierFile::from(&t.model),
                PriorFile::from(&t.prior),
                x,
                vec![t.layout.height, t.layout.width],
            )
        }
    };
    let mut outputs = vec![
        write_json(&out.join("model.json"), &model)?,
        write_json(&out.join("prior.json"), &prior)?,
    ];
    outputs.extend(write_array(&out.join("input.f32"), &shape, x.as_slice())?);
    write_manifest(
        &out.join("manifest.json"),
        "example",
        seed,
        ExampleConfig { task, class, seed, out: &out },
        &[],
        &outputs,
    )?;
    println!("example files written to {}", out.display());
    Ok(())
}
