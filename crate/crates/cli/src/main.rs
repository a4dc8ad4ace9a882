use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dphelmet::data;
use dphelmet::dp::{self, GroupContext, NoiseMode};
use dphelmet::learnability::{self, Replacement};
use dphelmet::protocol::RunStatus;
use dphelmet::rng::{seed_from_u64, Rng};
use dphelmet::sim::{self, CrossValidation, SimConfig};
use dphelmet::{svm, Dataset, Error};
use serde::{Deserialize, Serialize};

mod config;
mod manifest;

use config::{resolve, seed_override, HyperArgs, HyperConfig, PrivacyArgs, PrivacyConfig};
use manifest::{write_json, ManifestBuilder};

const EXIT_VALIDATION: u8 = 3;
const EXIT_ABORT: u8 = 4;
const EXIT_IO: u8 = 5;

/// Differentially private model averaging over secure summation.
///
/// Unstated defaults: seed 0, fixed-point scale 24 bits, honest fraction 0.5.
/// Exit codes: 2 usage, 3 validation, 4 protocol abort, 5 IO.
#[derive(Parser, Debug)]
#[command(name = "dphelmet", version)]
struct Cli {
    /// Worker threads for users, grid cells and classes [default: all cores]
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic Gaussian-blob dataset
    GenData(GenDataArgs),
    /// Run the distributed protocol once and release the averaged model
    TrainDistributed(TrainArgs),
    /// Privacy accounting for a noise multiplier or a target epsilon
    Account(AccountArgs),
    /// Grid search over sigma, user count and (lambda, R)
    Sweep(SweepArgs),
    /// Empirical uniform-stability probe of the averaged model
    Stability(StabilityArgs),
    /// Optimality gap of the averaged model over a grid of step counts
    Convergence(ConvergenceArgs),
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    /// JSON config or manifest; flags take precedence
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Output path; a .dphm extension selects the binary matrix format
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    classes: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    dim: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    per_class: Option<u64>,
    /// Per-coordinate std around each center [default: 1]
    #[arg(long)]
    spread: Option<f64>,
    /// Distance between class centers [default: 3]
    #[arg(long)]
    separation: Option<f64>,
    /// Master seed; DPHELMET_SEED overrides it [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataConfig {
    classes: u64,
    dim: u64,
    per_class: u64,
    spread: f64,
    separation: f64,
    seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            classes: 10,
            dim: 32,
            per_class: 500,
            spread: 1.0,
            separation: 3.0,
            seed: 0,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Directory receiving model, report, transcript and manifest
    #[arg(long, default_value = "dphelmet-run")]
    #[serde(skip)]
    out_dir: PathBuf,
    /// Dataset (CSV `label,features...` or DPHM matrix)
    #[arg(long)]
    data: Option<PathBuf>,
    /// The CSV starts with a header row
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    header: bool,
    /// Number of users |U| [default: 10]
    #[arg(long)]
    users: Option<usize>,
    /// Local dataset size N [default: even split]
    #[arg(long)]
    points_per_user: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    privacy: PrivacyArgs,
    #[command(flatten)]
    #[serde(flatten)]
    hyper: HyperArgs,
    /// Master seed; DPHELMET_SEED overrides it [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Calibrate noise to whole local datasets (sensitivity 2R)
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    user_level: bool,
    /// Users that never submit (the round aborts)
    #[arg(long, value_delimiter = ',')]
    dropout: Option<Vec<u32>>,
    /// Users that skip their noise share
    #[arg(long, value_delimiter = ',')]
    collude: Option<Vec<u32>>,
    /// Fraction of every class held out for evaluation [default: 1/6]
    #[arg(long)]
    holdout: Option<f64>,
    /// Fixed-point fractional bits [default: 24]
    #[arg(long)]
    scale_bits: Option<u32>,
    /// Codec clamp headroom in per-user noise stds [default: 10]
    #[arg(long)]
    noise_allowance: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct TrainConfig {
    data: Option<PathBuf>,
    header: bool,
    users: usize,
    points_per_user: Option<usize>,
    #[serde(flatten)]
    privacy: PrivacyConfig,
    #[serde(flatten)]
    hyper: HyperConfig,
    seed: u64,
    user_level: bool,
    dropout: Vec<u32>,
    collude: Vec<u32>,
    holdout: f64,
    scale_bits: u32,
    noise_allowance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: None,
            header: false,
            users: 10,
            points_per_user: None,
            privacy: PrivacyConfig::default(),
            hyper: HyperConfig::default(),
            seed: 0,
            user_level: false,
            dropout: Vec::new(),
            collude: Vec::new(),
            holdout: 1.0 / 6.0,
            scale_bits: dphelmet::secagg::DEFAULT_SCALE_BITS,
            noise_allowance: dphelmet::protocol::DEFAULT_NOISE_ALLOWANCE,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct AccountArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Also write the report (and a manifest) here
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    privacy: PrivacyArgs,
    /// Target epsilon in (0,1); derives sigma
    #[arg(long, conflicts_with = "sigma")]
    epsilon: Option<f64>,
    /// Number of users [default: 1, the central mechanism]
    #[arg(long)]
    users: Option<usize>,
    /// Model radius R, enabling the 2R user-level bound
    #[arg(long)]
    radius: Option<f64>,
    /// Local dataset size N
    #[arg(long)]
    points_per_user: Option<usize>,
    /// Input clipping bound c, for the per-record sensitivity
    #[arg(long)]
    clip: Option<f64>,
    /// Regularization strength, for the per-record sensitivity
    #[arg(long)]
    lambda: Option<f64>,
    /// Headline epsilon for whole local datasets
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    user_level: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct AccountConfig {
    #[serde(flatten)]
    privacy: PrivacyConfig,
    epsilon: Option<f64>,
    users: Option<usize>,
    radius: Option<f64>,
    points_per_user: Option<usize>,
    clip: Option<f64>,
    lambda: Option<f64>,
    user_level: bool,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Directory receiving sweep.csv, best.csv and the manifest
    #[arg(long, default_value = "dphelmet-sweep")]
    #[serde(skip)]
    out_dir: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    header: bool,
    /// User counts to sweep [default: 10]
    #[arg(long, value_delimiter = ',')]
    users: Option<Vec<usize>>,
    #[arg(long)]
    points_per_user: Option<usize>,
    /// Noise multipliers to sweep [default: 8]
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    /// Regularization grid [default: --lambda]
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Radius grid [default: --radius]
    #[arg(long, value_delimiter = ',')]
    radii: Option<Vec<f64>>,
    /// Cross-validation repeats [default: 5]
    #[arg(long)]
    repeats: Option<usize>,
    /// Cross-validation folds; 1 uses a single holdout split [default: 6]
    #[arg(long)]
    folds: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    privacy: PrivacyArgs,
    #[command(flatten)]
    #[serde(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    user_level: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SweepConfig {
    data: Option<PathBuf>,
    header: bool,
    users: Vec<usize>,
    points_per_user: Option<usize>,
    sigmas: Vec<f64>,
    lambdas: Option<Vec<f64>>,
    radii: Option<Vec<f64>>,
    repeats: usize,
    folds: usize,
    #[serde(flatten)]
    privacy: PrivacyConfig,
    #[serde(flatten)]
    hyper: HyperConfig,
    seed: u64,
    user_level: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let cv = CrossValidation::default();
        SweepConfig {
            data: None,
            header: false,
            users: vec![10],
            points_per_user: None,
            sigmas: vec![PrivacyConfig::default().sigma],
            lambdas: None,
            radii: None,
            repeats: cv.repeats,
            folds: cv.folds,
            privacy: PrivacyConfig::default(),
            hyper: HyperConfig::default(),
            seed: 0,
            user_level: false,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct StabilityArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "dphelmet-stability")]
    #[serde(skip)]
    out_dir: PathBuf,
    /// Training pool
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    header: bool,
    /// Held-out probe instances [default: split off the pool]
    #[arg(long)]
    probe_data: Option<PathBuf>,
    /// Size of the probe set split off the pool [default: 1000]
    #[arg(long)]
    probe_points: Option<usize>,
    #[arg(long)]
    users: Option<usize>,
    /// Neighbor pairs to probe [default: 200]
    #[arg(long)]
    probes: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct StabilityConfig {
    data: Option<PathBuf>,
    header: bool,
    probe_data: Option<PathBuf>,
    probe_points: usize,
    users: usize,
    probes: usize,
    #[serde(flatten)]
    hyper: HyperConfig,
    seed: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            data: None,
            header: false,
            probe_data: None,
            probe_points: 1000,
            users: 10,
            probes: 200,
            hyper: HyperConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct ConvergenceArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "dphelmet-convergence")]
    #[serde(skip)]
    out_dir: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    header: bool,
    #[arg(long)]
    users: Option<usize>,
    /// Step counts M, ascending [default: 32,64,...,4096]
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    /// Seeds averaged per grid point [default: 5]
    #[arg(long)]
    repeats: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct ConvergenceConfig {
    data: Option<PathBuf>,
    header: bool,
    users: usize,
    grid: Vec<usize>,
    repeats: usize,
    #[serde(flatten)]
    hyper: HyperConfig,
    seed: u64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            data: None,
            header: false,
            users: 10,
            grid: (5..=12).map(|e| 1usize << e).collect(),
            repeats: 5,
            hyper: HyperConfig::default(),
            seed: 0,
        }
    }
}

/// Applies `DPHELMET_SEED` on top of the resolved seed.
fn final_seed(seed: &mut u64) -> Result<()> {
    if let Some(s) = seed_override()? {
        *seed = s;
    }
    Ok(())
}

fn load(path: &Option<PathBuf>, header: bool) -> Result<Dataset> {
    let path = path
        .as_ref()
        .ok_or_else(|| Error::Parameter("no dataset given (--data or \"data\" in the config)".into()))?;
    data::load_dataset(path, header).with_context(|| format!("loading {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let manifest = ManifestBuilder::start("gen-data");
    let mut cfg: GenDataConfig = resolve(&args, args.config.as_ref())?;
    final_seed(&mut cfg.seed)?;
    if cfg.classes == 0 || cfg.dim == 0 || cfg.per_class == 0 {
        return Err(Error::Parameter("classes, dim and per_class must be >= 1".into()).into());
    }
    let mut rng = Rng::spawn(&seed_from_u64(cfg.seed), b"gen-data");
    let dataset = data::synth_blobs(
        &mut rng,
        cfg.classes as usize,
        cfg.dim as usize,
        cfg.per_class as usize,
        cfg.spread,
        cfg.separation,
    )?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    if args.out.extension().is_some_and(|e| e == "dphm") {
        let values: Vec<f32> = dataset
            .points()
            .iter()
            .flat_map(|p| std::iter::once(p.label as f32).chain(p.features[1..].iter().map(|&v| v as f32)))
            .collect();
        let file = fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
        data::write_matrix(BufWriter::new(file), dataset.len(), dataset.dim() + 1, &values)?;
    } else {
        data::save_csv(&dataset, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    }
    let mut manifest = manifest;
    manifest.artifact(&args.out);
    let mut path = args.out.as_os_str().to_owned();
    path.push(".manifest.json");
    manifest.write(&cfg, cfg.seed, Path::new(&path))?;
    println!("wrote {} points ({} classes, dim {}) to {}", dataset.len(), cfg.classes, cfg.dim, args.out.display());
    Ok(())
}

fn train_distributed(args: TrainArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("train-distributed");
    let mut cfg: TrainConfig = resolve(&args, args.config.as_ref())?;
    final_seed(&mut cfg.seed)?;
    let dataset = load(&cfg.data, cfg.header)?;

    let mut sim_cfg = SimConfig::new(cfg.users, dphelmet::Hyperparams::default(), cfg.privacy.spec());
    sim_cfg.points_per_user = cfg.points_per_user;
    sim_cfg.user_level = cfg.user_level;
    sim_cfg.dropout_ids = cfg.dropout.clone();
    sim_cfg.colluding_ids = cfg.collude.clone();
    sim_cfg.master_seed = cfg.seed;
    sim_cfg.holdout_fraction = cfg.holdout;
    sim_cfg.scale_bits = cfg.scale_bits;
    sim_cfg.noise_allowance = cfg.noise_allowance;
    let (train, test) = sim_cfg.split(&dataset)?;
    let local = cfg.points_per_user.unwrap_or(train.len() / cfg.users.max(1));
    sim_cfg.hyper = cfg.hyper.hyperparams(local)?;
    let outcome = sim::run_split(&sim_cfg, &train, test.as_ref())?;

    create_dir(&args.out_dir)?;
    if let Some(model) = &outcome.released {
        let path = args.out_dir.join("model.dphm");
        svm::save_model(model, &sim_cfg.hyper, cfg.seed, &path)?;
        manifest.artifact(svm::sidecar_path(&path));
        manifest.artifact(path);
    }
    let report_path = args.out_dir.join("report.json");
    write_json(&report_path, &outcome.report)?;
    manifest.artifact(&report_path);
    let transcript_path = args.out_dir.join("transcript.bin");
    fs::write(&transcript_path, outcome.transcript.to_bytes())
        .with_context(|| format!("writing {}", transcript_path.display()))?;
    manifest.artifact(&transcript_path);
    manifest.write(&cfg, cfg.seed, &args.out_dir.join("manifest.json"))?;

    let acc = &outcome.report.accounting;
    match &outcome.report.status {
        RunStatus::Completed => {
            let accuracy = outcome.report.accuracy.map_or("n/a".to_string(), |a| format!("{:.4}", a));
            println!(
                "released model of {} users: accuracy {accuracy}, epsilon {}{} (delta {})",
                cfg.users,
                acc.epsilon,
                if !(acc.epsilon < 1.0) { " [outside the bound's proven range]" } else { "" },
                acc.delta
            );
            Ok(())
        }
        RunStatus::Aborted { missing, .. } => Err(Error::Dropout {
            missing: missing.clone(),
        }
        .into()),
    }
}

fn account(args: AccountArgs) -> Result<()> {
    let manifest = ManifestBuilder::start("account");
    let cfg: AccountConfig = resolve(&args, args.config.as_ref())?;
    let mut spec = cfg.privacy.spec();
    if let Some(eps) = cfg.epsilon {
        spec.sigma = dp::sigma_of_epsilon(eps, spec.delta)?;
    }
    let users = cfg.users.unwrap_or(1);
    let pointwise = match (cfg.clip, cfg.lambda, cfg.radius, cfg.points_per_user) {
        (Some(c), Some(lambda), Some(radius), Some(n)) => {
            let xi = dphelmet::Hyperparams {
                c,
                lambda,
                radius,
                ..Default::default()
            };
            svm::sensitivity(&xi, n)
        }
        // Without the learner's constants ε is reported per unit sensitivity.
        _ => 1.0,
    };
    let noise_sensitivity = match (cfg.user_level, cfg.radius) {
        (true, Some(r)) => dp::user_level_sensitivity(r),
        (true, None) => return Err(Error::Parameter("--user-level needs --radius".into()).into()),
        _ => pointwise,
    };
    let mode = if users == 1 {
        NoiseMode::Central
    } else {
        NoiseMode::Distributed
    };
    let ctx = GroupContext {
        pointwise_sensitivity: pointwise,
        radius: cfg.radius,
        points_per_user: cfg.points_per_user,
        user_level: cfg.user_level,
    };
    let report = dp::account(mode, &spec, users, noise_sensitivity, ctx)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &args.out {
        write_json(out, &report)?;
        let mut manifest = manifest;
        manifest.artifact(out);
        let mut path = out.as_os_str().to_owned();
        path.push(".manifest.json");
        manifest.write(&cfg, 0, Path::new(&path))?;
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("sweep");
    let mut cfg: SweepConfig = resolve(&args, args.config.as_ref())?;
    final_seed(&mut cfg.seed)?;
    let dataset = load(&cfg.data, cfg.header)?;
    let cv = CrossValidation {
        repeats: cfg.repeats,
        folds: cfg.folds,
    };
    let lambdas = cfg.lambdas.clone().unwrap_or_else(|| vec![cfg.hyper.lambda]);
    let radii = cfg.radii.clone().unwrap_or_else(|| vec![cfg.hyper.radius]);
    let train_size = if cv.folds > 1 {
        dataset.len() - dataset.len().div_ceil(cv.folds)
    } else {
        dataset.len() - (dataset.len() as f64 / 6.0).ceil() as usize
    };
    let mut configs = Vec::new();
    for &users in &cfg.users {
        let local = cfg.points_per_user.unwrap_or(train_size / users.max(1));
        for &lambda in &lambdas {
            for &radius in &radii {
                let mut hyper = cfg.hyper.hyperparams(local)?;
                hyper.lambda = lambda;
                hyper.radius = radius;
                let mut c = SimConfig::new(users, hyper, cfg.privacy.spec());
                c.points_per_user = cfg.points_per_user;
                c.user_level = cfg.user_level;
                c.master_seed = cfg.seed;
                configs.push(c);
            }
        }
    }
    let rows = sim::sweep(&configs, &cfg.sigmas, cv, &dataset)?;
    create_dir(&args.out_dir)?;
    for (name, rows) in [("sweep.csv", rows.clone()), ("best.csv", sim::select_best(&rows))] {
        let path = args.out_dir.join(name);
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        sim::write_sweep_csv(&rows, BufWriter::new(file))?;
        manifest.artifact(path);
    }
    manifest.write(&cfg, cfg.seed, &args.out_dir.join("manifest.json"))?;
    println!("{} sweep cells written to {}", rows.len(), args.out_dir.display());
    Ok(())
}

fn stability(args: StabilityArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("stability");
    let mut cfg: StabilityConfig = resolve(&args, args.config.as_ref())?;
    final_seed(&mut cfg.seed)?;
    let dataset = load(&cfg.data, cfg.header)?;
    let seed = seed_from_u64(cfg.seed);
    let (pool, probe) = match &cfg.probe_data {
        Some(_) => (dataset, load(&cfg.probe_data, cfg.header)?),
        None => {
            let held = cfg.probe_points.min(dataset.len() / 2).max(1);
            let fraction = held as f64 / dataset.len() as f64;
            sim::holdout_split(&dataset, fraction, &mut Rng::spawn(&seed, b"probe-set"))?
        }
    };
    let xi = cfg.hyper.hyperparams(pool.len() / cfg.users.max(1))?;
    let report = learnability::stability_probe(
        &pool,
        &probe,
        &xi,
        cfg.users,
        cfg.probes,
        Replacement::ProbeSet,
        &mut Rng::spawn(&seed, b"stability"),
    )?;
    create_dir(&args.out_dir)?;
    let json = args.out_dir.join("stability.json");
    write_json(&json, &report)?;
    let csv = args.out_dir.join("stability.csv");
    let file = fs::File::create(&csv).with_context(|| format!("creating {}", csv.display()))?;
    learnability::write_stability_csv(&report, BufWriter::new(file))?;
    manifest.artifact(json);
    manifest.artifact(csv);
    manifest.write(&cfg, cfg.seed, &args.out_dir.join("manifest.json"))?;
    println!(
        "observed gap {:.3e} vs bound {:.3e} over {} probes ({} violations)",
        report.observed, report.bound, report.probes, report.violations
    );
    if report.violations > 0 {
        return Err(Error::Oracle(format!("{} probes exceed the stability bound", report.violations)).into());
    }
    Ok(())
}

fn convergence(args: ConvergenceArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("convergence");
    let mut cfg: ConvergenceConfig = resolve(&args, args.config.as_ref())?;
    final_seed(&mut cfg.seed)?;
    let pool = load(&cfg.data, cfg.header)?;
    let xi = cfg.hyper.hyperparams(pool.len() / cfg.users.max(1))?;
    let report = learnability::convergence_probe(
        &pool,
        &xi,
        cfg.users,
        &cfg.grid,
        cfg.repeats,
        &mut Rng::spawn(&seed_from_u64(cfg.seed), b"convergence"),
    )?;
    create_dir(&args.out_dir)?;
    let json = args.out_dir.join("convergence.json");
    write_json(&json, &report)?;
    let csv = args.out_dir.join("convergence.csv");
    let file = fs::File::create(&csv).with_context(|| format!("creating {}", csv.display()))?;
    learnability::write_convergence_csv(&report, BufWriter::new(file))?;
    manifest.artifact(json);
    manifest.artifact(csv);
    manifest.write(&cfg, cfg.seed, &args.out_dir.join("manifest.json"))?;
    println!(
        "slope {:.3} (tail {:.3}), monotone within {}%: {}",
        report.slope,
        report.tail_slope,
        learnability::MONOTONE_BAND * 100.0,
        report.monotone
    );
    if !report.monotone {
        return Err(Error::Oracle("optimality gap is not non-increasing along the grid".into()).into());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) => EXIT_IO,
                Error::Protocol(_) | Error::Dropout { .. } => EXIT_ABORT,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainDistributed(a) => train_distributed(a),
        Command::Account(a) => account(a),
        Command::Sweep(a) => sweep(a),
        Command::Stability(a) => stability(a),
        Command::Convergence(a) => convergence(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
