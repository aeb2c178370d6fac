use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use getup_core::config::{Ablation, GnnVariant, RunConfig};
use getup_core::gradcheck;
use getup_core::metrics::DEFAULT_CAPS;
use getup_core::model::GetUp;
use getup_core::params::ParameterStore;
use getup_core::scene::{self, NoiseSpec, SceneSpec};
use getup_core::train;

#[derive(Parser)]
#[command(name = "getup", version, about = "Radar-camera depth estimation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus the loss trace.
    Train(TrainArgs),
    /// Evaluate a checkpoint at several range caps.
    Eval(EvalArgs),
    /// Histogram of radar-to-nearest-LiDAR depth discrepancies.
    Hist(HistArgs),
    /// Finite-difference check of every learnable block.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    Default,
    None,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    lidar_points: Option<usize>,
    #[arg(long)]
    radar_min: Option<usize>,
    #[arg(long)]
    radar_max: Option<usize>,
    #[arg(long, value_enum, default_value_t = Noise::Default)]
    noise: Noise,
    #[arg(long)]
    position_sigma: Option<f64>,
    #[arg(long)]
    depth_sigma: Option<f64>,
}

/// Overrides applied on top of the defaults or a `--config` file.
#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    decay_power: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_l: Option<usize>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    n_units: Option<usize>,
    /// Crop as `HEIGHTxWIDTH`.
    #[arg(long)]
    crop: Option<String>,
    /// Comma-separated ablation flags: no_ascb, conventional_sparse, no_gnn, no_upsample.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long, value_parser = ["attention", "dgcnn"])]
    gnn_variant: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set!(
            seed => c.seed,
            iterations => c.iterations,
            batch_size => c.batch_size,
            learning_rate => c.learning_rate,
            decay_power => c.decay_power,
            alpha => c.alpha,
            k => c.model.k,
            n_l => c.upsampler.n_l,
            tau => c.upsampler.tau,
            n_units => c.upsampler.n_units,
        );
        if let Some(crop) = &self.crop {
            let (h, w) = crop
                .split_once(['x', 'X'])
                .context("crop must look like 64x128")?;
            c.crop = [h.trim().parse()?, w.trim().parse()?];
        }
        if let Some(a) = &self.ablation {
            c.ablation = Ablation::parse_flags(a)?;
        }
        if let Some(v) = &self.gnn_variant {
            c.model.gnn_variant = if v == "dgcnn" { GnnVariant::Dgcnn } else { GnnVariant::Attention };
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Print every n-th iteration of the loss trace.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training output directory holding `checkpoint.bin` and `config.toml`.
    #[arg(long, required_unless_present = "ground_truth")]
    run: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated caps in metres.
    #[arg(long, default_value = "50,70,80")]
    caps: String,
    #[arg(long, default_value = "test")]
    split: String,
    /// Write one graymap per scene, scaled to the largest cap.
    #[arg(long)]
    images: bool,
    /// Score the ground truth against itself instead of a model.
    #[arg(long)]
    ground_truth: bool,
}

#[derive(Args)]
struct HistArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Hist(a) => hist(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let mut spec = SceneSpec::default();
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { spec.$field = v; })* };
    }
    set!(height, width, lidar_points, radar_min, radar_max);
    if let Noise::None = a.noise {
        spec.noise = NoiseSpec::none();
    }
    if let Some(s) = a.position_sigma {
        spec.noise.position_sigma = s;
    }
    if let Some(s) = a.depth_sigma {
        spec.noise.depth_sigma = s;
    }
    let scenes = scene::generate_dataset(a.seed, a.count, &spec)?;
    scene::save_dataset(&scenes, &a.out)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = a.config.resolve()?;
    let scenes = scene::load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let every = a.log_every.max(1);
    let outcome = train::train(&config, &scenes, |row| {
        if row.iteration % every == 0 || row.iteration + 1 == config.iterations {
            println!(
                "iter {:>5}  lr {:.3e}  loss {:.5}  depth {:.5}  chamfer {}",
                row.iteration,
                row.learning_rate,
                row.total,
                row.depth,
                row.chamfer.map_or("-".into(), |c| format!("{c:.5}"))
            );
        }
    })?;
    let out = &a.out;
    outcome.store.save(out.join("checkpoint.bin"))?;
    train::write_file(&out.join("loss_trace.csv"), train::trace_csv(&outcome.trace))?;
    train::write_file(&out.join("config.toml"), config.to_toml())?;
    println!("wrote checkpoint, loss trace and config to {}", out.display());
    Ok(())
}

fn parse_caps(list: &str) -> Result<Vec<f64>> {
    let caps: Vec<f64> = list
        .split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad cap {s:?}")))
        .collect::<Result<_>>()?;
    if caps.is_empty() || caps.iter().any(|&c| !(c > 0.0)) {
        bail!("caps must be positive");
    }
    Ok(caps)
}

fn load_run(dir: &Path) -> Result<(RunConfig, GetUp, ParameterStore)> {
    let config = RunConfig::load(dir.join("config.toml"))?;
    let mut store = ParameterStore::new();
    let model = GetUp::new(&config, &mut store)?;
    let trained = ParameterStore::load(dir.join("checkpoint.bin"))?;
    store.load_values_from(&trained)?;
    Ok((config, model, store))
}

fn eval(a: EvalArgs) -> Result<()> {
    let caps = parse_caps(&a.caps)?;
    if caps.is_empty() {
        bail!("no caps");
    }
    let scenes = scene::load_dataset(&a.data)?;
    let (pairs, alpha, tag) = match &a.run {
        Some(run) if !a.ground_truth => {
            let (config, model, store) = load_run(run)?;
            (train::predict_all(&model, &store, &scenes)?, config.alpha, config.tag())
        }
        _ => {
            let pairs = scenes.iter().map(|s| (s.depth.clone(), s.depth.clone())).collect();
            (pairs, RunConfig::default().alpha, "ground_truth".to_string())
        }
    };
    let reports = train::report_caps(&pairs, &caps)?;
    let path = a.out.join(format!("metrics_{tag}.csv"));
    train::write_file(&path, train::metrics_csv(&reports, &a.split, alpha, &tag))?;
    for r in &reports {
        println!(
            "cap {:>5} m  MAE {:.4}  RMSE {:.4}  AbsRel {:.4}  δ1 {:.4}  pixels {}",
            r.eval_cap, r.mae, r.rmse, r.absrel, r.delta1, r.pixel_count
        );
    }
    if a.images {
        let cap = caps.iter().copied().fold(DEFAULT_CAPS[0], f64::max);
        for (i, (pred, _)) in pairs.iter().enumerate() {
            let p = a.out.join("images").join(format!("scene_{i:04}.pgm"));
            train::write_file(&p, train::depth_pgm(pred, cap)?)?;
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn hist(a: HistArgs) -> Result<()> {
    let scenes = scene::load_dataset(&a.data)?;
    let counts = scene::discrepancy_histogram(&scenes)?;
    train::write_file(&a.out, scene::histogram_csv(&counts, scene::HIST_BIN_WIDTH))?;
    println!(
        "{} radar points, {:.1}% beyond 1 m; wrote {}",
        counts.iter().sum::<usize>(),
        100.0 * scene::fraction_beyond(&counts, scene::HIST_BIN_WIDTH, 1.0),
        a.out.display()
    );
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let mut failed = 0;
    for (name, report) in gradcheck::run_suite(a.seed)? {
        let ok = report.max_rel_error < a.tolerance;
        failed += usize::from(!ok);
        println!(
            "{} {name:<26} max rel err {:.3e} over {} entries, {} kink probes skipped",
            if ok { "PASS" } else { "FAIL" },
            report.max_rel_error,
            report.entries,
            report.skipped
        );
    }
    if failed > 0 {
        bail!("{failed} block(s) exceeded relative error {}", a.tolerance);
    }
    Ok(())
}
