//! `ctsplat`: dataset generation, training, rendering and evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ctsplat::geometry::pose_at_angle;
use ctsplat::io::{read_ply, write_image, write_ply, Dataset, PlyLayout};
use ctsplat::metrics::{evaluate, format_table, summary_csv, sweep_fractions_with, write_csv};
use ctsplat::phantom::{generate_dataset, make_head_phantom};
use ctsplat::rasterizer::render;
use ctsplat::trainer::{initial_cloud, split_views, train_to_dir, LearningRates, TrainConfig, MODEL_FILE};
use ctsplat::ScanGeometry;

#[derive(Parser, Debug)]
#[command(name = "ctsplat", version, about = "Gaussian splatting for sparse-view CT projections")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "CTSPLAT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a head phantom and write its radiographs plus a manifest.
    Generate(GenerateArgs),
    /// Fit a Gaussian cloud to a dataset.
    Train(TrainArgs),
    /// Render a trained model at chosen angles.
    Render(RenderArgs),
    /// Score a trained model on held-out views.
    Evaluate(EvaluateArgs),
    /// Train and score one model per training fraction.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Phantom voxel grid, `N` or `NXxNYxNZ`.
    #[arg(long, default_value = "64", value_parser = parse_dims)]
    dims: [usize; 3],
    /// Number of projection views.
    #[arg(long, default_value_t = 360)]
    n_views: usize,
    /// Angular step between views, degrees.
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    /// Angle of the first view, degrees.
    #[arg(long, default_value_t = 0.0)]
    start: f64,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 128)]
    image_size: usize,
    /// Phantom seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side of the cubic field of view, mm.
    #[arg(long, default_value_t = 200.0)]
    fov: f64,
    /// Source to isocenter distance, mm.
    #[arg(long, default_value_t = 1000.0)]
    source_to_isocenter: f64,
    /// Source to detector distance, mm.
    #[arg(long, default_value_t = 1500.0)]
    source_to_detector: f64,
    /// Square detector side, mm.
    #[arg(long, default_value_t = 300.0)]
    detector_size: f64,
}

/// Training options shared by `train` and `sweep`. Unset flags fall back to
/// the config file, then to built-in defaults.
#[derive(Args, Debug, Default)]
struct TrainOptions {
    /// JSON training config; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the short schedule for small scans instead of the full one.
    #[arg(long, conflicts_with = "config")]
    quick: bool,
    /// Optimization steps (default 20000; 5000 with --quick).
    #[arg(long)]
    iterations: Option<usize>,
    /// Seed for initialization, view order and density control.
    #[arg(long)]
    seed: Option<u64>,
    /// Initial Gaussian count.
    #[arg(long)]
    n_gaussians: Option<usize>,
    /// Weight of the L1 term.
    #[arg(long)]
    lambda_l1: Option<f64>,
    /// Weight of the D-SSIM term.
    #[arg(long)]
    lambda_dssim: Option<f64>,
    /// Weight of the opacity Beta prior.
    #[arg(long)]
    lambda_beta: Option<f64>,
    /// Weight of the total-variation term.
    #[arg(long)]
    lambda_tv: Option<f64>,
    /// Sets every learning rate; per-group flags override it.
    #[arg(long)]
    lr_all: Option<f64>,
    /// Initial position rate, relative to the scene extent.
    #[arg(long)]
    lr_position: Option<f64>,
    /// Final position rate, relative to the scene extent.
    #[arg(long)]
    lr_position_final: Option<f64>,
    /// Log-scale learning rate.
    #[arg(long)]
    lr_scale: Option<f64>,
    /// Rotation learning rate.
    #[arg(long)]
    lr_rotation: Option<f64>,
    /// Opacity-logit learning rate.
    #[arg(long)]
    lr_opacity: Option<f64>,
    /// Intensity learning rate.
    #[arg(long)]
    lr_intensity: Option<f64>,
    /// First iteration after which density control runs.
    #[arg(long)]
    densify_from: Option<usize>,
    /// Last iteration of density control.
    #[arg(long)]
    densify_until: Option<usize>,
    /// Iterations between density control passes.
    #[arg(long)]
    densify_interval: Option<usize>,
    /// Mean screen-space gradient above which a Gaussian is cloned or split.
    #[arg(long)]
    densify_grad_threshold: Option<f64>,
    /// Upper bound on the cloud size.
    #[arg(long)]
    max_gaussians: Option<usize>,
    /// Checkpoint every N iterations (0 disables).
    #[arg(long)]
    checkpoint_interval: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the model, log, checkpoints and config.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of views used for training, in (0, 1].
    #[arg(long)]
    train_fraction: Option<f64>,
    #[command(flatten)]
    opts: TrainOptions,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Trained PLY model.
    #[arg(long)]
    model: PathBuf,
    /// Manifest providing the scan geometry.
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated angles in degrees, within [0, 360).
    #[arg(long, value_delimiter = ',', required_unless_present = "all_test", conflicts_with = "all_test")]
    angles: Vec<f64>,
    /// Render every held-out view of the split.
    #[arg(long)]
    all_test: bool,
    /// Split used by --all-test.
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    /// Output directory for the PNGs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Trained PLY model.
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Split whose held-out views are scored.
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    /// Directory for `eval_rows.csv` and `eval_summary.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for models and CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated training fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.25,0.10,0.05")]
    fractions: Vec<f64>,
    #[command(flatten)]
    opts: TrainOptions,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X', ',']).collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad dimension {p:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    match nums.as_slice() {
        [n] => Ok([*n; 3]),
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(format!("expected N or NXxNYxNZ, got {s:?}")),
    }
}

impl TrainOptions {
    fn resolve(&self, train_fraction: Option<f64>) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None if self.quick => TrainConfig::quick(),
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        if let Some(r) = self.lr_all {
            c.learning_rates = LearningRates::all(r);
        }
        set!(self.iterations => c.iterations);
        set!(self.seed => c.seed);
        set!(self.n_gaussians => c.init.n_gaussians);
        set!(self.lambda_l1 => c.weights.lambda_l1);
        set!(self.lambda_dssim => c.weights.lambda_dssim);
        set!(self.lambda_beta => c.weights.lambda_beta);
        set!(self.lambda_tv => c.weights.lambda_tv);
        set!(self.lr_position => c.learning_rates.position_init);
        set!(self.lr_position_final => c.learning_rates.position_final);
        set!(self.lr_scale => c.learning_rates.log_scale);
        set!(self.lr_rotation => c.learning_rates.rotation);
        set!(self.lr_opacity => c.learning_rates.opacity_logit);
        set!(self.lr_intensity => c.learning_rates.intensity);
        set!(self.densify_from => c.densify_from);
        set!(self.densify_until => c.densify_until);
        set!(self.densify_interval => c.densify_interval);
        set!(self.densify_grad_threshold => c.densify_grad_threshold);
        set!(self.max_gaussians => c.max_gaussians);
        set!(self.checkpoint_interval => c.checkpoint_interval);
        set!(train_fraction => c.train_fraction);
        c.validate()?;
        Ok(c)
    }
}

fn load_dataset(manifest: &Path) -> Result<Dataset> {
    Dataset::load(manifest).with_context(|| format!("loading dataset {}", manifest.display()))
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let geom = ScanGeometry {
        source_to_isocenter: a.source_to_isocenter,
        source_to_detector: a.source_to_detector,
        detector_width: a.detector_size,
        detector_height: a.detector_size,
        image_width: a.image_size,
        image_height: a.image_size,
        n_views: a.n_views,
        angular_start_deg: a.start,
        angular_step_deg: a.step,
        fov_side: a.fov,
    };
    geom.validate()?;
    let phantom = make_head_phantom(a.dims, a.seed, a.fov)?;
    let manifest = generate_dataset(&phantom, &geom, &a.out)?;
    println!(
        "wrote {} views at {}x{} to {}",
        manifest.views.len(),
        a.image_size,
        a.image_size,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = a.opts.resolve(a.train_fraction)?;
    let dataset = load_dataset(&a.manifest)?;
    let (train, test) = split_views(dataset.len(), config.train_fraction)?;
    println!("training views: {}, held-out views: {}", train.len(), test.len());
    let init = initial_cloud(&dataset, &config)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let text = serde_json::to_string_pretty(&config)?;
    std::fs::write(a.out.join("config.json"), text + "\n")?;
    let outcome = train_to_dir(&dataset, &config, init, &a.out)?;
    let last = outcome.log.last().expect("at least one iteration");
    println!(
        "finished {} iterations: loss {:.6}, {} gaussians, model {}",
        last.iteration,
        last.total,
        outcome.cloud.len(),
        a.out.join(MODEL_FILE).display()
    );
    Ok(())
}

fn render_file_name(angle: f64) -> String {
    format!("render_{angle}.png")
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let cloud = read_ply(&a.model)?;
    let dataset = load_dataset(&a.manifest)?;
    let geom = *dataset.manifest.scan();
    let angles: Vec<f64> = if a.all_test {
        let (_, test) = split_views(dataset.len(), a.train_fraction)?;
        test.iter().map(|k| dataset.images[*k].view_angle_deg).collect()
    } else {
        a.angles.clone()
    };
    if let Some(bad) = angles.iter().find(|t| !(t.is_finite() && (0.0..360.0).contains(*t))) {
        bail!("angle {bad} is outside the orbit range [0, 360)");
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for &angle in &angles {
        let pose = pose_at_angle(&geom, angle);
        let mut img = render(&cloud, &pose, geom.image_dims(), 0.0)?;
        img.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        write_image(&img, &a.out.join(render_file_name(angle)))?;
    }
    println!("rendered {} views to {}", angles.len(), a.out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let cloud = read_ply(&a.model)?;
    let dataset = load_dataset(&a.manifest)?;
    let (_, test) = split_views(dataset.len(), a.train_fraction)?;
    let report = evaluate(&cloud, &dataset, &test, a.train_fraction)?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_csv(&report.rows_csv(), &out.join("eval_rows.csv"))?;
        write_csv(&summary_csv(std::slice::from_ref(&report)), &out.join("eval_summary.csv"))?;
    }
    print!("{}", format_table(std::slice::from_ref(&report)));
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let config = a.opts.resolve(None)?;
    let dataset = load_dataset(&a.manifest)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let reports = sweep_fractions_with(&dataset, &a.fractions, &config, |f, out| {
        write_ply(&out.cloud, &a.out.join(format!("model_{f}.ply")), PlyLayout::Native)
    })?;
    for r in &reports {
        write_csv(&r.rows_csv(), &a.out.join(format!("eval_rows_{}.csv", r.train_fraction)))?;
    }
    write_csv(&summary_csv(&reports), &a.out.join("sweep_summary.csv"))?;
    print!("{}", format_table(&reports));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors and 0 for --help.
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
