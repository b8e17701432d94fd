use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fastmap::synth::{self, Layout, SynthCamera, SynthSpec};
use fastmap::{ingest, metrics, pipeline, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "fastmap",
    version,
    about = "Global structure from motion on verified matches"
)]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a scene from a match file.
    Run {
        matches: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// key = value configuration file.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep focal lengths fixed during epipolar adjustment.
        #[arg(long)]
        no_focal_refine: bool,
    },
    /// Generate a synthetic scene: `matches.txt` plus the ground truth in `gt/`.
    Synth(SynthArgs),
    /// Compare an estimated model directory with a ground-truth one.
    Eval { est: PathBuf, gt: PathBuf },
    /// Re-export a model directory in canonical text form.
    Export {
        model: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print the default configuration.
    Config,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    images: usize,
    #[arg(long, default_value_t = 500)]
    points: usize,
    /// ring, grid or random.
    #[arg(long, default_value = "ring")]
    layout: Layout,
    #[arg(long, default_value_t = 60.0)]
    fov: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    alpha: f64,
    /// Several cameras as `fov:alpha` pairs, for example `60:-0.1,45:0`.
    /// Images use them round robin. Overrides --fov and --alpha.
    #[arg(long, value_delimiter = ',', value_parser = parse_camera, allow_negative_numbers = true)]
    cameras: Vec<SynthCamera>,
    #[arg(long, default_value_t = 1024)]
    width: u32,
    #[arg(long, default_value_t = 768)]
    height: u32,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Fraction of correspondences per pair whose second keypoint is swapped with another match's.
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    #[arg(long)]
    planar: bool,
    #[arg(long, default_value_t = 20)]
    min_pair_matches: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_camera(s: &str) -> Result<SynthCamera, String> {
    let (fov, alpha) = s
        .split_once(':')
        .ok_or_else(|| format!("expected fov:alpha, got {s:?}"))?;
    Ok(SynthCamera {
        fov_deg: fov.trim().parse().map_err(|e| format!("fov {fov:?}: {e}"))?,
        alpha: alpha.trim().parse().map_err(|e| format!("alpha {alpha:?}: {e}"))?,
    })
}

impl SynthArgs {
    fn spec(&self) -> SynthSpec {
        SynthSpec {
            n_images: self.images,
            n_points: self.points,
            layout: self.layout,
            fov_deg: self.fov,
            alpha: self.alpha,
            cameras: self.cameras.clone(),
            camera_of_image: None,
            width: self.width,
            height: self.height,
            noise_px: self.noise,
            outlier_frac: self.outliers,
            planar: self.planar,
            min_pair_matches: self.min_pair_matches,
            seed: self.seed,
        }
    }
}

fn run(matches: &Path, out: &Path, config: Option<&Path>, seed: u64, no_focal_refine: bool) -> Result<(), String> {
    let mut cfg = PipelineConfig::load(config).map_err(|e| format!("config: {e}"))?;
    if no_focal_refine {
        cfg.focal_refine = false;
    }
    let result = pipeline::run_to_dir(matches, out, &cfg, seed).map_err(|e| e.to_string())?;
    let registered = result.scene.poses.num_registered();
    println!(
        "registered {registered}/{} images, {} points, model in {}",
        result.scene.poses.len(),
        result.scene.points.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::FAILURE;
    }
    let outcome = match cli.command {
        Command::Run {
            matches,
            out,
            config,
            seed,
            no_focal_refine,
        } => run(&matches, &out, config.as_deref(), seed, no_focal_refine),
        Command::Synth(args) => synth::generate(&args.spec())
            .and_then(|scene| scene.write(&args.out))
            .map_err(|e| e.to_string()),
        Command::Eval { est, gt } => ingest::read_model(&est)
            .and_then(|est| Ok((est, ingest::read_model(&gt)?)))
            .and_then(|(est, gt)| metrics::evaluate(&est, &gt))
            .map(|report| println!("{report}"))
            .map_err(|e| e.to_string()),
        Command::Export { model, out } => ingest::read_model(&model)
            .and_then(|scene| ingest::write_model(&scene, &out))
            .map_err(|e| e.to_string()),
        Command::Config => {
            print!("{}", PipelineConfig::default().to_text());
            Ok(())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
