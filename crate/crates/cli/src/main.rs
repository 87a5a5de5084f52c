//! `semidense` command-line driver.
//!
//! Exit codes: 0 success, 2 usage or I/O error, 3 empty result.
//! `SEMIDENSE_THREADS` caps the worker thread count.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semidense::pipeline::{self, PipelineError, RunConfig};

#[derive(Parser)]
#[command(name = "semidense", version, about = "Semi-dense object reconstruction and 2D-3D pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct a semi-dense point cloud from a scene's reference views.
    Reconstruct {
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the pose of every query view against a model.
    Estimate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score estimated poses against the scene's ground truth.
    Eval {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run synth, reconstruct, estimate and eval into one directory.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (output file for `eval`).
    #[arg(long)]
    out: PathBuf,

    #[arg(long)]
    n_points: Option<usize>,
    #[arg(long)]
    n_views: Option<usize>,
    #[arg(long)]
    n_query_views: Option<usize>,
    #[arg(long)]
    fine_noise: Option<f64>,
    #[arg(long)]
    descriptor_noise: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    outlier_rate: Option<f64>,

    #[arg(long)]
    min_track_length: Option<usize>,
    #[arg(long)]
    max_reproj_px: Option<f64>,
    #[arg(long)]
    min_confidence: Option<f64>,
    #[arg(long)]
    binary_ply: bool,

    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    n_coarse: Option<usize>,
    #[arg(long)]
    n_fine: Option<usize>,
    #[arg(long)]
    fine_temperature: Option<f64>,
    #[arg(long)]
    coarse_weights: Option<PathBuf>,
    #[arg(long)]
    fine_weights: Option<PathBuf>,
    /// Same as `--n-coarse 0 --n-fine 0`.
    #[arg(long)]
    bypass_attention: bool,

    #[arg(long)]
    inlier_px: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    symmetric: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Common {
    fn config(&self) -> Result<RunConfig, PipelineError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        set(&mut c.seed, self.seed);
        let s = &mut c.scene;
        set(&mut s.n_points, self.n_points);
        set(&mut s.n_views, self.n_views);
        set(&mut s.n_query_views, self.n_query_views);
        set(&mut s.noise.fine_noise_sigma, self.fine_noise);
        set(&mut s.noise.descriptor_noise_sigma, self.descriptor_noise);
        set(&mut s.noise.dropout_rate, self.dropout);
        set(&mut s.noise.outlier_rate, self.outlier_rate);
        let r = &mut c.reconstruction;
        set(&mut r.min_track_length, self.min_track_length);
        set(&mut r.max_reproj_px, self.max_reproj_px);
        set(&mut r.min_confidence, self.min_confidence);
        r.binary_ply |= self.binary_ply;
        let m = &mut c.matching;
        set(&mut m.tau, self.tau);
        set(&mut m.theta, self.theta);
        set(&mut m.window, self.window);
        set(&mut m.n_coarse, self.n_coarse);
        set(&mut m.n_fine, self.n_fine);
        set(&mut m.fine_temperature, self.fine_temperature);
        if self.coarse_weights.is_some() {
            m.coarse_weights = self.coarse_weights.clone();
        }
        if self.fine_weights.is_some() {
            m.fine_weights = self.fine_weights.clone();
        }
        if self.bypass_attention {
            m.n_coarse = 0;
            m.n_fine = 0;
        }
        if self.inlier_px.is_some() {
            c.solver.inlier_px = self.inlier_px;
        }
        set(&mut c.solver.max_iters, self.max_iters);
        c.symmetric |= self.symmetric;
        c.validate()?;
        Ok(c)
    }
}

fn configure_threads() -> Result<(), PipelineError> {
    let Ok(v) = std::env::var("SEMIDENSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| PipelineError::Usage(format!("SEMIDENSE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| PipelineError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    configure_threads()?;
    match cli.command {
        Command::Synth { common } => {
            let scene = pipeline::synth(&common.config()?, &common.out)?;
            println!(
                "scene: {} points, {} reference views, {} query views -> {}",
                scene.points.len(),
                scene.views.len(),
                scene.query_views.len(),
                common.out.display()
            );
        }
        Command::Reconstruct { scene, common } => {
            let r = pipeline::reconstruct(&scene, &common.config()?, &common.out)?;
            println!(
                "reconstruction: {} tracks, {} triangulated, {} refined points -> {}",
                r.tracks,
                r.triangulated,
                r.points,
                common.out.display()
            );
        }
        Command::Estimate { model, scene, common } => {
            let s = pipeline::estimate(&model, &scene, &common.config()?, &common.out)?;
            println!("estimate: {}/{} query poses -> {}", s.succeeded, s.queries, common.out.display());
        }
        Command::Eval { poses, scene, common } => {
            let table = pipeline::eval(&poses, &scene, &common.config()?, &common.out)?;
            print_summary(&table, &common.out);
        }
        Command::Pipeline { common } => {
            let table = pipeline::pipeline(&common.config()?, &common.out)?;
            print_summary(&table, &common.out.join("metrics.csv"));
        }
    }
    Ok(())
}

fn print_summary(table: &str, path: &Path) {
    if let Some(last) = table.lines().last() {
        println!("{}", pipeline::METRICS_COLUMNS.join(","));
        println!("{last}");
    }
    println!("metrics -> {}", path.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
