//! `fanbeam`: command-line front end for the fanbeam CT toolkit.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use commands::{
    CalibrateArgs, FbpArgs, GeometryArgs, MetricsArgs, PhantomArgs, ProjectArgs, ReconstructArgs,
};
use manifest::{Outcome, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "fanbeam", version, about = "Fanbeam CT calibration and reconstruction")]
struct Cli {
    /// Worker threads; 0 picks the number of cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Write a JSON run manifest to this path.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a geometry JSON from the reduced parametrization.
    Geometry(GeometryArgs),
    /// Rasterize ellipse phantoms and their exact sinograms.
    Phantom(PhantomArgs),
    /// Forward-project an image.
    Project(ProjectArgs),
    /// Filtered backprojection of a sinogram.
    Fbp(FbpArgs),
    /// Fit geometry parameters to a directory of sinogram/image pairs.
    Calibrate(CalibrateArgs),
    /// Data-consistency reconstruction with a calibrated model.
    Reconstruct(ReconstructArgs),
    /// RMSE and max abs difference of two images, as JSON on stdout.
    Metrics(MetricsArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Geometry(_) => "geometry",
            Command::Phantom(_) => "phantom",
            Command::Project(_) => "project",
            Command::Fbp(_) => "fbp",
            Command::Calibrate(_) => "calibrate",
            Command::Reconstruct(_) => "reconstruct",
            Command::Metrics(_) => "metrics",
        }
    }

    fn run(&self) -> anyhow::Result<Outcome> {
        match self {
            Command::Geometry(a) => commands::geometry(a),
            Command::Phantom(a) => commands::phantom(a),
            Command::Project(a) => commands::project(a),
            Command::Fbp(a) => commands::fbp(a),
            Command::Calibrate(a) => commands::calibrate(a),
            Command::Reconstruct(a) => commands::reconstruct(a),
            Command::Metrics(a) => commands::metrics(a),
        }
    }
}

/// Stable, machine-readable error class.
fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<fanbeam_core::Error>() {
            return e.category();
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return "usage";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()?;
    let start = Instant::now();
    let outcome = pool.install(|| cli.command.run())?;
    if let Some(path) = &cli.manifest {
        RunManifest::new(cli.command.name(), outcome, start.elapsed()).write(path)?;
    } else {
        manifest::check_outputs(&outcome.outputs)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err:#}", category(&err));
            ExitCode::FAILURE
        }
    }
}
