use std::process::ExitCode;

use clap::{Parser, Subcommand};

use splatsurf::io::config::ConfigError;
use splatsurf::train::TrainError;

mod ops;

#[derive(Parser)]
#[command(
    name = "splatsurf",
    version,
    about = "Surface reconstruction from posed images with flattened Gaussian splatting"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic benchmark scene in COLMAP text layout.
    Synth(ops::SynthArgs),
    /// Validate a scene directory; optionally align, downscale, and rewrite it.
    Ingest(ops::IngestArgs),
    /// Print the partition plan (cameras and anchors per cell).
    Plan(ops::PlanArgs),
    /// Train all partitions and write a checkpoint.
    Train(ops::TrainArgs),
    /// Render views from a checkpoint.
    Render(ops::RenderArgs),
    /// Fuse rendered depth into a TSDF and extract a mesh.
    Mesh(ops::MeshArgs),
    /// PSNR/SSIM of checkpoint renders against held-out views.
    Eval(ops::EvalArgs),
    /// Compare analytic objective gradients with central differences.
    Gradcheck(ops::GradcheckArgs),
}

/// 2: bad configuration. 3: bad or missing data. 4: numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<ops::NumericFailure>().is_some() {
        return 4;
    }
    if let Some(t) = err.downcast_ref::<TrainError>() {
        fn numeric(t: &TrainError) -> bool {
            match t {
                TrainError::NonFiniteLoss { .. } => true,
                TrainError::Partition { source, .. } => numeric(source),
                _ => false,
            }
        }
        if numeric(t) {
            return 4;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => ops::synth(a),
        Cmd::Ingest(a) => ops::ingest(a),
        Cmd::Plan(a) => ops::plan(a),
        Cmd::Train(a) => ops::train(a),
        Cmd::Render(a) => ops::render(a),
        Cmd::Mesh(a) => ops::mesh(a),
        Cmd::Eval(a) => ops::eval(a),
        Cmd::Gradcheck(a) => ops::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
