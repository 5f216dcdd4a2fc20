use clap::{Parser, Subcommand};

use pn3d::cli;

/// Lift 2D human-pose keypoints to temporally consistent 3D skeletons and
/// body-model coefficients, trained without 3D supervision.
#[derive(Parser)]
#[command(name = "pn3d", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic body model and keypoint dataset with 3D ground truth.
    Synth(cli::SynthArgs),
    /// Run training stages, resuming from the latest checkpoint in --out.
    Train(cli::TrainArgs),
    /// Sliding-window 3D inference over a keypoint file.
    Lift(cli::LiftArgs),
    /// Score predictions against ground truth.
    Eval(cli::EvalArgs),
    /// Dump learned adaptation weights or all parameters.
    Export(cli::ExportArgs),
}

fn worker_threads() -> usize {
    std::env::var("PN3D_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn main() {
    let cli = Cli::parse();
    let threads = worker_threads();
    let result = match &cli.command {
        Command::Synth(args) => cli::cmd_synth(args),
        Command::Train(args) => cli::cmd_train(args, threads),
        Command::Lift(args) => cli::cmd_lift(args, threads),
        Command::Eval(args) => cli::cmd_eval(args, threads).map(|report| {
            println!(
                "P-MPJPE {:.2} mm | MPJVE {:.3} mm/frame | MBLSTD {:.2} mm | PCK@150 {:.1}% | AUC {:.1}%",
                report.p_mpjpe_mm,
                report.mpjve_mm_per_frame,
                report.mblstd_mm,
                report.pck150_percent,
                report.auc_percent
            );
        }),
        Command::Export(args) => cli::cmd_export(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
