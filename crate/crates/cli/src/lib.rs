//! Command-line front end for the event-camera pose pipeline.

pub mod bench;
pub mod commands;
pub mod config;

use clap::{Parser, Subcommand};

/// Bad flags or config values; the binary exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Parser)]
#[command(name = "evpose", version, about = "Event-camera point-cloud pose pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic event stream.
    Synth(commands::SynthArgs),
    /// Window an event stream and write one point-cloud CSV per window.
    Rasterize(commands::RasterizeArgs),
    /// Apply Sobel edge enhancement to point-cloud CSVs.
    Enhance(commands::EnhanceArgs),
    /// Dump slice tokens before and after the temporal block.
    Sliceseq(commands::SliceSeqArgs),
    /// Run the network on point clouds and decode 2-D poses.
    Forward(commands::ForwardArgs),
    /// Triangulate two views of 2-D poses into 3-D.
    Triangulate(commands::TriangulateArgs),
    /// Mean per-joint position error between pose files.
    Eval(commands::EvalArgs),
    /// Write a synthetic two-camera rig and ground-truth poses.
    Rig(commands::RigArgs),
    /// Write seeded weight files.
    InitWeights(commands::InitWeightsArgs),
    /// Time each pipeline stage on a synthetic window.
    Bench(bench::BenchArgs),
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Rasterize(a) => commands::rasterize_cmd(a),
        Command::Enhance(a) => commands::enhance_cmd(a),
        Command::Sliceseq(a) => commands::sliceseq_cmd(a),
        Command::Forward(a) => commands::forward_cmd(a),
        Command::Triangulate(a) => commands::triangulate_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Rig(a) => commands::rig_cmd(a),
        Command::InitWeights(a) => commands::init_weights_cmd(a),
        Command::Bench(a) => bench::bench_cmd(a),
    }
}

/// Process exit status for a failed run.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}
