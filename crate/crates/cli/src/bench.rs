//! Per-stage latency harness on a seeded synthetic window.

use std::hint::black_box;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::Args;
use evpose_core::edge::enhance_cloud;
use evpose_core::event::write_events_bin;
use evpose_core::micronet::{normalize_input, pointwise_features, DecodeMode};
use evpose_core::raster::{rasterize, sample_points, to_point_cloud, write_cloud_csv};
use evpose_core::synth::{synth_events, Pattern, SynthSpec};
use evpose_core::temporal::es_seq;
use evpose_core::WindowMode;
use serde::Serialize;

use crate::commands::{default_net, write_json, Net};
use crate::config::{PipelineArgs, PipelineConfig};

pub const STAGES: [&str; 4] = ["rasterize", "enhance", "temporal", "forward"];

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated subset of rasterize,enhance,temporal,forward.
    #[arg(long, value_delimiter = ',', default_values_t = STAGES.map(String::from))]
    pub stages: Vec<String>,
    /// Discarded runs before timing.
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    /// Timed runs per stage.
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    /// Events in the benchmark window.
    #[arg(long, default_value_t = evpose_core::DEFAULT_WINDOW_EVENTS)]
    pub events: usize,
    #[arg(long, default_value = "moving_bar")]
    pub pattern: Pattern,
    /// Write the report here as JSON.
    #[arg(long)]
    pub json: Option<std::path::PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub name: String,
    pub runs: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Window events divided by mean latency.
    pub events_per_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Checksums {
    pub events: String,
    pub cloud: String,
    pub sampled: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub config: PipelineConfig,
    pub machine: String,
    pub pattern: String,
    pub warmup: usize,
    pub runs: usize,
    pub events: usize,
    /// Occupied voxels in the window before sampling.
    pub peak_points: usize,
    pub sampled_points: usize,
    pub checksums: Checksums,
    pub stages: Vec<StageReport>,
    /// Events over the summed mean latency of rasterize and enhance, when
    /// both ran.
    pub rasterize_enhance_events_per_s: Option<f64>,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn machine_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let build = if cfg!(debug_assertions) { "debug" } else { "release" };
    format!(
        "{cpu}; {threads} threads; {}-{}; {build} build",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn time_stage(
    name: &str,
    warmup: usize,
    runs: usize,
    events: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<StageReport> {
    for _ in 0..warmup {
        f()?;
    }
    let mut ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        f()?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = ms.iter().sum::<f64>() / runs as f64;
    ms.sort_by(f64::total_cmp);
    Ok(StageReport {
        name: name.to_string(),
        runs,
        mean_ms: mean,
        p50_ms: percentile(&ms, 0.50),
        p99_ms: percentile(&ms, 0.99),
        min_ms: ms[0],
        max_ms: ms[runs - 1],
        events_per_s: events as f64 / (mean / 1e3),
    })
}

pub fn run_bench(a: &BenchArgs) -> Result<BenchReport> {
    let cfg = a.pipeline.resolve()?;
    if a.runs == 0 || a.events == 0 {
        bail!(crate::UsageError("--runs and --events must be positive".into()));
    }
    for s in &a.stages {
        if !STAGES.contains(&s.as_str()) {
            bail!(crate::UsageError(format!(
                "unknown stage {s:?}; expected one of {}",
                STAGES.join(",")
            )));
        }
    }
    let stages: Vec<&str> = STAGES
        .iter()
        .copied()
        .filter(|s| a.stages.iter().any(|x| x == s))
        .collect();

    // enough synthetic time for the requested count at the default rate
    let spec = SynthSpec {
        pattern: a.pattern,
        seed: cfg.seed,
        width: cfg.sensor_width,
        height: cfg.sensor_height,
        duration_us: (a.events as u64 * 1_000_000).div_ceil(60_000) + 1,
        ..SynthSpec::default()
    };
    let stream = synth_events(&spec)?;
    let span = stream
        .windows(WindowMode::Count(a.events))?
        .next()
        .ok_or_else(|| anyhow::anyhow!("synthetic stream is empty"))?;
    let (events, window) = (span.events, span.window);
    let (w, h, k) = (cfg.sensor_width, cfg.sensor_height, cfg.k);
    let edge = cfg.edge_params()?;

    let raw = to_point_cloud(&rasterize(events, window, w, h, k)?);
    let cloud = enhance_cloud(&raw, &edge)?;
    let sampled = sample_points(&cloud, cfg.sample_n, cfg.seed)?;
    let (net, etsc) = default_net(&cfg)?;
    let t_avg: Vec<f64> = sampled.points.iter().map(|p| p.t_avg).collect();
    let features = pointwise_features(&normalize_input::<f64>(&sampled), &t_avg, &net)?;
    let runner = Net::new(net, etsc.clone(), cfg.precision);

    let mut ev_bytes = Vec::new();
    let sub = evpose_core::EventStream::new(w, h, events.to_vec())?;
    write_events_bin(&sub, &mut ev_bytes)?;
    let mut cloud_bytes = Vec::new();
    write_cloud_csv(&cloud, &mut cloud_bytes)?;
    let mut sampled_bytes = Vec::new();
    write_cloud_csv(&sampled, &mut sampled_bytes)?;

    let n = events.len();
    let mut reports = Vec::new();
    for stage in &stages {
        let r = match *stage {
            "rasterize" => time_stage(stage, a.warmup, a.runs, n, || {
                black_box(to_point_cloud(&rasterize(black_box(events), window, w, h, k)?));
                Ok(())
            })?,
            "enhance" => time_stage(stage, a.warmup, a.runs, n, || {
                black_box(enhance_cloud(black_box(&raw), &edge)?);
                Ok(())
            })?,
            "temporal" => time_stage(stage, a.warmup, a.runs, n, || {
                let tokens = es_seq(black_box(&features), k)?;
                black_box(etsc.forward(&tokens)?);
                Ok(())
            })?,
            "forward" => time_stage(stage, a.warmup, a.runs, n, || {
                black_box(runner.infer(black_box(&sampled), k, DecodeMode::Argmax)?);
                Ok(())
            })?,
            _ => unreachable!("stage names validated above"),
        };
        reports.push(r);
    }

    let mean_of = |name: &str| reports.iter().find(|r| r.name == name).map(|r| r.mean_ms);
    let rasterize_enhance_events_per_s = match (mean_of("rasterize"), mean_of("enhance")) {
        (Some(a), Some(b)) => Some(n as f64 / ((a + b) / 1e3)),
        _ => None,
    };
    Ok(BenchReport {
        config: cfg,
        machine: machine_descriptor(),
        pattern: a.pattern.to_string(),
        warmup: a.warmup,
        runs: a.runs,
        events: n,
        peak_points: cloud.len(),
        sampled_points: sampled.len(),
        checksums: Checksums {
            events: fnv1a(&ev_bytes),
            cloud: fnv1a(&cloud_bytes),
            sampled: fnv1a(&sampled_bytes),
        },
        stages: reports,
        rasterize_enhance_events_per_s,
    })
}

pub fn print_table(r: &BenchReport) {
    println!("{}", r.machine);
    println!(
        "{} events, {} occupied voxels, {} sampled points, {} runs after {} warmup",
        r.events, r.peak_points, r.sampled_points, r.runs, r.warmup
    );
    println!(
        "{:<10} {:>10} {:>10} {:>10} {:>14}",
        "stage", "mean ms", "p50 ms", "p99 ms", "events/s"
    );
    for s in &r.stages {
        println!(
            "{:<10} {:>10.4} {:>10.4} {:>10.4} {:>14.0}",
            s.name, s.mean_ms, s.p50_ms, s.p99_ms, s.events_per_s
        );
    }
    if let Some(t) = r.rasterize_enhance_events_per_s {
        println!("rasterize+enhance: {t:.0} events/s");
    }
}

pub fn bench_cmd(a: &BenchArgs) -> Result<()> {
    let report = run_bench(a)?;
    print_table(&report);
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}
