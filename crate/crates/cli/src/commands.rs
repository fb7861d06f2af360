use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use evpose_core::edge::enhance_cloud;
use evpose_core::event::{parse_events, write_events, EventFormat, PolarityEncoding};
use evpose_core::geometry::{
    mpjpe_2d, mpjpe_3d, project_pose, read_pose2d_csv, read_pose3d_csv, reference_skeleton, synthetic_rig, triangulate,
    write_pose2d_csv, write_pose3d_csv, CameraModel, Joint2D, Joint3D, Pose2D, Pose3D, RigSpec,
};
use evpose_core::micronet::{
    forward, normalize_input, pointwise_features, simdr_decode, DecodeMode, MicroNetConfig, MicroNetParams,
};
use evpose_core::raster::{rasterize, read_cloud_csv, sample_points, to_point_cloud, write_cloud_csv};
use evpose_core::synth::{synth_events, Pattern, SynthSpec};
use evpose_core::temporal::{es_seq, EtscParams, SliceTokens};
use evpose_core::weights::{read_etsc, read_micronet, write_etsc, write_micronet};
use evpose_core::{EventStream, RasterCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{PipelineArgs, PipelineConfig, Precision};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// Expands directories to their `window_*.csv` files, sorted by name.
fn cloud_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("window_") && n.ends_with(".csv"))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("no point-cloud files found");
    }
    Ok(out)
}

fn load_cloud(path: &Path, cfg: &PipelineConfig) -> Result<RasterCloud> {
    read_cloud_csv(&read(path)?, cfg.sensor_width, cfg.sensor_height, cfg.k)
        .with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum PolarityArg {
    /// -1 / +1
    #[default]
    Signed,
    /// 0 / 1
    ZeroOne,
}

pub fn load_stream(path: &Path, cfg: &PipelineConfig, polarity: PolarityArg) -> Result<EventStream> {
    let enc = match polarity {
        PolarityArg::Signed => PolarityEncoding::Signed,
        PolarityArg::ZeroOne => PolarityEncoding::ZeroOne,
    };
    parse_events(
        &read(path)?,
        EventFormat::from_path(path),
        cfg.sensor_width,
        cfg.sensor_height,
        enc,
    )
    .with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "moving_bar")]
    pub pattern: Pattern,
    /// Events per second.
    #[arg(long, default_value_t = 60_000.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub duration_us: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = evpose_core::DEFAULT_SENSOR_WIDTH)]
    pub width: u16,
    #[arg(long, default_value_t = evpose_core::DEFAULT_SENSOR_HEIGHT)]
    pub height: u16,
    #[arg(long, default_value_t = 1)]
    pub bar_width: u16,
    /// Pixels per second.
    #[arg(long, default_value_t = 200.0)]
    pub bar_speed: f64,
    /// Poisson arrival times instead of even spacing.
    #[arg(long)]
    pub jitter: bool,
    /// Output file; `.evb` selects the binary format, anything else CSV.
    #[arg(short, long)]
    pub output: PathBuf,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        pattern: a.pattern,
        rate: a.rate,
        duration_us: a.duration_us,
        seed: a.seed,
        width: a.width,
        height: a.height,
        bar_width: a.bar_width,
        bar_speed: a.bar_speed,
        jitter: a.jitter,
    };
    let stream = synth_events(&spec)?;
    let mut out = create(&a.output)?;
    write_events(&stream, EventFormat::from_path(&a.output), &mut out)?;
    out.flush()?;
    eprintln!("wrote {} events to {}", stream.len(), a.output.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct RasterizeArgs {
    /// Event file (CSV or .evb).
    pub input: PathBuf,
    /// Output directory for window_NNNNN.csv and windows.csv.
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub polarity: PolarityArg,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

pub const WINDOW_INDEX_HEADER: &str = "window,start_us,end_us,events,polarity_sum,points,file";

pub fn rasterize_cmd(a: &RasterizeArgs) -> Result<()> {
    let cfg = a.pipeline.resolve()?;
    let stream = load_stream(&a.input, &cfg, a.polarity)?;
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let mut index = create(&a.output.join("windows.csv"))?;
    writeln!(index, "{WINDOW_INDEX_HEADER}")?;
    let mut count = 0;
    for (i, span) in stream.windows(cfg.window_mode())?.enumerate() {
        let grid = rasterize(span.events, span.window, cfg.sensor_width, cfg.sensor_height, cfg.k)?;
        let cloud = to_point_cloud(&grid);
        let name = format!("window_{i:05}.csv");
        let mut out = create(&a.output.join(&name))?;
        write_cloud_csv(&cloud, &mut out)?;
        out.flush()?;
        writeln!(
            index,
            "{i},{},{},{},{},{},{name}",
            span.window.start,
            span.window.end,
            span.events.len(),
            span.polarity_sum(),
            cloud.len()
        )?;
        count += 1;
    }
    index.flush()?;
    write_json(&a.output.join("config.json"), &cfg)?;
    eprintln!("wrote {count} windows to {}", a.output.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    /// Point-cloud CSVs, or directories holding window_*.csv.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output directory; file names are kept.
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

pub fn enhance_cmd(a: &EnhanceArgs) -> Result<()> {
    let cfg = a.pipeline.resolve()?;
    let params = cfg.edge_params()?;
    let files = cloud_files(&a.inputs)?;
    fs::create_dir_all(&a.output)?;
    for f in &files {
        let cloud = enhance_cloud(&load_cloud(f, &cfg)?, &params)?;
        let name = f.file_name().context("input has no file name")?;
        let mut out = create(&a.output.join(name))?;
        write_cloud_csv(&cloud, &mut out)?;
        out.flush()?;
    }
    write_json(&a.output.join("config.json"), &cfg)?;
    eprintln!("enhanced {} clouds into {}", files.len(), a.output.display());
    Ok(())
}

#[derive(Debug, Clone, Default, Args)]
pub struct NetArgs {
    /// Backbone weight file; seeded random weights when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Temporal block weight file; seeded random weights when absent.
    #[arg(long)]
    pub etsc: Option<PathBuf>,
}

/// Seeded default network sized for the configured sensor.
pub fn default_net(cfg: &PipelineConfig) -> Result<(MicroNetParams, EtscParams)> {
    let net_cfg = MicroNetConfig {
        w_bins: cfg.sensor_width.into(),
        h_bins: cfg.sensor_height.into(),
        ..MicroNetConfig::default()
    };
    let net = MicroNetParams::init(&net_cfg, cfg.seed)?;
    let etsc = EtscParams::init(net.channels(), cfg.seed.wrapping_add(1));
    Ok((net, etsc))
}

pub fn load_net(a: &NetArgs, cfg: &PipelineConfig) -> Result<(MicroNetParams, EtscParams)> {
    let (mut net, mut etsc) = default_net(cfg)?;
    if let Some(p) = &a.weights {
        net = read_micronet(read(p)?.as_slice()).with_context(|| format!("loading {}", p.display()))?;
    }
    if let Some(p) = &a.etsc {
        etsc = read_etsc(read(p)?.as_slice()).with_context(|| format!("loading {}", p.display()))?;
    }
    if net.channels() != etsc.channels() {
        bail!(
            "backbone emits {} channels but the temporal block expects {}",
            net.channels(),
            etsc.channels()
        );
    }
    Ok((net, etsc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum DecodeArg {
    #[default]
    Argmax,
    Soft,
}

/// Network parameters held in the working precision.
pub enum Net {
    F64(MicroNetParams<f64>, EtscParams<f64>),
    F32(MicroNetParams<f32>, EtscParams<f32>),
}

impl Net {
    pub fn new(net: MicroNetParams, etsc: EtscParams, precision: Precision) -> Self {
        match precision {
            Precision::F64 => Net::F64(net, etsc),
            Precision::F32 => Net::F32(net.cast(), etsc.cast()),
        }
    }

    pub fn joints(&self) -> usize {
        match self {
            Net::F64(n, _) => n.joints,
            Net::F32(n, _) => n.joints,
        }
    }

    pub fn infer(&self, cloud: &RasterCloud, k: usize, mode: DecodeMode) -> Result<Pose2D> {
        let (w, h) = (cloud.width, cloud.height);
        Ok(match self {
            Net::F64(n, e) => simdr_decode(&forward(cloud, n, e, k)?, w, h, mode)?,
            Net::F32(n, e) => simdr_decode(&forward(cloud, n, e, k)?, w, h, mode)?,
        })
    }
}

/// Sampling seed for the `i`-th cloud of a run.
pub fn cloud_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    /// Point-cloud CSVs, or directories holding window_*.csv.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Pose CSV, one sample per input cloud.
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub decode: DecodeArg,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

pub fn forward_cmd(a: &ForwardArgs) -> Result<()> {
    let cfg = a.pipeline.resolve()?;
    let (net, etsc) = load_net(&a.net, &cfg)?;
    let net = Net::new(net, etsc, cfg.precision);
    let mode = match a.decode {
        DecodeArg::Argmax => DecodeMode::Argmax,
        DecodeArg::Soft => DecodeMode::Soft,
    };
    let mut poses = Vec::new();
    for (i, f) in cloud_files(&a.inputs)?.iter().enumerate() {
        let cloud = load_cloud(f, &cfg)?;
        let pose = if cloud.is_empty() {
            Pose2D {
                joints: vec![
                    Joint2D {
                        u: 0.0,
                        v: 0.0,
                        valid: false
                    };
                    net.joints()
                ],
            }
        } else {
            let sampled = sample_points(&cloud, cfg.sample_n, cloud_seed(cfg.seed, i))?;
            net.infer(&sampled, cfg.k, mode)?
        };
        poses.push(pose);
    }
    let mut out = create(&a.output)?;
    write_pose2d_csv(&poses, &mut out)?;
    out.flush()?;
    eprintln!("wrote {} poses to {}", poses.len(), a.output.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SliceSeqArgs {
    /// One point-cloud CSV.
    pub input: PathBuf,
    /// Token CSV: `stage,slice,c0..c{C-1}`.
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

fn write_tokens<W: Write>(out: &mut W, stage: &str, t: &SliceTokens) -> Result<()> {
    for s in 0..t.k() {
        write!(out, "{stage},{s}")?;
        for v in t.row(s) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn sliceseq_cmd(a: &SliceSeqArgs) -> Result<()> {
    let cfg = a.pipeline.resolve()?;
    let (net, etsc) = load_net(&a.net, &cfg)?;
    let cloud = load_cloud(&a.input, &cfg)?;
    if cloud.is_empty() {
        bail!("{} holds no points", a.input.display());
    }
    let cloud = sample_points(&cloud, cfg.sample_n, cfg.seed)?;
    let t_avg: Vec<f64> = cloud.points.iter().map(|p| p.t_avg).collect();
    let pf = pointwise_features(&normalize_input::<f64>(&cloud), &t_avg, &net)?;
    let tokens = es_seq(&pf, cfg.k)?;
    let refined = etsc.forward(&tokens)?;
    let mut out = create(&a.output)?;
    write!(out, "stage,slice")?;
    for c in 0..tokens.channels() {
        write!(out, ",c{c}")?;
    }
    writeln!(out)?;
    write_tokens(&mut out, "es_seq", &tokens)?;
    write_tokens(&mut out, "etsc", &refined)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct TriangulateArgs {
    #[arg(long)]
    pub cam_a: PathBuf,
    #[arg(long)]
    pub cam_b: PathBuf,
    #[arg(long)]
    pub pose_a: PathBuf,
    #[arg(long)]
    pub pose_b: PathBuf,
    /// 3-D pose CSV.
    #[arg(short, long)]
    pub output: PathBuf,
}

fn load_camera(path: &Path) -> Result<CameraModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    CameraModel::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn triangulate_cmd(a: &TriangulateArgs) -> Result<()> {
    let (ca, cb) = (load_camera(&a.cam_a)?, load_camera(&a.cam_b)?);
    let pa = read_pose2d_csv(&read(&a.pose_a)?).with_context(|| format!("parsing {}", a.pose_a.display()))?;
    let pb = read_pose2d_csv(&read(&a.pose_b)?).with_context(|| format!("parsing {}", a.pose_b.display()))?;
    if pa.len() != pb.len() {
        bail!("views hold {} and {} samples", pa.len(), pb.len());
    }
    let out3: Vec<Pose3D> = pa
        .iter()
        .zip(&pb)
        .map(|(a, b)| triangulate(&ca, &cb, a, b))
        .collect::<evpose_core::Result<_>>()?;
    let mut out = create(&a.output)?;
    write_pose3d_csv(&out3, &mut out)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dim {
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum)]
    pub dim: Dim,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Also write `joint,mpjpe` rows for plotting.
    #[arg(long)]
    pub per_joint_csv: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    dim: u8,
    unit: &'a str,
    pred: String,
    gt: String,
    #[serde(flatten)]
    report: evpose_core::geometry::MpjpeReport,
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (pred, gt) = (read(&a.pred)?, read(&a.gt)?);
    let (report, unit, dim) = match a.dim {
        Dim::Two => (mpjpe_2d(&read_pose2d_csv(&pred)?, &read_pose2d_csv(&gt)?)?, "px", 2),
        Dim::Three => (mpjpe_3d(&read_pose3d_csv(&pred)?, &read_pose3d_csv(&gt)?)?, "mm", 3),
    };
    println!(
        "MPJPE {:.3} {unit} ({} joints over {} samples)",
        report.mpjpe, report.valid, report.samples
    );
    if let Some(p) = &a.per_joint_csv {
        let mut out = create(p)?;
        writeln!(out, "joint,mpjpe")?;
        for (j, e) in report.per_joint.iter().enumerate() {
            match e {
                Some(v) => writeln!(out, "{j},{v}")?,
                None => writeln!(out, "{j},")?,
            }
        }
        out.flush()?;
    }
    if let Some(p) = &a.json {
        let r = EvalReport {
            dim,
            unit,
            pred: a.pred.display().to_string(),
            gt: a.gt.display().to_string(),
            report,
        };
        write_json(p, &r)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct RigArgs {
    /// Output directory for cam_a.json, cam_b.json and ground-truth poses.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Angle between the two optical axes, degrees.
    #[arg(long, default_value_t = 90.0)]
    pub angle: f64,
    #[arg(long, default_value_t = 3000.0)]
    pub distance_mm: f64,
    #[arg(long, default_value_t = 300.0)]
    pub focal_px: f64,
    #[arg(long, default_value_t = evpose_core::DEFAULT_SENSOR_WIDTH)]
    pub width: u16,
    #[arg(long, default_value_t = evpose_core::DEFAULT_SENSOR_HEIGHT)]
    pub height: u16,
    /// Ground-truth samples; each jitters the reference skeleton.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Per-joint jitter half-width in millimetres.
    #[arg(long, default_value_t = 50.0)]
    pub jitter_mm: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn rig_cmd(a: &RigArgs) -> Result<()> {
    let spec = RigSpec {
        angle_deg: a.angle,
        distance_mm: a.distance_mm,
        focal_px: a.focal_px,
        width: a.width,
        height: a.height,
    };
    let (ca, cb) = synthetic_rig(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let base = reference_skeleton();
    let gt: Vec<Pose3D> = (0..a.samples)
        .map(|_| Pose3D {
            joints: base
                .joints
                .iter()
                .map(|j| {
                    let mut d = || {
                        if a.jitter_mm > 0.0 {
                            rng.random_range(-a.jitter_mm..a.jitter_mm)
                        } else {
                            0.0
                        }
                    };
                    Joint3D::new(j.x + d(), j.y + d(), j.z + d())
                })
                .collect(),
        })
        .collect();
    fs::create_dir_all(&a.output)?;
    for (name, cam) in [("cam_a", &ca), ("cam_b", &cb)] {
        fs::write(a.output.join(format!("{name}.json")), cam.to_json() + "\n")?;
        let poses: Vec<Pose2D> = gt.iter().map(|p| project_pose(cam, p)).collect();
        let mut out = create(&a.output.join(format!("gt2d_{}.csv", &name[4..])))?;
        write_pose2d_csv(&poses, &mut out)?;
        out.flush()?;
    }
    let mut out = create(&a.output.join("gt3d.csv"))?;
    write_pose3d_csv(&gt, &mut out)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    /// Backbone weight file to write.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Temporal block weight file to write.
    #[arg(long)]
    pub etsc_output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, num_args = 2, default_values_t = [64, 128])]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value_t = 13)]
    pub joints: usize,
    #[arg(long, default_value_t = evpose_core::DEFAULT_SENSOR_WIDTH.into())]
    pub w_bins: usize,
    #[arg(long, default_value_t = evpose_core::DEFAULT_SENSOR_HEIGHT.into())]
    pub h_bins: usize,
}

pub fn init_weights_cmd(a: &InitWeightsArgs) -> Result<()> {
    let cfg = MicroNetConfig {
        hidden: [a.hidden[0], a.hidden[1]],
        channels: a.channels,
        joints: a.joints,
        w_bins: a.w_bins,
        h_bins: a.h_bins,
    };
    cfg.validate().map_err(|e| crate::UsageError(e.to_string()))?;
    let net = MicroNetParams::init(&cfg, a.seed)?;
    let etsc = EtscParams::init(a.channels, a.seed.wrapping_add(1));
    let mut out = create(&a.output)?;
    write_micronet(&net, &mut out)?;
    out.flush()?;
    let mut out = create(&a.etsc_output)?;
    write_etsc(&etsc, &mut out)?;
    out.flush()?;
    eprintln!("{} + {} parameters", net.param_count(), etsc.param_count());
    Ok(())
}
