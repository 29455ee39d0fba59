use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use posefuse_core::harness::files::{
    load_keypoint_file, read_stream, write_labeled_frames, write_stream, JsonlWriter, KeypointFormat, FUSED_FRAMES,
};
use posefuse_core::harness::scene::{generate_scene, Layout, Scene, SceneConfig};
use posefuse_core::metrics::{default_alpha_grid, evaluate, MetricReport};
use posefuse_core::pipeline::{serve, LiveHandle};
use posefuse_core::{load_config, replay, Feed, FusedFrame, Pipeline, PipelineConfig, RunReport, SkeletonModel};

/// Multi-device 3D pose fusion engine.
#[derive(Parser)]
#[command(name = "posefuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse live device streams arriving over TCP.
    Run(RunArgs),
    /// Fuse a recorded (or freshly simulated) measurement stream.
    Replay(ReplayArgs),
    /// Time the pipeline on a simulated scene.
    Bench(BenchArgs),
    /// Score a tracking result against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic scene: a measurement stream and its ground truth.
    Simulate(SimulateArgs),
    /// Print the effective configuration as TOML.
    Config(EngineArgs),
}

#[derive(Args)]
struct EngineArgs {
    /// Configuration file (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set association.gate=0.8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Aggregator tick rate (Hz).
    #[arg(long)]
    tick_rate: Option<f64>,
}

impl EngineArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(rate) = self.tick_rate {
            overrides.push(format!("tick_rate={rate}"));
        }
        load_config(self.config.as_deref(), &overrides).context("loading configuration")
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Address to accept device connections on.
    #[arg(long, default_value = "0.0.0.0:7700")]
    listen: String,
    /// Fused frames file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Stop after this many seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Stop once every device that connected has disconnected.
    #[arg(long)]
    until_disconnect: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Recorded measurement stream. Without it a default scene is simulated.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Fused frames file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Scene seed when simulating.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Round-trip every batch through the wire codec.
    #[arg(long)]
    wire: bool,
    /// Ground truth to score the result against.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Print the latency report to stderr.
    #[arg(long)]
    report: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, default_value_t = 5)]
    devices: usize,
    #[arg(long, default_value_t = 7)]
    subjects: usize,
    /// Simulated seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Emit the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted tracks (fused or labeled frames).
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value = "native")]
    pred_format: KeypointFormat,
    #[arg(long, default_value = "native")]
    gt_format: KeypointFormat,
    /// Largest time offset for pairing frames (s).
    #[arg(long, default_value_t = 1.0 / 60.0)]
    tolerance: f64,
    /// Fail on malformed lines instead of skipping them.
    #[arg(long)]
    strict: bool,
    /// Emit the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Wander,
    Crossing,
    Still,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Wander => Layout::Wander,
            LayoutArg::Crossing => Layout::Crossing,
            LayoutArg::Still => Layout::Still,
        }
    }
}

/// Scene knobs; unset flags keep the values of `--scene` or the defaults.
#[derive(Args)]
struct SceneArgs {
    /// Scene description (TOML with the keys below in snake_case).
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    devices: Option<usize>,
    /// Seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    layout: Option<LayoutArg>,
    /// Isotropic keypoint noise (m).
    #[arg(long)]
    noise: Option<f64>,
    /// Per-keypoint drop probability.
    #[arg(long)]
    dropout: Option<f64>,
    /// Per-keypoint outlier probability.
    #[arg(long)]
    outliers: Option<f64>,
    /// Outlier displacement range (m), `MIN,MAX`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    outlier_magnitude: Option<Vec<f64>>,
    /// Mean network latency (s).
    #[arg(long)]
    latency_mean: Option<f64>,
    #[arg(long)]
    latency_jitter: Option<f64>,
    /// Device capture rate (Hz).
    #[arg(long)]
    frame_rate: Option<f64>,
    /// Ground-truth sampling rate (Hz).
    #[arg(long)]
    gt_rate: Option<f64>,
    #[arg(long)]
    phase_spread: Option<f64>,
    #[arg(long)]
    ring_radius: Option<f64>,
    #[arg(long)]
    device_height: Option<f64>,
    /// Horizontal field of view (degrees).
    #[arg(long)]
    fov: Option<f64>,
    /// Disable occlusion between subjects.
    #[arg(long)]
    no_occlusion: bool,
    /// Disable a subject hiding its own far side.
    #[arg(long)]
    no_self_occlusion: bool,
    /// Walking speed cap (m/s).
    #[arg(long)]
    max_speed: Option<f64>,
    /// Per-subject relative variation of segment lengths.
    #[arg(long)]
    segment_jitter: Option<f64>,
}

impl SceneArgs {
    fn build(&self) -> Result<SceneConfig> {
        let mut cfg: SceneConfig = match &self.scene {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => SceneConfig::default(),
        };
        macro_rules! take {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$field = v.into(); })*
            };
        }
        take!(
            subjects => n_subjects,
            devices => n_devices,
            duration => duration,
            seed => seed,
            layout => layout,
            noise => noise_sigma,
            dropout => dropout,
            outliers => outlier_prob,
            latency_mean => latency_mean,
            latency_jitter => latency_jitter,
            frame_rate => frame_rate,
            gt_rate => gt_rate,
            phase_spread => phase_spread,
            ring_radius => ring_radius,
            device_height => device_height,
            fov => fov_deg,
            max_speed => max_speed,
            segment_jitter => segment_jitter,
        );
        if let Some(m) = &self.outlier_magnitude {
            cfg.outlier_magnitude = [m[0], m[1]];
        }
        cfg.occlusion &= !self.no_occlusion;
        cfg.self_occlusion &= !self.no_self_occlusion;
        if cfg.layout == Layout::Crossing && self.subjects.is_none() {
            cfg.n_subjects = 2;
        }
        cfg.validate().map_err(anyhow::Error::msg).context("invalid scene")?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Measurement stream file.
    #[arg(long)]
    output: PathBuf,
    /// Ground-truth file.
    #[arg(long)]
    gt: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Replay(args) => replay_cmd(args),
        Command::Bench(args) => bench(args),
        Command::Eval(args) => eval(args),
        Command::Simulate(args) => simulate(args),
        Command::Config(args) => {
            print!("{}", args.load()?.to_toml());
            Ok(())
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = args.engine.load()?;
    let pipeline = Pipeline::new(cfg)?;
    let listener = TcpListener::bind(&args.listen).with_context(|| format!("binding {}", args.listen))?;
    log::warn!("listening on {}", listener.local_addr()?);
    let handle = LiveHandle::new();
    if let Some(secs) = args.duration {
        let h = handle.clone();
        thread::spawn(move || {
            thread::sleep(Duration::from_secs_f64(secs));
            h.stop();
        });
    }
    let mut out = JsonlWriter::new(output(args.output.as_deref())?, FUSED_FRAMES)?;
    let mut write_error = None;
    let report = serve(pipeline, listener, handle.clone(), args.until_disconnect, |f| {
        if write_error.is_some() {
            return;
        }
        if let Err(e) = out.write(f).and_then(|_| out.flush()) {
            write_error = Some(e);
            handle.stop();
        }
    })?;
    if let Some(e) = write_error {
        return Err(e).context("writing fused frames");
    }
    eprint!("{}", report.render());
    Ok(())
}

fn load_or_simulate(input: Option<&Path>, seed: u64) -> Result<Scene> {
    match input {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let rec = read_stream(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
            Ok(Scene {
                devices: rec.devices,
                ground_truth: Vec::new(),
                arrivals: rec.arrivals,
            })
        }
        None => Ok(generate_scene(&SkeletonModel::default_profile(), &SceneConfig { seed, ..SceneConfig::default() })),
    }
}

fn replay_scene(cfg: PipelineConfig, scene: &Scene, feed: Feed) -> Result<(Vec<FusedFrame>, RunReport)> {
    let mut pipeline = Pipeline::new(cfg)?;
    pipeline.set_devices(&scene.devices);
    let mut frames = Vec::new();
    let report = replay(&mut pipeline, &scene.arrivals, feed, |f| frames.push(f.clone()));
    Ok((frames, report))
}

fn replay_cmd(args: ReplayArgs) -> Result<()> {
    let cfg = args.engine.load()?;
    let scene = load_or_simulate(args.input.as_deref(), args.seed)?;
    let feed = if args.wire { Feed::Wire } else { Feed::Direct };
    let (frames, report) = replay_scene(cfg, &scene, feed)?;
    let mut out = JsonlWriter::new(output(args.output.as_deref())?, FUSED_FRAMES)?;
    for f in &frames {
        out.write(f)?;
    }
    out.flush()?;
    if args.report {
        eprint!("{}", report.render());
    }
    let gt = match (&args.gt, args.input.is_none()) {
        (Some(path), _) => Some(load_keypoint_file(path, KeypointFormat::Native, true)?),
        (None, true) => Some(scene.ground_truth.clone()),
        (None, false) => None,
    };
    if let Some(gt) = gt {
        let pred: Vec<_> = frames.iter().map(FusedFrame::to_labeled).collect();
        let metrics = evaluate(&pred, &gt, &default_alpha_grid(), 1.0 / 60.0)?;
        eprint!("{}", render_metrics(&metrics, false));
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let cfg = args.engine.load()?;
    let scene_cfg = SceneConfig {
        n_devices: args.devices,
        n_subjects: args.subjects,
        duration: args.duration,
        seed: args.seed,
        ..SceneConfig::default()
    };
    scene_cfg.validate().map_err(anyhow::Error::msg)?;
    let scene = generate_scene(&SkeletonModel::default_profile(), &scene_cfg);
    let (_, report) = replay_scene(cfg, &scene, Feed::Direct)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.render());
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let pred = load_keypoint_file(&args.pred, args.pred_format, args.strict)
        .with_context(|| format!("reading {}", args.pred.display()))?;
    let gt = load_keypoint_file(&args.gt, args.gt_format, args.strict).with_context(|| format!("reading {}", args.gt.display()))?;
    if gt.is_empty() {
        bail!("{} holds no frames", args.gt.display());
    }
    let report = evaluate(&pred, &gt, &default_alpha_grid(), args.tolerance)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", render_metrics(&report, true));
    }
    Ok(())
}

fn render_metrics(r: &MetricReport, per_alpha: bool) -> String {
    let mut s = format!(
        "HOTA {:.2}  DetA {:.2}  AssA {:.2}  LocA {:.2}  ({} of {} frames aligned)\n",
        100.0 * r.hota,
        100.0 * r.det_a,
        100.0 * r.ass_a,
        100.0 * r.loc_a,
        r.aligned_frames,
        r.gt_frames
    );
    if per_alpha {
        s += &format!("{:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "alpha", "HOTA", "DetA", "AssA", "LocA", "TP", "FP", "FN");
        for row in &r.per_alpha {
            s += &format!(
                "{:>6.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7} {:>7} {:>7}\n",
                row.alpha,
                100.0 * row.hota,
                100.0 * row.det_a,
                100.0 * row.ass_a,
                100.0 * row.loc_a,
                row.tp,
                row.fp,
                row.fn_
            );
        }
    }
    s
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let cfg = args.scene.build()?;
    let scene = generate_scene(&SkeletonModel::default_profile(), &cfg);
    write_stream(create(&args.output)?, &scene.devices, &scene.arrivals)?;
    if let Some(path) = &args.gt {
        write_labeled_frames(create(path)?, &scene.ground_truth)?;
    }
    eprintln!(
        "{} batches from {} devices, {} ground-truth frames",
        scene.arrivals.len(),
        scene.devices.len(),
        scene.ground_truth.len()
    );
    Ok(())
}
