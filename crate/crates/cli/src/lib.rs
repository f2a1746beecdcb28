//! Command-line front end: dataset synthesis, dense-pose baking, training,
//! inference, detection, evaluation and gradient self-checks.

pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::{Point3, Vector3};

use conr::geom::{write_udp, Camera, Pose, Projection, RgbaImage, UdpImage};
use conr::network::{detect_averaged, encode, load_checkpoint, render, Model, ModelConfig};
use conr::synth::{brightness_views, read_split, write_dataset, Character, CharacterSpec, DatasetConfig, Split};
use conr::tensor::gradcheck::{default_suite, run_cases};
use conr::training::{evaluate, pipeline_gradcheck, FixedSamples, MetricsWriter, SampleSource, Trainer, METRICS_FILE};
use conr::{Tape, Tensor};

pub use config::RunConfig;

pub const CONFIG_ECHO: &str = "config.txt";
/// Brightness spread of the extra views made by `detect --k`.
pub const DETECT_JITTER: f64 = 0.1;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(conr::Error),
    SelfCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(conr::Error::Config(_)) => 1,
            CliError::Core(_) => 2,
            CliError::SelfCheck(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::SelfCheck(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<conr::Error> for CliError {
    fn from(e: conr::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "conr", version, about = "Render characters in new poses from an unordered set of reference images")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving every output file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Override one config key, e.g. `--set m=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a procedural character dataset.
    SynthData(SynthArgs),
    /// Rasterize a character's dense-pose image.
    BakeUdp(BakeArgs),
    /// Train detector and renderer jointly.
    Train(TrainArgs),
    /// Render a sheet in the poses of one or more dense-pose files.
    Infer(InferArgs),
    /// Predict a dense-pose file from an image.
    Detect(DetectArgs),
    /// Report validation losses for several sheet sizes.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub characters: Option<usize>,
    /// TRAIN:VAL, e.g. 16:1.
    #[arg(long)]
    pub split_ratio: Option<String>,
}

#[derive(Args, Debug)]
pub struct BakeArgs {
    /// Character description (JSON).
    #[arg(long)]
    pub mesh: PathBuf,
    /// Pose (JSON); the A-pose when absent.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    /// Output file stem.
    #[arg(long, default_value = "udp")]
    pub name: String,
    #[arg(long)]
    pub png_preview: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by synth-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from the checkpoint and optimizer state in --out.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Reference images in any order.
    #[arg(long, num_args = 1.., required = true)]
    pub sheet: Vec<PathBuf>,
    /// A .udpf file or a directory of them.
    #[arg(long)]
    pub udp: PathBuf,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Views averaged; extra views get a small seeded brightness change.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long)]
    pub png_preview: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated sheet sizes.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub views: Vec<usize>,
    /// Evaluate the training split instead of validation.
    #[arg(long)]
    pub train_split: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.merge_text(&text, path)?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = effective_config(cli)?;
    match &cli.command {
        Command::SynthData(a) => {
            if let Some(n) = a.characters {
                cfg.set("characters", &n.to_string())?;
            }
            if let Some(r) = &a.split_ratio {
                cfg.set("split_ratio", r)?;
            }
            synth_data(&cfg, &out_dir(cli, true)?)
        }
        Command::BakeUdp(a) => bake_udp(&cfg, a, &out_dir(cli, false)?),
        Command::Train(a) => {
            if let Some(n) = a.iters {
                cfg.set("iterations", &n.to_string())?;
            }
            if let Some(lr) = a.lr {
                cfg.set("learning_rate", &lr.to_string())?;
            }
            train(&cfg, a, &out_dir(cli, !a.resume)?)
        }
        Command::Infer(a) => infer(&cfg, a, &out_dir(cli, false)?),
        Command::Detect(a) => detect(&cfg, a, &out_dir(cli, false)?),
        Command::Eval(a) => eval(&cfg, a, &out_dir(cli, false)?),
        Command::Gradcheck(a) => gradcheck(&cfg, a),
    }
}

/// Resolves `--out`, creating it. With `fresh`, a non-empty directory needs `--force`.
fn out_dir(cli: &Cli, fresh: bool) -> Result<PathBuf> {
    let dir = cli.out.clone().ok_or_else(|| CliError::Usage("--out DIR is required".into()))?;
    if fresh && !cli.force && dir.exists() && fs::read_dir(&dir)?.next().is_some() {
        return Err(CliError::Usage(format!("{} is not empty; pass --force to write into it", dir.display())));
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join(CONFIG_ECHO), cfg.to_text())?;
    Ok(())
}

fn synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut sample = cfg.sample()?;
    sample.labeled = true;
    let dc = DatasetConfig {
        characters: cfg.get("characters")?,
        seed: cfg.get("seed")?,
        ratio: cfg.split_ratio()?,
        sample,
        unlabeled_fraction: cfg.get("unlabeled_fraction")?,
    };
    let entries = write_dataset(out, &dc)?;
    echo_config(cfg, out)?;
    let val = entries.iter().filter(|e| e.split == Split::Val).count();
    println!("wrote {} characters ({} train, {val} val) to {}", entries.len(), entries.len() - val, out.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Core(conr::Error::Json {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            detail: e.to_string(),
        })
    })
}

/// The framing camera for `ch`, optionally perspective and shifted.
pub fn bake_camera(cfg: &RunConfig, ch: &Character) -> Result<Camera> {
    let res: usize = cfg.get("resolution")?;
    let offset = Vector3::from(cfg.vec3("camera_offset")?);
    let base = ch.camera(res);
    let (eye, projection) = match cfg.raw("camera") {
        "orthographic" => (Point3::new(0.0, 0.0, 10.0), base.projection),
        "perspective" => {
            let fov = cfg.get::<f64>("fov_degrees")?.to_radians();
            if !(fov > 0.0 && fov < std::f64::consts::PI) {
                return Err(CliError::Usage(format!("fov_degrees must lie in (0, 180), got {}", fov.to_degrees())));
            }
            let dist = ch.radius() * 1.2 / (fov / 2.0).tan() + ch.radius();
            (Point3::new(0.0, 0.0, dist), Projection::Perspective { fov_y: fov })
        }
        other => return Err(CliError::Usage(format!("camera must be orthographic or perspective, got {other:?}"))),
    };
    Ok(Camera::new(eye + offset, Point3::origin() + offset, Vector3::y(), projection, res, res)?)
}

fn bake_udp(cfg: &RunConfig, a: &BakeArgs, out: &Path) -> Result<()> {
    let spec = CharacterSpec::from_json(&fs::read_to_string(&a.mesh)?, &a.mesh)?;
    let ch = Character::new(spec)?;
    let pose = match &a.pose {
        Some(p) => read_json::<Pose>(p)?,
        None => Pose::default(),
    };
    let cam = bake_camera(cfg, &ch)?;
    let (_, udp) = ch.render(&pose, &cam)?;
    if udp.occupied() == 0 {
        log::warn!("the character is outside the camera view; the dense-pose image is empty");
        eprintln!("warning: the character is outside the camera view; the dense-pose image is empty");
    }
    let path = out.join(format!("{}.udpf", a.name));
    write_udp(&udp, &path)?;
    if a.png_preview {
        udp.write_png_preview(out.join(format!("{}.png", a.name)))?;
    }
    println!("{}", path.display());
    Ok(())
}

fn train(cfg: &RunConfig, a: &TrainArgs, out: &Path) -> Result<()> {
    let samples = read_split(&a.data, Split::Train)?;
    let source = FixedSamples::new(samples)?;
    let mut cfg = cfg.clone();
    cfg.set("resolution", &source.resolution().to_string())?;
    let tc = cfg.train()?;
    let mut trainer = if a.resume { Trainer::resume(tc, out)? } else { Trainer::new(tc)? };
    echo_config(&cfg, out)?;
    let writer = MetricsWriter::create(out.join(METRICS_FILE))?;
    let mut last = None;
    let result = trainer.train(&source, |m| {
        log::info!("{}", m.line());
        last = Some(*m);
        writer.append(m)
    });
    match result {
        Ok(_) => {
            trainer.save(out)?;
            if let Some(m) = last {
                println!("{}", m.line());
            }
            Ok(())
        }
        Err(e) => {
            if let Some(m) = last {
                eprintln!("last metrics: {}", m.line());
            }
            Err(e.into())
        }
    }
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model<f32>> {
    let mut model = Model::new(cfg.model()?, 0)?;
    load_checkpoint(checkpoint, &mut model.params)?;
    Ok(model)
}

/// `.udpf` files named by `path`, sorted when it is a directory.
fn udp_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "udpf"));
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("{} holds no .udpf files", path.display())));
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
}

fn infer(cfg: &RunConfig, a: &InferArgs, out: &Path) -> Result<()> {
    let model = load_model(cfg, &a.checkpoint)?;
    let sheet = a.sheet.iter().map(RgbaImage::read_png).collect::<conr::Result<Vec<_>>>()?;
    let (h, w) = (sheet[0].height, sheet[0].width);
    if sheet.iter().any(|s| (s.height, s.width) != (h, w)) {
        return Err(CliError::Usage("sheet images differ in size".into()));
    }
    let start = Instant::now();
    let views: Vec<Tensor<f32>> = sheet.iter().map(|s| s.to_tensor()).collect();
    let cached = {
        let tape = Tape::new();
        let p = model.params.bind(&tape, false);
        let stacked = Tensor::stack_batch(&views.iter().collect::<Vec<_>>())?;
        encode(&p, tape.constant(stacked), views.len())?.detach()
    };
    for path in udp_inputs(&a.udp)? {
        let udp = conr::geom::read_udp(&path)?;
        if (udp.height, udp.width) != (h, w) {
            return Err(CliError::Usage(format!("{} is {}x{}, the sheet is {h}x{w}", path.display(), udp.height, udp.width)));
        }
        let tape = Tape::new();
        let p = model.params.bind(&tape, false);
        let enc = cached.attach(&tape);
        let img = render(&p, &model.config, &enc, tape.constant(udp.to_tensor()))?;
        let dest = out.join(format!("{}.png", stem(&path)));
        RgbaImage::from_tensor(&img.value(), 0)?.write_png(&dest)?;
        println!("{}", dest.display());
    }
    log::info!("inference took {:?}", start.elapsed());
    Ok(())
}

fn detect(cfg: &RunConfig, a: &DetectArgs, out: &Path) -> Result<()> {
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let model = load_model(cfg, &a.checkpoint)?;
    let img = RgbaImage::read_png(&a.image)?;
    let white = RgbaImage::new(img.height, img.width, vec![1.0; img.height * img.width * 4])?;
    let opaque = img.over(&white)?;
    let views = brightness_views(&opaque, a.k, DETECT_JITTER, cfg.get("seed")?);
    let rgb: Vec<Tensor<f32>> = views
        .iter()
        .map(|v| {
            let t = v.to_tensor::<f32>();
            let hw = v.height * v.width;
            Tensor::new(vec![1, 3, v.height, v.width], t.data()[..3 * hw].to_vec())
        })
        .collect::<conr::Result<_>>()?;
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let input = tape.constant(Tensor::stack_batch(&rgb.iter().collect::<Vec<_>>())?);
    let (mean, _) = detect_averaged(&p, &model.config, input, a.k)?;
    let udp = UdpImage::from_tensor(&mean.value(), 0)?;
    let name = stem(&a.image);
    let dest = out.join(format!("{name}.udpf"));
    write_udp(&udp, &dest)?;
    if a.png_preview {
        udp.write_png_preview(out.join(format!("{name}_udp.png")))?;
    }
    println!("{}", dest.display());
    Ok(())
}

pub const EVAL_HEADER: &str = "n\tL_photo\tL_perc\tL_udp\tL_mask";

fn eval(cfg: &RunConfig, a: &EvalArgs, out: &Path) -> Result<()> {
    let model = load_model(cfg, &a.checkpoint)?;
    let split = if a.train_split { Split::Train } else { Split::Val };
    let samples = read_split(&a.data, split)?;
    let mut table = format!("{EVAL_HEADER}\n");
    for &n in &a.views {
        let m = evaluate(&model, &samples, n)?;
        let p = m.parts;
        table.push_str(&format!("{n}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n", p.photo, p.perc, p.udp, p.mask));
    }
    fs::write(out.join("eval.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

const PIPELINE_RESOLUTION: usize = 16;
const PIPELINE_PARAMS: usize = 20;
const PIPELINE_TOLERANCE: f64 = 1e-2;

fn gradcheck(cfg: &RunConfig, a: &GradcheckArgs) -> Result<()> {
    let reports = run_cases(&default_suite(cfg.get("seed")?, a.instances))?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}\t{}\tinstances={}\tmax_rel_error={:.3e}\tshapes={:?}", r.name, r.instances, r.max_rel_error, r.shapes);
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    let cfg_small = ModelConfig { base_channels: 4, detector_channels: 4, ..ModelConfig::default() };
    let checks = pipeline_gradcheck(cfg_small, PIPELINE_RESOLUTION, PIPELINE_PARAMS, cfg.get("seed")?)?;
    let worst = checks.iter().map(|c| c.relative_error()).fold(0.0, f64::max);
    let passed = worst < PIPELINE_TOLERANCE;
    println!(
        "{}\tpipeline\tparams={}\tmax_rel_error={worst:.3e}\tshapes=[[{PIPELINE_RESOLUTION}, {PIPELINE_RESOLUTION}]]",
        if passed { "PASS" } else { "FAIL" },
        checks.len()
    );
    if !passed {
        failed.push("pipeline".into());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::SelfCheck(format!("gradient check failed for {}", failed.join(", "))))
    }
}
