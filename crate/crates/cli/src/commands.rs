use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use posegan::data::{load_native_frames, write_synthetic_set};
use posegan::eval::{
    evaluate_run, load_ground_truth, mpjpe_sets, plot_trajectories, EvalOptions, GroundTruthSet, GROUND_TRUTH_FILE,
};
use posegan::prior::{
    generate_prior_from_meta, read_poses_csv, CameraModel, MotionParams, PriorDataset, PriorMeta,
    DEFAULT_PRIOR_SIZE, DEFAULT_SEQUENCE_LENGTH, META_FILE, POSES_FILE,
};
use posegan::raster::{rasterize, ChannelMode, Composition};
use posegan::skeleton::SkeletonTopology;
use posegan::train::{load_bundle, predict_batch, train_loop, RasterConfig, TrainConfig, CHECKPOINT_DIR, CONFIG_FILE};
use posegan::video::{extract_frames, ExtractOptions};

use crate::manifest::RunManifest;
use crate::{Cli, Command, GlobalArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] posegan::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, CliError>;

/// Subdirectory of a `generate-prior --render-images` run holding the
/// rendered capsule images.
pub const IMAGES_SUBDIR: &str = "images";

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GeneratePrior(a) => generate_prior(g, a),
        Command::ExtractFrames(a) => extract(g, a),
        Command::Train(a) => train(g, a),
        Command::Predict(a) => predict(g, a),
        Command::Evaluate(a) => evaluate(g, a),
        Command::Render(a) => render(g, a),
    }
}

/// `WIDTHxHEIGHT` → `(height, width)`.
fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: usize = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((h, w))
}

/// `X,Y,WIDTH,HEIGHT`
fn parse_crop(s: &str) -> std::result::Result<(u32, u32, u32, u32), String> {
    let v: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, w, h] if w > 0 && h > 0 => Ok((x, y, w, h)),
        _ => Err("expected X,Y,WIDTH,HEIGHT with positive size".into()),
    }
}

fn require_out(g: &GlobalArgs) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))
}

/// Refuses a non-empty existing directory unless `force`.
fn claim_out(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.is_dir() && fs::read_dir(dir)?.next().is_some();
    if occupied && !force {
        return Err(CliError::Usage(format!(
            "{} exists and is not empty; pass --force to write into it",
            dir.display()
        )));
    }
    if dir.exists() && !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    Ok(())
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| posegan::Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn table<T: Serialize>(v: &T) -> Result<toml::Table> {
    let text = toml::to_string(v).map_err(posegan::Error::from)?;
    Ok(toml::from_str(&text).map_err(posegan::Error::from)?)
}

fn start_manifest<T: Serialize>(g: &GlobalArgs, command: &str, cfg: &T, inputs: &[&Path], out: &Path) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, table(cfg)?);
    if let Some(c) = &g.config {
        m.input(c)?;
    }
    for p in inputs {
        m.input(p)?;
    }
    m.write(out)?;
    Ok(m)
}

fn resolve_topology(name: &str) -> Result<SkeletonTopology> {
    Ok(SkeletonTopology::resolve(name)?)
}

// ---------------------------------------------------------------- prior

#[derive(Debug, Args)]
pub struct PriorArgs {
    /// Built-in topology name or path to a topology TOML.
    #[arg(long)]
    pub topology: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub sequence_length: Option<usize>,
    /// Also render a capsule image per pose into `<out>/images`, with
    /// annotations for evaluation.
    #[arg(long)]
    pub render_images: bool,
    /// Size of rendered images, WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    pub resolution: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorCommandConfig {
    pub topology: String,
    pub count: usize,
    pub sequence_length: usize,
    pub motion: MotionParams,
    /// Defaults to the topology's standard view.
    pub camera: Option<CameraModel>,
    pub render_images: bool,
    /// `(height, width)` of rendered images.
    pub resolution: (usize, usize),
}

impl Default for PriorCommandConfig {
    fn default() -> Self {
        Self {
            topology: "mouse18".into(),
            count: DEFAULT_PRIOR_SIZE,
            sequence_length: DEFAULT_SEQUENCE_LENGTH,
            motion: MotionParams::default(),
            camera: None,
            render_images: false,
            resolution: (64, 64),
        }
    }
}

fn generate_prior(g: &GlobalArgs, a: &PriorArgs) -> Result<()> {
    let mut cfg: PriorCommandConfig = read_config(g.config.as_deref())?;
    if let Some(t) = &a.topology {
        cfg.topology = t.clone();
    }
    if let Some(n) = a.count {
        cfg.count = n;
    }
    if let Some(n) = a.sequence_length {
        cfg.sequence_length = n;
    }
    if let Some(s) = g.seed {
        cfg.motion.seed = s;
    }
    if let Some(r) = a.resolution {
        cfg.resolution = r;
    }
    cfg.render_images |= a.render_images;
    let topology = resolve_topology(&cfg.topology)?;
    let camera = cfg.camera.clone().unwrap_or_else(|| CameraModel::default_for(&topology));
    cfg.camera = Some(camera.clone());
    let meta = PriorMeta {
        topology: topology.name.clone(),
        count: cfg.count,
        sequence_length: cfg.sequence_length,
        motion: cfg.motion.clone(),
        camera,
        limits: topology.limits.clone(),
    };
    meta.validate(&topology)?;

    let out = require_out(g)?;
    claim_out(out, g.force)?;
    let mut manifest = start_manifest(g, "generate-prior", &cfg, &[], out)?;
    let prior = generate_prior_from_meta(&topology, &meta)?;
    prior.save(out, &topology)?;
    log::info!("wrote {} poses to {}", prior.len(), out.display());
    if cfg.render_images {
        let dir = out.join(IMAGES_SUBDIR);
        let n = write_synthetic_set(&dir, &topology, &meta, cfg.resolution)?;
        log::info!("rendered {n} images to {}", dir.display());
    }
    manifest.finish(out)?;
    Ok(())
}

// --------------------------------------------------------------- frames

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// A .y4m or .gif video, or a directory of images.
    pub input: PathBuf,
    /// Output size, WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    pub resize: Option<(usize, usize)>,
    /// Crop X,Y,WIDTH,HEIGHT applied before resizing.
    #[arg(long, value_parser = parse_crop)]
    pub crop: Option<(u32, u32, u32, u32)>,
    /// Keep every n-th frame.
    #[arg(long, default_value_t = 1)]
    pub every: usize,
    #[arg(long)]
    pub max_frames: Option<usize>,
    /// Sequence id recorded in the index; defaults to the input file stem.
    #[arg(long)]
    pub sequence: Option<String>,
}

#[derive(Debug, Serialize)]
struct ExtractRecord<'a> {
    input: &'a Path,
    resize: Option<(usize, usize)>,
    crop: Option<(u32, u32, u32, u32)>,
    every: usize,
    max_frames: Option<usize>,
    sequence: &'a Option<String>,
}

fn extract(g: &GlobalArgs, a: &ExtractArgs) -> Result<()> {
    if a.every == 0 {
        return Err(CliError::Usage("--every must be >= 1".into()));
    }
    let out = require_out(g)?;
    claim_out(out, g.force)?;
    let record = ExtractRecord {
        input: &a.input,
        resize: a.resize,
        crop: a.crop,
        every: a.every,
        max_frames: a.max_frames,
        sequence: &a.sequence,
    };
    if !a.input.exists() {
        return Err(posegan::Error::Data(format!("{}: no such video", a.input.display())).into());
    }
    let mut manifest = start_manifest(g, "extract-frames", &record, &[&a.input], out)?;
    let opts = ExtractOptions {
        resize: a.resize,
        crop: a.crop,
        every: a.every,
        max_frames: a.max_frames,
        sequence: a.sequence.clone(),
    };
    let n = extract_frames(&a.input, out, &opts)?;
    log::info!("wrote {n} frames to {}", out.display());
    manifest.finish(out)?;
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Image set directory (with index.csv).
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Prior directory (with poses.csv and meta).
    #[arg(long)]
    pub prior: Option<PathBuf>,
    #[arg(long)]
    pub topology: Option<String>,
    /// Total step count of the run.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint directory; the run directory defaults to
    /// the one containing it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn train(g: &GlobalArgs, a: &TrainArgs) -> Result<()> {
    let mut cfg = match (&g.config, &a.resume) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| posegan::Error::io(p, e))?;
            TrainConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        (None, Some(ckpt)) => {
            let p = ckpt.join(format!("{CONFIG_FILE}.toml"));
            TrainConfig::from_toml(&fs::read_to_string(&p).map_err(|e| posegan::Error::io(&p, e))?)?
        }
        (None, None) => TrainConfig::default(),
    };
    if let Some(p) = &a.images {
        cfg.images = p.clone();
    }
    if let Some(p) = &a.prior {
        cfg.prior = p.clone();
    }
    if let Some(t) = &a.topology {
        cfg.topology = t.clone();
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= g.deterministic;
    if cfg.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    cfg.validate()?;

    let out: PathBuf = match (&g.out, &a.resume) {
        (Some(o), _) => o.clone(),
        (None, Some(ckpt)) => ckpt
            .parent()
            .filter(|p| p.file_name().is_some_and(|n| n == CHECKPOINT_DIR))
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .ok_or_else(|| CliError::Usage("cannot infer the run directory; pass --out".into()))?,
        (None, None) => return Err(CliError::Usage("--out is required".into())),
    };
    if a.resume.is_none() {
        claim_out(&out, g.force)?;
    }
    let mut inputs: Vec<&Path> = vec![&cfg.images, &cfg.prior];
    if let Some(r) = &a.resume {
        inputs.push(r);
    }
    for p in &inputs {
        if !p.exists() {
            return Err(posegan::Error::Data(format!("{} does not exist", p.display())).into());
        }
    }
    let command = if a.resume.is_some() { "train --resume" } else { "train" };
    let mut manifest = start_manifest(g, command, &cfg, &inputs, &out)?;
    let outcome = train_loop(&cfg, &out, a.resume.as_deref())?;
    log::info!(
        "trained to step {}; final checkpoint {}",
        outcome.trainer.step,
        outcome.final_checkpoint.display()
    );
    manifest.finish(&out)?;
    Ok(())
}

// ------------------------------------------------------ predict / evaluate

fn uniform_size(frames: &[(usize, image::GrayImage)], dir: &Path) -> Result<(u32, u32)> {
    let (_, first) = frames
        .first()
        .ok_or_else(|| posegan::Error::Data(format!("{}: image set is empty", dir.display())))?;
    let size = first.dimensions();
    if let Some((f, _)) = frames.iter().find(|(_, im)| im.dimensions() != size) {
        return Err(posegan::Error::Data(format!(
            "{}: frame {f} differs in size from the first frame",
            dir.display()
        ))
        .into());
    }
    Ok(size)
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint directory (`<run>/checkpoints/step_<n>`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Serialize)]
struct PredictRecord<'a> {
    checkpoint: &'a Path,
    images: &'a Path,
    batch_size: usize,
}

pub const PREDICTIONS_FILE: &str = "predictions.csv";

fn predict(g: &GlobalArgs, a: &PredictArgs) -> Result<()> {
    let out = require_out(g)?;
    claim_out(out, g.force)?;
    let record = PredictRecord {
        checkpoint: &a.checkpoint,
        images: &a.images,
        batch_size: a.batch_size,
    };
    let (_, bundle) = load_bundle(&a.checkpoint)?;
    let frames = load_native_frames(&a.images)?;
    let (w, h) = uniform_size(&frames, &a.images)?;
    let mut manifest = start_manifest(g, "predict", &record, &[&a.checkpoint, &a.images], out)?;
    let mut set = GroundTruthSet::new(&bundle.topology, w, h, "predictions");
    let mut resized = 0;
    for chunk in frames.chunks(a.batch_size.max(1)) {
        let imgs: Vec<_> = chunk.iter().map(|(_, im)| im.clone()).collect();
        let (poses, r) = predict_batch(&bundle, &imgs)?;
        resized += r;
        for ((f, _), p) in chunk.iter().zip(&poses) {
            set.push_pose(*f, p);
        }
    }
    if resized > 0 {
        log::info!("resized {resized} frames to the network resolution");
    }
    set.save(&out.join(PREDICTIONS_FILE))?;
    log::info!("wrote {} predictions to {}", set.len(), out.display());
    manifest.finish(out)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predict with this checkpoint (requires --images).
    #[arg(long, conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Score an existing predictions CSV instead.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Annotation CSV; defaults to `<images>/ground_truth.csv`.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Second prediction CSV to compare against, drawn dotted.
    #[arg(long)]
    pub external: Option<PathBuf>,
    /// Topology of a predictions CSV; checkpoints carry their own.
    #[arg(long, default_value = "mouse18")]
    pub topology: String,
    #[arg(long, default_value_t = 8)]
    pub overlays: usize,
    #[arg(long)]
    pub no_plots: bool,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Serialize)]
struct EvaluateRecord<'a> {
    checkpoint: &'a Option<PathBuf>,
    predictions: &'a Option<PathBuf>,
    images: &'a Option<PathBuf>,
    ground_truth: &'a Path,
    external: &'a Option<PathBuf>,
    overlays: usize,
    plots: bool,
}

fn evaluate(g: &GlobalArgs, a: &EvaluateArgs) -> Result<()> {
    let gt_path = match (&a.ground_truth, &a.images) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join(GROUND_TRUTH_FILE),
        (None, None) => return Err(CliError::Usage("--ground-truth or --images is required".into())),
    };
    let out = require_out(g)?;
    claim_out(out, g.force)?;
    let record = EvaluateRecord {
        checkpoint: &a.checkpoint,
        predictions: &a.predictions,
        images: &a.images,
        ground_truth: &gt_path,
        external: &a.external,
        overlays: a.overlays,
        plots: !a.no_plots,
    };
    let mut inputs: Vec<&Path> = vec![&gt_path];
    inputs.extend([&a.checkpoint, &a.predictions, &a.images, &a.external].into_iter().flatten().map(PathBuf::as_path));
    let table = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            let images = a
                .images
                .as_ref()
                .ok_or_else(|| CliError::Usage("--checkpoint needs --images".into()))?;
            let (_, bundle) = load_bundle(ckpt)?;
            let gts = load_ground_truth(&gt_path, &bundle.topology)?;
            let external = a.external.as_ref().map(|p| load_ground_truth(p, &bundle.topology)).transpose()?;
            let frames = load_native_frames(images)?;
            let mut manifest = start_manifest(g, "evaluate", &record, &inputs, out)?;
            let opts = EvalOptions {
                out_dir: Some(out.to_path_buf()),
                overlays: a.overlays,
                plots: !a.no_plots,
                external,
                batch_size: a.batch_size,
            };
            let outcome = evaluate_run(&bundle, &frames, &gts, &opts)?;
            if let Some(t) = &outcome.external_table {
                println!("external:\n{}", t.to_text());
            }
            manifest.finish(out)?;
            outcome.table
        }
        (None, Some(pred_path)) => {
            let topology = resolve_topology(&a.topology)?;
            let gts = load_ground_truth(&gt_path, &topology)?;
            let preds = load_ground_truth(pred_path, &topology)?;
            let external = a.external.as_ref().map(|p| load_ground_truth(p, &topology)).transpose()?;
            let mut manifest = start_manifest(g, "evaluate", &record, &inputs, out)?;
            let table = mpjpe_sets(&preds, &gts)?;
            fs::write(out.join("mpjpe.csv"), table.to_csv())?;
            fs::write(out.join("mpjpe.txt"), table.to_text())?;
            if let Some(e) = &external {
                let t = mpjpe_sets(e, &gts)?;
                println!("external:\n{}", t.to_text());
            }
            if !a.no_plots {
                let mut series: Vec<(&str, &GroundTruthSet)> = vec![("predicted", &preds), ("annotated", &gts)];
                if let Some(e) = &external {
                    series.push(("external", e));
                }
                plot_trajectories(&out.join("trajectories"), &gts.joints, &series)?;
            }
            manifest.finish(out)?;
            table
        }
        (None, None) => return Err(CliError::Usage("--checkpoint or --predictions is required".into())),
    };
    println!("{}", table.to_text());
    Ok(())
}

// --------------------------------------------------------------- render

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// A poses.csv or a prior directory.
    #[arg(long)]
    pub poses: PathBuf,
    /// Defaults to the prior's topology, else mouse18.
    #[arg(long)]
    pub topology: Option<String>,
    /// WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    pub resolution: Option<(usize, usize)>,
    /// Gaussian width in pixels.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// One channel for all bones.
    #[arg(long)]
    pub mono: bool,
    /// Smooth `1 - Π(1 - g)` composition instead of max.
    #[arg(long)]
    pub soft_or: bool,
    /// Render at most this many poses.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderCommandConfig {
    pub topology: Option<String>,
    /// `(height, width)`
    pub resolution: (usize, usize),
    pub raster: RasterConfig,
}

impl Default for RenderCommandConfig {
    fn default() -> Self {
        Self {
            topology: None,
            resolution: (128, 128),
            raster: RasterConfig::default(),
        }
    }
}

fn render(g: &GlobalArgs, a: &RenderArgs) -> Result<()> {
    let mut cfg: RenderCommandConfig = read_config(g.config.as_deref())?;
    if let Some(t) = &a.topology {
        cfg.topology = Some(t.clone());
    }
    if let Some(r) = a.resolution {
        cfg.resolution = r;
    }
    if let Some(s) = a.sigma {
        cfg.raster.sigma = Some(s);
    }
    if a.mono {
        cfg.raster.channel_mode = ChannelMode::Mono;
    }
    if a.soft_or {
        cfg.raster.composition = Composition::SoftOr;
    }
    let (csv, prior_dir) = if a.poses.is_dir() {
        (a.poses.join(POSES_FILE), Some(a.poses.as_path()))
    } else {
        (a.poses.clone(), None)
    };
    let name = match (&cfg.topology, prior_dir) {
        (Some(t), _) => t.clone(),
        (None, Some(d)) if d.join(META_FILE).exists() => {
            let p = d.join(META_FILE);
            let meta: PriorMeta = toml::from_str(&fs::read_to_string(&p).map_err(|e| posegan::Error::io(&p, e))?)
                .map_err(posegan::Error::from)?;
            meta.topology
        }
        _ => "mouse18".into(),
    };
    cfg.topology = Some(name.clone());
    let topology = resolve_topology(&name)?;
    let params = cfg.raster.params(&topology, cfg.resolution)?;
    let poses = match prior_dir {
        Some(d) if d.join(META_FILE).exists() => PriorDataset::load(d, &topology)?.poses,
        _ => read_poses_csv(&csv, &topology)?,
    };

    let out = require_out(g)?;
    claim_out(out, g.force)?;
    let mut manifest = start_manifest(g, "render", &cfg, &[&csv], out)?;
    let n = a.limit.unwrap_or(usize::MAX).min(poses.len());
    for (i, pose) in poses.iter().take(n).enumerate() {
        let path = out.join(format!("pose_{i:06}.png"));
        rasterize(pose, &topology, &params)?
            .to_rgb()
            .save(&path)
            .map_err(|e| posegan::Error::Data(format!("{}: {e}", path.display())))?;
    }
    log::info!("rendered {n} skeleton images to {}", out.display());
    manifest.finish(out)?;
    Ok(())
}
