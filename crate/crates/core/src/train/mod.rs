//! Alternating adversarial training of the autoencoder, checkpointing and
//! inference helpers.

mod adam;
mod batch;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::Adam;
pub use batch::{audit_no_pairing, AuxPairing, Batch, BatchSampler, ImageBatch, PairingAudit, PriorBatch};

use crate::data::{gray_to_f32, to_gray, ImageSet};
use crate::error::{Error, IoContext, Result};
use crate::losses::{
    adversarial_losses, batch_squared_error, perceptual_loss, regression_terms, total_loss, LossReport,
    LossWeights,
};
use crate::nets::{poses_to_tensor, ModelBundle, NetConfig, DISC, ETA, GENERATOR_NETS};
use crate::prior::PriorDataset;
use crate::raster::{ChannelMode, Composition, RasterParams};
use crate::skeleton::{build_topology, Pose2D, SkeletonTopology, TopologyConfig};

pub const CONFIG_FILE: &str = "config";
pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SAMPLES_DIR: &str = "samples";
const PARAMS_FILE: &str = "params.safetensors";
const OPTIMIZER_FILE: &str = "optimizer.safetensors";
const MANIFEST_FILE: &str = "manifest.toml";
const CKPT_CONFIG_FILE: &str = "config.toml";
const CKPT_TOPOLOGY_FILE: &str = "topology.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    /// Kernel width in pixels; scales with the width from 1.5 px at 128 when unset.
    pub sigma: Option<f64>,
    pub channel_mode: ChannelMode,
    pub composition: Composition,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            sigma: None,
            channel_mode: ChannelMode::PerBoneGroup,
            composition: Composition::Max,
        }
    }
}

impl RasterConfig {
    pub fn params(&self, topology: &SkeletonTopology, resolution: (usize, usize)) -> Result<RasterParams> {
        let d = RasterParams::default_for(topology, resolution);
        RasterParams::new(
            topology,
            resolution,
            self.sigma.unwrap_or(d.sigma),
            self.channel_mode,
            self.composition,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Built-in topology name or path to a topology file.
    pub topology: String,
    pub images: PathBuf,
    pub prior: PathBuf,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Discriminator learning rate; `learning_rate` when unset.
    pub disc_learning_rate: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: u64,
    pub checkpoint_every: u64,
    /// 0 disables sample grids.
    pub sample_every: u64,
    pub lambda: f64,
    pub weights: LossWeights,
    pub aux_pairing: AuxPairing,
    /// Supervised regressor steps on prior pairs before joint training
    /// (ablation; 0 trains everything from scratch).
    pub eta_pretrain_steps: u64,
    pub seed: u64,
    pub deterministic: bool,
    pub net: NetConfig,
    pub raster: RasterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            topology: "mouse18".into(),
            images: PathBuf::new(),
            prior: PathBuf::new(),
            batch_size: 32,
            learning_rate: 2e-4,
            disc_learning_rate: None,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 10_000,
            checkpoint_every: 1_000,
            sample_every: 500,
            lambda: 0.1,
            weights: LossWeights::default(),
            aux_pairing: AuxPairing::SameSequence,
            eta_pretrain_steps: 0,
            seed: 0,
            deterministic: true,
            net: NetConfig::default(),
            raster: RasterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Every violated constraint, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.topology.trim().is_empty() {
            errs.push("topology must be set".to_string());
        }
        if self.images.as_os_str().is_empty() {
            errs.push("images must name an image set directory".into());
        }
        if self.prior.as_os_str().is_empty() {
            errs.push("prior must name a prior directory".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if let Some(lr) = self.disc_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                errs.push(format!("disc_learning_rate must be > 0, got {lr}"));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                errs.push(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            errs.push("adam_eps must be > 0".into());
        }
        if self.checkpoint_every == 0 {
            errs.push("checkpoint_every must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            errs.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        let w = self.weights;
        for (name, v) in [("perceptual", w.perceptual), ("regression", w.regression), ("adversarial", w.adversarial)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("weights.{name} must be >= 0, got {v}"));
            }
        }
        if let Some(s) = self.raster.sigma {
            if !(s > 0.0 && s.is_finite()) {
                errs.push(format!("raster.sigma must be > 0, got {s}"));
            }
        }
        if let Err(Error::Config(more)) = self.net.validate() {
            errs.extend(more);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// sha256 of the configuration with the run length cleared, so that a
    /// resumed run with more steps keeps its identity.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.steps = 0;
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    pub fn resolve_topology(&self) -> Result<SkeletonTopology> {
        SkeletonTopology::resolve(&self.topology)
    }

    pub fn build_bundle(&self, topology: SkeletonTopology) -> Result<ModelBundle> {
        let mut net = self.net.clone();
        net.init_seed = self.seed;
        let raster = self.raster.params(&topology, net.image_resolution)?;
        ModelBundle::new(net, topology, raster)
    }
}

/// Bookkeeping stored next to the parameters of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: u64,
    pub config_hash: String,
    pub params_hash: String,
    pub disc_adam_t: u64,
    pub gen_adam_t: u64,
    pub rng_seed: String,
    pub rng_stream: u64,
    /// decimal `u128`
    pub rng_word_pos: String,
}

/// One alternating update of the discriminator and the generator networks.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub bundle: ModelBundle,
    pub disc_opt: Adam,
    pub gen_opt: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, topology: SkeletonTopology) -> Result<Self> {
        cfg.validate()?;
        let bundle = cfg.build_bundle(topology)?;
        let adam = |nets: &[&str], lr: f64| {
            Adam::new(
                &bundle.params,
                nets,
                lr,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )
        };
        let disc_opt = adam(&[DISC], cfg.disc_learning_rate.unwrap_or(cfg.learning_rate))?;
        let gen_opt = adam(&GENERATOR_NETS, cfg.learning_rate)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            bundle,
            disc_opt,
            gen_opt,
            step: 0,
            rng,
        })
    }

    /// Discriminator step on its least-squares objective, then one generator
    /// step on the weighted perceptual, regression and adversarial terms.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let step = self.step + 1;
        let b = &self.bundle;
        let (x, y) = (&batch.images.x, &batch.images.y);
        let v_hat = &batch.prior.poses;
        let s_hat = b.beta(v_hat)?;
        let s = b.phi_forward(x)?;

        let (l_d, _) = adversarial_losses(&b.disc_forward(&s_hat)?, &b.disc_forward(&s.detach())?)?;
        let disc = scalar(&l_d, "disc", step)?;
        self.disc_opt.step(&b.params, &l_d.backward()?)?;

        let v = b.eta_forward(&s)?;
        let s_prime = b.beta(&v)?;
        let x_prime = b.psi_forward(&s_prime, y)?;
        let perc = perceptual_loss(&b.gamma, &x_prime, x)?;
        let terms = regression_terms(&b.eta_forward(&s_hat)?, v_hat, &s_prime, &s)?;
        let (_, l_g) = adversarial_losses(&b.disc_forward(&s_hat)?.detach(), &b.disc_forward(&s)?)?;
        let w = self.cfg.weights;
        let objective = ((&perc * w.perceptual)?
            + (terms.combined(self.cfg.lambda)? * w.regression)?
            + (&l_g * w.adversarial)?)?;
        let report = LossReport {
            perceptual: scalar(&perc, "perceptual", step)?,
            disc,
            gen_adv: scalar(&l_g, "gen_adv", step)?,
            regress_prior: scalar(&terms.prior, "regress_prior", step)?,
            regress_cycle: scalar(&terms.cycle, "regress_cycle", step)?,
            total: 0.0,
        };
        let total = total_loss(
            report.perceptual,
            report.disc,
            report.regress_prior + self.cfg.lambda * report.regress_cycle,
            step,
        )?;
        self.gen_opt.step(&b.params, &objective.backward()?)?;
        self.step = step;
        Ok(LossReport { total, ..report })
    }

    pub fn save_checkpoint(&self, run_dir: &Path) -> Result<PathBuf> {
        let root = run_dir.join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&root).at(&root)?;
        let dir = root.join(format!("step_{}", self.step));
        let tmp = root.join(format!(".tmp_step_{}", self.step));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).at(&tmp)?;
        }
        std::fs::create_dir_all(&tmp).at(&tmp)?;
        self.bundle.params.save(&tmp.join(PARAMS_FILE))?;
        let mut opt = self.disc_opt.state("disc");
        opt.extend(self.gen_opt.state("gen"));
        candle_core::safetensors::save(&opt, tmp.join(OPTIMIZER_FILE))?;
        let manifest = CheckpointManifest {
            step: self.step,
            config_hash: self.cfg.hash()?,
            params_hash: self.bundle.hash(&[])?,
            disc_adam_t: self.disc_opt.t,
            gen_adam_t: self.gen_opt.t,
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        write_file(&tmp.join(MANIFEST_FILE), toml::to_string(&manifest)?.as_bytes())?;
        write_file(&tmp.join(CKPT_CONFIG_FILE), self.cfg.to_toml()?.as_bytes())?;
        write_file(
            &tmp.join(CKPT_TOPOLOGY_FILE),
            self.bundle.topology.to_config().to_toml()?.as_bytes(),
        )?;
        if dir.exists() {
            std::fs::remove_dir_all(&dir).at(&dir)?;
        }
        std::fs::rename(&tmp, &dir).at(&dir)?;
        Ok(dir)
    }

    /// Restores parameters, optimizer moments, step and sampling state.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<CheckpointManifest> {
        let manifest = read_manifest(dir)?;
        if manifest.config_hash != self.cfg.hash()? {
            return Err(Error::Config(vec![format!(
                "{} was written under a different configuration",
                dir.display()
            )]));
        }
        self.bundle.params.load(&dir.join(PARAMS_FILE))?;
        let opt_path = dir.join(OPTIMIZER_FILE);
        let opt: HashMap<String, Tensor> = candle_core::safetensors::load(&opt_path, &Device::Cpu)
            .map_err(|e| Error::Data(format!("{}: {e}", opt_path.display())))?;
        self.disc_opt.load_state("disc", &opt, manifest.disc_adam_t)?;
        self.gen_opt.load_state("gen", &opt, manifest.gen_adam_t)?;
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&manifest.rng_seed, &mut seed)
            .map_err(|e| Error::Data(format!("{}: bad rng seed: {e}", dir.display())))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(manifest.rng_stream);
        rng.set_word_pos(
            manifest
                .rng_word_pos
                .parse()
                .map_err(|e| Error::Data(format!("{}: bad rng position: {e}", dir.display())))?,
        );
        self.rng = rng;
        self.step = manifest.step;
        Ok(manifest)
    }
}

fn scalar(t: &Tensor, term: &'static str, step: u64) -> Result<f64> {
    let v = t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence { term, step })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).at(path)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).at(&path)?;
    Ok(toml::from_str(&text)?)
}

/// Rebuilds the bundle stored in a checkpoint directory.
pub fn load_bundle(dir: &Path) -> Result<(TrainConfig, ModelBundle)> {
    let cfg_path = dir.join(CKPT_CONFIG_FILE);
    let cfg = TrainConfig::from_toml(&std::fs::read_to_string(&cfg_path).at(&cfg_path)?)?;
    let topo_path = dir.join(CKPT_TOPOLOGY_FILE);
    let topology = build_topology(&TopologyConfig::load(&topo_path)?)?;
    let bundle = cfg.build_bundle(topology)?;
    bundle.params.load(&dir.join(PARAMS_FILE))?;
    Ok((cfg, bundle))
}

/// Supervised regressor training on `(β(v̂), v̂)` pairs drawn from `poses`.
/// Only the regressor's parameters move. Returns the per-step loss.
pub fn pretrain_eta(
    bundle: &ModelBundle,
    poses: &[Pose2D],
    steps: u64,
    batch_size: usize,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if poses.is_empty() {
        return Err(Error::Data("no poses to pretrain the regressor on".into()));
    }
    let mut losses = Vec::with_capacity(steps as usize);
    for step in 1..=steps {
        let pick: Vec<Pose2D> = (0..batch_size)
            .map(|_| poses[rng.random_range(0..poses.len())].clone())
            .collect();
        let v_hat = poses_to_tensor(&pick)?;
        let s_hat = bundle.beta(&v_hat)?;
        let loss = batch_squared_error(&bundle.eta_forward(&s_hat)?, &v_hat)?;
        losses.push(scalar(&loss, "regress_prior", step)?);
        opt.step(&bundle.params, &loss.backward()?)?;
    }
    Ok(losses)
}

/// Regressor-only optimizer for [`pretrain_eta`].
pub fn eta_optimizer(bundle: &ModelBundle, cfg: &TrainConfig) -> Result<Adam> {
    Adam::new(&bundle.params, &[ETA], cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
}

/// Result of [`train_loop`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub final_checkpoint: PathBuf,
    pub audit: PairingAudit,
    /// Reports of the steps run by this invocation.
    pub reports: Vec<LossReport>,
}

/// Keeps the header and rows up to `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let file = File::open(path).at(path)?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if i == 0 {
            kept.push(line);
            continue;
        }
        match LossReport::parse_csv_row(&line) {
            Some((s, _)) if s <= step => kept.push(line),
            _ => break,
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Trains for `cfg.steps` steps in `run_dir`, or continues from `resume`.
///
/// The run directory holds `config`, `log.csv`, `checkpoints/step_<n>/` and
/// `samples/step_<n>.png`. A checkpoint is written before the first step,
/// every `checkpoint_every` steps and after the last step.
pub fn train_loop(cfg: &TrainConfig, run_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    for (what, p) in [("image set", &cfg.images), ("prior", &cfg.prior)] {
        if !p.is_dir() {
            return Err(Error::Data(format!("{what} directory {} does not exist", p.display())));
        }
    }
    let topology = cfg.resolve_topology()?;
    let images = ImageSet::load(&cfg.images, cfg.net.image_resolution)?;
    let prior = PriorDataset::load(&cfg.prior, &topology)?;
    let audit = audit_no_pairing(&images, &cfg.prior, &prior)?;
    let mut sampler = BatchSampler::new(&images, &prior)?;
    let mut trainer = Trainer::new(cfg.clone(), topology)?;

    std::fs::create_dir_all(run_dir).at(run_dir)?;
    let log_path = run_dir.join(LOG_FILE);
    match resume {
        Some(ckpt) => {
            trainer.load_checkpoint(ckpt)?;
            if log_path.exists() {
                truncate_log(&log_path, trainer.step)?;
            } else {
                write_file(&log_path, format!("{}\n", LossReport::CSV_HEADER).as_bytes())?;
            }
            log::info!("resuming at step {}", trainer.step);
        }
        None => {
            write_file(&run_dir.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
            write_file(&log_path, format!("{}\n", LossReport::CSV_HEADER).as_bytes())?;
            if cfg.eta_pretrain_steps > 0 {
                let mut opt = eta_optimizer(&trainer.bundle, cfg)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a);
                pretrain_eta(
                    &trainer.bundle,
                    &prior.poses,
                    cfg.eta_pretrain_steps,
                    cfg.batch_size,
                    &mut opt,
                    &mut rng,
                )?;
            }
        }
    }
    let mut last = if resume.is_none() {
        trainer.save_checkpoint(run_dir)?
    } else {
        resume.map(Path::to_path_buf).unwrap_or_default()
    };
    let mut log = OpenOptions::new().append(true).open(&log_path).at(&log_path)?;
    let mut reports = Vec::new();
    while trainer.step < cfg.steps {
        let mut rng = trainer.rng.clone();
        let batch = sampler.sample(&images, cfg.batch_size, cfg.aux_pairing, &mut rng)?;
        trainer.rng = rng;
        let report = trainer.train_step(&batch)?;
        writeln!(log, "{}", report.csv_row(trainer.step)).at(&log_path)?;
        reports.push(report);
        if cfg.sample_every > 0 && trainer.step % cfg.sample_every == 0 {
            write_sample_grid(&trainer.bundle, &batch, run_dir, trainer.step)?;
        }
        if trainer.step % cfg.checkpoint_every == 0 || trainer.step == cfg.steps {
            log.flush().at(&log_path)?;
            last = trainer.save_checkpoint(run_dir)?;
        }
    }
    log.flush().at(&log_path)?;
    Ok(TrainOutcome {
        trainer,
        final_checkpoint: last,
        audit,
        reports,
    })
}

fn channel_rgb(t: &[Vec<Vec<f32>>], y: usize, x: usize) -> Rgb<u8> {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match t.len() {
        1 => Rgb([q(t[0][y][x]); 3]),
        _ => Rgb([q(t[0][y][x]), q(t[1][y][x]), q(t[2.min(t.len() - 1)][y][x])]),
    }
}

/// Rows of `x | s | s′ | x′` for up to four samples of `batch`.
pub fn write_sample_grid(bundle: &ModelBundle, batch: &Batch, run_dir: &Path, step: u64) -> Result<PathBuf> {
    let n = batch.images.x.dims()[0].min(4);
    let x = batch.images.x.narrow(0, 0, n)?;
    let y = batch.images.y.narrow(0, 0, n)?;
    let rec = bundle.reconstruct(&x, &y)?;
    let (h, w) = bundle.config.image_resolution;
    let mut img = RgbImage::new((4 * w) as u32, (n * h) as u32);
    for (col, t) in [&x, &rec.skeleton, &rec.rendered, &rec.image].into_iter().enumerate() {
        for row in 0..n {
            let sample = t.get(row)?.to_vec3::<f32>()?;
            let sample = &sample;
            for yy in 0..h {
                for xx in 0..w {
                    img.put_pixel((col * w + xx) as u32, (row * h + yy) as u32, channel_rgb(sample, yy, xx));
                }
            }
        }
    }
    let dir = run_dir.join(SAMPLES_DIR);
    std::fs::create_dir_all(&dir).at(&dir)?;
    let path = dir.join(format!("step_{step}.png"));
    img.save(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// Pose of one image of any size; the flag records a resize to the network
/// resolution.
pub fn predict_pose(bundle: &ModelBundle, img: &GrayImage) -> Result<(Pose2D, bool)> {
    let (mut poses, resized) = predict_batch(bundle, std::slice::from_ref(img))?;
    Ok((poses.remove(0), resized > 0))
}

/// Poses of many images in one pass; returns the number of resized inputs.
pub fn predict_batch(bundle: &ModelBundle, imgs: &[GrayImage]) -> Result<(Vec<Pose2D>, usize)> {
    if imgs.is_empty() {
        return Ok((Vec::new(), 0));
    }
    let (h, w) = bundle.config.image_resolution;
    let mut data = Vec::with_capacity(imgs.len() * h * w);
    let mut resized = 0;
    for img in imgs {
        let (g, changed) = to_gray(image::DynamicImage::ImageLuma8(img.clone()), (h, w));
        resized += changed as usize;
        data.extend(gray_to_f32(&g));
    }
    let x = Tensor::from_vec(data, (imgs.len(), 1, h, w), &Device::Cpu)?;
    Ok((bundle.predict(&x)?, resized))
}
