//! The learnable maps and the fixed feature extractor.
//!
//! * encoder: image → skeleton image
//! * regressor: skeleton image → joint coordinates
//! * decoder: skeleton image + auxiliary image → image
//! * discriminator: skeleton image → probability of coming from the prior
//!
//! Tensors are `(N, C, H, W)` f32; images and skeleton images lie in `[0, 1]`.

mod beta_op;
mod conv;
mod gamma;
mod layers;
mod params;

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use beta_op::RasterOp;
pub use conv::conv2d;
pub use gamma::{Gamma, GammaConfig, GammaMode};
pub use layers::{Encoder, UNet};
pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::raster::RasterParams;
use crate::skeleton::{Pose2D, SkeletonTopology};

pub const PHI: &str = "phi";
pub const ETA: &str = "eta";
pub const PSI: &str = "psi";
pub const DISC: &str = "disc";
pub const GENERATOR_NETS: [&str; 3] = [PHI, ETA, PSI];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EtaHead {
    /// Strided encoder, fully connected layers, `tanh`.
    #[default]
    Dense,
    /// Encoder-decoder producing one heatmap per joint; coordinates are the
    /// heatmap's spatial expectation.
    SoftArgmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// (height, width)
    pub image_resolution: (usize, usize),
    pub phi_channels: Vec<usize>,
    pub psi_channels: Vec<usize>,
    pub eta_channels: Vec<usize>,
    pub eta_hidden: usize,
    pub eta_head: EtaHead,
    pub disc_channels: Vec<usize>,
    /// Initial bias of the encoder's output logits; negative values start
    /// from a nearly empty skeleton image.
    pub phi_output_bias: f32,
    pub gamma: GammaConfig,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_resolution: (128, 128),
            phi_channels: vec![8, 16, 32, 64],
            psi_channels: vec![8, 16, 32, 64],
            eta_channels: vec![16, 32, 64, 64],
            eta_hidden: 256,
            eta_head: EtaHead::Dense,
            disc_channels: vec![16, 32, 64, 64],
            phi_output_bias: -3.0,
            gamma: GammaConfig::default(),
            init_seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let (h, w) = self.image_resolution;
        for (name, v) in [("height", h), ("width", w)] {
            if v < 32 || !v.is_power_of_two() {
                errs.push(format!("image {name} must be a power of two >= 32, got {v}"));
            }
        }
        let min = h.min(w);
        for (name, ch) in [
            ("phi_channels", &self.phi_channels),
            ("psi_channels", &self.psi_channels),
            ("eta_channels", &self.eta_channels),
            ("disc_channels", &self.disc_channels),
        ] {
            if ch.is_empty() || ch.contains(&0) {
                errs.push(format!("{name} must list at least one non-zero width"));
            } else if min >> ch.len() == 0 {
                errs.push(format!("{name} has too many stages for {h}x{w}"));
            }
        }
        if self.eta_hidden == 0 {
            errs.push("eta_hidden must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone)]
enum EtaNet {
    Dense {
        encoder: Encoder,
        hidden: Linear,
        out: Linear,
    },
    SoftArgmax {
        net: UNet,
        grid_x: Tensor,
        grid_y: Tensor,
    },
}

/// All networks of one experiment plus the fixed maps they are chained with.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: NetConfig,
    pub topology: SkeletonTopology,
    pub raster: RasterOp,
    pub params: ParamStore,
    pub gamma: Gamma,
    phi: UNet,
    eta: EtaNet,
    psi: UNet,
    disc_encoder: Encoder,
    disc_head: Linear,
}

/// Every intermediate of one pass through the autoencoder.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// encoder output
    pub skeleton: Tensor,
    /// `(N, J, 2)` regressed joints
    pub pose: Tensor,
    /// rasterized regressed joints
    pub rendered: Tensor,
    /// decoder output
    pub image: Tensor,
}

impl ModelBundle {
    pub fn new(config: NetConfig, topology: SkeletonTopology, raster: RasterParams) -> Result<Self> {
        config.validate()?;
        raster.validate()?;
        if raster.resolution != config.image_resolution {
            return Err(Error::Config(vec![format!(
                "skeleton images are {:?}, images are {:?}",
                raster.resolution, config.image_resolution
            )]));
        }
        let (h, w) = config.image_resolution;
        let cs = raster.channels();
        let j = topology.joint_count();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();

        let phi = UNet::new(&mut store, &mut rng, PHI, 1, cs, &config.phi_channels)?;
        let phi_bias = store
            .get("phi.head.bias")
            .expect("registered above")
            .as_tensor()
            .affine(0.0, config.phi_output_bias as f64)?;
        store.get("phi.head.bias").unwrap().set(&phi_bias)?;

        let eta = match config.eta_head {
            EtaHead::Dense => {
                let encoder = Encoder::new(&mut store, &mut rng, "eta.enc", cs, &config.eta_channels)?;
                let k = config.eta_channels.len();
                let flat = config.eta_channels[k - 1] * (h >> k) * (w >> k);
                EtaNet::Dense {
                    encoder,
                    hidden: layers::linear(&mut store, &mut rng, "eta.fc0", flat, config.eta_hidden, 1.4)?,
                    out: layers::linear(&mut store, &mut rng, "eta.fc1", config.eta_hidden, 2 * j, 1.0)?,
                }
            }
            EtaHead::SoftArgmax => {
                let net = UNet::new(&mut store, &mut rng, "eta.net", cs, j, &config.eta_channels)?;
                let xs: Vec<f32> = (0..w).map(|x| ((x as f32 + 0.5) * 2.0 / w as f32) - 1.0).collect();
                let ys: Vec<f32> = (0..h).map(|y| ((y as f32 + 0.5) * 2.0 / h as f32) - 1.0).collect();
                let dev = &candle_core::Device::Cpu;
                EtaNet::SoftArgmax {
                    net,
                    grid_x: Tensor::from_vec(xs, (1, 1, 1, w), dev)?.broadcast_as((1, 1, h, w))?.reshape((1, 1, h * w))?,
                    grid_y: Tensor::from_vec(ys, (1, 1, h, 1), dev)?.broadcast_as((1, 1, h, w))?.reshape((1, 1, h * w))?,
                }
            }
        };

        let psi = UNet::new(&mut store, &mut rng, PSI, cs + 1, 1, &config.psi_channels)?;
        let disc_encoder = Encoder::new(&mut store, &mut rng, "disc.enc", cs, &config.disc_channels)?;
        let k = config.disc_channels.len();
        let flat = config.disc_channels[k - 1] * (h >> k) * (w >> k);
        let disc_head = layers::linear(&mut store, &mut rng, "disc.fc", flat, 1, 1.0)?;
        let gamma = Gamma::new(&config.gamma)?;
        Ok(Self {
            raster: RasterOp::new(raster, topology.clone()),
            config,
            topology,
            params: store,
            gamma,
            phi,
            eta,
            psi,
            disc_encoder,
            disc_head,
        })
    }

    pub fn raster_params(&self) -> &RasterParams {
        &self.raster.params
    }

    pub fn skeleton_channels(&self) -> usize {
        self.raster.params.channels()
    }

    fn check(&self, x: &Tensor, channels: usize, what: &str) -> Result<usize> {
        let (h, w) = self.config.image_resolution;
        match x.dims() {
            [n, c, hh, ww] if *c == channels && *hh == h && *ww == w => Ok(*n),
            d => Err(Error::Shape(format!(
                "{what} must be (N, {channels}, {h}, {w}), got {d:?}"
            ))),
        }
    }

    /// Image batch `(N, 1, H, W)` → skeleton images `(N, C, H, W)`.
    pub fn phi_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x, 1, "encoder input")?;
        Ok(candle_nn::ops::sigmoid(&self.phi.forward(x)?)?)
    }

    /// Skeleton images → `(N, J, 2)` coordinates in `[-1, 1]`.
    pub fn eta_forward(&self, s: &Tensor) -> Result<Tensor> {
        let n = self.check(s, self.skeleton_channels(), "regressor input")?;
        let j = self.topology.joint_count();
        Ok(match &self.eta {
            EtaNet::Dense {
                encoder,
                hidden,
                out,
            } => {
                let h = encoder.forward(s)?.flatten_from(1)?;
                let h = layers::lrelu(&hidden.forward(&h)?)?;
                out.forward(&h)?.tanh()?.reshape((n, j, 2))?
            }
            EtaNet::SoftArgmax {
                net,
                grid_x,
                grid_y,
            } => {
                let logits = net.forward(s)?.flatten_from(2)?;
                let p = candle_nn::ops::softmax_last_dim(&logits)?;
                let x = p.broadcast_mul(grid_x)?.sum_keepdim(D::Minus1)?;
                let y = p.broadcast_mul(grid_y)?.sum_keepdim(D::Minus1)?;
                Tensor::cat(&[x, y], 2)?
            }
        })
    }

    /// Skeleton images and auxiliary images → reconstructed images.
    pub fn psi_forward(&self, s: &Tensor, y: &Tensor) -> Result<Tensor> {
        let n = self.check(s, self.skeleton_channels(), "decoder skeleton input")?;
        let m = self.check(y, 1, "decoder auxiliary input")?;
        if n != m {
            return Err(Error::Shape(format!("decoder batch sizes differ: {n} vs {m}")));
        }
        let h = Tensor::cat(&[s, y], 1)?;
        Ok(candle_nn::ops::sigmoid(&self.psi.forward(&h)?)?)
    }

    /// Skeleton images → `(N,)` scores in `(0, 1)`.
    pub fn disc_forward(&self, s: &Tensor) -> Result<Tensor> {
        self.check(s, self.skeleton_channels(), "discriminator input")?;
        let h = self.disc_encoder.forward(s)?.flatten_from(1)?;
        Ok(candle_nn::ops::sigmoid(&self.disc_head.forward(&h)?)?.squeeze(1)?)
    }

    pub fn gamma_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x, 1, "feature extractor input")?;
        self.gamma.features(x)
    }

    /// `(N, J, 2)` coordinates → skeleton images.
    pub fn beta(&self, v: &Tensor) -> Result<Tensor> {
        Ok(self.raster.apply(v)?)
    }

    /// Image → skeleton image → pose → skeleton image → image.
    pub fn reconstruct(&self, x: &Tensor, y: &Tensor) -> Result<Reconstruction> {
        let skeleton = self.phi_forward(x)?;
        let pose = self.eta_forward(&skeleton)?;
        let rendered = self.beta(&pose)?;
        let image = self.psi_forward(&rendered, y)?;
        Ok(Reconstruction {
            skeleton,
            pose,
            rendered,
            image,
        })
    }

    /// Inference: regressor applied to the encoder's skeleton image.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Pose2D>> {
        let v = self.eta_forward(&self.phi_forward(x)?)?;
        tensor_to_poses(&v, &self.topology)
    }

    /// Hash of the named networks' parameters (all when empty).
    pub fn hash(&self, nets: &[&str]) -> Result<String> {
        self.params.hash(nets)
    }
}

/// `(N, J, 2)` tensor → poses.
pub fn tensor_to_poses(v: &Tensor, topology: &SkeletonTopology) -> Result<Vec<Pose2D>> {
    v.to_dtype(candle_core::DType::F64)?
        .to_vec3::<f64>()?
        .into_iter()
        .map(|p| Pose2D::new(topology, p.into_iter().map(|c| [c[0], c[1]]).collect()))
        .collect()
}

/// Poses → `(N, J, 2)` f32 tensor.
pub fn poses_to_tensor(poses: &[Pose2D]) -> Result<Tensor> {
    let j = poses.first().map_or(0, |p| p.coords.len());
    let flat: Vec<f32> = poses
        .iter()
        .flat_map(|p| p.coords.iter().flat_map(|c| [c[0] as f32, c[1] as f32]))
        .collect();
    Ok(Tensor::from_vec(flat, (poses.len(), j, 2), &candle_core::Device::Cpu)?)
}
