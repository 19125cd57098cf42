//! Fixed perceptual feature extractor.

use std::path::{Path, PathBuf};

use candle_core::{Device, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv, Conv};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GammaMode {
    /// Seeded random convolutions, frozen.
    Random { channels: usize, seed: u64 },
    /// A VGG-style `features.<i>.weight/bias` safetensors file.
    Pretrained { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaConfig {
    #[serde(flatten)]
    pub mode: GammaMode,
    /// Number of convolution layers whose output is the feature map.
    pub depth: usize,
}

impl Default for GammaConfig {
    fn default() -> Self {
        Self {
            mode: GammaMode::Random {
                channels: 16,
                seed: 0x5eed,
            },
            depth: 3,
        }
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Conv(Conv),
    Pool,
}

#[derive(Debug, Clone)]
pub struct Gamma {
    stages: Vec<Stage>,
    store: ParamStore,
    in_channels: usize,
    mean: Option<Tensor>,
    std: Option<Tensor>,
}

impl Gamma {
    pub fn new(cfg: &GammaConfig) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::Config(vec!["gamma depth must be >= 1".into()]));
        }
        match &cfg.mode {
            GammaMode::Random { channels, seed } => Self::random(*channels, *seed, cfg.depth),
            GammaMode::Pretrained { path } => Self::pretrained(path, cfg.depth),
        }
    }

    fn random(channels: usize, seed: u64, depth: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        let mut c = 1;
        for k in 0..depth {
            let stride = if k == 0 { 1 } else { 2 };
            let w = channels << k.min(3);
            stages.push(Stage::Conv(conv(&mut store, &mut rng, &format!("gamma.conv{k}"), c, w, 3, stride)?));
            c = w;
        }
        Ok(Self {
            stages,
            store,
            in_channels: 1,
            mean: None,
            std: None,
        })
    }

    /// Loads convolutions `features.<i>` in index order. An index gap of 3
    /// between consecutive convolutions marks a 2×2 max-pool (conv, relu,
    /// pool); a gap of 2 is conv, relu.
    fn pretrained(path: &Path, depth: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingWeights(path.into()));
        }
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut idx: Vec<usize> = map
            .keys()
            .filter_map(|k| k.strip_prefix("features.")?.strip_suffix(".weight")?.parse().ok())
            .collect();
        idx.sort_unstable();
        if idx.len() < depth {
            return Err(Error::Data(format!(
                "{}: {} convolutions, depth {depth} requested",
                path.display(),
                idx.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        let mut in_channels = 0;
        for (n, &i) in idx.iter().take(depth).enumerate() {
            if n > 0 && i - idx[n - 1] >= 3 {
                stages.push(Stage::Pool);
            }
            let w = map[&format!("features.{i}.weight")].to_dtype(candle_core::DType::F32)?;
            let b = match map.get(&format!("features.{i}.bias")) {
                Some(b) => b.to_dtype(candle_core::DType::F32)?,
                None => Tensor::zeros(w.dims()[0], candle_core::DType::F32, &Device::Cpu)?,
            };
            if n == 0 {
                in_channels = w.dims()[1];
            }
            let w = store.insert(format!("gamma.features.{i}.weight"), w)?;
            let b = store.insert(format!("gamma.features.{i}.bias"), b)?;
            stages.push(Stage::Conv(Conv::new(w, b, 1)));
        }
        let (mean, std) = if in_channels == 3 {
            (
                Some(Tensor::new(&[0.485f32, 0.456, 0.406], &Device::Cpu)?.reshape((1, 3, 1, 1))?),
                Some(Tensor::new(&[0.229f32, 0.224, 0.225], &Device::Cpu)?.reshape((1, 3, 1, 1))?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            stages,
            store,
            in_channels,
            mean,
            std,
        })
    }

    /// Features of an `(N, C, H, W)` batch in `[0, 1]`. Single-channel
    /// inputs are replicated to the extractor's channel count.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        let mut h = if c == self.in_channels {
            x.clone()
        } else if c == 1 {
            x.repeat((1, self.in_channels, 1, 1))?
        } else {
            return Err(Error::Shape(format!(
                "feature extractor takes 1 or {} channels, got {c}",
                self.in_channels
            )));
        };
        if let (Some(m), Some(s)) = (&self.mean, &self.std) {
            h = h.broadcast_sub(m)?.broadcast_div(s)?;
        }
        for st in &self.stages {
            h = match st {
                Stage::Conv(c) => c.forward(&h)?.relu()?,
                Stage::Pool => h.max_pool2d(2)?,
            };
        }
        Ok(h)
    }

    pub fn hash(&self) -> Result<String> {
        self.store.hash(&[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn random_mode_is_deterministic_and_finite() {
        let g = Gamma::new(&GammaConfig::default()).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 1, 32, 32), &Device::Cpu).unwrap();
        let a = g.features(&x).unwrap();
        let b = Gamma::new(&GammaConfig::default()).unwrap().features(&x).unwrap();
        assert_eq!(a.dims(), &[2, 64, 8, 8]);
        let (a, b) = (a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pretrained_missing_file() {
        let cfg = GammaConfig {
            mode: GammaMode::Pretrained {
                path: "/nonexistent/vgg.safetensors".into(),
            },
            depth: 2,
        };
        assert!(matches!(Gamma::new(&cfg), Err(Error::MissingWeights(_))));
    }

    #[test]
    fn pretrained_layout_with_pool() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        let mut m = HashMap::new();
        let d = Device::Cpu;
        m.insert("features.0.weight".to_string(), Tensor::ones((4, 3, 3, 3), candle_core::DType::F32, &d).unwrap());
        m.insert("features.0.bias".to_string(), Tensor::zeros(4, candle_core::DType::F32, &d).unwrap());
        m.insert("features.2.weight".to_string(), Tensor::ones((4, 4, 3, 3), candle_core::DType::F32, &d).unwrap());
        m.insert("features.5.weight".to_string(), Tensor::ones((8, 4, 3, 3), candle_core::DType::F32, &d).unwrap());
        candle_core::safetensors::save(&m, &path).unwrap();
        let g = Gamma::new(&GammaConfig {
            mode: GammaMode::Pretrained { path },
            depth: 3,
        })
        .unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 1, 16, 16), &d).unwrap();
        assert_eq!(g.features(&x).unwrap().dims(), &[1, 8, 8, 8]);
    }
}
