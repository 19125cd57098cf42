use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named trainable tensors. Names are dotted paths such as `phi.enc0.weight`;
/// the first segment identifies the owning network.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<Tensor> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::Shape(format!("parameter `{name}` registered twice")));
        }
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }

    /// Uniform(-b, b) with `b = gain * sqrt(3 / fan_in)`.
    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        self.insert(name, Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> Result<Tensor> {
        self.insert(name, Tensor::full(value, shape, &Device::Cpu)?)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Parameters owned by network `net` (name prefix `net.`).
    pub fn of(&self, net: &str) -> Vec<(&String, &Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| k.split('.').next() == Some(net))
            .collect()
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian f32 bytes of every
    /// parameter whose owner is in `nets` (all parameters when empty).
    pub fn hash(&self, nets: &[&str]) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            let owner = name.split('.').next().unwrap_or("");
            if !nets.is_empty() && !nets.contains(&owner) {
                continue;
            }
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in var.flatten_all()?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every parameter from a blob written by [`ParamStore::save`].
    /// Names and shapes must match exactly.
    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingWeights(path.into()));
        }
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        self.assign(&map, path)
    }

    pub fn assign(&self, map: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
        if map.len() != self.vars.len() {
            return Err(Error::Data(format!(
                "{}: {} tensors, expected {}",
                path.display(),
                map.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = map.get(name).ok_or_else(|| {
                Error::Data(format!("{}: missing tensor `{name}`", path.display()))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::Data(format!(
                    "{}: `{name}` has shape {:?}, expected {:?}",
                    path.display(),
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    /// Independent copies of the current values.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.uniform("a.w", &[4, 3], 3, 1.0, &mut rng).unwrap();
        s.constant("a.b", &[4], 0.5).unwrap();
        s.uniform("b.w", &[2, 2], 2, 1.0, &mut rng).unwrap();
        s
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(store(1).hash(&[]).unwrap(), store(1).hash(&[]).unwrap());
        assert_ne!(store(1).hash(&[]).unwrap(), store(2).hash(&[]).unwrap());
        assert_eq!(store(1).hash(&["b"]).unwrap(), store(1).hash(&["b"]).unwrap());
        assert_ne!(store(1).hash(&["a"]).unwrap(), store(1).hash(&["b"]).unwrap());
    }

    #[test]
    fn save_load_bitwise() {
        let a = store(3);
        let b = store(4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.safetensors");
        a.save(&p).unwrap();
        b.load(&p).unwrap();
        assert_eq!(a.hash(&[]).unwrap(), b.hash(&[]).unwrap());
        assert!(matches!(
            b.load(&dir.path().join("nope")),
            Err(Error::MissingWeights(_))
        ));
    }

    #[test]
    fn duplicate_rejected() {
        let mut s = store(0);
        assert!(s.constant("a.b", &[1], 0.0).is_err());
        assert_eq!(s.of("a").len(), 2);
    }
}
