use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nets::ParamStore;

/// Adam over a fixed subset of a [`ParamStore`], with inspectable state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, nets: &[&str], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let mut names = Vec::new();
        let mut m = Vec::new();
        for net in nets {
            for (name, var) in store.of(net) {
                names.push(name.clone());
                m.push(var.as_tensor().zeros_like()?);
            }
        }
        if names.is_empty() {
            return Err(Error::Shape(format!("no parameters for {nets:?}")));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            names,
            v: m.clone(),
            m,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// One update of every owned parameter. Parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, name) in self.names.iter().enumerate() {
            let var = store
                .get(name)
                .ok_or_else(|| Error::Shape(format!("optimizer parameter `{name}` vanished")))?;
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.clone(),
                None => var.as_tensor().zeros_like()?,
            };
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moment tensors keyed `<prefix>.m.<param>` / `<prefix>.v.<param>`.
    pub fn state(&self, prefix: &str) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (i, n) in self.names.iter().enumerate() {
            out.insert(format!("{prefix}.m.{n}"), self.m[i].clone());
            out.insert(format!("{prefix}.v.{n}"), self.v[i].clone());
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, Tensor>, t: u64) -> Result<()> {
        for (i, n) in self.names.iter().enumerate() {
            for (slot, kind) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                let key = format!("{prefix}.{kind}.{n}");
                let t = map
                    .get(&key)
                    .ok_or_else(|| Error::Data(format!("optimizer state lacks `{key}`")))?;
                if t.dims() != slot.dims() {
                    return Err(Error::Data(format!("optimizer state `{key}` has the wrong shape")));
                }
                *slot = t.clone();
            }
        }
        self.t = t;
        Ok(())
    }
}
