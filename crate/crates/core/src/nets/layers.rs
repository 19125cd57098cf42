use candle_core::{Module, Tensor};
use candle_nn::Linear;
use rand_chacha::ChaCha8Rng;

use super::conv::conv2d;
use super::params::ParamStore;
use crate::error::Result;

pub const LEAK: f64 = 0.2;
const LEAKY_GAIN: f64 = 1.4;

/// Square-kernel convolution with bias and `kernel / 2` zero padding.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Conv {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize) -> Self {
        Self { weight, bias, stride }
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let k = self.weight.dims()[2];
        let y = conv2d(x, &self.weight, self.stride, k / 2).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

pub fn conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
) -> Result<Conv> {
    let fan_in = cin * kernel * kernel;
    let w = store.uniform(format!("{name}.weight"), &[cout, cin, kernel, kernel], fan_in, LEAKY_GAIN, rng)?;
    let b = store.constant(format!("{name}.bias"), &[cout], 0.0)?;
    Ok(Conv::new(w, b, stride))
}

pub fn linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> Result<Linear> {
    let w = store.uniform(format!("{name}.weight"), &[fan_out, fan_in], fan_in, gain, rng)?;
    let b = store.constant(format!("{name}.bias"), &[fan_out], 0.0)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn lrelu(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::leaky_relu(x, LEAK)
}

/// Encoder-decoder with skip connections. Stage `k` runs at `1/2^k` of the
/// input resolution with `channels[k]` features; the output keeps the
/// input resolution and is returned as logits. The decoder stage that
/// returns to full resolution mixes with a 1×1 kernel.
#[derive(Debug, Clone)]
pub struct UNet {
    stem: Conv,
    down: Vec<Conv>,
    bottleneck: Conv,
    up: Vec<Conv>,
    head: Conv,
}

impl UNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        channels: &[usize],
    ) -> Result<Self> {
        let stem = conv(store, rng, &format!("{prefix}.stem"), cin, channels[0], 3, 1)?;
        let mut down = Vec::new();
        for (k, w) in channels.windows(2).enumerate() {
            down.push(conv(store, rng, &format!("{prefix}.down{k}"), w[0], w[1], 3, 2)?);
        }
        let last = *channels.last().expect("non-empty channels");
        let bottleneck = conv(store, rng, &format!("{prefix}.mid"), last, last, 3, 1)?;
        let mut up = Vec::new();
        for (k, w) in channels.windows(2).enumerate().rev() {
            let kernel = if k == 0 { 1 } else { 3 };
            up.push(conv(store, rng, &format!("{prefix}.up{k}"), w[1] + w[0], w[0], kernel, 1)?);
        }
        let head = conv(store, rng, &format!("{prefix}.head"), channels[0], cout, 3, 1)?;
        Ok(Self {
            stem,
            down,
            bottleneck,
            up,
            head,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut skips = vec![lrelu(&self.stem.forward(x)?)?];
        for d in &self.down {
            let h = lrelu(&d.forward(skips.last().unwrap())?)?;
            skips.push(h);
        }
        let mut h = lrelu(&self.bottleneck.forward(&skips.pop().unwrap())?)?;
        for u in &self.up {
            let skip = skips.pop().unwrap();
            let (_, _, sh, sw) = skip.dims4()?;
            let h2 = h.upsample_nearest2d(sh, sw)?;
            h = lrelu(&u.forward(&Tensor::cat(&[&h2, &skip], 1)?)?)?;
        }
        self.head.forward(&h)
    }
}

/// Strided convolutions halving resolution at every stage.
#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<Conv>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        channels: &[usize],
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c = cin;
        for (k, &w) in channels.iter().enumerate() {
            layers.push(conv(store, rng, &format!("{prefix}.conv{k}"), c, w, 3, 2)?);
            c = w;
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = lrelu(&l.forward(&h)?)?;
        }
        Ok(h)
    }
}
