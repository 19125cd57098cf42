//! The fixed, differentiable pose → skeleton-image map.
//!
//! Each bone contributes a Gaussian of the point-to-segment distance,
//! `g_b(p) = exp(-d(p, segment_b)² / 2σ²)`, in pixel units. Bones carry a
//! colour (a weight per channel) and channel values compose the weighted
//! bone responses with either a max or a probabilistic OR,
//! `1 - Π_b (1 - w_b g_b)`. Both keep every pixel in `[0, 1]` whatever the
//! bone count.
//!
//! Pixel `(i, j)` has its centre at `(j + 0.5, i + 0.5)` and a pose
//! coordinate `u ∈ [-1, 1]` maps to `x = (u + 1) W / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Pose2D, SkeletonTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// `max w g`: piecewise smooth, subgradient at ties.
    #[default]
    Max,
    /// `1 - Π (1 - w g)`: smooth everywhere.
    SoftOr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Mono,
    /// Bones grouped by their topology group, one colour per group.
    #[default]
    PerBoneGroup,
}

/// Channel colour for a bone group in [`ChannelMode::PerBoneGroup`].
/// Spine and tail share red, the head mixes red and green.
pub fn group_color(group: &str, fallback: usize) -> [f64; 3] {
    match group {
        "spine" | "body" | "tail" => [1.0, 0.0, 0.0],
        "forelimb" => [0.0, 1.0, 0.0],
        "hindlimb" => [0.0, 0.0, 1.0],
        "head" => [1.0, 1.0, 0.0],
        _ => {
            let mut c = [0.0; 3];
            c[fallback % 3] = 1.0;
            c
        }
    }
}

/// Values at or beyond `CUTOFF_SIGMAS · σ` from a bone are below 3e-11 and
/// are skipped by the fast rasterizer.
pub const CUTOFF_SIGMAS: f64 = 7.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterParams {
    /// Gaussian width in pixels.
    pub sigma: f64,
    /// (height, width)
    pub resolution: (usize, usize),
    pub channel_mode: ChannelMode,
    pub composition: Composition,
    /// Per-bone channel weights, `channels` entries each.
    pub bone_colors: Vec<Vec<f64>>,
}

impl RasterParams {
    pub fn new(
        topology: &SkeletonTopology,
        resolution: (usize, usize),
        sigma: f64,
        channel_mode: ChannelMode,
        composition: Composition,
    ) -> Result<Self> {
        let names = topology.group_names();
        let bone_colors = topology
            .groups
            .iter()
            .map(|g| match channel_mode {
                ChannelMode::Mono => vec![1.0],
                ChannelMode::PerBoneGroup => {
                    let k = names.iter().position(|n| n == g).unwrap_or(0);
                    group_color(g, k).to_vec()
                }
            })
            .collect();
        let p = Self {
            sigma,
            resolution,
            channel_mode,
            composition,
            bone_colors,
        };
        p.validate()?;
        Ok(p)
    }

    /// Default parameters for a topology: σ = 1.5 px at 128×128, scaled
    /// linearly with resolution.
    pub fn default_for(topology: &SkeletonTopology, resolution: (usize, usize)) -> Self {
        let sigma = 1.5 * resolution.1 as f64 / 128.0;
        Self::new(
            topology,
            resolution,
            sigma,
            ChannelMode::PerBoneGroup,
            Composition::Max,
        )
        .expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            errs.push(format!("sigma must be > 0, got {}", self.sigma));
        }
        if self.resolution.0 < 8 || self.resolution.1 < 8 {
            errs.push(format!(
                "raster resolution must be at least 8x8, got {}x{}",
                self.resolution.0, self.resolution.1
            ));
        }
        let c = self.channels();
        if self.bone_colors.iter().any(|w| w.len() != c) {
            errs.push("bone colours must all have the same channel count".into());
        }
        if self
            .bone_colors
            .iter()
            .flatten()
            .any(|w| !(0.0..=1.0).contains(w))
        {
            errs.push("bone colour weights must lie in [0, 1]".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn channels(&self) -> usize {
        self.bone_colors.first().map_or(1, Vec::len)
    }

    pub fn height(&self) -> usize {
        self.resolution.0
    }

    pub fn width(&self) -> usize {
        self.resolution.1
    }

    /// Elements in one skeleton image (C·H·W).
    pub fn image_len(&self) -> usize {
        self.channels() * self.height() * self.width()
    }

    fn check(&self, topology: &SkeletonTopology, joints: usize) -> Result<()> {
        if self.bone_colors.len() != topology.bone_count() {
            return Err(Error::Raster(format!(
                "raster params cover {} bones, topology `{}` has {}",
                self.bone_colors.len(),
                topology.name,
                topology.bone_count()
            )));
        }
        if joints != topology.joint_count() {
            return Err(Error::Raster(format!(
                "pose has {joints} joints, topology `{}` has {}",
                topology.name,
                topology.joint_count()
            )));
        }
        Ok(())
    }

    /// Normalized coordinates → pixel coordinates.
    pub fn to_pixels(&self, u: f64, v: f64) -> [f64; 2] {
        [
            (u + 1.0) * 0.5 * self.width() as f64,
            (v + 1.0) * 0.5 * self.height() as f64,
        ]
    }
}

/// A rasterized skeleton, channel-major (`C × H × W`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonImage {
    pub pixels: Vec<f64>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl SkeletonImage {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// RGB preview (mono images are replicated to grey).
    pub fn to_rgb(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let ch = |c: usize| {
                let c = c.min(self.channels - 1);
                (self.at(c, y as usize, x as usize) * 255.0).round() as u8
            };
            image::Rgb([ch(0), ch(1), ch(2)])
        })
    }
}

/// Euclidean distance from `p` to segment `ab`.
pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    segment_foot(p, a, b).0.sqrt()
}

/// Squared distance from `p` to segment `ab`, the segment parameter of the
/// nearest point, and `p - nearest`.
#[inline]
fn segment_foot(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64, [f64; 2]) {
    let e = [b[0] - a[0], b[1] - a[1]];
    let ee = e[0] * e[0] + e[1] * e[1];
    let pa = [p[0] - a[0], p[1] - a[1]];
    let t = if ee > 0.0 {
        ((pa[0] * e[0] + pa[1] * e[1]) / ee).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let r = [pa[0] - t * e[0], pa[1] - t * e[1]];
    (r[0] * r[0] + r[1] * r[1], t, r)
}

/// `1 - w g` with `g = exp(-x)`, accurate when `w g` is close to 1.
#[inline]
fn complement(w: f64, x: f64, g: f64) -> f64 {
    if w == 1.0 {
        -(-x).exp_m1()
    } else {
        1.0 - w * g
    }
}

/// Pixel window of a bone after cutoff, clipped to the image.
fn bone_window(params: &RasterParams, a: [f64; 2], b: [f64; 2]) -> (usize, usize, usize, usize) {
    let r = CUTOFF_SIGMAS * params.sigma;
    let (w, h) = (params.width() as f64, params.height() as f64);
    let x0 = (a[0].min(b[0]) - r - 0.5).floor().clamp(0.0, w) as usize;
    let x1 = (a[0].max(b[0]) + r + 0.5).ceil().clamp(0.0, w) as usize;
    let y0 = (a[1].min(b[1]) - r - 0.5).floor().clamp(0.0, h) as usize;
    let y1 = (a[1].max(b[1]) + r + 0.5).ceil().clamp(0.0, h) as usize;
    (x0, x1, y0, y1)
}

/// Per-pixel composition state shared by the forward and backward passes.
struct Composed {
    /// Max: best weighted response; SoftOr: product of non-saturated complements.
    value: Vec<f64>,
    /// Max: index of the winning bone; SoftOr: number of saturated factors.
    tag: Vec<usize>,
}

const SATURATED: f64 = 1e-300;

fn compose(params: &RasterParams, topology: &SkeletonTopology, px: &[[f64; 2]]) -> Composed {
    let (c_n, h, w) = (params.channels(), params.height(), params.width());
    let n = c_n * h * w;
    let mut st = match params.composition {
        Composition::Max => Composed {
            value: vec![0.0; n],
            tag: vec![usize::MAX; n],
        },
        Composition::SoftOr => Composed {
            value: vec![1.0; n],
            tag: vec![0; n],
        },
    };
    let inv = 1.0 / (2.0 * params.sigma * params.sigma);
    let cut2 = (CUTOFF_SIGMAS * params.sigma).powi(2);
    for (bi, bone) in topology.bones.iter().enumerate() {
        let (a, b) = (px[bone.parent], px[bone.child]);
        let (x0, x1, y0, y1) = bone_window(params, a, b);
        let color = &params.bone_colors[bi];
        for y in y0..y1 {
            for x in x0..x1 {
                let (d2, _, _) = segment_foot([x as f64 + 0.5, y as f64 + 0.5], a, b);
                if d2 >= cut2 {
                    continue;
                }
                let arg = d2 * inv;
                let g = (-arg).exp();
                for (c, &wc) in color.iter().enumerate() {
                    if wc == 0.0 {
                        continue;
                    }
                    let i = (c * h + y) * w + x;
                    match params.composition {
                        Composition::Max => {
                            let v = wc * g;
                            if v > st.value[i] {
                                st.value[i] = v;
                                st.tag[i] = bi;
                            }
                        }
                        Composition::SoftOr => {
                            let f = complement(wc, arg, g);
                            if f < SATURATED {
                                st.tag[i] += 1;
                            } else {
                                st.value[i] *= f;
                            }
                        }
                    }
                }
            }
        }
    }
    st
}

fn pose_pixels(params: &RasterParams, coords: &[[f64; 2]]) -> Vec<[f64; 2]> {
    coords.iter().map(|c| params.to_pixels(c[0], c[1])).collect()
}

/// Rasterizes normalized joint coordinates into `out` (`C·H·W`).
pub fn rasterize_coords(
    params: &RasterParams,
    topology: &SkeletonTopology,
    coords: &[[f64; 2]],
    out: &mut [f64],
) -> Result<()> {
    params.check(topology, coords.len())?;
    if out.len() != params.image_len() {
        return Err(Error::Shape(format!(
            "output buffer has {} elements, expected {}",
            out.len(),
            params.image_len()
        )));
    }
    let st = compose(params, topology, &pose_pixels(params, coords));
    match params.composition {
        Composition::Max => out.copy_from_slice(&st.value),
        Composition::SoftOr => {
            for ((o, &p), &k) in out.iter_mut().zip(&st.value).zip(&st.tag) {
                *o = if k > 0 { 1.0 } else { 1.0 - p };
            }
        }
    }
    Ok(())
}

/// Gradient of `⟨rasterize(coords), upstream⟩` with respect to every
/// normalized joint coordinate.
pub fn gradient_coords(
    params: &RasterParams,
    topology: &SkeletonTopology,
    coords: &[[f64; 2]],
    upstream: &[f64],
) -> Result<Vec<[f64; 2]>> {
    params.check(topology, coords.len())?;
    if upstream.len() != params.image_len() {
        return Err(Error::Shape(format!(
            "upstream has {} elements, expected {}",
            upstream.len(),
            params.image_len()
        )));
    }
    let px = pose_pixels(params, coords);
    let st = compose(params, topology, &px);
    let (h, w) = (params.height(), params.width());
    let inv = 1.0 / (2.0 * params.sigma * params.sigma);
    let cut2 = (CUTOFF_SIGMAS * params.sigma).powi(2);
    let mut grad_px = vec![[0.0f64; 2]; coords.len()];
    for (bi, bone) in topology.bones.iter().enumerate() {
        let (a, b) = (px[bone.parent], px[bone.child]);
        let (x0, x1, y0, y1) = bone_window(params, a, b);
        let color = &params.bone_colors[bi];
        let (mut ga, mut gb) = ([0.0f64; 2], [0.0f64; 2]);
        for y in y0..y1 {
            for x in x0..x1 {
                let (d2, t, r) = segment_foot([x as f64 + 0.5, y as f64 + 0.5], a, b);
                if d2 >= cut2 {
                    continue;
                }
                let arg = d2 * inv;
                let g = (-arg).exp();
                // d(value)/d(g_b), summed over channels with upstream weights.
                let mut dv_dg = 0.0;
                for (c, &wc) in color.iter().enumerate() {
                    if wc == 0.0 {
                        continue;
                    }
                    let i = (c * h + y) * w + x;
                    let up = upstream[i];
                    if up == 0.0 {
                        continue;
                    }
                    let local = match params.composition {
                        Composition::Max => {
                            if st.tag[i] == bi {
                                wc
                            } else {
                                0.0
                            }
                        }
                        Composition::SoftOr => {
                            let f = complement(wc, arg, g);
                            let others = if f < SATURATED {
                                if st.tag[i] == 1 {
                                    st.value[i]
                                } else {
                                    0.0
                                }
                            } else if st.tag[i] > 0 {
                                0.0
                            } else {
                                st.value[i] / f
                            };
                            wc * others
                        }
                    };
                    dv_dg += up * local;
                }
                if dv_dg == 0.0 {
                    continue;
                }
                // dg/d(d²) = -g / 2σ²; d(d²)/da = -2(1-t) r, d(d²)/db = -2t r.
                let k = dv_dg * g * inv * 2.0;
                ga[0] += k * (1.0 - t) * r[0];
                ga[1] += k * (1.0 - t) * r[1];
                gb[0] += k * t * r[0];
                gb[1] += k * t * r[1];
            }
        }
        for i in 0..2 {
            grad_px[bone.parent][i] += ga[i];
            grad_px[bone.child][i] += gb[i];
        }
    }
    let (sx, sy) = (0.5 * w as f64, 0.5 * h as f64);
    Ok(grad_px.into_iter().map(|g| [g[0] * sx, g[1] * sy]).collect())
}

/// β: rasterizes one pose.
pub fn rasterize(
    pose: &Pose2D,
    topology: &SkeletonTopology,
    params: &RasterParams,
) -> Result<SkeletonImage> {
    if pose.topology != topology.name {
        return Err(Error::Raster(format!(
            "pose belongs to `{}`, not `{}`",
            pose.topology, topology.name
        )));
    }
    let mut pixels = vec![0.0; params.image_len()];
    rasterize_coords(params, topology, &pose.coords, &mut pixels)?;
    Ok(SkeletonImage {
        pixels,
        channels: params.channels(),
        height: params.height(),
        width: params.width(),
    })
}

pub fn rasterize_batch(
    poses: &[Pose2D],
    topology: &SkeletonTopology,
    params: &RasterParams,
) -> Result<Vec<SkeletonImage>> {
    poses.iter().map(|p| rasterize(p, topology, params)).collect()
}

/// Per-joint `(du, dv)` gradient of `⟨β(pose), upstream⟩`.
pub fn beta_gradient(
    pose: &Pose2D,
    topology: &SkeletonTopology,
    params: &RasterParams,
    upstream: &[f64],
) -> Result<Vec<[f64; 2]>> {
    gradient_coords(params, topology, &pose.coords, upstream)
}

/// Dense reference rasterizer: every pixel against every bone, no cutoff.
/// Slow; exists to check the fast path.
pub fn rasterize_reference(
    pose: &Pose2D,
    topology: &SkeletonTopology,
    params: &RasterParams,
) -> Result<SkeletonImage> {
    params.check(topology, pose.coords.len())?;
    let (c_n, h, w) = (params.channels(), params.height(), params.width());
    let px = pose_pixels(params, &pose.coords);
    let mut pixels = vec![0.0; c_n * h * w];
    for c in 0..c_n {
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let mut max = 0.0f64;
                let mut prod = 1.0f64;
                for (bi, bone) in topology.bones.iter().enumerate() {
                    let d = point_segment_distance(p, px[bone.parent], px[bone.child]);
                    let v = params.bone_colors[bi][c]
                        * (-d * d / (2.0 * params.sigma * params.sigma)).exp();
                    max = max.max(v);
                    prod *= 1.0 - v;
                }
                pixels[(c * h + y) * w + x] = match params.composition {
                    Composition::Max => max,
                    Composition::SoftOr => 1.0 - prod,
                };
            }
        }
    }
    Ok(SkeletonImage {
        pixels,
        channels: c_n,
        height: h,
        width: w,
    })
}
