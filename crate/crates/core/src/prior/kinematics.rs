//! Forward kinematics over a [`SkeletonTopology`] and the semi-random gait
//! generator that animates it.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{JointLimits, Pose3D, SkeletonTopology};

type V3 = [f64; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
fn normalize(a: V3) -> V3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

/// Unit direction of a bone given its parent's direction and the bone's
/// azimuth/elevation relative to it.
pub(crate) fn bone_direction(parent: V3, azimuth: f64, elevation: f64) -> V3 {
    let mut up = [0.0, 0.0, 1.0];
    let mut u = add(up, scale(parent, -dot(up, parent)));
    if dot(u, u) < 1e-18 {
        up = [1.0, 0.0, 0.0];
        u = add(up, scale(parent, -dot(up, parent)));
    }
    let u = normalize(u);
    let left = cross(u, parent);
    let (ca, sa) = (azimuth.cos(), azimuth.sin());
    let (ce, se) = (elevation.cos(), elevation.sin());
    normalize(add(
        scale(add(scale(parent, ca), scale(left, sa)), ce),
        scale(u, se),
    ))
}

/// Per-bone joint angles, indexed like `SkeletonTopology::bones`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAngles {
    pub azimuth: Vec<f64>,
    pub elevation: Vec<f64>,
}

impl JointAngles {
    pub fn midpoints(limits: &JointLimits) -> Self {
        Self {
            azimuth: limits.azimuth.iter().map(|r| r.mid()).collect(),
            elevation: limits.elevation.iter().map(|r| r.mid()).collect(),
        }
    }

    pub fn within(&self, limits: &JointLimits) -> bool {
        self.azimuth
            .iter()
            .zip(&limits.azimuth)
            .chain(self.elevation.iter().zip(&limits.elevation))
            .all(|(a, r)| r.contains(*a))
    }
}

/// Root placement: position and heading (yaw about +z, radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootState {
    pub position: V3,
    pub heading: f64,
}

impl Default for RootState {
    fn default() -> Self {
        Self {
            position: [0.0, 0.0, 0.0],
            heading: 0.0,
        }
    }
}

/// Places every joint from root state, bone lengths and joint angles.
///
/// Children of the root measure their angles from the caudal axis (-x)
/// rotated by the heading.
pub fn forward_kinematics(
    topology: &SkeletonTopology,
    lengths: &[f64],
    root: RootState,
    angles: &JointAngles,
) -> Pose3D {
    let caudal = [-root.heading.cos(), -root.heading.sin(), 0.0];
    let mut coords = vec![[0.0; 3]; topology.joint_count()];
    let mut dirs = vec![[0.0; 3]; topology.bone_count()];
    coords[topology.root] = root.position;
    for &b in topology.fk_order() {
        let parent_dir = match topology.parent_bone(b) {
            Some(pb) => dirs[pb],
            None => caudal,
        };
        let d = bone_direction(parent_dir, angles.azimuth[b], angles.elevation[b]);
        dirs[b] = d;
        let bone = topology.bones[b];
        coords[bone.child] = add(coords[bone.parent], scale(d, lengths[b]));
    }
    Pose3D {
        coords,
        topology: topology.name.clone(),
    }
}

/// Recovers per-bone angles from a 3D pose (inverse of [`forward_kinematics`]
/// for a known heading). Used to audit emitted motion against limits.
pub fn joint_angles(topology: &SkeletonTopology, pose: &Pose3D, heading: f64) -> JointAngles {
    let caudal = [-heading.cos(), -heading.sin(), 0.0];
    let n = topology.bone_count();
    let mut dirs = vec![[0.0; 3]; n];
    let mut az = vec![0.0; n];
    let mut el = vec![0.0; n];
    for &b in topology.fk_order() {
        let bone = topology.bones[b];
        let (p, c) = (pose.coords[bone.parent], pose.coords[bone.child]);
        let d = normalize([c[0] - p[0], c[1] - p[1], c[2] - p[2]]);
        dirs[b] = d;
        let f = match topology.parent_bone(b) {
            Some(pb) => dirs[pb],
            None => caudal,
        };
        let mut up = [0.0, 0.0, 1.0];
        let mut u = add(up, scale(f, -dot(up, f)));
        if dot(u, u) < 1e-18 {
            up = [1.0, 0.0, 0.0];
            u = add(up, scale(f, -dot(up, f)));
        }
        let u = normalize(u);
        let l = cross(u, f);
        el[b] = dot(d, u).clamp(-1.0, 1.0).asin();
        az[b] = dot(d, l).atan2(dot(d, f));
    }
    JointAngles {
        azimuth: az,
        elevation: el,
    }
}

/// Canonical standing pose: spine along the x axis, every joint angle at
/// the midpoint of its limits.
pub fn sample_rest_pose(topology: &SkeletonTopology, bone_lengths: &[f64]) -> Result<Pose3D> {
    if bone_lengths.len() != topology.bone_count() {
        return Err(Error::Topology(format!(
            "{} bone lengths for {} bones",
            bone_lengths.len(),
            topology.bone_count()
        )));
    }
    if let Some(l) = bone_lengths.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::Topology(format!("bone length {l} is not positive")));
    }
    Ok(forward_kinematics(
        topology,
        bone_lengths,
        RootState::default(),
        &JointAngles::midpoints(&topology.limits),
    ))
}

/// Parameters of the semi-random gait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionParams {
    /// Gait cycles per frame.
    pub gait_frequency: f64,
    /// Fraction of each limit half-range swept by the gait sinusoid.
    pub gait_amplitude: f64,
    /// Stationary standard deviation of the angular noise, radians.
    pub noise_scale: f64,
    /// Correlation time of the angular noise, frames.
    pub noise_time_constant: f64,
    /// Gait phase per limb name, radians. Bones without a limb use 0.
    pub phase_offsets: BTreeMap<String, f64>,
    /// Scale of the root's random drift, model units per frame.
    pub body_speed: f64,
    pub seed: u64,
}

impl Default for MotionParams {
    fn default() -> Self {
        // Trotting gait: diagonal limb pairs move in phase.
        let phase_offsets = [("LF", 0.0), ("RH", 0.0), ("RF", PI), ("LH", PI)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self {
            gait_frequency: 0.08,
            gait_amplitude: 0.9,
            noise_scale: 0.15,
            noise_time_constant: 8.0,
            phase_offsets,
            body_speed: 0.02,
            seed: 0,
        }
    }
}

impl MotionParams {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.gait_frequency > 0.0 && self.gait_frequency.is_finite()) {
            errs.push(format!("gait_frequency must be > 0, got {}", self.gait_frequency));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            errs.push(format!("noise_scale must be >= 0, got {}", self.noise_scale));
        }
        if !(self.noise_time_constant > 0.0) {
            errs.push("noise_time_constant must be > 0".into());
        }
        if !(self.gait_amplitude >= 0.0) {
            errs.push("gait_amplitude must be >= 0".into());
        }
        if !(self.body_speed >= 0.0) {
            errs.push("body_speed must be >= 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// One animated frame: the pose plus the state that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pose: Pose3D,
    pub angles: JointAngles,
    pub root: RootState,
}

/// Animates `rest` for `frames` frames. Each bone's angles are the clamped
/// sum of a sinusoidal gait term and an Ornstein-Uhlenbeck noise term; the
/// root drifts under a damped random walk. Bone lengths are taken from
/// `rest` and preserved exactly by construction.
pub fn animate_sequence(
    topology: &SkeletonTopology,
    rest: &Pose3D,
    limits: &JointLimits,
    params: &MotionParams,
    frames: usize,
) -> Result<Vec<Frame>> {
    params.validate()?;
    limits.validate(topology)?;
    if frames == 0 {
        return Err(Error::Config(vec!["frame count must be >= 1".into()]));
    }
    let lengths = rest.bone_lengths(topology);
    let n = topology.bone_count();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let phase0 = rng.random::<f64>() * 2.0 * PI;
    let phase: Vec<f64> = topology
        .limbs
        .iter()
        .map(|l| {
            l.as_ref()
                .and_then(|l| params.phase_offsets.get(l))
                .copied()
                .unwrap_or(0.0)
                + phase0
        })
        .collect();

    let rho = (-1.0 / params.noise_time_constant).exp();
    let kick = (1.0 - rho * rho).sqrt();
    let mut gauss = || rng.sample::<f64, _>(StandardNormal);
    let mut noise_az: Vec<f64> = (0..n).map(|_| params.noise_scale * gauss()).collect();
    let mut noise_el: Vec<f64> = (0..n).map(|_| params.noise_scale * gauss()).collect();
    let mut heading_noise = 0.3 * params.noise_scale * gauss();
    let mut velocity = [params.body_speed * gauss(), params.body_speed * gauss()];
    let mut offset = [0.0f64; 2];
    let start = rest.coords[topology.root];

    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let w = 2.0 * PI * params.gait_frequency * t as f64;
        let mut angles = JointAngles {
            azimuth: vec![0.0; n],
            elevation: vec![0.0; n],
        };
        for b in 0..n {
            let (ra, re) = (limits.azimuth[b], limits.elevation[b]);
            let gait_az = ra.mid() + params.gait_amplitude * ra.half_width() * (w + phase[b]).sin();
            let gait_el = re.mid() + params.gait_amplitude * re.half_width() * (w + phase[b]).cos();
            angles.azimuth[b] = ra.clamp(gait_az + noise_az[b]);
            angles.elevation[b] = re.clamp(gait_el + noise_el[b]);
        }
        let root = RootState {
            position: [start[0] + offset[0], start[1] + offset[1], start[2]],
            heading: heading_noise,
        };
        out.push(Frame {
            pose: forward_kinematics(topology, &lengths, root, &angles),
            angles,
            root,
        });

        if params.noise_scale > 0.0 {
            for v in noise_az.iter_mut().chain(noise_el.iter_mut()) {
                *v = rho * *v + kick * params.noise_scale * gauss();
            }
            heading_noise = rho * heading_noise + kick * 0.3 * params.noise_scale * gauss();
        }
        if params.body_speed > 0.0 {
            for k in 0..2 {
                velocity[k] = rho * velocity[k] + kick * params.body_speed * gauss();
                // Spring back toward the start keeps the animal in view.
                offset[k] += velocity[k] - 0.05 * offset[k];
            }
        }
    }
    Ok(out)
}
