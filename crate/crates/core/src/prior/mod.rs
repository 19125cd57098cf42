//! Synthetic empirical pose prior: a procedural skeleton animated with
//! constrained semi-random motion, projected to 2D.
//!
//! The same generator also renders paired capsule images for fully
//! synthetic experiments. Those pairings are written for evaluation only;
//! the training path never reads them.

mod camera;
mod kinematics;
mod render;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use camera::{project, CameraModel, Projection};
pub use kinematics::{
    animate_sequence, forward_kinematics, joint_angles, sample_rest_pose, Frame, JointAngles,
    MotionParams, RootState,
};
pub use render::{render_synthetic_image, BACKGROUND};

use crate::error::{Error, IoContext, Result};
use crate::skeleton::{JointLimits, Pose2D, SkeletonTopology};

/// Number of poses in the default prior.
pub const DEFAULT_PRIOR_SIZE: usize = 15_408;
pub const DEFAULT_SEQUENCE_LENGTH: usize = 500;

/// Everything needed to regenerate a prior bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMeta {
    pub topology: String,
    pub count: usize,
    pub sequence_length: usize,
    pub motion: MotionParams,
    pub camera: CameraModel,
    pub limits: JointLimits,
}

impl PriorMeta {
    pub fn new(
        topology: &SkeletonTopology,
        limits: &JointLimits,
        motion: &MotionParams,
        camera: &CameraModel,
        count: usize,
    ) -> Self {
        Self {
            topology: topology.name.clone(),
            count,
            sequence_length: DEFAULT_SEQUENCE_LENGTH,
            motion: motion.clone(),
            camera: camera.clone(),
            limits: limits.clone(),
        }
    }

    pub fn validate(&self, topology: &SkeletonTopology) -> Result<()> {
        if self.topology != topology.name {
            return Err(Error::Config(vec![format!(
                "prior was generated for `{}`, not `{}`",
                self.topology, topology.name
            )]));
        }
        let mut errs = Vec::new();
        if self.count == 0 {
            errs.push("prior count must be >= 1".to_string());
        }
        if self.sequence_length == 0 {
            errs.push("sequence_length must be >= 1".to_string());
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        self.motion.validate()?;
        self.camera.validate()?;
        self.limits.validate(topology)
    }
}

/// The unpaired prior `{v̂_j}` with its generator metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorDataset {
    pub poses: Vec<Pose2D>,
    pub meta: PriorMeta,
}

impl PriorDataset {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Animated 3D frames covering `meta.count` samples. Sequence `k` uses
/// seed `motion.seed + k`.
pub fn generate_frames(topology: &SkeletonTopology, meta: &PriorMeta) -> Result<Vec<(usize, Frame)>> {
    meta.validate(topology)?;
    let rest = sample_rest_pose(topology, &topology.lengths)?;
    let mut out = Vec::with_capacity(meta.count);
    let mut seq = 0usize;
    while out.len() < meta.count {
        let params = MotionParams {
            seed: meta.motion.seed.wrapping_add(seq as u64),
            ..meta.motion.clone()
        };
        let n = meta.sequence_length.min(meta.count - out.len());
        for f in animate_sequence(topology, &rest, &meta.limits, &params, n)? {
            out.push((seq, f));
        }
        seq += 1;
    }
    Ok(out)
}

/// Generates the prior described by `meta`.
pub fn generate_prior_from_meta(topology: &SkeletonTopology, meta: &PriorMeta) -> Result<PriorDataset> {
    let poses = generate_frames(topology, meta)?
        .iter()
        .map(|(_, f)| project(topology, &f.pose, &meta.camera))
        .collect::<Result<Vec<_>>>()?;
    Ok(PriorDataset {
        poses,
        meta: meta.clone(),
    })
}

pub fn generate_prior(
    topology: &SkeletonTopology,
    limits: &JointLimits,
    params: &MotionParams,
    cam: &CameraModel,
    count: usize,
) -> Result<PriorDataset> {
    generate_prior_from_meta(topology, &PriorMeta::new(topology, limits, params, cam, count))
}

pub const POSES_FILE: &str = "poses.csv";
pub const META_FILE: &str = "meta";

/// `frame,<joint>_u,<joint>_v,...` with one row per pose.
pub fn write_poses_csv(path: &Path, topology: &SkeletonTopology, poses: &[Pose2D]) -> Result<()> {
    let mut out = String::from("frame");
    for j in &topology.joints {
        write!(out, ",{j}_u,{j}_v").unwrap();
    }
    out.push('\n');
    for (i, p) in poses.iter().enumerate() {
        write!(out, "{i}").unwrap();
        for c in &p.coords {
            write!(out, ",{},{}", c[0], c[1]).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).at(path)
}

pub fn read_poses_csv(path: &Path, topology: &SkeletonTopology) -> Result<Vec<Pose2D>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Data(format!("{}: {e}", path.display())),
        _ => e.into(),
    })?;
    let header = rdr.headers()?.clone();
    let mut expected = vec!["frame".to_string()];
    for j in &topology.joints {
        expected.push(format!("{j}_u"));
        expected.push(format!("{j}_v"));
    }
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Row {
            path: path.into(),
            row: 1,
            reason: format!("header does not match topology `{}`", topology.name),
        });
    }
    let mut poses = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Row {
                path: path.into(),
                row,
                reason: e.to_string(),
            })?;
        if vals.iter().any(|v| !(v.abs() <= 1.0)) {
            return Err(Error::Row {
                path: path.into(),
                row,
                reason: "coordinate outside [-1, 1]".into(),
            });
        }
        poses.push(Pose2D::from_flat(topology, &vals).map_err(|e| Error::Row {
            path: path.into(),
            row,
            reason: e.to_string(),
        })?);
    }
    Ok(poses)
}

impl PriorDataset {
    /// Writes `poses.csv` and `meta` into `dir` (created if missing).
    pub fn save(&self, dir: &Path, topology: &SkeletonTopology) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        write_poses_csv(&dir.join(POSES_FILE), topology, &self.poses)?;
        let meta = toml::to_string_pretty(&self.meta)?;
        std::fs::write(dir.join(META_FILE), meta).at(&dir.join(META_FILE))
    }

    pub fn load(dir: &Path, topology: &SkeletonTopology) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: PriorMeta =
            toml::from_str(&std::fs::read_to_string(&meta_path).at(&meta_path)?)?;
        if meta.topology != topology.name {
            return Err(Error::Data(format!(
                "{}: prior topology `{}` does not match `{}`",
                dir.display(),
                meta.topology,
                topology.name
            )));
        }
        let poses = read_poses_csv(&dir.join(POSES_FILE), topology)?;
        Ok(Self { poses, meta })
    }
}
