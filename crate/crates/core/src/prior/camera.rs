use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Pose2D, Pose3D, SkeletonTopology};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projection {
    Orthographic,
    /// `focal` in model units; image-plane coordinates are `focal * x / z`.
    Pinhole { focal: f64 },
}

/// Camera extrinsics plus a view window that normalizes image-plane
/// coordinates into `[-1, 1]²`.
///
/// World → camera is `p_c = R p_w + t`; the camera looks along `+z_c` with
/// `x_c` to the image right and `y_c` down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub projection: Projection,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    /// Half width and half height of the view window on the image plane.
    pub half_extent: [f64; 2],
}

impl CameraModel {
    /// Orthographic camera under the floor looking up (+z), centred below
    /// `center`. Image x follows world x and image y follows world y.
    pub fn ventral(center: [f64; 2], half_extent: [f64; 2], distance: f64) -> Self {
        Self {
            projection: Projection::Orthographic,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [-center[0], -center[1], distance],
            half_extent,
        }
    }

    /// Orthographic side view from the animal's right (looking along +y),
    /// image y pointing down world z.
    pub fn lateral(center: [f64; 2], half_extent: [f64; 2], distance: f64) -> Self {
        Self {
            projection: Projection::Orthographic,
            rotation: [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
            translation: [-center[0], center[1], distance],
            half_extent,
        }
    }

    /// Default ventral view framing the mouse18 skeleton.
    pub fn mouse_ventral() -> Self {
        Self::ventral([-2.1, 0.0], [3.2, 3.2], 10.0)
    }

    /// Default lateral view framing the horse skeleton.
    pub fn horse_lateral() -> Self {
        Self::lateral([-2.0, -0.5], [3.0, 3.0], 10.0)
    }

    /// Lateral framing for `horse`, ventral for everything else.
    pub fn default_for(topology: &SkeletonTopology) -> Self {
        match topology.name.as_str() {
            "horse" => Self::horse_lateral(),
            _ => Self::mouse_ventral(),
        }
    }

    pub fn with_projection(mut self, projection: Projection) -> Self {
        self.projection = projection;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-9 {
                    return Err(Error::Config(vec![format!(
                        "camera rotation is not orthonormal (row {i}·row {j} = {d})"
                    )]));
                }
            }
        }
        if !(self.half_extent[0] > 0.0 && self.half_extent[1] > 0.0) {
            return Err(Error::Config(vec!["camera half_extent must be positive".into()]));
        }
        if let Projection::Pinhole { focal } = self.projection {
            if !(focal > 0.0) {
                return Err(Error::Config(vec!["pinhole focal must be positive".into()]));
            }
        }
        Ok(())
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Image-plane coordinates before normalization, or `None` when the
    /// point is not strictly in front of a pinhole camera.
    pub fn project_plane(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let c = self.to_camera(p);
        match self.projection {
            Projection::Orthographic => Some([c[0], c[1]]),
            Projection::Pinhole { focal } => {
                (c[2] > 1e-9).then(|| [focal * c[0] / c[2], focal * c[1] / c[2]])
            }
        }
    }

    /// Image-plane length of one model unit at `p`; used to size rendered
    /// capsules.
    pub fn plane_scale_at(&self, p: [f64; 3]) -> f64 {
        match self.projection {
            Projection::Orthographic => 1.0,
            Projection::Pinhole { focal } => focal / self.to_camera(p)[2].max(1e-9),
        }
    }
}

/// Projects a 3D pose and normalizes it by the camera's view window.
pub fn project(topology: &SkeletonTopology, pose: &Pose3D, cam: &CameraModel) -> Result<Pose2D> {
    let mut coords = Vec::with_capacity(pose.coords.len());
    for (j, &p) in pose.coords.iter().enumerate() {
        let [x, y] = cam.project_plane(p).ok_or_else(|| Error::Projection {
            joint: topology.joint_name(j).to_string(),
            reason: "is behind the pinhole camera".into(),
        })?;
        let uv = [x / cam.half_extent[0], y / cam.half_extent[1]];
        if !(uv[0].abs() <= 1.0 && uv[1].abs() <= 1.0) {
            return Err(Error::Projection {
                joint: topology.joint_name(j).to_string(),
                reason: format!("projects outside the view window at ({}, {})", uv[0], uv[1]),
            });
        }
        coords.push(uv);
    }
    Pose2D::new(topology, coords)
}
