//! Capsule renderer for synthetic training images.

use image::GrayImage;

use super::camera::CameraModel;
use crate::error::{Error, Result};
use crate::skeleton::{Pose3D, SkeletonTopology};

pub const BACKGROUND: f64 = 0.1;

/// Foreground intensity per bone group; limbs are brighter than the trunk.
fn intensity(group: &str) -> f64 {
    match group {
        "forelimb" | "hindlimb" => 1.0,
        "head" => 0.8,
        _ => 0.7,
    }
}

/// Renders `pose` as filled capsules (one per bone) over a uniform
/// background. Capsule edges are ramped over one pixel.
pub fn render_synthetic_image(
    topology: &SkeletonTopology,
    pose: &Pose3D,
    cam: &CameraModel,
    resolution: (u32, u32),
) -> Result<GrayImage> {
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::Config(vec!["render resolution must be non-zero".into()]));
    }
    let px_per_x = w as f64 / (2.0 * cam.half_extent[0]);
    let px_per_y = h as f64 / (2.0 * cam.half_extent[1]);
    let mut pix = Vec::with_capacity(pose.coords.len());
    for (j, &p) in pose.coords.iter().enumerate() {
        let [x, y] = cam.project_plane(p).ok_or_else(|| crate::Error::Projection {
            joint: topology.joint_name(j).to_string(),
            reason: "is behind the pinhole camera".into(),
        })?;
        pix.push([
            (x / cam.half_extent[0] + 1.0) * 0.5 * w as f64,
            (y / cam.half_extent[1] + 1.0) * 0.5 * h as f64,
        ]);
    }

    let mut img = vec![0.0f64; (h * w) as usize];
    for (b, bone) in topology.bones.iter().enumerate() {
        let (a, z) = (pix[bone.parent], pix[bone.child]);
        let mid = {
            let (p, c) = (pose.coords[bone.parent], pose.coords[bone.child]);
            [(p[0] + c[0]) / 2.0, (p[1] + c[1]) / 2.0, (p[2] + c[2]) / 2.0]
        };
        let radius =
            topology.radii[b] * cam.plane_scale_at(mid) * 0.5 * (px_per_x + px_per_y);
        let level = intensity(&topology.groups[b]);
        let reach = radius + 1.0;
        let x0 = (a[0].min(z[0]) - reach).floor().max(0.0) as u32;
        let x1 = (a[0].max(z[0]) + reach).ceil().min(w as f64) as u32;
        let y0 = (a[1].min(z[1]) - reach).floor().max(0.0) as u32;
        let y1 = (a[1].max(z[1]) + reach).ceil().min(h as f64) as u32;
        for yi in y0..y1 {
            for xi in x0..x1 {
                let d = crate::raster::point_segment_distance(
                    [xi as f64 + 0.5, yi as f64 + 0.5],
                    a,
                    z,
                );
                let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
                let v = &mut img[(yi * w + xi) as usize];
                *v = v.max(cover * level);
            }
        }
    }
    let bytes = img
        .iter()
        .map(|&c| ((BACKGROUND + (1.0 - BACKGROUND) * c) * 255.0).round() as u8)
        .collect();
    Ok(GrayImage::from_raw(w, h, bytes).expect("buffer sized to resolution"))
}
