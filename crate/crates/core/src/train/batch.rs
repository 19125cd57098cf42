use std::collections::HashSet;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::prior::PriorDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AuxPairing {
    /// Auxiliary image from the same sequence as the input, another frame.
    #[default]
    SameSequence,
    /// Auxiliary image uniform over the whole set.
    Global,
}

/// Image half of a batch: indices into the image set only.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub x_frames: Vec<usize>,
    pub y_frames: Vec<usize>,
    pub x: Tensor,
    pub y: Tensor,
}

/// Prior half of a batch: rows of the prior only. Has no field through
/// which an image could be referenced.
#[derive(Debug, Clone)]
pub struct PriorBatch {
    pub rows: Vec<usize>,
    /// `(B, J, 2)`
    pub poses: Tensor,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: ImageBatch,
    pub prior: PriorBatch,
}

/// Draws training batches. `x` is uniform over frames, `y` follows the
/// pairing policy, prior rows are uniform and independent of both.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    sequence_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    prior_flat: Vec<f32>,
    joints: usize,
    prior_len: usize,
    warned: bool,
}

impl BatchSampler {
    pub fn new(images: &ImageSet, prior: &PriorDataset) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("image set is empty".into()));
        }
        if prior.is_empty() {
            return Err(Error::Data("prior is empty".into()));
        }
        let seqs = images.sequences();
        let mut sequence_of = vec![0; images.len()];
        let mut members = Vec::new();
        for (k, (_, idx)) in seqs.into_iter().enumerate() {
            for &i in &idx {
                sequence_of[i] = k;
            }
            members.push(idx);
        }
        let joints = prior.poses[0].coords.len();
        let prior_flat = prior
            .poses
            .iter()
            .flat_map(|p| p.coords.iter().flat_map(|c| [c[0] as f32, c[1] as f32]))
            .collect();
        Ok(Self {
            sequence_of,
            members,
            prior_flat,
            joints,
            prior_len: prior.len(),
            warned: false,
        })
    }

    fn aux_index(&mut self, x: usize, policy: AuxPairing, n: usize, rng: &mut ChaCha8Rng) -> usize {
        if policy == AuxPairing::SameSequence {
            let seq = &self.members[self.sequence_of[x]];
            if seq.len() > 1 {
                let k = rng.random_range(0..seq.len() - 1);
                let pos = seq.iter().position(|&i| i == x).expect("member of own sequence");
                return seq[if k >= pos { k + 1 } else { k }];
            }
            if !self.warned {
                log::warn!("sequence with a single frame: auxiliary image drawn from the whole set");
                self.warned = true;
            }
        }
        rng.random_range(0..n)
    }

    pub fn fell_back(&self) -> bool {
        self.warned
    }

    pub fn sample(
        &mut self,
        images: &ImageSet,
        batch_size: usize,
        policy: AuxPairing,
        rng: &mut ChaCha8Rng,
    ) -> Result<Batch> {
        let n = images.len();
        let x_frames: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
        let y_frames: Vec<usize> = x_frames
            .iter()
            .map(|&x| self.aux_index(x, policy, n, rng))
            .collect();
        let rows: Vec<usize> = (0..batch_size)
            .map(|_| rng.random_range(0..self.prior_len))
            .collect();
        let j2 = 2 * self.joints;
        let mut flat = Vec::with_capacity(batch_size * j2);
        for &r in &rows {
            flat.extend_from_slice(&self.prior_flat[r * j2..(r + 1) * j2]);
        }
        Ok(Batch {
            images: ImageBatch {
                x: images.tensor(&x_frames)?,
                y: images.tensor(&y_frames)?,
                x_frames,
                y_frames,
            },
            prior: PriorBatch {
                rows,
                poses: Tensor::from_vec(flat, (batch_size, self.joints, 2), &Device::Cpu)?,
            },
        })
    }
}

/// Outcome of the pairing audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingAudit {
    /// Whether the image directory carries pose annotations (evaluation
    /// ground truth). The trainer never opens them.
    pub image_set_annotated: bool,
    /// Prior poses found among those annotations (must be 0).
    pub shared_poses: usize,
}

fn pose_key(coords: impl Iterator<Item = f64>) -> Vec<u64> {
    coords.map(|c| ((c * 1e6).round() as i64) as u64).collect()
}

/// Checks that prior poses and training images are not paired: they come
/// from different directories, and when the image directory has pose
/// annotations none of them occurs in the prior.
pub fn audit_no_pairing(images: &ImageSet, prior_dir: &Path, prior: &PriorDataset) -> Result<PairingAudit> {
    let same_dir = match (images.dir.canonicalize(), prior_dir.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => images.dir == prior_dir,
    };
    if same_dir {
        return Err(Error::Data(format!(
            "pairing leak: images and prior share the directory {}",
            prior_dir.display()
        )));
    }
    let mut annotated = false;
    let mut shared = 0;
    for name in [crate::prior::POSES_FILE, crate::eval::GROUND_TRUTH_FILE] {
        let path = images.dir.join(name);
        if !path.exists() {
            continue;
        }
        annotated = true;
        let keys: HashSet<Vec<u64>> = prior
            .poses
            .iter()
            .map(|p| pose_key(p.coords.iter().flatten().copied()))
            .collect();
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(&path)?;
        for rec in rdr.records() {
            let rec = rec?;
            let vals: Option<Vec<f64>> = rec.iter().skip(1).map(|s| s.parse().ok()).collect();
            let Some(vals) = vals else { continue };
            let vals = if name == crate::eval::GROUND_TRUTH_FILE {
                let (h, w) = crate::eval::read_resolution_comment(&path)?;
                vals.chunks(2)
                    .flat_map(|c| [c[0] * 2.0 / w as f64 - 1.0, c[1] * 2.0 / h as f64 - 1.0])
                    .collect()
            } else {
                vals
            };
            if keys.contains(&pose_key(vals.into_iter())) {
                shared += 1;
            }
        }
    }
    if shared > 0 {
        return Err(Error::Data(format!(
            "pairing leak: {shared} annotated poses of {} occur in the prior",
            images.dir.display()
        )));
    }
    Ok(PairingAudit {
        image_set_annotated: annotated,
        shared_poses: shared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageFrame;
    use crate::prior::{generate_prior, CameraModel, MotionParams};
    use crate::skeleton::SkeletonTopology;
    use rand::SeedableRng;

    fn set(seqs: &[&str]) -> ImageSet {
        ImageSet {
            dir: "/nonexistent/images".into(),
            resolution: (32, 32),
            frames: seqs
                .iter()
                .enumerate()
                .map(|(i, s)| ImageFrame {
                    frame: i,
                    file: format!("{i}.png"),
                    sequence: s.to_string(),
                    pixels: vec![i as f32 / 10.0; 32 * 32],
                })
                .collect(),
            resized: 0,
        }
    }

    fn prior(n: usize) -> PriorDataset {
        let t = SkeletonTopology::mouse18();
        generate_prior(&t, &t.limits, &MotionParams::default(), &CameraModel::mouse_ventral(), n).unwrap()
    }

    #[test]
    fn shapes_and_same_sequence() {
        let imgs = set(&["a", "a", "a", "b", "b", "c"]);
        let p = prior(50);
        let mut s = BatchSampler::new(&imgs, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = s.sample(&imgs, 32, AuxPairing::SameSequence, &mut rng).unwrap();
        assert_eq!(b.images.x.dims(), &[32, 1, 32, 32]);
        assert_eq!(b.images.y.dims(), &[32, 1, 32, 32]);
        assert_eq!(b.prior.poses.dims(), &[32, 18, 2]);
        for (&x, &y) in b.images.x_frames.iter().zip(&b.images.y_frames) {
            if imgs.frames[x].sequence != "c" {
                assert_ne!(x, y);
                assert_eq!(imgs.frames[x].sequence, imgs.frames[y].sequence);
            }
        }
        let single = b.images.x_frames.contains(&5);
        assert_eq!(s.fell_back(), single);
    }

    #[test]
    fn single_image_global_is_degenerate_pair() {
        let imgs = set(&["a"]);
        let p = prior(3);
        let mut s = BatchSampler::new(&imgs, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = s.sample(&imgs, 4, AuxPairing::Global, &mut rng).unwrap();
        assert_eq!(b.images.x_frames, b.images.y_frames);
    }

    #[test]
    fn seeded_batches_repeat() {
        let imgs = set(&["a", "a", "b", "b"]);
        let p = prior(20);
        let draw = || {
            let mut s = BatchSampler::new(&imgs, &p).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let b = s.sample(&imgs, 8, AuxPairing::SameSequence, &mut rng).unwrap();
            (b.images.x_frames, b.images.y_frames, b.prior.rows)
        };
        assert_eq!(draw(), draw());
    }
}
