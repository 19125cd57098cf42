//! Image sets on disk: a directory of grayscale frames plus `index.csv`
//! (`frame,file,sequence`). The sequence id groups frames of one video.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage};

use crate::error::{Error, IoContext, Result};
use crate::eval::{GroundTruthSet, GROUND_TRUTH_FILE};
use crate::prior::{generate_frames, project, render_synthetic_image, write_poses_csv, PriorMeta, POSES_FILE};
use crate::skeleton::SkeletonTopology;

pub const INDEX_FILE: &str = "index.csv";
const INDEX_HEADER: [&str; 3] = ["frame", "file", "sequence"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexRow {
    pub frame: usize,
    pub file: String,
    pub sequence: String,
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexRow>> {
    let path = dir.join(INDEX_FILE);
    if !path.exists() {
        return Err(Error::Data(format!("{}: missing {INDEX_FILE}", dir.display())));
    }
    let mut rdr = csv::Reader::from_path(&path)?;
    if rdr.headers()?.iter().ne(INDEX_HEADER) {
        return Err(Error::Row {
            path: path.clone(),
            row: 1,
            reason: format!("expected header `{}`", INDEX_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |reason: String| Error::Row {
            path: path.clone(),
            row: i + 2,
            reason,
        };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", rec.len())));
        }
        rows.push(IndexRow {
            frame: rec[0].trim().parse().map_err(|e| bad(format!("frame: {e}")))?,
            file: rec[1].to_string(),
            sequence: rec[2].to_string(),
        });
    }
    Ok(rows)
}

pub fn write_index(dir: &Path, rows: &[IndexRow]) -> Result<()> {
    let path = dir.join(INDEX_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(INDEX_HEADER)?;
    for r in rows {
        w.write_record([r.frame.to_string(), r.file.clone(), r.sequence.clone()])?;
    }
    w.flush().at(&path)
}

/// Converts to 8-bit luma and resizes to `(h, w)` when needed. Returns
/// whether a resize happened.
pub fn to_gray(img: DynamicImage, resolution: (usize, usize)) -> (GrayImage, bool) {
    let g = img.into_luma8();
    let (h, w) = resolution;
    if g.width() as usize == w && g.height() as usize == h {
        (g, false)
    } else {
        (image::imageops::resize(&g, w as u32, h as u32, FilterType::Triangle), true)
    }
}

pub fn gray_to_f32(img: &GrayImage) -> Vec<f32> {
    img.as_raw().iter().map(|&b| b as f32 / 255.0).collect()
}

#[derive(Debug, Clone)]
pub struct ImageFrame {
    pub frame: usize,
    pub file: String,
    pub sequence: String,
    /// row-major `H × W`, in `[0, 1]`
    pub pixels: Vec<f32>,
}

/// Frames held in memory at the training resolution. Carries no pose
/// information of any kind.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub dir: PathBuf,
    pub resolution: (usize, usize),
    pub frames: Vec<ImageFrame>,
    /// Frames whose stored size differed from `resolution`.
    pub resized: usize,
}

impl ImageSet {
    pub fn load(dir: &Path, resolution: (usize, usize)) -> Result<Self> {
        let rows = read_index(dir)?;
        if rows.is_empty() {
            return Err(Error::Data(format!("{}: image set is empty", dir.display())));
        }
        let mut frames = Vec::with_capacity(rows.len());
        let mut resized = 0;
        for r in rows {
            let path = dir.join(&r.file);
            let img = image::open(&path)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let (g, changed) = to_gray(img, resolution);
            resized += changed as usize;
            frames.push(ImageFrame {
                frame: r.frame,
                file: r.file,
                sequence: r.sequence,
                pixels: gray_to_f32(&g),
            });
        }
        if resized > 0 {
            log::info!("{}: resized {resized} frames to {}x{}", dir.display(), resolution.1, resolution.0);
        }
        Ok(Self {
            dir: dir.into(),
            resolution,
            frames,
            resized,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame indices grouped by sequence id.
    pub fn sequences(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, f) in self.frames.iter().enumerate() {
            m.entry(f.sequence.as_str()).or_default().push(i);
        }
        m
    }

    /// `(B, 1, H, W)` batch of the listed frames.
    pub fn tensor(&self, idx: &[usize]) -> Result<Tensor> {
        let (h, w) = self.resolution;
        let mut data = Vec::with_capacity(idx.len() * h * w);
        for &i in idx {
            data.extend_from_slice(&self.frames[i].pixels);
        }
        Ok(Tensor::from_vec(data, (idx.len(), 1, h, w), &Device::Cpu)?)
    }
}

/// Every indexed frame at its stored size, as grayscale, with its frame id.
pub fn load_native_frames(dir: &Path) -> Result<Vec<(usize, GrayImage)>> {
    read_index(dir)?
        .into_iter()
        .map(|r| {
            let path = dir.join(&r.file);
            let img = image::open(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            Ok((r.frame, img.into_luma8()))
        })
        .collect()
}

/// `frame_000042.png`
pub fn frame_file_name(frame: usize) -> String {
    format!("frame_{frame:06}.png")
}

/// Renders the frames described by `meta` as capsule images into `dir`,
/// with `index.csv` (one sequence per animated sequence), the generating
/// poses as `poses.csv` and pixel annotations as `ground_truth.csv`. The
/// poses are evaluation ground truth; training reads only the images.
pub fn write_synthetic_set(
    dir: &Path,
    topology: &SkeletonTopology,
    meta: &PriorMeta,
    resolution: (usize, usize),
) -> Result<usize> {
    std::fs::create_dir_all(dir).at(dir)?;
    let (h, w) = resolution;
    let mut rows = Vec::with_capacity(meta.count);
    let mut poses = Vec::with_capacity(meta.count);
    let mut gt = GroundTruthSet::new(topology, w as u32, h as u32, "synthetic");
    for (i, (seq, f)) in generate_frames(topology, meta)?.into_iter().enumerate() {
        let img = render_synthetic_image(topology, &f.pose, &meta.camera, (h as u32, w as u32))?;
        let file = frame_file_name(i);
        let path = dir.join(&file);
        img.save(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let pose = project(topology, &f.pose, &meta.camera)?;
        gt.push_pose(i, &pose);
        poses.push(pose);
        rows.push(IndexRow {
            frame: i,
            file,
            sequence: format!("seq{seq:04}"),
        });
    }
    write_index(dir, &rows)?;
    write_poses_csv(&dir.join(POSES_FILE), topology, &poses)?;
    gt.save(&dir.join(GROUND_TRUTH_FILE))?;
    Ok(rows.len())
}
