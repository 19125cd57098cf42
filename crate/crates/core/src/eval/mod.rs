//! Ground-truth annotation files and the per-joint position error protocol.
//!
//! Annotation and prediction CSVs share one format: a `# resolution=WxH`
//! comment line, a `frame,<joint>_x,<joint>_y,...` header, and pixel
//! coordinates at that native resolution. An empty cell marks a joint as
//! missing in that frame.

mod plots;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

pub use plots::{draw_overlay, evaluate_run, plot_trajectories, EvalOptions, EvalOutcome};

use crate::error::{Error, IoContext, Result};
use crate::skeleton::{pose2d_to_pixels, Pose2D, SkeletonTopology};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

/// Per-frame pixel annotations at a native resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    pub topology: String,
    pub joints: Vec<String>,
    pub width: u32,
    pub height: u32,
    pub source: String,
    pub frames: Vec<usize>,
    /// `coords[i][j]` is joint `j` of frame `frames[i]`; `None` when missing.
    pub coords: Vec<Vec<Option<[f64; 2]>>>,
}

impl GroundTruthSet {
    pub fn new(topology: &SkeletonTopology, width: u32, height: u32, source: impl Into<String>) -> Self {
        Self {
            topology: topology.name.clone(),
            joints: topology.joints.clone(),
            width,
            height,
            source: source.into(),
            frames: Vec::new(),
            coords: Vec::new(),
        }
    }

    /// Adds a normalized pose as pixel coordinates.
    pub fn push_pose(&mut self, frame: usize, pose: &Pose2D) {
        let px = pose2d_to_pixels(pose, self.width, self.height);
        self.frames.push(frame);
        self.coords.push(px.into_iter().map(Some).collect());
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, f) in self.frames.iter().enumerate() {
            if !seen.insert(*f) {
                return Err(Error::Data(format!("frame {f} annotated twice")));
            }
            if self.coords[i].len() != self.joints.len() {
                return Err(Error::Data(format!("frame {f}: wrong joint count")));
            }
            for (j, c) in self.coords[i].iter().enumerate() {
                if let Some([x, y]) = c {
                    if !(0.0..=self.width as f64).contains(x) || !(0.0..=self.height as f64).contains(y) {
                        return Err(Error::Data(format!(
                            "frame {f}: joint `{}` at ({x}, {y}) lies outside {}x{}",
                            self.joints[j], self.width, self.height
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Copy with every coordinate and the resolution multiplied by `k`.
    pub fn scaled(&self, k: u32) -> Self {
        let mut out = self.clone();
        out.width *= k;
        out.height *= k;
        for row in &mut out.coords {
            for c in row.iter_mut().flatten() {
                c[0] *= k as f64;
                c[1] *= k as f64;
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("# resolution={}x{}\nframe", self.width, self.height);
        for j in &self.joints {
            write!(out, ",{j}_x,{j}_y").unwrap();
        }
        out.push('\n');
        for (f, row) in self.frames.iter().zip(&self.coords) {
            write!(out, "{f}").unwrap();
            for c in row {
                match c {
                    Some([x, y]) => write!(out, ",{x},{y}").unwrap(),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        std::fs::write(path, out).at(path)
    }
}

/// `(height, width)` from the leading `# resolution=WxH` comment.
pub fn read_resolution_comment(path: &Path) -> Result<(u32, u32)> {
    let text = std::fs::read_to_string(path).at(path)?;
    let first = text.lines().next().unwrap_or("");
    let spec = first
        .trim_start_matches('#')
        .trim()
        .strip_prefix("resolution=")
        .ok_or_else(|| Error::Row {
            path: path.into(),
            row: 1,
            reason: "expected `# resolution=WxH`".into(),
        })?;
    let (w, h) = spec
        .split_once('x')
        .and_then(|(w, h)| Some((w.trim().parse().ok()?, h.trim().parse().ok()?)))
        .ok_or_else(|| Error::Row {
            path: path.into(),
            row: 1,
            reason: format!("bad resolution `{spec}`"),
        })?;
    Ok((h, w))
}

/// Reads an annotation CSV. Columns may cover a subset of the topology's
/// joints; joints without columns are missing everywhere.
pub fn load_ground_truth(path: &Path, topology: &SkeletonTopology) -> Result<GroundTruthSet> {
    let (height, width) = read_resolution_comment(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)?;
    let header = rdr.headers()?.clone();
    let row_err = |row: usize, reason: String| Error::Row {
        path: path.into(),
        row,
        reason,
    };
    // Line numbers count the comment line and the header.
    if header.get(0) != Some("frame") {
        return Err(row_err(2, "first column must be `frame`".into()));
    }
    let mut columns = Vec::new();
    for pair in header.iter().skip(1).collect::<Vec<_>>().chunks(2) {
        let [xn, yn] = pair else {
            return Err(row_err(2, "joint columns must come in _x/_y pairs".into()));
        };
        let name = xn
            .strip_suffix("_x")
            .filter(|n| yn.strip_suffix("_y") == Some(n))
            .ok_or_else(|| row_err(2, format!("columns `{xn}`, `{yn}` are not a _x/_y pair")))?;
        let j = topology
            .joint_id(name)
            .ok_or_else(|| row_err(2, format!("unknown joint column `{name}`")))?;
        columns.push(j);
    }
    let mut set = GroundTruthSet::new(topology, width, height, path.display().to_string());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 3;
        if rec.len() != header.len() {
            return Err(row_err(row, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let frame: usize = rec[0]
            .trim()
            .parse()
            .map_err(|e| row_err(row, format!("frame: {e}")))?;
        let mut coords = vec![None; topology.joint_count()];
        for (k, &j) in columns.iter().enumerate() {
            let (xs, ys) = (rec[1 + 2 * k].trim(), rec[2 + 2 * k].trim());
            if xs.is_empty() && ys.is_empty() {
                continue;
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|e| row_err(row, format!("`{}`: {e}", topology.joints[j])));
            let (x, y) = (parse(xs)?, parse(ys)?);
            if !(0.0..=width as f64).contains(&x) || !(0.0..=height as f64).contains(&y) {
                return Err(row_err(
                    row,
                    format!("joint `{}` at ({x}, {y}) lies outside {width}x{height}", topology.joints[j]),
                ));
            }
            coords[j] = Some([x, y]);
        }
        if set.frames.contains(&frame) {
            return Err(row_err(row, format!("frame {frame} annotated twice")));
        }
        set.frames.push(frame);
        set.coords.push(coords);
    }
    Ok(set)
}

/// Per-joint mean pixel error and their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct JointErrorTable {
    pub joints: Vec<String>,
    /// `None` for joints without any valid annotation.
    pub per_joint: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub average: f64,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
}

impl JointErrorTable {
    pub fn absent(&self) -> Vec<&str> {
        self.joints
            .iter()
            .zip(&self.per_joint)
            .filter(|(_, e)| e.is_none())
            .map(|(j, _)| j.as_str())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("joint,mpjpe_px,count\n");
        for ((j, e), c) in self.joints.iter().zip(&self.per_joint).zip(&self.counts) {
            match e {
                Some(e) => writeln!(s, "{j},{e},{c}").unwrap(),
                None => writeln!(s, "{j},,0").unwrap(),
            }
        }
        writeln!(s, "average,{},{}", self.average, self.frames).unwrap();
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.joints.iter().map(String::len).max().unwrap_or(5).max(7);
        let mut s = format!("MPJPE at {}x{} over {} frames\n", self.width, self.height, self.frames);
        for (j, e) in self.joints.iter().zip(&self.per_joint) {
            match e {
                Some(e) => writeln!(s, "{j:<width$}  {e:>8.3}").unwrap(),
                None => writeln!(s, "{j:<width$}  {:>8}", "absent").unwrap(),
            }
        }
        writeln!(s, "{:<width$}  {:>8.3}", "average", self.average).unwrap();
        s
    }
}

/// Error between two pixel-space sets at the same resolution, matched by
/// frame id. A joint missing on either side is skipped for that frame.
pub fn mpjpe_sets(preds: &GroundTruthSet, gts: &GroundTruthSet) -> Result<JointErrorTable> {
    if preds.joints != gts.joints {
        return Err(Error::Data("prediction and annotation joint sets differ".into()));
    }
    if (preds.width, preds.height) != (gts.width, gts.height) {
        return Err(Error::Data(format!(
            "predictions at {}x{}, annotations at {}x{}",
            preds.width, preds.height, gts.width, gts.height
        )));
    }
    let by_frame: BTreeMap<usize, &Vec<Option<[f64; 2]>>> =
        preds.frames.iter().copied().zip(&preds.coords).collect();
    let nj = gts.joints.len();
    let mut sums = vec![0.0f64; nj];
    let mut counts = vec![0usize; nj];
    let mut matched = 0;
    for (f, g) in gts.frames.iter().zip(&gts.coords) {
        let Some(p) = by_frame.get(f) else { continue };
        matched += 1;
        for j in 0..nj {
            if let (Some(a), Some(b)) = (p[j], g[j]) {
                sums[j] += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                counts[j] += 1;
            }
        }
    }
    if matched == 0 {
        return Err(Error::Data("no frames shared by predictions and annotations".into()));
    }
    let per_joint: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let present: Vec<f64> = per_joint.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Data("no joint has a valid annotation".into()));
    }
    let table = JointErrorTable {
        joints: gts.joints.clone(),
        average: present.iter().sum::<f64>() / present.len() as f64,
        per_joint,
        counts,
        frames: matched,
        width: gts.width,
        height: gts.height,
    };
    let absent = table.absent();
    if !absent.is_empty() {
        log::warn!("joints without annotations, excluded from the average: {}", absent.join(", "));
    }
    Ok(table)
}

/// Mean per-joint position error of normalized predictions against pixel
/// annotations, at the annotations' native resolution.
pub fn mpjpe(preds: &[(usize, Pose2D)], gts: &GroundTruthSet) -> Result<JointErrorTable> {
    let mut p = GroundTruthSet {
        frames: Vec::new(),
        coords: Vec::new(),
        source: "predictions".into(),
        ..gts.clone()
    };
    for (f, pose) in preds {
        if pose.coords.len() != gts.joints.len() {
            return Err(Error::Data(format!("frame {f}: prediction has the wrong joint count")));
        }
        p.push_pose(*f, pose);
    }
    mpjpe_sets(&p, gts)
}
