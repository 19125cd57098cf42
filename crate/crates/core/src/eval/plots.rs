use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use plotters::prelude::*;

use super::{mpjpe, mpjpe_sets, GroundTruthSet, JointErrorTable};
use crate::data::{gray_to_f32, to_gray};
use crate::error::{Error, IoContext, Result};
use crate::nets::ModelBundle;
use crate::raster::group_color;
use crate::skeleton::SkeletonTopology;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Where overlays, plots and tables go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Overlay images for at most this many frames.
    pub overlays: usize,
    pub plots: bool,
    /// Second prediction source, drawn dotted in the trajectory plots.
    pub external: Option<GroundTruthSet>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            overlays: 8,
            plots: true,
            external: None,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub table: JointErrorTable,
    pub predictions: GroundTruthSet,
    pub external_table: Option<JointErrorTable>,
    pub overlays: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
    /// Frames resized to the network resolution before prediction.
    pub resized: usize,
}

fn bone_rgb(topology: &SkeletonTopology, b: usize) -> Rgb<u8> {
    let names = topology.group_names();
    let k = names.iter().position(|n| *n == topology.groups[b]).unwrap_or(0);
    let c = group_color(&topology.groups[b], k);
    Rgb([(c[0] * 255.0) as u8, (c[1] * 255.0) as u8, (c[2] * 255.0) as u8])
}

fn put(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], c: Rgb<u8>) {
    let n = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()) * 2.0).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        put(img, a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), c);
    }
}

/// Predicted skeleton in group colours over the frame; annotated joints, if
/// given, as white crosses.
pub fn draw_overlay(
    frame: &GrayImage,
    topology: &SkeletonTopology,
    pred: &[[f64; 2]],
    truth: Option<&[Option<[f64; 2]>]>,
) -> RgbImage {
    let mut img = RgbImage::from_fn(frame.width(), frame.height(), |x, y| {
        let v = frame.get_pixel(x, y)[0];
        Rgb([v, v, v])
    });
    if let Some(truth) = truth {
        let white = Rgb([255, 255, 255]);
        for [x, y] in truth.iter().flatten() {
            for d in -2..=2 {
                put(&mut img, x + d as f64, *y, white);
                put(&mut img, *x, y + d as f64, white);
            }
        }
    }
    for (b, bone) in topology.bones.iter().enumerate() {
        line(&mut img, pred[bone.parent], pred[bone.child], bone_rgb(topology, b));
    }
    for &[x, y] in pred {
        for dy in -1..=1 {
            for dx in -1..=1 {
                put(&mut img, x + dx as f64, y + dy as f64, Rgb([255, 64, 255]));
            }
        }
    }
    img
}

/// One SVG per joint: x and y against frame id for each series. The series
/// labelled `external` is dotted.
pub fn plot_trajectories(
    dir: &Path,
    joints: &[String],
    series: &[(&str, &GroundTruthSet)],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).at(dir)?;
    let palette = [RGBColor(200, 30, 30), RGBColor(30, 30, 200), RGBColor(20, 140, 20)];
    let mut out = Vec::new();
    for (j, name) in joints.iter().enumerate() {
        let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        let path = dir.join(format!("{j:02}_{safe}.svg"));
        let mut frames: Vec<usize> = series.iter().flat_map(|(_, s)| s.frames.iter().copied()).collect();
        frames.sort_unstable();
        let (f0, f1) = (*frames.first().unwrap_or(&0) as f64, (*frames.last().unwrap_or(&1)).max(1) as f64);
        let (w, h) = series.first().map_or((1, 1), |(_, s)| (s.width, s.height));
        let root = SVGBackend::new(&path, (900, 500)).into_drawing_area();
        let draw_err = |e: String| Error::Data(format!("{}: {e}", path.display()));
        root.fill(&WHITE).map_err(|e| draw_err(e.to_string()))?;
        let panels = root.split_evenly((2, 1));
        for (axis, (panel, limit)) in panels.iter().zip([w, h]).enumerate() {
            let mut chart = ChartBuilder::on(panel)
                .caption(format!("{name} {}", if axis == 0 { "x" } else { "y" }), ("sans-serif", 16))
                .margin(8)
                .x_label_area_size(24)
                .y_label_area_size(40)
                .build_cartesian_2d(f0..f1 + 1.0, 0.0..limit as f64)
                .map_err(|e| draw_err(e.to_string()))?;
            chart.configure_mesh().draw().map_err(|e| draw_err(e.to_string()))?;
            for (k, (label, set)) in series.iter().enumerate() {
                let mut pts: Vec<(f64, f64)> = set
                    .frames
                    .iter()
                    .zip(&set.coords)
                    .filter_map(|(f, row)| row[j].map(|c| (*f as f64, c[axis])))
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                let color = palette[k % palette.len()];
                if *label == "external" {
                    chart
                        .draw_series(DashedLineSeries::new(pts, 2, 4, color.stroke_width(2)))
                        .map_err(|e| draw_err(e.to_string()))?;
                } else {
                    chart
                        .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                        .map_err(|e| draw_err(e.to_string()))?;
                }
            }
        }
        root.present().map_err(|e| draw_err(e.to_string()))?;
        drop(panels);
        drop(root);
        out.push(path);
    }
    Ok(out)
}

/// Predicts every frame, scores it against `gts` at the annotations'
/// resolution and writes overlays, trajectory plots and tables.
pub fn evaluate_run(
    bundle: &ModelBundle,
    frames: &[(usize, GrayImage)],
    gts: &GroundTruthSet,
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    if frames.is_empty() {
        return Err(Error::Data("no frames to evaluate".into()));
    }
    let res = bundle.config.image_resolution;
    let mut resized = 0;
    let mut preds = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(opts.batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * res.0 * res.1);
        for (_, img) in chunk {
            let (g, changed) = to_gray(image::DynamicImage::ImageLuma8(img.clone()), res);
            resized += changed as usize;
            data.extend(gray_to_f32(&g));
        }
        let x = candle_core::Tensor::from_vec(data, (chunk.len(), 1, res.0, res.1), &candle_core::Device::Cpu)?;
        for ((f, _), p) in chunk.iter().zip(bundle.predict(&x)?) {
            preds.push((*f, p));
        }
    }
    let table = mpjpe(&preds, gts)?;
    let mut predictions = GroundTruthSet::new(&bundle.topology, gts.width, gts.height, "predictions");
    for (f, p) in &preds {
        predictions.push_pose(*f, p);
    }
    let external_table = opts.external.as_ref().map(|e| mpjpe_sets(e, gts)).transpose()?;

    let mut overlays = Vec::new();
    let mut plots = Vec::new();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).at(dir)?;
        predictions.save(&dir.join("predictions.csv"))?;
        std::fs::write(dir.join("mpjpe.csv"), table.to_csv()).at(&dir.join("mpjpe.csv"))?;
        std::fs::write(dir.join("mpjpe.txt"), table.to_text()).at(&dir.join("mpjpe.txt"))?;
        let odir = dir.join("overlays");
        std::fs::create_dir_all(&odir).at(&odir)?;
        for (i, (f, img)) in frames.iter().enumerate().take(opts.overlays) {
            let native = if img.width() == gts.width && img.height() == gts.height {
                img.clone()
            } else {
                image::imageops::resize(img, gts.width, gts.height, image::imageops::FilterType::Triangle)
            };
            let truth = gts.frames.iter().position(|g| g == f).map(|k| gts.coords[k].as_slice());
            let pred: Vec<[f64; 2]> = predictions.coords[i].iter().map(|c| c.expect("prediction")).collect();
            let path = odir.join(format!("frame_{f:06}.png"));
            draw_overlay(&native, &bundle.topology, &pred, truth)
                .save(&path)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            overlays.push(path);
        }
        if opts.plots {
            let mut series: Vec<(&str, &GroundTruthSet)> = vec![("predicted", &predictions), ("annotated", gts)];
            if let Some(e) = &opts.external {
                series.push(("external", e));
            }
            plots = plot_trajectories(&dir.join("trajectories"), &gts.joints, &series)?;
        }
    }
    Ok(EvalOutcome {
        table,
        predictions,
        external_table,
        overlays,
        plots,
        resized,
    })
}
