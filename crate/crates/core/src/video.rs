//! Frame extraction from YUV4MPEG2 streams, animated GIFs and image
//! directories into an image set.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use image::codecs::gif::GifDecoder;
use image::{AnimationDecoder, DynamicImage, GrayImage};

use crate::data::{frame_file_name, read_index, to_gray, write_index, IndexRow, INDEX_FILE};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractOptions {
    /// Output `(height, width)`; frames keep their size when unset.
    pub resize: Option<(usize, usize)>,
    /// `(x, y, width, height)` applied before resizing.
    pub crop: Option<(u32, u32, u32, u32)>,
    /// Keep every n-th frame (1 keeps all).
    pub every: usize,
    pub max_frames: Option<usize>,
    /// Sequence id written to the index; defaults to the input's file stem.
    pub sequence: Option<String>,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp" | "pgm" | "ppm" | "pnm")
    )
}

fn y4m_frames(path: &Path) -> Result<Vec<GrayImage>> {
    let file = File::open(path).at(path)?;
    let mut dec = y4m::decode(BufReader::new(file))
        .map_err(|e| Error::Data(format!("{}: not a readable y4m stream: {e:?}", path.display())))?;
    let (w, h) = (dec.get_width(), dec.get_height());
    let bytes = dec.get_bytes_per_sample();
    let depth = dec.get_bit_depth();
    let mut out = Vec::new();
    loop {
        match dec.read_frame() {
            Ok(frame) => {
                let y = frame.get_y_plane();
                let luma: Vec<u8> = if bytes == 1 {
                    y.to_vec()
                } else {
                    y.chunks_exact(2)
                        .map(|c| (u16::from_le_bytes([c[0], c[1]]) >> (depth - 8)) as u8)
                        .collect()
                };
                out.push(
                    GrayImage::from_raw(w as u32, h as u32, luma)
                        .ok_or_else(|| Error::Data(format!("{}: truncated frame", path.display())))?,
                );
            }
            Err(y4m::Error::EOF) => break,
            Err(e) => return Err(Error::Data(format!("{}: {e:?}", path.display()))),
        }
    }
    Ok(out)
}

fn gif_frames(path: &Path) -> Result<Vec<GrayImage>> {
    let file = File::open(path).at(path)?;
    let dec = GifDecoder::new(BufReader::new(file))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    dec.into_frames()
        .map(|f| {
            f.map(|f| DynamicImage::ImageRgba8(f.into_buffer()).into_luma8())
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn dir_frames(path: &Path) -> Result<Vec<GrayImage>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .at(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            image::open(p)
                .map(DynamicImage::into_luma8)
                .map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Decodes every frame of `input` as 8-bit grayscale.
pub fn decode_frames(input: &Path) -> Result<Vec<GrayImage>> {
    if input.is_dir() {
        return dir_frames(input);
    }
    if !input.exists() {
        return Err(Error::Data(format!("{}: no such video", input.display())));
    }
    match input.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("y4m") => y4m_frames(input),
        Some("gif") => gif_frames(input),
        _ if is_image(input) => Ok(vec![image::open(input)
            .map_err(|e| Error::Data(format!("{}: {e}", input.display())))?
            .into_luma8()]),
        _ => Err(Error::Data(format!(
            "{}: unsupported video format (y4m, gif or an image directory)",
            input.display()
        ))),
    }
}

/// Writes the selected frames of `input` into `out` and appends them to its
/// index under one sequence id. Returns the number of frames written.
pub fn extract_frames(input: &Path, out: &Path, opts: &ExtractOptions) -> Result<usize> {
    let every = opts.every.max(1);
    let frames = decode_frames(input)?;
    if frames.is_empty() {
        return Err(Error::Data(format!("{}: no frames decoded", input.display())));
    }
    std::fs::create_dir_all(out).at(out)?;
    let mut index = if out.join(INDEX_FILE).exists() {
        read_index(out)?
    } else {
        Vec::new()
    };
    let sequence = opts.sequence.clone().unwrap_or_else(|| {
        input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "0".into())
    });
    if index.iter().any(|r| r.sequence == sequence) {
        return Err(Error::Data(format!(
            "{}: sequence `{sequence}` is already indexed",
            out.display()
        )));
    }
    let mut next = index.iter().map(|r| r.frame + 1).max().unwrap_or(0);
    let mut written = 0;
    for img in frames.into_iter().step_by(every) {
        if opts.max_frames.is_some_and(|m| written >= m) {
            break;
        }
        let mut img = img;
        if let Some((x, y, w, h)) = opts.crop {
            if x + w > img.width() || y + h > img.height() || w == 0 || h == 0 {
                return Err(Error::Data(format!(
                    "crop {w}x{h}+{x}+{y} exceeds the {}x{} frame",
                    img.width(),
                    img.height()
                )));
            }
            img = image::imageops::crop_imm(&img, x, y, w, h).to_image();
        }
        if let Some(res) = opts.resize {
            img = to_gray(DynamicImage::ImageLuma8(img), res).0;
        }
        let file = frame_file_name(next);
        let path = out.join(&file);
        img.save(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        index.push(IndexRow {
            frame: next,
            file,
            sequence: sequence.clone(),
        });
        next += 1;
        written += 1;
    }
    write_index(out, &index)?;
    Ok(written)
}
