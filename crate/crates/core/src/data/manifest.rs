//! Line-oriented manifest format.
//!
//! ```text
//! #classes: anger,happiness
//! clip_001<TAB>frames/clip_001<TAB>anger<TAB>train
//! clip_002<TAB>frames/clip_002<TAB>happiness<TAB>-
//! ```
//!
//! Frame directories are resolved relative to the manifest's directory and
//! their image files are read in lexicographic order. Row numbers in errors
//! are 1-based file line numbers.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, SplitTag, VideoSample};
use crate::error::{HespError, Result};
use crate::tensor::{Frame, FrameShape};

const HEADER_PREFIX: &str = "#classes:";
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| HespError::Ingestion {
        path: path.to_path_buf(),
        row: None,
        reason: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let source = path.display().to_string();

    let mut lines = text.lines().enumerate();
    let class_names: Vec<String> = match lines.next() {
        Some((_, header)) if header.starts_with(HEADER_PREFIX) => header[HEADER_PREFIX.len()..]
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        _ => {
            return Err(HespError::Schema {
                row: 1,
                reason: format!("first line must start with `{HEADER_PREFIX}`"),
            })
        }
    };
    if class_names.is_empty() {
        return Err(HespError::Schema {
            row: 1,
            reason: "empty class list".into(),
        });
    }

    let mut samples = Vec::new();
    let mut frame_shape: Option<FrameShape> = None;
    for (idx, line) in lines {
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(HespError::Schema {
                row,
                reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let (id, dir, class, tag) = (fields[0], fields[1], fields[2].trim(), fields[3].trim());
        let label =
            class_names
                .iter()
                .position(|c| c == class)
                .ok_or_else(|| HespError::Schema {
                    row,
                    reason: format!("class `{class}` is not in the header class list"),
                })?;
        let tag = match tag {
            "train" => Some(SplitTag::Train),
            "test" => Some(SplitTag::Test),
            "-" => None,
            other => {
                return Err(HespError::Schema {
                    row,
                    reason: format!("split tag `{other}` must be train, test or -"),
                })
            }
        };
        let frames_dir = base.join(dir);
        let frames = load_frame_dir(&frames_dir, row)?;
        let shape = frames[0].shape();
        match frame_shape {
            None => frame_shape = Some(shape),
            Some(expected) if expected != shape => {
                return Err(HespError::Ingestion {
                    path: frames_dir,
                    row: Some(row),
                    reason: format!("frames are {shape}, earlier rows are {expected}"),
                })
            }
            _ => {}
        }
        samples.push(VideoSample {
            id: id.to_string(),
            frames,
            label,
            source: source.clone(),
            tag,
        });
    }
    let frame_shape = frame_shape.unwrap_or(FrameShape::new(3, 0, 0));
    Dataset::new(samples, class_names, frame_shape)
}

fn load_frame_dir(dir: &Path, row: usize) -> Result<Vec<Frame>> {
    let ingestion = |reason: String| HespError::Ingestion {
        path: dir.to_path_buf(),
        row: Some(row),
        reason,
    };
    let entries = fs::read_dir(dir).map_err(|e| ingestion(e.to_string()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .map(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ingestion("no image files".into()));
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut shape: Option<FrameShape> = None;
    for file in &files {
        let img = image::open(file)
            .map_err(|e| ingestion(format!("{}: {e}", file.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let fs = FrameShape::new(3, h as usize, w as usize);
        if shape.is_some_and(|s| s != fs) {
            return Err(ingestion(format!(
                "{} has a different size",
                file.display()
            )));
        }
        shape = Some(fs);
        let mut frame = Frame::zeros(fs);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                frame.set(c, y as usize, x as usize, px[c] as f64 / 255.0);
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// Writes `dataset` as PNG frame directories under `root` plus
/// `root/manifest.tsv`, returning the manifest path. Pixels are quantized
/// to 8 bits.
pub fn write_manifest(dataset: &Dataset, root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let mut out = format!("{HEADER_PREFIX} {}\n", dataset.class_names().join(","));
    for sample in dataset.samples() {
        let rel = PathBuf::from("frames").join(&sample.id);
        let dir = root.join(&rel);
        fs::create_dir_all(&dir)?;
        for (q, frame) in sample.frames.iter().enumerate() {
            let shape = frame.shape();
            let img = image::RgbImage::from_fn(shape.width as u32, shape.height as u32, |x, y| {
                let mut px = [0u8; 3];
                for (c, slot) in px.iter_mut().enumerate() {
                    let ch = c.min(shape.channels - 1);
                    let v = frame.get(ch, y as usize, x as usize).clamp(0.0, 1.0);
                    *slot = (v * 255.0).round() as u8;
                }
                image::Rgb(px)
            });
            img.save(dir.join(format!("frame_{q:04}.png")))
                .map_err(|e| HespError::Serialization(e.to_string()))?;
        }
        let tag = match sample.tag {
            Some(SplitTag::Train) => "train",
            Some(SplitTag::Test) => "test",
            None => "-",
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{tag}\n",
            sample.id,
            rel.display(),
            dataset.class_names()[sample.label]
        ));
    }
    let path = root.join("manifest.tsv");
    fs::write(&path, out)?;
    Ok(path)
}
