//! Known versus unknown knownness histograms rendered to PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::evaluate::read_scores;
use crate::error::{HespError, Result};

pub const DEFAULT_BINS: usize = 20;

/// Per-population bin fractions over knownness rescaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHistogram {
    pub known: Vec<f64>,
    pub unknown: Vec<f64>,
}

/// Min-max rescaling; constant input maps to 0.
pub fn normalize_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

pub fn histogram(knownness: &[f64], is_known: &[bool], bins: usize) -> Result<ScoreHistogram> {
    let n_known = is_known.iter().filter(|k| **k).count();
    let n_unknown = is_known.len() - n_known;
    if n_known == 0 || n_unknown == 0 {
        return Err(HespError::Plot(format!(
            "need both populations, got {n_known} known and {n_unknown} unknown"
        )));
    }
    let bins = bins.max(1);
    let unit = normalize_unit(knownness);
    let mut known = vec![0.0; bins];
    let mut unknown = vec![0.0; bins];
    for (v, &k) in unit.iter().zip(is_known) {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        if k {
            known[b] += 1.0 / n_known as f64;
        } else {
            unknown[b] += 1.0 / n_unknown as f64;
        }
    }
    Ok(ScoreHistogram { known, unknown })
}

const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 30;

fn blend(img: &mut RgbImage, x: u32, y: u32, color: [u8; 3]) {
    let p = img.get_pixel_mut(x, y);
    for (v, c) in p.0.iter_mut().zip(color) {
        *v = ((*v as u16 + c as u16) / 2) as u8;
    }
}

/// Overlaid bars: known in blue, unknown in red, shared bins purple.
pub fn render(hist: &ScoreHistogram) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let bins = hist.known.len() as u32;
    let plot_w = WIDTH - 2 * MARGIN;
    let plot_h = HEIGHT - 2 * MARGIN;
    let peak = hist
        .known
        .iter()
        .chain(&hist.unknown)
        .cloned()
        .fold(0.0, f64::max)
        .max(1e-12);
    let bar_w = (plot_w / bins).max(1);
    for (values, color) in [
        (&hist.known, [40u8, 90, 220]),
        (&hist.unknown, [220u8, 50, 40]),
    ] {
        for (b, v) in values.iter().enumerate() {
            let h = ((v / peak) * plot_h as f64).round() as u32;
            let x0 = MARGIN + b as u32 * bar_w;
            for x in x0..(x0 + bar_w).min(WIDTH - MARGIN) {
                for y in (HEIGHT - MARGIN - h)..(HEIGHT - MARGIN) {
                    blend(&mut img, x, y, color);
                }
            }
        }
    }
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, Rgb([0, 0, 0]));
    }
    for y in MARGIN..=HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    img
}

/// Reads a scores file and writes the histogram figure to `out`.
pub fn plot_score_distributions(scores: &Path, out: &Path, bins: usize) -> Result<ScoreHistogram> {
    let rows = read_scores(scores)?;
    let knownness: Vec<f64> = rows.iter().map(|r| r.knownness).collect();
    let is_known: Vec<bool> = rows.iter().map(|r| r.is_known).collect();
    let hist = histogram(&knownness, &is_known, bins)?;
    render(&hist)
        .save(out)
        .map_err(|e| HespError::Plot(format!("{}: {e}", out.display())))?;
    Ok(hist)
}
