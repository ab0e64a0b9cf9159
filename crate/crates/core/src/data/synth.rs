//! Deterministic synthetic video datasets.
//!
//! Class `k` of `n` owns one cell of a `ceil(sqrt n) × ceil(sqrt n)` grid and
//! a hue `k / n`. Each video shows a square blob of that hue on a flat
//! background. The blob starts near its cell centre and drifts along the
//! class direction `2πk/n` over the video. Per-sample jitter is an integer
//! offset in `[-2, 2]²` plus an amplitude factor in `[0.9, 1.1]`, both drawn
//! from `(seed, class, sample)`. Gaussian pixel noise of std `noise_level` is
//! added last and the result is clamped to `[0, 1]`.
//!
//! Because blobs of different classes start in different grid cells, clean
//! class templates are separated by at least
//! [`SyntheticSpec::min_signature_distance`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, VideoSample};
use crate::error::{HespError, Result};
use crate::tensor::{euclidean, Frame, FrameShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassSignal {
    /// Blob side in pixels; 0 means `height / 8`.
    pub blob_side: usize,
    /// Total displacement over a video, in pixels.
    pub drift: f64,
    pub background: f64,
    pub amplitude: f64,
}

impl Default for ClassSignal {
    fn default() -> Self {
        Self {
            blob_side: 0,
            drift: 4.0,
            background: 0.3,
            amplitude: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub frame_shape: FrameShape,
    pub class_signal: ClassSignal,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 7,
            videos_per_class: 20,
            frames_per_video: 8,
            frame_shape: FrameShape::new(3, 64, 64),
            class_signal: ClassSignal::default(),
            noise_level: 0.05,
            seed: 1,
        }
    }
}

/// Per-sample deviation from the class template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub dy: i64,
    pub dx: i64,
    pub gain: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        dy: 0,
        dx: 0,
        gain: 1.0,
    };
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 3 {
            return Err(HespError::Contract(
                "synthetic data needs at least 3 classes".into(),
            ));
        }
        if self.videos_per_class == 0 || self.frames_per_video == 0 {
            return Err(HespError::Contract(
                "videos_per_class and frames_per_video must be positive".into(),
            ));
        }
        if !self.noise_level.is_finite() || self.noise_level < 0.0 {
            return Err(HespError::Contract(
                "noise_level must be finite and >= 0".into(),
            ));
        }
        let s = self.frame_shape;
        if s.channels == 0 || s.height < 8 || s.width < 8 {
            return Err(HespError::Contract(format!("frame shape {s} too small")));
        }
        Ok(())
    }

    fn blob_side(&self) -> usize {
        match self.class_signal.blob_side {
            0 => (self.frame_shape.height / 8).max(2),
            s => s,
        }
    }

    fn grid(&self) -> usize {
        (self.num_classes as f64).sqrt().ceil() as usize
    }

    fn anchor(&self, class: usize) -> (f64, f64) {
        let g = self.grid();
        let cell_h = self.frame_shape.height as f64 / g as f64;
        let cell_w = self.frame_shape.width as f64 / g as f64;
        let (row, col) = (class / g, class % g);
        ((row as f64 + 0.5) * cell_h, (col as f64 + 0.5) * cell_w)
    }

    fn color(&self, class: usize) -> [f64; 3] {
        hue_to_rgb(class as f64 / self.num_classes as f64)
    }

    /// Smallest pairwise distance between clean, unjittered first frames of
    /// two different classes.
    pub fn min_signature_distance(&self) -> f64 {
        let templates: Vec<Frame> = (0..self.num_classes)
            .map(|k| render_clean_frame(self, k, Jitter::NONE, 0))
            .collect();
        let mut best = f64::INFINITY;
        for i in 0..templates.len() {
            for j in i + 1..templates.len() {
                best = best.min(euclidean(templates[i].data(), templates[j].data()));
            }
        }
        best
    }
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let x = 1.0 - ((h6 % 2.0) - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Jitter applied to sample `index` of `class`.
pub fn sample_jitter(spec: &SyntheticSpec, class: usize, index: usize) -> Jitter {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    Jitter {
        dy: rng.random_range(-2..=2),
        dx: rng.random_range(-2..=2),
        gain: rng.random_range(0.9..=1.1),
    }
}

/// Noise-free frame `q` of a class-`class` video with the given jitter.
pub fn render_clean_frame(spec: &SyntheticSpec, class: usize, jitter: Jitter, q: usize) -> Frame {
    let shape = spec.frame_shape;
    let sig = &spec.class_signal;
    let side = spec.blob_side();
    let (ay, ax) = spec.anchor(class);
    let angle = std::f64::consts::TAU * class as f64 / spec.num_classes as f64;
    let t = if spec.frames_per_video > 1 {
        q as f64 / (spec.frames_per_video - 1) as f64 - 0.5
    } else {
        0.0
    };
    let cy = ay + t * sig.drift * angle.sin() + jitter.dy as f64;
    let cx = ax + t * sig.drift * angle.cos() + jitter.dx as f64;
    let max_top = (shape.height - side) as f64;
    let max_left = (shape.width - side) as f64;
    let top = (cy - side as f64 / 2.0).round().clamp(0.0, max_top) as usize;
    let left = (cx - side as f64 / 2.0).round().clamp(0.0, max_left) as usize;
    let color = spec.color(class);

    let mut frame = Frame::filled(shape, sig.background);
    for c in 0..shape.channels {
        let v = (sig.background + sig.amplitude * jitter.gain * color[c % 3]).clamp(0.0, 1.0);
        for y in top..top + side {
            for x in left..left + side {
                frame.set(c, y, x, v);
            }
        }
    }
    frame
}

pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let noise = if spec.noise_level > 0.0 {
        Some(Normal::new(0.0, spec.noise_level).expect("validated noise level"))
    } else {
        None
    };
    let class_names: Vec<String> = (0..spec.num_classes)
        .map(|k| format!("class{k:02}"))
        .collect();
    let mut samples = Vec::with_capacity(spec.num_classes * spec.videos_per_class);
    for class in 0..spec.num_classes {
        for index in 0..spec.videos_per_class {
            let jitter = sample_jitter(spec, class, index);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x006e_6f69_7365);
            rng.set_stream(((class as u64) << 32) | index as u64);
            let frames = (0..spec.frames_per_video)
                .map(|q| {
                    let mut f = render_clean_frame(spec, class, jitter, q);
                    if let Some(dist) = &noise {
                        for v in f.data_mut() {
                            *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
                        }
                    }
                    f
                })
                .collect();
            samples.push(VideoSample {
                id: format!("syn_c{class:02}_v{index:03}"),
                frames,
                label: class,
                source: "synthetic".to_string(),
                tag: None,
            });
        }
    }
    Dataset::new(samples, class_names, spec.frame_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 7,
            videos_per_class: 10,
            frames_per_video: 8,
            noise_level: noise,
            seed: 1,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_shapes() {
        let ds = synthesize_dataset(&spec(0.05)).unwrap();
        assert_eq!(ds.len(), 70);
        for s in ds.samples() {
            assert_eq!(s.frames.len(), 8);
            assert!(s.frames.iter().all(|f| f.shape() == ds.frame_shape()));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(
            synthesize_dataset(&spec(0.1)).unwrap(),
            synthesize_dataset(&spec(0.1)).unwrap()
        );
    }

    #[test]
    fn noiseless_samples_differ_only_by_jitter() {
        let sp = spec(0.0);
        let ds = synthesize_dataset(&sp).unwrap();
        for (i, s) in ds
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == 3)
        {
            let index = i - 3 * sp.videos_per_class;
            let jitter = sample_jitter(&sp, 3, index);
            for (q, f) in s.frames.iter().enumerate() {
                assert_eq!(f, &render_clean_frame(&sp, 3, jitter, q));
            }
        }
    }

    #[test]
    fn class_templates_are_separated() {
        let sp = spec(0.0);
        let side = sp.blob_side() as f64;
        // disjoint blobs: each template differs on at least one full blob
        assert!(sp.min_signature_distance() >= side * 0.3);
    }

    #[test]
    fn nearest_centroid_beats_chance() {
        let sp = spec(0.0);
        let ds = synthesize_dataset(&sp).unwrap();
        let mean_image = |s: &VideoSample| -> Vec<f64> {
            let mut acc = vec![0.0; sp.frame_shape.len()];
            for f in &s.frames {
                for (a, v) in acc.iter_mut().zip(f.data()) {
                    *a += v / s.frames.len() as f64;
                }
            }
            acc
        };
        // centroids from even-indexed videos, evaluate on odd-indexed ones
        let mut centroids = vec![vec![0.0; sp.frame_shape.len()]; sp.num_classes];
        let mut counts = vec![0usize; sp.num_classes];
        for (i, s) in ds.samples().iter().enumerate() {
            if i % 2 == 0 {
                for (c, v) in centroids[s.label].iter_mut().zip(mean_image(s)) {
                    *c += v;
                }
                counts[s.label] += 1;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let (mut correct, mut total) = (0, 0);
        for (i, s) in ds.samples().iter().enumerate() {
            if i % 2 == 1 {
                let m = mean_image(s);
                let pred = (0..sp.num_classes)
                    .min_by(|&a, &b| {
                        euclidean(&m, &centroids[a]).total_cmp(&euclidean(&m, &centroids[b]))
                    })
                    .unwrap();
                correct += (pred == s.label) as usize;
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 > 1.0 / sp.num_classes as f64);
    }

    #[test]
    fn rejects_small_class_counts() {
        let mut sp = spec(0.0);
        sp.num_classes = 2;
        assert!(synthesize_dataset(&sp).is_err());
    }
}
