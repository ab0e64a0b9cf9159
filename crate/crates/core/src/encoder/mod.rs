//! Dual-encoder contract consumed by the prompting modules.
//!
//! Encoders are frozen: every method takes `&self`, and the backward
//! methods return gradients with respect to the *inputs* (token embeddings
//! or pixels) so that prompt parameters can be trained through them.

mod linear;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use linear::{LinearDualEncoder, LinearWeights, MockEncoderConfig};

use crate::error::{HespError, Result};
use crate::tensor::{Frame, FrameShape, PixelRange};

/// Output of either branch; length equals the encoder's `embed_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Last spatial stage of the visual branch.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SpatialFeatureMap {
    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

/// Non-negative saliency map at frame resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

pub trait DualEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;

    fn token_dim(&self) -> usize;

    fn frame_shape(&self) -> FrameShape;

    /// Pixel range the visual branch expects after preprocessing.
    fn pixel_range(&self) -> PixelRange;

    /// Temperature multiplier applied to cosine similarities.
    fn logit_scale(&self) -> f64;

    fn tokenize(&self, text: &str) -> Vec<Vec<f64>>;

    fn encode_text(&self, tokens: &[Vec<f64>]) -> Result<Embedding>;

    /// Gradient of `<grad_out, encode_text(tokens)>` with respect to each token.
    fn encode_text_backward(&self, tokens: &[Vec<f64>], grad_out: &[f64]) -> Result<Vec<Vec<f64>>>;

    fn encode_frame(&self, frame: &Frame) -> Result<(Embedding, SpatialFeatureMap)>;

    /// Gradient of `<grad_out, encode_frame(frame).0>` with respect to the pixels.
    fn encode_frame_backward(&self, frame: &Frame, grad_out: &[f64]) -> Result<Frame>;

    /// One weight per feature-map channel, used to collapse the feature map
    /// into a class-agnostic activation map.
    fn cam_channel_weights(&self) -> Vec<f64>;

    /// Stable digest of every frozen constant.
    fn digest(&self) -> String;

    /// Class-agnostic activation map: channel-weighted sum of the feature
    /// map, nearest-upsampled to frame size and shifted so its minimum is 0.
    fn saliency(&self, frame: &Frame) -> Result<Heatmap> {
        let (_, fmap) = self.encode_frame(frame)?;
        let weights = self.cam_channel_weights();
        if weights.len() != fmap.channels {
            return Err(HespError::Contract(format!(
                "{} CAM weights for {} feature channels",
                weights.len(),
                fmap.channels
            )));
        }
        let mut coarse = vec![0.0; fmap.height * fmap.width];
        for (c, w) in weights.iter().enumerate() {
            for y in 0..fmap.height {
                for x in 0..fmap.width {
                    coarse[y * fmap.width + x] += w * fmap.get(c, y, x);
                }
            }
        }
        let shape = frame.shape();
        let mut values = Vec::with_capacity(shape.height * shape.width);
        for y in 0..shape.height {
            let sy = y * fmap.height / shape.height;
            for x in 0..shape.width {
                let sx = x * fmap.width / shape.width;
                values.push(coarse[sy * fmap.width + sx]);
            }
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        for v in &mut values {
            *v -= min;
        }
        Ok(Heatmap::new(shape.height, shape.width, values))
    }
}

/// Anything that can produce a saliency map for a frame. Blanket-implemented
/// for encoders; tests wrap it to count calls.
pub trait SaliencyProvider {
    fn saliency_map(&self, frame: &Frame) -> Result<Heatmap>;
}

impl<E: DualEncoder + ?Sized> SaliencyProvider for E {
    fn saliency_map(&self, frame: &Frame) -> Result<Heatmap> {
        self.saliency(frame)
    }
}

/// Saliency of an encoder behind a trait object.
pub struct EncoderSaliency<'a>(pub &'a dyn DualEncoder);

impl SaliencyProvider for EncoderSaliency<'_> {
    fn saliency_map(&self, frame: &Frame) -> Result<Heatmap> {
        self.0.saliency(frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Mock,
    External,
}

/// Builds the encoder a run config asks for. `external` loads exported
/// linear projection heads from `weights_path`.
pub fn build_encoder(
    kind: EncoderKind,
    weights_path: Option<&Path>,
    mock: &MockEncoderConfig,
) -> Result<LinearDualEncoder> {
    match kind {
        EncoderKind::Mock => Ok(LinearDualEncoder::mock(mock)),
        EncoderKind::External => {
            let path = weights_path.ok_or_else(|| {
                HespError::Config("encoder = external requires weights_path".into())
            })?;
            LinearDualEncoder::load(path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> LinearDualEncoder {
        LinearDualEncoder::mock(&MockEncoderConfig {
            frame_shape: FrameShape::new(3, 16, 16),
            ..Default::default()
        })
    }

    #[test]
    fn saliency_peaks_on_the_bright_quadrant() {
        let shape = FrameShape::new(3, 16, 16);
        let mut frame = Frame::filled(shape, 0.1);
        for c in 0..3 {
            for y in 8..16 {
                for x in 0..8 {
                    frame.set(c, y, x, 0.9);
                }
            }
        }
        let map = encoder().saliency(&frame).unwrap();
        let best = (0..map.values.len())
            .max_by(|&a, &b| map.values[a].total_cmp(&map.values[b]))
            .unwrap();
        let (y, x) = (best / map.width, best % map.width);
        assert!(y >= 8 && x < 8, "peak at ({y}, {x})");
    }

    #[test]
    fn constant_frame_gives_flat_map() {
        let map = encoder()
            .saliency(&Frame::filled(FrameShape::new(3, 16, 16), 0.4))
            .unwrap();
        assert!(map.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn map_matches_frame_and_is_non_negative() {
        let shape = FrameShape::new(3, 16, 16);
        let data = (0..shape.len())
            .map(|i| ((i * 37) % 11) as f64 / 10.0)
            .collect();
        let map = encoder()
            .saliency(&Frame::from_vec(shape, data).unwrap())
            .unwrap();
        assert_eq!((map.height, map.width), (16, 16));
        assert!(map.values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn external_kind_needs_weights() {
        let r = build_encoder(EncoderKind::External, None, &MockEncoderConfig::default());
        assert!(matches!(r, Err(HespError::Config(_))));
    }
}
