//! Linear dual encoder.
//!
//! Text branch: position-modulated mean of the token embeddings followed by
//! a fixed linear map. Visual branch: `pool × pool` average pooling, whose
//! grid doubles as the spatial feature map, followed by a fixed linear map.
//! Weights are either drawn from a seed (the mock used for desk-scale runs)
//! or loaded from an exported JSON file (the external adapter slot).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DualEncoder, Embedding, SpatialFeatureMap};
use crate::error::{HespError, Result};
use crate::tensor::{Frame, FrameShape, PixelRange};

/// Parameters for a seeded mock encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockEncoderConfig {
    pub embed_dim: usize,
    pub token_dim: usize,
    pub frame_shape: FrameShape,
    pub pool: usize,
    pub position_encoding: bool,
    pub logit_scale: f64,
    /// Word-vector scale. Near unit, so the normalized text embedding is not
    /// hypersensitive to small context updates.
    pub token_std: f64,
    pub seed: u64,
}

impl Default for MockEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            token_dim: 64,
            frame_shape: FrameShape::new(3, 224, 224),
            pool: 4,
            position_encoding: true,
            logit_scale: 100.0,
            token_std: 1.0,
            seed: 0,
        }
    }
}

/// Every frozen constant of a [`LinearDualEncoder`]; this is also the
/// on-disk format read by the external adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearWeights {
    pub embed_dim: usize,
    pub token_dim: usize,
    pub frame_shape: FrameShape,
    pub pool: usize,
    pub position_encoding: bool,
    pub logit_scale: f64,
    pub pixel_range: PixelRange,
    pub token_std: f64,
    pub vocab_seed: u64,
    /// `embed_dim × token_dim`, row-major.
    pub text_proj: Vec<f64>,
    pub text_bias: Vec<f64>,
    /// `embed_dim × (channels · (h/pool) · (w/pool))`, row-major.
    pub visual_proj: Vec<f64>,
    pub visual_bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearDualEncoder {
    weights: LinearWeights,
    digest: String,
    grid_h: usize,
    grid_w: usize,
}

impl LinearDualEncoder {
    pub fn mock(config: &MockEncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shape = config.frame_shape;
        let features = shape.channels * (shape.height / config.pool) * (shape.width / config.pool);
        let text_std = 1.0 / (config.token_dim as f64).sqrt();
        let vis_std = 1.0 / (features as f64).sqrt();
        let text_proj = gaussian(&mut rng, config.embed_dim * config.token_dim, text_std);
        let text_bias = gaussian(&mut rng, config.embed_dim, config.token_std * 0.5);
        let visual_proj = gaussian(&mut rng, config.embed_dim * features, vis_std);
        let visual_bias = gaussian(&mut rng, config.embed_dim, 0.01);
        let vocab_seed = config.seed ^ 0x746f_6b65_6e73;
        Self::from_weights(LinearWeights {
            embed_dim: config.embed_dim,
            token_dim: config.token_dim,
            frame_shape: shape,
            pool: config.pool,
            position_encoding: config.position_encoding,
            logit_scale: config.logit_scale,
            pixel_range: PixelRange::UNIT,
            token_std: config.token_std,
            vocab_seed,
            text_proj,
            text_bias,
            visual_proj,
            visual_bias,
        })
        .expect("seeded weights are self-consistent")
    }

    pub fn from_weights(weights: LinearWeights) -> Result<Self> {
        let shape = weights.frame_shape;
        if weights.pool == 0
            || !shape.height.is_multiple_of(weights.pool)
            || !shape.width.is_multiple_of(weights.pool)
        {
            return Err(HespError::Contract(format!(
                "pool {} must divide frame {shape}",
                weights.pool
            )));
        }
        if weights.logit_scale <= 0.0 {
            return Err(HespError::Contract("logit_scale must be positive".into()));
        }
        let grid_h = shape.height / weights.pool;
        let grid_w = shape.width / weights.pool;
        let features = shape.channels * grid_h * grid_w;
        let d = weights.embed_dim;
        if weights.text_proj.len() != d * weights.token_dim
            || weights.text_bias.len() != d
            || weights.visual_proj.len() != d * features
            || weights.visual_bias.len() != d
        {
            return Err(HespError::Contract(
                "encoder weight buffers do not match declared dimensions".into(),
            ));
        }
        let bytes = serde_json::to_vec(&weights)?;
        let digest = hex::encode(Sha256::digest(&bytes));
        Ok(Self {
            weights,
            digest,
            grid_h,
            grid_w,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HespError::Ingestion {
            path: path.to_path_buf(),
            row: None,
            reason: e.to_string(),
        })?;
        Self::from_weights(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(&self.weights)?)?;
        Ok(())
    }

    pub fn weights(&self) -> &LinearWeights {
        &self.weights
    }

    fn features(&self) -> usize {
        self.weights.frame_shape.channels * self.grid_h * self.grid_w
    }

    fn position_weight(&self, pos: usize, i: usize) -> f64 {
        if !self.weights.position_encoding {
            return 1.0;
        }
        let dim = self.weights.token_dim as f64;
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim);
        let angle = pos as f64 * freq;
        let pe = if i.is_multiple_of(2) {
            angle.sin()
        } else {
            angle.cos()
        };
        1.0 + 0.5 * pe
    }

    fn check_tokens(&self, tokens: &[Vec<f64>]) -> Result<()> {
        if tokens.is_empty() {
            return Err(HespError::Contract("empty token sequence".into()));
        }
        if let Some(bad) = tokens
            .iter()
            .position(|t| t.len() != self.weights.token_dim)
        {
            return Err(HespError::Contract(format!(
                "token {bad} has length {}, expected {}",
                tokens[bad].len(),
                self.weights.token_dim
            )));
        }
        Ok(())
    }

    fn check_frame(&self, frame: &Frame) -> Result<()> {
        if frame.shape() != self.weights.frame_shape {
            return Err(HespError::Contract(format!(
                "frame shape {} does not match encoder input {}",
                frame.shape(),
                self.weights.frame_shape
            )));
        }
        Ok(())
    }

    fn pool(&self, frame: &Frame) -> Vec<f64> {
        let p = self.weights.pool;
        let shape = frame.shape();
        let inv = 1.0 / (p * p) as f64;
        let mut pooled = vec![0.0; self.features()];
        let data = frame.data();
        for c in 0..shape.channels {
            for y in 0..shape.height {
                let row = &data[(c * shape.height + y) * shape.width..][..shape.width];
                let base = (c * self.grid_h + y / p) * self.grid_w;
                for (x, v) in row.iter().enumerate() {
                    pooled[base + x / p] += v;
                }
            }
        }
        for v in &mut pooled {
            *v *= inv;
        }
        pooled
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn matvec(matrix: &[f64], cols: usize, x: &[f64], bias: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            let row = &matrix[o * cols..(o + 1) * cols];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

fn matvec_transpose(matrix: &[f64], cols: usize, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (o, go) in g.iter().enumerate() {
        let row = &matrix[o * cols..(o + 1) * cols];
        for (acc, w) in out.iter_mut().zip(row) {
            *acc += go * w;
        }
    }
    out
}

impl DualEncoder for LinearDualEncoder {
    fn embed_dim(&self) -> usize {
        self.weights.embed_dim
    }

    fn token_dim(&self) -> usize {
        self.weights.token_dim
    }

    fn frame_shape(&self) -> FrameShape {
        self.weights.frame_shape
    }

    fn pixel_range(&self) -> PixelRange {
        self.weights.pixel_range
    }

    fn logit_scale(&self) -> f64 {
        self.weights.logit_scale
    }

    /// Whitespace tokenization; every word maps to a vector drawn from a
    /// generator seeded by SHA-256 of the word, so the table is unbounded
    /// and collision-free in practice.
    fn tokenize(&self, text: &str) -> Vec<Vec<f64>> {
        text.split_whitespace()
            .map(|word| {
                let mut hasher = Sha256::new();
                hasher.update(self.weights.vocab_seed.to_le_bytes());
                hasher.update(word.as_bytes());
                let digest = hasher.finalize();
                let mut seed = [0u8; 32];
                seed.copy_from_slice(&digest);
                let mut rng = ChaCha8Rng::from_seed(seed);
                gaussian(&mut rng, self.weights.token_dim, self.weights.token_std)
            })
            .collect()
    }

    fn encode_text(&self, tokens: &[Vec<f64>]) -> Result<Embedding> {
        self.check_tokens(tokens)?;
        let dim = self.weights.token_dim;
        let inv = 1.0 / tokens.len() as f64;
        let mut mixed = vec![0.0; dim];
        for (pos, token) in tokens.iter().enumerate() {
            for (i, v) in token.iter().enumerate() {
                mixed[i] += inv * v * self.position_weight(pos, i);
            }
        }
        Ok(Embedding(matvec(
            &self.weights.text_proj,
            dim,
            &mixed,
            &self.weights.text_bias,
        )))
    }

    fn encode_text_backward(&self, tokens: &[Vec<f64>], grad_out: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let dim = self.weights.token_dim;
        let inv = 1.0 / tokens.len() as f64;
        let g_mixed = matvec_transpose(&self.weights.text_proj, dim, grad_out);
        Ok((0..tokens.len())
            .map(|pos| {
                (0..dim)
                    .map(|i| inv * g_mixed[i] * self.position_weight(pos, i))
                    .collect()
            })
            .collect())
    }

    fn encode_frame(&self, frame: &Frame) -> Result<(Embedding, SpatialFeatureMap)> {
        self.check_frame(frame)?;
        let pooled = self.pool(frame);
        let emb = matvec(
            &self.weights.visual_proj,
            pooled.len(),
            &pooled,
            &self.weights.visual_bias,
        );
        let fmap = SpatialFeatureMap {
            channels: self.weights.frame_shape.channels,
            height: self.grid_h,
            width: self.grid_w,
            values: pooled,
        };
        Ok((Embedding(emb), fmap))
    }

    fn encode_frame_backward(&self, frame: &Frame, grad_out: &[f64]) -> Result<Frame> {
        self.check_frame(frame)?;
        let p = self.weights.pool;
        let inv = 1.0 / (p * p) as f64;
        let g_pooled = matvec_transpose(&self.weights.visual_proj, self.features(), grad_out);
        let shape = frame.shape();
        let mut grad = Frame::zeros(shape);
        let data = grad.data_mut();
        for c in 0..shape.channels {
            for y in 0..shape.height {
                let base = (c * self.grid_h + y / p) * self.grid_w;
                let row = &mut data[(c * shape.height + y) * shape.width..][..shape.width];
                for (x, v) in row.iter_mut().enumerate() {
                    *v = inv * g_pooled[base + x / p];
                }
            }
        }
        Ok(grad)
    }

    /// Mean absolute projection weight per input channel, averaged over
    /// output dimensions and grid positions.
    fn cam_channel_weights(&self) -> Vec<f64> {
        let features = self.features();
        let per_channel = self.grid_h * self.grid_w;
        let channels = self.weights.frame_shape.channels;
        let mut out = vec![0.0; channels];
        for o in 0..self.weights.embed_dim {
            let row = &self.weights.visual_proj[o * features..(o + 1) * features];
            for (f, w) in row.iter().enumerate() {
                out[f / per_channel] += w.abs();
            }
        }
        let denom = (self.weights.embed_dim * per_channel) as f64;
        out.iter_mut().for_each(|v| *v /= denom);
        out
    }

    fn digest(&self) -> String {
        self.digest.clone()
    }
}
