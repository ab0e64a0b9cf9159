//! Pixel-space prompting: the saliency-placed patch, temporal pooling of
//! frame embeddings, and the bank of negative frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, Embedding, Heatmap, SaliencyProvider};
use crate::error::{HespError, Result};
use crate::tensor::{l2_normalize, Frame, FrameShape, PixelRange};

pub const DEFAULT_PATCH_SIDE: usize = 56;

/// Square prompt region. Always lies inside the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRect {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Prompted pixel = patch value.
    Replace,
    /// Prompted pixel = clamp(frame + patch) to the pixel range.
    Additive,
}

/// Where the learnable pixels go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptRegion {
    Rect(MaskRect),
    /// Frame border of the given width.
    Border(usize),
}

impl PromptRegion {
    /// Patch coordinates covering frame pixel `(y, x)`, if any.
    #[inline]
    fn patch_coord(&self, shape: FrameShape, y: usize, x: usize) -> Option<(usize, usize)> {
        match *self {
            PromptRegion::Rect(r) => {
                (y >= r.top && y < r.top + r.side && x >= r.left && x < r.left + r.side)
                    .then(|| (y - r.top, x - r.left))
            }
            PromptRegion::Border(w) => {
                (y < w || x < w || y + w >= shape.height || x + w >= shape.width).then_some((y, x))
            }
        }
    }

    fn patch_shape(&self, frame: FrameShape) -> FrameShape {
        match *self {
            PromptRegion::Rect(r) => FrameShape::new(frame.channels, r.side, r.side),
            PromptRegion::Border(_) => frame,
        }
    }
}

/// Learnable pixels. Square `channels × l × l` for rectangle prompts,
/// full-frame for border prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPatch {
    pub shape: FrameShape,
    pub values: Vec<f64>,
}

impl VisualPatch {
    pub fn zeros(shape: FrameShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(c, y, x)]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Inclusive 2-D prefix sums with a zero guard row and column.
struct PrefixSum {
    width: usize,
    sums: Vec<f64>,
}

impl PrefixSum {
    fn new(map: &Heatmap) -> Self {
        let w = map.width + 1;
        let mut sums = vec![0.0; (map.height + 1) * w];
        for y in 0..map.height {
            let mut row = 0.0;
            for x in 0..map.width {
                row += map.get(y, x);
                sums[(y + 1) * w + x + 1] = sums[y * w + x + 1] + row;
            }
        }
        Self { width: w, sums }
    }

    fn window(&self, top: usize, left: usize, side: usize) -> f64 {
        let w = self.width;
        let (b, r) = (top + side, left + side);
        self.sums[b * w + r] - self.sums[top * w + r] - self.sums[b * w + left]
            + self.sums[top * w + left]
    }
}

/// The `side × side` window with the largest summed saliency. Ties go to the
/// smallest top, then the smallest left.
pub fn locate_mask_in_heatmap(map: &Heatmap, side: usize) -> Result<MaskRect> {
    if side == 0 || side > map.height || side > map.width {
        return Err(HespError::Domain(format!(
            "mask side {side} does not fit a {}x{} map",
            map.height, map.width
        )));
    }
    let prefix = PrefixSum::new(map);
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for top in 0..=map.height - side {
        for left in 0..=map.width - side {
            let s = prefix.window(top, left, side);
            if s > best.0 {
                best = (s, top, left);
            }
        }
    }
    Ok(MaskRect {
        top: best.1,
        left: best.2,
        side,
    })
}

/// Saliency-guided mask from a video's first frame.
pub fn locate_mask(
    first_frame: &Frame,
    provider: &dyn SaliencyProvider,
    side: usize,
) -> Result<MaskRect> {
    let shape = first_frame.shape();
    if side > shape.height.min(shape.width) {
        return Err(HespError::Domain(format!(
            "mask side {side} exceeds frame {}x{}",
            shape.height, shape.width
        )));
    }
    locate_mask_in_heatmap(&provider.saliency_map(first_frame)?, side)
}

/// Uniformly placed rectangle, used by the random-patch ablation.
pub fn random_rect(shape: FrameShape, side: usize, seed: u64) -> Result<MaskRect> {
    if side > shape.height.min(shape.width) {
        return Err(HespError::Domain(format!(
            "mask side {side} exceeds frame {shape}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(MaskRect {
        top: rng.random_range(0..=shape.height - side),
        left: rng.random_range(0..=shape.width - side),
        side,
    })
}

fn check_patch(frame: &Frame, region: &PromptRegion, patch: &VisualPatch) -> Result<()> {
    let shape = frame.shape();
    if let PromptRegion::Rect(r) = region {
        if r.top + r.side > shape.height || r.left + r.side > shape.width {
            return Err(HespError::Contract(format!(
                "mask {r:?} leaves frame {shape}"
            )));
        }
    }
    let expected = region.patch_shape(shape);
    if patch.shape != expected {
        return Err(HespError::Contract(format!(
            "patch is {}, region needs {expected}",
            patch.shape
        )));
    }
    Ok(())
}

/// Masked fusion `(1 − M)·frame + M·δ` with a binary mask `M`; in additive
/// mode the masked pixels are `clamp(frame + δ)` instead of `δ`.
pub fn apply_visual_prompt(
    frame: &Frame,
    region: &PromptRegion,
    patch: &VisualPatch,
    mode: PatchMode,
    range: PixelRange,
) -> Result<Frame> {
    check_patch(frame, region, patch)?;
    let shape = frame.shape();
    let mut out = frame.clone();
    for y in 0..shape.height {
        for x in 0..shape.width {
            if let Some((py, px)) = region.patch_coord(shape, y, x) {
                for c in 0..shape.channels {
                    let p = patch.get(c, py, px);
                    let v = match mode {
                        PatchMode::Replace => p,
                        PatchMode::Additive => range.clamp(frame.get(c, y, x) + p),
                    };
                    out.set(c, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

/// Accumulates into `patch_grad` the gradient of `<grad_out, prompted>` with
/// respect to the patch.
pub fn apply_visual_prompt_backward(
    frame: &Frame,
    region: &PromptRegion,
    patch: &VisualPatch,
    mode: PatchMode,
    range: PixelRange,
    grad_out: &Frame,
    patch_grad: &mut VisualPatch,
) -> Result<()> {
    check_patch(frame, region, patch)?;
    let shape = frame.shape();
    for y in 0..shape.height {
        for x in 0..shape.width {
            if let Some((py, px)) = region.patch_coord(shape, y, x) {
                for c in 0..shape.channels {
                    let pass = match mode {
                        PatchMode::Replace => true,
                        PatchMode::Additive => {
                            range.contains(frame.get(c, y, x) + patch.get(c, py, px))
                        }
                    };
                    if pass {
                        let i = patch.index(c, py, px);
                        patch_grad.values[i] += grad_out.get(c, y, x);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Gradient of `<grad_out, prompted>` with respect to the input frame.
pub fn apply_visual_prompt_frame_backward(
    frame: &Frame,
    region: &PromptRegion,
    patch: &VisualPatch,
    mode: PatchMode,
    range: PixelRange,
    grad_out: &Frame,
) -> Result<Frame> {
    check_patch(frame, region, patch)?;
    let shape = frame.shape();
    let mut grad = grad_out.clone();
    for y in 0..shape.height {
        for x in 0..shape.width {
            if let Some((py, px)) = region.patch_coord(shape, y, x) {
                for c in 0..shape.channels {
                    let pass = match mode {
                        PatchMode::Replace => false,
                        PatchMode::Additive => {
                            range.contains(frame.get(c, y, x) + patch.get(c, py, px))
                        }
                    };
                    if !pass {
                        grad.set(c, y, x, 0.0);
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Mean of per-frame embeddings before normalization.
pub fn pool_frames(frames: &[Frame], encoder: &dyn DualEncoder) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(HespError::Contract(
            "cannot pool an empty frame sequence".into(),
        ));
    }
    let mut mean = vec![0.0; encoder.embed_dim()];
    let inv = 1.0 / frames.len() as f64;
    for frame in frames {
        let (e, _) = encoder.encode_frame(frame)?;
        for (m, v) in mean.iter_mut().zip(e.values()) {
            *m += inv * v;
        }
    }
    Ok(mean)
}

/// Temporal mean of frame embeddings, L2-normalized.
pub fn encode_video(frames: &[Frame], encoder: &dyn DualEncoder) -> Result<Embedding> {
    Ok(Embedding(l2_normalize(&pool_frames(frames, encoder)?)))
}

/// One learnable negative frame per known class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeVisualBank {
    pub tensors: Vec<Frame>,
}

impl NegativeVisualBank {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Frame::is_finite)
    }
}

/// I.i.d. uniform entries over `range`.
pub fn init_negative_bank(
    classes: usize,
    shape: FrameShape,
    range: PixelRange,
    seed: u64,
) -> NegativeVisualBank {
    assert!(classes >= 1, "negative bank needs at least one class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = (0..classes)
        .map(|_| {
            let data = (0..shape.len())
                .map(|_| rng.random_range(range.lo..=range.hi))
                .collect();
            Frame::from_vec(shape, data).expect("sized buffer")
        })
        .collect();
    NegativeVisualBank { tensors }
}

/// Embedding of every bank tensor, L2-normalized, in bank order.
pub fn encode_negative_bank(
    bank: &NegativeVisualBank,
    encoder: &dyn DualEncoder,
) -> Result<Vec<Embedding>> {
    bank.tensors
        .iter()
        .map(|t| Ok(Embedding(l2_normalize(encoder.encode_frame(t)?.0.values()))))
        .collect()
}
