//! Learnable prompt state and the batched forward/backward pass that ties
//! the frozen encoder, both prompt branches, the three probability heads and
//! the objective together.

use serde::{Deserialize, Serialize};

use crate::data::{sample_frames, VideoSample};
use crate::encoder::{DualEncoder, EncoderSaliency};
use crate::error::{HespError, Result};
use crate::inference::{ScoreBundle, DEFAULT_NE_SCALE};
use crate::objectives::{
    cross_entropy_grad, ne_contrastive_rows, negative_alignment_with_grad,
    supervised_contrastive_with_grad, total_loss, BatchFeatures, LossBreakdown, LossWeights,
    ObjectiveConfig, DEFAULT_SUPCON_TAU,
};
use crate::tensor::{
    dot, euclidean, l2_normalize, l2_normalize_backward, softmax_backward, Frame, Rows,
};
use crate::text_prompt::{
    encode_known_prompts, encode_known_prompts_backward, init_context, negative_prompt,
    NegativePromptCache, TextContext, DEFAULT_CONTEXT_LEN, DEFAULT_CONTEXT_STD,
};
use crate::visual_prompt::{
    apply_visual_prompt, apply_visual_prompt_backward, init_negative_bank, locate_mask,
    random_rect, MaskRect, NegativeVisualBank, PatchMode, PromptRegion, VisualPatch,
    DEFAULT_PATCH_SIDE,
};

/// Which prompt branches are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modules {
    #[serde(rename = "tp")]
    Text,
    #[serde(rename = "tp+vp")]
    TextAndVisual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualPromptStyle {
    /// Patch placed on the most salient window.
    MaskedPatch,
    /// Learnable frame border of width `patch_size / 4`.
    Padding,
    /// Patch placed uniformly at random per video.
    RandomPatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeText {
    Fixed,
    /// A learnable context prepended to the fixed negative sentence.
    Learnable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub context_len: usize,
    pub ctx_init_std: f64,
    pub patch_size: usize,
    pub patch_mode: PatchMode,
    pub visual_prompt_style: VisualPromptStyle,
    pub modules: Modules,
    pub negative_text: NegativeText,
    pub patch_per_frame: bool,
    pub num_frames: usize,
    pub ne_scale: f64,
    pub ne_logit_sign: f64,
    pub supcon_tau: f64,
    pub loss_weights: LossWeights,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            context_len: DEFAULT_CONTEXT_LEN,
            ctx_init_std: DEFAULT_CONTEXT_STD,
            patch_size: DEFAULT_PATCH_SIDE,
            patch_mode: PatchMode::Additive,
            visual_prompt_style: VisualPromptStyle::MaskedPatch,
            modules: Modules::TextAndVisual,
            negative_text: NegativeText::Fixed,
            patch_per_frame: false,
            num_frames: crate::data::DEFAULT_NUM_FRAMES,
            ne_scale: DEFAULT_NE_SCALE,
            ne_logit_sign: 1.0,
            supcon_tau: DEFAULT_SUPCON_TAU,
            loss_weights: LossWeights::default(),
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HespError::Config(m.to_string()));
        if self.context_len == 0 {
            return bad("context_len must be >= 1");
        }
        if self.num_frames == 0 {
            return bad("num_frames must be >= 1");
        }
        if self.patch_size == 0 {
            return bad("patch_size must be >= 1");
        }
        if !(self.ne_scale > 0.0) || !(self.supcon_tau > 0.0) || !(self.ctx_init_std >= 0.0) {
            return bad("ne_scale and supcon_tau must be positive, ctx_init_std non-negative");
        }
        if self.ne_logit_sign.abs() != 1.0 {
            return bad("ne_logit_sign must be 1 or -1");
        }
        let w = self.loss_weights;
        if [w.kn_ce, w.kn_cl, w.ne_ce, w.ne_clip, w.h, w.ne_cl]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return bad("loss weights must be finite and >= 0");
        }
        Ok(())
    }

    pub fn visual(&self) -> bool {
        self.modules == Modules::TextAndVisual
    }
}

/// Every learnable tensor. The encoder is not part of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub context: TextContext,
    /// Empty when visual prompting is off; one entry per frame index with
    /// `patch_per_frame`, otherwise one shared patch.
    pub patches: Vec<VisualPatch>,
    pub bank: NegativeVisualBank,
    #[serde(default)]
    pub negative_context: Option<TextContext>,
}

impl PromptState {
    pub fn init(
        config: &PromptConfig,
        classes: usize,
        encoder: &dyn DualEncoder,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let shape = encoder.frame_shape();
        let context = init_context(
            classes,
            config.context_len,
            encoder.token_dim(),
            config.ctx_init_std,
            seed,
        );
        let patches = if config.visual() {
            let patch_shape = match config.visual_prompt_style {
                VisualPromptStyle::Padding => shape,
                _ => {
                    if config.patch_size > shape.height.min(shape.width) {
                        return Err(HespError::Config(format!(
                            "patch_size {} exceeds frame {shape}",
                            config.patch_size
                        )));
                    }
                    crate::tensor::FrameShape::new(
                        shape.channels,
                        config.patch_size,
                        config.patch_size,
                    )
                }
            };
            let n = if config.patch_per_frame {
                config.num_frames
            } else {
                1
            };
            vec![VisualPatch::zeros(patch_shape); n]
        } else {
            Vec::new()
        };
        let bank = init_negative_bank(classes, shape, encoder.pixel_range(), seed ^ 0x6261_6e6b);
        let negative_context = (config.negative_text == NegativeText::Learnable).then(|| {
            init_context(
                classes,
                config.context_len,
                encoder.token_dim(),
                config.ctx_init_std,
                seed ^ 0x006e_6567,
            )
        });
        Ok(Self {
            context,
            patches,
            bank,
            negative_context,
        })
    }

    pub fn classes(&self) -> usize {
        self.context.classes
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.params_mut().into_iter().for_each(|p| p.fill(0.0));
        z
    }

    /// All parameter blocks in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.context.values];
        out.extend(self.patches.iter().map(|p| p.values.as_slice()));
        out.extend(self.bank.tensors.iter().map(Frame::data));
        if let Some(n) = &self.negative_context {
            out.push(&n.values);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.context.values];
        out.extend(self.patches.iter_mut().map(|p| p.values.as_mut_slice()));
        out.extend(self.bank.tensors.iter_mut().map(Frame::data_mut));
        if let Some(n) = &mut self.negative_context {
            out.push(&mut n.values);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params().concat()
    }

    /// `self += alpha · other`, blockwise. Both must share a layout.
    pub fn axpy(&mut self, alpha: f64, other: &PromptState) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.params_mut()
            .into_iter()
            .flatten()
            .for_each(|v| *v *= alpha);
    }

    pub fn dot(&self, other: &PromptState) -> f64 {
        self.params()
            .iter()
            .zip(other.params())
            .map(|(a, b)| dot(a, b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Name of the first block holding a non-finite value.
    pub fn non_finite_block(&self) -> Option<&'static str> {
        if !self.context.is_finite() {
            return Some("text_context");
        }
        if !self.patches.iter().all(VisualPatch::is_finite) {
            return Some("visual_patch");
        }
        if !self.bank.is_finite() {
            return Some("negative_bank");
        }
        if self
            .negative_context
            .as_ref()
            .is_some_and(|n| !n.is_finite())
        {
            return Some("negative_context");
        }
        None
    }
}

/// A video ready for the forward pass: `num_frames` frames plus where the
/// visual prompt goes.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub frames: Vec<Frame>,
    pub region: Option<PromptRegion>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub bundle: ScoreBundle,
    pub features: BatchFeatures,
    raw_video: Rows,
    raw_text: Rows,
    raw_neg_text: Rows,
    raw_neg_visual: Rows,
    prompted: Vec<Vec<Frame>>,
}

/// The frozen encoder plus the prompt configuration for one class list.
pub struct HespModel<'a> {
    encoder: &'a dyn DualEncoder,
    config: PromptConfig,
    class_names: Vec<String>,
    negative_sentences: Vec<String>,
    fixed_negatives: NegativePromptCache,
}

impl<'a> HespModel<'a> {
    pub fn new(
        encoder: &'a dyn DualEncoder,
        config: PromptConfig,
        class_names: Vec<String>,
    ) -> Result<Self> {
        config.validate()?;
        if class_names.len() < 2 {
            return Err(HespError::Contract(
                "at least two known classes are required".into(),
            ));
        }
        let negative_sentences = class_names.iter().map(|n| negative_prompt(n)).collect();
        Ok(Self {
            encoder,
            config,
            class_names,
            negative_sentences,
            fixed_negatives: NegativePromptCache::default(),
        })
    }

    pub fn encoder(&self) -> &dyn DualEncoder {
        self.encoder
    }

    pub fn config(&self) -> &PromptConfig {
        &self.config
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn init_state(&self, seed: u64) -> Result<PromptState> {
        PromptState::init(&self.config, self.class_names.len(), self.encoder, seed)
    }

    /// Prompt region for a video, computed from its un-prompted first frame.
    pub fn region_for(&self, first_frame: &Frame, video_seed: u64) -> Result<Option<PromptRegion>> {
        if !self.config.visual() {
            return Ok(None);
        }
        let side = self.config.patch_size;
        Ok(Some(match self.config.visual_prompt_style {
            VisualPromptStyle::MaskedPatch => PromptRegion::Rect(locate_mask(
                first_frame,
                &EncoderSaliency(self.encoder),
                side,
            )?),
            VisualPromptStyle::RandomPatch => {
                PromptRegion::Rect(random_rect(first_frame.shape(), side, video_seed)?)
            }
            VisualPromptStyle::Padding => PromptRegion::Border((side / 4).max(1)),
        }))
    }

    pub fn prepare(&self, sample: &VideoSample, video_seed: u64) -> Result<PreparedVideo> {
        let frames = sample_frames(sample, self.config.num_frames);
        let region = self.region_for(sample.first_frame(), video_seed)?;
        Ok(PreparedVideo { frames, region })
    }

    fn patch_for<'s>(&self, state: &'s PromptState, q: usize) -> &'s VisualPatch {
        if state.patches.len() > 1 {
            &state.patches[q]
        } else {
            &state.patches[0]
        }
    }

    fn check_state(&self, state: &PromptState) -> Result<()> {
        let k = self.class_names.len();
        if state.classes() != k || state.bank.len() != k {
            return Err(HespError::Compatibility(format!(
                "prompt state has {} classes, model has {k}",
                state.classes()
            )));
        }
        if self.config.visual() {
            let want = if self.config.patch_per_frame {
                self.config.num_frames
            } else {
                1
            };
            if state.patches.len() != want {
                return Err(HespError::Compatibility(format!(
                    "state holds {} patches, configuration needs {want}",
                    state.patches.len()
                )));
            }
        }
        if (self.config.negative_text == NegativeText::Learnable)
            != state.negative_context.is_some()
        {
            return Err(HespError::Compatibility(
                "negative text mode differs from the state".into(),
            ));
        }
        Ok(())
    }

    fn prompt_frames(&self, state: &PromptState, video: &PreparedVideo) -> Result<Vec<Frame>> {
        match (&video.region, self.config.visual()) {
            (Some(region), true) => video
                .frames
                .iter()
                .enumerate()
                .map(|(q, f)| {
                    apply_visual_prompt(
                        f,
                        region,
                        self.patch_for(state, q),
                        self.config.patch_mode,
                        self.encoder.pixel_range(),
                    )
                })
                .collect(),
            _ => Ok(video.frames.clone()),
        }
    }

    fn negative_text_raw(&self, state: &PromptState) -> Result<Rows> {
        Ok(match &state.negative_context {
            Some(ctx) => encode_known_prompts(ctx, &self.negative_sentences, self.encoder)?,
            None => self.fixed_negatives.get(&self.class_names, self.encoder)?,
        }
        .into_iter()
        .map(|e| e.0)
        .collect())
    }

    /// Encodes the batch and computes all three heads.
    pub fn forward(&self, state: &PromptState, videos: &[PreparedVideo]) -> Result<ForwardPass> {
        self.check_state(state)?;
        if videos.is_empty() {
            return Err(HespError::Contract("empty batch".into()));
        }
        let mut prompted = Vec::with_capacity(videos.len());
        let mut raw_video = Vec::with_capacity(videos.len());
        for v in videos {
            let frames = self.prompt_frames(state, v)?;
            let mut mean = vec![0.0; self.encoder.embed_dim()];
            let inv = 1.0 / frames.len() as f64;
            for f in &frames {
                let (e, _) = self.encoder.encode_frame(f)?;
                mean.iter_mut()
                    .zip(e.values())
                    .for_each(|(m, x)| *m += inv * x);
            }
            raw_video.push(mean);
            prompted.push(frames);
        }
        let raw_text: Rows = encode_known_prompts(&state.context, &self.class_names, self.encoder)?
            .into_iter()
            .map(|e| e.0)
            .collect();
        let raw_neg_text = self.negative_text_raw(state)?;
        let raw_neg_visual: Rows = state
            .bank
            .tensors
            .iter()
            .map(|t| Ok(self.encoder.encode_frame(t)?.0 .0))
            .collect::<Result<_>>()?;

        let unit = |rows: &Rows| -> Rows { rows.iter().map(|r| l2_normalize(r)).collect() };
        let video = unit(&raw_video);
        let known_text = unit(&raw_text);
        let neg_text = unit(&raw_neg_text);
        let neg_visual = unit(&raw_neg_visual);
        let p_kn =
            crate::inference::prediction_known(&video, &known_text, self.encoder.logit_scale())?;
        let p_ne = crate::inference::prediction_negative(
            &video,
            &neg_visual,
            self.config.ne_scale,
            self.config.ne_logit_sign,
        )?;
        let bundle = ScoreBundle::new(p_kn, p_ne)?;
        Ok(ForwardPass {
            bundle,
            features: BatchFeatures {
                video,
                labels: Vec::new(),
                known_text,
                neg_text,
                neg_visual,
            },
            raw_video,
            raw_text,
            raw_neg_text,
            raw_neg_visual,
            prompted,
        })
    }

    pub fn score(&self, state: &PromptState, videos: &[PreparedVideo]) -> Result<ScoreBundle> {
        Ok(self.forward(state, videos)?.bundle)
    }

    fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.config.loss_weights,
            supcon_tau: self.config.supcon_tau,
            clip_scale: self.encoder.logit_scale(),
        }
    }

    pub fn loss(
        &self,
        state: &PromptState,
        videos: &[PreparedVideo],
        labels: &[usize],
    ) -> Result<LossBreakdown> {
        let mut fp = self.forward(state, videos)?;
        fp.features.labels = labels.to_vec();
        total_loss(&fp.bundle, &fp.features, &self.objective())
    }

    /// Loss and its gradient with respect to every prompt parameter.
    pub fn loss_and_grad(
        &self,
        state: &PromptState,
        videos: &[PreparedVideo],
        labels: &[usize],
    ) -> Result<(LossBreakdown, PromptState)> {
        let mut fp = self.forward(state, videos)?;
        if labels.len() != videos.len() {
            return Err(HespError::Contract("one label per video required".into()));
        }
        fp.features.labels = labels.to_vec();
        let obj = self.objective();
        let breakdown = total_loss(&fp.bundle, &fp.features, &obj)?;
        let w = obj.weights;
        let (b, k) = (videos.len(), self.class_names.len());
        let d = self.encoder.embed_dim();
        let f = &fp.features;

        // gradients with respect to the three probability tables
        let mut g_kn = vec![vec![0.0; k]; b];
        let mut g_ne = vec![vec![0.0; k]; b];
        let add = |acc: &mut Rows, g: Rows, s: f64| {
            acc.iter_mut()
                .flatten()
                .zip(g.iter().flatten())
                .for_each(|(a, v)| *a += s * v);
        };
        if w.kn_ce != 0.0 {
            add(
                &mut g_kn,
                cross_entropy_grad(&fp.bundle.p_kn, labels)?,
                w.kn_ce,
            );
        }
        if w.ne_ce != 0.0 {
            add(
                &mut g_ne,
                cross_entropy_grad(&fp.bundle.p_ne, labels)?,
                w.ne_ce,
            );
        }
        if w.h != 0.0 {
            let g = cross_entropy_grad(&fp.bundle.p_h, labels)?;
            add(&mut g_kn, g.clone(), 0.5 * w.h);
            add(&mut g_ne, g, 0.5 * w.h);
        }

        let mut g_video = vec![vec![0.0; d]; b];
        let mut g_text = vec![vec![0.0; d]; k];
        let mut g_neg_text = vec![vec![0.0; d]; k];
        let mut g_neg_visual = vec![vec![0.0; d]; k];

        let scale = self.encoder.logit_scale();
        let dist_scale = self.config.ne_logit_sign * self.config.ne_scale;
        for i in 0..b {
            let gz = softmax_backward(&fp.bundle.p_kn[i], &g_kn[i]);
            for c in 0..k {
                let s = scale * gz[c];
                if s == 0.0 {
                    continue;
                }
                for t in 0..d {
                    g_video[i][t] += s * f.known_text[c][t];
                    g_text[c][t] += s * f.video[i][t];
                }
            }
            let gz = softmax_backward(&fp.bundle.p_ne[i], &g_ne[i]);
            for c in 0..k {
                let dist = euclidean(&f.video[i], &f.neg_visual[c]);
                if gz[c] == 0.0 || dist == 0.0 {
                    continue;
                }
                let s = dist_scale * gz[c] / dist;
                for t in 0..d {
                    let diff = s * (f.video[i][t] - f.neg_visual[c][t]);
                    g_video[i][t] += diff;
                    g_neg_visual[c][t] -= diff;
                }
            }
        }
        if w.kn_cl != 0.0 {
            let (_, g) = supervised_contrastive_with_grad(&f.video, labels, obj.supcon_tau)?;
            add(&mut g_video, g, w.kn_cl);
        }
        if w.ne_clip != 0.0 {
            let (_, g) = negative_alignment_with_grad(&f.neg_visual, &f.neg_text, obj.clip_scale)?;
            add(&mut g_neg_visual, g.neg_visual, w.ne_clip);
            add(&mut g_neg_text, g.neg_text, w.ne_clip);
        }
        if w.ne_cl != 0.0 {
            let (rows, row_labels) = ne_contrastive_rows(f);
            let (_, mut g) = supervised_contrastive_with_grad(&rows, &row_labels, obj.supcon_tau)?;
            let tail = g.split_off(b);
            add(&mut g_video, g, w.ne_cl);
            add(&mut g_neg_visual, tail, w.ne_cl);
        }

        // back through normalization and the frozen encoder
        let raw = |raws: &Rows, grads: &Rows| -> Rows {
            raws.iter()
                .zip(grads)
                .map(|(x, g)| l2_normalize_backward(x, g))
                .collect()
        };
        let mut grad = state.zeros_like();
        grad.context = encode_known_prompts_backward(
            &state.context,
            &self.class_names,
            self.encoder,
            &raw(&fp.raw_text, &g_text),
        )?;
        if let Some(ctx) = &state.negative_context {
            grad.negative_context = Some(encode_known_prompts_backward(
                ctx,
                &self.negative_sentences,
                self.encoder,
                &raw(&fp.raw_neg_text, &g_neg_text),
            )?);
        }
        for (c, g) in raw(&fp.raw_neg_visual, &g_neg_visual).iter().enumerate() {
            grad.bank.tensors[c] = self
                .encoder
                .encode_frame_backward(&state.bank.tensors[c], g)?;
        }
        if self.config.visual() {
            let range = self.encoder.pixel_range();
            for (i, g) in raw(&fp.raw_video, &g_video).iter().enumerate() {
                let Some(region) = &videos[i].region else {
                    continue;
                };
                let inv = 1.0 / videos[i].frames.len() as f64;
                let g_frame: Vec<f64> = g.iter().map(|v| v * inv).collect();
                for (q, frame) in videos[i].frames.iter().enumerate() {
                    let g_pix = self
                        .encoder
                        .encode_frame_backward(&fp.prompted[i][q], &g_frame)?;
                    let slot = if state.patches.len() > 1 { q } else { 0 };
                    apply_visual_prompt_backward(
                        frame,
                        region,
                        &state.patches[slot],
                        self.config.patch_mode,
                        range,
                        &g_pix,
                        &mut grad.patches[slot],
                    )?;
                }
            }
        }
        Ok((breakdown, grad))
    }
}

/// Mask rectangle of a region, for logging.
pub fn region_rect(region: &Option<PromptRegion>) -> Option<MaskRect> {
    match region {
        Some(PromptRegion::Rect(r)) => Some(*r),
        _ => None,
    }
}

/// Produces score bundles for whole samples. The trained model is one
/// implementation; tests inject ideal ones.
pub trait Scorer {
    fn num_classes(&self) -> usize;
    fn score_samples(
        &self,
        samples: &[&VideoSample],
    ) -> Result<(ScoreBundle, Vec<Option<PromptRegion>>)>;
}

/// A model bound to a prompt state.
pub struct PromptScorer<'m, 'a> {
    pub model: &'m HespModel<'a>,
    pub state: &'m PromptState,
    pub batch_size: usize,
}

impl Scorer for PromptScorer<'_, '_> {
    fn num_classes(&self) -> usize {
        self.model.class_names().len()
    }

    fn score_samples(
        &self,
        samples: &[&VideoSample],
    ) -> Result<(ScoreBundle, Vec<Option<PromptRegion>>)> {
        let mut p_kn = Vec::with_capacity(samples.len());
        let mut p_ne = Vec::with_capacity(samples.len());
        let mut regions = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.batch_size.max(1)) {
            let prepared: Vec<PreparedVideo> = chunk
                .iter()
                .map(|s| self.model.prepare(s, crate::data::id_seed(&s.id)))
                .collect::<Result<_>>()?;
            let bundle = self.model.score(self.state, &prepared)?;
            p_kn.extend(bundle.p_kn);
            p_ne.extend(bundle.p_ne);
            regions.extend(prepared.into_iter().map(|p| p.region));
        }
        Ok((ScoreBundle::new(p_kn, p_ne)?, regions))
    }
}
