//! Finite-difference verification of the hand-written gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::encoder::{LinearDualEncoder, MockEncoderConfig};
use crate::error::{HespError, Result};
use crate::model::{HespModel, PreparedVideo, PromptConfig, PromptState};
use crate::objectives::LossWeights;
use crate::tensor::{Frame, FrameShape};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub embed_dim: usize,
    pub batch: usize,
    pub classes: usize,
    pub directions: usize,
    pub step: f64,
    pub total_tolerance: f64,
    pub component_tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            batch: 8,
            classes: 5,
            directions: 20,
            step: 1e-4,
            total_tolerance: 1e-3,
            component_tolerance: 1e-4,
            seed: 0,
        }
    }
}

/// Worst relative error over all directions for one loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub loss: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

const SHAPE: FrameShape = FrameShape::new(3, 16, 16);

fn weights_only(name: &str) -> LossWeights {
    let mut w = LossWeights {
        kn_ce: 0.0,
        kn_cl: 0.0,
        ne_ce: 0.0,
        ne_clip: 0.0,
        h: 0.0,
        ne_cl: 0.0,
    };
    match name {
        "kn_ce" => w.kn_ce = 1.0,
        "kn_cl" => w.kn_cl = 1.0,
        "ne_ce" => w.ne_ce = 1.0,
        "ne_clip" => w.ne_clip = 1.0,
        "h" => w.h = 1.0,
        "ne_cl" => w.ne_cl = 1.0,
        _ => unreachable!("unknown loss term {name}"),
    }
    w
}

pub const LOSS_TERMS: [&str; 6] = ["kn_ce", "kn_cl", "ne_ce", "ne_clip", "h", "ne_cl"];

fn random_like(state: &PromptState, rng: &mut ChaCha8Rng) -> PromptState {
    let mut dir = state.zeros_like();
    for block in dir.params_mut() {
        block
            .iter_mut()
            .for_each(|v| *v = rng.sample(StandardNormal));
    }
    dir
}

/// Directional derivative by the fourth-order central stencil.
fn numeric_derivative(
    f: &dyn Fn(&PromptState) -> Result<f64>,
    at: &PromptState,
    dir: &PromptState,
    h: f64,
) -> Result<f64> {
    let shifted = |t: f64| {
        let mut s = at.clone();
        s.axpy(t, dir);
        f(&s)
    };
    Ok(
        (-shifted(2.0 * h)? + 8.0 * shifted(h)? - 8.0 * shifted(-h)? + shifted(-2.0 * h)?)
            / (12.0 * h),
    )
}

fn check_one(
    encoder: &LinearDualEncoder,
    config: &GradCheckConfig,
    prompt: PromptConfig,
    name: &str,
    tolerance: f64,
) -> Result<GradCheckResult> {
    let names: Vec<String> = (0..config.classes).map(|k| format!("class_{k}")).collect();
    let model = HespModel::new(encoder, prompt.clone(), names)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = model.init_state(config.seed)?;
    for p in &mut state.patches {
        p.values
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.05..0.05));
    }
    let mut videos = Vec::with_capacity(config.batch);
    for i in 0..config.batch {
        let frames = (0..prompt.num_frames)
            .map(|_| {
                let data = (0..SHAPE.len())
                    .map(|_| rng.random_range(0.1..0.9))
                    .collect();
                Frame::from_vec(SHAPE, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let region = model.region_for(&frames[0], i as u64)?;
        videos.push(PreparedVideo { frames, region });
    }
    let labels: Vec<usize> = (0..config.batch).map(|i| i % config.classes).collect();
    let (_, grad) = model.loss_and_grad(&state, &videos, &labels)?;
    let f = |s: &PromptState| model.loss(s, &videos, &labels).map(|l| l.total);
    let mut worst = 0.0f64;
    for _ in 0..config.directions {
        let dir = random_like(&state, &mut rng);
        let numeric = numeric_derivative(&f, &state, &dir, config.step)?;
        let analytic = grad.dot(&dir);
        let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-10);
        worst = worst.max(rel);
    }
    Ok(GradCheckResult {
        loss: name.to_string(),
        max_rel_error: worst,
        tolerance,
    })
}

/// Checks the total loss and each term alone, with every prompt block
/// (text contexts, visual patch, negative bank, learnable negative context)
/// active.
pub fn run_gradcheck(config: &GradCheckConfig) -> Result<Vec<GradCheckResult>> {
    if config.classes < 2 || config.batch < 2 || config.directions == 0 || !(config.step > 0.0) {
        return Err(HespError::Config(
            "gradcheck needs >= 2 classes, >= 2 samples, >= 1 direction and a positive step".into(),
        ));
    }
    let encoder = LinearDualEncoder::mock(&MockEncoderConfig {
        embed_dim: config.embed_dim,
        token_dim: 16,
        frame_shape: SHAPE,
        seed: config.seed,
        ..Default::default()
    });
    let base = PromptConfig {
        context_len: 4,
        patch_size: 6,
        num_frames: 3,
        negative_text: crate::model::NegativeText::Learnable,
        ..Default::default()
    };
    let mut results = vec![check_one(
        &encoder,
        config,
        PromptConfig {
            loss_weights: LossWeights {
                ne_cl: 1.0,
                ..Default::default()
            },
            ..base.clone()
        },
        "total",
        config.total_tolerance,
    )?];
    for term in LOSS_TERMS {
        let prompt = PromptConfig {
            loss_weights: weights_only(term),
            ..base.clone()
        };
        results.push(check_one(
            &encoder,
            config,
            prompt,
            term,
            config.component_tolerance,
        )?);
    }
    Ok(results)
}

/// Runs [`run_gradcheck`] and turns any failure into an error.
pub fn require_gradcheck(config: &GradCheckConfig) -> Result<Vec<GradCheckResult>> {
    let results = run_gradcheck(config)?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.2e} > {:.0e})", r.loss, r.max_rel_error, r.tolerance))
        .collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(HespError::Check(format!(
            "gradient mismatch: {}",
            failed.join(", ")
        )))
    }
}
