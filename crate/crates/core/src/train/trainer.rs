//! Mini-batch SGD with momentum over the prompt parameters.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, OptimizerState, CHECKPOINT_FORMAT};
use super::config::OptimConfig;
use crate::data::{id_seed, Dataset};
use crate::error::{HespError, Result};
use crate::model::{HespModel, PreparedVideo, PromptState};
use crate::objectives::LossBreakdown;

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    /// Every sample id the loop read.
    pub seen_ids: BTreeSet<String>,
}

/// Where the loop writes its artifacts. `None` keeps everything in memory.
pub struct TrainSinks<'p> {
    pub loss_log: Option<&'p Path>,
    pub checkpoint_dir: Option<&'p Path>,
}

impl TrainSinks<'_> {
    pub const NONE: TrainSinks<'static> = TrainSinks {
        loss_log: None,
        checkpoint_dir: None,
    };
}

/// Trains prompts on `train`, whose labels must all be known classes of
/// the model. `meta` is stamped into every checkpoint.
pub fn train_prompts(
    model: &HespModel,
    train: &Dataset,
    optim: &OptimConfig,
    seed: u64,
    meta: CheckpointMeta,
    sinks: &TrainSinks,
) -> Result<TrainOutcome> {
    let k = model.class_names().len();
    if train.class_names() != model.class_names() {
        return Err(HespError::Compatibility(
            "training classes differ from the model's".into(),
        ));
    }
    // only known classes may reach the loop
    if let Some(s) = train.samples().iter().find(|s| s.label >= k) {
        return Err(HespError::Protocol(format!(
            "sample `{}` is not from a known class",
            s.id
        )));
    }
    if train.len() < 2 {
        return Err(HespError::Protocol(
            "training needs at least two samples".into(),
        ));
    }
    let mut state = model.init_state(seed)?;
    let mut velocity = state.zeros_like();
    let mut log = Vec::new();
    let mut seen = BTreeSet::new();
    let mut writer = match sinks.loss_log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    if let Some(dir) = sinks.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut step = 0usize;
    let batch = optim.batch_size.max(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..optim.epochs {
        let lr = optim.lr_at(epoch);
        // masks are located once per video per epoch
        let prepared: Vec<PreparedVideo> = train
            .samples()
            .iter()
            .map(|s| model.prepare(s, id_seed(&s.id)))
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut chunks: Vec<&[usize]> = order.chunks(batch).collect();
        // a trailing singleton cannot form a contrastive pair
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            chunks.pop();
        }
        for chunk in chunks {
            let videos: Vec<PreparedVideo> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.samples()[i].label).collect();
            seen.extend(chunk.iter().map(|&i| train.samples()[i].id.clone()));
            let (loss, grad) = model.loss_and_grad(&state, &videos, &labels)?;
            if let Some(component) = loss.non_finite() {
                return Err(HespError::Divergence {
                    component: component.to_string(),
                    step,
                });
            }
            if let Some(block) = grad.non_finite_block() {
                return Err(HespError::Divergence {
                    component: format!("gradient of {block}"),
                    step,
                });
            }
            velocity.scale(optim.momentum);
            velocity.axpy(1.0, &grad);
            state.axpy(-lr, &velocity);
            if let Some(block) = state.non_finite_block() {
                return Err(HespError::Divergence {
                    component: block.to_string(),
                    step,
                });
            }
            let entry = StepLog {
                epoch,
                step,
                lr,
                loss,
            };
            if let Some(w) = writer.as_mut() {
                serde_json::to_writer(&mut *w, &entry)?;
                w.write_all(b"\n")?;
            }
            log.push(entry);
            step += 1;
        }
        let done = epoch + 1;
        if let Some(dir) = sinks.checkpoint_dir {
            if optim.save_every > 0 && done % optim.save_every == 0 && done != optim.epochs {
                snapshot(&meta, done, &state, &velocity, step)
                    .save(&dir.join(format!("epoch_{done:04}.json")))?;
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    let checkpoint = snapshot(&meta, optim.epochs, &state, &velocity, step);
    if let Some(dir) = sinks.checkpoint_dir {
        checkpoint.save(&dir.join("final.json"))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        log,
        seen_ids: seen,
    })
}

fn snapshot(
    meta: &CheckpointMeta,
    epoch: usize,
    state: &PromptState,
    velocity: &PromptState,
    step: usize,
) -> Checkpoint {
    Checkpoint {
        format: CHECKPOINT_FORMAT,
        meta: CheckpointMeta {
            epoch,
            ..meta.clone()
        },
        prompts: state.clone(),
        optimizer: OptimizerState {
            step,
            velocity: velocity.clone(),
        },
    }
}

/// Holds out `fraction` of every class (rounded, at least one sample when
/// the class has two or more) for calibration. Returns (fit, calibration).
pub fn calibration_split(train: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut fit = Vec::new();
    let mut calib = Vec::new();
    for class in 0..train.num_classes() {
        let mut members: Vec<usize> = (0..train.len())
            .filter(|&i| train.samples()[i].label == class)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0063_616c_6962);
        rng.set_stream(class as u64);
        members.shuffle(&mut rng);
        let n = members.len();
        let mut held = (fraction * n as f64).round() as usize;
        if fraction > 0.0 && n >= 2 {
            held = held.clamp(1, n - 1);
        }
        calib.extend_from_slice(&members[..held]);
        fit.extend_from_slice(&members[held..]);
    }
    fit.sort_unstable();
    calib.sort_unstable();
    (train.subset(&fit), train.subset(&calib))
}
