//! End-to-end runs: single splits, checkpoint evaluation and the four
//! open-set protocols.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::{DataSource, RunConfig};
use super::evaluate::{evaluate, write_evaluation, Evaluation};
use super::plot::{plot_score_distributions, DEFAULT_BINS};
use super::trainer::{calibration_split, train_prompts, TrainOutcome, TrainSinks};
use crate::data::{
    apply_split, generate_splits, load_manifest, synthesize_dataset, write_split_file, Dataset,
    OpennessSplit, BASIC_EMOTIONS, EXTRA_EMOTIONS,
};
use crate::encoder::{build_encoder, DualEncoder, LinearDualEncoder, MockEncoderConfig};
use crate::error::{HespError, Result};
use crate::metrics::{aggregate, EvalReport};
use crate::model::{HespModel, PromptScorer};

pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match config.data.source {
        DataSource::Synthetic => synthesize_dataset(&config.data.synthetic),
        DataSource::Manifest => load_manifest(Path::new(&config.data.manifest)),
    }
}

/// The mock encoder adopts the dataset's frame shape; external weights must
/// already match it.
pub fn load_encoder(config: &RunConfig, dataset: &Dataset) -> Result<LinearDualEncoder> {
    let mock = MockEncoderConfig {
        frame_shape: dataset.frame_shape(),
        ..config.encoder.mock.clone()
    };
    let weights =
        (!config.encoder.weights.is_empty()).then(|| PathBuf::from(&config.encoder.weights));
    let encoder = build_encoder(config.encoder.kind, weights.as_deref(), &mock)?;
    if encoder.frame_shape() != dataset.frame_shape() {
        return Err(HespError::Compatibility(format!(
            "encoder expects {} frames, dataset has {}",
            encoder.frame_shape(),
            dataset.frame_shape()
        )));
    }
    Ok(encoder)
}

pub struct SplitRun {
    pub evaluation: Evaluation,
    pub outcome: TrainOutcome,
    /// Ids of known-class training samples (fit plus calibration).
    pub train_ids: Vec<String>,
}

fn training_seed(config: &RunConfig, split: &OpennessSplit) -> u64 {
    config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ split.seed
}

/// Trains on one split and evaluates it. With `dir` set, writes the loss
/// log, checkpoints, scores, report, masks and plot there.
pub fn run_split(
    config: &RunConfig,
    encoder: &dyn DualEncoder,
    dataset: &Dataset,
    split: &OpennessSplit,
    dir: Option<&Path>,
) -> Result<SplitRun> {
    let (train, test) = apply_split(dataset, split)?;
    let seed = training_seed(config, split);
    let (fit, calib) = calibration_split(&train, config.optim.calibration_fraction, seed);
    let model = HespModel::new(encoder, config.prompt.clone(), train.class_names().to_vec())?;
    let meta = CheckpointMeta {
        config_digest: config.digest(),
        encoder_digest: encoder.digest(),
        epoch: 0,
        class_names: train.class_names().to_vec(),
        split: Some(split.clone()),
        calibration_ids: calib.samples().iter().map(|s| s.id.clone()).collect(),
        prompt: config.prompt.clone(),
    };
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        write_split_file(&d.join("split.json"), std::slice::from_ref(split))?;
    }
    let log_path = dir.map(|d| d.join("loss_log.jsonl"));
    let ckpt_dir = dir.map(|d| d.join("checkpoints"));
    let sinks = TrainSinks {
        loss_log: log_path.as_deref(),
        checkpoint_dir: ckpt_dir.as_deref(),
    };
    let outcome = train_prompts(&model, &fit, &config.optim, seed, meta, &sinks)?;
    let scorer = PromptScorer {
        model: &model,
        state: &outcome.checkpoint.prompts,
        batch_size: config.eval.batch_size,
    };
    let evaluation = evaluate(&scorer, &test, &calib, split, config.eval.target_tpr)?;
    if let Some(d) = dir {
        write_evaluation(&evaluation, d)?;
        plot_score_distributions(&d.join("scores.tsv"), &d.join("scores.png"), DEFAULT_BINS)?;
    }
    Ok(SplitRun {
        evaluation,
        outcome,
        train_ids: train.samples().iter().map(|s| s.id.clone()).collect(),
    })
}

/// Re-evaluates a saved checkpoint on the split recorded inside it.
pub fn evaluate_checkpoint(
    config: &RunConfig,
    encoder: &dyn DualEncoder,
    dataset: &Dataset,
    checkpoint: &Checkpoint,
) -> Result<Evaluation> {
    let split = checkpoint
        .meta
        .split
        .as_ref()
        .ok_or_else(|| HespError::Compatibility("checkpoint carries no split record".into()))?;
    let (train, test) = apply_split(dataset, split)?;
    checkpoint.check_compatible(train.class_names(), &encoder.digest())?;
    let wanted = &checkpoint.meta.calibration_ids;
    let calib_idx: Vec<usize> = (0..train.len())
        .filter(|&i| wanted.contains(&train.samples()[i].id))
        .collect();
    if calib_idx.len() != wanted.len() {
        return Err(HespError::Compatibility(
            "calibration samples missing from the dataset".into(),
        ));
    }
    let calib = train.subset(&calib_idx);
    let model = HespModel::new(
        encoder,
        checkpoint.meta.prompt.clone(),
        train.class_names().to_vec(),
    )?;
    let scorer = PromptScorer {
        model: &model,
        state: &checkpoint.prompts,
        batch_size: config.eval.batch_size,
    };
    evaluate(&scorer, &test, &calib, split, config.eval.target_tpr)
}

/// One openness setting and its random divisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolCell {
    pub known: usize,
    pub unknown: usize,
    pub splits: Vec<OpennessSplit>,
}

impl ProtocolCell {
    pub fn label(&self) -> String {
        format!("O({}:{})", self.known, self.unknown)
    }

    fn dir_name(&self) -> String {
        format!("o{}_{}", self.known, self.unknown)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub label: String,
    pub openness: f64,
    pub reports: Vec<EvalReport>,
    pub mean_auroc: f64,
    pub mean_oscr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub task: String,
    pub cells: Vec<CellReport>,
    pub mean_auroc: f64,
    pub mean_oscr: f64,
}

impl ProtocolReport {
    /// Result table: one column per openness cell plus `Mean`.
    pub fn table(&self) -> String {
        let mut header = vec!["metric".to_string()];
        header.extend(self.cells.iter().map(|c| c.label.clone()));
        header.push("Mean".into());
        let row = |name: &str, per: &dyn Fn(&CellReport) -> f64, mean: f64| {
            let mut r = vec![name.to_string()];
            r.extend(self.cells.iter().map(|c| format!("{:.2}", 100.0 * per(c))));
            r.push(format!("{:.2}", 100.0 * mean));
            r.join("\t")
        };
        [
            header.join("\t"),
            row("AUROC", &|c| c.mean_auroc, self.mean_auroc),
            row("OSCR", &|c| c.mean_oscr, self.mean_oscr),
        ]
        .join("\n")
            + "\n"
    }

    pub fn num_split_reports(&self) -> usize {
        self.cells.iter().map(|c| c.reports.len()).sum()
    }
}

/// Class indices of `names` in `dataset`, matched case-insensitively.
fn find_named(dataset: &Dataset, names: &[&str]) -> Option<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            dataset
                .class_names()
                .iter()
                .position(|c| c.eq_ignore_ascii_case(n))
        })
        .collect()
}

fn class_pool(dataset: &Dataset, size: usize, names: &[&str]) -> Result<Vec<usize>> {
    if let Some(found) = find_named(dataset, names).filter(|f| f.len() == size) {
        return Ok(found);
    }
    if dataset.num_classes() < size {
        return Err(HespError::Protocol(format!(
            "protocol needs {size} classes, dataset has {}",
            dataset.num_classes()
        )));
    }
    Ok((0..size).collect())
}

fn random_cell(pool: &[usize], known: usize, splits: usize, seed: u64) -> Result<ProtocolCell> {
    let local = generate_splits(pool.len(), known, splits, seed)?;
    let splits = local
        .into_iter()
        .map(|s| {
            let mut k: Vec<usize> = s.known_classes.iter().map(|&i| pool[i]).collect();
            k.sort_unstable();
            let u = s.unknown_classes.iter().map(|&i| pool[i]).collect();
            OpennessSplit::new(k, u, s.seed)
        })
        .collect::<Result<_>>()?;
    Ok(ProtocolCell {
        known,
        unknown: pool.len() - known,
        splits,
    })
}

/// The openness cells a task runs on `dataset`.
pub fn protocol_cells(config: &RunConfig, dataset: &Dataset) -> Result<Vec<ProtocolCell>> {
    let p = &config.protocol;
    let seed = p.split_seed;
    let cells = |pool: Vec<usize>, knowns: &[usize]| -> Result<Vec<ProtocolCell>> {
        knowns
            .iter()
            .enumerate()
            .map(|(i, &k)| random_cell(&pool, k, p.splits, seed.wrapping_add(1000 * i as u64)))
            .collect()
    };
    match p.task.as_str() {
        "1" => cells(class_pool(dataset, 7, &BASIC_EMOTIONS)?, &[5, 4, 3, 2]),
        "2" => {
            let names: Vec<&str> = BASIC_EMOTIONS
                .iter()
                .chain(&EXTRA_EMOTIONS)
                .copied()
                .collect();
            cells(class_pool(dataset, 11, &names)?, &[8, 6, 5, 3])
        }
        "3" | "4" => {
            let mut known = class_pool(dataset, 7, &BASIC_EMOTIONS)?;
            known.sort_unstable();
            let unknown: Vec<usize> = (0..dataset.num_classes())
                .filter(|c| !known.contains(c))
                .collect();
            if unknown.is_empty() {
                return Err(HespError::Protocol(
                    "fixed partition needs classes beyond the 7 known".into(),
                ));
            }
            let splits = (0..p.repeats as u64)
                .map(|r| OpennessSplit::new(known.clone(), unknown.clone(), seed.wrapping_add(r)))
                .collect::<Result<_>>()?;
            Ok(vec![ProtocolCell {
                known: known.len(),
                unknown: unknown.len(),
                splits,
            }])
        }
        "custom" => {
            let total = p.known + p.unknown;
            if p.unknown == 0 || dataset.num_classes() < total {
                return Err(HespError::Protocol(format!(
                    "custom protocol O({}:{}) does not fit {} classes",
                    p.known,
                    p.unknown,
                    dataset.num_classes()
                )));
            }
            Ok(vec![random_cell(
                &(0..total).collect::<Vec<_>>(),
                p.known,
                p.splits,
                seed,
            )?])
        }
        other => Err(HespError::Config(format!("unknown task `{other}`"))),
    }
}

/// Runs every split of every cell and aggregates per cell and overall.
pub fn run_protocol_on(
    config: &RunConfig,
    encoder: &dyn DualEncoder,
    dataset: &Dataset,
    out: Option<&Path>,
) -> Result<ProtocolReport> {
    let cells = protocol_cells(config, dataset)?;
    if let Some(d) = out {
        fs::create_dir_all(d)?;
        fs::write(d.join("splits.json"), serde_json::to_string_pretty(&cells)?)?;
    }
    let mut reports = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut cell_reports = Vec::with_capacity(cell.splits.len());
        for (i, split) in cell.splits.iter().enumerate() {
            let dir = out.map(|d| d.join(cell.dir_name()).join(format!("split_{i}")));
            let run = run_split(config, encoder, dataset, split, dir.as_deref())?;
            log::info!(
                "{} split {i}: auroc {:.4} oscr {:.4}",
                cell.label(),
                run.evaluation.report.auroc,
                run.evaluation.report.oscr
            );
            cell_reports.push(run.evaluation.report);
        }
        let (mean_auroc, mean_oscr) = aggregate(&cell_reports)?;
        reports.push(CellReport {
            label: cell.label(),
            openness: cell.splits[0].openness,
            reports: cell_reports,
            mean_auroc,
            mean_oscr,
        });
    }
    let n = reports.len() as f64;
    let report = ProtocolReport {
        task: config.protocol.task.clone(),
        mean_auroc: reports.iter().map(|c| c.mean_auroc).sum::<f64>() / n,
        mean_oscr: reports.iter().map(|c| c.mean_oscr).sum::<f64>() / n,
        cells: reports,
    };
    if let Some(d) = out {
        fs::write(
            d.join("protocol_report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        fs::write(d.join("protocol_table.tsv"), report.table())?;
    }
    Ok(report)
}

/// Loads data and encoder from the config, snapshots the config into the
/// run directory, and runs the configured task.
pub fn run_protocol(config: &RunConfig) -> Result<ProtocolReport> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let encoder = load_encoder(config, &dataset)?;
    fs::create_dir_all(&config.run_dir)?;
    config.save(&config.run_dir.join("config.toml"))?;
    run_protocol_on(config, &encoder, &dataset, Some(&config.run_dir))
}
