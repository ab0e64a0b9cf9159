//! Scoring a test set: threshold calibration, metrics, the scores file and
//! the per-video mask log.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OpennessSplit};
use crate::error::{HespError, Result};
use crate::inference::{calibrate_threshold, classify_open};
use crate::metrics::{auroc, oscr, EvalReport, ScoredSample, KNOWNNESS_SCORE};
use crate::model::Scorer;
use crate::tensor::argmax;
use crate::visual_prompt::PromptRegion;

/// One row of the scores file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub true_label: String,
    pub is_known: bool,
    pub p_h: Vec<f64>,
    pub knownness: f64,
    pub predicted: usize,
    /// Class name or `unknown`.
    pub decision: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub id: String,
    pub region: Option<PromptRegion>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub rows: Vec<ScoreRow>,
    pub masks: Vec<MaskEntry>,
}

/// Scores `test` (known labels `0..K`, unknown sentinel `K`) and calibrates
/// the decision threshold on `calibration`, which holds known samples only.
pub fn evaluate(
    scorer: &dyn Scorer,
    test: &Dataset,
    calibration: &Dataset,
    split: &OpennessSplit,
    target_tpr: f64,
) -> Result<Evaluation> {
    let k = scorer.num_classes();
    if test.num_classes() != k + 1 || split.num_known() != k {
        return Err(HespError::Compatibility(format!(
            "scorer has {k} classes, test set has {} known classes",
            test.num_classes().saturating_sub(1)
        )));
    }
    if calibration.is_empty() {
        return Err(HespError::Calibration(
            "no held-out known samples to calibrate on".into(),
        ));
    }
    let calib_refs: Vec<_> = calibration.samples().iter().collect();
    let (calib_bundle, _) = scorer.score_samples(&calib_refs)?;
    let threshold = calibrate_threshold(&calib_bundle.knownness, target_tpr)?;

    let refs: Vec<_> = test.samples().iter().collect();
    let (bundle, regions) = scorer.score_samples(&refs)?;
    let decisions = classify_open(&bundle, threshold);
    let names = test.class_names();
    let mut samples = Vec::with_capacity(refs.len());
    let mut rows = Vec::with_capacity(refs.len());
    let (mut known_correct, mut open_correct) = (0usize, 0usize);
    for (i, s) in refs.iter().enumerate() {
        let known = s.label < k;
        let predicted = argmax(&bundle.p_h[i]);
        samples.push(ScoredSample {
            knownness: bundle.knownness[i],
            true_label: known.then_some(s.label),
            predicted_known: predicted,
        });
        known_correct += (known && predicted == s.label) as usize;
        open_correct += (decisions[i].predicted == s.label) as usize;
        rows.push(ScoreRow {
            id: s.id.clone(),
            true_label: names[s.label].clone(),
            is_known: known,
            p_h: bundle.p_h[i].clone(),
            knownness: bundle.knownness[i],
            predicted,
            decision: names[decisions[i].predicted.min(k)].clone(),
        });
    }
    let known_scores: Vec<f64> = samples
        .iter()
        .filter(|s| s.is_known())
        .map(|s| s.knownness)
        .collect();
    let unknown_scores: Vec<f64> = samples
        .iter()
        .filter(|s| !s.is_known())
        .map(|s| s.knownness)
        .collect();
    let report = EvalReport {
        auroc: auroc(&known_scores, &unknown_scores)?,
        oscr: oscr(&samples)?,
        split: split.clone(),
        n_known: known_scores.len(),
        n_unknown: unknown_scores.len(),
        knownness_score: KNOWNNESS_SCORE.to_string(),
        threshold,
        closed_set_accuracy: known_correct as f64 / known_scores.len() as f64,
        open_set_accuracy: open_correct as f64 / refs.len() as f64,
    };
    let masks = refs
        .iter()
        .zip(regions)
        .map(|(s, region)| MaskEntry {
            id: s.id.clone(),
            region,
        })
        .collect();
    Ok(Evaluation {
        report,
        rows,
        masks,
    })
}

/// Writes `scores.tsv`, `report.json` and `masks.json` into `dir`.
pub fn write_evaluation(eval: &Evaluation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_scores(&eval.rows, &dir.join("scores.tsv"))?;
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&eval.report)?,
    )?;
    fs::write(
        dir.join("masks.json"),
        serde_json::to_string_pretty(&eval.masks)?,
    )?;
    Ok(())
}

pub fn write_scores(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    let k = rows.first().map_or(0, |r| r.p_h.len());
    let mut header = vec!["id".to_string(), "true_label".into(), "is_known".into()];
    header.extend((0..k).map(|c| format!("p_h_{c}")));
    header.extend(["knownness".into(), "predicted".into(), "decision".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.id.clone(),
            r.true_label.clone(),
            (r.is_known as u8).to_string(),
        ];
        rec.extend(r.p_h.iter().map(|p| p.to_string()));
        rec.extend([
            r.knownness.to_string(),
            r.predicted.to_string(),
            r.decision.clone(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let ingest = |row: Option<usize>, reason: String| HespError::Ingestion {
        path: path.to_path_buf(),
        row,
        reason,
    };
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| ingest(None, e.to_string()))?;
    let header = r.headers()?.clone();
    let k = header.iter().filter(|h| h.starts_with("p_h_")).count();
    if header.len() != k + 6 || &header[0] != "id" {
        return Err(HespError::Schema {
            row: 1,
            reason: "unexpected scores header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |j: usize| -> Result<f64> {
            rec[j].parse().map_err(|_| HespError::Schema {
                row: line,
                reason: format!("`{}` is not a number", &rec[j]),
            })
        };
        rows.push(ScoreRow {
            id: rec[0].to_string(),
            true_label: rec[1].to_string(),
            is_known: &rec[2] == "1",
            p_h: (0..k).map(|c| num(3 + c)).collect::<Result<_>>()?,
            knownness: num(3 + k)?,
            predicted: num(4 + k)? as usize,
            decision: rec[5 + k].to_string(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VideoSample;
    use crate::inference::ScoreBundle;
    use crate::tensor::{Frame, FrameShape};

    /// Knownness 1 for knowns with the right argmax, 0 for unknowns.
    struct Ideal {
        k: usize,
    }

    impl Scorer for Ideal {
        fn num_classes(&self) -> usize {
            self.k
        }

        fn score_samples(
            &self,
            samples: &[&VideoSample],
        ) -> Result<(ScoreBundle, Vec<Option<PromptRegion>>)> {
            let rows: Vec<Vec<f64>> = samples
                .iter()
                .map(|s| {
                    if s.label < self.k {
                        (0..self.k).map(|c| (c == s.label) as u8 as f64).collect()
                    } else {
                        vec![1.0 / self.k as f64; self.k]
                    }
                })
                .collect();
            Ok((
                ScoreBundle::new(rows.clone(), rows)?,
                vec![None; samples.len()],
            ))
        }
    }

    fn dataset(labels: &[usize], names: &[&str]) -> Dataset {
        let shape = FrameShape::new(1, 2, 2);
        let samples = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| VideoSample {
                id: format!("v{i}"),
                frames: vec![Frame::zeros(shape)],
                label: l,
                source: "test".into(),
                tag: None,
            })
            .collect();
        Dataset::new(
            samples,
            names.iter().map(|s| s.to_string()).collect(),
            shape,
        )
        .unwrap()
    }

    #[test]
    fn ideal_scorer_is_perfect() {
        let test = dataset(&[0, 1, 2, 2, 0, 1], &["a", "b", "unknown"]);
        let calib = dataset(&[0, 1], &["a", "b"]);
        let split = OpennessSplit::new(vec![0, 1], vec![2], 0).unwrap();
        let eval = evaluate(&Ideal { k: 2 }, &test, &calib, &split, 0.95).unwrap();
        assert_eq!(eval.report.auroc, 1.0);
        assert_eq!(eval.report.oscr, 1.0);
        assert_eq!(eval.rows.len(), test.len());
        assert_eq!(eval.report.open_set_accuracy, 1.0);
        assert_eq!((eval.report.n_known, eval.report.n_unknown), (4, 2));

        let dir = tempfile::tempdir().unwrap();
        write_evaluation(&eval, dir.path()).unwrap();
        let back = read_scores(&dir.path().join("scores.tsv")).unwrap();
        assert_eq!(back, eval.rows);
    }

    #[test]
    fn class_mismatch_is_compatibility_error() {
        let test = dataset(&[0, 1, 2, 3], &["a", "b", "c", "unknown"]);
        let calib = dataset(&[0], &["a", "b", "c"]);
        let split = OpennessSplit::new(vec![0, 1, 2], vec![3], 0).unwrap();
        assert!(matches!(
            evaluate(&Ideal { k: 2 }, &test, &calib, &split, 0.95),
            Err(HespError::Compatibility(_))
        ));
    }
}
