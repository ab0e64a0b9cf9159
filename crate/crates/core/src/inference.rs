//! Probability heads, their fusion, and open-set decisions.

use serde::{Deserialize, Serialize};

use crate::error::{HespError, Result};
use crate::tensor::{argmax, dot, euclidean, softmax, Rows};

pub const DEFAULT_NE_SCALE: f64 = 10.0;
pub const DEFAULT_TARGET_TPR: f64 = 0.95;

fn check_dims(a: &Rows, b: &Rows, what: &str) -> Result<()> {
    let d = b.first().map(Vec::len).unwrap_or(0);
    if b.is_empty() || a.iter().any(|r| r.len() != d) || b.iter().any(|r| r.len() != d) {
        return Err(HespError::Contract(format!(
            "{what}: embedding dimensions disagree"
        )));
    }
    Ok(())
}

/// `scale · cos(video_i, text_k)` for unit rows.
pub fn known_logits(video: &Rows, text: &Rows, scale: f64) -> Result<Rows> {
    check_dims(video, text, "known prediction")?;
    Ok(video
        .iter()
        .map(|v| text.iter().map(|t| scale * dot(v, t)).collect())
        .collect())
}

/// Softmax over scaled cosine similarity to each class text embedding.
pub fn prediction_known(video: &Rows, text: &Rows, scale: f64) -> Result<Rows> {
    if scale <= 0.0 {
        return Err(HespError::Contract("logit scale must be positive".into()));
    }
    Ok(known_logits(video, text, scale)?
        .iter()
        .map(|z| softmax(z))
        .collect())
}

/// `sign · scale · ||video_i − negative_k||`.
pub fn negative_logits(video: &Rows, negatives: &Rows, scale: f64, sign: f64) -> Result<Rows> {
    check_dims(video, negatives, "negative prediction")?;
    Ok(video
        .iter()
        .map(|v| {
            negatives
                .iter()
                .map(|n| sign * scale * euclidean(v, n))
                .collect()
        })
        .collect())
}

/// Softmax over scaled Euclidean distance to each negative representation:
/// the farther a video is from class k's negative, the likelier class k.
pub fn prediction_negative(video: &Rows, negatives: &Rows, scale: f64, sign: f64) -> Result<Rows> {
    if scale <= 0.0 {
        return Err(HespError::Contract(
            "distance scale must be positive".into(),
        ));
    }
    Ok(negative_logits(video, negatives, scale, sign)?
        .iter()
        .map(|z| softmax(z))
        .collect())
}

pub fn fuse(p_kn: &Rows, p_ne: &Rows) -> Result<Rows> {
    if p_kn.len() != p_ne.len() || p_kn.iter().zip(p_ne).any(|(a, b)| a.len() != b.len()) {
        return Err(HespError::Contract("fusion inputs differ in shape".into()));
    }
    Ok(p_kn
        .iter()
        .zip(p_ne)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBundle {
    pub p_kn: Rows,
    pub p_ne: Rows,
    pub p_h: Rows,
    /// `max_k p_h[i, k]`.
    pub knownness: Vec<f64>,
}

impl ScoreBundle {
    pub fn new(p_kn: Rows, p_ne: Rows) -> Result<Self> {
        let p_h = fuse(&p_kn, &p_ne)?;
        let knownness = p_h
            .iter()
            .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Ok(Self {
            p_kn,
            p_ne,
            p_h,
            knownness,
        })
    }

    pub fn len(&self) -> usize {
        self.p_h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_h.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.p_h.first().map(Vec::len).unwrap_or(0)
    }

    /// `argmax_k p_h`, ties to the smallest index.
    pub fn predicted_known(&self) -> Vec<usize> {
        self.p_h.iter().map(|r| argmax(r)).collect()
    }
}

/// Lower `(1 − target_tpr)` quantile of known-class scores with linear
/// interpolation, so that a `target_tpr` fraction scores at or above it.
pub fn calibrate_threshold(known_scores: &[f64], target_tpr: f64) -> Result<f64> {
    if known_scores.is_empty() {
        return Err(HespError::Calibration(
            "no known-class scores to calibrate on".into(),
        ));
    }
    if !(target_tpr > 0.0 && target_tpr < 1.0) {
        return Err(HespError::Calibration(format!(
            "target_tpr {target_tpr} outside (0, 1)"
        )));
    }
    let mut sorted = known_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (sorted.len() - 1) as f64 * (1.0 - target_tpr);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenSetDecision {
    /// Known class index, or `K` for unknown.
    pub predicted: usize,
    pub score: f64,
    pub threshold: f64,
}

pub fn classify_open(bundle: &ScoreBundle, threshold: f64) -> Vec<OpenSetDecision> {
    let unknown = bundle.num_classes();
    bundle
        .p_h
        .iter()
        .zip(&bundle.knownness)
        .map(|(row, &score)| OpenSetDecision {
            predicted: if score < threshold {
                unknown
            } else {
                argmax(row)
            },
            score,
            threshold,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::l2_normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
        (0..n)
            .map(|_| {
                l2_normalize(
                    &(0..d)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect::<Vec<_>>(),
                )
            })
            .collect()
    }

    fn basis(k: usize, d: usize) -> Rows {
        (0..k)
            .map(|i| (0..d).map(|j| (i == j) as u8 as f64).collect())
            .collect()
    }

    #[test]
    fn aligned_text_gives_near_one_hot() {
        let text = basis(5, 8);
        let p = prediction_known(&vec![text[0].clone()], &text, 100.0).unwrap();
        // softmax(100·e0) over 5 classes: 1 / (1 + 4e−100)
        let expected = 1.0 / (1.0 + 4.0 * (-100f64).exp());
        assert!(p[0][0] > 0.999);
        assert!((p[0][0] - expected).abs() < 1e-12);
    }

    #[test]
    fn equal_cosines_give_uniform_row() {
        let text = basis(4, 8);
        let mut v = vec![0.0; 8];
        v[5] = 1.0;
        let p = prediction_known(&vec![v], &text, 100.0).unwrap();
        assert!(p[0].iter().all(|x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        assert!(matches!(
            prediction_known(&vec![vec![1.0, 0.0]], &vec![vec![1.0, 0.0, 0.0]], 1.0),
            Err(HespError::Contract(_))
        ));
        assert!(matches!(
            prediction_negative(&vec![vec![1.0, 0.0]], &vec![vec![1.0, 0.0, 0.0]], 1.0, 1.0),
            Err(HespError::Contract(_))
        ));
    }

    #[test]
    fn negative_head_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = unit_rows(&mut rng, 3, 16);
        let n = unit_rows(&mut rng, 5, 16);
        let p = prediction_negative(&v, &n, 10.0, 1.0).unwrap();
        for (i, vi) in v.iter().enumerate() {
            let logits: Vec<f64> = n
                .iter()
                .map(|nk| 10.0 * (2.0 - 2.0 * dot(vi, nk)).max(0.0).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for k in 0..5 {
                assert!((p[i][k] - (logits[k] - max).exp() / z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn coinciding_negative_gets_row_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = unit_rows(&mut rng, 4, 8);
        let p = prediction_negative(&vec![n[2].clone()], &n, 10.0, 1.0).unwrap();
        let min = p[0].iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(p[0][2], min);
    }

    #[test]
    fn equidistant_negatives_give_uniform_row() {
        let n = basis(3, 4);
        let v = vec![0.0, 0.0, 0.0, 1.0];
        let p = prediction_negative(&vec![v], &n, 10.0, 1.0).unwrap();
        assert!(p[0].iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn fusion_arithmetic() {
        let k = 4;
        let mut onehot = vec![0.0; k];
        onehot[2] = 1.0;
        let uniform = vec![1.0 / k as f64; k];
        let p = fuse(&vec![onehot.clone()], &vec![uniform]).unwrap();
        assert!((p[0][2] - (0.5 + 1.0 / (2.0 * k as f64))).abs() < 1e-15);
        assert_eq!(
            fuse(&vec![onehot.clone()], &vec![onehot.clone()]).unwrap(),
            vec![onehot]
        );
        assert!(fuse(&vec![vec![0.5, 0.5]], &vec![vec![1.0]]).is_err());
    }

    #[test]
    fn threshold_quantiles() {
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert!((calibrate_threshold(&scores, 0.95).unwrap() - 0.145).abs() < 1e-12);
        assert_eq!(calibrate_threshold(&[0.3; 7], 0.9).unwrap(), 0.3);
        let symmetric = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert!((calibrate_threshold(&symmetric, 0.5).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(
            calibrate_threshold(&[], 0.9),
            Err(HespError::Calibration(_))
        ));
    }

    fn bundle_with(knownness_row: Vec<f64>) -> ScoreBundle {
        ScoreBundle::new(vec![knownness_row.clone()], vec![knownness_row]).unwrap()
    }

    #[test]
    fn open_set_decisions() {
        let b = bundle_with(vec![0.05, 0.05, 0.9]);
        assert_eq!(classify_open(&b, 0.5)[0].predicted, 2);
        let b = bundle_with(vec![0.3, 0.3, 0.2, 0.2]);
        assert_eq!(classify_open(&b, 0.5)[0].predicted, 4);
        // strict comparison: a score equal to the threshold is known
        let b = bundle_with(vec![0.5, 0.25, 0.25]);
        assert_eq!(classify_open(&b, 0.5)[0].predicted, 0);
    }

    #[test]
    fn raising_threshold_never_recovers_known() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = unit_rows(&mut rng, 50, 8);
        let t = unit_rows(&mut rng, 4, 8);
        let b = ScoreBundle::new(
            prediction_known(&v, &t, 20.0).unwrap(),
            prediction_negative(&v, &t, 10.0, 1.0).unwrap(),
        )
        .unwrap();
        let mut thresholds: Vec<f64> = (0..20).map(|i| 0.25 + i as f64 * 0.04).collect();
        thresholds.sort_by(f64::total_cmp);
        for w in thresholds.windows(2) {
            let lo = classify_open(&b, w[0]);
            let hi = classify_open(&b, w[1]);
            for (a, c) in lo.iter().zip(&hi) {
                if a.predicted == 4 {
                    assert_eq!(c.predicted, 4);
                }
            }
        }
    }

    #[test]
    fn scaling_logits_preserves_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let v = unit_rows(&mut rng, 6, 8);
            let t = unit_rows(&mut rng, 5, 8);
            let s = rng.random_range(0.1..200.0);
            let a = prediction_known(&v, &t, 1.0).unwrap();
            let b = prediction_known(&v, &t, s).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(argmax(x), argmax(y));
            }
        }
    }

    #[test]
    fn negative_head_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 6;
        // random orthogonal matrix from Gram-Schmidt
        let mut q: Rows = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for b in &q {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            q.push(l2_normalize(&v));
        }
        let rotate = |rows: &Rows| -> Rows {
            rows.iter()
                .map(|r| q.iter().map(|qi| dot(qi, r)).collect())
                .collect()
        };
        let v = unit_rows(&mut rng, 4, d);
        let n = unit_rows(&mut rng, 3, d);
        let a = prediction_negative(&v, &n, 10.0, 1.0).unwrap();
        let b = prediction_negative(&rotate(&v), &rotate(&n), 10.0, 1.0).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
