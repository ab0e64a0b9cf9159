//! The open-set multi-task objective:
//!
//! `L = [CE(P_KN) + SupCon(F_V')] + [CE(P_NE) + CLIP(F̄_V', F̄_T')] + CE(P_H)`
//!
//! Every term comes with a vector-Jacobian product so the model can push
//! gradients back to the prompt parameters.

use serde::{Deserialize, Serialize};

use crate::error::{HespError, Result};
use crate::inference::ScoreBundle;
use crate::tensor::{dot, log_sum_exp, softmax, Rows};

pub const PROBABILITY_FLOOR: f64 = 1e-12;
pub const DEFAULT_SUPCON_TAU: f64 = 0.07;

/// Mean over the batch of `−ln max(P[i, y_i], 1e−12)`.
pub fn cross_entropy(probs: &Rows, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let n = probs.len() as f64;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[y].max(PROBABILITY_FLOOR).ln())
        .sum::<f64>()
        / n)
}

/// `∂ cross_entropy / ∂ P`.
pub fn cross_entropy_grad(probs: &Rows, labels: &[usize]) -> Result<Rows> {
    check_labels(probs, labels)?;
    let n = probs.len() as f64;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let mut g = vec![0.0; p.len()];
            if p[y] > PROBABILITY_FLOOR {
                g[y] = -1.0 / (n * p[y]);
            }
            g
        })
        .collect())
}

fn check_labels(probs: &Rows, labels: &[usize]) -> Result<()> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(HespError::Contract(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels
        .iter()
        .enumerate()
        .find(|(i, &y)| y >= probs[*i].len())
    {
        return Err(HespError::Contract(format!(
            "label {y} of row {i} outside {} classes",
            probs[i].len()
        )));
    }
    Ok(())
}

/// Supervised contrastive loss over unit rows and its gradient. Anchors
/// without a positive contribute nothing; the loss is averaged over the
/// anchors that have one, and is 0 when none do.
pub fn supervised_contrastive_with_grad(
    embeddings: &Rows,
    labels: &[usize],
    tau: f64,
) -> Result<(f64, Rows)> {
    let b = embeddings.len();
    if b < 2 || labels.len() != b {
        return Err(HespError::Contract(format!(
            "supervised contrastive loss needs >= 2 labelled rows, got {b}"
        )));
    }
    if tau <= 0.0 {
        return Err(HespError::Contract("temperature must be positive".into()));
    }
    let d = embeddings[0].len();
    let sim: Rows = embeddings
        .iter()
        .map(|a| embeddings.iter().map(|c| dot(a, c) / tau).collect())
        .collect();
    // dL/dsim, accumulated then mapped back to the rows
    let mut g_sim = vec![vec![0.0; b]; b];
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..b {
        let positives: Vec<usize> = (0..b)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        let others = (0..b).filter(|&a| a != i);
        let lse = log_sum_exp(others.clone().map(|a| sim[i][a]));
        let n_pos = positives.len() as f64;
        total += positives.iter().map(|&p| lse - sim[i][p]).sum::<f64>() / n_pos;
        for a in others {
            g_sim[i][a] += (sim[i][a] - lse).exp();
        }
        for &p in &positives {
            g_sim[i][p] -= 1.0 / n_pos;
        }
    }
    if anchors == 0 {
        return Ok((0.0, vec![vec![0.0; d]; b]));
    }
    let scale = 1.0 / (anchors as f64 * tau);
    let mut grad = vec![vec![0.0; d]; b];
    for i in 0..b {
        for j in 0..b {
            let g = g_sim[i][j] * scale;
            if g == 0.0 {
                continue;
            }
            for t in 0..d {
                grad[i][t] += g * embeddings[j][t];
                grad[j][t] += g * embeddings[i][t];
            }
        }
    }
    Ok((total / anchors as f64, grad))
}

pub fn supervised_contrastive(embeddings: &Rows, labels: &[usize], tau: f64) -> Result<f64> {
    supervised_contrastive_with_grad(embeddings, labels, tau).map(|(v, _)| v)
}

/// Gradients of [`negative_alignment`].
#[derive(Debug, Clone)]
pub struct AlignmentGrad {
    pub neg_visual: Rows,
    pub neg_text: Rows,
    pub scale: f64,
}

/// Symmetric contrastive alignment of the negative visual and negative text
/// embeddings: `½[CE(rows → diagonal) + CE(columns → diagonal)]` over
/// `scale · V·Tᵀ`. Uses exact log-softmax, so the loss never saturates
/// against a probability floor.
pub fn negative_alignment_with_grad(
    neg_visual: &Rows,
    neg_text: &Rows,
    scale: f64,
) -> Result<(f64, AlignmentGrad)> {
    let k = neg_visual.len();
    if k < 2 {
        return Err(HespError::Contract(
            "alignment needs at least 2 classes".into(),
        ));
    }
    if neg_text.len() != k {
        return Err(HespError::Contract(format!(
            "{k} negative visual rows but {} negative text rows",
            neg_text.len()
        )));
    }
    let cos: Rows = neg_visual
        .iter()
        .map(|v| neg_text.iter().map(|t| dot(v, t)).collect())
        .collect();
    let logits: Rows = cos
        .iter()
        .map(|r| r.iter().map(|c| scale * c).collect())
        .collect();
    let mut g_logits = vec![vec![0.0; k]; k];
    let mut loss = 0.0;
    let w = 0.5 / k as f64;
    for r in 0..k {
        let p = softmax(&logits[r]);
        loss += w * (log_sum_exp(logits[r].iter().copied()) - logits[r][r]);
        for c in 0..k {
            g_logits[r][c] += w * (p[c] - (r == c) as u8 as f64);
        }
    }
    for c in 0..k {
        let column: Vec<f64> = (0..k).map(|r| logits[r][c]).collect();
        let p = softmax(&column);
        loss += w * (log_sum_exp(column.iter().copied()) - column[c]);
        for r in 0..k {
            g_logits[r][c] += w * (p[r] - (r == c) as u8 as f64);
        }
    }
    let d = neg_visual[0].len();
    let mut gv = vec![vec![0.0; d]; k];
    let mut gt = vec![vec![0.0; d]; k];
    let mut gs = 0.0;
    for r in 0..k {
        for c in 0..k {
            let g = g_logits[r][c];
            gs += g * cos[r][c];
            for t in 0..d {
                gv[r][t] += scale * g * neg_text[c][t];
                gt[c][t] += scale * g * neg_visual[r][t];
            }
        }
    }
    Ok((
        loss,
        AlignmentGrad {
            neg_visual: gv,
            neg_text: gt,
            scale: gs,
        },
    ))
}

pub fn negative_alignment(neg_visual: &Rows, neg_text: &Rows, scale: f64) -> Result<f64> {
    negative_alignment_with_grad(neg_visual, neg_text, scale).map(|(v, _)| v)
}

/// Per-term multipliers. `ne_cl` adds a supervised contrastive term over the
/// negative branch; it is an ablation and defaults to off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub kn_ce: f64,
    pub kn_cl: f64,
    pub ne_ce: f64,
    pub ne_clip: f64,
    pub h: f64,
    pub ne_cl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kn_ce: 1.0,
            kn_cl: 1.0,
            ne_ce: 1.0,
            ne_clip: 1.0,
            h: 1.0,
            ne_cl: 0.0,
        }
    }
}

impl LossWeights {
    /// Only the known-class cross-entropy.
    pub fn ce_only() -> Self {
        Self {
            kn_ce: 1.0,
            kn_cl: 0.0,
            ne_ce: 0.0,
            ne_clip: 0.0,
            h: 0.0,
            ne_cl: 0.0,
        }
    }
}

/// Unit-norm inputs to the objective for one batch.
#[derive(Debug, Clone)]
pub struct BatchFeatures {
    pub video: Rows,
    pub labels: Vec<usize>,
    pub known_text: Rows,
    pub neg_text: Rows,
    pub neg_visual: Rows,
}

impl BatchFeatures {
    pub fn validate(&self) -> Result<()> {
        let k = self.known_text.len();
        if self.labels.iter().any(|&y| y >= k) {
            return Err(HespError::Contract(
                "batch label outside known classes".into(),
            ));
        }
        for rows in [
            &self.video,
            &self.known_text,
            &self.neg_text,
            &self.neg_visual,
        ] {
            for r in rows.iter() {
                if (dot(r, r).sqrt() - 1.0).abs() > 1e-6 {
                    return Err(HespError::Contract("feature rows must be unit norm".into()));
                }
            }
        }
        Ok(())
    }
}

/// Weighted loss terms; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_kn_ce: f64,
    pub l_kn_cl: f64,
    pub l_ne_ce: f64,
    pub l_ne_clip: f64,
    pub l_h: f64,
    pub l_ne_cl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("l_kn_ce", self.l_kn_ce),
            ("l_kn_cl", self.l_kn_cl),
            ("l_ne_ce", self.l_ne_ce),
            ("l_ne_clip", self.l_ne_clip),
            ("l_h", self.l_h),
            ("l_ne_cl", self.l_ne_cl),
        ]
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
            .or((!self.total.is_finite()).then_some("total"))
    }
}

/// Hyperparameters the objective reads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub supcon_tau: f64,
    pub clip_scale: f64,
}

/// Negative-branch contrastive term: video rows and negative-visual rows
/// pooled together, negatives labelled by their class.
pub fn ne_contrastive_rows(features: &BatchFeatures) -> (Rows, Vec<usize>) {
    let mut rows = features.video.clone();
    rows.extend(features.neg_visual.iter().cloned());
    let mut labels = features.labels.clone();
    labels.extend(0..features.neg_visual.len());
    (rows, labels)
}

pub fn total_loss(
    bundle: &ScoreBundle,
    features: &BatchFeatures,
    config: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let w = config.weights;
    let y = &features.labels;
    let mut out = LossBreakdown::default();
    if w.kn_ce != 0.0 {
        out.l_kn_ce = w.kn_ce * cross_entropy(&bundle.p_kn, y)?;
    }
    if w.kn_cl != 0.0 {
        out.l_kn_cl = w.kn_cl * supervised_contrastive(&features.video, y, config.supcon_tau)?;
    }
    if w.ne_ce != 0.0 {
        out.l_ne_ce = w.ne_ce * cross_entropy(&bundle.p_ne, y)?;
    }
    if w.ne_clip != 0.0 {
        out.l_ne_clip = w.ne_clip
            * negative_alignment(&features.neg_visual, &features.neg_text, config.clip_scale)?;
    }
    if w.h != 0.0 {
        out.l_h = w.h * cross_entropy(&bundle.p_h, y)?;
    }
    if w.ne_cl != 0.0 {
        let (rows, labels) = ne_contrastive_rows(features);
        out.l_ne_cl = w.ne_cl * supervised_contrastive(&rows, &labels, config.supcon_tau)?;
    }
    out.total = out.l_kn_ce + out.l_kn_cl + out.l_ne_ce + out.l_ne_clip + out.l_h + out.l_ne_cl;
    Ok(out)
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

    #[test]
    fn ce_values() {
        let uniform = vec![vec![0.2; 5]; 3];
        assert!((cross_entropy(&uniform, &[0, 3, 4]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let onehot = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(cross_entropy(&onehot, &[1, 0]).unwrap() <= 1e-11);
        let v = cross_entropy(&vec![vec![0.7, 0.3]], &[0]).unwrap();
        assert!((v - 0.356_674_943_938_732_4).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&uniform, &[0, 1, 5]),
            Err(HespError::Contract(_))
        ));
    }

    #[test]
    fn ce_is_shift_invariant_through_softmax() {
        let logits = [1.2, -0.3, 0.8, 2.2];
        let shifted: Vec<f64> = logits.iter().map(|z| z + 37.5).collect();
        let a = cross_entropy(&vec![softmax(&logits)], &[2]).unwrap();
        let b = cross_entropy(&vec![softmax(&shifted)], &[2]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn floor_caps_the_loss() {
        let v = cross_entropy(&vec![vec![1.0, 0.0]], &[1]).unwrap();
        assert!((v + PROBABILITY_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn supcon_zero_without_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = unit_rows(&mut rng, 4, 8);
        assert_eq!(
            supervised_contrastive(&e, &[0, 1, 2, 3], 0.07).unwrap(),
            0.0
        );
        assert!(supervised_contrastive(&e[..1].to_vec(), &[0], 0.07).is_err());
    }

    #[test]
    fn supcon_three_point_formula() {
        // z0 == z1 share a label, z2 is orthogonal.
        let z = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let tau = 0.5;
        // anchors 0 and 1 each: -log(e^{1/τ} / (e^{1/τ} + e^{0}))
        let per_anchor = -((1.0f64 / tau).exp() / ((1.0f64 / tau).exp() + 1.0)).ln();
        let v = supervised_contrastive(&z, &[0, 0, 1], tau).unwrap();
        assert!((v - per_anchor).abs() < 1e-12);
    }

    #[test]
    fn supcon_drops_as_positives_align() {
        let third = vec![0.0, 0.0, 1.0];
        let pair = |angle: f64| {
            vec![
                vec![1.0, 0.0, 0.0],
                vec![angle.cos(), angle.sin(), 0.0],
                third.clone(),
            ]
        };
        let far = supervised_contrastive(&pair(1.2), &[0, 0, 1], 0.07).unwrap();
        let near = supervised_contrastive(&pair(0.3), &[0, 0, 1], 0.07).unwrap();
        assert!(near < far);
    }

    #[test]
    fn supcon_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = unit_rows(&mut rng, 8, 6);
        let y = vec![0, 1, 0, 2, 1, 2, 0, 3];
        let base = supervised_contrastive(&e, &y, 0.07).unwrap();
        let perm = [5, 2, 7, 0, 3, 1, 6, 4];
        let e2: Rows = perm.iter().map(|&i| e[i].clone()).collect();
        let y2: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        assert!((supervised_contrastive(&e2, &y2, 0.07).unwrap() - base).abs() < 1e-12);
    }

    fn orthonormal(k: usize, d: usize) -> Rows {
        (0..k)
            .map(|i| (0..d).map(|j| (i == j) as u8 as f64).collect())
            .collect()
    }

    #[test]
    fn alignment_of_orthonormal_pairs_is_tiny() {
        for k in [2, 5, 16] {
            let a = orthonormal(k, 16);
            assert!(negative_alignment(&a, &a, 100.0).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn permuted_alignment_is_worse() {
        let a = orthonormal(5, 8);
        let mut b = a.clone();
        b.rotate_left(1);
        assert!(
            negative_alignment(&b, &a, 100.0).unwrap() > negative_alignment(&a, &a, 100.0).unwrap()
        );
    }

    #[test]
    fn uniform_alignment_is_ln2() {
        let v = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert!((negative_alignment(&v, &v, 100.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(negative_alignment(&v[..1].to_vec(), &v[..1].to_vec(), 1.0).is_err());
    }

    fn directional_check(f: &dyn Fn(&Rows) -> f64, x: &Rows, grad: &Rows, rng: &mut ChaCha8Rng) {
        let dir: Rows = x
            .iter()
            .map(|r| r.iter().map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let h = 1e-5;
        let shift = |s: f64| -> Rows {
            x.iter()
                .zip(&dir)
                .map(|(r, d)| r.iter().zip(d).map(|(a, b)| a + s * b).collect())
                .collect()
        };
        let numeric = (f(&shift(h)) - f(&shift(-h))) / (2.0 * h);
        let analytic: f64 = grad
            .iter()
            .flatten()
            .zip(dir.iter().flatten())
            .map(|(g, d)| g * d)
            .sum();
        let rel = (numeric - analytic).abs() / analytic.abs().max(1e-8);
        assert!(rel <= 1e-4, "numeric {numeric} analytic {analytic}");
    }

    #[test]
    fn supcon_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = unit_rows(&mut rng, 8, 6);
        let y = vec![0, 1, 0, 2, 1, 2, 0, 3];
        let (_, g) = supervised_contrastive_with_grad(&e, &y, 0.5).unwrap();
        directional_check(
            &|x| supervised_contrastive(x, &y, 0.5).unwrap(),
            &e,
            &g,
            &mut rng,
        );
    }

    #[test]
    fn alignment_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = unit_rows(&mut rng, 5, 6);
        let t = unit_rows(&mut rng, 5, 6);
        let (_, g) = negative_alignment_with_grad(&v, &t, 3.0).unwrap();
        directional_check(
            &|x| negative_alignment(x, &t, 3.0).unwrap(),
            &v,
            &g.neg_visual,
            &mut rng,
        );
        directional_check(
            &|x| negative_alignment(&v, x, 3.0).unwrap(),
            &t,
            &g.neg_text,
            &mut rng,
        );
        let h = 1e-6;
        let numeric = (negative_alignment(&v, &t, 3.0 + h).unwrap()
            - negative_alignment(&v, &t, 3.0 - h).unwrap())
            / (2.0 * h);
        assert!((numeric - g.scale).abs() / g.scale.abs() <= 1e-4);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Rows = (0..4)
            .map(|_| softmax(&(0..5).map(|_| rng.random::<f64>()).collect::<Vec<_>>()))
            .collect();
        let y = vec![1, 0, 4, 2];
        let g = cross_entropy_grad(&p, &y).unwrap();
        directional_check(&|x| cross_entropy(x, &y).unwrap(), &p, &g, &mut rng);
    }

    #[test]
    fn negative_branch_contrastive_is_off_by_default() {
        assert_eq!(LossWeights::default().ne_cl, 0.0);
        assert_eq!(LossWeights::default().kn_ce, 1.0);
    }

    #[test]
    fn breakdown_sums_and_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = unit_rows(&mut rng, 8, 16);
        let t = unit_rows(&mut rng, 5, 16);
        let nt = unit_rows(&mut rng, 5, 16);
        let nv = unit_rows(&mut rng, 5, 16);
        let y = vec![0, 1, 2, 3, 4, 0, 1, 2];
        let bundle = ScoreBundle::new(
            crate::inference::prediction_known(&v, &t, 100.0).unwrap(),
            crate::inference::prediction_negative(&v, &nv, 10.0, 1.0).unwrap(),
        )
        .unwrap();
        let features = BatchFeatures {
            video: v,
            labels: y,
            known_text: t,
            neg_text: nt,
            neg_visual: nv,
        };
        features.validate().unwrap();
        let cfg = ObjectiveConfig {
            weights: LossWeights {
                ne_cl: 1.0,
                ..Default::default()
            },
            supcon_tau: 0.07,
            clip_scale: 100.0,
        };
        let l = total_loss(&bundle, &features, &cfg).unwrap();
        for (_, c) in l.components() {
            assert!(c.is_finite() && c >= 0.0);
        }
        let sum: f64 = l.components().iter().map(|(_, c)| c).sum();
        assert!((l.total - sum).abs() <= 1e-9);
        assert!(l.non_finite().is_none());
    }
}
