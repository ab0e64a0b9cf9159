//! Learnable class prompts `[t¹(k) … tᴹ(k), CLASS-k]` and the fixed
//! negative prompts `"This video is not <class>"`.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, Embedding};
use crate::error::{HespError, Result};

pub const DEFAULT_CONTEXT_LEN: usize = 16;
pub const DEFAULT_CONTEXT_STD: f64 = 0.02;

/// Per-class learnable context tokens, `classes × len × token_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextContext {
    pub classes: usize,
    pub len: usize,
    pub token_dim: usize,
    pub values: Vec<f64>,
}

impl TextContext {
    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            ..self.clone()
        }
    }

    pub fn token(&self, k: usize, m: usize) -> &[f64] {
        let start = (k * self.len + m) * self.token_dim;
        &self.values[start..start + self.token_dim]
    }

    pub fn token_mut(&mut self, k: usize, m: usize) -> &mut [f64] {
        let start = (k * self.len + m) * self.token_dim;
        &mut self.values[start..start + self.token_dim]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let n = self.len * self.token_dim;
        &self.values[k * n..(k + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Zero-mean Gaussian context of standard deviation `std`.
pub fn init_context(
    classes: usize,
    len: usize,
    token_dim: usize,
    std: f64,
    seed: u64,
) -> TextContext {
    assert!(
        classes > 0 && len > 0 && token_dim > 0,
        "context dimensions must be positive"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("finite std");
    TextContext {
        classes,
        len,
        token_dim,
        values: (0..classes * len * token_dim)
            .map(|_| dist.sample(&mut rng))
            .collect(),
    }
}

/// Context tokens of class `k` followed by the tokens of `class_name`.
pub fn build_known_prompt(
    context: &TextContext,
    k: usize,
    class_name: &str,
    encoder: &dyn DualEncoder,
) -> Result<Vec<Vec<f64>>> {
    if k >= context.classes {
        return Err(HespError::Index(format!(
            "class {k} outside context with {} rows",
            context.classes
        )));
    }
    let mut tokens: Vec<Vec<f64>> = (0..context.len)
        .map(|m| context.token(k, m).to_vec())
        .collect();
    tokens.extend(encoder.tokenize(class_name));
    Ok(tokens)
}

/// Encodes every class prompt independently, in class order.
pub fn encode_known_prompts(
    context: &TextContext,
    class_names: &[String],
    encoder: &dyn DualEncoder,
) -> Result<Vec<Embedding>> {
    check_names(context, class_names)?;
    class_names
        .iter()
        .enumerate()
        .map(|(k, name)| encoder.encode_text(&build_known_prompt(context, k, name, encoder)?))
        .collect()
}

/// Gradient with respect to the context, given one output gradient per
/// class embedding. Gradients reaching the class-name tokens are dropped.
pub fn encode_known_prompts_backward(
    context: &TextContext,
    class_names: &[String],
    encoder: &dyn DualEncoder,
    grad_out: &[Vec<f64>],
) -> Result<TextContext> {
    check_names(context, class_names)?;
    let mut grad = context.zeros_like();
    for (k, name) in class_names.iter().enumerate() {
        let tokens = build_known_prompt(context, k, name, encoder)?;
        let token_grads = encoder.encode_text_backward(&tokens, &grad_out[k])?;
        for (m, g) in token_grads.iter().take(context.len).enumerate() {
            grad.token_mut(k, m).copy_from_slice(g);
        }
    }
    Ok(grad)
}

fn check_names(context: &TextContext, class_names: &[String]) -> Result<()> {
    if class_names.len() != context.classes {
        return Err(HespError::Contract(format!(
            "{} class names for a {}-class context",
            class_names.len(),
            context.classes
        )));
    }
    Ok(())
}

pub fn negative_prompt(class_name: &str) -> String {
    format!("This video is not {}", class_name.to_lowercase())
}

/// The full prompt set for a class list.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub known_prompts: Vec<Vec<Vec<f64>>>,
    pub negative_prompts: Vec<String>,
}

impl PromptSet {
    pub fn build(
        context: &TextContext,
        class_names: &[String],
        encoder: &dyn DualEncoder,
    ) -> Result<Self> {
        check_names(context, class_names)?;
        Ok(Self {
            known_prompts: class_names
                .iter()
                .enumerate()
                .map(|(k, n)| build_known_prompt(context, k, n, encoder))
                .collect::<Result<_>>()?,
            negative_prompts: class_names.iter().map(|n| negative_prompt(n)).collect(),
        })
    }
}

pub fn encode_negative_prompts(
    class_names: &[String],
    encoder: &dyn DualEncoder,
) -> Result<Vec<Embedding>> {
    class_names
        .iter()
        .map(|n| encoder.encode_text(&encoder.tokenize(&negative_prompt(n))))
        .collect()
}

/// Memoizes [`encode_negative_prompts`] per class-name list. Contains no
/// learnable state.
#[derive(Debug, Default)]
pub struct NegativePromptCache {
    entries: Mutex<HashMap<Vec<String>, Vec<Embedding>>>,
}

impl NegativePromptCache {
    pub fn get(&self, class_names: &[String], encoder: &dyn DualEncoder) -> Result<Vec<Embedding>> {
        let mut entries = self.entries.lock().expect("cache lock");
        if let Some(hit) = entries.get(class_names) {
            return Ok(hit.clone());
        }
        let fresh = encode_negative_prompts(class_names, encoder)?;
        entries.insert(class_names.to_vec(), fresh.clone());
        Ok(fresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BASIC_EMOTIONS, EXTRA_EMOTIONS};
    use crate::encoder::{LinearDualEncoder, MockEncoderConfig};
    use crate::tensor::{dot, FrameShape};

    fn encoder() -> LinearDualEncoder {
        LinearDualEncoder::mock(&MockEncoderConfig {
            frame_shape: FrameShape::new(3, 8, 8),
            ..Default::default()
        })
    }

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn context_shape_and_determinism() {
        let a = init_context(5, 16, 64, 0.02, 3);
        assert_eq!(a.values.len(), 5 * 16 * 64);
        assert_eq!(a, init_context(5, 16, 64, 0.02, 3));
        let n = a.values.len() as f64;
        let mean = a.values.iter().sum::<f64>() / n;
        let std = (a.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.015..=0.025).contains(&std), "std {std}");
    }

    #[test]
    fn prompt_is_context_then_class_tokens() {
        let enc = encoder();
        let ctx = init_context(2, 16, enc.token_dim(), 0.02, 0);
        let p = build_known_prompt(&ctx, 1, "happiness", &enc).unwrap();
        assert_eq!(p.len(), 17);
        assert_eq!(p[16], enc.tokenize("happiness")[0]);
        assert_eq!(p[0], ctx.token(1, 0));
        assert!(matches!(
            build_known_prompt(&ctx, 2, "x", &enc),
            Err(HespError::Index(_))
        ));
    }

    #[test]
    fn multi_word_names_append_every_token() {
        let enc = encoder();
        let ctx = init_context(1, 4, enc.token_dim(), 0.02, 0);
        let p = build_known_prompt(&ctx, 0, "happily surprised", &enc).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(&p[4..], enc.tokenize("happily surprised").as_slice());
    }

    #[test]
    fn prompt_tails_decode_to_class_names() {
        let enc = encoder();
        let ns = names(&BASIC_EMOTIONS);
        let ctx = init_context(ns.len(), 16, enc.token_dim(), 0.02, 1);
        let set = PromptSet::build(&ctx, &ns, &enc).unwrap();
        for (k, prompt) in set.known_prompts.iter().enumerate() {
            let matches: Vec<&String> = ns
                .iter()
                .filter(|n| prompt[16..] == enc.tokenize(n)[..])
                .collect();
            assert_eq!(matches, vec![&ns[k]]);
            assert!(set.negative_prompts[k].contains("not"));
            assert!(set.negative_prompts[k].contains(&ns[k]));
        }
        assert_eq!(negative_prompt("Anger"), "This video is not anger");
    }

    #[test]
    fn per_class_independence() {
        let enc = encoder();
        let ns = names(&["anger", "fear", "sadness", "surprise", "neutral"]);
        let ctx = init_context(5, 16, enc.token_dim(), 0.02, 2);
        let base = encode_known_prompts(&ctx, &ns, &enc).unwrap();
        assert_eq!(base.len(), 5);
        assert!(base.iter().all(|e| e.values().len() == enc.embed_dim()));

        let mut perturbed = ctx.clone();
        perturbed.token_mut(2, 5)[7] += 0.1;
        let after = encode_known_prompts(&perturbed, &ns, &enc).unwrap();
        for k in 0..5 {
            assert_eq!(after[k] == base[k], k != 2, "class {k}");
        }

        // permuting class order permutes outputs when contexts follow their classes
        let order = [3usize, 0, 4, 1, 2];
        let mut permuted_ctx = ctx.clone();
        for (new, &old) in order.iter().enumerate() {
            for m in 0..16 {
                permuted_ctx
                    .token_mut(new, m)
                    .copy_from_slice(ctx.token(old, m));
            }
        }
        let permuted_names: Vec<String> = order.iter().map(|&i| ns[i].clone()).collect();
        let permuted = encode_known_prompts(&permuted_ctx, &permuted_names, &enc).unwrap();
        for (new, &old) in order.iter().enumerate() {
            assert_eq!(permuted[new], base[old]);
        }
    }

    #[test]
    fn context_gradient_matches_finite_differences() {
        let enc = encoder();
        let ns = names(&["anger", "happiness", "fear"]);
        let ctx = init_context(3, 4, enc.token_dim(), 0.02, 5);
        let probes: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                (0..enc.embed_dim())
                    .map(|i| ((i * 7 + k * 3) % 11) as f64 / 11.0 - 0.5)
                    .collect()
            })
            .collect();
        let objective = |c: &TextContext| -> f64 {
            encode_known_prompts(c, &ns, &enc)
                .unwrap()
                .iter()
                .zip(&probes)
                .map(|(e, p)| dot(e.values(), p))
                .sum()
        };
        let grad = encode_known_prompts_backward(&ctx, &ns, &enc, &probes).unwrap();
        let h = 1e-4;
        for &(k, m, i) in &[(0usize, 0usize, 0usize), (1, 3, 40), (2, 2, 63)] {
            let mut plus = ctx.clone();
            let mut minus = ctx.clone();
            plus.token_mut(k, m)[i] += h;
            minus.token_mut(k, m)[i] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let analytic = grad.token(k, m)[i];
            assert!(analytic.abs() > 0.0);
            assert!((numeric - analytic).abs() / analytic.abs() <= 1e-4);
        }
    }

    #[test]
    fn class_token_receives_no_parameter_gradient() {
        // The gradient container only has context slots; perturbing a class
        // token changes the output but no parameter moves it.
        let enc = encoder();
        let ns = names(&["anger", "happiness"]);
        let ctx = init_context(2, 4, enc.token_dim(), 0.02, 5);
        let probes = vec![vec![1.0; enc.embed_dim()]; 2];
        let grad = encode_known_prompts_backward(&ctx, &ns, &enc, &probes).unwrap();
        assert_eq!(grad.values.len(), ctx.values.len());
        let tokens = build_known_prompt(&ctx, 0, "anger", &enc).unwrap();
        let full = enc.encode_text_backward(&tokens, &probes[0]).unwrap();
        assert_eq!(full.len(), 5);
        for m in 0..4 {
            assert_eq!(grad.token(0, m), full[m].as_slice());
        }
    }

    #[test]
    fn negative_prompts_are_fixed_and_distinct() {
        let enc = encoder();
        let ns = names(&BASIC_EMOTIONS);
        let a = encode_negative_prompts(&ns, &enc).unwrap();
        let b = encode_negative_prompts(&ns, &enc).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert_ne!(a[i], a[j]);
            }
        }
        let cache = NegativePromptCache::default();
        assert_eq!(cache.get(&ns, &enc).unwrap(), a);
        assert_eq!(cache.get(&ns, &enc).unwrap(), a);
    }

    #[test]
    fn eleven_emotion_tokens_do_not_collide() {
        let enc = encoder();
        let all: Vec<&str> = BASIC_EMOTIONS
            .iter()
            .chain(EXTRA_EMOTIONS.iter())
            .copied()
            .collect();
        let last: Vec<Vec<f64>> = all.iter().map(|n| enc.tokenize(n).pop().unwrap()).collect();
        for i in 0..last.len() {
            for j in i + 1..last.len() {
                assert_ne!(last[i], last[j], "{} vs {}", all[i], all[j]);
            }
        }
    }
}
