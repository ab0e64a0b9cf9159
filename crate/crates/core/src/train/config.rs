//! Run configuration: one TOML file, every field overridable by
//! `--key value` pairs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::encoder::{EncoderKind, MockEncoderConfig};
use crate::error::{HespError, Result};
use crate::inference::DEFAULT_TARGET_TPR;
use crate::model::PromptConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Weights file for the external adapter.
    pub weights: String,
    /// Mock encoder settings. Its frame shape is taken from the dataset.
    pub mock: MockEncoderConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Mock,
            weights: String::new(),
            mock: MockEncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub manifest: String,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            manifest: String::new(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// `1`, `2`, `3`, `4` or `custom`.
    pub task: String,
    /// Custom protocol sizes.
    pub known: usize,
    pub unknown: usize,
    /// Random divisions per openness cell.
    pub splits: usize,
    /// Seeds per fixed partition (tasks 3 and 4).
    pub repeats: usize,
    pub split_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            task: "1".into(),
            known: 5,
            unknown: 2,
            splits: 5,
            repeats: 1,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub save_every: usize,
    /// Share of each known training class held out for threshold calibration.
    pub calibration_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            decay_factor: 0.1,
            decay_period: 30,
            epochs: 200,
            batch_size: 16,
            save_every: 0,
            calibration_fraction: 0.1,
        }
    }
}

impl OptimConfig {
    /// Step-decayed learning rate at a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr
            * self
                .decay_factor
                .powi((epoch / self.decay_period.max(1)) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub target_tpr: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            target_tpr: DEFAULT_TARGET_TPR,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub protocol: ProtocolConfig,
    pub optim: OptimConfig,
    pub prompt: PromptConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            encoder: EncoderConfig::default(),
            data: DataConfig::default(),
            protocol: ProtocolConfig::default(),
            optim: OptimConfig::default(),
            prompt: PromptConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HespError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HespError::Ingestion {
            path: path.to_path_buf(),
            row: None,
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HespError::Serialization(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HespError::Config(m));
        let o = &self.optim;
        if !(o.lr > 0.0) || !o.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", o.lr));
        }
        if o.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if o.batch_size < 2 {
            return bad("batch_size must be >= 2".into());
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", o.momentum));
        }
        if !(o.decay_factor > 0.0) || o.decay_period == 0 {
            return bad("decay_factor must be positive and decay_period >= 1".into());
        }
        if !(0.0..0.5).contains(&o.calibration_fraction) {
            return bad("calibration_fraction must lie in [0, 0.5)".into());
        }
        let t = self.eval.target_tpr;
        if !(t > 0.0 && t < 1.0) {
            return bad(format!("target_tpr must lie in (0, 1), got {t}"));
        }
        if self.eval.batch_size == 0 {
            return bad("eval.batch_size must be >= 1".into());
        }
        if !["1", "2", "3", "4", "custom"].contains(&self.protocol.task.as_str()) {
            return bad(format!("unknown task `{}`", self.protocol.task));
        }
        if self.protocol.splits == 0 || self.protocol.repeats == 0 {
            return bad("protocol.splits and protocol.repeats must be >= 1".into());
        }
        if self.data.source == DataSource::Manifest && !Path::new(&self.data.manifest).exists() {
            return bad(format!("manifest `{}` does not exist", self.data.manifest));
        }
        if self.encoder.kind == EncoderKind::External && !Path::new(&self.encoder.weights).exists()
        {
            return bad(format!(
                "encoder weights `{}` do not exist",
                self.encoder.weights
            ));
        }
        self.data
            .synthetic
            .validate()
            .map_err(|e| HespError::Config(e.to_string()))?;
        self.prompt.validate()
    }

    /// Applies `--key value` pairs. Keys are dotted paths (`optim.lr`) or a
    /// leaf name that occurs exactly once (`lr`).
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| HespError::Config(e.to_string()))?;
        for (key, raw) in pairs {
            let path = resolve_key(&root, key)?;
            set_path(&mut root, &path, raw)?;
        }
        let text = toml::to_string(&root).map_err(|e| HespError::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

/// Splits `["--a", "1", "--b.c", "x"]` into key/value pairs.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| HespError::Config(format!("expected `--key`, got `{flag}`")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let value = it
            .next()
            .ok_or_else(|| HespError::Config(format!("`--{key}` needs a value")))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}

fn leaf_paths(value: &toml::Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let toml::Value::Table(t) = value {
        for (k, v) in t {
            prefix.push(k.clone());
            if matches!(v, toml::Value::Table(_)) {
                leaf_paths(v, prefix, out);
            } else {
                out.push(prefix.clone());
            }
            prefix.pop();
        }
    }
}

fn resolve_key(root: &toml::Value, key: &str) -> Result<Vec<String>> {
    let parts: Vec<String> = key
        .replace('-', "_")
        .split('.')
        .map(str::to_string)
        .collect();
    if root
        .get(&parts[0])
        .is_some_and(|v| parts.len() > 1 || !v.is_table())
    {
        return Ok(parts);
    }
    let mut all = Vec::new();
    leaf_paths(root, &mut Vec::new(), &mut all);
    let hits: Vec<_> = all.into_iter().filter(|p| p.ends_with(&parts)).collect();
    match hits.len() {
        1 => Ok(hits.into_iter().next().expect("one hit")),
        0 => Err(HespError::Config(format!("unknown config key `{key}`"))),
        _ => Err(HespError::Config(format!(
            "`{key}` is ambiguous: {}",
            hits.iter()
                .map(|p| p.join("."))
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

fn parse_literal(raw: &str) -> Option<toml::Value> {
    let table: toml::Table = toml::from_str(&format!("v = {raw}")).ok()?;
    table.get("v").cloned()
}

fn set_path(root: &mut toml::Value, path: &[String], raw: &str) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = root;
    for p in parents {
        let table = node
            .as_table_mut()
            .ok_or_else(|| HespError::Config(format!("`{}` is not a section", path.join("."))))?;
        node = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| HespError::Config(format!("`{}` is not a section", path.join("."))))?;
    let value = match table.get(last) {
        // strings keep the raw text, so `--task 1` stays the string "1"
        Some(toml::Value::String(_)) => toml::Value::String(raw.to_string()),
        Some(toml::Value::Float(_)) => match parse_literal(raw) {
            Some(toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            Some(v) => v,
            None => return Err(HespError::Config(format!("`{raw}` is not a number"))),
        },
        Some(toml::Value::Table(_)) => {
            return Err(HespError::Config(format!(
                "`{}` is a section, not a value",
                path.join(".")
            )))
        }
        _ => parse_literal(raw).unwrap_or_else(|| toml::Value::String(raw.to_string())),
    };
    table.insert(last.clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.optim.lr, 0.01);
        assert_eq!(c.optim.epochs, 200);
        assert_eq!(c.optim.momentum, 0.9);
        assert_eq!(c.prompt.context_len, 16);
        c.validate().unwrap();
    }

    #[test]
    fn lr_schedule_steps_every_period() {
        let o = OptimConfig::default();
        assert_eq!(o.lr_at(0), 0.01);
        assert_eq!(o.lr_at(29), 0.01);
        assert!((o.lr_at(30) - 0.001).abs() < 1e-18);
        assert!((o.lr_at(65) - 0.0001).abs() < 1e-18);
        for e in 0..200 {
            assert_eq!(o.lr_at(e), 0.01 * 0.1f64.powi((e / 30) as i32));
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        assert_eq!(
            RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap(),
            c
        );
    }

    #[test]
    fn dotted_and_leaf_overrides() {
        let c = RunConfig::default()
            .with_overrides(&pairs(&[
                ("optim.lr", "0.05"),
                ("epochs", "3"),
                ("task", "custom"),
                ("known", "4"),
                ("patch_mode", "replace"),
                ("loss_weights.kn_cl", "0"),
                ("run_dir", "/tmp/x"),
            ]))
            .unwrap();
        assert_eq!(c.optim.lr, 0.05);
        assert_eq!(c.optim.epochs, 3);
        assert_eq!(c.protocol.task, "custom");
        assert_eq!(c.protocol.known, 4);
        assert_eq!(
            c.prompt.patch_mode,
            crate::visual_prompt::PatchMode::Replace
        );
        assert_eq!(c.prompt.loss_weights.kn_cl, 0.0);
        assert_eq!(c.run_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn task_number_stays_a_string() {
        let c = RunConfig::default()
            .with_overrides(&pairs(&[("protocol.task", "3")]))
            .unwrap();
        assert_eq!(c.protocol.task, "3");
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let c = RunConfig::default();
        for p in [
            ("nonsense", "1"),
            ("optim.nonsense", "1"),
            ("seed", "abc"),
            ("batch_size", "4"),
        ] {
            // batch_size exists in two sections
            assert!(
                matches!(c.with_overrides(&pairs(&[p])), Err(HespError::Config(_))),
                "{p:?}"
            );
        }
    }

    #[test]
    fn override_args_parse() {
        let args: Vec<String> = ["--lr", "0.1", "--optim.epochs=4"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            parse_override_args(&args).unwrap(),
            pairs(&[("lr", "0.1"), ("optim.epochs", "4")])
        );
        assert!(parse_override_args(&["lr".to_string()]).is_err());
        assert!(parse_override_args(&["--lr".to_string()]).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::default();
        c.optim.lr = 0.0;
        assert!(matches!(c.validate(), Err(HespError::Config(_))));
        let mut c = RunConfig::default();
        c.data.source = DataSource::Manifest;
        c.data.manifest = "/does/not/exist.tsv".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.protocol.task = "9".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }
}
