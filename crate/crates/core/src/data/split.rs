//! Known/unknown class partitions and their openness.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, SplitTag, VideoSample};
use crate::error::{HespError, Result};

/// `1 − sqrt(K / (K + U))`.
pub fn openness(known: usize, unknown: usize) -> Result<f64> {
    if known == 0 {
        return Err(HespError::Domain(
            "openness needs at least one known class".into(),
        ));
    }
    Ok(1.0 - (known as f64 / (known + unknown) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpennessSplit {
    /// Sorted ascending; position in this list is the remapped label.
    pub known_classes: Vec<usize>,
    pub unknown_classes: Vec<usize>,
    pub seed: u64,
    pub openness: f64,
}

impl OpennessSplit {
    pub fn new(known_classes: Vec<usize>, unknown_classes: Vec<usize>, seed: u64) -> Result<Self> {
        let known: BTreeSet<_> = known_classes.iter().collect();
        if known.len() != known_classes.len() {
            return Err(HespError::Protocol("duplicate known class".into()));
        }
        if unknown_classes.iter().any(|c| known.contains(c)) {
            return Err(HespError::Protocol(
                "a class is both known and unknown".into(),
            ));
        }
        if known_classes.len() < 2 || unknown_classes.is_empty() {
            return Err(HespError::Protocol(format!(
                "need K >= 2 and U >= 1, got K={} U={}",
                known_classes.len(),
                unknown_classes.len()
            )));
        }
        let openness = openness(known_classes.len(), unknown_classes.len())?;
        Ok(Self {
            known_classes,
            unknown_classes,
            seed,
            openness,
        })
    }

    pub fn num_known(&self) -> usize {
        self.known_classes.len()
    }

    pub fn num_unknown(&self) -> usize {
        self.unknown_classes.len()
    }

    /// Label used for every unknown-class sample after remapping (0-based `K`).
    pub fn unknown_label(&self) -> usize {
        self.known_classes.len()
    }

    /// `O(K:U)` as printed in result tables.
    pub fn label(&self) -> String {
        format!("O({}:{})", self.num_known(), self.num_unknown())
    }

    /// Original class index → remapped label (`K` for unknowns, `None` for
    /// classes in neither list).
    pub fn remap(&self, class: usize) -> Option<usize> {
        if let Some(i) = self.known_classes.iter().position(|&c| c == class) {
            Some(i)
        } else if self.unknown_classes.contains(&class) {
            Some(self.unknown_label())
        } else {
            None
        }
    }
}

fn mix(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| {
        acc.saturating_mul((n - i) as u128) / (i as u128 + 1)
    })
}

/// `repeats` random known/unknown partitions. Repeat `r` draws from a
/// ChaCha stream `r` seeded by `seed`; partitions are redrawn until they
/// differ from earlier ones whenever enough distinct partitions exist.
pub fn generate_splits(
    class_count: usize,
    known_count: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<OpennessSplit>> {
    if known_count >= class_count {
        return Err(HespError::Protocol(format!(
            "known_count {known_count} must be below class_count {class_count}"
        )));
    }
    if known_count < 2 {
        return Err(HespError::Protocol("known_count must be at least 2".into()));
    }
    if repeats == 0 {
        return Err(HespError::Protocol("repeats must be at least 1".into()));
    }
    let distinct_possible = binomial(class_count, known_count) >= repeats as u128;
    let mut used: Vec<Vec<usize>> = Vec::new();
    let mut out = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let known = loop {
            let mut draw = index::sample(&mut rng, class_count, known_count).into_vec();
            draw.sort_unstable();
            if !distinct_possible || !used.contains(&draw) {
                break draw;
            }
        };
        used.push(known.clone());
        let unknown = (0..class_count).filter(|c| !known.contains(c)).collect();
        out.push(OpennessSplit::new(known, unknown, mix(seed, r as u64))?);
    }
    Ok(out)
}

/// Partitions `dataset` into a known-only training set and a test set whose
/// unknown-class samples all carry the sentinel label `K`.
///
/// Manifest tags are honoured; untagged known-class samples are divided
/// 80/20 per class with a generator seeded by `split.seed`. Every
/// unknown-class sample goes to the test set.
pub fn apply_split(dataset: &Dataset, split: &OpennessSplit) -> Result<(Dataset, Dataset)> {
    let n = dataset.num_classes();
    if let Some(bad) = split
        .known_classes
        .iter()
        .chain(&split.unknown_classes)
        .find(|&&c| c >= n)
    {
        return Err(HespError::Protocol(format!(
            "split references class {bad}, dataset has {n}"
        )));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (k, &class) in split.known_classes.iter().enumerate() {
        let members: Vec<usize> = dataset
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(HespError::Protocol(format!(
                "known class `{}` has no samples",
                dataset.class_names()[class]
            )));
        }
        let mut untagged = Vec::new();
        for &i in &members {
            match dataset.samples()[i].tag {
                Some(SplitTag::Train) => train_idx.push(i),
                Some(SplitTag::Test) => test_idx.push(i),
                None => untagged.push(i),
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
        rng.set_stream(k as u64);
        untagged.shuffle(&mut rng);
        let n_train = (untagged.len() * 4).div_ceil(5);
        train_idx.extend_from_slice(&untagged[..n_train]);
        test_idx.extend_from_slice(&untagged[n_train..]);
    }
    for (i, s) in dataset.samples().iter().enumerate() {
        if split.unknown_classes.contains(&s.label) {
            test_idx.push(i);
        }
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let known_names: Vec<String> = split
        .known_classes
        .iter()
        .map(|&c| dataset.class_names()[c].clone())
        .collect();
    let mut test_names = known_names.clone();
    test_names.push("unknown".to_string());

    let relabel = |i: usize| -> VideoSample {
        let mut s = dataset.samples()[i].clone();
        s.label = split
            .remap(s.label)
            .expect("index drawn from split classes");
        s
    };
    let train = Dataset::new(
        train_idx.iter().map(|&i| relabel(i)).collect(),
        known_names,
        dataset.frame_shape(),
    )?;
    let test = Dataset::new(
        test_idx.iter().map(|&i| relabel(i)).collect(),
        test_names,
        dataset.frame_shape(),
    )?;
    Ok((train, test))
}

pub fn write_split_file(path: &Path, splits: &[OpennessSplit]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(splits)?)?;
    Ok(())
}

pub fn read_split_file(path: &Path) -> Result<Vec<OpennessSplit>> {
    let text = fs::read_to_string(path).map_err(|e| HespError::Ingestion {
        path: path.to_path_buf(),
        row: None,
        reason: e.to_string(),
    })?;
    let splits: Vec<OpennessSplit> = serde_json::from_str(&text)?;
    for s in &splits {
        let fresh = OpennessSplit::new(s.known_classes.clone(), s.unknown_classes.clone(), s.seed)?;
        if fresh.openness != s.openness {
            return Err(HespError::Protocol(format!(
                "split file openness {} disagrees with {}",
                s.openness, fresh.openness
            )));
        }
    }
    Ok(splits)
}
