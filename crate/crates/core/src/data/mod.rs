//! Samples, datasets, and everything that produces or partitions them.

mod manifest;
mod sampling;
mod split;
mod synth;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, write_manifest};
pub use sampling::{sample_frames, sample_indices, DEFAULT_NUM_FRAMES};
pub use split::{
    apply_split, generate_splits, openness, read_split_file, write_split_file, OpennessSplit,
};
pub use synth::{
    render_clean_frame, sample_jitter, synthesize_dataset, ClassSignal, Jitter, SyntheticSpec,
};

use crate::error::{HespError, Result};
use crate::tensor::{Frame, FrameShape};

/// Stable 64-bit seed derived from a sample id.
pub fn id_seed(id: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Train/test designation carried by a manifest row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub frames: Vec<Frame>,
    pub label: usize,
    /// Manifest path, or `"synthetic"`.
    pub source: String,
    pub tag: Option<SplitTag>,
}

impl VideoSample {
    pub fn first_frame(&self) -> &Frame {
        &self.frames[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<VideoSample>,
    class_names: Vec<String>,
    frame_shape: FrameShape,
}

impl Dataset {
    /// Validates every sample and class-list invariant.
    pub fn new(
        samples: Vec<VideoSample>,
        class_names: Vec<String>,
        frame_shape: FrameShape,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(HespError::Contract(format!(
                    "duplicate class name `{name}`"
                )));
            }
        }
        for s in &samples {
            if s.frames.is_empty() {
                return Err(HespError::Contract(format!(
                    "sample `{}` has no frames",
                    s.id
                )));
            }
            if let Some(f) = s.frames.iter().find(|f| f.shape() != frame_shape) {
                return Err(HespError::Contract(format!(
                    "sample `{}` has a {} frame, dataset frames are {frame_shape}",
                    s.id,
                    f.shape()
                )));
            }
            if s.label >= class_names.len() {
                return Err(HespError::Contract(format!(
                    "sample `{}` label {} outside {} classes",
                    s.id,
                    s.label,
                    class_names.len()
                )));
            }
        }
        Ok(Self {
            samples,
            class_names,
            frame_shape,
        })
    }

    pub fn samples(&self) -> &[VideoSample] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn frame_shape(&self) -> FrameShape {
        self.frame_shape
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_label(&self, label: usize) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// Keeps the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            frame_shape: self.frame_shape,
        }
    }
}

/// The seven basic emotion names, in the order datasets usually list them.
pub const BASIC_EMOTIONS: [&str; 7] = [
    "anger",
    "disgust",
    "fear",
    "happiness",
    "neutral",
    "sadness",
    "surprise",
];

/// The four additional single-label emotions of the 11-class taxonomy.
pub const EXTRA_EMOTIONS: [&str; 4] = ["contempt", "anxiety", "helplessness", "disappointment"];
