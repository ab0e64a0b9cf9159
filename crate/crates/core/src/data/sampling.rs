use super::VideoSample;
use crate::tensor::Frame;

pub const DEFAULT_NUM_FRAMES: usize = 16;

/// Uniform temporal indices `round(q·(len−1)/(n−1))`, `q = 0..n`. Videos
/// shorter than `n` keep every frame and repeat the last one.
pub fn sample_indices(len: usize, n: usize) -> Vec<usize> {
    assert!(
        len >= 1 && n >= 1,
        "sample_indices needs len >= 1 and n >= 1"
    );
    if len < n {
        return (0..n).map(|q| q.min(len - 1)).collect();
    }
    if n == 1 {
        return vec![0];
    }
    let span = len - 1;
    let steps = n - 1;
    // integer round-half-up of q*span/steps
    (0..n)
        .map(|q| (2 * q * span + steps) / (2 * steps))
        .collect()
}

pub fn sample_frames(sample: &VideoSample, n: usize) -> Vec<Frame> {
    sample_indices(sample.frames.len(), n)
        .into_iter()
        .map(|i| sample.frames[i].clone())
        .collect()
}
