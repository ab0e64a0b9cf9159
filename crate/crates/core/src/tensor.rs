//! Dense f64 buffers used throughout the crate: frames (channels × height ×
//! width) and the handful of vector routines the losses need.

use serde::{Deserialize, Serialize};

use crate::error::{HespError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FrameShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for FrameShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Declared numeric range of pixel values, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRange {
    pub lo: f64,
    pub hi: f64,
}

impl PixelRange {
    pub const UNIT: PixelRange = PixelRange { lo: 0.0, hi: 1.0 };

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// A single frame stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    shape: FrameShape,
    data: Vec<f64>,
}

impl Frame {
    pub fn zeros(shape: FrameShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: FrameShape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: FrameShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(HespError::Contract(format!(
                "frame buffer has {} values, shape {shape} needs {}",
                data.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Frame) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }
}

/// A row-major real matrix, one `Vec` per row.
pub type Rows = Vec<Vec<f64>>;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Returns `x / ||x||`. A zero vector is returned unchanged.
pub fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let n = norm(x);
    if n == 0.0 {
        return x.to_vec();
    }
    x.iter().map(|v| v / n).collect()
}

/// Vector-Jacobian product of [`l2_normalize`] at `x`.
pub fn l2_normalize_backward(x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let n = norm(x);
    if n == 0.0 {
        return vec![0.0; x.len()];
    }
    let y: Vec<f64> = x.iter().map(|v| v / n).collect();
    let proj = dot(&y, grad_out);
    grad_out
        .iter()
        .zip(&y)
        .map(|(g, yi)| (g - yi * proj) / n)
        .collect()
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Vector-Jacobian product of [`softmax`], given its output `p`.
pub fn softmax_backward(p: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let inner = dot(p, grad_out);
    p.iter()
        .zip(grad_out)
        .map(|(pi, gi)| pi * (gi - inner))
        .collect()
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = vec![0.3, -1.2, 0.7, 2.0];
        let g = vec![0.5, 0.1, -0.4, 0.9];
        let analytic = l2_normalize_backward(&x, &g);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = dot(&l2_normalize(&xp), &g);
            let fm = dot(&l2_normalize(&xm), &g);
            let numeric = (fp - fm) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[101.0, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn frame_rejects_wrong_length() {
        assert!(Frame::from_vec(FrameShape::new(1, 2, 2), vec![0.0; 3]).is_err());
    }
}
