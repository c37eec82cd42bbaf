//! Codebook update from per-kernel gradients.
//!
//! Every kernel that maps to entry `i` contributes its gradient; the entry
//! moves against the elementwise average of those gradients:
//! `c_i ← c_i − γ · (Σ_{j: a(j) = i} g_j) / z_i`. Gradients come from an
//! external training system.

use crate::error::{Error, Result};
use crate::kernel::to_kernel_matrix;
use crate::quantizer::KernelCodebook;
use crate::tensor::WeightTensor;

/// Learning rate used for codebook retraining.
pub const DEFAULT_LEARNING_RATE: f64 = 0.001;

/// Gradients of the loss with respect to each kernel, kernel-contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    pub layer_name: String,
    pub omega_sq: usize,
    pub grads: Vec<f32>,
    pub learning_rate: f64,
}

impl GradientBatch {
    pub fn new(
        layer_name: impl Into<String>,
        omega_sq: usize,
        grads: Vec<f32>,
        learning_rate: f64,
    ) -> Result<Self> {
        let layer_name = layer_name.into();
        if omega_sq == 0 || !grads.len().is_multiple_of(omega_sq) {
            return Err(Error::Shape(format!(
                "layer '{layer_name}': {} gradient values are not whole kernels of {omega_sq}",
                grads.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                layer: layer_name,
                index,
            });
        }
        if !learning_rate.is_finite() {
            return Err(Error::InvalidArgument(
                "learning rate must be finite".into(),
            ));
        }
        Ok(GradientBatch {
            layer_name,
            omega_sq,
            grads,
            learning_rate,
        })
    }

    /// Reads gradients stored like a conv weight tensor (e.g. one layer of a
    /// KQT archive).
    pub fn from_tensor(t: &WeightTensor, learning_rate: f64) -> Result<Self> {
        let km = to_kernel_matrix(t)?;
        Self::new(
            t.name(),
            km.omega_sq(),
            km.columns().to_vec(),
            learning_rate,
        )
    }

    pub fn kernels(&self) -> usize {
        self.grads.len() / self.omega_sq
    }
}

/// Per-entry elementwise mean of the gradients mapped to it; entries no
/// kernel uses get zeros.
pub fn elementwise_grad_average(
    assignment: &[u32],
    grads: &[f32],
    k: usize,
    omega_sq: usize,
) -> Result<Vec<f64>> {
    if omega_sq == 0 || grads.len() != assignment.len() * omega_sq {
        return Err(Error::Shape(format!(
            "{} gradient values for {} kernels of size {omega_sq}",
            grads.len(),
            assignment.len()
        )));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            layer: String::new(),
            index,
        });
    }
    let mut sums = vec![0.0f64; k * omega_sq];
    let mut counts = vec![0u64; k];
    for (pos, (&a, g)) in assignment
        .iter()
        .zip(grads.chunks_exact(omega_sq))
        .enumerate()
    {
        let a = a as usize;
        if a >= k {
            return Err(Error::IndexOutOfRange {
                layer: String::new(),
                position: pos,
                value: a as u64,
                limit: k as u64,
            });
        }
        counts[a] += 1;
        for (s, &v) in sums[a * omega_sq..(a + 1) * omega_sq].iter_mut().zip(g) {
            *s += f64::from(v);
        }
    }
    for (entry, &z) in sums.chunks_exact_mut(omega_sq).zip(&counts) {
        if z > 0 {
            for s in entry {
                *s /= z as f64;
            }
        }
    }
    Ok(sums)
}

/// One gradient step on the codebook entries; assignment and appearance
/// counts are unchanged.
pub fn apply_codebook_update(cb: &KernelCodebook, gb: &GradientBatch) -> Result<KernelCodebook> {
    if gb.omega_sq != cb.omega_sq() || gb.kernels() != cb.n() {
        return Err(Error::Shape(format!(
            "layer '{}': gradients for {} kernels of {} vs codebook of {} kernels of {}",
            gb.layer_name,
            gb.kernels(),
            gb.omega_sq,
            cb.n(),
            cb.omega_sq()
        )));
    }
    let avg = elementwise_grad_average(cb.assignment(), &gb.grads, cb.k(), cb.omega_sq())?;
    let entries = cb
        .entries()
        .iter()
        .zip(&avg)
        .map(|(&c, &g)| (f64::from(c) - gb.learning_rate * g) as f32)
        .collect();
    cb.with_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_kernels_one_entry() {
        let cb = KernelCodebook::new(9, vec![0.5; 9], vec![0, 0]).unwrap();
        let mut grads = vec![1.0f32; 9];
        grads.extend([3.0f32; 9]);
        let gb = GradientBatch::new("l", 9, grads, 0.001).unwrap();
        let out = apply_codebook_update(&cb, &gb).unwrap();
        let want = (0.5f64 - 0.002) as f32;
        assert!(out.entries().iter().all(|&v| v == want));
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let cb = KernelCodebook::new(2, vec![1.0, 2.0, 3.0, 4.0], vec![1, 0, 1]).unwrap();
        let gb = GradientBatch::new("l", 2, vec![0.0; 6], 0.1).unwrap();
        assert_eq!(apply_codebook_update(&cb, &gb).unwrap(), cb);
    }

    #[test]
    fn averages() {
        // one kernel per entry: raw gradients come back
        let avg = elementwise_grad_average(&[1, 0], &[1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        assert_eq!(avg, vec![3.0, 4.0, 1.0, 2.0]);
        // unused entry gets zeros
        let avg = elementwise_grad_average(&[0], &[5.0], 3, 1).unwrap();
        assert_eq!(avg, vec![5.0, 0.0, 0.0]);
        // everything on one entry: plain mean
        let avg = elementwise_grad_average(&[0, 0, 0, 0], &[1.0, 2.0, 3.0, 6.0], 1, 1).unwrap();
        assert_eq!(avg, vec![3.0]);
    }

    #[test]
    fn errors() {
        let cb = KernelCodebook::new(1, vec![0.0], vec![0, 0]).unwrap();
        let gb = GradientBatch::new("l", 1, vec![1.0], 0.1).unwrap();
        assert!(apply_codebook_update(&cb, &gb).is_err());
        assert!(GradientBatch::new("l", 1, vec![f32::NAN], 0.1).is_err());
        assert!(elementwise_grad_average(&[3], &[1.0], 2, 1).is_err());
    }

    #[test]
    fn reads_gradients_from_conv_tensor() {
        let t = WeightTensor::conv("g", 1, 1, 2, vec![1.0, 2.0]).unwrap();
        let gb = GradientBatch::from_tensor(&t, 0.01).unwrap();
        assert_eq!(gb.kernels(), 2);
        assert_eq!(gb.grads, vec![1.0, 2.0]);
    }
}
