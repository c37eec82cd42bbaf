//! Reconstruction error of one layer under kernel quantization at several
//! codebook sizes and under per-parameter scalar quantization at several bit
//! widths.

use serde::Serialize;

use kq_core::kernel::to_kernel_matrix;
use kq_core::metrics::{reconstruction_error, storage_bits, FULL_PRECISION_BITS};
use kq_core::quantizer::{derive_seed, quantize_layer, QuantizeOptions};
use kq_core::scalar::{quantize_scalar_layer, recover_layer, scalar_layer_seed, QuantizedLayer};
use kq_core::tensor::WeightTensor;
use kq_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// "kernel" or "scalar"
    pub method: &'static str,
    /// Codebook size for kernel rows, bits per weight for scalar rows.
    pub setting: u64,
    pub bits_per_weight: f64,
    pub l2_error: f64,
}

fn best_of<F>(restarts: usize, mut run: F) -> Result<f64>
where
    F: FnMut(u64) -> Result<f64>,
{
    if restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be >= 1".into()));
    }
    let mut best = f64::INFINITY;
    for r in 0..restarts as u64 {
        best = best.min(run(r)?);
    }
    Ok(best)
}

/// ‖W − Ŵ‖₂ with the kernels of `t` replaced by a `k`-entry codebook.
pub fn kernel_error(
    t: &WeightTensor,
    layer_index: usize,
    k: usize,
    restarts: usize,
    opts: &QuantizeOptions,
) -> Result<f64> {
    let km = to_kernel_matrix(t)?;
    best_of(restarts, |r| {
        let o = QuantizeOptions {
            seed: derive_seed(opts.seed.wrapping_add(r), layer_index, k),
            ..*opts
        };
        let cb = quantize_layer(&km, k, &o)?;
        let recovered = recover_layer(&QuantizedLayer::kernel(t, cb)?)?;
        reconstruction_error(t, &recovered)
    })
}

/// ‖W − Ŵ‖₂ with every weight of `t` replaced by one of `2^bits` levels.
pub fn scalar_error(
    t: &WeightTensor,
    layer_index: usize,
    bits: u8,
    restarts: usize,
    opts: &QuantizeOptions,
) -> Result<f64> {
    best_of(restarts, |r| {
        let o = QuantizeOptions {
            seed: scalar_layer_seed(opts.seed.wrapping_add(r), layer_index, bits),
            ..*opts
        };
        let recovered = recover_layer(&quantize_scalar_layer(t, bits, &o)?)?;
        reconstruction_error(t, &recovered)
    })
}

pub fn sweep_layer(
    t: &WeightTensor,
    layer_index: usize,
    k_list: &[usize],
    bit_list: &[u8],
    restarts: usize,
    opts: &QuantizeOptions,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(k_list.len() + bit_list.len());
    if !k_list.is_empty() {
        let km = to_kernel_matrix(t)?;
        for &k in k_list {
            let bits = storage_bits(km.n(), km.omega_sq(), k, FULL_PRECISION_BITS);
            rows.push(SweepRow {
                method: "kernel",
                setting: k as u64,
                bits_per_weight: bits as f64 / t.len() as f64,
                l2_error: kernel_error(t, layer_index, k, restarts, opts)?,
            });
        }
    }
    for &b in bit_list {
        rows.push(SweepRow {
            method: "scalar",
            setting: u64::from(b),
            bits_per_weight: f64::from(b),
            l2_error: scalar_error(t, layer_index, b, restarts, opts)?,
        });
    }
    Ok(rows)
}
