//! Storage cost and quality arithmetic.
//!
//! A kernel-quantized layer with `n` kernels of `ω×ω`, a `k`-entry codebook
//! and `b_c`-bit codebook parameters costs
//!
//! ```text
//! B = k·ω²·b_c + n·⌈log₂ k⌉   bits,    β = B / (n·ω²)  bits per parameter
//! ```
//!
//! Bit counts are exact integers; β and the size fraction `β / 32` are
//! derived from them. The 32-bit level table of a scalar codebook is not
//! charged to `B`.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::KernelCodebook;
use crate::scalar::{LayerPayload, QuantizedLayer, Stage};
use crate::tensor::{LayerKind, WeightTensor};

/// Bit width of an unquantized parameter.
pub const FULL_PRECISION_BITS: u32 = 32;

/// `⌈log₂ k⌉`, with 0 for `k ≤ 1`.
pub fn index_bits(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

/// `k·ω²·b_c + n·⌈log₂ k⌉` without argument checks.
pub fn storage_bits(n: usize, omega_sq: usize, k: usize, b_c: u32) -> u128 {
    k as u128 * omega_sq as u128 * b_c as u128 + n as u128 * index_bits(k) as u128
}

/// Storage cost of one kernel-quantized layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCost {
    pub n: usize,
    pub omega: usize,
    pub k: usize,
    pub b_c: u32,
    pub bits_total: u128,
    pub beta: f64,
    pub size_fraction: f64,
}

pub fn layer_cost(n: usize, omega: usize, k: usize, b_c: u32) -> Result<LayerCost> {
    if n == 0 || omega == 0 || b_c == 0 {
        return Err(Error::InvalidArgument(format!(
            "layer cost needs n, omega, b_c >= 1 (got {n}, {omega}, {b_c})"
        )));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "layer cost needs k >= 2, got {k}"
        )));
    }
    let bits_total = storage_bits(n, omega * omega, k, b_c);
    let params = n as u128 * (omega * omega) as u128;
    let beta = bits_total as f64 / params as f64;
    Ok(LayerCost {
        n,
        omega,
        k,
        b_c,
        bits_total,
        beta,
        size_fraction: beta / f64::from(FULL_PRECISION_BITS),
    })
}

/// Two-decimal rendering used in report tables.
pub fn render2(value: f64) -> String {
    format!("{value:.2}")
}

/// Compression ratio of per-parameter quantization with a `u`-entry
/// codebook of `b_1`-bit values over `n_params` parameters.
pub fn conventional_cost(n_params: u64, u: u64, b_1: u32) -> Result<f64> {
    if u < 2 {
        return Err(Error::InvalidArgument(format!("u must be >= 2, got {u}")));
    }
    if n_params == 0 {
        return Err(Error::InvalidArgument("n_params must be >= 1".into()));
    }
    let idx = index_bits(u as usize) as u128;
    let full = n_params as u128 * FULL_PRECISION_BITS as u128;
    let compressed = u as u128 * b_1 as u128 + n_params as u128 * idx;
    Ok(full as f64 / compressed as f64)
}

/// Limit of the kernel-level compression ratio for `k → 2`, `n → ∞`: `32·ω²`.
pub fn kq_limit(omega: usize) -> Result<f64> {
    if omega == 0 {
        return Err(Error::InvalidArgument("omega must be >= 1".into()));
    }
    Ok((omega * omega) as f64 * f64::from(FULL_PRECISION_BITS))
}

/// Codebook size that kernel-level quantization needs to represent every
/// kernel a `u`-level per-parameter quantizer can produce: `u^(ω²)`.
pub fn theoretical_codebook(u: u64, omega: u32) -> Result<u128> {
    (u as u128)
        .checked_pow(omega * omega)
        .ok_or_else(|| Error::InvalidArgument(format!("{u}^({omega}x{omega}) overflows")))
}

/// ℓ2 distance `‖W − Ŵ‖₂`.
pub fn reconstruction_error(original: &WeightTensor, recovered: &WeightTensor) -> Result<f64> {
    if original.dims() != recovered.dims() {
        return Err(Error::Shape(format!(
            "cannot compare {:?} with {:?}",
            original.dims(),
            recovered.dims()
        )));
    }
    let sum: f64 = original
        .data()
        .iter()
        .zip(recovered.data())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(sum.sqrt())
}

/// Appearance counts of codebook indexes and their Shannon entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexHistogram {
    pub counts: Vec<u64>,
    pub entropy_bits: f64,
}

impl IndexHistogram {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let entropy_bits = if total == 0 {
            0.0
        } else {
            let t = total as f64;
            counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / t;
                    -p * p.log2()
                })
                .sum::<f64>()
                .max(0.0)
        };
        IndexHistogram {
            counts,
            entropy_bits,
        }
    }

    /// Histogram of `indexes` over `k` symbols.
    pub fn of_indexes(indexes: &[u32], k: usize) -> Self {
        let mut counts = vec![0u64; k];
        for &i in indexes {
            counts[i as usize] += 1;
        }
        Self::from_counts(counts)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn index_histogram(cb: &KernelCodebook) -> IndexHistogram {
    IndexHistogram::from_counts(cb.appearance().to_vec())
}

/// Expected code length, in bits per index, of a Huffman code built on the
/// histogram. A single used symbol needs no bits.
pub fn huffman_estimate(h: &IndexHistogram) -> Result<f64> {
    let mut heap: BinaryHeap<Reverse<u64>> = h
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| Reverse(c))
        .collect();
    let total = h.total();
    match heap.len() {
        0 => Err(Error::InvalidArgument("empty histogram".into())),
        1 => Ok(0.0),
        _ => {
            // every merge adds one bit to each symbol below it, so the total
            // code length is the sum of all merged weights
            let mut weighted_len: u128 = 0;
            while heap.len() > 1 {
                let Reverse(a) = heap.pop().expect("len > 1");
                let Reverse(b) = heap.pop().expect("len > 1");
                weighted_len += (a + b) as u128;
                heap.push(Reverse(a + b));
            }
            Ok(weighted_len as f64 / total as f64)
        }
    }
}

/// One row of a layer-wise compression report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: String,
    /// Kernels for kernel-quantized layers, parameters otherwise.
    pub n: u64,
    /// Codebook entries (kernel or scalar levels); 0 for raw layers.
    pub k: u64,
    #[serde(rename = "beta_K")]
    pub beta_k: f64,
    #[serde(rename = "beta_KC")]
    pub beta_kc: f64,
    #[serde(rename = "size_fraction_K")]
    pub size_fraction_k: f64,
    #[serde(rename = "size_fraction_KC")]
    pub size_fraction_kc: f64,
    pub entropy_bits: Option<f64>,
    pub huffman_bits: Option<f64>,
}

/// Parameter-weighted totals over a set of layers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Aggregate {
    pub layers: usize,
    pub params: u128,
    pub bits_k: u128,
    pub bits_kc: u128,
}

impl Aggregate {
    fn add(&mut self, params: u128, bits_k: u128, bits_kc: u128) {
        self.layers += 1;
        self.params += params;
        self.bits_k += bits_k;
        self.bits_kc += bits_kc;
    }

    pub fn beta_k(&self) -> f64 {
        self.bits_k as f64 / self.params as f64
    }

    pub fn beta_kc(&self) -> f64 {
        self.bits_kc as f64 / self.params as f64
    }
}

/// Layer rows plus model-level averages.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelReport {
    pub rows: Vec<ReportRow>,
    /// Stage details per row, parallel to `rows`.
    pub stages: Vec<Stage>,
    /// 3×3 kernel-quantized layers only.
    pub kernel_layers: Aggregate,
    /// Every conv layer whatever its kernel size.
    pub conv_layers: Aggregate,
    pub all_layers: Aggregate,
}

pub const CSV_HEADER: &str =
    "layer,n,k,beta_K,beta_KC,size_fraction_K,size_fraction_KC,entropy_bits,huffman_bits";

/// Builds the report. Kernel layers still at stage K get their K+C column
/// computed with `kc_bits`.
pub fn model_report(layers: &[QuantizedLayer], kc_bits: u8) -> Result<ModelReport> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument(
            "model has no layers to report".into(),
        ));
    }
    let full = u128::from(FULL_PRECISION_BITS);
    let mut rows = Vec::with_capacity(layers.len());
    let mut stages = Vec::with_capacity(layers.len());
    let mut kernel_layers = Aggregate::default();
    let mut conv_layers = Aggregate::default();
    let mut all_layers = Aggregate::default();

    for layer in layers {
        let params = layer.params() as u128;
        let (n, k, bits_k, bits_kc, hist) = match layer.payload() {
            LayerPayload::Kernel(cb) | LayerPayload::KernelScalar { codebook: cb, .. } => {
                let b_c = match layer.scalar_codebook() {
                    Some(sc) => u32::from(sc.bits()),
                    None => u32::from(kc_bits),
                };
                let d = cb.omega_sq();
                (
                    cb.n(),
                    cb.k(),
                    storage_bits(cb.n(), d, cb.k(), FULL_PRECISION_BITS),
                    storage_bits(cb.n(), d, cb.k(), b_c),
                    Some(index_histogram(cb)),
                )
            }
            LayerPayload::Scalar(sc) => {
                let bits = params * u128::from(sc.bits());
                (
                    layer.params(),
                    sc.values().len(),
                    bits,
                    bits,
                    Some(IndexHistogram::of_indexes(sc.indexes(), sc.values().len())),
                )
            }
            LayerPayload::Passthrough(_) => (layer.params(), 0, params * full, params * full, None),
        };
        let beta_k = bits_k as f64 / params as f64;
        let beta_kc = bits_kc as f64 / params as f64;
        let (entropy_bits, huffman_bits) = match &hist {
            Some(h) if h.total() > 0 => (Some(h.entropy_bits), Some(huffman_estimate(h)?)),
            _ => (None, None),
        };
        rows.push(ReportRow {
            layer: layer.name().to_owned(),
            n: n as u64,
            k: k as u64,
            beta_k,
            beta_kc,
            size_fraction_k: beta_k / f64::from(FULL_PRECISION_BITS),
            size_fraction_kc: beta_kc / f64::from(FULL_PRECISION_BITS),
            entropy_bits,
            huffman_bits,
        });
        stages.push(layer.stage());

        all_layers.add(params, bits_k, bits_kc);
        if layer.kind() == LayerKind::Conv {
            conv_layers.add(params, bits_k, bits_kc);
        }
        if matches!(layer.stage(), Stage::K | Stage::KPlusC) {
            kernel_layers.add(params, bits_k, bits_kc);
        }
    }
    Ok(ModelReport {
        rows,
        stages,
        kernel_layers,
        conv_layers,
        all_layers,
    })
}

impl ModelReport {
    /// Writes the rows as CSV with the fixed header, LF line endings.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Malformed(e.to_string()))
    }
}

/// Parses rows written by [`ModelReport::write_csv`]; `#` lines are skipped.
pub fn read_csv_rows<R: io::Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(input);
    let headers = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if headers != CSV_HEADER {
        return Err(Error::Malformed(format!(
            "unexpected CSV header '{headers}'"
        )));
    }
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

fn percent(fraction: f64) -> String {
    format!("{:.2}%", fraction * 100.0)
}

fn opt2(v: Option<f64>) -> String {
    v.map(render2).unwrap_or_else(|| "-".into())
}

impl fmt::Display for ModelReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:<11} {:>9} {:>7} {:>8} {:>8} {:>8} {:>8} {:>7} {:>7}",
            "layer", "stage", "n", "k", "frac K", "frac K+C", "bits K", "bits K+C", "H", "huff"
        )?;
        for (row, stage) in self.rows.iter().zip(&self.stages) {
            writeln!(
                f,
                "{:<16} {:<11} {:>9} {:>7} {:>8} {:>8} {:>8} {:>8} {:>7} {:>7}",
                row.layer,
                stage.label(),
                row.n,
                row.k,
                percent(row.size_fraction_k),
                percent(row.size_fraction_kc),
                render2(row.beta_k),
                render2(row.beta_kc),
                opt2(row.entropy_bits),
                opt2(row.huffman_bits),
            )?;
        }
        for (label, agg) in [
            ("3x3 kernel layers", &self.kernel_layers),
            ("all conv layers", &self.conv_layers),
            ("all layers", &self.all_layers),
        ] {
            if agg.layers > 0 {
                writeln!(
                    f,
                    "{label}: {} layers, {} params, beta K = {}, beta K+C = {}",
                    agg.layers,
                    agg.params,
                    render2(agg.beta_k()),
                    render2(agg.beta_kc())
                )?;
            }
        }
        Ok(())
    }
}
