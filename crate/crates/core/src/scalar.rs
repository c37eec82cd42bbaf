//! Scalar quantization of kernel codebooks and of layers that are not
//! kernel-quantized, plus the in-memory form of a quantized layer.

use crate::clustering::{kmeans, Clustering, PointSet};
use crate::error::{Error, Result};
use crate::kernel::{conv_shape, from_assignments};
use crate::quantizer::{derive_seed, KernelCodebook, QuantizeOptions};
use crate::tensor::{LayerKind, WeightTensor};

/// Default bit length of a quantized codebook parameter.
pub const DEFAULT_BITS: u8 = 6;
pub const MAX_BITS: u8 = 16;

const CODEBOOK_STREAM: u64 = 0xc0de_b00c;
const SCALAR_STREAM: u64 = 0x5ca1_a400;

/// Up to `2^bits` sorted levels and one level index per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarCodebook {
    bits: u8,
    values: Vec<f32>,
    indexes: Vec<u32>,
}

impl ScalarCodebook {
    pub fn new(bits: u8, values: Vec<f32>, indexes: Vec<u32>) -> Result<Self> {
        if bits > MAX_BITS {
            return Err(Error::InvalidArgument(format!(
                "scalar index width {bits} exceeds {MAX_BITS} bits"
            )));
        }
        if values.is_empty() || values.len() > 1usize << bits {
            return Err(Error::InvalidArgument(format!(
                "{} levels do not fit a {bits}-bit scalar codebook",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite scalar level".into()));
        }
        if values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument(
                "scalar levels must be sorted".into(),
            ));
        }
        if let Some(position) = indexes.iter().position(|&i| i as usize >= values.len()) {
            return Err(Error::IndexOutOfRange {
                layer: String::new(),
                position,
                value: indexes[position] as u64,
                limit: values.len() as u64,
            });
        }
        Ok(ScalarCodebook {
            bits,
            values,
            indexes,
        })
    }

    /// Declared index width `b_c`.
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn indexes(&self) -> &[u32] {
        &self.indexes
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.indexes
            .iter()
            .map(|&i| self.values[i as usize])
            .collect()
    }
}

/// How a layer is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Kernel codebook with full-precision entries.
    K,
    /// Kernel codebook whose entries are scalar-quantized.
    KPlusC,
    /// Every parameter scalar-quantized.
    ScalarOnly,
    /// Raw 32-bit floats.
    Passthrough,
}

impl Stage {
    pub fn tag(self) -> u8 {
        match self {
            Stage::K => 0,
            Stage::KPlusC => 1,
            Stage::ScalarOnly => 2,
            Stage::Passthrough => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Stage::K,
            1 => Stage::KPlusC,
            2 => Stage::ScalarOnly,
            3 => Stage::Passthrough,
            other => return Err(Error::Malformed(format!("unknown stage tag {other}"))),
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            Stage::K => "K",
            Stage::KPlusC => "K+C",
            Stage::ScalarOnly => "scalar",
            Stage::Passthrough => "passthrough",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerPayload {
    Kernel(KernelCodebook),
    /// `codebook` entries equal `scalar` dequantized, entry-major.
    KernelScalar {
        codebook: KernelCodebook,
        scalar: ScalarCodebook,
    },
    Scalar(ScalarCodebook),
    Passthrough(Vec<f32>),
}

/// A compressed layer together with the shape needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    name: String,
    kind: LayerKind,
    dims: Vec<usize>,
    payload: LayerPayload,
}

impl QuantizedLayer {
    /// Checks that the payload can rebuild a tensor of `dims`.
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        dims: Vec<usize>,
        payload: LayerPayload,
    ) -> Result<Self> {
        let name = name.into();
        let params: usize = dims.iter().product();
        let shape_err = |msg: String| Error::Shape(format!("layer '{name}': {msg}"));
        match &payload {
            LayerPayload::Kernel(cb) | LayerPayload::KernelScalar { codebook: cb, .. } => {
                if kind != LayerKind::Conv || dims.len() != 4 || dims[0] != dims[1] {
                    return Err(shape_err(format!(
                        "kernel codebook needs square conv dims, got {kind:?} {dims:?}"
                    )));
                }
                if cb.omega_sq() != dims[0] * dims[0] || cb.n() != dims[2] * dims[3] {
                    return Err(shape_err(format!(
                        "codebook ({} kernels of {}) does not fit dims {dims:?}",
                        cb.n(),
                        cb.omega_sq()
                    )));
                }
                if let LayerPayload::KernelScalar { codebook, scalar } = &payload {
                    if scalar.dequantize() != codebook.entries() {
                        return Err(shape_err(
                            "codebook entries differ from their scalar levels".into(),
                        ));
                    }
                }
            }
            LayerPayload::Scalar(sc) => {
                if sc.indexes().len() != params {
                    return Err(shape_err(format!(
                        "{} scalar indexes for {params} parameters",
                        sc.indexes().len()
                    )));
                }
            }
            LayerPayload::Passthrough(values) => {
                if values.len() != params {
                    return Err(shape_err(format!(
                        "{} values for {params} parameters",
                        values.len()
                    )));
                }
            }
        }
        // shape sanity is the tensor constructor's job
        WeightTensor::new(name.clone(), kind, dims.clone(), vec![0.0; params])?;
        Ok(QuantizedLayer {
            name,
            kind,
            dims,
            payload,
        })
    }

    pub fn kernel(t: &WeightTensor, codebook: KernelCodebook) -> Result<Self> {
        Self::new(
            t.name(),
            t.kind(),
            t.dims().to_vec(),
            LayerPayload::Kernel(codebook),
        )
    }

    pub fn passthrough(t: &WeightTensor) -> Self {
        QuantizedLayer {
            name: t.name().to_owned(),
            kind: t.kind(),
            dims: t.dims().to_vec(),
            payload: LayerPayload::Passthrough(t.data().to_vec()),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn payload(&self) -> &LayerPayload {
        &self.payload
    }

    pub fn params(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn stage(&self) -> Stage {
        match self.payload {
            LayerPayload::Kernel(_) => Stage::K,
            LayerPayload::KernelScalar { .. } => Stage::KPlusC,
            LayerPayload::Scalar(_) => Stage::ScalarOnly,
            LayerPayload::Passthrough(_) => Stage::Passthrough,
        }
    }

    pub fn kernel_codebook(&self) -> Option<&KernelCodebook> {
        match &self.payload {
            LayerPayload::Kernel(cb) | LayerPayload::KernelScalar { codebook: cb, .. } => Some(cb),
            _ => None,
        }
    }

    pub fn scalar_codebook(&self) -> Option<&ScalarCodebook> {
        match &self.payload {
            LayerPayload::KernelScalar { scalar, .. } | LayerPayload::Scalar(scalar) => {
                Some(scalar)
            }
            _ => None,
        }
    }
}

fn levels_for(bits: u8) -> usize {
    1usize << bits.min(MAX_BITS)
}

/// Weighted 1-D k-means over `values` with at most `levels` clusters.
pub fn cluster_scalars(
    values: &[f32],
    weights: Vec<f64>,
    levels: usize,
    opts: &QuantizeOptions,
) -> Result<Clustering> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("nothing to quantize".into()));
    }
    let ps = PointSet::with_weights(1, values.iter().map(|&v| f64::from(v)).collect(), weights)?;
    let levels = levels.min(ps.distinct_weighted()).max(1);
    kmeans(&ps, levels, opts.seed, &opts.kmeans, opts.algorithm)
}

/// Sorted levels and remapped indexes from a 1-D clustering.
fn scalar_codebook_from(c: &Clustering, bits: u8) -> Result<ScalarCodebook> {
    let mut order: Vec<usize> = (0..c.k()).collect();
    order.sort_by(|&a, &b| c.centroids[a].total_cmp(&c.centroids[b]));
    let mut remap = vec![0u32; order.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new as u32;
    }
    let values = order.iter().map(|&j| c.centroids[j] as f32).collect();
    let indexes = c.assignment.iter().map(|&a| remap[a as usize]).collect();
    ScalarCodebook::new(bits, values, indexes)
}

/// Scalar-quantizes every parameter of a kernel codebook to `2^bits` levels,
/// weighting each parameter by how many kernels use its entry.
///
/// `bits` above 16 is clamped to 16; `bits = 0` means a single level.
pub fn quantize_codebook(
    cb: &KernelCodebook,
    bits: u8,
    opts: &QuantizeOptions,
) -> Result<(KernelCodebook, ScalarCodebook)> {
    let bits = bits.min(MAX_BITS);
    let c = cluster_codebook(cb, bits, opts)?;
    let scalar = scalar_codebook_from(&c, bits)?;
    let quantized = cb.with_entries(scalar.dequantize())?;
    Ok((quantized, scalar))
}

/// The weighted clustering behind [`quantize_codebook`].
pub fn cluster_codebook(
    cb: &KernelCodebook,
    bits: u8,
    opts: &QuantizeOptions,
) -> Result<Clustering> {
    if cb.n() == 0 {
        return Err(Error::InvalidArgument("codebook maps no kernels".into()));
    }
    let d = cb.omega_sq();
    let weights = cb
        .appearance()
        .iter()
        .flat_map(|&z| std::iter::repeat_n(z as f64, d))
        .collect();
    cluster_scalars(cb.entries(), weights, levels_for(bits.min(MAX_BITS)), opts)
}

/// Unweighted `2^bits`-level quantization of every parameter of a layer.
pub fn quantize_scalar_layer(
    t: &WeightTensor,
    bits: u8,
    opts: &QuantizeOptions,
) -> Result<QuantizedLayer> {
    let bits = bits.min(MAX_BITS);
    let c = cluster_scalars(t.data(), vec![1.0; t.len()], levels_for(bits), opts)?;
    let scalar = scalar_codebook_from(&c, bits)?;
    QuantizedLayer::new(
        t.name(),
        t.kind(),
        t.dims().to_vec(),
        LayerPayload::Scalar(scalar),
    )
}

/// Turns every stage-K layer into stage K+C, calling `retrain` after every
/// second converted layer and after the last one.
pub fn quantize_codebooks(
    layers: &mut [QuantizedLayer],
    bits: u8,
    opts: &QuantizeOptions,
    retrain: &mut dyn FnMut(usize) -> Result<()>,
) -> Result<()> {
    let targets: Vec<usize> = (0..layers.len())
        .filter(|&i| layers[i].stage() == Stage::K)
        .collect();
    for (done, &i) in targets.iter().enumerate() {
        let layer = &layers[i];
        let LayerPayload::Kernel(cb) = &layer.payload else {
            unreachable!("filtered on stage K")
        };
        let o = QuantizeOptions {
            seed: derive_seed(opts.seed ^ CODEBOOK_STREAM, i, levels_for(bits)),
            ..*opts
        };
        let (codebook, scalar) = quantize_codebook(cb, bits, &o)?;
        layers[i] = QuantizedLayer::new(
            layer.name.clone(),
            layer.kind,
            layer.dims.clone(),
            LayerPayload::KernelScalar { codebook, scalar },
        )?;
        let count = done + 1;
        if count % 2 == 0 || count == targets.len() {
            retrain(count)?;
        }
    }
    Ok(())
}

/// Seed used for the scalar quantization of layer `index`.
pub fn scalar_layer_seed(base: u64, index: usize, bits: u8) -> u64 {
    derive_seed(base ^ SCALAR_STREAM, index, levels_for(bits))
}

/// Rebuilds the full-precision tensor a quantized layer stands for.
pub fn recover_layer(ql: &QuantizedLayer) -> Result<WeightTensor> {
    match &ql.payload {
        LayerPayload::Kernel(cb) | LayerPayload::KernelScalar { codebook: cb, .. } => {
            let t = WeightTensor::new(
                ql.name.clone(),
                ql.kind,
                ql.dims.clone(),
                vec![0.0; ql.params()],
            )?;
            from_assignments(&ql.name, cb, conv_shape(&t)?)
        }
        LayerPayload::Scalar(sc) => {
            WeightTensor::new(ql.name.clone(), ql.kind, ql.dims.clone(), sc.dequantize())
        }
        LayerPayload::Passthrough(values) => {
            WeightTensor::new(ql.name.clone(), ql.kind, ql.dims.clone(), values.clone())
        }
    }
}
