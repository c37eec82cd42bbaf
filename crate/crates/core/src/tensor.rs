//! Full-precision weight tensors and the KQT archive container.
//!
//! A KQT file is laid out as
//!
//! ```text
//! "KQT1" | u32 version | u32 layer count
//! per layer: u16 name length | UTF-8 name | u8 kind | u8 rank | u32 dims[rank] | f32 payload
//! ```
//!
//! with every integer and float little-endian. Convolution tensors have rank 4
//! and dims `(ω, ω, p, q)`; the payload is row-major in that order, so kernel
//! `i·q + o` (input channel `i`, output channel `o`) is the contiguous-index
//! kernel. Fully connected tensors have rank 2.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::bytes::{put_f32s, ByteReader};
use crate::error::{Error, Result};

pub const KQT_MAGIC: [u8; 4] = *b"KQT1";
pub const KQT_VERSION: u32 = 1;

/// Layer type tag as stored in KQT and KQZ files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    FullyConnected,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::FullyConnected => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(LayerKind::Conv),
            1 => Ok(LayerKind::FullyConnected),
            other => Err(Error::Malformed(format!("unknown layer kind tag {other}"))),
        }
    }

    fn rank(self) -> usize {
        match self {
            LayerKind::Conv => 4,
            LayerKind::FullyConnected => 2,
        }
    }
}

/// A named full-precision weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    name: String,
    kind: LayerKind,
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl WeightTensor {
    /// Builds a tensor after checking rank, dimensions, length and finiteness.
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        dims: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let name = name.into();
        if dims.len() != kind.rank() {
            return Err(Error::Shape(format!(
                "layer '{name}': {kind:?} tensor needs rank {}, got {}",
                kind.rank(),
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!(
                "layer '{name}': zero dimension in {dims:?}"
            )));
        }
        let expected = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Shape(format!("layer '{name}': element count overflows")))?;
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "layer '{name}': dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: name, index });
        }
        Ok(WeightTensor {
            name,
            kind,
            dims,
            data,
        })
    }

    /// Convolution tensor with square `omega × omega` kernels.
    pub fn conv(
        name: impl Into<String>,
        omega: usize,
        in_channels: usize,
        out_channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        Self::new(
            name,
            LayerKind::Conv,
            vec![omega, omega, in_channels, out_channels],
            data,
        )
    }

    pub fn fully_connected(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        Self::new(name, LayerKind::FullyConnected, vec![rows, cols], data)
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Kernel side length for a convolution tensor with square kernels.
    pub fn square_kernel(&self) -> Option<usize> {
        match (self.kind, self.dims.as_slice()) {
            (LayerKind::Conv, [h, w, _, _]) if h == w => Some(*h),
            _ => None,
        }
    }

    /// Same tensor with different values; the caller guarantees the length.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.name.clone(), self.kind, self.dims.clone(), data)
    }
}

/// An ordered collection of uniquely named weight tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelArchive {
    layers: Vec<WeightTensor>,
}

impl ModelArchive {
    pub fn new(layers: Vec<WeightTensor>) -> Result<Self> {
        let mut seen = HashSet::new();
        for layer in &layers {
            if !seen.insert(layer.name()) {
                return Err(Error::DuplicateLayer(layer.name().to_owned()));
            }
        }
        Ok(ModelArchive { layers })
    }

    pub fn version(&self) -> u32 {
        KQT_VERSION
    }

    pub fn layers(&self) -> &[WeightTensor] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<WeightTensor> {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.layers.iter().find(|l| l.name() == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name() == name)
    }

    /// Replaces layer `index` with a tensor of identical name, kind and dims.
    pub fn replace(&mut self, index: usize, tensor: WeightTensor) -> Result<()> {
        let slot = self
            .layers
            .get_mut(index)
            .ok_or_else(|| Error::InvalidArgument(format!("layer index {index} out of range")))?;
        if slot.name() != tensor.name()
            || slot.kind() != tensor.kind()
            || slot.dims() != tensor.dims()
        {
            return Err(Error::Shape(format!(
                "replacement for '{}' does not match its name/kind/dims",
                slot.name()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    /// Serializes the archive to its KQT byte representation.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&KQT_MAGIC);
        out.extend_from_slice(&KQT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.layers.len(), "layer count")?.to_le_bytes());
        for layer in &self.layers {
            if let Some(index) = layer.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: layer.name.clone(),
                    index,
                });
            }
            let name = layer.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| {
                Error::InvalidArgument(format!(
                    "layer name '{}' longer than 65535 bytes",
                    layer.name
                ))
            })?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(layer.kind.tag());
            out.push(layer.dims.len() as u8);
            for &d in &layer.dims {
                out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
            }
            put_f32s(&mut out, &layer.data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic: [u8; 4] = r.array("magic")?;
        if magic != KQT_MAGIC {
            return Err(Error::BadMagic {
                expected: KQT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != KQT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32("layer count")? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = r.string(name_len, "layer name")?;
            let kind = LayerKind::from_tag(r.u8("layer kind")?)?;
            let rank = r.u8("rank")? as usize;
            if rank != kind.rank() {
                return Err(Error::Shape(format!(
                    "layer '{name}': {kind:?} tensor needs rank {}, file says {rank}",
                    kind.rank()
                )));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Shape(format!("layer '{name}': element count overflows")))?;
            let data = r.f32_vec(count, &format!("payload of layer '{name}'"))?;
            layers.push(WeightTensor::new(name, kind, dims, data)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after last layer",
                r.remaining()
            )));
        }
        ModelArchive::new(layers)
    }
}

pub(crate) fn u32_of(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::InvalidArgument(format!("{what} {value} exceeds u32")))
}

/// Writes `archive` to `path` in KQT format.
pub fn save_archive(archive: &ModelArchive, path: impl AsRef<Path>) -> Result<()> {
    let bytes = archive.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a KQT file written by [`save_archive`].
pub fn load_archive(path: impl AsRef<Path>) -> Result<ModelArchive> {
    let bytes = fs::read(path)?;
    ModelArchive::from_bytes(&bytes)
}
