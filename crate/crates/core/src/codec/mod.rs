//! KQZ: the on-disk form of a compressed model.
//!
//! ```text
//! "KQZ1" | u32 version | u32 layer count
//! directory, one record per layer:
//!   u16 name length | name | u8 kind | u8 rank | u32 dims[rank]
//!   u8 stage | u8 index bits | u8 b_c | u32 k | u32 table length
//!   u64 offset | u64 length | u64 accounted bits | u64 overhead bits
//! payload: the layer blobs back to back, offsets relative to its start
//! ```
//!
//! Layer blobs by stage, each region zero-padded to a whole byte:
//!
//! | stage       | regions                                                        |
//! |-------------|----------------------------------------------------------------|
//! | K           | k·ω² f32 entries, n kernel indexes at ⌈log₂k⌉ bits             |
//! | K+C         | f32 level table, k·ω² level indexes at b_c bits, kernel indexes |
//! | scalar      | f32 level table, one level index per parameter at b_c bits     |
//! | passthrough | raw f32 parameters                                             |
//!
//! "Accounted bits" are the unpadded entry and index fields, i.e. the layer
//! storage cost `k·ω²·b_c + n·⌈log₂k⌉`; the level table is "overhead".
//! All integers and floats are little-endian; bit fields are LSB-first.

pub mod bits;

use std::fs;
use std::path::Path;

use crate::bytes::{put_f32s, ByteReader};
use crate::error::{Error, Result};
use crate::metrics::{index_bits, FULL_PRECISION_BITS};
use crate::quantizer::KernelCodebook;
use crate::scalar::{LayerPayload, QuantizedLayer, ScalarCodebook, Stage};
use crate::tensor::{u32_of, LayerKind};

pub const KQZ_MAGIC: [u8; 4] = *b"KQZ1";
pub const KQZ_VERSION: u32 = 1;

/// An ordered list of quantized layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub layers: Vec<QuantizedLayer>,
}

/// Directory record of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerHeader {
    pub name: String,
    pub kind: LayerKind,
    pub dims: Vec<usize>,
    pub stage: Stage,
    pub index_bits: u32,
    pub b_c: u32,
    pub k: usize,
    pub table_len: usize,
    pub offset: u64,
    pub length: u64,
    pub accounted_bits: u64,
    pub overhead_bits: u64,
}

/// Payload bit counts of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasuredBits {
    /// Accounted bits per layer.
    pub per_layer: Vec<u128>,
    /// Level-table bits per layer, excluded from `per_layer`.
    pub overhead: Vec<u128>,
    pub total: u128,
    pub overhead_total: u128,
}

struct Regions {
    header: LayerHeader,
    blob: Vec<u8>,
}

impl CompressedModel {
    pub fn new(layers: Vec<QuantizedLayer>) -> Self {
        CompressedModel { layers }
    }

    pub fn version(&self) -> u32 {
        KQZ_VERSION
    }

    /// Directory records as [`pack_model`] writes them.
    pub fn headers(&self) -> Result<Vec<LayerHeader>> {
        let mut offset = 0u64;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut r = encode_layer(layer)?;
            r.header.offset = offset;
            offset += r.header.length;
            out.push(r.header);
        }
        Ok(out)
    }
}

fn encode_layer(layer: &QuantizedLayer) -> Result<Regions> {
    let mut blob = Vec::new();
    let (ib, b_c, k, table_len, accounted, overhead);
    match layer.payload() {
        LayerPayload::Kernel(cb) => {
            ib = index_bits(cb.k());
            b_c = FULL_PRECISION_BITS;
            k = cb.k();
            table_len = 0;
            put_f32s(&mut blob, cb.entries());
            blob.extend(pack_named(layer.name(), cb.assignment(), ib)?);
            accounted = cb.entries().len() as u128 * 32 + cb.n() as u128 * ib as u128;
            overhead = 0;
        }
        LayerPayload::KernelScalar { codebook, scalar } => {
            ib = index_bits(codebook.k());
            b_c = u32::from(scalar.bits());
            k = codebook.k();
            table_len = scalar.values().len();
            put_f32s(&mut blob, scalar.values());
            blob.extend(pack_named(layer.name(), scalar.indexes(), b_c)?);
            blob.extend(pack_named(layer.name(), codebook.assignment(), ib)?);
            accounted =
                scalar.indexes().len() as u128 * b_c as u128 + codebook.n() as u128 * ib as u128;
            overhead = table_len as u128 * 32;
        }
        LayerPayload::Scalar(scalar) => {
            ib = 0;
            b_c = u32::from(scalar.bits());
            k = 0;
            table_len = scalar.values().len();
            put_f32s(&mut blob, scalar.values());
            blob.extend(pack_named(layer.name(), scalar.indexes(), b_c)?);
            accounted = scalar.indexes().len() as u128 * b_c as u128;
            overhead = table_len as u128 * 32;
        }
        LayerPayload::Passthrough(values) => {
            ib = 0;
            b_c = FULL_PRECISION_BITS;
            k = 0;
            table_len = 0;
            put_f32s(&mut blob, values);
            accounted = values.len() as u128 * 32;
            overhead = 0;
        }
    }
    let header = LayerHeader {
        name: layer.name().to_owned(),
        kind: layer.kind(),
        dims: layer.dims().to_vec(),
        stage: layer.stage(),
        index_bits: ib,
        b_c,
        k,
        table_len,
        offset: 0,
        length: blob.len() as u64,
        accounted_bits: u64::try_from(accounted)
            .map_err(|_| Error::InvalidArgument("layer too large".into()))?,
        overhead_bits: overhead as u64,
    };
    Ok(Regions { header, blob })
}

fn pack_named(layer: &str, values: &[u32], width: u32) -> Result<Vec<u8>> {
    bits::pack(values, width).map_err(|_| {
        let (position, &value) = values
            .iter()
            .enumerate()
            .find(|(_, &v)| width < 32 && u64::from(v) >> width != 0)
            .expect("pack only fails on an oversized value");
        Error::IndexOutOfRange {
            layer: layer.to_owned(),
            position,
            value: u64::from(value),
            limit: 1u64 << width,
        }
    })
}

/// Serializes a model to KQZ bytes. Output is a pure function of the layers.
pub fn pack_model(model: &CompressedModel) -> Result<Vec<u8>> {
    let regions = model
        .layers
        .iter()
        .map(encode_layer)
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    out.extend_from_slice(&KQZ_MAGIC);
    out.extend_from_slice(&KQZ_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(regions.len(), "layer count")?.to_le_bytes());
    let mut offset = 0u64;
    for r in &regions {
        let h = &r.header;
        let name = h.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("layer name '{}' too long", h.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(h.kind.tag());
        out.push(h.dims.len() as u8);
        for &d in &h.dims {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        out.push(h.stage.tag());
        out.push(h.index_bits as u8);
        out.push(h.b_c as u8);
        out.extend_from_slice(&u32_of(h.k, "codebook size")?.to_le_bytes());
        out.extend_from_slice(&u32_of(h.table_len, "table length")?.to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&h.length.to_le_bytes());
        out.extend_from_slice(&h.accounted_bits.to_le_bytes());
        out.extend_from_slice(&h.overhead_bits.to_le_bytes());
        offset += h.length;
    }
    for r in regions {
        out.extend_from_slice(&r.blob);
    }
    Ok(out)
}

fn read_header(r: &mut ByteReader<'_>) -> Result<LayerHeader> {
    let name_len = r.u16("name length")? as usize;
    let name = r.string(name_len, "layer name")?;
    let kind = LayerKind::from_tag(r.u8("layer kind")?)?;
    let rank = r.u8("rank")? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32("dimension")? as usize);
    }
    Ok(LayerHeader {
        stage: Stage::from_tag(r.u8("stage")?)?,
        index_bits: u32::from(r.u8("index bits")?),
        b_c: u32::from(r.u8("b_c")?),
        k: r.u32("codebook size")? as usize,
        table_len: r.u32("table length")? as usize,
        offset: r.u64("offset")?,
        length: r.u64("length")?,
        accounted_bits: r.u64("accounted bits")?,
        overhead_bits: r.u64("overhead bits")?,
        name,
        kind,
        dims,
    })
}

fn unpack_indexes(
    layer: &str,
    r: &mut ByteReader<'_>,
    count: usize,
    width: u32,
    limit: usize,
    what: &str,
) -> Result<Vec<u32>> {
    let bytes = r.take(bits::packed_len(count, width), what)?;
    let values =
        bits::unpack(bytes, count, width).ok_or_else(|| Error::NonzeroPadding(layer.to_owned()))?;
    if let Some(position) = values.iter().position(|&v| v as usize >= limit) {
        return Err(Error::IndexOutOfRange {
            layer: layer.to_owned(),
            position,
            value: u64::from(values[position]),
            limit: limit as u64,
        });
    }
    Ok(values)
}

fn decode_layer(h: &LayerHeader, blob: &[u8]) -> Result<QuantizedLayer> {
    let name = h.name.as_str();
    let malformed = |msg: &str| Error::Malformed(format!("layer '{name}': {msg}"));
    let params = h
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed("parameter count overflows"))?;
    let mut r = ByteReader::new(blob);
    let kernel_geometry = || -> Result<(usize, usize)> {
        match h.dims.as_slice() {
            [a, b, p, q] if a == b && h.kind == LayerKind::Conv => Ok((a * a, p * q)),
            _ => Err(malformed("kernel stage needs square conv dims")),
        }
    };
    let check_widths = |ib: u32, b_c: u32| -> Result<()> {
        if h.index_bits != ib || h.b_c != b_c {
            return Err(malformed(&format!(
                "declared widths ({}, {}) but layout needs ({ib}, {b_c})",
                h.index_bits, h.b_c
            )));
        }
        Ok(())
    };
    let payload = match h.stage {
        Stage::K => {
            let (d, n) = kernel_geometry()?;
            if h.k == 0 {
                return Err(malformed("empty kernel codebook"));
            }
            check_widths(index_bits(h.k), FULL_PRECISION_BITS)?;
            let entries = r.f32_vec(h.k * d, "codebook entries")?;
            let assignment = unpack_indexes(name, &mut r, n, h.index_bits, h.k, "kernel indexes")?;
            LayerPayload::Kernel(named(name, KernelCodebook::new(d, entries, assignment))?)
        }
        Stage::KPlusC => {
            let (d, n) = kernel_geometry()?;
            if h.k == 0 || h.table_len == 0 {
                return Err(malformed("empty codebook"));
            }
            if h.b_c > 16 {
                return Err(malformed("scalar index width above 16 bits"));
            }
            check_widths(index_bits(h.k), h.b_c)?;
            let table = r.f32_vec(h.table_len, "level table")?;
            let params_idx =
                unpack_indexes(name, &mut r, h.k * d, h.b_c, h.table_len, "level indexes")?;
            let assignment = unpack_indexes(name, &mut r, n, h.index_bits, h.k, "kernel indexes")?;
            let scalar = named(name, ScalarCodebook::new(h.b_c as u8, table, params_idx))?;
            let codebook = named(
                name,
                KernelCodebook::new(d, scalar.dequantize(), assignment),
            )?;
            LayerPayload::KernelScalar { codebook, scalar }
        }
        Stage::ScalarOnly => {
            if h.table_len == 0 || h.b_c > 16 {
                return Err(malformed("bad scalar codebook header"));
            }
            check_widths(0, h.b_c)?;
            let table = r.f32_vec(h.table_len, "level table")?;
            let idx = unpack_indexes(name, &mut r, params, h.b_c, h.table_len, "level indexes")?;
            LayerPayload::Scalar(named(name, ScalarCodebook::new(h.b_c as u8, table, idx))?)
        }
        Stage::Passthrough => {
            check_widths(0, FULL_PRECISION_BITS)?;
            LayerPayload::Passthrough(r.f32_vec(params, "raw parameters")?)
        }
    };
    if r.remaining() != 0 {
        return Err(malformed(&format!(
            "{} unused payload bytes",
            r.remaining()
        )));
    }
    let layer = QuantizedLayer::new(name, h.kind, h.dims.clone(), payload)?;
    let expected = encode_layer(&layer)?.header;
    if expected.accounted_bits != h.accounted_bits || expected.overhead_bits != h.overhead_bits {
        return Err(malformed("declared bit counts disagree with the payload"));
    }
    Ok(layer)
}

fn named<T>(layer: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::IndexOutOfRange {
            position,
            value,
            limit,
            ..
        } => Error::IndexOutOfRange {
            layer: layer.to_owned(),
            position,
            value,
            limit,
        },
        other => other,
    })
}

/// Parses KQZ bytes, validating every index, padding bit and offset.
pub fn unpack_model(bytes: &[u8]) -> Result<CompressedModel> {
    let mut r = ByteReader::new(bytes);
    let magic: [u8; 4] = r.array("magic")?;
    if magic != KQZ_MAGIC {
        return Err(Error::BadMagic {
            expected: KQZ_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != KQZ_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("layer count")? as usize;
    let mut headers = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        headers.push(read_header(&mut r)?);
    }
    let payload_start = r.position();
    let mut expected_offset = 0u64;
    let mut layers = Vec::with_capacity(headers.len());
    for h in &headers {
        if h.offset != expected_offset {
            return Err(Error::Malformed(format!(
                "layer '{}' starts at payload offset {}, expected {expected_offset}",
                h.name, h.offset
            )));
        }
        let len = usize::try_from(h.length)
            .map_err(|_| Error::Malformed(format!("layer '{}' length overflows", h.name)))?;
        let blob = r.take(len, &format!("payload of layer '{}'", h.name))?;
        layers.push(decode_layer(h, blob)?);
        expected_offset += h.length;
    }
    debug_assert_eq!(r.position(), payload_start + expected_offset as usize);
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after payload",
            r.remaining()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for l in &layers {
        if !seen.insert(l.name()) {
            return Err(Error::DuplicateLayer(l.name().to_owned()));
        }
    }
    Ok(CompressedModel { layers })
}

/// Accounted payload bits per layer (headers, padding and level tables
/// excluded) and the table overhead.
pub fn measured_bits(model: &CompressedModel) -> Result<MeasuredBits> {
    let headers = model.headers()?;
    let per_layer: Vec<u128> = headers
        .iter()
        .map(|h| u128::from(h.accounted_bits))
        .collect();
    let overhead: Vec<u128> = headers
        .iter()
        .map(|h| u128::from(h.overhead_bits))
        .collect();
    Ok(MeasuredBits {
        total: per_layer.iter().sum(),
        overhead_total: overhead.iter().sum(),
        per_layer,
        overhead,
    })
}

pub fn save_model(model: &CompressedModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, pack_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CompressedModel> {
    unpack_model(&fs::read(path)?)
}
