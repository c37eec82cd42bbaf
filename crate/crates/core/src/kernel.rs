//! The kernel view of a convolution tensor: one `ω²`-vector per
//! (input channel, output channel) pair.

use crate::error::{Error, Result};
use crate::quantizer::KernelCodebook;
use crate::tensor::{LayerKind, WeightTensor};

/// Shape of a convolution layer with square kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvShape {
    pub omega: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvShape {
    pub fn kernels(&self) -> usize {
        self.in_channels * self.out_channels
    }

    pub fn omega_sq(&self) -> usize {
        self.omega * self.omega
    }
}

/// Dense copy of a conv layer's kernels, kernel `i` contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    name: String,
    shape: ConvShape,
    columns: Vec<f32>,
}

impl KernelMatrix {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> ConvShape {
        self.shape
    }

    pub fn omega_sq(&self) -> usize {
        self.shape.omega_sq()
    }

    /// Kernel count `n = p·q`.
    pub fn n(&self) -> usize {
        self.shape.kernels()
    }

    pub fn column(&self, i: usize) -> &[f32] {
        let d = self.omega_sq();
        &self.columns[i * d..(i + 1) * d]
    }

    /// All kernels back to back, `n · ω²` values.
    pub fn columns(&self) -> &[f32] {
        &self.columns
    }
}

/// Kernel shape of a conv tensor, rejecting FC and non-square layers.
pub fn conv_shape(t: &WeightTensor) -> Result<ConvShape> {
    if t.kind() != LayerKind::Conv {
        return Err(Error::InvalidArgument(format!(
            "layer '{}' is fully connected; kernels exist only in conv layers",
            t.name()
        )));
    }
    let dims = t.dims();
    if dims[0] != dims[1] {
        return Err(Error::Shape(format!(
            "layer '{}' has non-square {}x{} kernels",
            t.name(),
            dims[0],
            dims[1]
        )));
    }
    Ok(ConvShape {
        omega: dims[0],
        in_channels: dims[2],
        out_channels: dims[3],
    })
}

/// Gathers the kernels of a conv tensor.
///
/// The tensor is stored `(ω, ω, p, q)` row-major, so spatial position `s`
/// of kernel `j = i·q + o` sits at `s·n + j`.
pub fn to_kernel_matrix(t: &WeightTensor) -> Result<KernelMatrix> {
    let shape = conv_shape(t)?;
    let n = shape.kernels();
    let d = shape.omega_sq();
    let data = t.data();
    let mut columns = vec![0.0f32; n * d];
    for s in 0..d {
        let plane = &data[s * n..(s + 1) * n];
        for (j, &v) in plane.iter().enumerate() {
            columns[j * d + s] = v;
        }
    }
    Ok(KernelMatrix {
        name: t.name().to_owned(),
        shape,
        columns,
    })
}

/// Scatters kernels (kernel `j` contiguous) back into `(ω, ω, p, q)` order.
pub fn from_kernels(name: &str, shape: ConvShape, kernels: &[f32]) -> Result<WeightTensor> {
    let n = shape.kernels();
    let d = shape.omega_sq();
    if kernels.len() != n * d {
        return Err(Error::Shape(format!(
            "layer '{name}': {} kernel values for {n} kernels of size {d}",
            kernels.len()
        )));
    }
    let mut data = vec![0.0f32; n * d];
    for (j, kernel) in kernels.chunks_exact(d).enumerate() {
        for (s, &v) in kernel.iter().enumerate() {
            data[s * n + j] = v;
        }
    }
    WeightTensor::conv(
        name,
        shape.omega,
        shape.in_channels,
        shape.out_channels,
        data,
    )
}

/// Rebuilds a conv tensor in which kernel `j` is codebook entry
/// `assignment[j]`.
pub fn from_assignments(
    name: &str,
    codebook: &KernelCodebook,
    shape: ConvShape,
) -> Result<WeightTensor> {
    if codebook.omega_sq() != shape.omega_sq() {
        return Err(Error::Shape(format!(
            "layer '{name}': codebook entries have {} values, kernels need {}",
            codebook.omega_sq(),
            shape.omega_sq()
        )));
    }
    if codebook.n() != shape.kernels() {
        return Err(Error::Shape(format!(
            "layer '{name}': {} assignments for {} kernels",
            codebook.n(),
            shape.kernels()
        )));
    }
    let d = shape.omega_sq();
    let mut kernels = Vec::with_capacity(codebook.n() * d);
    for (pos, &a) in codebook.assignment().iter().enumerate() {
        if a as usize >= codebook.k() {
            return Err(Error::IndexOutOfRange {
                layer: name.to_owned(),
                position: pos,
                value: a as u64,
                limit: codebook.k() as u64,
            });
        }
        kernels.extend_from_slice(codebook.entry(a as usize));
    }
    from_kernels(name, shape, &kernels)
}
