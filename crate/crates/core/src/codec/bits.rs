//! Fixed-width bit fields, packed LSB-first into little-endian bytes.
//!
//! Field `i` of width `b` occupies stream bits `i·b .. (i+1)·b`; stream bit
//! `p` is bit `p % 8` of byte `p / 8`. The last byte is zero-padded.

use crate::error::{Error, Result};

/// Bytes needed for `count` fields of `width` bits.
pub fn packed_len(count: usize, width: u32) -> usize {
    ((count as u128 * width as u128).div_ceil(8)) as usize
}

pub struct BitWriter<'a> {
    out: &'a mut Vec<u8>,
    acc: u64,
    pending: u32,
}

impl<'a> BitWriter<'a> {
    pub fn new(out: &'a mut Vec<u8>) -> Self {
        BitWriter {
            out,
            acc: 0,
            pending: 0,
        }
    }

    /// Appends the low `width` bits of `value`; `width` ≤ 32.
    pub fn write(&mut self, value: u32, width: u32) -> Result<()> {
        debug_assert!(width <= 32);
        if width < 32 && u64::from(value) >> width != 0 {
            return Err(Error::InvalidArgument(format!(
                "value {value} does not fit in {width} bits"
            )));
        }
        self.acc |= u64::from(value) << self.pending;
        self.pending += width;
        while self.pending >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.pending -= 8;
        }
        Ok(())
    }

    /// Flushes the partial byte with zero padding.
    pub fn finish(self) {
        if self.pending > 0 {
            self.out.push(self.acc as u8);
        }
    }
}

/// Packs `values` at `width` bits each into a fresh buffer.
pub fn pack(values: &[u32], width: u32) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(packed_len(values.len(), width));
    let mut w = BitWriter::new(&mut out);
    for &v in values {
        w.write(v, width)?;
    }
    w.finish();
    Ok(out)
}

/// Unpacks `count` fields of `width` bits from exactly
/// [`packed_len`]`(count, width)` bytes. Returns `None` if padding bits are
/// set.
pub fn unpack(bytes: &[u8], count: usize, width: u32) -> Option<Vec<u32>> {
    debug_assert_eq!(bytes.len(), packed_len(count, width));
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut have: u32 = 0;
    let mut next = 0usize;
    let mask = if width == 32 {
        u64::from(u32::MAX)
    } else {
        (1u64 << width) - 1
    };
    for _ in 0..count {
        while have < width {
            acc |= u64::from(bytes[next]) << have;
            next += 1;
            have += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= width;
        have -= width;
    }
    // whatever is left in the accumulator, and any unread byte, is padding
    if acc != 0 || bytes[next..].iter().any(|&b| b != 0) {
        return None;
    }
    Some(out)
}
