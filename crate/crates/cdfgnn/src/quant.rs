//! Linear quantization of message payloads.
//!
//! A vector of length L is encoded as B-bit codes plus its min and max in the
//! original precision T, so a message costs B*L + 2T bits instead of T*L.
//! Model parameters are never quantized; only gather/scatter payloads pass
//! through here.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 16;

/// A quantized payload. `codes` keeps the packed little-endian bit stream;
/// code j occupies bits [j*B, (j+1)*B), least significant bit first.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedVector<T> {
    bits: u8,
    len: usize,
    min: T,
    max: T,
    packed: Vec<u8>,
}

impl<T: Scalar> QuantizedVector<T> {
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn min(&self) -> T {
        self.min
    }

    pub fn max(&self) -> T {
        self.max
    }

    /// Unpacked codes, each strictly below 2^B.
    pub fn codes(&self) -> Vec<u32> {
        (0..self.len).map(|j| read_bits(&self.packed, j * self.bits as usize, self.bits)).collect()
    }

    /// Payload size in bits under the accounting model: B*L + 2T.
    pub fn size_bits(&self) -> usize {
        message_size_bits(self.len, self.bits, T::BITS)
    }

    /// Wire form: [u8 B][T-bit min, LE][T-bit max, LE][packed codes].
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + 2 * (T::BITS as usize / 8) + self.packed.len());
        out.push(self.bits);
        self.min.write_le(&mut out);
        self.max.write_le(&mut out);
        out.extend_from_slice(&self.packed);
        out
    }

    /// Parses the wire form. The element count is not on the wire; the
    /// receiver knows it from the payload's layer dimension.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        let t_bytes = T::BITS as usize / 8;
        if bytes.len() < 1 + 2 * t_bytes {
            return Err(Error::data("quantized payload shorter than its header"));
        }
        let bits = bytes[0];
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::data(format!("quantized payload declares {bits} bits")));
        }
        let min = T::read_le(&bytes[1..]);
        let max = T::read_le(&bytes[1 + t_bytes..]);
        let packed_len = (len * bits as usize).div_ceil(8);
        let body = &bytes[1 + 2 * t_bytes..];
        if body.len() != packed_len {
            return Err(Error::data(format!(
                "quantized payload body holds {} bytes, expected {packed_len}",
                body.len()
            )));
        }
        Ok(QuantizedVector { bits, len, min, max, packed: body.to_vec() })
    }
}

/// Quantizes `values` to B-bit codes: q_i = floor(2^B (m_i - min) / (max - min) + 0.5),
/// clamped to 2^B - 1. A constant vector encodes as all-zero codes.
pub fn quantize<T: Scalar>(values: &[T], bits: u8) -> QuantizedVector<T> {
    assert!((MIN_BITS..=MAX_BITS).contains(&bits), "bit width must be within [1, 16]");
    let mut min = T::infinity();
    let mut max = T::neg_infinity();
    for &v in values {
        debug_assert!(!v.is_nan(), "NaN reached the quantizer");
        if v < min {
            min = v;
        }
        if v > max {
            max = v;
        }
    }
    if values.is_empty() {
        min = T::zero();
        max = T::zero();
    }

    let levels = 1u32 << bits;
    let top = levels - 1;
    let mut packed = vec![0u8; (values.len() * bits as usize).div_ceil(8)];
    let range = max.to_f64() - min.to_f64();
    if range > 0.0 {
        let scale = levels as f64 / range;
        let min_f = min.to_f64();
        for (j, &v) in values.iter().enumerate() {
            let raw = (scale * (v.to_f64() - min_f) + 0.5).floor();
            let q = if raw >= top as f64 { top } else { raw as u32 };
            write_bits(&mut packed, j * bits as usize, bits, q);
        }
    }
    QuantizedVector { bits, len: values.len(), min, max, packed }
}

/// Reconstructs m~_i = (max - min) / 2^B * q_i + min.
pub fn dequantize<T: Scalar>(q: &QuantizedVector<T>) -> Vec<T> {
    let levels = (1u32 << q.bits) as f64;
    let min_f = q.min.to_f64();
    let step = (q.max.to_f64() - min_f) / levels;
    let mut out = Vec::with_capacity(q.len);
    for j in 0..q.len {
        let code = read_bits(&q.packed, j * q.bits as usize, q.bits);
        out.push(T::from_f64(step * code as f64 + min_f));
    }
    out
}

/// Bits on the wire for a quantized payload of length `len`: B*L + 2T.
pub fn message_size_bits(len: usize, bits: u8, t_bits: u32) -> usize {
    bits as usize * len + 2 * t_bits as usize
}

/// Bits on the wire for the same payload unquantized: T*L.
pub fn raw_size_bits(len: usize, t_bits: u32) -> usize {
    t_bits as usize * len
}

fn write_bits(buf: &mut [u8], start: usize, width: u8, value: u32) {
    for b in 0..width as usize {
        if value >> b & 1 == 1 {
            let pos = start + b;
            buf[pos / 8] |= 1 << (pos % 8);
        }
    }
}

fn read_bits(buf: &[u8], start: usize, width: u8) -> u32 {
    let mut value = 0u32;
    for b in 0..width as usize {
        let pos = start + b;
        if buf[pos / 8] >> (pos % 8) & 1 == 1 {
            value |= 1 << b;
        }
    }
    value
}
