//! k-bit affine quantization and the feature packet wire format.
//!
//! Packet layout, little-endian, 34-byte header:
//!
//! ```text
//! off size field
//!  0   2   magic 0x5343
//!  2   1   version
//!  3   1   flags (bit 0: extrapolated width)
//!  4   1   bits
//!  5   1   compressor variant code
//!  6   4   alpha (f32)
//! 10   2   active channels
//! 12   2   max channels
//! 14   2   height
//! 16   2   width
//! 18   2   batch
//! 20   2   reserved (0)
//! 22   4   min (f32)
//! 26   4   scale (f32)
//! 30   4   payload length
//! 34   ..  codes, NCHW order, packed most-significant bit first, zero padded
//! ```

use thiserror::Error;

use crate::slim::WidthMultiplier;
use crate::tensor::{Element, Shape, Tensor};
use crate::zoo::CompressorVariant;

pub const MAGIC: u16 = 0x5343;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 34;
pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;
const FLAG_EXTRAPOLATED: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("bit depth {0} outside supported range {MIN_BITS}..={MAX_BITS}")]
    Bits(u8),
    #[error("cannot quantize non-finite value at index {0}")]
    NonFinite(usize),
    #[error("code {code} at index {index} does not fit in {bits} bits")]
    CodeRange { index: usize, code: u8, bits: u8 },
    #[error("code count {actual} does not match shape {shape} ({expected} elements)")]
    CodeCount { shape: Shape, expected: usize, actual: usize },
    #[error("dimension {name} = {value} does not fit the packet header")]
    DimensionTooLarge { name: &'static str, value: usize },
    #[error("packet truncated: needed {needed} bytes, got {len}")]
    Truncated { needed: usize, len: usize },
    #[error("bad packet magic {0:#06x}")]
    BadMagic(u16),
    #[error("unsupported packet version {0}")]
    Version(u8),
    #[error("payload length {stored} inconsistent with header (expected {expected})")]
    PayloadLength { stored: u32, expected: usize },
    #[error("{0} bytes after the payload")]
    TrailingBytes(usize),
    #[error("invalid header field {field}: {reason}")]
    Header { field: &'static str, reason: String },
    #[error("non-zero padding bits after the last code")]
    Padding,
}

pub type Result<T, E = CodecError> = std::result::Result<T, E>;

/// Per-tensor affine quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub bits: u8,
    pub min: f32,
    /// `(max - min) / (2^bits - 1)`, or 1 for a constant tensor.
    pub scale: f32,
}

impl QuantParams {
    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(CodecError::Bits(bits))
    }
}

/// Rounds half away from zero, clamped to `[0, levels]`.
fn code_for(x: f64, min: f64, range: f64, levels: u32) -> u8 {
    let q = ((x - min) * levels as f64 / range).round();
    q.clamp(0.0, levels as f64) as u8
}

pub fn quantize<T: Element>(t: &Tensor<T>, bits: u8) -> Result<(Vec<u8>, QuantParams)> {
    check_bits(bits)?;
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(CodecError::NonFinite(i));
    }
    let levels = (1u32 << bits) - 1;
    let (lo, hi) = t
        .data()
        .iter()
        .map(|v| v.as_f64())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if t.numel() == 0 || lo == hi {
        let min = if t.numel() == 0 { 0.0 } else { lo as f32 };
        return Ok((vec![0; t.numel()], QuantParams { bits, min, scale: 1.0 }));
    }
    let range = hi - lo;
    let codes = t.data().iter().map(|v| code_for(v.as_f64(), lo, range, levels)).collect();
    Ok((
        codes,
        QuantParams {
            bits,
            min: lo as f32,
            scale: (range / levels as f64) as f32,
        },
    ))
}

/// `min + q * scale`, evaluated in 64-bit and rounded once.
pub fn dequantize(codes: &[u8], params: &QuantParams, shape: Shape) -> Result<Tensor<f32>> {
    check_bits(params.bits)?;
    if codes.len() != shape.numel() {
        return Err(CodecError::CodeCount {
            shape,
            expected: shape.numel(),
            actual: codes.len(),
        });
    }
    let levels = params.levels();
    if let Some(index) = codes.iter().position(|&q| q as u32 > levels) {
        return Err(CodecError::CodeRange {
            index,
            code: codes[index],
            bits: params.bits,
        });
    }
    let (min, scale) = (params.min as f64, params.scale as f64);
    let data = codes.iter().map(|&q| (min + q as f64 * scale) as f32).collect();
    Ok(Tensor::new(shape, data).expect("length checked"))
}

/// Quantize then dequantize, as seen by the receiver.
pub fn round_trip<T: Element>(t: &Tensor<T>, bits: u8) -> Result<Tensor<T>> {
    let (codes, p) = quantize(t, bits)?;
    Ok(dequantize(&codes, &p, t.shape())?.cast())
}

/// Packed payload length for `count` codes.
pub fn payload_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Total packet bytes for a bottleneck of the given size.
pub fn payload_size(c_active: usize, h: usize, w: usize, n: usize, bits: u8) -> usize {
    payload_len(n * c_active * h * w, bits) + HEADER_LEN
}

pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; payload_len(codes.len(), bits)];
    let mut bit = 0usize;
    for &q in codes {
        for k in (0..bits).rev() {
            if (q >> k) & 1 == 1 {
                out[bit / 8] |= 0x80 >> (bit % 8);
            }
            bit += 1;
        }
    }
    out
}

pub fn unpack_codes(bytes: &[u8], count: usize, bits: u8) -> Result<Vec<u8>> {
    let needed = payload_len(count, bits);
    if bytes.len() < needed {
        return Err(CodecError::Truncated {
            needed,
            len: bytes.len(),
        });
    }
    let mut out = Vec::with_capacity(count);
    let mut bit = 0usize;
    for _ in 0..count {
        let mut q = 0u8;
        for _ in 0..bits {
            let b = (bytes[bit / 8] >> (7 - bit % 8)) & 1;
            q = (q << 1) | b;
            bit += 1;
        }
        out.push(q);
    }
    if bit % 8 != 0 && bytes[bit / 8] & (0xFFu8 >> (bit % 8)) != 0 {
        return Err(CodecError::Padding);
    }
    Ok(out)
}

/// Header fields that describe the model side of a packet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketMeta {
    pub alpha: WidthMultiplier,
    pub variant: CompressorVariant,
    /// Full bottleneck channel count `C`.
    pub c_max: usize,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketHeader {
    pub version: u8,
    pub extrapolated: bool,
    pub variant: CompressorVariant,
    pub alpha: f32,
    pub c_max: usize,
    pub shape: Shape,
    pub params: QuantParams,
    pub payload_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPacket {
    pub header: PacketHeader,
    pub codes: Vec<u8>,
    pub tensor: Tensor<f32>,
}

fn dim16(name: &'static str, v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| CodecError::DimensionTooLarge { name, value: v })
}

pub fn encode_packet<T: Element>(t: &Tensor<T>, bits: u8, meta: &PacketMeta) -> Result<Vec<u8>> {
    let (codes, params) = quantize(t, bits)?;
    encode_codes(&codes, &params, t.shape(), meta)
}

/// Serializes already-quantized codes.
pub fn encode_codes(codes: &[u8], params: &QuantParams, shape: Shape, meta: &PacketMeta) -> Result<Vec<u8>> {
    check_bits(params.bits)?;
    if codes.len() != shape.numel() {
        return Err(CodecError::CodeCount {
            shape,
            expected: shape.numel(),
            actual: codes.len(),
        });
    }
    let payload = pack_codes(codes, params.bits);
    let payload_len = u32::try_from(payload.len()).map_err(|_| CodecError::DimensionTooLarge {
        name: "payload",
        value: payload.len(),
    })?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(VERSION);
    out.push(if meta.extrapolated { FLAG_EXTRAPOLATED } else { 0 });
    out.push(params.bits);
    out.push(meta.variant.code());
    out.extend_from_slice(&(meta.alpha.as_f64() as f32).to_le_bytes());
    for (name, v) in [("channels", shape.c), ("max channels", meta.c_max), ("height", shape.h), ("width", shape.w), ("batch", shape.n)] {
        out.extend_from_slice(&dim16(name, v)?.to_le_bytes());
    }
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&params.min.to_le_bytes());
    out.extend_from_slice(&params.scale.to_le_bytes());
    out.extend_from_slice(&payload_len.to_le_bytes());
    debug_assert_eq!(out.len(), HEADER_LEN);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn header_err(field: &'static str, reason: impl Into<String>) -> CodecError {
    CodecError::Header {
        field,
        reason: reason.into(),
    }
}

pub fn decode_packet(bytes: &[u8]) -> Result<DecodedPacket> {
    if bytes.len() < 2 {
        return Err(CodecError::Truncated {
            needed: HEADER_LEN,
            len: bytes.len(),
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let magic = u16_at(0);
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    if bytes.len() < 3 {
        return Err(CodecError::Truncated {
            needed: HEADER_LEN,
            len: bytes.len(),
        });
    }
    if bytes[2] != VERSION {
        return Err(CodecError::Version(bytes[2]));
    }
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Truncated {
            needed: HEADER_LEN,
            len: bytes.len(),
        });
    }
    let flags = bytes[3];
    if flags & !FLAG_EXTRAPOLATED != 0 {
        return Err(header_err("flags", format!("unknown bits set in {flags:#04x}")));
    }
    let bits = bytes[4];
    check_bits(bits)?;
    let variant = CompressorVariant::from_code(bytes[5]).ok_or_else(|| header_err("variant", format!("unknown code {}", bytes[5])))?;
    let alpha = f32_at(6);
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(header_err("alpha", format!("{alpha} outside (0, 1]")));
    }
    let (c, c_max, h, w, n) = (
        u16_at(10) as usize,
        u16_at(12) as usize,
        u16_at(14) as usize,
        u16_at(16) as usize,
        u16_at(18) as usize,
    );
    for (name, v) in [("channels", c), ("max channels", c_max), ("height", h), ("width", w), ("batch", n)] {
        if v == 0 {
            return Err(header_err(name, "must be at least 1"));
        }
    }
    let resolved = WidthMultiplier::from_f64(alpha as f64)
        .map_err(|e| header_err("alpha", e.to_string()))?
        .resolve(c_max);
    if c != resolved {
        return Err(header_err(
            "channels",
            format!("{c} active channels, but alpha {alpha} of {c_max} gives {resolved}"),
        ));
    }
    if u16_at(20) != 0 {
        return Err(header_err("reserved", "must be zero"));
    }
    let min = f32_at(22);
    let scale = f32_at(26);
    if !min.is_finite() {
        return Err(header_err("min", "not finite"));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(header_err("scale", format!("{scale} is not a positive finite value")));
    }
    let top = min as f64 + ((1u32 << bits) - 1) as f64 * scale as f64;
    if !(top as f32).is_finite() {
        return Err(header_err("scale", format!("range {min} + {scale} * levels overflows")));
    }
    let stored = u32::from_le_bytes(bytes[30..34].try_into().unwrap());
    let shape = Shape::new(n, c, h, w);
    let expected = payload_len(shape.numel(), bits);
    if stored as usize != expected {
        return Err(CodecError::PayloadLength { stored, expected });
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() < expected {
        return Err(CodecError::Truncated {
            needed: HEADER_LEN + expected,
            len: bytes.len(),
        });
    }
    if body.len() > expected {
        return Err(CodecError::TrailingBytes(body.len() - expected));
    }
    let codes = unpack_codes(body, shape.numel(), bits)?;
    let params = QuantParams { bits, min, scale };
    let tensor = dequantize(&codes, &params, shape)?;
    Ok(DecodedPacket {
        header: PacketHeader {
            version: VERSION,
            extrapolated: flags & FLAG_EXTRAPOLATED != 0,
            variant,
            alpha,
            c_max,
            shape,
            params,
            payload_len: expected,
        },
        codes,
        tensor,
    })
}
