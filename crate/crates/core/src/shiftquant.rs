//! 5-bit shift codes, the `SAQ1` packed-weight file, and a Q16.16 integer
//! kernel that evaluates a shift layer with shifts and adds only.
//!
//! A code stores one weight `s·2^p` with `p ∈ [-15, 0]`: bit 4 is the sign flag
//! (set for negative), bits 3..0 hold `|p|`. Since `p ≤ 0` always, the shift
//! direction is implicit (an arithmetic right shift of the fixed-point input).

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{pow2, QuantizedShift, MIN_EXPONENT};
use crate::tensor::Tensor;

pub const SAQ_MAGIC: &[u8; 4] = b"SAQ1";
pub const BITS_PER_CODE: usize = 5;
const FRAC_BITS: u32 = 16;
const ONE: f64 = (1u64 << FRAC_BITS) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShiftCode(u8);

impl ShiftCode {
    pub fn pack(sign: i8, exponent: i8) -> Result<Self> {
        let p = i32::from(exponent);
        if !(MIN_EXPONENT..=0).contains(&p) {
            return Err(Error::Encoding(p));
        }
        if sign != 1 && sign != -1 {
            return Err(Error::Encoding(i32::from(sign)));
        }
        let sign_bit = if sign < 0 { 0b1_0000 } else { 0 };
        Ok(ShiftCode(sign_bit | (-p) as u8))
    }

    pub fn from_bits(bits: u8) -> Self {
        ShiftCode(bits & 0b1_1111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_negative(self) -> bool {
        self.0 & 0b1_0000 != 0
    }

    /// Right-shift amount `|p|`.
    pub fn shift(self) -> u32 {
        u32::from(self.0 & 0b1111)
    }

    pub fn unpack(self) -> (i8, i8) {
        let sign = if self.is_negative() { -1 } else { 1 };
        (sign, -(self.shift() as i8))
    }

    pub fn value(self) -> f32 {
        let (s, p) = self.unpack();
        f32::from(s) * pow2(i32::from(p))
    }
}

/// Shift codes for a `[c_out, c_in]` weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedShiftTensor {
    shape: Vec<usize>,
    codes: Vec<ShiftCode>,
}

pub fn pack_weights(signs: &[i8], exponents: &[i8], shape: &[usize]) -> Result<PackedShiftTensor> {
    let n: usize = shape.iter().product();
    if signs.len() != n || exponents.len() != n {
        return Err(Error::shape("pack_weights", shape, &[signs.len(), exponents.len()]));
    }
    let codes = signs
        .iter()
        .zip(exponents)
        .map(|(&s, &p)| ShiftCode::pack(s, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(PackedShiftTensor {
        shape: shape.to_vec(),
        codes,
    })
}

/// Concatenates 5-bit codes LSB-first into bytes; the final byte is zero-padded.
pub fn pack_bits(codes: &[ShiftCode]) -> Vec<u8> {
    let mut out = vec![0u8; (codes.len() * BITS_PER_CODE).div_ceil(8)];
    for (j, code) in codes.iter().enumerate() {
        let bit = j * BITS_PER_CODE;
        let word = u16::from(code.bits()) << (bit % 8);
        out[bit / 8] |= word as u8;
        if bit % 8 > 3 {
            out[bit / 8 + 1] |= (word >> 8) as u8;
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], count: usize) -> Result<Vec<ShiftCode>> {
    if bytes.len() < (count * BITS_PER_CODE).div_ceil(8) {
        return Err(Error::Parse(format!(
            "{} bytes cannot hold {count} shift codes",
            bytes.len()
        )));
    }
    Ok((0..count)
        .map(|j| {
            let bit = j * BITS_PER_CODE;
            let lo = u16::from(bytes[bit / 8]);
            let hi = bytes.get(bit / 8 + 1).map_or(0, |&b| u16::from(b));
            ShiftCode::from_bits((((hi << 8) | lo) >> (bit % 8)) as u8)
        })
        .collect())
}

impl PackedShiftTensor {
    pub fn from_quantized(q: &QuantizedShift) -> Result<Self> {
        pack_weights(&q.signs, &q.exponents, q.w_q.shape())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[ShiftCode] {
        &self.codes
    }

    pub fn unpack(&self) -> (Vec<i8>, Vec<i8>) {
        self.codes.iter().map(|c| c.unpack()).unzip()
    }

    pub fn dequantize(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.codes.iter().map(|c| c.value()).collect())
            .expect("shape matches code count")
    }

    /// `SAQ1` bytes: magic, rank and dims as u32 LE, the bitstream, then the
    /// CRC32 of the bitstream as u32 LE.
    pub fn encode(&self) -> Vec<u8> {
        let bits = pack_bits(&self.codes);
        let mut out = Vec::with_capacity(12 + 4 * self.shape.len() + bits.len());
        out.extend_from_slice(SAQ_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&bits);
        out.extend_from_slice(&crc32fast::hash(&bits).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: &str| Error::Parse(format!("SAQ1: {reason}"));
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(corrupt("truncated"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != SAQ_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let rank = u32_at(take(4)?);
        if rank > 8 {
            return Err(corrupt("implausible rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(4)?));
        }
        let count: usize = shape.iter().product();
        let bits = take((count * BITS_PER_CODE).div_ceil(8))?;
        let crc = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if crc != crc32fast::hash(bits) {
            return Err(corrupt("CRC mismatch"));
        }
        Ok(PackedShiftTensor {
            codes: unpack_bits(bits, count)?,
            shape,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Q16.16 fixed-point value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct FixedQ16(pub i32);

impl FixedQ16 {
    pub const MAX: FixedQ16 = FixedQ16(i32::MAX);
    pub const MIN: FixedQ16 = FixedQ16(i32::MIN);
}

/// Rounds to the nearest multiple of `2^-16`.
pub fn to_fixed(x: f32) -> Result<FixedQ16> {
    let scaled = (f64::from(x) * ONE).round();
    if !scaled.is_finite() || scaled < f64::from(i32::MIN) || scaled > f64::from(i32::MAX) {
        return Err(Error::FixedRange { value: f64::from(x) });
    }
    Ok(FixedQ16(scaled as i32))
}

pub fn from_fixed(q: FixedQ16) -> f32 {
    (f64::from(q.0) / ONE) as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedAffine {
    pub values: Vec<FixedQ16>,
    /// Output elements clamped to the Q16.16 range.
    pub saturated: usize,
}

/// `out[r, o] = Σ_i ±(x[r, i] >> |p[o, i]|)`, accumulated in 64 bits and
/// saturated to Q16.16. The shift is arithmetic, so negative inputs round
/// toward −∞.
pub fn fixed_shift_affine(x: &[FixedQ16], codes: &PackedShiftTensor) -> Result<FixedAffine> {
    let (c_out, c_in) = match codes.shape() {
        [o, i] => (*o, *i),
        other => return Err(Error::shape("fixed_shift_affine", &[x.len()], other)),
    };
    if c_in == 0 || !x.len().is_multiple_of(c_in) {
        return Err(Error::shape("fixed_shift_affine", &[x.len()], codes.shape()));
    }
    let rows = x.len() / c_in;
    let mut values = Vec::with_capacity(rows * c_out);
    let mut saturated = 0;
    for xr in x.chunks_exact(c_in) {
        for wr in codes.codes().chunks_exact(c_in) {
            let mut acc: i64 = 0;
            for (xv, code) in xr.iter().zip(wr) {
                let shifted = i64::from(xv.0 >> code.shift());
                if code.is_negative() {
                    acc -= shifted;
                } else {
                    acc += shifted;
                }
            }
            let clamped = acc.clamp(i64::from(i32::MIN), i64::from(i32::MAX));
            if clamped != acc {
                saturated += 1;
            }
            values.push(FixedQ16(clamped as i32));
        }
    }
    Ok(FixedAffine { values, saturated })
}

/// Float-in/float-out wrapper around [`fixed_shift_affine`]: quantizes the
/// input to Q16.16, runs the integer kernel, and dequantizes. Returns the
/// output and the saturation count.
pub fn fixed_shift_forward(x: &Tensor, codes: &PackedShiftTensor) -> Result<(Tensor, usize)> {
    if x.channels() != codes.shape().get(1).copied().unwrap_or(0) {
        return Err(Error::shape("fixed_shift_forward", x.shape(), codes.shape()));
    }
    let fixed = x.data().iter().map(|&v| to_fixed(v)).collect::<Result<Vec<_>>>()?;
    let out = fixed_shift_affine(&fixed, codes)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = codes.shape()[0];
    let y = Tensor::new(shape, out.values.into_iter().map(from_fixed).collect())?;
    Ok((y, out.saturated))
}
