//! The NVCF container: byte-exact serialization of a [`QuantizedModel`],
//! decoding, and full-grid reconstruction.
//!
//! All multi-byte fields are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NVCF"
//! 4       2     version (u16) = 1
//! 6       1     d (u8)
//! 7       1     bits b (u8)
//! 8       2     n_blocks (u16)
//! 10      4     k (u32)
//! 14      4     omega0 (f32)
//! 18      4d    resolution (u32 x d)
//! 18+4d   4     vmin (f32)
//! 22+4d   4     vmax (f32)
//! 26+4d         W_first (k x d), b_first (k), per block b1 (k) and b2 (k),
//!               W_last (k), b_last (1), all f32 row-major
//!               then per quantized layer (M1, M2 of block 0, block 1, ...):
//!               2^b f32 centers, then k^2 codes of b bits each packed
//!               LSB-first, zero-padded to a byte boundary
//! ```

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field_net::{Evaluator, NetworkArch, Parameters, MAX_WIDTH};
use crate::quantizer::{check_bits, dequantize_model, unquantized_count, QuantizedLayer, QuantizedModel};
use crate::volume::{axis_coord, unravel_into, Precision, ValueRange, Volume};

pub const MAGIC: &[u8; 4] = b"NVCF";
pub const VERSION: u16 = 1;

/// Header length in bytes for a `d`-dimensional model.
pub fn header_len(d: usize) -> usize {
    26 + 4 * d
}

/// Packed code bytes of one quantized `k x k` layer.
pub fn packed_code_len(entries: usize, bits: u8) -> usize {
    (entries * bits as usize).div_ceil(8)
}

/// Exact file size in bits: header, full-precision scalars, and per layer
/// `32 * 2^b` center bits plus byte-aligned codes.
pub fn file_size_bits(arch: &NetworkArch, bits: u8) -> u64 {
    let header = 8 * header_len(arch.d) as u64;
    let full = 32 * unquantized_count(arch) as u64;
    let per_layer = 32 * (1u64 << bits) + 8 * packed_code_len(arch.k * arch.k, bits) as u64;
    header + full + 2 * arch.n_blocks as u64 * per_layer
}

/// Source bits over compressed bits.
pub fn compression_ratio(samples: usize, precision: Precision, file_bytes: usize) -> f64 {
    (samples as f64 * precision.bits_per_sample() as f64) / (file_bytes as f64 * 8.0)
}

struct BitWriter<'a> {
    out: &'a mut Vec<u8>,
    acc: u32,
    filled: u32,
}

impl<'a> BitWriter<'a> {
    fn new(out: &'a mut Vec<u8>) -> Self {
        BitWriter { out, acc: 0, filled: 0 }
    }

    fn push(&mut self, value: u16, bits: u8) {
        self.acc |= (value as u32) << self.filled;
        self.filled += bits as u32;
        while self.filled >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.filled -= 8;
        }
    }

    fn finish(self) {
        if self.filled > 0 {
            self.out.push(self.acc as u8);
        }
    }
}

fn unpack_codes(bytes: &[u8], count: usize, bits: u8) -> Vec<u16> {
    let mask = (1u32 << bits) - 1;
    let mut codes = Vec::with_capacity(count);
    let (mut acc, mut filled, mut pos) = (0u32, 0u32, 0usize);
    for _ in 0..count {
        while filled < bits as u32 {
            acc |= (bytes[pos] as u32) << filled;
            pos += 1;
            filled += 8;
        }
        codes.push((acc & mask) as u16);
        acc >>= bits;
        filled -= bits as u32;
    }
    codes
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn serialize(qm: &QuantizedModel) -> Vec<u8> {
    let arch = &qm.arch;
    let mut out = Vec::with_capacity((file_size_bits(arch, qm.bits) / 8) as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(arch.d as u8);
    out.push(qm.bits);
    out.extend_from_slice(&(arch.n_blocks as u16).to_le_bytes());
    out.extend_from_slice(&(arch.k as u32).to_le_bytes());
    out.extend_from_slice(&arch.omega0.to_le_bytes());
    for &s in &qm.resolution {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    out.extend_from_slice(&qm.range.vmin.to_le_bytes());
    out.extend_from_slice(&qm.range.vmax.to_le_bytes());

    put_f32s(&mut out, &qm.w_first);
    put_f32s(&mut out, &qm.b_first);
    for (b1, b2) in &qm.block_biases {
        put_f32s(&mut out, b1);
        put_f32s(&mut out, b2);
    }
    put_f32s(&mut out, &qm.w_last);
    put_f32s(&mut out, &[qm.b_last]);

    for layer in &qm.layers {
        put_f32s(&mut out, &layer.centers);
        let mut w = BitWriter::new(&mut out);
        for &c in &layer.codes {
            w.push(c, qm.bits);
        }
        w.finish();
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len(),
                format!(
                    "truncated: needed {n} bytes at offset {}, only {} remain",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Parsed header fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub version: u16,
    pub arch: NetworkArch,
    pub bits: u8,
    pub resolution: Vec<usize>,
    pub range: ValueRange,
}

impl Header {
    /// Total stream length implied by the header.
    pub fn file_len(&self) -> u64 {
        file_size_bits(&self.arch, self.bits) / 8
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<Header> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"NVCF\"")));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let d = r.u8()? as usize;
    if !(3..=4).contains(&d) {
        return Err(Error::format(6, format!("dimension {d} not in 3..=4")));
    }
    let bits = r.u8()?;
    check_bits(bits).map_err(|_| Error::format(7, format!("bit width {bits} not in 1..=16")))?;
    let n_blocks = r.u16()? as usize;
    let k = r.u32()? as usize;
    if k > MAX_WIDTH {
        return Err(Error::format(10, format!("width {k} exceeds {MAX_WIDTH}")));
    }
    let omega0 = r.f32()?;
    let arch = NetworkArch { d, k, n_blocks, omega0 };
    arch.validate().map_err(|e| Error::format(8, e.to_string()))?;
    let mut resolution = Vec::with_capacity(d);
    for j in 0..d {
        let s = r.u32()? as usize;
        if s == 0 {
            return Err(Error::format(18 + 4 * j, "zero resolution entry"));
        }
        resolution.push(s);
    }
    let range = ValueRange {
        vmin: r.f32()?,
        vmax: r.f32()?,
    };
    if !(range.vmin.is_finite() && range.vmax.is_finite() && range.vmin <= range.vmax) {
        return Err(Error::format(18 + 4 * d, format!("bad value range [{}, {}]", range.vmin, range.vmax)));
    }
    Ok(Header {
        version,
        arch,
        bits,
        resolution,
        range,
    })
}

/// Parses only the header.
pub fn read_header_bytes(bytes: &[u8]) -> Result<Header> {
    read_header(&mut Reader { bytes, pos: 0 })
}

pub fn deserialize(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader { bytes, pos: 0 };
    let header = read_header(&mut r)?;
    let expected = header.file_len();
    if bytes.len() as u64 != expected {
        return Err(Error::format(
            bytes.len().min(expected as usize),
            format!("expected {expected} bytes from header, got {}", bytes.len()),
        ));
    }
    let Header { arch, bits, resolution, range, .. } = header;
    let (k, d) = (arch.k, arch.d);
    let w_first = r.f32s(k * d)?;
    let b_first = r.f32s(k)?;
    let mut block_biases = Vec::with_capacity(arch.n_blocks);
    for _ in 0..arch.n_blocks {
        block_biases.push((r.f32s(k)?, r.f32s(k)?));
    }
    let w_last = r.f32s(k)?;
    let b_last = r.f32()?;
    let mut layers = Vec::with_capacity(2 * arch.n_blocks);
    for _ in 0..2 * arch.n_blocks {
        let centers = r.f32s(1 << bits)?;
        let packed = r.take(packed_code_len(k * k, bits))?;
        layers.push(QuantizedLayer {
            rows: k,
            cols: k,
            centers,
            codes: unpack_codes(packed, k * k, bits),
        });
    }
    Ok(QuantizedModel {
        arch,
        bits,
        resolution,
        range,
        w_first,
        b_first,
        block_biases,
        w_last,
        b_last,
        layers,
    })
}

/// Evaluates a network at every vertex of `resolution` and denormalizes.
pub fn reconstruct_from_params(params: &Parameters, range: ValueRange, resolution: &[usize]) -> Result<Volume> {
    let d = params.arch().d;
    if resolution.len() != d {
        return Err(Error::Logic(format!(
            "resolution {resolution:?} does not match a {d}D model"
        )));
    }
    let ev = Evaluator::new(params);
    let count: usize = resolution.iter().product();
    let values: Vec<f32> = (0..count)
        .into_par_iter()
        .map_init(
            || (vec![0usize; d], vec![0.0; d]),
            |(idx, x), flat| {
                unravel_into(flat, resolution, idx);
                for j in 0..d {
                    x[j] = axis_coord(idx[j], resolution[j]);
                }
                range.denormalize(ev.forward(x)) as f32
            },
        )
        .collect();
    Volume::new(resolution.to_vec(), values)
}

/// Decodes a model onto a grid (the stored one or any other).
pub fn reconstruct_volume(qm: &QuantizedModel, resolution: &[usize]) -> Result<Volume> {
    let params = dequantize_model(qm)?;
    reconstruct_from_params(&params, qm.range, resolution)
}
