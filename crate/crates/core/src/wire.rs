//! Byte layouts for every codec payload, and the compression-rate accounting.
//!
//! All multi-byte fields are little-endian. The adaptive/local-selection
//! layout (see `docs/wire-format.md`) is:
//!
//! ```text
//! header  layer_id u16 | element_count u32 | L_T u16 | scale f32     (12 bytes)
//! body    per bin: count u8, then `count` entries
//! entry   u8 when L_T <= 64, else u16:  (index_within_bin << 2) | code
//! code    0b01 = +scale, 0b10 = -scale; 0b00 and 0b11 are invalid
//! ```

use crate::codec::baselines::{OneBitPack, SparsePack};
use crate::codec::{bin_count, bin_extent, Code, Entry, PackedLayer, MAX_BIN_LEN};
use crate::error::{Error, Result};

/// Fixed header size of a sparse-binned layer, in bytes.
pub const HEADER_BYTES: usize = 12;

/// Bin lengths up to this value use one-byte entries.
pub const NARROW_BIN_LIMIT: usize = 64;

const CODE_PLUS: u8 = 0b01;
const CODE_MINUS: u8 = 0b10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedLayer {
    pub bytes: Vec<u8>,
}

impl EncodedLayer {
    pub fn declared_bits(&self) -> u64 {
        8 * self.bytes.len() as u64
    }
}

/// Entry width in bits for bins of `bin_len` elements.
pub fn entry_bits(bin_len: usize) -> usize {
    if bin_len <= NARROW_BIN_LIMIT {
        8
    } else {
        16
    }
}

fn code_bits(code: Code) -> u8 {
    match code {
        Code::Plus => CODE_PLUS,
        Code::Minus => CODE_MINUS,
    }
}

pub fn encode(p: &PackedLayer) -> Result<EncodedLayer> {
    if p.bin_len > MAX_BIN_LEN {
        return Err(Error::IndexWidthExceeded(p.bin_len));
    }
    for (bin, entries) in p.bins.iter().enumerate() {
        if entries.len() > u8::MAX as usize {
            return Err(Error::BinOverflow {
                bin,
                count: entries.len(),
            });
        }
    }
    p.validate()?;
    let element_count = u32::try_from(p.element_count)
        .map_err(|_| Error::CorruptPack(format!("{} elements exceed u32", p.element_count)))?;

    let wide = entry_bits(p.bin_len) == 16;
    let entry_bytes = if wide { 2 } else { 1 };
    let mut bytes = Vec::with_capacity(HEADER_BYTES + p.bins.len() + p.selected() * entry_bytes);
    bytes.extend_from_slice(&p.layer_id.to_le_bytes());
    bytes.extend_from_slice(&element_count.to_le_bytes());
    bytes.extend_from_slice(&(p.bin_len as u16).to_le_bytes());
    bytes.extend_from_slice(&p.scale.to_le_bytes());
    for entries in &p.bins {
        bytes.push(entries.len() as u8);
        for e in entries {
            let word = (e.index << 2) | code_bits(e.code) as u16;
            if wide {
                bytes.extend_from_slice(&word.to_le_bytes());
            } else {
                bytes.push(word as u8);
            }
        }
    }
    Ok(EncodedLayer { bytes })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or(Error::UnexpectedEnd(self.bytes.len()))?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice of length N"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn slice(&mut self, n: usize) -> Result<&'a [u8]> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or(Error::UnexpectedEnd(self.bytes.len()))?;
        self.pos += n;
        Ok(chunk)
    }

    fn finish(&self) -> Result<()> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(Error::TrailingBytes(n)),
        }
    }
}

pub fn decode(e: &EncodedLayer) -> Result<PackedLayer> {
    decode_bytes(&e.bytes)
}

pub fn decode_bytes(bytes: &[u8]) -> Result<PackedLayer> {
    let mut r = Reader::new(bytes);
    let layer_id = r.u16()?;
    let element_count = r.u32()? as usize;
    let bin_len = r.u16()? as usize;
    let scale = r.f32()?;
    if bin_len == 0 || bin_len > MAX_BIN_LEN {
        return Err(Error::CorruptPack(format!("bin length {bin_len}")));
    }
    if element_count == 0 {
        return Err(Error::CorruptPack("element_count is zero".into()));
    }
    let wide = entry_bits(bin_len) == 16;
    let n_bins = bin_count(element_count, bin_len);
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let count = r.u8()? as usize;
        let extent = bin_extent(element_count, bin_len, b);
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let offset = r.pos;
            let word = if wide { r.u16()? } else { r.u8()? as u16 };
            let code = match (word & 0b11) as u8 {
                CODE_PLUS => Code::Plus,
                CODE_MINUS => Code::Minus,
                bits => return Err(Error::CorruptEntry { offset, bits }),
            };
            let index = word >> 2;
            if index as usize >= extent || entries.last().is_some_and(|e: &Entry| e.index >= index)
            {
                return Err(Error::CorruptPack(format!(
                    "entry at byte {offset} has index {index} in bin {b} of extent {extent}"
                )));
            }
            entries.push(Entry { index, code });
        }
        bins.push(entries);
    }
    r.finish()?;
    let p = PackedLayer {
        layer_id,
        element_count,
        bin_len,
        scale,
        bins,
    };
    p.validate()?;
    Ok(p)
}

/// Exact payload size of `encode(p)` in bits, header included.
pub fn payload_bits(p: &PackedLayer) -> u64 {
    let per_entry = entry_bits(p.bin_len) as u64;
    (8 * HEADER_BYTES) as u64
        + p.bins
            .iter()
            .map(|b| 8 + per_entry * b.len() as u64)
            .sum::<u64>()
}

/// Dense 32-bit gradient bits divided by transmitted bits.
pub fn effective_compression_rate(element_count: usize, payload_bits: u64) -> f64 {
    if payload_bits == 0 {
        return f64::INFINITY;
    }
    32.0 * element_count as f64 / payload_bits as f64
}

/// Top-k layout: `pos_scale f32 | neg_scale f32 | count u32 | count × u32`,
/// each entry `(position << 1) | negative_bit`. The layer length is implied by
/// the receiver's model, so no element count is sent.
pub fn encode_sparse(p: &SparsePack) -> Result<Vec<u8>> {
    if p.element_count > (u32::MAX >> 1) as usize {
        return Err(Error::IndexWidthExceeded(p.element_count));
    }
    let mut bytes = Vec::with_capacity(12 + 4 * p.entries.len());
    bytes.extend_from_slice(&p.pos_scale.to_le_bytes());
    bytes.extend_from_slice(&p.neg_scale.to_le_bytes());
    bytes.extend_from_slice(&(p.entries.len() as u32).to_le_bytes());
    for &(pos, code) in &p.entries {
        let word = (pos << 1) | u32::from(code == Code::Minus);
        bytes.extend_from_slice(&word.to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode_sparse(bytes: &[u8], layer_id: u16, element_count: usize) -> Result<SparsePack> {
    let mut r = Reader::new(bytes);
    let pos_scale = r.f32()?;
    let neg_scale = r.f32()?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(element_count));
    for _ in 0..count {
        let word = r.u32()?;
        let code = if word & 1 == 1 {
            Code::Minus
        } else {
            Code::Plus
        };
        entries.push((word >> 1, code));
    }
    r.finish()?;
    Ok(SparsePack {
        layer_id,
        element_count,
        pos_scale,
        neg_scale,
        entries,
    })
}

/// One-bit layout: `pos_scale f32 | neg_scale f32 | ceil(n/8)` plane bytes.
pub fn encode_onebit(p: &OneBitPack) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8 + p.bits.len());
    bytes.extend_from_slice(&p.pos_scale.to_le_bytes());
    bytes.extend_from_slice(&p.neg_scale.to_le_bytes());
    bytes.extend_from_slice(&p.bits);
    bytes
}

pub fn decode_onebit(bytes: &[u8], layer_id: u16, element_count: usize) -> Result<OneBitPack> {
    let mut r = Reader::new(bytes);
    let pos_scale = r.f32()?;
    let neg_scale = r.f32()?;
    let bits = r.slice(element_count.div_ceil(8))?.to_vec();
    r.finish()?;
    Ok(OneBitPack {
        layer_id,
        element_count,
        pos_scale,
        neg_scale,
        bits,
    })
}

/// Uncompressed layout: the raw f32 values, no header.
pub fn encode_dense(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_dense_into(bytes: &[u8], out: &mut [f32]) -> Result<()> {
    if bytes.len() < 4 * out.len() {
        return Err(Error::UnexpectedEnd(bytes.len()));
    }
    if bytes.len() > 4 * out.len() {
        return Err(Error::TrailingBytes(bytes.len() - 4 * out.len()));
    }
    for (o, chunk) in out.iter_mut().zip(bytes.chunks_exact(4)) {
        *o = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
    }
    Ok(())
}
