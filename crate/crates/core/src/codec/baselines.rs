//! Comparison codecs, all with residue feedback:
//!
//! * local selection: the single largest element of each bin, no soft threshold;
//! * fixed-percentage top-k with per-sign mean reconstruction;
//! * dense one-bit sign quantization with per-sign mean reconstruction.

use super::{
    bin_maxima, check_bin_len, layer_scale, Code, CodecState, Entry, GradientVector, PackedLayer,
};
use crate::error::{Error, Result};

/// Which comparison codec to run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineKind {
    LocalSelection { bin_len: usize },
    TopPercent { fraction: f64 },
    OneBit,
}

impl BaselineKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineKind::LocalSelection { bin_len } => check_bin_len(bin_len),
            BaselineKind::TopPercent { fraction } => check_fraction(fraction),
            BaselineKind::OneBit => Ok(()),
        }
    }
}

pub(crate) fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    Ok(())
}

/// Local selection: sends exactly the element attaining each bin's maximum
/// (lowest index on ties); bins whose maximum is zero send nothing.
pub fn ls_pack(state: &mut CodecState, dw: &GradientVector, bin_len: usize) -> Result<PackedLayer> {
    check_bin_len(bin_len)?;
    state.accumulate(dw.values())?;
    let element_count = state.len();
    let maxima = bin_maxima(state.residue(), bin_len)?;
    let scale = layer_scale(&maxima);

    let mut bins = Vec::with_capacity(maxima.len());
    for (b, g_bin) in state.residue_mut().chunks_mut(bin_len).enumerate() {
        let g_max = maxima[b];
        let mut entries = Vec::new();
        if g_max > 0.0 {
            let j = g_bin
                .iter()
                .position(|g| g.abs() == g_max)
                .expect("bin maximum is attained");
            let code = Code::of(g_bin[j]);
            g_bin[j] -= code.sign() * scale;
            entries.push(Entry {
                index: j as u16,
                code,
            });
        }
        bins.push(entries);
    }

    Ok(PackedLayer {
        layer_id: dw.layer_id(),
        element_count,
        bin_len,
        scale,
        bins,
    })
}

/// Layer-wide sparse selection with one reconstruction value per sign.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePack {
    pub layer_id: u16,
    pub element_count: usize,
    /// Mean of the selected non-negative values (0 when there are none).
    pub pos_scale: f32,
    /// Mean of the selected negative values, itself negative (0 when none).
    pub neg_scale: f32,
    /// Selected absolute positions in ascending order.
    pub entries: Vec<(u32, Code)>,
}

impl SparsePack {
    pub fn value(&self, code: Code) -> f32 {
        match code {
            Code::Plus => self.pos_scale,
            Code::Minus => self.neg_scale,
        }
    }

    pub fn unpack_into(&self, out: &mut [f32]) -> Result<()> {
        if out.len() != self.element_count {
            return Err(Error::ShapeMismatch {
                residue: out.len(),
                gradient: self.element_count,
            });
        }
        out.fill(0.0);
        let mut prev: Option<u32> = None;
        for &(pos, code) in &self.entries {
            if pos as usize >= self.element_count || prev.is_some_and(|p| p >= pos) {
                return Err(Error::CorruptPack(format!("top-k position {pos}")));
            }
            prev = Some(pos);
            out[pos as usize] = self.value(code);
        }
        Ok(())
    }
}

/// Number of entries top-k sends for `len` elements at `fraction`.
///
/// The product is nudged down by a relative 1e-9 before the ceiling so that
/// decimal fractions such as 0.3 do not round up an exact integer count.
pub fn topk_count(len: usize, fraction: f64) -> usize {
    let raw = fraction * len as f64;
    let k = (raw - raw * 1e-9).ceil() as usize;
    k.clamp(1, len)
}

/// Fixed-percentage selection over the whole layer, reconstructed with the
/// per-sign means of what was selected.
pub fn topk_pack(state: &mut CodecState, dw: &GradientVector, fraction: f64) -> Result<SparsePack> {
    check_fraction(fraction)?;
    state.accumulate(dw.values())?;
    let element_count = state.len();
    let k = topk_count(element_count, fraction);

    let g = state.residue();
    let mut order: Vec<u32> = (0..element_count as u32).collect();
    let by_magnitude = |a: &u32, b: &u32| {
        g[*b as usize]
            .abs()
            .total_cmp(&g[*a as usize].abs())
            .then(a.cmp(b))
    };
    if k < element_count {
        order.select_nth_unstable_by(k - 1, by_magnitude);
        order.truncate(k);
    }
    order.sort_unstable();

    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0f32, 0u32, 0.0f32, 0u32);
    let mut entries = Vec::with_capacity(order.len());
    for &i in &order {
        let v = g[i as usize];
        let code = Code::of(v);
        match code {
            Code::Plus => {
                pos_sum += v;
                pos_n += 1;
            }
            Code::Minus => {
                neg_sum += v;
                neg_n += 1;
            }
        }
        entries.push((i, code));
    }
    let pos_scale = if pos_n > 0 {
        pos_sum / pos_n as f32
    } else {
        0.0
    };
    let neg_scale = if neg_n > 0 {
        neg_sum / neg_n as f32
    } else {
        0.0
    };

    let packed = SparsePack {
        layer_id: dw.layer_id(),
        element_count,
        pos_scale,
        neg_scale,
        entries,
    };
    let residue = state.residue_mut();
    for &(i, code) in &packed.entries {
        residue[i as usize] -= packed.value(code);
    }
    Ok(packed)
}

/// Dense sign plane plus the two per-sign reconstruction values.
#[derive(Debug, Clone, PartialEq)]
pub struct OneBitPack {
    pub layer_id: u16,
    pub element_count: usize,
    pub pos_scale: f32,
    pub neg_scale: f32,
    /// Bit `i` (LSB-first within each byte) is 1 for non-negative elements.
    pub bits: Vec<u8>,
}

impl OneBitPack {
    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        self.bits[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn unpack_into(&self, out: &mut [f32]) -> Result<()> {
        if out.len() != self.element_count {
            return Err(Error::ShapeMismatch {
                residue: out.len(),
                gradient: self.element_count,
            });
        }
        if self.bits.len() != self.element_count.div_ceil(8) {
            return Err(Error::CorruptPack(format!(
                "{} plane bytes for {} elements",
                self.bits.len(),
                self.element_count
            )));
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = if self.bit(i) {
                self.pos_scale
            } else {
                self.neg_scale
            };
        }
        Ok(())
    }
}

/// One-bit quantization of every element; reconstruction values are the
/// means of the non-negative and negative parts of `G`.
pub fn onebit_pack(state: &mut CodecState, dw: &GradientVector) -> Result<OneBitPack> {
    state.accumulate(dw.values())?;
    let element_count = state.len();
    let g = state.residue();

    let mut bits = vec![0u8; element_count.div_ceil(8)];
    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0f32, 0u32, 0.0f32, 0u32);
    for (i, &v) in g.iter().enumerate() {
        if Code::of(v) == Code::Plus {
            bits[i / 8] |= 1 << (i % 8);
            pos_sum += v;
            pos_n += 1;
        } else {
            neg_sum += v;
            neg_n += 1;
        }
    }
    let packed = OneBitPack {
        layer_id: dw.layer_id(),
        element_count,
        pos_scale: if pos_n > 0 {
            pos_sum / pos_n as f32
        } else {
            0.0
        },
        neg_scale: if neg_n > 0 {
            neg_sum / neg_n as f32
        } else {
            0.0
        },
        bits,
    };
    for (i, r) in state.residue_mut().iter_mut().enumerate() {
        *r -= if packed.bit(i) {
            packed.pos_scale
        } else {
            packed.neg_scale
        };
    }
    Ok(packed)
}
