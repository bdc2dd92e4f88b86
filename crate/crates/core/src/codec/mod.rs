//! Residual gradient codecs.
//!
//! Every codec follows the same shape: the new gradient is folded into a
//! per-layer residue, some subset of the residue is quantized and sent, and
//! whatever was not sent stays behind for the next mini-batch.
//!
//! [`pack`] is the adaptive bin-local scheme: each bin of `L_T` elements
//! sends every element whose soft-thresholded value `residue + 2·dW`
//! reaches the bin's largest `|residue + dW|`, quantized to a sign and one
//! layer-wide scale. The comparison codecs live in [`baselines`].

pub mod baselines;

use crate::error::{Error, Result};

/// Largest bin length addressable by a 16-bit wire entry (14 index bits).
pub const MAX_BIN_LEN: usize = 16384;

/// A layer's gradient (or residue) flattened into its canonical layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    layer_id: u16,
    values: Vec<f32>,
}

impl GradientVector {
    pub fn new(layer_id: u16, values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyGradient);
        }
        Ok(Self { layer_id, values })
    }

    pub fn zeros(layer_id: u16, len: usize) -> Result<Self> {
        Self::new(layer_id, vec![0.0; len])
    }

    pub fn layer_id(&self) -> u16 {
        self.layer_id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Bin length and soft-threshold multiplier for the adaptive codec.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinConfig {
    bin_len: usize,
    scale_factor: f32,
}

impl BinConfig {
    pub const DEFAULT_SCALE_FACTOR: f32 = 2.0;

    pub fn new(bin_len: usize) -> Result<Self> {
        Self::with_scale_factor(bin_len, Self::DEFAULT_SCALE_FACTOR)
    }

    /// Experiments may move the multiplier within `[1, 4]`; shipped
    /// configurations keep 2.
    pub fn with_scale_factor(bin_len: usize, scale_factor: f32) -> Result<Self> {
        check_bin_len(bin_len)?;
        if !(1.0..=4.0).contains(&scale_factor) {
            return Err(Error::InvalidConfig(format!(
                "scale_factor must lie in [1, 4], got {scale_factor}"
            )));
        }
        Ok(Self {
            bin_len,
            scale_factor,
        })
    }

    pub fn bin_len(&self) -> usize {
        self.bin_len
    }

    pub fn scale_factor(&self) -> f32 {
        self.scale_factor
    }
}

pub(crate) fn check_bin_len(bin_len: usize) -> Result<()> {
    if bin_len == 0 || bin_len > MAX_BIN_LEN {
        return Err(Error::InvalidConfig(format!(
            "L_T must be between 1 and {MAX_BIN_LEN}, got {bin_len}"
        )));
    }
    Ok(())
}

/// Ternary code of a transmitted entry. Zero is never sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Code {
    Plus,
    Minus,
}

impl Code {
    /// Sign of `value`; exact zero (of either sign) maps to `Plus`.
    #[inline]
    pub fn of(value: f32) -> Self {
        if value >= 0.0 {
            Code::Plus
        } else {
            Code::Minus
        }
    }

    #[inline]
    pub fn sign(self) -> f32 {
        match self {
            Code::Plus => 1.0,
            Code::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    /// Position inside the bin, `0..L_T`.
    pub index: u16,
    pub code: Code,
}

/// Sparse per-bin selection with one shared scale for the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer {
    pub layer_id: u16,
    pub element_count: usize,
    pub bin_len: usize,
    pub scale: f32,
    pub bins: Vec<Vec<Entry>>,
}

impl PackedLayer {
    pub fn empty(layer_id: u16, element_count: usize, bin_len: usize) -> Self {
        Self {
            layer_id,
            element_count,
            bin_len,
            scale: 0.0,
            bins: vec![Vec::new(); bin_count(element_count, bin_len)],
        }
    }

    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }

    /// Number of elements covered by bin `bin`; only the last bin can be short.
    pub fn bin_extent(&self, bin: usize) -> usize {
        bin_extent(self.element_count, self.bin_len, bin)
    }

    /// Total number of transmitted entries.
    pub fn selected(&self) -> usize {
        self.bins.iter().map(Vec::len).sum()
    }

    pub fn max_per_bin(&self) -> usize {
        self.bins.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Absolute positions of all entries in ascending order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, Code)> + '_ {
        let bin_len = self.bin_len;
        self.bins.iter().enumerate().flat_map(move |(b, entries)| {
            entries
                .iter()
                .map(move |e| (b * bin_len + e.index as usize, e.code))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.element_count == 0 {
            return Err(Error::CorruptPack("element_count is zero".into()));
        }
        if self.bin_len == 0 || self.bin_len > MAX_BIN_LEN {
            return Err(Error::CorruptPack(format!("bin length {}", self.bin_len)));
        }
        let expected = bin_count(self.element_count, self.bin_len);
        if self.bins.len() != expected {
            return Err(Error::CorruptPack(format!(
                "{} bins for {} elements at L_T={}, expected {expected}",
                self.bins.len(),
                self.element_count,
                self.bin_len
            )));
        }
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(Error::CorruptPack(format!("scale {}", self.scale)));
        }
        if self.scale == 0.0 && self.selected() > 0 {
            return Err(Error::CorruptPack("entries present with zero scale".into()));
        }
        for (b, entries) in self.bins.iter().enumerate() {
            let extent = self.bin_extent(b);
            let mut prev: Option<u16> = None;
            for e in entries {
                if e.index as usize >= extent {
                    return Err(Error::CorruptPack(format!(
                        "index {} outside bin {b} of extent {extent}",
                        e.index
                    )));
                }
                if prev.is_some_and(|p| p >= e.index) {
                    return Err(Error::CorruptPack(format!(
                        "indices in bin {b} are not strictly increasing"
                    )));
                }
                prev = Some(e.index);
            }
        }
        Ok(())
    }

    /// Writes the dense decompressed layer into `out`, overwriting it.
    pub fn unpack_into(&self, out: &mut [f32]) -> Result<()> {
        if out.len() != self.element_count {
            return Err(Error::ShapeMismatch {
                residue: out.len(),
                gradient: self.element_count,
            });
        }
        self.validate()?;
        out.fill(0.0);
        for (pos, code) in self.positions() {
            out[pos] = code.sign() * self.scale;
        }
        Ok(())
    }
}

pub(crate) fn bin_count(element_count: usize, bin_len: usize) -> usize {
    element_count.div_ceil(bin_len)
}

pub(crate) fn bin_extent(element_count: usize, bin_len: usize, bin: usize) -> usize {
    let start = bin * bin_len;
    bin_len.min(element_count.saturating_sub(start))
}

/// Residue memory one learner keeps for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecState {
    residue: Vec<f32>,
    step: u64,
}

impl CodecState {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyGradient);
        }
        Ok(Self {
            residue: vec![0.0; len],
            step: 0,
        })
    }

    /// State with a preloaded residue, mostly for tests and replay.
    pub fn from_residue(residue: Vec<f32>) -> Result<Self> {
        if residue.is_empty() {
            return Err(Error::EmptyGradient);
        }
        Ok(Self { residue, step: 0 })
    }

    pub fn residue(&self) -> &[f32] {
        &self.residue
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.residue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residue.is_empty()
    }

    /// Folds `dw` into the residue (`G = residue + dW`) and advances the step.
    pub(crate) fn accumulate(&mut self, dw: &[f32]) -> Result<()> {
        if dw.len() != self.residue.len() {
            return Err(Error::ShapeMismatch {
                residue: self.residue.len(),
                gradient: dw.len(),
            });
        }
        for (r, d) in self.residue.iter_mut().zip(dw) {
            *r += *d;
        }
        self.step += 1;
        Ok(())
    }

    pub(crate) fn residue_mut(&mut self) -> &mut [f32] {
        &mut self.residue
    }
}

/// Largest `|G|` in each bin of `bin_len` elements; the last bin may be partial.
pub fn bin_maxima(values: &[f32], bin_len: usize) -> Result<Vec<f32>> {
    if values.is_empty() {
        return Err(Error::EmptyGradient);
    }
    check_bin_len(bin_len)?;
    Ok(values
        .chunks(bin_len)
        .map(|bin| bin.iter().fold(0.0f32, |m, v| m.max(v.abs())))
        .collect())
}

/// Mean of the bin maxima, zero bins included. Summation runs in bin order.
pub fn layer_scale(bin_maxima: &[f32]) -> f32 {
    if bin_maxima.is_empty() {
        return 0.0;
    }
    let sum = bin_maxima.iter().fold(0.0f32, |acc, v| acc + v);
    sum / bin_maxima.len() as f32
}

/// Adaptive residual compression of one layer.
///
/// With `G = residue + dW` and `H = G + (s-1)·dW` (for the default `s = 2`
/// that is exactly `G + dW`), index `j` of bin `i` is sent when
/// `|H(j)| >= g_max(i)` and `g_max(i) > 0`. A sent element is quantized to
/// `sign(G(j))·scale`, `scale` being the mean of the bin maxima, and the
/// quantization error stays in the residue. Unsent elements keep all of `G`.
///
/// The bin maximum itself is not guaranteed to be sent: when `dW` opposes
/// `G` strongly enough, `|H|` falls below `g_max` for every index.
pub fn pack(state: &mut CodecState, dw: &GradientVector, cfg: &BinConfig) -> Result<PackedLayer> {
    state.accumulate(dw.values())?;
    let bin_len = cfg.bin_len();
    let element_count = state.len();
    let maxima = bin_maxima(state.residue(), bin_len)?;
    let scale = layer_scale(&maxima);
    let extra = cfg.scale_factor() - 1.0;
    let literal = cfg.scale_factor() == BinConfig::DEFAULT_SCALE_FACTOR;

    let mut bins = Vec::with_capacity(maxima.len());
    let residue = state.residue_mut();
    for (b, (g_bin, dw_bin)) in residue
        .chunks_mut(bin_len)
        .zip(dw.values().chunks(bin_len))
        .enumerate()
    {
        let g_max = maxima[b];
        let mut entries = Vec::new();
        if g_max > 0.0 {
            for (j, (g, &d)) in g_bin.iter_mut().zip(dw_bin).enumerate() {
                let h = if literal { *g + d } else { *g + extra * d };
                if h.abs() >= g_max {
                    let code = Code::of(*g);
                    *g -= code.sign() * scale;
                    entries.push(Entry {
                        index: j as u16,
                        code,
                    });
                }
            }
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

/// Dense reconstruction: `code·scale` at packed positions, zero elsewhere.
pub fn unpack(packed: &PackedLayer) -> Result<GradientVector> {
    let mut out = vec![0.0; packed.element_count];
    packed.unpack_into(&mut out)?;
    GradientVector::new(packed.layer_id, out)
}
