//! In-process synchronous data-parallel training.
//!
//! Each sync step runs, for every learner: forward/backward on its shard of
//! the global mini-batch, serialize the gradients, compress every layer with
//! the learner's own codec state, exchange the encoded bytes with every
//! peer, decode and average all packs in rank order, and apply the local
//! optimizer. Since every learner averages the same bytes in the same order,
//! weights stay bitwise identical across ranks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::baselines::{ls_pack, onebit_pack, topk_pack};
use crate::codec::{self, BinConfig, CodecState, GradientVector};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{percentile_abs, LayerMetrics};
use crate::nn::{Model, ParamKind};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::wire;

/// Codec applied to one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CodecSpec {
    /// Dense f32, no residue.
    Identity,
    AdaComp(BinConfig),
    LocalSelection {
        bin_len: usize,
    },
    TopPercent {
        fraction: f64,
    },
    OneBit,
}

impl CodecSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CodecSpec::LocalSelection { bin_len } => codec::check_bin_len(bin_len),
            CodecSpec::TopPercent { fraction } => codec::baselines::check_fraction(fraction),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CodecSpec::Identity => "none",
            CodecSpec::AdaComp(_) => "adacomp",
            CodecSpec::LocalSelection { .. } => "ls",
            CodecSpec::TopPercent { .. } => "topk",
            CodecSpec::OneBit => "onebit",
        }
    }

    /// Decodes one peer's bytes for a layer of `len` elements into `out`.
    pub fn decode_into(
        &self,
        bytes: &[u8],
        layer_id: u16,
        len: usize,
        out: &mut [f32],
    ) -> Result<()> {
        match self {
            CodecSpec::Identity => wire::decode_dense_into(bytes, out),
            CodecSpec::AdaComp(_) | CodecSpec::LocalSelection { .. } => {
                let p = wire::decode_bytes(bytes)?;
                if p.layer_id != layer_id || p.element_count != len {
                    return Err(Error::CorruptPack(format!(
                        "pack for layer {} ({} elements) delivered to layer {layer_id} ({len})",
                        p.layer_id, p.element_count
                    )));
                }
                p.unpack_into(out)
            }
            CodecSpec::TopPercent { .. } => {
                wire::decode_sparse(bytes, layer_id, len)?.unpack_into(out)
            }
            CodecSpec::OneBit => wire::decode_onebit(bytes, layer_id, len)?.unpack_into(out),
        }
    }
}

/// What one learner sends for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub bytes: Vec<u8>,
    pub selected: usize,
    pub bins: usize,
    pub max_per_bin: usize,
}

/// A codec bound to the residue of one layer on one learner.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCodec {
    spec: CodecSpec,
    state: Option<CodecState>,
}

impl LayerCodec {
    pub fn new(spec: CodecSpec, len: usize) -> Result<Self> {
        spec.validate()?;
        let state = match spec {
            CodecSpec::Identity => None,
            _ => Some(CodecState::new(len)?),
        };
        Ok(Self { spec, state })
    }

    pub fn spec(&self) -> CodecSpec {
        self.spec
    }

    pub fn residue(&self) -> Option<&[f32]> {
        self.state.as_ref().map(CodecState::residue)
    }

    pub fn compress(&mut self, dw: &GradientVector) -> Result<Transmission> {
        let Some(state) = self.state.as_mut() else {
            return Ok(Transmission {
                bytes: wire::encode_dense(dw.values()),
                selected: dw.len(),
                bins: 1,
                max_per_bin: dw.len(),
            });
        };
        match self.spec {
            CodecSpec::AdaComp(cfg) => binned(codec::pack(state, dw, &cfg)?),
            CodecSpec::LocalSelection { bin_len } => binned(ls_pack(state, dw, bin_len)?),
            CodecSpec::TopPercent { fraction } => {
                let p = topk_pack(state, dw, fraction)?;
                Ok(Transmission {
                    bytes: wire::encode_sparse(&p)?,
                    selected: p.entries.len(),
                    bins: 1,
                    max_per_bin: p.entries.len(),
                })
            }
            CodecSpec::OneBit => {
                let p = onebit_pack(state, dw)?;
                Ok(Transmission {
                    bytes: wire::encode_onebit(&p),
                    selected: dw.len(),
                    bins: 1,
                    max_per_bin: dw.len(),
                })
            }
            CodecSpec::Identity => unreachable!("identity codec keeps no state"),
        }
    }
}

fn binned(p: codec::PackedLayer) -> Result<Transmission> {
    Ok(Transmission {
        selected: p.selected(),
        bins: p.bin_count(),
        max_per_bin: p.max_per_bin(),
        bytes: wire::encode(&p)?.bytes,
    })
}

/// Per-epoch partition of `0..len` into `learners` disjoint streams.
///
/// The epoch's permutation is cut into `len / global_batch` global batches
/// (the remainder is dropped); learner `r` takes the `r`-th contiguous slice
/// of `global_batch / learners` samples from each. Stream `r` is the
/// concatenation of its slices, step by step.
pub fn shard(
    len: usize,
    learners: usize,
    global_batch: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if learners == 0 || global_batch == 0 || !global_batch.is_multiple_of(learners) {
        return Err(Error::InvalidConfig(format!(
            "global_batch {global_batch} must be a positive multiple of learners {learners}"
        )));
    }
    if len < global_batch {
        return Err(Error::InvalidConfig(format!(
            "dataset of {len} samples is smaller than global_batch {global_batch}"
        )));
    }
    let mut perm: Vec<usize> = (0..len).collect();
    let mix = seed ^ (epoch.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));

    let local = global_batch / learners;
    let steps = len / global_batch;
    let mut streams = vec![Vec::with_capacity(steps * local); learners];
    for batch in perm.chunks_exact(global_batch).take(steps) {
        for (r, part) in batch.chunks_exact(local).enumerate() {
            streams[r].extend_from_slice(part);
        }
    }
    Ok(streams)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub learners: usize,
    pub global_batch: usize,
    /// Codec per parameterized layer, in serialization order.
    pub codecs: Vec<CodecSpec>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Worker threads; `None` lets the pool pick.
    pub threads: Option<usize>,
    /// Compare every rank's weights with rank 0 after each step.
    pub verify_ranks: bool,
    /// Record rank 0's |residue| and |dW| 95th percentiles per step.
    pub track_percentiles: bool,
}

impl ClusterConfig {
    pub fn local_batch(&self) -> usize {
        self.global_batch / self.learners
    }
}

/// State owned by one simulated learner.
#[derive(Debug, Clone)]
pub struct Learner {
    pub rank: usize,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub codecs: Vec<LayerCodec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Mean of the learners' local losses, rank order.
    pub loss: f32,
    pub layers: Vec<LayerMetrics>,
}

pub struct Cluster {
    config: ClusterConfig,
    learners: Vec<Learner>,
    step: u64,
    pool: rayon::ThreadPool,
}

struct LocalResult {
    loss: f32,
    sent: Vec<Transmission>,
    dw_p95: Vec<f32>,
}

impl Cluster {
    /// Every learner starts from a clone of `model`.
    pub fn new(config: ClusterConfig, model: Model) -> Result<Self> {
        if config.learners == 0
            || !config.global_batch.is_multiple_of(config.learners)
            || config.global_batch == 0
        {
            return Err(Error::InvalidConfig(format!(
                "global_batch {} must be a positive multiple of learners {}",
                config.global_batch, config.learners
            )));
        }
        let lens = model.param_lens();
        if config.codecs.len() != lens.len() {
            return Err(Error::InvalidConfig(format!(
                "{} codecs for {} parameterized layers",
                config.codecs.len(),
                lens.len()
            )));
        }
        let mut learners = Vec::with_capacity(config.learners);
        for rank in 0..config.learners {
            let codecs = config
                .codecs
                .iter()
                .zip(&lens)
                .map(|(&spec, &len)| LayerCodec::new(spec, len))
                .collect::<Result<Vec<_>>>()?;
            learners.push(Learner {
                rank,
                model: model.clone(),
                optimizer: OptimizerState::new(config.optimizer, &lens)?,
                codecs,
            });
        }
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = config.threads {
            builder = builder.num_threads(n.max(1));
        }
        let pool = builder
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        Ok(Self {
            config,
            learners,
            step: 0,
            pool,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn learners(&self) -> &[Learner] {
        &self.learners
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Rank 0's model; all ranks hold the same weights.
    pub fn model(&self) -> &Model {
        &self.learners[0].model
    }

    pub fn residue(&self, rank: usize, layer: usize) -> Option<&[f32]> {
        self.learners.get(rank)?.codecs.get(layer)?.residue()
    }

    /// Whether every rank's parameters equal rank 0's bit for bit; returns
    /// the first differing `(rank, layer)` otherwise.
    pub fn first_rank_mismatch(&self) -> Option<(usize, usize)> {
        let reference = self.learners[0].model.params();
        for l in &self.learners[1..] {
            for (layer, (a, b)) in l.model.params().iter().zip(&reference).enumerate() {
                let same = a.len() == b.len()
                    && a.iter()
                        .zip(b.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits());
                if !same {
                    return Some((l.rank, layer));
                }
            }
        }
        None
    }

    /// One synchronous step. `shards[r]` lists learner `r`'s sample indices.
    pub fn sync_step(&mut self, data: &Dataset, shards: &[&[usize]]) -> Result<StepOutcome> {
        let n = self.config.learners;
        if shards.len() != n || shards.iter().any(|s| s.len() != self.config.local_batch()) {
            return Err(Error::InvalidConfig(format!(
                "sync step needs {n} shards of {} samples",
                self.config.local_batch()
            )));
        }
        let step = self.step + 1;
        let track = self.config.track_percentiles;

        // compute and compress, one learner per task
        let learners = &mut self.learners;
        let locals: Vec<LocalResult> = self.pool.install(|| {
            learners
                .par_iter_mut()
                .zip(shards.par_iter())
                .map(|(learner, shard)| {
                    let (x, y) = data.batch(shard);
                    let fwd = learner.model.forward(&x, &y)?;
                    if !fwd.loss.is_finite() {
                        return Err(Error::Diverged {
                            step,
                            rank: learner.rank,
                            loss: fwd.loss,
                        });
                    }
                    let grads = learner.model.backward(&fwd.activations, &y)?;
                    let dw_p95 = if track && learner.rank == 0 {
                        grads
                            .layers
                            .iter()
                            .map(|g| percentile_abs(g.values(), 0.95))
                            .collect()
                    } else {
                        Vec::new()
                    };
                    let sent = learner
                        .codecs
                        .iter_mut()
                        .zip(&grads.layers)
                        .map(|(c, g)| c.compress(g))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(LocalResult {
                        loss: fwd.loss,
                        sent,
                        dw_p95,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;

        // exchange: every learner receives every pack, averages in rank order
        let specs = &self.config.codecs;
        let locals_ref = &locals;
        self.pool.install(|| {
            learners.par_iter_mut().try_for_each(|learner| {
                let lens = learner.model.param_lens();
                let mut averaged = Vec::with_capacity(lens.len());
                for (layer, (&len, spec)) in lens.iter().zip(specs).enumerate() {
                    let mut sum = vec![0.0f32; len];
                    let mut incoming = vec![0.0f32; len];
                    for (r, peer) in locals_ref.iter().enumerate() {
                        let target = if r == 0 { &mut sum } else { &mut incoming };
                        spec.decode_into(&peer.sent[layer].bytes, layer as u16, len, target)?;
                        if r > 0 {
                            for (s, v) in sum.iter_mut().zip(&incoming) {
                                *s += *v;
                            }
                        }
                    }
                    let divisor = n as f32;
                    for s in &mut sum {
                        *s /= divisor;
                    }
                    averaged.push(sum);
                }
                let mut params = learner.model.params_mut();
                learner.optimizer.update(&mut params, &averaged)
            })
        })?;

        self.step = step;
        if self.config.verify_ranks {
            if let Some((rank, layer)) = self.first_rank_mismatch() {
                return Err(Error::RankMismatch { step, rank, layer });
            }
        }

        let lens = self.learners[0].model.param_lens();
        let mut layers = Vec::with_capacity(lens.len());
        for (layer, &len) in lens.iter().enumerate() {
            let mut m = LayerMetrics {
                dense_bits: 32 * len as u64 * n as u64,
                ..LayerMetrics::default()
            };
            for local in &locals {
                let t = &local.sent[layer];
                m.payload_bits += 8 * t.bytes.len() as u64;
                m.selected += t.selected as u64;
                m.bins += t.bins as u64;
                m.max_per_bin = m.max_per_bin.max(t.max_per_bin as u64);
            }
            if track {
                m.dw_p95 = locals[0].dw_p95[layer];
                m.rg_p95 = self.learners[0].codecs[layer]
                    .residue()
                    .map_or(0.0, |r| percentile_abs(r, 0.95));
            }
            layers.push(m);
        }
        let loss = locals.iter().fold(0.0f32, |acc, l| acc + l.loss) / n as f32;
        Ok(StepOutcome { loss, layers })
    }

    /// Fraction of `data` misclassified by rank 0's model.
    pub fn test_error(&self, data: &Dataset) -> Result<f64> {
        evaluate(self.model(), data)
    }
}

/// Fraction of `data` misclassified by `model`, evaluated in chunks.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    const CHUNK: usize = 1000;
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let (x, y) = data.batch(chunk);
        let pred = model.predict(&x)?;
        wrong += pred.iter().zip(&y).filter(|(p, t)| p != t).count();
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// Assigns a codec to each parameterized layer by its kind.
pub fn codecs_by_kind(kinds: &[ParamKind], fc: CodecSpec, conv: CodecSpec) -> Vec<CodecSpec> {
    kinds
        .iter()
        .map(|k| match k {
            ParamKind::FullyConnected => fc,
            ParamKind::Convolution => conv,
        })
        .collect()
}
