#![allow(dead_code)]

use adacomp::codec::baselines::{ls_pack, onebit_pack, topk_pack};
use adacomp::codec::{pack, BinConfig, CodecState, GradientVector};
use adacomp::nn::{LayerSpec, Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Line-by-line transcription of the pack pseudo-code, written without
/// looking at the library: bins of `t`, g_max per bin, `H = G + dW`,
/// select where `|H| >= g_max` (and the bin is not all zero), quantize to
/// `sign(G) * scale`. Returns the selected global indices with their
/// negative flag, the scale, and the new residue.
pub struct OraclePack {
    pub selected: Vec<(usize, bool)>,
    pub scale: f32,
    pub residue: Vec<f32>,
}

#[allow(clippy::needless_range_loop)]
pub fn oracle_pack(residue: &[f32], dw: &[f32], t: usize) -> OraclePack {
    let n = residue.len();
    let mut g = vec![0.0f32; n];
    let mut h = vec![0.0f32; n];
    for k in 0..n {
        g[k] = residue[k] + dw[k];
    }
    for k in 0..n {
        h[k] = g[k] + dw[k];
    }
    let bins = n.div_ceil(t);
    let mut g_max = vec![0.0f32; bins];
    for i in 0..bins {
        let mut m = 0.0f32;
        for j in 0..t {
            let index = i * t + j;
            if index < n && g[index].abs() > m {
                m = g[index].abs();
            }
        }
        g_max[i] = m;
    }
    let mut total = 0.0f32;
    for m in &g_max {
        total += *m;
    }
    let scale = total / bins as f32;

    let mut out = OraclePack {
        selected: Vec::new(),
        scale,
        residue: vec![0.0; n],
    };
    for i in 0..bins {
        for j in 0..t {
            let index = i * t + j;
            if index >= n {
                break;
            }
            if g_max[i] > 0.0 && h[index].abs() >= g_max[i] {
                let negative = g[index] < 0.0;
                let gq = if negative { -scale } else { scale };
                out.selected.push((index, negative));
                out.residue[index] = g[index] - gq;
            } else {
                out.residue[index] = g[index];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CodecUnderTest {
    AdaComp(usize),
    LocalSelection(usize),
    TopPercent(f64),
    OneBit,
}

impl CodecUnderTest {
    pub fn name(&self) -> &'static str {
        match self {
            CodecUnderTest::AdaComp(_) => "adacomp",
            CodecUnderTest::LocalSelection(_) => "ls",
            CodecUnderTest::TopPercent(_) => "topk",
            CodecUnderTest::OneBit => "onebit",
        }
    }

    /// Packs once from `residue` and returns `(new residue, decompressed)`.
    pub fn apply(&self, residue: &[f32], dw: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let mut state = CodecState::from_residue(residue.to_vec()).unwrap();
        let dw = GradientVector::new(0, dw.to_vec()).unwrap();
        let mut dense = vec![0.0f32; residue.len()];
        match *self {
            CodecUnderTest::AdaComp(t) => pack(&mut state, &dw, &BinConfig::new(t).unwrap())
                .unwrap()
                .unpack_into(&mut dense)
                .unwrap(),
            CodecUnderTest::LocalSelection(t) => ls_pack(&mut state, &dw, t)
                .unwrap()
                .unpack_into(&mut dense)
                .unwrap(),
            CodecUnderTest::TopPercent(pi) => topk_pack(&mut state, &dw, pi)
                .unwrap()
                .unpack_into(&mut dense)
                .unwrap(),
            CodecUnderTest::OneBit => onebit_pack(&mut state, &dw)
                .unwrap()
                .unpack_into(&mut dense)
                .unwrap(),
        }
        (state.residue().to_vec(), dense)
    }
}

/// How one conservation case came out.
#[derive(Debug, Default, Clone, Copy)]
pub struct Conservation {
    /// Elements where `residue_new != fl(fl(residue_old + dW) - decompressed)`.
    pub rounding_violations: usize,
    /// Elements where the exact sum `residue_new + decompressed` is further
    /// than half an ulp of `residue_new` from `fl(residue_old + dW)`.
    pub exact_violations: usize,
    /// Elements where the f32 sum `residue_new + decompressed` differs from
    /// `fl(residue_old + dW)`; cancellation makes this nonzero legitimately.
    pub literal_mismatches: usize,
    pub elements: usize,
}

fn half_ulp(x: f32) -> f64 {
    let a = x.abs();
    if a == 0.0 {
        return f32::from_bits(1) as f64 / 2.0;
    }
    let next = f32::from_bits(a.to_bits() + 1);
    (next as f64 - a as f64) / 2.0
}

pub fn check_conservation(
    residue: &[f32],
    dw: &[f32],
    new_residue: &[f32],
    dense: &[f32],
) -> Conservation {
    let mut c = Conservation {
        elements: residue.len(),
        ..Default::default()
    };
    for k in 0..residue.len() {
        let g = residue[k] + dw[k];
        let expected = g - dense[k];
        if expected.to_bits() != new_residue[k].to_bits() {
            c.rounding_violations += 1;
        }
        let err = (new_residue[k] as f64 + dense[k] as f64) - g as f64;
        if err.abs() > half_ulp(new_residue[k]) {
            c.exact_violations += 1;
        }
        if (new_residue[k] + dense[k]).to_bits() != g.to_bits() {
            c.literal_mismatches += 1;
        }
    }
    c
}

/// Values spread over several decades with both signs and some exact zeros.
pub fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                0.0
            } else {
                let mag = 10f32.powf(rng.random_range(-4.0..1.0));
                if rng.random_bool(0.5) {
                    -mag
                } else {
                    mag
                }
            }
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Plain scalar f64 forward pass of `specs` over one sample, straight from
/// the layer definitions: FC as `W[out][in]` then bias, convolution as
/// `W[o][i][5][5]` then bias with valid padding, 2x2/2 max pooling. Returns
/// the logits.
pub fn reference_logits(
    input_shape: &[usize],
    specs: &[LayerSpec],
    params: &[Vec<f64>],
    x: &[f64],
) -> Vec<f64> {
    let mut shape = input_shape.to_vec();
    let mut a = x.to_vec();
    let mut p = params.iter();
    for spec in specs {
        match *spec {
            LayerSpec::FullyConnected { inputs, outputs } => {
                let w = p.next().unwrap();
                let mut y = vec![0.0; outputs];
                for o in 0..outputs {
                    let mut acc = w[outputs * inputs + o];
                    for i in 0..inputs {
                        acc += w[o * inputs + i] * a[i];
                    }
                    y[o] = acc;
                }
                a = y;
                shape = vec![outputs];
            }
            LayerSpec::Conv5x5 {
                in_maps,
                out_maps,
                stride,
            } => {
                let w = p.next().unwrap();
                let (h, wd) = (shape[1], shape[2]);
                let (oh, ow) = ((h - 5) / stride + 1, (wd - 5) / stride + 1);
                let mut y = vec![0.0; out_maps * oh * ow];
                for o in 0..out_maps {
                    for r in 0..oh {
                        for c in 0..ow {
                            let mut acc = w[out_maps * in_maps * 25 + o];
                            for i in 0..in_maps {
                                for kr in 0..5 {
                                    for kc in 0..5 {
                                        let wi = ((o * in_maps + i) * 5 + kr) * 5 + kc;
                                        let xi = (i * h + r * stride + kr) * wd + c * stride + kc;
                                        acc += w[wi] * a[xi];
                                    }
                                }
                            }
                            y[(o * oh + r) * ow + c] = acc;
                        }
                    }
                }
                a = y;
                shape = vec![out_maps, oh, ow];
            }
            LayerSpec::Relu => a.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerSpec::MaxPool2x2 => {
                let (ch, h, wd) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / 2, wd / 2);
                let mut y = vec![f64::NEG_INFINITY; ch * oh * ow];
                for m in 0..ch {
                    for r in 0..oh {
                        for c in 0..ow {
                            for dr in 0..2 {
                                for dc in 0..2 {
                                    let v = a[(m * h + 2 * r + dr) * wd + 2 * c + dc];
                                    let out = &mut y[(m * oh + r) * ow + c];
                                    *out = out.max(v);
                                }
                            }
                        }
                    }
                }
                a = y;
                shape = vec![ch, oh, ow];
            }
            LayerSpec::SoftmaxXent { .. } => {}
        }
    }
    a
}

/// Mean cross-entropy of the reference forward pass over a batch.
pub fn reference_loss(
    input_shape: &[usize],
    specs: &[LayerSpec],
    params: &[Vec<f64>],
    x: &[f32],
    labels: &[usize],
) -> f64 {
    let per: usize = input_shape.iter().product();
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let sample: Vec<f64> = x[b * per..(b + 1) * per]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let z = reference_logits(input_shape, specs, params, &sample);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[label];
    }
    total / labels.len() as f64
}

/// Largest relative disagreement between the model's backprop gradients and
/// central differences (step `eps`) of the f64 reference loss, over every
/// parameter. Coordinates where both values are below `floor` are measured
/// relative to `floor`.
pub fn finite_difference_error(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    floor: f64,
) -> f64 {
    let pass = model.forward(x, labels).unwrap();
    let grads = model.backward(&pass.activations, labels).unwrap();
    let specs: Vec<LayerSpec> = model.specs().copied().collect();
    let mut params: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.iter().map(|&v| v as f64).collect())
        .collect();
    let input = model.input_shape().to_vec();
    let mut worst = 0.0f64;
    for l in 0..params.len() {
        for k in 0..params[l].len() {
            let orig = params[l][k];
            params[l][k] = orig + eps;
            let up = reference_loss(&input, &specs, &params, x.data(), labels);
            params[l][k] = orig - eps;
            let down = reference_loss(&input, &specs, &params, x.data(), labels);
            params[l][k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.layers[l].values()[k] as f64;
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

/// Overwrites every parameter (biases included) with uniform noise.
pub fn randomize(model: &mut Model, seed: u64, scale: f32) {
    let mut r = rng(seed);
    for p in model.params_mut() {
        for v in p.iter_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
}

pub fn random_batch(shape: &[usize], classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng(seed);
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let labels = (0..shape[0]).map(|_| r.random_range(0..classes)).collect();
    (Tensor::new(shape.to_vec(), data).unwrap(), labels)
}
