//! Batched forward/backward kernels for each layer kind. Tensors carry a
//! leading batch dimension; per-sample layouts are row-major.

use super::kernels::{col2im_acc, gemm_acc, im2col, transpose, ConvGeometry};

/// `y[B×out] = x[B×in] · Wᵀ + bias`, with `params = W[out×in] ++ bias[out]`.
pub fn fc_forward(
    params: &[f32],
    inputs: usize,
    outputs: usize,
    batch: usize,
    x: &[f32],
) -> Vec<f32> {
    let (w, bias) = params.split_at(inputs * outputs);
    let mut xt = vec![0.0; batch * inputs];
    transpose(batch, inputs, x, &mut xt);
    let mut yt = Vec::with_capacity(outputs * batch);
    for &b in bias {
        yt.extend(std::iter::repeat_n(b, batch));
    }
    gemm_acc(outputs, inputs, batch, w, &xt, &mut yt);
    let mut y = vec![0.0; batch * outputs];
    transpose(outputs, batch, &yt, &mut y);
    y
}

/// Returns `(dx, dparams)` for a fully-connected layer.
pub fn fc_backward(
    params: &[f32],
    inputs: usize,
    outputs: usize,
    batch: usize,
    x: &[f32],
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let w = &params[..inputs * outputs];
    let mut dyt = vec![0.0; outputs * batch];
    transpose(batch, outputs, dy, &mut dyt);

    let mut dparams = vec![0.0; params.len()];
    let (dw, db) = dparams.split_at_mut(inputs * outputs);
    gemm_acc(outputs, batch, inputs, &dyt, x, dw);
    for (o, row) in dyt.chunks_exact(batch).enumerate() {
        db[o] = row.iter().fold(0.0f32, |acc, v| acc + v);
    }

    let mut dx = vec![0.0; batch * inputs];
    gemm_acc(batch, outputs, inputs, dy, w, &mut dx);
    (dx, dparams)
}

/// Valid convolution; `params = W[out][C][K][K] ++ bias[out]`.
pub fn conv_forward(
    params: &[f32],
    g: &ConvGeometry,
    out_maps: usize,
    batch: usize,
    x: &[f32],
) -> Vec<f32> {
    let patch = g.patch_len();
    let pixels = g.out_pixels();
    let (w, bias) = params.split_at(out_maps * patch);
    let in_len = g.channels * g.height * g.width;
    let out_len = out_maps * pixels;

    let mut cols = vec![0.0; patch * pixels];
    let mut y = vec![0.0; batch * out_len];
    for (xs, ys) in x.chunks_exact(in_len).zip(y.chunks_exact_mut(out_len)) {
        im2col(g, xs, &mut cols);
        for (o, row) in ys.chunks_exact_mut(pixels).enumerate() {
            row.fill(bias[o]);
        }
        gemm_acc(out_maps, patch, pixels, w, &cols, ys);
    }
    y
}

pub fn conv_backward(
    params: &[f32],
    g: &ConvGeometry,
    out_maps: usize,
    batch: usize,
    x: &[f32],
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let patch = g.patch_len();
    let pixels = g.out_pixels();
    let w = &params[..out_maps * patch];
    let in_len = g.channels * g.height * g.width;
    let out_len = out_maps * pixels;

    let mut wt = vec![0.0; patch * out_maps];
    transpose(out_maps, patch, w, &mut wt);

    let mut dparams = vec![0.0; params.len()];
    let mut dx = vec![0.0; batch * in_len];
    let mut cols = vec![0.0; patch * pixels];
    let mut cols_t = vec![0.0; pixels * patch];
    let mut dcols = vec![0.0; patch * pixels];
    for ((xs, dys), dxs) in x
        .chunks_exact(in_len)
        .zip(dy.chunks_exact(out_len))
        .zip(dx.chunks_exact_mut(in_len))
    {
        im2col(g, xs, &mut cols);
        transpose(patch, pixels, &cols, &mut cols_t);
        let (dw, db) = dparams.split_at_mut(out_maps * patch);
        gemm_acc(out_maps, pixels, patch, dys, &cols_t, dw);
        for (o, row) in dys.chunks_exact(pixels).enumerate() {
            db[o] = row.iter().fold(db[o], |acc, v| acc + v);
        }
        dcols.fill(0.0);
        gemm_acc(patch, out_maps, pixels, &wt, dys, &mut dcols);
        col2im_acc(g, &dcols, dxs);
    }
    (dx, dparams)
}

pub fn relu_forward(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn relu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect()
}

/// 2×2 stride-2 max pooling over `[B][C][H][W]`; odd trailing rows/columns
/// are dropped. Returns the pooled values and, per output, the flat input
/// index of the winner (first maximum in row-major window order).
pub fn maxpool_forward(
    channels: usize,
    height: usize,
    width: usize,
    batch: usize,
    x: &[f32],
) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut y = Vec::with_capacity(batch * channels * oh * ow);
    let mut argmax = Vec::with_capacity(y.capacity());
    for plane_idx in 0..batch * channels {
        let base = plane_idx * height * width;
        for r in 0..oh {
            for c in 0..ow {
                let top = base + 2 * r * width + 2 * c;
                let candidates = [top, top + 1, top + width, top + width + 1];
                let mut best = candidates[0];
                for &i in &candidates[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    (y, argmax)
}

pub fn maxpool_backward(input_len: usize, argmax: &[u32], dy: &[f32]) -> Vec<f32> {
    let mut dx = vec![0.0; input_len];
    for (&i, &d) in argmax.iter().zip(dy) {
        dx[i as usize] += d;
    }
    dx
}

/// Row-wise softmax of `[B×classes]` logits.
pub fn softmax(classes: usize, logits: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        let start = out.len();
        let mut sum = 0.0f32;
        for &v in row {
            let e = (v - m).exp();
            sum += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= sum;
        }
    }
    out
}

/// Mean cross-entropy over the batch, computed as `logsumexp(z) - z[label]`.
pub fn xent_loss(classes: usize, logits: &[f32], labels: &[usize]) -> f32 {
    let mut total = 0.0f32;
    for (row, &label) in logits.chunks_exact(classes).zip(labels) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        let sum = row.iter().fold(0.0f32, |acc, &v| acc + (v - m).exp());
        total += sum.ln() + m - row[label];
    }
    total / labels.len() as f32
}

/// `(softmax - onehot) / B`.
pub fn xent_backward(classes: usize, probs: &[f32], labels: &[usize]) -> Vec<f32> {
    let scale = 1.0 / labels.len() as f32;
    let mut grad = probs.to_vec();
    for (row, &label) in grad.chunks_exact_mut(classes).zip(labels) {
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    grad
}

/// Index of the largest score per row, lowest index on ties.
pub fn argmax_rows(classes: usize, scores: &[f32]) -> Vec<usize> {
    scores
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
