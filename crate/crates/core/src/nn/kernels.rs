//! Loop kernels. Every reduction runs in ascending index order of the
//! summed dimension so results are reproducible bit for bit.

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// The innermost loop walks a row of `b` and `c`, so each `c[i][j]`
/// accumulates `a[i][p]·b[p][j]` for `p = 0, 1, …, k-1` in order.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&a_ip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if a_ip == 0.0 {
                continue;
            }
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `dst[cols×rows] = src[rows×cols]ᵀ`.
pub fn transpose(rows: usize, cols: usize, src: &[f32], dst: &mut [f32]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for (r, row) in src.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}

/// Geometry of a square-kernel valid convolution over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    /// Rows of the column matrix: `channels · kernel²`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix: output pixels.
    pub fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one sample `[C][H][W]` into `cols[(c·K + kr)·K + kc][oh·OW + ow]`.
pub fn im2col(g: &ConvGeometry, input: &[f32], cols: &mut [f32]) {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let p = oh * ow;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kr in 0..k {
            for kc in 0..k {
                let row = &mut cols[((c * k + kr) * k + kc) * p..][..p];
                for y in 0..oh {
                    let src = &plane[(y * g.stride + kr) * g.width + kc..];
                    for x in 0..ow {
                        row[y * ow + x] = src[x * g.stride];
                    }
                }
            }
        }
    }
}

/// Adds the column-matrix gradient back onto the sample gradient `[C][H][W]`.
pub fn col2im_acc(g: &ConvGeometry, cols: &[f32], input_grad: &mut [f32]) {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let p = oh * ow;
    for c in 0..g.channels {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kr in 0..k {
            for kc in 0..k {
                let row = &cols[((c * k + kr) * k + kc) * p..][..p];
                for y in 0..oh {
                    let base = (y * g.stride + kr) * g.width + kc;
                    for x in 0..ow {
                        plane[base + x * g.stride] += row[y * ow + x];
                    }
                }
            }
        }
    }
}
