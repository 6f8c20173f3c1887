//! Raw forward/backward kernels on flat slices.
//!
//! Convolution is im2col + sgemm, one sample at a time. Per-sample work may
//! run on the rayon pool; every cross-sample reduction is summed in sample
//! order afterwards so results do not depend on the thread count.

use rayon::prelude::*;

/// Output extent of a convolution along one axis, or `None` if it is not a
/// positive integer.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel || (padded - kernel) % stride != 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.cout * self.p()
    }
}

/// `c[m×n] = a[m×k] · b[k×n]` with explicit strides, overwriting `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes slices covering the strided extents; every
    // call site below derives the strides from the same dimensions.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` lies
/// inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = (g.pad.saturating_sub(kx)).div_ceil(g.stride).min(g.wo);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col(g: &ConvGeom, input: &[f32], cols: &mut [f32]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f32], dinput: &mut [f32]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dinput[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo + lo..row + oy * g.wo + hi];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        dst[ix0..ix0 + src.len()].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    } else {
                        for (j, s) in src.iter().enumerate() {
                            dst[ix0 + j * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![0.0f32; g.n * g.out_len()];
    out.par_chunks_mut(g.out_len()).enumerate().for_each_init(
        || vec![0.0f32; k * p],
        |cols, (i, o)| {
            im2col(g, &input[i * g.in_len()..(i + 1) * g.in_len()], cols);
            gemm(g.cout, k, p, weight, k as isize, 1, cols, p as isize, 1, o);
            for (co, row) in o.chunks_mut(p).enumerate() {
                let b = bias[co];
                row.iter_mut().for_each(|v| *v += b);
            }
        },
    );
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

/// Gradients of a convolution. Columns for the weight gradient are rebuilt
/// from `input` one sample at a time rather than stored by the forward pass.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    dout: &[f32],
    need_input: bool,
    need_params: bool,
) -> ConvGrads {
    let (k, p) = (g.k(), g.p());
    let input_grad = need_input.then(|| {
        let mut din = vec![0.0f32; g.n * g.in_len()];
        din.par_chunks_mut(g.in_len()).enumerate().for_each_init(
            || vec![0.0f32; k * p],
            |dcols, (i, d)| {
                let dy = &dout[i * g.out_len()..(i + 1) * g.out_len()];
                // W^T [k×cout] · dy [cout×p]
                gemm(k, g.cout, p, weight, 1, k as isize, dy, p as isize, 1, dcols);
                col2im_add(g, dcols, d);
            },
        );
        din
    });
    let (weight_grad, bias_grad) = if need_params {
        let partials: Vec<Vec<f32>> = (0..g.n)
            .into_par_iter()
            .map_init(
                || vec![0.0f32; k * p],
                |cols, i| {
                    im2col(g, &input[i * g.in_len()..(i + 1) * g.in_len()], cols);
                    let dy = &dout[i * g.out_len()..(i + 1) * g.out_len()];
                    let mut dw = vec![0.0f32; g.cout * k];
                    // dy [cout×p] · cols^T [p×k]
                    gemm(g.cout, p, k, dy, p as isize, 1, cols, 1, p as isize, &mut dw);
                    dw
                },
            )
            .collect();
        let mut dw = vec![0.0f32; g.cout * k];
        for part in &partials {
            dw.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        let mut db = vec![0.0f32; g.cout];
        for i in 0..g.n {
            let dy = &dout[i * g.out_len()..(i + 1) * g.out_len()];
            for (co, row) in dy.chunks(p).enumerate() {
                db[co] += row.iter().sum::<f32>();
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// 2×2, stride-2 max pooling over `[planes, h, w]`. Returns values and the
/// flat source index of each maximum (first maximum on ties).
pub(crate) fn maxpool2_forward(planes: usize, h: usize, w: usize, input: &[f32]) -> (Vec<f32>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; planes * ho * wo];
    let mut idx = vec![0u32; planes * ho * wo];
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[j] > input[best] {
                        best = j;
                    }
                }
                let o = pl * ho * wo + oy * wo + ox;
                out[o] = input[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

/// `y = x · W^T + b` with `x: [n, fin]`, `W: [fout, fin]`.
pub(crate) fn linear_forward(n: usize, fin: usize, fout: usize, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    let mut y = vec![0.0f32; n * fout];
    gemm(n, fin, fout, x, fin as isize, 1, w, 1, fin as isize, &mut y);
    for row in y.chunks_mut(fout) {
        row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
    }
    y
}

/// Mean softmax cross-entropy and the per-row softmax probabilities.
pub(crate) fn softmax_ce_forward(n: usize, k: usize, logits: &[f32], labels: &[usize]) -> (f32, Vec<f32>) {
    let mut probs = vec![0.0f32; n * k];
    let mut total = 0.0f64;
    for i in 0..n {
        let z = &logits[i * k..(i + 1) * k];
        let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let denom: f64 = z.iter().map(|&v| ((v - m) as f64).exp()).sum();
        let lse = m as f64 + denom.ln();
        total += lse - z[labels[i]] as f64;
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(z) {
            *p = (((v - m) as f64).exp() / denom) as f32;
        }
    }
    ((total / n as f64) as f32, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent() {
        assert_eq!(conv_output_extent(32, 5, 1, 2), Some(32));
        assert_eq!(conv_output_extent(8, 3, 2, 0), None);
        assert_eq!(conv_output_extent(2, 3, 1, 0), None);
        assert_eq!(conv_output_extent(9, 3, 2, 0), Some(4));
    }

    #[test]
    fn maxpool_picks_first_max() {
        let x = [1.0, 1.0, 0.0, 0.0];
        let (y, idx) = maxpool2_forward(1, 2, 2, &x);
        assert_eq!(y, vec![1.0]);
        assert_eq!(idx, vec![0]);
    }
}
