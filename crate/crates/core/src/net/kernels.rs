//! Dense NCHW kernels for the segmentation network.
//!
//! Convolutions are lowered to matrix products over unfolded patches. Work is
//! split into fixed pixel ranges whose partial results are combined in a
//! fixed order, so parallel and sequential builds agree bitwise.

use crate::par;

/// Pixels per convolution task.
const PIXEL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Rows of the unfolded patch matrix.
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Pixel ranges covering one plane.
    fn chunks(&self) -> Vec<(usize, usize)> {
        let hw = self.hw();
        (0..hw.div_ceil(PIXEL_CHUNK))
            .map(|i| (i * PIXEL_CHUNK, ((i + 1) * PIXEL_CHUNK).min(hw)))
            .collect()
    }
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched is `row * stride + col * stride` within the
    // stated extents; callers pass slices that cover those extents and `c` is
    // a dense row-major `m x n` buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Valid destination columns `[x0, x1)` for a horizontal source shift `dx`.
fn valid_cols(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
    (x0.min(x1), x1)
}

/// Unfolds one `[cin, h, w]` image into `[cin*k*k, hw]` zero-padded patches.
fn im2col(g: ConvGeom, x: &[f64]) -> Vec<f64> {
    let hw = g.hw();
    let pad = g.pad();
    let mut col = vec![0.0; g.patch() * hw];
    par::for_each_chunk(&mut col, hw, |r, row| {
        let ic = r / (g.k * g.k);
        let (dy, dx) = ((r / g.k) % g.k, r % g.k);
        let (dy, dx) = (dy as isize - pad, dx as isize - pad);
        let src = &x[ic * hw..(ic + 1) * hw];
        let (x0, x1) = valid_cols(g.w, dx);
        for y in 0..g.h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= g.h as isize || x0 == x1 {
                continue;
            }
            let s0 = sy as usize * g.w;
            let (sx0, sx1) = ((x0 as isize + dx) as usize, (x1 as isize + dx) as usize);
            row[y * g.w + x0..y * g.w + x1].copy_from_slice(&src[s0 + sx0..s0 + sx1]);
        }
    });
    col
}

/// Folds `[cin*k*k, hw]` patch gradients back onto a `[cin, h, w]` image.
fn col2im(g: ConvGeom, col: &[f64], out: &mut [f64]) {
    let hw = g.hw();
    let pad = g.pad();
    let kk = g.k * g.k;
    par::for_each_chunk(out, hw, |ic, dst| {
        for t in 0..kk {
            let (dy, dx) = ((t / g.k) as isize - pad, (t % g.k) as isize - pad);
            let row = &col[(ic * kk + t) * hw..(ic * kk + t + 1) * hw];
            let (x0, x1) = valid_cols(g.w, dx);
            // Patch entry (y, x) read source pixel (y + dy, x + dx).
            for y in 0..g.h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= g.h as isize || x0 == x1 {
                    continue;
                }
                let s0 = sy as usize * g.w;
                let (sx0, sx1) = ((x0 as isize + dx) as usize, (x1 as isize + dx) as usize);
                for (d, v) in dst[s0 + sx0..s0 + sx1].iter_mut().zip(&row[y * g.w + x0..y * g.w + x1]) {
                    *d += v;
                }
            }
        }
    });
}

/// Same-padded stride-1 convolution; weights are `[cout, cin, k, k]`.
pub fn conv_forward(g: ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = g.hw();
    let pk = g.patch();
    let mut out = vec![0.0; g.batch * g.cout * hw];
    let chunks = g.chunks();
    for b in 0..g.batch {
        let xb = &x[b * g.cin * hw..(b + 1) * g.cin * hw];
        let col = if g.k == 1 { xb.to_vec() } else { im2col(g, xb) };
        let parts = par::map_range(chunks.len(), |i| {
            let (p0, p1) = chunks[i];
            let n = p1 - p0;
            let mut c = vec![0.0; g.cout * n];
            for (oc, row) in c.chunks_mut(n).enumerate() {
                row.fill(bias[oc]);
            }
            gemm(g.cout, pk, n, (weight, pk as isize, 1), (&col[p0..], hw as isize, 1), 1.0, &mut c);
            c
        });
        let ob = &mut out[b * g.cout * hw..(b + 1) * g.cout * hw];
        for (&(p0, p1), part) in chunks.iter().zip(&parts) {
            let n = p1 - p0;
            for oc in 0..g.cout {
                ob[oc * hw + p0..oc * hw + p1].copy_from_slice(&part[oc * n..(oc + 1) * n]);
            }
        }
    }
    out
}

/// Gradient of a convolution with respect to its input.
pub fn conv_backward_input(g: ConvGeom, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let hw = g.hw();
    let pk = g.patch();
    let mut gin = vec![0.0; g.batch * g.cin * hw];
    let chunks = g.chunks();
    for b in 0..g.batch {
        let gb = &grad_out[b * g.cout * hw..(b + 1) * g.cout * hw];
        let parts = par::map_range(chunks.len(), |i| {
            let (p0, p1) = chunks[i];
            let n = p1 - p0;
            let mut c = vec![0.0; pk * n];
            gemm(pk, g.cout, n, (weight, 1, pk as isize), (&gb[p0..], hw as isize, 1), 0.0, &mut c);
            c
        });
        let mut col = vec![0.0; pk * hw];
        for (&(p0, p1), part) in chunks.iter().zip(&parts) {
            let n = p1 - p0;
            for r in 0..pk {
                col[r * hw + p0..r * hw + p1].copy_from_slice(&part[r * n..(r + 1) * n]);
            }
        }
        let dst = &mut gin[b * g.cin * hw..(b + 1) * g.cin * hw];
        if g.k == 1 {
            dst.copy_from_slice(&col);
        } else {
            col2im(g, &col, dst);
        }
    }
    gin
}

/// Gradients of a convolution's weights and biases.
pub fn conv_backward_params(g: ConvGeom, x: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hw = g.hw();
    let pk = g.patch();
    let chunks = g.chunks();
    let mut gw = vec![0.0; g.cout * pk];
    for b in 0..g.batch {
        let xb = &x[b * g.cin * hw..(b + 1) * g.cin * hw];
        let gb = &grad_out[b * g.cout * hw..(b + 1) * g.cout * hw];
        let col = if g.k == 1 { xb.to_vec() } else { im2col(g, xb) };
        let parts = par::map_range(chunks.len(), |i| {
            let (p0, p1) = chunks[i];
            let mut c = vec![0.0; g.cout * pk];
            // grad_out[:, p0..p1] * col[:, p0..p1]^T
            gemm(g.cout, p1 - p0, pk, (&gb[p0..], hw as isize, 1), (&col[p0..], 1, hw as isize), 0.0, &mut c);
            c
        });
        for part in &parts {
            for (acc, v) in gw.iter_mut().zip(part) {
                *acc += v;
            }
        }
    }
    let gb = (0..g.cout)
        .map(|oc| {
            (0..g.batch)
                .map(|b| grad_out[(b * g.cout + oc) * hw..(b * g.cout + oc + 1) * hw].iter().sum::<f64>())
                .sum()
        })
        .collect();
    (gw, gb)
}

/// 2x2 max pooling over `planes` planes of size `h x w`; returns the pooled
/// values and the flat source index of each maximum (first wins on ties).
pub fn maxpool_forward(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = (2 * y + dy) * w + 2 * xx + dx;
                    if src[i] > best {
                        best = src[i];
                        at = i;
                    }
                }
                out[p * oh * ow + y * ow + xx] = best;
                arg[p * oh * ow + y * ow + xx] = (p * h * w + at) as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(grad_out: &[f64], arg: &[u32], in_len: usize) -> Vec<f64> {
    let mut gin = vec![0.0; in_len];
    for (g, &i) in grad_out.iter().zip(arg) {
        gin[i as usize] += g;
    }
    gin
}

/// Nearest-neighbour x2 upsampling of `h x w` planes.
pub fn upsample_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                out[p * oh * ow + y * ow + xx] = x[p * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Gradient of [`upsample_forward`]; `h x w` is the input plane size.
pub fn upsample_backward(grad_out: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gin = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                gin[p * h * w + (y / 2) * w + xx / 2] += grad_out[p * oh * ow + y * ow + xx];
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution.
    fn naive_conv(g: ConvGeom, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
        let pad = (g.k / 2) as isize;
        let mut out = vec![0.0; g.batch * g.cout * g.h * g.w];
        for n in 0..g.batch {
            for oc in 0..g.cout {
                for y in 0..g.h {
                    for xx in 0..g.w {
                        let mut s = b[oc];
                        for ic in 0..g.cin {
                            for kh in 0..g.k {
                                for kw in 0..g.k {
                                    let iy = y as isize + kh as isize - pad;
                                    let ix = xx as isize + kw as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    s += wt[((oc * g.cin + ic) * g.k + kh) * g.k + kw]
                                        * x[((n * g.cin + ic) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        out[((n * g.cout + oc) * g.h + y) * g.w + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * k).sin() * 1.3).fract()).collect()
    }

    #[test]
    fn conv_matches_naive() {
        for k in [1, 3] {
            let g = ConvGeom { batch: 2, cin: 3, cout: 4, h: 5, w: 6, k };
            let x = seq(2 * 3 * 30, 0.37);
            let wt = seq(4 * 3 * k * k, 1.1);
            let b = seq(4, 2.3);
            let fast = conv_forward(g, &x, &wt, &b);
            let slow = naive_conv(g, &x, &wt, &b);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_adjoint_identity() {
        // <conv(x), y> with zero bias equals <x, conv_T(y)> and sum of weight * grad.
        let g = ConvGeom { batch: 1, cin: 2, cout: 3, h: 4, w: 5, k: 3 };
        let x = seq(40, 0.71);
        let wt = seq(54, 0.33);
        let y = seq(60, 0.91);
        let fx = conv_forward(g, &x, &wt, &[0.0; 3]);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let gx = conv_backward_input(g, &y, &wt);
        let rhs: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let (gw, _) = conv_backward_params(g, &x, &y);
        let rhs_w: f64 = gw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample() {
        let x = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 7.0];
        let (out, arg) = maxpool_forward(&x, 1, 2, 4);
        assert_eq!(out, vec![5.0, 7.0]);
        assert_eq!(arg, vec![1, 6]);
        let g = maxpool_backward(&[1.0, 2.0], &arg, 8);
        assert_eq!(g, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let up = upsample_forward(&[1.0, 2.0], 1, 1, 2);
        assert_eq!(up, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(upsample_backward(&up, 1, 1, 2), vec![4.0, 8.0]);
    }
}
