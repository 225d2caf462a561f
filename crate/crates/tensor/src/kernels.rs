//! Raw numeric kernels over row-major slices.
//!
//! The three convolution kernels are the partial derivatives of the
//! trilinear form `B(x, k, g) = sum g[co,p] * k[co,ci,o] * x[ci,p+o-pad]`
//! with respect to `g`, `x` and `k`, which keeps them closed under
//! differentiation.

/// Spatial geometry of a stride-1 zero-padded 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub ks: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.ks
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.ks
    }

    /// Output rows `oy` for which `oy + ky - pad` is inside the input.
    #[inline]
    fn range(&self, kk: usize, extent: usize, out: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kk);
        let hi = (extent + self.pad).saturating_sub(kk).min(out);
        (lo, hi.max(lo))
    }
}

/// Unrolled patches: `col[(ci*ks+ky)*ks+kx, oy*ow+ox] = x[ci, oy+ky-pad, ox+kx-pad]`,
/// zero outside the input.
fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut col = vec![0.0; g.cin * g.ks * g.ks * plane];
    for ci in 0..g.cin {
        let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.ks {
            let (y0, y1) = g.range(ky, g.h, oh);
            for kx in 0..g.ks {
                let (x0, x1) = g.range(kx, g.w, ow);
                let row = &mut col[((ci * g.ks + ky) * g.ks + kx) * plane..][..plane];
                for oy in y0..y1 {
                    let iy = oy + ky - g.pad;
                    row[oy * ow + x0..oy * ow + x1]
                        .copy_from_slice(&x_c[iy * g.w + x0 + kx - g.pad..iy * g.w + x1 + kx - g.pad]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto a `[cin, h, w]` buffer.
fn col2im(col: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let x_c = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.ks {
            let (y0, y1) = g.range(ky, g.h, oh);
            for kx in 0..g.ks {
                let (x0, x1) = g.range(kx, g.w, ow);
                let row = &col[((ci * g.ks + ky) * g.ks + kx) * plane..][..plane];
                for oy in y0..y1 {
                    let iy = oy + ky - g.pad;
                    let dst = &mut x_c[iy * g.w + x0 + kx - g.pad..iy * g.w + x1 + kx - g.pad];
                    for (d, s) in dst.iter_mut().zip(&row[oy * ow + x0..oy * ow + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with eight independent partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (p, q) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += p[i] * q[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(p, q)| p * q).sum();
    acc.iter().sum::<f64>() + tail
}

/// `out[co, oy, ox] = sum_{ci,ky,kx} k[co,ci,ky,kx] * x[ci, oy+ky-pad, ox+kx-pad]`.
pub fn conv2d(x: &[f64], k: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let taps = g.cin * g.ks * g.ks;
    let col = im2col(x, g);
    let mut out = vec![0.0; g.cout * plane];
    for (out_c, k_c) in out.chunks_exact_mut(plane).zip(k.chunks_exact(taps)) {
        for (r, &wv) in k_c.iter().enumerate() {
            if wv != 0.0 {
                axpy(out_c, wv, &col[r * plane..(r + 1) * plane]);
            }
        }
    }
    out
}

/// Adjoint of [`conv2d`] in its input: returns a `[cin, h, w]` buffer.
pub fn conv2d_input_grad(gout: &[f64], k: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let taps = g.cin * g.ks * g.ks;
    let mut gcol = vec![0.0; taps * plane];
    for (g_c, k_c) in gout.chunks_exact(plane).zip(k.chunks_exact(taps)) {
        for (r, &wv) in k_c.iter().enumerate() {
            if wv != 0.0 {
                axpy(&mut gcol[r * plane..(r + 1) * plane], wv, g_c);
            }
        }
    }
    col2im(&gcol, g)
}

/// Adjoint of [`conv2d`] in its kernel: returns a `[cout, cin, ks, ks]` buffer.
pub fn conv2d_kernel_grad(x: &[f64], gout: &[f64], g: ConvGeom) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let taps = g.cin * g.ks * g.ks;
    let col = im2col(x, g);
    let mut gk = vec![0.0; g.cout * taps];
    for (gk_c, g_c) in gk.chunks_exact_mut(taps).zip(gout.chunks_exact(plane)) {
        for (r, v) in gk_c.iter_mut().enumerate() {
            *v = dot(g_c, &col[r * plane..(r + 1) * plane]);
        }
    }
    gk
}

/// `y[i] = sum_j w[i, j] * x[j]` for `w` of shape `[m, n]`.
pub fn matvec(w: &[f64], x: &[f64], m: usize, n: usize) -> Vec<f64> {
    (0..m)
        .map(|i| w[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `y[j] = sum_i w[i, j] * g[i]` for `w` of shape `[m, n]`.
pub fn mat_t_vec(w: &[f64], g: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..m {
        let gi = g[i];
        if gi == 0.0 {
            continue;
        }
        for (yj, wij) in y.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *yj += gi * wij;
        }
    }
    y
}

/// `o[i, j] = a[i] * b[j]`.
pub fn outer(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut o = Vec::with_capacity(a.len() * b.len());
    for &ai in a {
        o.extend(b.iter().map(|bj| ai * bj));
    }
    o
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-log softmax(z)[label]` via log-sum-exp with max subtraction.
pub fn cross_entropy(z: &[f64], label: usize) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// Per-channel sum of a `[c, ...]` buffer with `plane` elements per channel.
pub fn channel_sum(y: &[f64], c: usize, plane: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| y[ch * plane..(ch + 1) * plane].iter().sum())
        .collect()
}

pub fn channel_broadcast(b: &[f64], plane: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(b.len() * plane);
    for &v in b {
        out.extend(std::iter::repeat(v).take(plane));
    }
    out
}
