//! Forward and backward kernels for the dense ops.
//!
//! Each output element is written by exactly one task and accumulated in a
//! fixed loop order, so threaded and sequential runs agree to the bit.

use crate::par;

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn work(&self) -> usize {
        self.n * self.out_c * self.out_h * self.out_w * self.in_c * self.k * self.k
    }
}

impl ConvGeom {
    /// Rows of the unfolded input: one per `(ic, ky, kx)`.
    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output positions `o` along an axis of length `len` for which
    /// `o * stride + k_off - pad` lands inside the input.
    fn valid(&self, k_off: usize, len: usize, out_len: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = self.pad.saturating_sub(k_off).div_ceil(s);
        let hi = if len + self.pad > k_off {
            ((len - 1 + self.pad - k_off) / s + 1).min(out_len)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

/// Unfolds image `n` of `x` into `(patch, out_plane)` rows, zero where the
/// window overhangs the border.
fn im2col(g: &ConvGeom, x: &[f64], n: usize) -> Vec<f64> {
    let plane = g.out_plane();
    let mut col = vec![0.0; g.patch() * plane];
    for ic in 0..g.in_c {
        let xplane = &x[(n * g.in_c + ic) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.k {
            let oys = g.valid(ky, g.h, g.out_h);
            for kx in 0..g.k {
                let oxs = g.valid(kx, g.w, g.out_w);
                let row = &mut col[((ic * g.k + ky) * g.k + kx) * plane..][..plane];
                for oy in oys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let xrow = &xplane[iy * g.w..][..g.w];
                    let dst = &mut row[oy * g.out_w..][..g.out_w];
                    for ox in oxs.clone() {
                        dst[ox] = xrow[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
    col
}

fn im2col_all(g: &ConvGeom, x: &[f64]) -> Vec<Vec<f64>> {
    par::map_range(g.n, |n| im2col(g, x, n))
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let patch = g.patch();
    let cols = im2col_all(g, x);
    let mut out = vec![0.0; g.n * g.out_c * plane];
    par::for_each_chunk(&mut out, plane, g.work(), |idx, dst| {
        let (n, oc) = (idx / g.out_c, idx % g.out_c);
        dst.fill(bias[oc]);
        let col = &cols[n];
        for (p, &wv) in wt[oc * patch..(oc + 1) * patch].iter().enumerate() {
            axpy(dst, wv, &col[p * plane..(p + 1) * plane]);
        }
    });
    out
}

/// Gradient with respect to the input.
pub fn conv2d_backward_input(g: &ConvGeom, dy: &[f64], wt: &[f64]) -> Vec<f64> {
    let plane = g.h * g.w;
    let oplane = g.out_plane();
    let patch = g.patch();
    let mut dx = vec![0.0; g.n * g.in_c * plane];
    par::for_each_chunk(&mut dx, plane, g.work(), |idx, dst| {
        let (n, ic) = (idx / g.in_c, idx % g.in_c);
        let mut dcol = vec![0.0; oplane];
        for ky in 0..g.k {
            let oys = g.valid(ky, g.h, g.out_h);
            for kx in 0..g.k {
                let r = (ic * g.k + ky) * g.k + kx;
                dcol.fill(0.0);
                for oc in 0..g.out_c {
                    let dyp = &dy[(n * g.out_c + oc) * oplane..][..oplane];
                    axpy(&mut dcol, wt[oc * patch + r], dyp);
                }
                let oxs = g.valid(kx, g.w, g.out_w);
                for oy in oys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut dst[iy * g.w..][..g.w];
                    let src = &dcol[oy * g.out_w..][..g.out_w];
                    for ox in oxs.clone() {
                        drow[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    });
    dx
}

/// Gradients with respect to the weights and bias.
pub fn conv2d_backward_params(g: &ConvGeom, dy: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let patch = g.patch();
    let oplane = g.out_plane();
    // unfolded input transposed to (out_plane, patch) so each update is contiguous
    let cols_t: Vec<Vec<f64>> = im2col_all(g, x)
        .into_iter()
        .map(|col| {
            let mut t = vec![0.0; col.len()];
            for p in 0..patch {
                for s in 0..oplane {
                    t[s * patch + p] = col[p * oplane + s];
                }
            }
            t
        })
        .collect();
    let mut dw = vec![0.0; g.out_c * patch];
    par::for_each_chunk(&mut dw, patch, g.work(), |oc, dst| {
        for (n, ct) in cols_t.iter().enumerate() {
            let dyp = &dy[(n * g.out_c + oc) * oplane..][..oplane];
            for (s, &d) in dyp.iter().enumerate() {
                axpy(dst, d, &ct[s * patch..(s + 1) * patch]);
            }
        }
    });
    let mut db = vec![0.0; g.out_c];
    for (oc, d) in db.iter_mut().enumerate() {
        for n in 0..g.n {
            let base = (n * g.out_c + oc) * oplane;
            *d += dy[base..base + oplane].iter().sum::<f64>();
        }
    }
    (dw, db)
}

/// `y += a * x`.
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// `(m, k) x (k, n) -> (m, n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_chunk(&mut out, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `dy (m, n) x b^T -> (m, k)`.
pub fn matmul_grad_a(dy: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    par::for_each_chunk(&mut da, k, m * k * n, |i, row| {
        let dyrow = &dy[i * n..(i + 1) * n];
        for (p, d) in row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *d = dyrow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    da
}

/// `a^T x dy -> (k, n)`.
pub fn matmul_grad_b(dy: &[f64], a: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    par::for_each_chunk(&mut db, n, m * k * n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            let dyrow = &dy[i * n..(i + 1) * n];
            for (o, &d) in row.iter_mut().zip(dyrow) {
                *o += av * d;
            }
        }
    });
    db
}
