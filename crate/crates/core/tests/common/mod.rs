//! Dense reference implementations used as test oracles.
//!
//! Everything here works on plain row-major `Vec<f64>` with nested loops and
//! shares no code with the library kernels.

#![allow(dead_code)]

pub mod ap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smalldetr::graph::LAYERNORM_EPS;
use smalldetr::model::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use smalldetr::model::{Conv, ParamStore};
use smalldetr::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Relative difference with a unit floor on tiny magnitudes.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| if x == y { 0.0 } else { rel(x, y) }).fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct cross-correlation.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [oc, ic, k, k2] = w.shape().try_into().unwrap();
    assert_eq!((ic, k), (c, k2));
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * oc * oh * ow];
    for ni in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = b[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.data()[((o * c + ci) * k + ky) * k + kx]
                                    * x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((ni * oc + o) * oh + y) * ow + xo] = s;
                }
            }
        }
    }
    Tensor::new(&[n, oc, oh, ow], out).unwrap()
}

pub fn conv_params(store: &ParamStore, conv: &Conv) -> (Tensor, Vec<f64>) {
    (store.get(conv.w).clone(), store.get(conv.b).data().to_vec())
}

pub fn apply_conv(store: &ParamStore, conv: &Conv, x: &Tensor) -> Tensor {
    let (w, b) = conv_params(store, conv);
    conv2d(x, &w, &b, conv.stride, conv.pad)
}

pub fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

pub fn upsample2(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape().try_into().unwrap();
    let mut out = vec![0.0; n * c * 4 * h * w];
    for p in 0..n * c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                out[(p * 2 * h + y) * 2 * w + x] = t.data()[(p * h + y / 2) * w + x / 2];
            }
        }
    }
    Tensor::new(&[n, c, 2 * h, 2 * w], out).unwrap()
}

/// Row-major matrix with explicit dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matmul(&self, o: &Mat) -> Mat {
        assert_eq!(self.cols, o.rows);
        let mut d = vec![0.0; self.rows * o.cols];
        for i in 0..self.rows {
            for j in 0..o.cols {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.at(i, k) * o.at(k, j);
                }
                d[i * o.cols + j] = s;
            }
        }
        Mat::new(self.rows, o.cols, d)
    }

    pub fn add(&self, o: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        Mat::new(self.rows, self.cols, self.data.iter().zip(&o.data).map(|(a, b)| a + b).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cols_range(&self, lo: usize, hi: usize) -> Mat {
        let mut d = Vec::new();
        for r in 0..self.rows {
            d.extend_from_slice(&self.data[r * self.cols + lo..r * self.cols + hi]);
        }
        Mat::new(self.rows, hi - lo, d)
    }

    pub fn transpose(&self) -> Mat {
        let mut d = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                d[c * self.rows + r] = self.at(r, c);
            }
        }
        Mat::new(self.cols, self.rows, d)
    }

    pub fn hcat(parts: &[Mat]) -> Mat {
        let rows = parts[0].rows;
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut d = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                d.extend_from_slice(&p.data[r * p.cols..(r + 1) * p.cols]);
            }
        }
        Mat::new(rows, cols, d)
    }
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut d = Vec::with_capacity(m.data.len());
    for r in 0..m.rows {
        let row = &m.data[r * m.cols..(r + 1) * m.cols];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        d.extend(e.iter().map(|v| v / s));
    }
    Mat::new(m.rows, m.cols, d)
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = store.get(l.w);
    let b = store.get(l.b).data();
    let wm = Mat::new(w.shape()[0], w.shape()[1], w.data().to_vec());
    let mut y = x.matmul(&wm);
    for r in 0..y.rows {
        for c in 0..y.cols {
            y.data[r * y.cols + c] += b[c];
        }
    }
    y
}

pub fn layernorm(store: &ParamStore, ln: &LayerNorm, x: &Mat) -> Mat {
    let g = store.get(ln.gamma).data();
    let b = store.get(ln.beta).data();
    let mut d = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        let row = &x.data[r * x.cols..(r + 1) * x.cols];
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.cols as f64;
        for (j, v) in row.iter().enumerate() {
            d.push((v - mean) / (var + LAYERNORM_EPS).sqrt() * g[j] + b[j]);
        }
    }
    Mat::new(x.rows, x.cols, d)
}

pub fn ffn(store: &ParamStore, f: &FeedForward, x: &Mat) -> Mat {
    let h = linear(store, &f.fc1, x).map(silu);
    linear(store, &f.fc2, &h)
}

/// Multi-head attention of one sequence, head by head.
pub fn attention(store: &ParamStore, m: &MultiHeadAttention, q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let (qp, kp, vp) = (linear(store, &m.q, q), linear(store, &m.k, k), linear(store, &m.v, v));
    let dh = m.dim / m.heads;
    let heads: Vec<Mat> = (0..m.heads)
        .map(|h| {
            let (qh, kh, vh) = (
                qp.cols_range(h * dh, (h + 1) * dh),
                kp.cols_range(h * dh, (h + 1) * dh),
                vp.cols_range(h * dh, (h + 1) * dh),
            );
            let scores = qh.matmul(&kh.transpose()).map(|s| s / (dh as f64).sqrt());
            softmax_rows(&scores).matmul(&vh)
        })
        .collect();
    linear(store, &m.o, &Mat::hcat(&heads))
}

/// `(1, C, H, W)` map to `(H*W, C)` tokens.
pub fn tokens(t: &Tensor) -> Mat {
    let [n, c, h, w] = t.shape().try_into().unwrap();
    assert_eq!(n, 1);
    let mut d = vec![0.0; h * w * c];
    for ci in 0..c {
        for p in 0..h * w {
            d[p * c + ci] = t.data()[ci * h * w + p];
        }
    }
    Mat::new(h * w, c, d)
}

/// Positional table by direct evaluation of
/// `[sin(x w_i), cos(x w_i), sin(y w_i), cos(y w_i)]`, `w_i = 10000^(-4i/d)`.
pub fn positions(h: usize, w: usize, d: usize) -> Mat {
    let q = d / 4;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for part in 0..4 {
                for i in 0..q {
                    let omega = 10000f64.powf(-(i as f64) / q as f64);
                    let pos = if part < 2 { x as f64 } else { y as f64 };
                    out.push(if part % 2 == 0 { (pos * omega).sin() } else { (pos * omega).cos() });
                }
            }
        }
    }
    Mat::new(h * w, d, out)
}

/// Minimum total cost over every injective assignment of `min(rows, cols)`
/// pairs, by exhaustive search.
pub fn min_assignment(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(c: &[f64], cols: usize, rows_left: usize, row: usize, used: &mut [bool], left: usize, acc: f64, best: &mut f64) {
        if left == 0 {
            *best = best.min(acc);
            return;
        }
        if rows_left < left {
            return;
        }
        // a row may stay unmatched when rows outnumber columns
        if rows_left > left {
            go(c, cols, rows_left - 1, row + 1, used, left, acc, best);
        }
        for col in 0..cols {
            if !used[col] {
                used[col] = true;
                go(c, cols, rows_left - 1, row + 1, used, left - 1, acc + c[row * cols + col], best);
                used[col] = false;
            }
        }
    }
    let k = rows.min(cols);
    if k == 0 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    go(cost, cols, rows, 0, &mut vec![false; cols], k, 0.0, &mut best);
    best
}

/// `Y[n,c] = sum_{i,j} A[n,i,j] * X[n,c,i,j]` by nested loops.
pub fn pooled_double_sum(x: &Tensor, a: &Tensor) -> Vec<f64> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let mut out = Vec::with_capacity(n * c);
    for ni in 0..n {
        for ci in 0..c {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += a.data()[(ni * h + i) * w + j] * x.data()[((ni * c + ci) * h + i) * w + j];
                }
            }
            out.push(s);
        }
    }
    out
}
