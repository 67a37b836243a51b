//! Parameterized building blocks shared by the backbone, encoder and decoder.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::params::{Ctx, Init, ParamId};
use crate::tensor::Tensor;

/// Positional-encoding temperature.
pub const POS_TEMPERATURE: f64 = 10_000.0;

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(init: &mut Init, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Self {
            w: init.fan_in(&format!("{name}.weight"), &[out_c, in_c, k, k], in_c * k * k)?,
            b: init.zeros(&format!("{name}.bias"), &[out_c])?,
            stride,
            pad,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        ctx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// `x W + b` over the last axis, `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_d: usize, out_d: usize) -> Result<Self> {
        Ok(Self {
            w: init.fan_in(&format!("{name}.weight"), &[in_d, out_d], in_d)?,
            b: init.zeros(&format!("{name}.bias"), &[out_d])?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        ctx.g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.ones(&format!("{name}.gamma"), &[d])?,
            beta: init.zeros(&format!("{name}.beta"), &[d])?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.g.layernorm(x, g, b)
    }
}

/// Two linear layers with a SiLU between them.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, d: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), d, hidden)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, out)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.g.silu(h);
        self.fc2.forward(ctx, h)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(init, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(init, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(init, &format!("{name}.o"), dim, dim)?,
            heads,
            dim,
        })
    }

    /// `query (N,T,D)` attends over `key (N,S,D)` / `value (N,S,D)`.
    pub fn forward(&self, ctx: &mut Ctx, query: Var, key: Var, value: Var) -> Result<Var> {
        let (n, t) = batch_seq(ctx, query)?;
        let (kn, s) = batch_seq(ctx, key)?;
        if kn != n || batch_seq(ctx, value)? != (n, s) {
            return Err(Error::shape(
                "attention",
                format!(
                    "query {:?}, key {:?}, value {:?}",
                    ctx.g.shape(query),
                    ctx.g.shape(key),
                    ctx.g.shape(value)
                ),
            ));
        }
        let (h, dh) = (self.heads, self.dim / self.heads);
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, key)?;
        let v = self.v.forward(ctx, value)?;

        let q = ctx.g.reshape(q, &[n, t, h, dh])?;
        let q = ctx.g.permute(q, &[0, 2, 1, 3])?;
        let k = ctx.g.reshape(k, &[n, s, h, dh])?;
        let kt = ctx.g.permute(k, &[0, 2, 3, 1])?;
        let v = ctx.g.reshape(v, &[n, s, h, dh])?;
        let v = ctx.g.permute(v, &[0, 2, 1, 3])?;

        let scores = ctx.g.matmul(q, kt)?;
        let scores = ctx.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = ctx.g.softmax_lastdim(scores);
        let out = ctx.g.matmul(attn, v)?;
        let out = ctx.g.permute(out, &[0, 2, 1, 3])?;
        let out = ctx.g.reshape(out, &[n, t, self.dim])?;
        self.o.forward(ctx, out)
    }
}

fn batch_seq(ctx: &Ctx, x: Var) -> Result<(usize, usize)> {
    match ctx.g.shape(x) {
        &[n, t, _] => Ok((n, t)),
        s => Err(Error::shape("attention", format!("expected (N,T,D), got {s:?}"))),
    }
}

/// Sinusoidal 2-D position table of shape `(h*w, d)`, rows in row-major
/// `(y, x)` order.
///
/// Each row is `[sin(x w_i), cos(x w_i), sin(y w_i), cos(y w_i)]` with
/// `w_i = T^(-i/(d/4))` for `i < d/4`.
pub fn positional_encoding_2d(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional encoding width {d} must be a positive multiple of 4"
        )));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / POS_TEMPERATURE.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            data.extend(omega.iter().map(|o| (xf * o).sin()));
            data.extend(omega.iter().map(|o| (xf * o).cos()));
            data.extend(omega.iter().map(|o| (yf * o).sin()));
            data.extend(omega.iter().map(|o| (yf * o).cos()));
        }
    }
    Tensor::new(&[h * w, d], data)
}

/// `(N,C,H,W)` feature map to an `(N,H*W,C)` token sequence.
pub fn flatten_tokens(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let (n, c, h, w) = ctx.g.value(x).dims4("flatten_tokens")?;
    let x = ctx.g.reshape(x, &[n, c, h * w])?;
    ctx.g.permute(x, &[0, 2, 1])
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens(ctx: &mut Ctx, x: Var, h: usize, w: usize) -> Result<Var> {
    let &[n, t, c] = ctx.g.shape(x) else {
        return Err(Error::shape("unflatten_tokens", format!("expected (N,T,C), got {:?}", ctx.g.shape(x))));
    };
    if t != h * w {
        return Err(Error::shape("unflatten_tokens", format!("{t} tokens cannot form a {h}x{w} grid")));
    }
    let x = ctx.g.permute(x, &[0, 2, 1])?;
    ctx.g.reshape(x, &[n, c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_row_is_sin_zero_cos_one() {
        let d = 16;
        let pe = positional_encoding_2d(1, 1, d).unwrap();
        let row = pe.data();
        let q = d / 4;
        assert!(row[..q].iter().all(|&v| v == 0.0));
        assert!(row[q..2 * q].iter().all(|&v| v == 1.0));
        assert!(row[2 * q..3 * q].iter().all(|&v| v == 0.0));
        assert!(row[3 * q..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn values_in_unit_range() {
        let pe = positional_encoding_2d(5, 7, 32).unwrap();
        assert_eq!(pe.shape(), &[35, 32]);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn width_must_be_multiple_of_four() {
        assert!(positional_encoding_2d(2, 2, 6).is_err());
        assert!(positional_encoding_2d(2, 2, 0).is_err());
    }
}
