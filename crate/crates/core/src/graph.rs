//! Reverse-mode differentiation over an explicitly recorded op tape.
//!
//! A [`Graph`] owns every value produced during a forward pass. Ops append a
//! node recording their inputs and whatever they need for the backward pass;
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients.
//! Graphs are cheap to create and are meant to be built once per forward pass.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Layer-norm variance floor.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulBroadcast {
        gate: Var,
        x: Var,
    },
    ConcatChannels(Vec<Var>),
    Upsample2x(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    AddBias(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    ExpandBatch(Var),
    Sum(Var),
    SumSquares(Var),
    DotConst(Var, Vec<f64>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    WeightedSpatialSum {
        x: Var,
        a: Var,
    },
    BceWithLogits {
        x: Var,
        target: Vec<f64>,
    },
    L1 {
        x: Var,
        target: Vec<f64>,
    },
    GiouLoss {
        x: Var,
        target: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Silu(_) => "silu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulBroadcast { .. } => "mul_broadcast",
            Op::ConcatChannels(_) => "concat_channels",
            Op::Upsample2x(_) => "upsample_nearest_2x",
            Op::MatMul { .. } => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Softmax(_) => "softmax_lastdim",
            Op::LayerNorm { .. } => "layernorm",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::ExpandBatch(_) => "expand_batch",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
            Op::DotConst(..) => "dot_const",
            Op::GatherRows { .. } => "gather_rows",
            Op::WeightedSpatialSum { .. } => "weighted_spatial_sum",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::L1 { .. } => "l1",
            Op::GiouLoss { .. } => "giou_loss",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// The op tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, true)
    }

    /// A named leaf that receives a gradient; the name shows up in diagnostics.
    pub fn param_named(&mut self, t: Tensor, name: &str) -> Var {
        let v = self.param(t);
        self.nodes[v.0].label = Some(name.to_string());
        v
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradient as a tensor shaped like the value; zeros when none reached `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = self.value(v);
        match value.grad() {
            Some(g) => Tensor::new(value.shape(), g.to_vec()).expect("grad matches value"),
            None => Tensor::zeros(value.shape()),
        }
    }

    /// Describes the first node (in creation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            let bad_value = !n.value.all_finite();
            let bad_grad = n
                .value
                .grad()
                .is_some_and(|g| g.iter().any(|v| !v.is_finite()));
            (bad_value || bad_grad).then(|| {
                let what = if bad_value { "value" } else { "gradient" };
                match &n.label {
                    Some(l) => format!("{what} of `{l}` (node {i}, {})", n.op.name()),
                    None => format!("{what} of node {i} ({}, shape {:?})", n.op.name(), n.value.shape()),
                }
            })
        })
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let t = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push_node(t, op, rg)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----------------------------------------------------------------------
    // ops
    // ----------------------------------------------------------------------

    /// 2-D cross-correlation of `x (N,C,H,W)` with `w (O,C,k,k)` plus bias `b (O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, c, h, wd) = self.value(x).dims4(OP)?;
        let (oc, ic, k, k2) = self.value(w).dims4(OP)?;
        if k != k2 {
            return Err(Error::shape(OP, format!("kernel must be square, got {k}x{k2}")));
        }
        if ic != c {
            return Err(Error::shape(
                OP,
                format!("input channels: weights expect {ic}, input has {c}"),
            ));
        }
        if self.shape(b) != [oc] {
            return Err(Error::shape(
                OP,
                format!("bias shape {:?} does not match {oc} output channels", self.shape(b)),
            ));
        }
        if stride == 0 || k == 0 {
            return Err(Error::InvalidArgument("conv2d needs stride >= 1 and k >= 1".into()));
        }
        let out_extent = |len: usize, dim: &str| -> Result<usize> {
            let span = (len + 2 * pad)
                .checked_sub(k)
                .ok_or_else(|| Error::shape(OP, format!("{dim} {len} + 2*{pad} is smaller than kernel {k}")))?;
            if span % stride != 0 {
                return Err(Error::shape(
                    OP,
                    format!("{dim}: ({len} + 2*{pad} - {k}) is not divisible by stride {stride}"),
                ));
            }
            Ok(span / stride + 1)
        };
        let geom = ConvGeom {
            n,
            in_c: c,
            h,
            w: wd,
            out_c: oc,
            k,
            stride,
            pad,
            out_h: out_extent(h, "height")?,
            out_w: out_extent(wd, "width")?,
        };
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w), self.data(b));
        Ok(self.push(
            &[n, oc, geom.out_h, geom.out_w],
            out,
            Op::Conv2d { x, w, b, geom },
            &[x, w, b],
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Relu(x), &[x])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Silu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Scale(x, factor), &[x])
    }

    /// `gate (N,1,H,W)` times `x (N,C,H,W)`, the gate broadcast across channels.
    ///
    /// This is the only broadcast the tape supports.
    pub fn mul_broadcast(&mut self, gate: Var, x: Var) -> Result<Var> {
        const OP: &str = "mul_broadcast";
        let (gn, gc, gh, gw) = self.value(gate).dims4(OP)?;
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        if gc != 1 {
            return Err(Error::shape(OP, format!("gate must have 1 channel, has {gc}")));
        }
        if (gn, gh, gw) != (n, h, w) {
            return Err(Error::shape(
                OP,
                format!("gate (N,H,W) = {:?} vs input {:?}", (gn, gh, gw), (n, h, w)),
            ));
        }
        let plane = h * w;
        let gd = self.data(gate);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            let g = &gd[ni * plane..(ni + 1) * plane];
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for p in 0..plane {
                    out[base + p] = g[p] * xd[base + p];
                }
            }
        }
        Ok(self.push(&[n, c, h, w], out, Op::MulBroadcast { gate, x }, &[gate, x]))
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_channels of zero tensors".into()))?;
        let (n, _, h, w) = self.value(first).dims4(OP)?;
        let mut total_c = 0;
        for (i, &v) in xs.iter().enumerate() {
            let (vn, vc, vh, vw) = self.value(v).dims4(OP)?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    OP,
                    format!("input {i} has (N,H,W) = {:?}, expected {:?}", (vn, vh, vw), (n, h, w)),
                ));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for ni in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.data(v)[ni * c * plane..(ni + 1) * c * plane]);
            }
        }
        Ok(self.push(&[n, total_c, h, w], out, Op::ConcatChannels(xs.to_vec()), xs))
    }

    /// Nearest-neighbour 2x upsampling of a 4-D tensor.
    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample_nearest_2x")?;
        let xd = self.data(x);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = xd[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(&[n, c, oh, ow], out, Op::Upsample2x(x), &[x]))
    }

    /// Matrix product.
    ///
    /// With a 2-D `b (K,N)`, every row of `a (..., K)` is multiplied by `b`.
    /// With `a (..., M, K)` and `b (..., K, N)` of equal leading extents, the
    /// product is batched over the leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul";
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.is_empty() || bsh.len() < 2 {
            return Err(Error::shape(OP, format!("unsupported ranks {ash:?} x {bsh:?}")));
        }
        let k = *ash.last().unwrap();
        if bsh.len() == 2 {
            if bsh[0] != k {
                return Err(Error::shape(
                    OP,
                    format!("inner dimension: left has {k}, right has {}", bsh[0]),
                ));
            }
            let n = bsh[1];
            let m = self.value(a).numel() / k.max(1);
            let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
            let mut shape = ash.clone();
            *shape.last_mut().unwrap() = n;
            let op = Op::MatMul {
                a,
                b,
                batch: 1,
                m,
                k,
                n,
                shared_b: true,
            };
            return Ok(self.push(&shape, out, op, &[a, b]));
        }
        if ash.len() != bsh.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(Error::shape(OP, format!("batch extents differ: {ash:?} x {bsh:?}")));
        }
        let r = ash.len();
        let (m, n) = (ash[r - 2], bsh[r - 1]);
        if bsh[r - 2] != k {
            return Err(Error::shape(
                OP,
                format!("inner dimension: left has {k}, right has {}", bsh[r - 2]),
            ));
        }
        let batch: usize = ash[..r - 2].iter().product();
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            out.extend(kernels::matmul(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let mut shape = ash[..r - 2].to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_b: false,
        };
        Ok(self.push(&shape, out, op, &[a, b]))
    }

    /// Adds a 1-D bias along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs last dimension {d}", self.shape(b)),
            ));
        }
        let bd = self.data(b);
        let out = self
            .data(x)
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(bd).map(|(x, b)| x + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(&shape, out, Op::AddBias(x, b), &[x, b]))
    }

    /// `x W + b` with `W (in, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().unwrap_or(&1);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "gamma {:?} / beta {:?} vs last dimension {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let xd = self.data(x);
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gd[j] + bd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(&shape, out, op, &[x, gamma, beta]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let out = self.data(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of {} axes", shape.len()),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.data(x), &shape, perm);
        Ok(self.push(&out_shape, out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn expand_batch(&mut self, x: Var, n: usize) -> Var {
        let xd = self.data(x);
        let mut out = Vec::with_capacity(xd.len() * n);
        for _ in 0..n {
            out.extend_from_slice(xd);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        self.push(&shape, out, Op::ExpandBatch(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(&[1], vec![s], Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().map(|v| v * v).sum();
        self.push(&[1], vec![s], Op::SumSquares(x), &[x])
    }

    /// `sum(x * r)` for a constant `r` of the same shape.
    pub fn dot_const(&mut self, x: Var, r: &Tensor) -> Result<Var> {
        if r.shape() != self.shape(x) {
            return Err(Error::shape(
                "dot_const",
                format!("{:?} vs {:?}", r.shape(), self.shape(x)),
            ));
        }
        let s = self.data(x).iter().zip(r.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(&[1], vec![s], Op::DotConst(x, r.data().to_vec()), &[x]))
    }

    /// Selects rows of `x` viewed as `(rows, last_dim)`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        let total = self.value(x).numel() / d.max(1);
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {total} rows"),
            ));
        }
        let xd = self.data(x);
        let out = rows
            .iter()
            .flat_map(|&r| xd[r * d..(r + 1) * d].iter().copied())
            .collect();
        Ok(self.push(
            &[rows.len(), d],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// `y[n,c] = sum_{i,j} a[n,0,i,j] * x[n,c,i,j]`.
    pub fn weighted_spatial_sum(&mut self, x: Var, a: Var) -> Result<Var> {
        const OP: &str = "weighted_spatial_sum";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        let (an, ac, ah, aw) = self.value(a).dims4(OP)?;
        if ac != 1 || (an, ah, aw) != (n, h, w) {
            return Err(Error::shape(
                OP,
                format!("weights {:?} do not cover input {:?}", self.shape(a), self.shape(x)),
            ));
        }
        let (xd, ad) = (self.data(x), self.data(a));
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += ad[(ni * h + i) * w + j] * xd[((ni * c + ci) * h + i) * w + j];
                    }
                }
                out[ni * c + ci] = acc;
            }
        }
        Ok(self.push(&[n, c], out, Op::WeightedSpatialSum { x, a }, &[x, a]))
    }

    /// Summed binary cross-entropy of logits `x` against constant targets.
    pub fn bce_with_logits_sum(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if target.shape() != self.shape(x) {
            return Err(Error::shape(
                "bce_with_logits",
                format!("target {:?} vs logits {:?}", target.shape(), self.shape(x)),
            ));
        }
        let s = self
            .data(x)
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let op = Op::BceWithLogits {
            x,
            target: target.data().to_vec(),
        };
        Ok(self.push(&[1], vec![s], op, &[x]))
    }

    /// `sum |x - target|`.
    pub fn l1_sum(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if target.shape() != self.shape(x) {
            return Err(Error::shape(
                "l1",
                format!("target {:?} vs input {:?}", target.shape(), self.shape(x)),
            ));
        }
        let s = self
            .data(x)
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let op = Op::L1 {
            x,
            target: target.data().to_vec(),
        };
        Ok(self.push(&[1], vec![s], op, &[x]))
    }

    /// `sum (1 - GIoU)` over rows of `(M, 4)` boxes in `(cx, cy, w, h)` form.
    pub fn giou_loss_sum(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[1] != 4 || target.shape() != shape {
            return Err(Error::shape(
                "giou_loss",
                format!("expected matching (M,4) boxes, got {:?} and {:?}", shape, target.shape()),
            ));
        }
        let s = self
            .data(x)
            .chunks_exact(4)
            .zip(target.data().chunks_exact(4))
            .map(|(p, t)| giou_loss_row(p, t).0)
            .sum();
        let op = Op::GiouLoss {
            x,
            target: target.data().to_vec(),
        };
        Ok(self.push(&[1], vec![s], op, &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ----------------------------------------------------------------------
    // backward
    // ----------------------------------------------------------------------

    /// Back-propagates from the scalar `loss`, replacing any earlier gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].requires_grad {
                    self.nodes[i].value.set_grad(g)?;
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if needs(*x) {
                    acc(*x, kernels::conv2d_backward_input(geom, gy, self.data(*w)));
                }
                if needs(*w) || needs(*b) {
                    let (dw, db) = kernels::conv2d_backward_params(geom, gy, self.data(*x));
                    acc(*w, dw);
                    acc(*b, db);
                }
            }
            Op::Sigmoid(x) => {
                acc(*x, gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, gy.iter().zip(xd).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Silu(x) => {
                let xd = self.data(*x);
                acc(
                    *x,
                    gy.iter()
                        .zip(xd)
                        .map(|(g, &v)| {
                            let s = sigmoid(v);
                            g * (s + v * s * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::Add(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, gy.iter().zip(bd).map(|(g, v)| g * v).collect());
                acc(*b, gy.iter().zip(ad).map(|(g, v)| g * v).collect());
            }
            Op::Scale(x, f) => acc(*x, gy.iter().map(|g| g * f).collect()),
            Op::MulBroadcast { gate, x } => {
                let (n, c, h, w) = self.value(*x).dims4("mul_broadcast").unwrap();
                let plane = h * w;
                let (gd, xd) = (self.data(*gate), self.data(*x));
                if needs(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for p in 0..plane {
                                dx[base + p] = gy[base + p] * gd[ni * plane + p];
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if needs(*gate) {
                    let mut dg = vec![0.0; gd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for p in 0..plane {
                                dg[ni * plane + p] += gy[base + p] * xd[base + p];
                            }
                        }
                    }
                    acc(*gate, dg);
                }
            }
            Op::ConcatChannels(xs) => {
                let (n, _, h, w) = node.value.dims4("concat_channels").unwrap();
                let plane = h * w;
                let total_c = node.value.shape()[1];
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if needs(v) {
                        let mut dx = Vec::with_capacity(n * c * plane);
                        for ni in 0..n {
                            let start = (ni * total_c + offset) * plane;
                            dx.extend_from_slice(&gy[start..start + c * plane]);
                        }
                        acc(v, dx);
                    }
                    offset += c;
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4("upsample").unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            dx[(p * h + yy / 2) * w + xx / 2] += gy[(p * oh + yy) * ow + xx];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let (m, k, n) = (*m, *k, *n);
                if *shared_b {
                    if needs(*a) {
                        acc(*a, kernels::matmul_grad_a(gy, bd, m, k, n));
                    }
                    if needs(*b) {
                        acc(*b, kernels::matmul_grad_b(gy, ad, m, k, n));
                    }
                } else {
                    if needs(*a) {
                        let mut da = Vec::with_capacity(ad.len());
                        for i in 0..*batch {
                            da.extend(kernels::matmul_grad_a(
                                &gy[i * m * n..(i + 1) * m * n],
                                &bd[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            ));
                        }
                        acc(*a, da);
                    }
                    if needs(*b) {
                        let mut db = Vec::with_capacity(bd.len());
                        for i in 0..*batch {
                            db.extend(kernels::matmul_grad_b(
                                &gy[i * m * n..(i + 1) * m * n],
                                &ad[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                            ));
                        }
                        acc(*b, db);
                    }
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, gy.to_vec());
                if needs(*b) {
                    let d = self.value(*b).numel();
                    let mut db = vec![0.0; d];
                    for row in gy.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                    acc(*b, db);
                }
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gy.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gd = self.data(*gamma);
                if needs(*gamma) || needs(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for (gr, xr) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                            dbeta[j] += gr[j];
                        }
                    }
                    acc(*gamma, dg);
                    acc(*beta, dbeta);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; gy.len()];
                    for (r, ((dxr, gr), xr)) in dx
                        .chunks_mut(d)
                        .zip(gy.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let dxhat: Vec<f64> = gr.iter().zip(gd).map(|(g, w)| g * w).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx =
                            dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dxr[j] = rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Reshape(x) => acc(*x, gy.to_vec()),
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                acc(*x, permute_data(gy, node.value.shape(), &inverse));
            }
            Op::ExpandBatch(x) => {
                let len = self.value(*x).numel();
                let mut dx = vec![0.0; len];
                for chunk in gy.chunks(len.max(1)) {
                    dx.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![gy[0]; self.value(*x).numel()]),
            Op::SumSquares(x) => acc(*x, self.data(*x).iter().map(|v| 2.0 * v * gy[0]).collect()),
            Op::DotConst(x, r) => acc(*x, r.iter().map(|v| v * gy[0]).collect()),
            Op::GatherRows { x, rows } => {
                let d = *self.shape(*x).last().unwrap();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        dx[r * d + j] += gy[i * d + j];
                    }
                }
                acc(*x, dx);
            }
            Op::WeightedSpatialSum { x, a } => {
                let (n, c, h, w) = self.value(*x).dims4("weighted_spatial_sum").unwrap();
                let plane = h * w;
                let (xd, ad) = (self.data(*x), self.data(*a));
                if needs(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let g = gy[ni * c + ci];
                            let base = (ni * c + ci) * plane;
                            for p in 0..plane {
                                dx[base + p] = g * ad[ni * plane + p];
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if needs(*a) {
                    let mut da = vec![0.0; ad.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let g = gy[ni * c + ci];
                            let base = (ni * c + ci) * plane;
                            for p in 0..plane {
                                da[ni * plane + p] += g * xd[base + p];
                            }
                        }
                    }
                    acc(*a, da);
                }
            }
            Op::BceWithLogits { x, target } => {
                let g = gy[0];
                acc(
                    *x,
                    self.data(*x)
                        .iter()
                        .zip(target)
                        .map(|(&z, &t)| g * (sigmoid(z) - t))
                        .collect(),
                );
            }
            Op::L1 { x, target } => {
                let g = gy[0];
                acc(
                    *x,
                    self.data(*x)
                        .iter()
                        .zip(target)
                        .map(|(a, b)| {
                            let d = a - b;
                            if d > 0.0 {
                                g
                            } else if d < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            Op::GiouLoss { x, target } => {
                let g = gy[0];
                let dx = self
                    .data(*x)
                    .chunks_exact(4)
                    .zip(target.chunks_exact(4))
                    .flat_map(|(p, t)| giou_loss_row(p, t).1.map(|v| v * g))
                    .collect();
                acc(*x, dx);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Moves axes of a row-major buffer: output axis `i` is input axis `perm[i]`.
fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// `1 - GIoU` for one `(cx, cy, w, h)` pair and its gradient w.r.t. the prediction.
fn giou_loss_row(p: &[f64], t: &[f64]) -> (f64, [f64; 4]) {
    let (x1, y1, x2, y2) = (p[0] - p[2] / 2.0, p[1] - p[3] / 2.0, p[0] + p[2] / 2.0, p[1] + p[3] / 2.0);
    let (tx1, ty1, tx2, ty2) = (t[0] - t[2] / 2.0, t[1] - t[3] / 2.0, t[0] + t[2] / 2.0, t[1] + t[3] / 2.0);
    let (pw, ph) = (x2 - x1, y2 - y1);
    let area_p = pw * ph;
    let area_t = (tx2 - tx1) * (ty2 - ty1);

    let iw = x2.min(tx2) - x1.max(tx1);
    let ih = y2.min(ty2) - y1.max(ty1);
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };
    let union = area_p + area_t - inter;
    let hw = x2.max(tx2) - x1.min(tx1);
    let hh = y2.max(ty2) - y1.min(ty1);
    let hull = hw * hh;
    let loss = 2.0 - inter / union - union / hull;

    // loss = 2 - I/U - U/H with U = Ap + At - I
    let c_inter = -1.0 / union - inter / (union * union) + 1.0 / hull;
    let c_area = inter / (union * union) - 1.0 / hull;
    let c_hull = union / (hull * hull);

    let mut d = [0.0f64; 4]; // d/d(x1, y1, x2, y2)
    d[0] += c_area * -ph;
    d[2] += c_area * ph;
    d[1] += c_area * -pw;
    d[3] += c_area * pw;
    if overlapping {
        if x1 >= tx1 {
            d[0] += c_inter * -ih;
        }
        if x2 <= tx2 {
            d[2] += c_inter * ih;
        }
        if y1 >= ty1 {
            d[1] += c_inter * -iw;
        }
        if y2 <= ty2 {
            d[3] += c_inter * iw;
        }
    }
    if x1 <= tx1 {
        d[0] += c_hull * -hh;
    }
    if x2 >= tx2 {
        d[2] += c_hull * hh;
    }
    if y1 <= ty1 {
        d[1] += c_hull * -hw;
    }
    if y2 >= ty2 {
        d[3] += c_hull * hw;
    }
    let grad = [
        d[0] + d[2],
        d[1] + d[3],
        (d[2] - d[0]) / 2.0,
        (d[3] - d[1]) / 2.0,
    ];
    (loss, grad)
}

/// Convolution weights `(out, in, k, k)`, bias `(out)`, stride and padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    /// Stride-1 parameters with "same" padding; the kernel must be odd.
    pub fn same(weights: Tensor, bias: Tensor) -> Result<Self> {
        let (_, _, k, _) = weights.dims4("ConvParams::same")?;
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "\"same\" padding needs an odd kernel, got {k}"
            )));
        }
        Ok(Self {
            weights,
            bias,
            stride: 1,
            padding: k / 2,
        })
    }
}

/// One-shot forward convolution outside any training tape.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(p.weights.clone());
    let b = g.constant(p.bias.clone());
    let y = g.conv2d(xv, w, b, p.stride, p.padding)?;
    Ok(g.value(y).clone())
}
