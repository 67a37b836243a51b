//! Dense f64 tensors and their on-disk record format.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

/// Dtype tag written in every serialized tensor header.
pub const DTYPE_TAG: &str = "f64";

/// Dense row-major tensor with an optional gradient buffer.
///
/// Four-dimensional tensors use the (batch, channels, height, width) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} holds {} values but {} were given",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                format!("gradient has {} values, tensor {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same data viewed under a new shape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// Extents of a 4-D tensor as `(n, c, h, w)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                op,
                format!("expected a 4-D (N,C,H,W) tensor, got shape {:?}", self.shape),
            )),
        }
    }

    /// Element at a 4-D index.
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cc, hh, ww] = self.shape[..] else {
            panic!("at4 on tensor of shape {:?}", self.shape)
        };
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// True when shapes match and every value has the same bit pattern.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Writes one named tensor record: header then raw little-endian values.
///
/// Header layout: `u32` name length, UTF-8 name, `u8` tag length, the dtype
/// tag, `u32` rank, then one `u64` per extent. All integers little-endian.
pub fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    let name = name.as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&[DTYPE_TAG.len() as u8])?;
    w.write_all(DTYPE_TAG.as_bytes())?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.data.len() * 8);
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads a record written by [`write_tensor`].
pub fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1 << 16 {
        return Err(Error::Format(format!("tensor name length {name_len} is implausible")));
    }
    let mut name = vec![0u8; name_len];
    read_exact(r, &mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?;
    let mut tag_len = [0u8; 1];
    read_exact(r, &mut tag_len)?;
    let mut tag = vec![0u8; tag_len[0] as usize];
    read_exact(r, &mut tag)?;
    if tag != DTYPE_TAG.as_bytes() {
        return Err(Error::Format(format!(
            "tensor {name}: unsupported dtype tag {:?}",
            String::from_utf8_lossy(&tag)
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("tensor {name}: rank {rank} is implausible")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact(r, &mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| Error::Format(format!("tensor {name}: shape {shape:?} too large")))?;
    let mut raw = vec![0u8; numel * 8];
    read_exact(r, &mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, Tensor::new(&shape, data)?))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated tensor record: {e}")))
}
