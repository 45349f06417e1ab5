//! Dense NHWC tensors and a few numeric helpers shared by all layers.
//!
//! Storage is row-major with the channel index varying fastest, so the
//! channel vector at `(n, h, w)` is a contiguous slice.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample shape (batch dimension omitted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape3 {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Shape3 { h, w, c }
    }

    pub const fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn positions(&self) -> usize {
        self.h * self.w
    }

    /// Parses `HxWxC`, e.g. `28x28x1`.
    pub fn parse(text: &str) -> Result<Self> {
        let dims: Vec<usize> = text
            .trim()
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("bad shape '{text}', expected HxWxC")))?;
        match dims.as_slice() {
            &[h, w, c] if h > 0 && w > 0 && c > 0 => Ok(Shape3 { h, w, c }),
            _ => Err(Error::InvalidArgument(format!(
                "bad shape '{text}', expected HxWxC with positive entries"
            ))),
        }
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

/// Batch of `N` activity maps of shape `H x W x C`.
#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    shape: Shape3,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("n", &self.n)
            .field("shape", &self.shape)
            .finish_non_exhaustive()
    }
}

impl Tensor4 {
    pub fn zeros(n: usize, shape: Shape3) -> Self {
        Self::filled(n, shape, 0.0)
    }

    pub fn filled(n: usize, shape: Shape3, value: f32) -> Self {
        Tensor4 {
            n,
            shape,
            data: vec![value; n * shape.len()],
        }
    }

    pub fn from_vec(n: usize, shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * shape.len() {
            return Err(Error::DimensionMismatch {
                expected: n * shape.len(),
                actual: data.len(),
            });
        }
        Ok(Tensor4 { n, shape, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.shape.h, self.shape.w, self.shape.c]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Flat offset of the channel vector at `(n, h, w)`.
    #[inline]
    pub fn offset(&self, n: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.h + h) * self.shape.w + w) * self.shape.c
    }

    fn check(&self, n: usize, h: usize, w: usize) -> Result<()> {
        if n >= self.n || h >= self.shape.h || w >= self.shape.w {
            return Err(Error::IndexOutOfRange {
                n,
                h,
                w,
                shape: self.dims(),
            });
        }
        Ok(())
    }

    pub fn channel_vector(&self, n: usize, h: usize, w: usize) -> Result<&[f32]> {
        self.check(n, h, w)?;
        let o = self.offset(n, h, w);
        Ok(&self.data[o..o + self.shape.c])
    }

    pub fn channel_vector_mut(&mut self, n: usize, h: usize, w: usize) -> Result<&mut [f32]> {
        self.check(n, h, w)?;
        let o = self.offset(n, h, w);
        let c = self.shape.c;
        Ok(&mut self.data[o..o + c])
    }

    /// Iterates over all channel vectors of one batch element in (h, w) order.
    pub fn positions(&self, n: usize) -> impl Iterator<Item = &[f32]> {
        self.sample(n).chunks_exact(self.shape.c)
    }

    /// All values of batch element `n`.
    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.shape.len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.shape.len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// New tensor holding the given batch elements, in order.
    pub fn select(&self, indices: &[usize]) -> Tensor4 {
        let mut data = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor4 {
            n: indices.len(),
            shape: self.shape,
            data,
        }
    }

    /// Concatenates tensors of equal per-sample shape along the batch axis.
    pub fn concat(parts: &[Tensor4]) -> Result<Tensor4> {
        let Some(first) = parts.first() else {
            return Err(Error::EmptyInput);
        };
        let shape = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape.to_string(),
                    actual: p.shape.to_string(),
                });
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Ok(Tensor4 { n, shape, data })
    }

    /// Same data viewed with another per-sample shape of equal size.
    pub fn reshape(self, shape: Shape3) -> Result<Tensor4> {
        if shape.len() != self.shape.len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_string(),
                actual: shape.to_string(),
            });
        }
        Ok(Tensor4 {
            n: self.n,
            shape,
            data: self.data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `log(sum(exp(v)))` evaluated with a max shift.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let max = v
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
        .ok_or(Error::EmptyInput)?;
    if v.len() == 1 {
        return Ok(v[0]);
    }
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
