//! Folding (half-convolution): moves every `f x f` patch of the input into
//! the channel dimension of one output position.
//!
//! Output channel `c` of position `(h, w)` reads input position
//! `(h*stride + c / (f*C'), w*stride + (c / C') % f, c % C')`, so each
//! output channel vector is the concatenation of `f*f` input channel vectors
//! in row-major window order.

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor4};

/// Output extent of a window sweep; callers check `f <= extent`.
pub(crate) fn sweep(extent: usize, f: usize, stride: usize) -> usize {
    1 + (extent - f) / stride
}

pub fn folded_shape(f: usize, stride: usize, input: Shape3) -> Result<Shape3> {
    if f == 0 || stride == 0 || f > input.h || f > input.w {
        return Err(Error::ShapeMismatch {
            expected: format!("input of at least {f}x{f}"),
            actual: input.to_string(),
        });
    }
    Ok(Shape3::new(
        sweep(input.h, f, stride),
        sweep(input.w, f, stride),
        f * f * input.c,
    ))
}

/// Source position `(h', w', c')` of output entry `(h, w, c)`.
pub fn folding_source_index(
    f: usize,
    stride: usize,
    c_in: usize,
    (h, w, c): (usize, usize, usize),
) -> (usize, usize, usize) {
    debug_assert!(c < f * f * c_in);
    (
        h * stride + c / (f * c_in),
        w * stride + (c / c_in) % f,
        c % c_in,
    )
}

pub fn folding_forward(f: usize, stride: usize, input: &Tensor4) -> Result<Tensor4> {
    let in_shape = input.shape();
    let out_shape = folded_shape(f, stride, in_shape)?;
    let cin = in_shape.c;
    let mut out = Tensor4::zeros(input.n(), out_shape);
    for n in 0..input.n() {
        for h in 0..out_shape.h {
            for w in 0..out_shape.w {
                let dst = out.offset(n, h, w);
                for i in 0..f {
                    for j in 0..f {
                        let src = input.offset(n, h * stride + i, w * stride + j);
                        let at = dst + (i * f + j) * cin;
                        out.data_mut()[at..at + cin].copy_from_slice(&input.data()[src..src + cin]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// How many output patches read each input position `(h', w')`.
pub fn overlap_counts(f: usize, stride: usize, in_shape: Shape3) -> Result<Vec<usize>> {
    let out = folded_shape(f, stride, in_shape)?;
    let mut counts = vec![0usize; in_shape.positions()];
    for h in 0..out.h {
        for w in 0..out.w {
            for i in 0..f {
                for j in 0..f {
                    counts[(h * stride + i) * in_shape.w + w * stride + j] += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Averages, for every input position, all output entries that were read
/// from it. Positions read by no patch receive 0.
pub fn folding_backward(f: usize, stride: usize, in_shape: Shape3, t: &Tensor4) -> Result<Tensor4> {
    let out_shape = folded_shape(f, stride, in_shape)?;
    if t.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            expected: out_shape.to_string(),
            actual: t.shape().to_string(),
        });
    }
    let counts = overlap_counts(f, stride, in_shape)?;
    let sums = scatter(
        f,
        stride,
        in_shape,
        t.n(),
        |i| t.data()[i] as f64,
        out_shape,
    );
    let cin = in_shape.c;
    let data = sums
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let pos = (i / cin) % in_shape.positions();
            match counts[pos] {
                0 => 0.0,
                j => (s / j as f64) as f32,
            }
        })
        .collect();
    Tensor4::from_vec(t.n(), in_shape, data)
}

/// Transpose of [`folding_forward`]: adds every output gradient entry to its
/// source entry.
pub fn folding_scatter_add(
    f: usize,
    stride: usize,
    in_shape: Shape3,
    n: usize,
    grad: &[f64],
) -> Result<Vec<f64>> {
    let out_shape = folded_shape(f, stride, in_shape)?;
    if grad.len() != n * out_shape.len() {
        return Err(Error::DimensionMismatch {
            expected: n * out_shape.len(),
            actual: grad.len(),
        });
    }
    Ok(scatter(f, stride, in_shape, n, |i| grad[i], out_shape))
}

fn scatter(
    f: usize,
    stride: usize,
    in_shape: Shape3,
    n: usize,
    value: impl Fn(usize) -> f64,
    out_shape: Shape3,
) -> Vec<f64> {
    let cin = in_shape.c;
    let mut acc = vec![0.0f64; n * in_shape.len()];
    let in_offset = |b: usize, h: usize, w: usize| ((b * in_shape.h + h) * in_shape.w + w) * cin;
    for b in 0..n {
        for h in 0..out_shape.h {
            for w in 0..out_shape.w {
                let src = ((b * out_shape.h + h) * out_shape.w + w) * out_shape.c;
                for i in 0..f {
                    for j in 0..f {
                        let dst = in_offset(b, h * stride + i, w * stride + j);
                        let from = src + (i * f + j) * cin;
                        for c in 0..cin {
                            acc[dst + c] += value(from + c);
                        }
                    }
                }
            }
        }
    }
    acc
}
