//! Channel-wise max-pooling and its upsampling inverse.

use crate::error::{Error, Result};
use crate::layers::folding::sweep;
use crate::tensor::{Shape3, Tensor4};

#[derive(Debug, Clone)]
pub struct PoolForward {
    pub activities: Tensor4,
    /// Flat index into the input tensor of the winning entry, per output entry.
    pub argmax: Vec<usize>,
}

pub fn pooled_shape(f: usize, stride: usize, input: Shape3) -> Result<Shape3> {
    if f == 0 || stride == 0 || f > input.h || f > input.w {
        return Err(Error::ShapeMismatch {
            expected: format!("input of at least {f}x{f}"),
            actual: input.to_string(),
        });
    }
    Ok(Shape3::new(
        sweep(input.h, f, stride),
        sweep(input.w, f, stride),
        input.c,
    ))
}

/// Max over each `f x f` window; ties resolve to the lowest flat index.
pub fn pooling_forward(f: usize, stride: usize, input: &Tensor4) -> Result<PoolForward> {
    let out_shape = pooled_shape(f, stride, input.shape())?;
    let c = out_shape.c;
    let mut out = Tensor4::zeros(input.n(), out_shape);
    let mut argmax = vec![0usize; out.data().len()];
    for n in 0..input.n() {
        for h in 0..out_shape.h {
            for w in 0..out_shape.w {
                let dst = out.offset(n, h, w);
                for ch in 0..c {
                    let mut best = input.offset(n, h * stride, w * stride) + ch;
                    for i in 0..f {
                        for j in 0..f {
                            let at = input.offset(n, h * stride + i, w * stride + j) + ch;
                            if input.data()[at] > input.data()[best] {
                                best = at;
                            }
                        }
                    }
                    out.data_mut()[dst + ch] = input.data()[best];
                    argmax[dst + ch] = best;
                }
            }
        }
    }
    Ok(PoolForward {
        activities: out,
        argmax,
    })
}

/// Nearest-neighbour upsampling of a control signal back to `in_shape`.
///
/// Only non-overlapping pooling (`f == stride`) is invertible this way.
/// Rows and columns dropped by a non-tiling forward sweep copy the nearest
/// covered block.
pub fn pooling_backward(f: usize, stride: usize, in_shape: Shape3, t: &Tensor4) -> Result<Tensor4> {
    if f != stride {
        return Err(Error::Unsupported(format!(
            "backwards mode of overlapping pooling P({f},{stride})"
        )));
    }
    let out_shape = pooled_shape(f, stride, in_shape)?;
    if t.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            expected: out_shape.to_string(),
            actual: t.shape().to_string(),
        });
    }
    let c = in_shape.c;
    let mut up = Tensor4::zeros(t.n(), in_shape);
    for n in 0..t.n() {
        for h in 0..in_shape.h {
            let src_h = (h / f).min(out_shape.h - 1);
            for w in 0..in_shape.w {
                let src_w = (w / f).min(out_shape.w - 1);
                let src = t.offset(n, src_h, src_w);
                let dst = up.offset(n, h, w);
                up.data_mut()[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
            }
        }
    }
    Ok(up)
}

/// Routes output gradients to the recorded argmax entries (subgradient of max).
pub fn pooling_route_gradient(
    argmax: &[usize],
    grad: &[f64],
    input_len: usize,
) -> Result<Vec<f64>> {
    if argmax.len() != grad.len() {
        return Err(Error::DimensionMismatch {
            expected: argmax.len(),
            actual: grad.len(),
        });
    }
    let mut out = vec![0.0; input_len];
    for (&i, &g) in argmax.iter().zip(grad) {
        out[i] += g;
    }
    Ok(out)
}
