//! Convolutional GMM layer: one mixture evaluated at every (h, w) position.

use rand::Rng;

use crate::error::{Error, Result};
use crate::generation::top_s_filter;
use crate::gmm::{CgmmParams, PreparedParams, Sharing};
use crate::tensor::{argmax, softmax, Shape3, Tensor4};

#[derive(Debug, Clone)]
pub struct CgmmForward {
    /// Responsibilities, shape `H x W x K`.
    pub activities: Tensor4,
    /// `log max_k pi_k N_k` per position, shape `H x W x 1`.
    pub log_likelihood: Tensor4,
    /// Winning component per (sample, position).
    pub winners: Vec<u32>,
    /// Per-sample layer loss: mean over positions of the max-component
    /// log-likelihood, accumulated in `f64`.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CgmmBackward {
    pub samples: Tensor4,
    /// Positions whose control had no positive entry and fell back to uniform.
    pub fallbacks: usize,
}

fn check_input(params: &PreparedParams, shape: Shape3) -> Result<()> {
    if shape.c != params.d() {
        return Err(Error::DimensionMismatch {
            expected: params.d(),
            actual: shape.c,
        });
    }
    if params.sharing() == Sharing::Independent && params.count() != shape.positions() {
        return Err(Error::DimensionMismatch {
            expected: params.count(),
            actual: shape.positions(),
        });
    }
    Ok(())
}

pub fn cgmm_forward(params: &PreparedParams, input: &Tensor4) -> Result<CgmmForward> {
    let shape = input.shape();
    check_input(params, shape)?;
    let k = params.k();
    let positions = shape.positions();
    let mut activities = Tensor4::zeros(input.n(), Shape3::new(shape.h, shape.w, k));
    let mut log_likelihood = Tensor4::zeros(input.n(), Shape3::new(shape.h, shape.w, 1));
    let mut winners = Vec::with_capacity(input.n() * positions);
    let mut losses = Vec::with_capacity(input.n());
    let mut widened = Vec::with_capacity(shape.c);
    let mut joint = vec![0.0; k];
    for n in 0..input.n() {
        let mut total = 0.0;
        for (pos, x) in input.positions(n).enumerate() {
            params
                .mixture(pos)
                .log_joint_into(x, &mut widened, &mut joint)?;
            let best = argmax(&joint);
            let ll = joint[best];
            total += ll;
            winners.push(best as u32);
            let flat = n * positions + pos;
            log_likelihood.data_mut()[flat] = ll as f32;
            let gamma = softmax(&joint);
            for (a, g) in activities.data_mut()[flat * k..(flat + 1) * k]
                .iter_mut()
                .zip(gamma)
            {
                *a = g as f32;
            }
        }
        losses.push(total / positions as f64);
    }
    Ok(CgmmForward {
        activities,
        log_likelihood,
        winners,
        losses,
    })
}

/// Samples one `D`-vector per position.
///
/// With a control tensor (`H x W x K`), negative entries are clipped, the
/// optional top-S filter applied, and the component drawn from the result.
/// Without control, components are drawn uniformly. `streams[n]` supplies
/// the randomness for batch element `n`.
pub fn cgmm_backward<R: Rng>(
    params: &PreparedParams,
    in_shape: Shape3,
    n: usize,
    control: Option<&Tensor4>,
    streams: &mut [R],
    top_s: Option<usize>,
    variance_scale: f64,
) -> Result<CgmmBackward> {
    check_input(params, in_shape)?;
    let k = params.k();
    if let Some(t) = control {
        let expected = Shape3::new(in_shape.h, in_shape.w, k);
        if t.shape() != expected || t.n() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} x {expected}"),
                actual: format!("{} x {}", t.n(), t.shape()),
            });
        }
    }
    if streams.len() < n {
        return Err(Error::InvalidArgument(format!(
            "{n} samples need {n} random streams, got {}",
            streams.len()
        )));
    }
    if let Some(s) = top_s {
        if s == 0 || s > k {
            return Err(Error::InvalidArgument(format!(
                "top-S must be in 1..={k}, got {s}"
            )));
        }
    }
    let d = in_shape.c;
    let mut samples = Tensor4::zeros(n, in_shape);
    let mut fallbacks = 0;
    let uniform = vec![1.0; k];
    for (b, rng) in streams.iter_mut().enumerate().take(n) {
        for pos in 0..in_shape.positions() {
            let mut weights = match control {
                Some(t) => {
                    let c = &t.data()[(b * in_shape.positions() + pos) * k..][..k];
                    let clipped: Vec<f64> = c.iter().map(|&v| (v as f64).max(0.0)).collect();
                    if clipped.iter().sum::<f64>() > 0.0 {
                        clipped
                    } else {
                        fallbacks += 1;
                        uniform.clone()
                    }
                }
                None => uniform.clone(),
            };
            if let Some(s) = top_s {
                weights = top_s_filter(&weights, s)?;
            }
            let x = params
                .mixture(pos)
                .sample_component(&weights, variance_scale, rng)?;
            let at = (b * in_shape.positions() + pos) * d;
            samples.data_mut()[at..at + d].copy_from_slice(&x);
        }
    }
    if fallbacks > 0 {
        log::warn!("{fallbacks} control vectors without positive entries; sampled uniformly");
    }
    Ok(CgmmBackward { samples, fallbacks })
}

/// Gradient of `log max_k pi_k N_k(x)` w.r.t. the input vector at `pos`.
pub fn cgmm_input_gradient(params: &CgmmParams, pos: usize, x: &[f32]) -> Result<Vec<f64>> {
    params.mixture(pos).input_gradient(x)
}

/// Per-sample layer loss and its gradient w.r.t. the whole input tensor.
pub fn cgmm_loss_input_gradient(
    params: &PreparedParams,
    input: &Tensor4,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = input.shape();
    check_input(params, shape)?;
    let positions = shape.positions();
    let scale = 1.0 / positions as f64;
    let d = shape.c;
    let mut grad = vec![0.0; input.data().len()];
    let mut losses = Vec::with_capacity(input.n());
    let mut widened = Vec::with_capacity(d);
    let mut joint = vec![0.0; params.k()];
    for n in 0..input.n() {
        let mut total = 0.0;
        for (pos, x) in input.positions(n).enumerate() {
            let mixture = params.mixture(pos);
            mixture.log_joint_into(x, &mut widened, &mut joint)?;
            let best = argmax(&joint);
            total += joint[best];
            let mu = mixture.centroid(best);
            let p = mixture.precision(best);
            let g = &mut grad[(n * positions + pos) * d..][..d];
            for i in 0..d {
                g[i] = scale * p[i] * (mu[i] - x[i] as f64);
            }
        }
        losses.push(total * scale);
    }
    Ok((losses, grad))
}
