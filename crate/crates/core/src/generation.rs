//! Sampling, control thresholding, sharpening and in-painting.

use crate::error::{Error, Result};
use crate::layers::{
    cgmm_loss_input_gradient, folding_forward, folding_scatter_add, pooling_forward,
    pooling_route_gradient, LayerSpec,
};
use crate::model::{DcgmmModel, TopControl};
use crate::tensor::{Shape3, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Keep only the `top_s` largest control entries at every cGMM layer.
    pub top_s: Option<usize>,
    pub seed: u64,
    /// Multiplier on the sampling covariance.
    pub variance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_s: None,
            seed: 0,
            variance_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpenConfig {
    /// Number of ascent steps; 0 disables sharpening.
    pub iterations: usize,
    pub step: f64,
}

impl SharpenConfig {
    pub const fn disabled() -> Self {
        Self {
            iterations: 0,
            step: 1.0,
        }
    }

    /// 300 iterations with step size 1.
    pub const fn standard() -> Self {
        Self {
            iterations: 300,
            step: 1.0,
        }
    }
}

impl Default for SharpenConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

/// Keeps the `s` largest entries (ties to the lower index), zeroes the rest
/// and renormalizes to sum 1.
pub fn top_s_filter(control: &[f64], s: usize) -> Result<Vec<f64>> {
    if s == 0 || s > control.len() {
        return Err(Error::InvalidArgument(format!(
            "top-S must be in 1..={}, got {s}",
            control.len()
        )));
    }
    let mut order: Vec<usize> = (0..control.len()).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| control[b].total_cmp(&control[a]));
    let mut out = vec![0.0; control.len()];
    for &i in order.iter().take(s) {
        out[i] = control[i].max(0.0);
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SharpenOutcome {
    pub control: Tensor4,
    /// Per-sample target loss before the first step.
    pub initial_loss: Vec<f64>,
    /// Per-sample target loss of the returned control.
    pub final_loss: Vec<f64>,
    pub steps: usize,
}

fn check_chain(model: &DcgmmModel, layer: usize, target: usize) -> Result<()> {
    let layers = model.layers();
    if target <= layer || target >= layers.len() || !layers[target].is_cgmm() {
        return Err(Error::InvalidArgument(format!(
            "layer {target} is not a cGMM layer above layer {layer}"
        )));
    }
    for (i, spec) in layers.iter().enumerate().take(target).skip(layer) {
        if !matches!(spec, LayerSpec::Folding { .. } | LayerSpec::Pooling { .. }) {
            return Err(Error::InvalidArgument(format!(
                "sharpening chain may only cross folding and pooling layers, found {spec} at {i}"
            )));
        }
    }
    Ok(())
}

/// Per-sample loss of cGMM layer `target` for a tensor entering layer
/// `layer`, and its gradient with respect to that tensor.
pub fn sharpen_gradient(
    model: &DcgmmModel,
    layer: usize,
    target: usize,
    t: &Tensor4,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_chain(model, layer, target)?;
    let layers = model.layers();
    let shapes = model.shapes();
    let params = model.cgmm(target).expect("checked").prepare();
    let mut x = t.clone();
    let mut argmaxes = Vec::new();
    for spec in &layers[layer..target] {
        x = match *spec {
            LayerSpec::Folding { f, stride } => folding_forward(f, stride, &x)?,
            LayerSpec::Pooling { f, stride } => {
                let out = pooling_forward(f, stride, &x)?;
                argmaxes.push(out.argmax);
                out.activities
            }
            _ => unreachable!("checked chain"),
        };
    }
    let (losses, mut grad) = cgmm_loss_input_gradient(&params, &x)?;
    for i in (layer..target).rev() {
        let in_shape: Shape3 = shapes[i];
        grad = match layers[i] {
            LayerSpec::Folding { f, stride } => {
                folding_scatter_add(f, stride, in_shape, t.n(), &grad)?
            }
            LayerSpec::Pooling { .. } => {
                let argmax = argmaxes.pop().expect("one per pooling layer");
                pooling_route_gradient(&argmax, &grad, t.n() * in_shape.len())?
            }
            _ => unreachable!("checked chain"),
        };
    }
    Ok((losses, grad))
}

/// Gradient ascent on the control `t0` entering layer `layer`, maximizing the
/// loss of cGMM layer `target`.
pub fn sharpen(
    model: &DcgmmModel,
    layer: usize,
    target: usize,
    t0: Tensor4,
    cfg: &SharpenConfig,
) -> Result<SharpenOutcome> {
    if !(cfg.step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sharpening step must be positive, got {}",
            cfg.step
        )));
    }
    let (initial_loss, mut grad) = sharpen_gradient(model, layer, target, &t0)?;
    let mut t = t0;
    let mut final_loss = initial_loss.clone();
    let mut steps = 0;
    while steps < cfg.iterations {
        if grad.iter().any(|g| !g.is_finite()) {
            log::warn!("sharpening stopped after {steps} steps: non-finite gradient");
            break;
        }
        let mut next = t.clone();
        for (v, g) in next.data_mut().iter_mut().zip(&grad) {
            *v = (*v as f64 + cfg.step * g) as f32;
        }
        if !next.all_finite() {
            log::warn!("sharpening stopped after {steps} steps: non-finite control");
            break;
        }
        let (loss, g) = sharpen_gradient(model, layer, target, &next)?;
        if loss.iter().any(|l| !l.is_finite()) {
            log::warn!("sharpening stopped after {steps} steps: non-finite loss");
            break;
        }
        t = next;
        final_loss = loss;
        grad = g;
        steps += 1;
    }
    Ok(SharpenOutcome {
        control: t,
        initial_loss,
        final_loss,
        steps,
    })
}

/// Draws `n` samples, optionally conditioned on a class.
pub fn sample(
    model: &DcgmmModel,
    class: Option<usize>,
    sampler: &SamplerConfig,
    sharpening: &SharpenConfig,
    n: usize,
) -> Result<Tensor4> {
    let top = match class {
        Some(c) => TopControl::Class(c),
        None => TopControl::Uniform,
    };
    model.backward(top, n, sampler, sharpening)
}

/// Known (`true`) and unknown (`false`) pixels of an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InpaintMask {
    pub h: usize,
    pub w: usize,
    known: Vec<bool>,
}

impl InpaintMask {
    pub fn new(h: usize, w: usize, known: Vec<bool>) -> Result<Self> {
        if known.len() != h * w {
            return Err(Error::DimensionMismatch {
                expected: h * w,
                actual: known.len(),
            });
        }
        Ok(Self { h, w, known })
    }

    /// Everything left of column `w / 2` is known.
    pub fn left_half(h: usize, w: usize) -> Self {
        let known = (0..h * w).map(|i| i % w < w / 2).collect();
        Self { h, w, known }
    }

    pub fn is_known(&self, h: usize, w: usize) -> bool {
        self.known[h * self.w + w]
    }

    pub fn known(&self) -> &[bool] {
        &self.known
    }

    /// Copy of `images` with unknown pixels set to 0.
    pub fn occlude(&self, images: &Tensor4) -> Result<Tensor4> {
        self.check(images.shape())?;
        let c = images.shape().c;
        let mut out = images.clone();
        for n in 0..out.n() {
            for (i, px) in out.sample_mut(n).chunks_mut(c).enumerate() {
                if !self.known[i] {
                    px.fill(0.0);
                }
            }
        }
        Ok(out)
    }

    /// Known pixels from `original`, the rest from `generated`.
    pub fn merge(&self, original: &Tensor4, generated: &Tensor4) -> Result<Tensor4> {
        self.check(original.shape())?;
        if generated.shape() != original.shape() || generated.n() != original.n() {
            return Err(Error::ShapeMismatch {
                expected: original.shape().to_string(),
                actual: generated.shape().to_string(),
            });
        }
        let c = original.shape().c;
        let mut out = generated.clone();
        for n in 0..out.n() {
            let src = original.sample(n);
            for (i, px) in out.sample_mut(n).chunks_mut(c).enumerate() {
                if self.known[i] {
                    px.copy_from_slice(&src[i * c..(i + 1) * c]);
                }
            }
        }
        Ok(out)
    }

    fn check(&self, shape: Shape3) -> Result<()> {
        if shape.h != self.h || shape.w != self.w {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.h, self.w),
                actual: shape.to_string(),
            });
        }
        Ok(())
    }
}

/// Control signal for in-painting: the topmost cGMM activities of the
/// occluded images.
pub fn inpaint_control(
    model: &DcgmmModel,
    images: &Tensor4,
    mask: &InpaintMask,
) -> Result<Tensor4> {
    let occluded = mask.occlude(images)?;
    let mut trace = model.forward(&occluded)?;
    Ok(trace.activities.swap_remove(model.top_cgmm()))
}

/// Completes the unknown pixels of `images` from the model.
pub fn inpaint(
    model: &DcgmmModel,
    images: &Tensor4,
    mask: &InpaintMask,
    sampler: &SamplerConfig,
    sharpening: &SharpenConfig,
) -> Result<Tensor4> {
    if mask.known.iter().all(|&k| k) {
        mask.check(images.shape())?;
        return Ok(images.clone());
    }
    let control = inpaint_control(model, images, mask)?;
    inpaint_with_control(model, images, mask, control, sampler, sharpening)
}

/// In-painting driven by an explicit topmost-cGMM control signal.
pub fn inpaint_with_control(
    model: &DcgmmModel,
    images: &Tensor4,
    mask: &InpaintMask,
    control: Tensor4,
    sampler: &SamplerConfig,
    sharpening: &SharpenConfig,
) -> Result<Tensor4> {
    let generated = model.backward_from(
        model.top_cgmm(),
        Some(control),
        images.n(),
        sampler,
        sharpening,
    )?;
    mask.merge(images, &generated)
}
