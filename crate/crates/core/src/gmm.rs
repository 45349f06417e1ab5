//! Diagonal-covariance Gaussian mixtures: densities, responsibilities, the
//! max-component log-likelihood and its analytic gradients, and sampling.
//!
//! Weights are stored as free logits (softmax gives the simplex) and
//! precisions as log-precisions. Everything is stored in `f32` and evaluated
//! in `f64`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, log_sum_exp, softmax};

/// Bounds applied to precisions by SGD updates.
pub const MIN_PRECISION: f64 = 1e-4;
pub const MAX_PRECISION: f64 = 1e6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Whether one mixture is shared by all positions of a layer or every
/// position owns its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sharing {
    Shared,
    Independent,
}

/// A component index drawn from a multinomial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentDraw(pub usize);

/// One Gaussian mixture with `k` components in `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    k: usize,
    d: usize,
    logits: Vec<f32>,
    centroids: Vec<f32>,
    log_precisions: Vec<f32>,
}

/// Gradient of the max-component log-likelihood w.r.t. the raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureGrad {
    pub logits: Vec<f64>,
    pub centroids: Vec<f64>,
    pub log_precisions: Vec<f64>,
}

impl MixtureGrad {
    pub fn zeros(k: usize, d: usize) -> Self {
        MixtureGrad {
            logits: vec![0.0; k],
            centroids: vec![0.0; k * d],
            log_precisions: vec![0.0; k * d],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.logits
            .iter_mut()
            .chain(&mut self.centroids)
            .chain(&mut self.log_precisions)
            .for_each(|g| *g *= factor);
    }
}

impl Mixture {
    /// Untrained mixture: centroids uniform in (-0.01, 0.01), equal weights,
    /// unit precisions.
    pub fn init<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Self {
        let centroids = (0..k * d)
            .map(|_| rng.random_range(-0.01f32..0.01))
            .collect();
        Mixture {
            k,
            d,
            logits: vec![0.0; k],
            centroids,
            log_precisions: vec![0.0; k * d],
        }
    }

    /// Builds a mixture from natural parameters. `weights` need not be
    /// normalized but must be positive; `precisions` must be positive.
    pub fn from_parts(weights: &[f64], centroids: &[f64], precisions: &[f64]) -> Result<Self> {
        let k = weights.len();
        if k == 0 || !centroids.len().is_multiple_of(k) || centroids.is_empty() {
            return Err(Error::InvalidArgument(
                "mixture needs K >= 1 and K*D centroid values".into(),
            ));
        }
        let d = centroids.len() / k;
        if precisions.len() != k * d {
            return Err(Error::DimensionMismatch {
                expected: k * d,
                actual: precisions.len(),
            });
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite()))
            || precisions.iter().any(|&p| !(p > 0.0 && p.is_finite()))
        {
            return Err(Error::InvalidArgument(
                "weights and precisions must be positive and finite".into(),
            ));
        }
        Ok(Mixture {
            k,
            d,
            logits: weights.iter().map(|w| w.ln() as f32).collect(),
            centroids: centroids.iter().map(|&m| m as f32).collect(),
            log_precisions: precisions.iter().map(|p| p.ln() as f32).collect(),
        })
    }

    pub(crate) fn from_raw(
        k: usize,
        d: usize,
        logits: Vec<f32>,
        centroids: Vec<f32>,
        log_precisions: Vec<f32>,
    ) -> Result<Self> {
        if logits.len() != k || centroids.len() != k * d || log_precisions.len() != k * d {
            return Err(Error::DimensionMismatch {
                expected: k * (2 * d + 1),
                actual: logits.len() + centroids.len() + log_precisions.len(),
            });
        }
        Ok(Mixture {
            k,
            d,
            logits,
            centroids,
            log_precisions,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Replaces all centroids (row-major `k x d`).
    pub fn set_centroids(&mut self, centroids: &[f64]) -> Result<()> {
        if centroids.len() != self.k * self.d {
            return Err(Error::DimensionMismatch {
                expected: self.k * self.d,
                actual: centroids.len(),
            });
        }
        for (c, &v) in self.centroids.iter_mut().zip(centroids) {
            *c = v as f32;
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, k: usize) -> &[f32] {
        &self.centroids[k * self.d..(k + 1) * self.d]
    }

    pub fn log_precisions(&self) -> &[f32] {
        &self.log_precisions
    }

    #[cfg(test)]
    pub(crate) fn raw_mut(&mut self) -> (&mut [f32], &mut [f32], &mut [f32]) {
        (
            &mut self.logits,
            &mut self.centroids,
            &mut self.log_precisions,
        )
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits.iter().map(|&l| l as f64).collect::<Vec<_>>())
    }

    pub fn precisions(&self) -> Vec<f64> {
        self.log_precisions
            .iter()
            .map(|&s| (s as f64).exp())
            .collect()
    }

    /// Precomputes the `f64` views used by all evaluations.
    pub fn prepare(&self) -> PreparedMixture {
        let logits: Vec<f64> = self.logits.iter().map(|&l| l as f64).collect();
        let lse = log_sum_exp(&logits).expect("K >= 1");
        let precisions = self.precisions();
        let log_norm = (0..self.k)
            .map(|k| {
                let s: f64 = self.log_precisions[k * self.d..(k + 1) * self.d]
                    .iter()
                    .map(|&s| s as f64)
                    .sum();
                0.5 * s - self.d as f64 * HALF_LN_2PI
            })
            .collect();
        PreparedMixture {
            k: self.k,
            d: self.d,
            log_weights: logits.iter().map(|l| l - lse).collect(),
            weights: softmax(&logits),
            centroids: self.centroids.iter().map(|&m| m as f64).collect(),
            precisions,
            log_norm,
        }
    }

    /// Applies one gradient-ascent step. Log-precisions are kept inside the
    /// precision bounds.
    pub fn ascend(
        &mut self,
        grad: &MixtureGrad,
        lr_logits: f64,
        lr_centroids: f64,
        lr_precisions: f64,
    ) {
        for (p, g) in self.logits.iter_mut().zip(&grad.logits) {
            *p = (*p as f64 + lr_logits * g) as f32;
        }
        for (p, g) in self.centroids.iter_mut().zip(&grad.centroids) {
            *p = (*p as f64 + lr_centroids * g) as f32;
        }
        let (lo, hi) = (MIN_PRECISION.ln(), MAX_PRECISION.ln());
        for (p, g) in self.log_precisions.iter_mut().zip(&grad.log_precisions) {
            *p = (*p as f64 + lr_precisions * g).clamp(lo, hi) as f32;
        }
    }

    pub fn component_log_density(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.prepare().component_log_density(x)
    }

    pub fn responsibilities(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.prepare().responsibilities(x)
    }

    pub fn log_likelihood(&self, x: &[f32]) -> Result<f64> {
        self.prepare().log_likelihood(x)
    }

    pub fn max_component_log_likelihood(&self, x: &[f32]) -> Result<f64> {
        self.prepare().max_component_log_likelihood(x)
    }

    pub fn loss_gradients(&self, x: &[f32]) -> Result<MixtureGrad> {
        let prepared = self.prepare();
        let mut grad = MixtureGrad::zeros(self.k, self.d);
        prepared.accumulate_loss_gradient(x, 1.0, &mut grad)?;
        Ok(grad)
    }

    pub fn input_gradient(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.prepare().input_gradient(x)
    }

    pub fn sample_component<R: Rng + ?Sized>(
        &self,
        control: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f32>> {
        self.prepare().sample_component(control, 1.0, rng)
    }
}

/// `f64` snapshot of a [`Mixture`] with per-component constants cached.
#[derive(Debug, Clone)]
pub struct PreparedMixture {
    k: usize,
    d: usize,
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    centroids: Vec<f64>,
    precisions: Vec<f64>,
    log_norm: Vec<f64>,
}

impl PreparedMixture {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.d..(k + 1) * self.d]
    }

    pub fn precision(&self, k: usize) -> &[f64] {
        &self.precisions[k * self.d..(k + 1) * self.d]
    }

    fn check(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Precision-weighted squared distance of `x` to centroid `k`.
    #[inline]
    fn mahalanobis(&self, x: &[f64], k: usize) -> f64 {
        let mu = self.centroid(k);
        let p = self.precision(k);
        let mut acc = [0.0f64; 4];
        let chunks = x.len() / 4 * 4;
        for i in (0..chunks).step_by(4) {
            for j in 0..4 {
                let diff = x[i + j] - mu[i + j];
                acc[j] += p[i + j] * diff * diff;
            }
        }
        let mut tail = 0.0;
        for i in chunks..x.len() {
            let diff = x[i] - mu[i];
            tail += p[i] * diff * diff;
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }

    /// Writes `log N_k(x)` into `out` (length K); `x` is already widened.
    fn log_densities_into(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.log_norm[k] - 0.5 * self.mahalanobis(x, k);
        }
    }

    /// Writes `log pi_k + log N_k(x)` into `out`.
    pub fn log_joint_into(&self, x: &[f32], widened: &mut Vec<f64>, out: &mut [f64]) -> Result<()> {
        self.check(x)?;
        widened.clear();
        widened.extend(x.iter().map(|&v| v as f64));
        self.log_densities_into(widened, out);
        for (o, lw) in out.iter_mut().zip(&self.log_weights) {
            *o += lw;
        }
        Ok(())
    }

    pub fn log_joint(&self, x: &[f32]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.k];
        self.log_joint_into(x, &mut Vec::with_capacity(self.d), &mut out)?;
        Ok(out)
    }

    pub fn component_log_density(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check(x)?;
        let widened: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut out = vec![0.0; self.k];
        self.log_densities_into(&widened, &mut out);
        Ok(out)
    }

    pub fn responsibilities(&self, x: &[f32]) -> Result<Vec<f64>> {
        let joint = self.log_joint(x)?;
        Ok(responsibilities_from_joint(&joint))
    }

    pub fn log_likelihood(&self, x: &[f32]) -> Result<f64> {
        log_sum_exp(&self.log_joint(x)?)
    }

    pub fn max_component_log_likelihood(&self, x: &[f32]) -> Result<f64> {
        let joint = self.log_joint(x)?;
        Ok(joint[argmax(&joint)])
    }

    /// Adds `weight * d/dtheta log max_k pi_k N_k(x)` to `grad` and returns
    /// the max-component log-likelihood.
    pub fn accumulate_loss_gradient(
        &self,
        x: &[f32],
        weight: f64,
        grad: &mut MixtureGrad,
    ) -> Result<f64> {
        let joint = self.log_joint(x)?;
        let best = argmax(&joint);
        self.accumulate_for_component(x, best, weight, grad);
        Ok(joint[best])
    }

    /// Gradient accumulation when the winning component is already known.
    pub fn accumulate_for_component(
        &self,
        x: &[f32],
        best: usize,
        weight: f64,
        grad: &mut MixtureGrad,
    ) {
        for (j, g) in grad.logits.iter_mut().enumerate() {
            let onehot = if j == best { 1.0 } else { 0.0 };
            *g += weight * (onehot - self.weights[j]);
        }
        let mu = self.centroid(best);
        let p = self.precision(best);
        let range = best * self.d..(best + 1) * self.d;
        let gmu = &mut grad.centroids[range.clone()];
        for i in 0..self.d {
            gmu[i] += weight * p[i] * (x[i] as f64 - mu[i]);
        }
        let gs = &mut grad.log_precisions[range];
        for i in 0..self.d {
            let diff = x[i] as f64 - mu[i];
            gs[i] += weight * 0.5 * (1.0 - p[i] * diff * diff);
        }
    }

    /// Gradient of the max-component log-likelihood w.r.t. `x`.
    pub fn input_gradient(&self, x: &[f32]) -> Result<Vec<f64>> {
        let joint = self.log_joint(x)?;
        let best = argmax(&joint);
        let mu = self.centroid(best);
        let p = self.precision(best);
        Ok((0..self.d).map(|i| p[i] * (mu[i] - x[i] as f64)).collect())
    }

    /// Draws a component from the (unnormalized) control weights.
    pub fn sample_latent<R: Rng + ?Sized>(
        &self,
        control: &[f64],
        rng: &mut R,
    ) -> Result<LatentDraw> {
        if control.len() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                actual: control.len(),
            });
        }
        draw_categorical(control, rng).map(LatentDraw)
    }

    /// Draws `z ~ M(control)` and then `x ~ N(mu_z, variance_scale / p_z)`.
    pub fn sample_component<R: Rng + ?Sized>(
        &self,
        control: &[f64],
        variance_scale: f64,
        rng: &mut R,
    ) -> Result<Vec<f32>> {
        let z = self.sample_latent(control, rng)?;
        Ok(self.sample_from(z, variance_scale, rng))
    }

    pub fn sample_from<R: Rng + ?Sized>(
        &self,
        z: LatentDraw,
        variance_scale: f64,
        rng: &mut R,
    ) -> Vec<f32> {
        let mu = self.centroid(z.0);
        let p = self.precision(z.0);
        (0..self.d)
            .map(|i| {
                let eps: f64 = rng.sample(StandardNormal);
                (mu[i] + (variance_scale / p[i]).sqrt() * eps) as f32
            })
            .collect()
    }
}

/// Posterior probabilities from log joint values.
pub fn responsibilities_from_joint(joint: &[f64]) -> Vec<f64> {
    softmax(joint)
}

/// Samples an index proportionally to non-negative weights.
pub fn draw_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidControl(
            "control entries must be finite and non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidControl(
            "control has no positive entry".into(),
        ));
    }
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cum += w / total;
            last = i;
            if u < cum {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

/// A layer's mixture parameters: one shared mixture or one per position.
#[derive(Debug, Clone, PartialEq)]
pub struct CgmmParams {
    sharing: Sharing,
    mixtures: Vec<Mixture>,
}

impl CgmmParams {
    pub fn init<R: Rng + ?Sized>(
        k: usize,
        d: usize,
        sharing: Sharing,
        positions: usize,
        rng: &mut R,
    ) -> Self {
        let count = match sharing {
            Sharing::Shared => 1,
            Sharing::Independent => positions,
        };
        CgmmParams {
            sharing,
            mixtures: (0..count).map(|_| Mixture::init(k, d, rng)).collect(),
        }
    }

    pub fn shared(mixture: Mixture) -> Self {
        CgmmParams {
            sharing: Sharing::Shared,
            mixtures: vec![mixture],
        }
    }

    pub fn independent(mixtures: Vec<Mixture>) -> Result<Self> {
        let first = mixtures.first().ok_or(Error::EmptyInput)?;
        if mixtures.iter().any(|m| m.k != first.k || m.d != first.d) {
            return Err(Error::InvalidArgument(
                "independent mixtures must share K and D".into(),
            ));
        }
        Ok(CgmmParams {
            sharing: Sharing::Independent,
            mixtures,
        })
    }

    pub fn sharing(&self) -> Sharing {
        self.sharing
    }

    pub fn k(&self) -> usize {
        self.mixtures[0].k
    }

    pub fn d(&self) -> usize {
        self.mixtures[0].d
    }

    pub fn mixtures(&self) -> &[Mixture] {
        &self.mixtures
    }

    pub fn mixtures_mut(&mut self) -> &mut [Mixture] {
        &mut self.mixtures
    }

    /// Mixture responsible for flat position index `pos` (= h * W + w).
    pub fn mixture(&self, pos: usize) -> &Mixture {
        match self.sharing {
            Sharing::Shared => &self.mixtures[0],
            Sharing::Independent => &self.mixtures[pos],
        }
    }

    pub fn prepare(&self) -> PreparedParams {
        PreparedParams {
            sharing: self.sharing,
            mixtures: self.mixtures.iter().map(Mixture::prepare).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedParams {
    sharing: Sharing,
    mixtures: Vec<PreparedMixture>,
}

impl PreparedParams {
    pub fn mixture(&self, pos: usize) -> &PreparedMixture {
        match self.sharing {
            Sharing::Shared => &self.mixtures[0],
            Sharing::Independent => &self.mixtures[pos],
        }
    }

    pub fn k(&self) -> usize {
        self.mixtures[0].k
    }

    pub fn d(&self) -> usize {
        self.mixtures[0].d
    }

    pub fn sharing(&self) -> Sharing {
        self.sharing
    }

    pub fn count(&self) -> usize {
        self.mixtures.len()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding on row-major `n x d` data: the first centre uniformly,
/// the rest proportional to the squared distance from the nearest chosen
/// centre.
pub fn kmeans_pp<R: Rng + ?Sized>(data: &[f64], d: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = data.len() / d;
    let row = |i: usize| &data[i * d..(i + 1) * d];
    // greedy variant: several candidates per step, keep the one that lowers
    // the total potential most
    let trials = 2 + (k as f64).ln() as usize;
    let mut centres = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centres.extend_from_slice(row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                nearest
                    .iter()
                    .position(|&w| {
                        acc += w;
                        acc > u
                    })
                    .unwrap_or(n - 1)
            } else {
                rng.random_range(0..n)
            };
            let updated: Vec<f64> = nearest
                .iter()
                .enumerate()
                .map(|(i, &w)| w.min(sq_dist(row(i), row(pick))))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|(p, _, _)| potential < *p) {
                best = Some((potential, pick, updated));
            }
        }
        let (_, pick, updated) = best.expect("at least one trial");
        centres.extend_from_slice(row(pick));
        nearest = updated;
    }
    centres
}

/// `log N(x; mu, diag(1/p))` for a single Gaussian, used as a reference.
pub fn gaussian_log_density(x: &[f64], mu: &[f64], p: &[f64]) -> f64 {
    -0.5 * x
        .iter()
        .zip(mu)
        .zip(p)
        .map(|((x, m), p)| p * (x - m) * (x - m) - p.ln() + (2.0 * PI).ln())
        .sum::<f64>()
}
