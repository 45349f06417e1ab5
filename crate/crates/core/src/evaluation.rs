//! Outlier detection curves, an EM reference fit and centroid export.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gmm::{kmeans_pp, Mixture, MAX_PRECISION, MIN_PRECISION};
use crate::layers::{folding_source_index, LayerSpec};
use crate::model::DcgmmModel;
use crate::tensor::{log_sum_exp, Shape3, Tensor4};
use crate::training::sample_scores;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub kept_inlier: f64,
    pub rejected_outlier: f64,
}

/// Samples scoring at or above a threshold are kept as inliers.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Ascending thresholds from `-inf` to `+inf`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// Builds the curve from inlier and outlier scores (higher = more typical).
    pub fn from_scores(inliers: &[f64], outliers: &[f64]) -> Result<Self> {
        if inliers.is_empty() || outliers.is_empty() {
            return Err(Error::EmptyInput);
        }
        if inliers.iter().chain(outliers).any(|s| s.is_nan()) {
            return Err(Error::InvalidArgument("scores must not be NaN".into()));
        }
        let mut a = inliers.to_vec();
        let mut b = outliers.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let mut thresholds: Vec<f64> = a.iter().chain(&b).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        thresholds.insert(0, f64::NEG_INFINITY);
        thresholds.push(f64::INFINITY);
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let points: Vec<RocPoint> = thresholds
            .iter()
            .map(|&t| {
                let below_a = a.partition_point(|&s| s < t);
                let below_b = b.partition_point(|&s| s < t);
                RocPoint {
                    threshold: t,
                    kept_inlier: (a.len() - below_a) as f64 / na,
                    rejected_outlier: below_b as f64 / nb,
                }
            })
            .collect();
        let auc = points
            .windows(2)
            .map(|w| {
                let dx = w[1].rejected_outlier - w[0].rejected_outlier;
                dx * 0.5 * (w[0].kept_inlier + w[1].kept_inlier)
            })
            .sum();
        Ok(Self { points, auc })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,kept_inlier,rejected_outlier\n");
        for p in &self.points {
            writeln!(
                out,
                "{:e},{},{}",
                p.threshold, p.kept_inlier, p.rejected_outlier
            )
            .expect("string write");
        }
        out
    }
}

/// ROC curve of cGMM layer `layer`'s per-sample loss on inliers vs outliers.
pub fn outlier_roc(
    model: &DcgmmModel,
    layer: usize,
    inliers: &Tensor4,
    outliers: &Tensor4,
    batch_size: usize,
) -> Result<RocCurve> {
    if !model.layers().get(layer).is_some_and(|l| l.is_cgmm()) {
        return Err(Error::InvalidArgument(format!(
            "layer {} is not a cGMM layer",
            layer + 1
        )));
    }
    let score = |data: &Tensor4| -> Result<Vec<f64>> {
        let all = sample_scores(model, data, batch_size)?;
        Ok(all
            .into_iter()
            .find(|(l, _)| *l == layer)
            .expect("cGMM layer")
            .1)
    };
    RocCurve::from_scores(&score(inliers)?, &score(outliers)?)
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub mixture: Mixture,
    /// Mean log-likelihood of the data under the fit.
    pub log_likelihood: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Diagonal-covariance EM on `data` (row-major `n x d`), restarted
/// `restarts` times from different seeds; the fit with the highest
/// likelihood wins.
pub fn em_oracle(
    data: &[f64],
    d: usize,
    k: usize,
    max_iterations: usize,
    seed: u64,
    restarts: usize,
) -> Result<EmFit> {
    let mut best: Option<EmFit> = None;
    for r in 0..restarts.max(1) {
        let fit = em_once(data, d, k, max_iterations, seed.wrapping_add(r as u64))?;
        if best
            .as_ref()
            .is_none_or(|b| fit.log_likelihood > b.log_likelihood)
        {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one run"))
}

fn em_once(data: &[f64], d: usize, k: usize, max_iterations: usize, seed: u64) -> Result<EmFit> {
    if d == 0 || k == 0 || !data.len().is_multiple_of(d) {
        return Err(Error::InvalidArgument(
            "data length must be a multiple of d >= 1".into(),
        ));
    }
    let n = data.len() / d;
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "{n} samples for {k} components"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mu = kmeans_pp(data, d, k, &mut rng);
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64)
        .collect();
    let var: Vec<f64> = (0..d)
        .map(|j| {
            (0..n)
                .map(|i| (data[i * d + j] - mean[j]).powi(2))
                .sum::<f64>()
                / n as f64
        })
        .collect();
    let clamp_p = |v: f64| (1.0 / v).clamp(MIN_PRECISION, MAX_PRECISION);
    let mut prec: Vec<f64> = (0..k)
        .flat_map(|_| var.iter().map(|&v| clamp_p(v)))
        .collect();
    let mut weights = vec![1.0 / k as f64; k];
    let mut resp = vec![0.0; n * k];
    let mut previous = f64::NEG_INFINITY;
    let mut ll = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut joint = vec![0.0; k];
    while iterations < max_iterations {
        iterations += 1;
        // E step
        let mut total = 0.0;
        for i in 0..n {
            let x = &data[i * d..(i + 1) * d];
            for c in 0..k {
                let m = &mu[c * d..(c + 1) * d];
                let p = &prec[c * d..(c + 1) * d];
                let mut s = weights[c].ln() - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
                for j in 0..d {
                    s += 0.5 * p[j].ln() - 0.5 * p[j] * (x[j] - m[j]).powi(2);
                }
                joint[c] = s;
            }
            let lse = log_sum_exp(&joint)?;
            total += lse;
            for c in 0..k {
                resp[i * k + c] = (joint[c] - lse).exp();
            }
        }
        ll = total / n as f64;
        // M step
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk < 1e-10 {
                let pick = rng.random_range(0..n);
                mu[c * d..(c + 1) * d].copy_from_slice(&data[pick * d..(pick + 1) * d]);
                for j in 0..d {
                    prec[c * d + j] = clamp_p(var[j]);
                }
                weights[c] = 1.0 / n as f64;
                continue;
            }
            weights[c] = nk / n as f64;
            for j in 0..d {
                let m = (0..n)
                    .map(|i| resp[i * k + c] * data[i * d + j])
                    .sum::<f64>()
                    / nk;
                mu[c * d + j] = m;
            }
            for j in 0..d {
                let m = mu[c * d + j];
                let v = (0..n)
                    .map(|i| resp[i * k + c] * (data[i * d + j] - m).powi(2))
                    .sum::<f64>()
                    / nk;
                prec[c * d + j] = clamp_p(v);
            }
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
        if (ll - previous).abs() <= 1e-10 * ll.abs().max(1.0) {
            break;
        }
        previous = ll;
    }
    Ok(EmFit {
        mixture: Mixture::from_parts(&weights, &mu, &prec)?,
        log_likelihood: ll,
        iterations,
    })
}

/// Smallest mean and largest L2 distance between two centroid sets under the
/// best one-to-one matching (exhaustive search, so intended for small `k`).
pub fn matched_centroid_distance(a: &[f64], b: &[f64], d: usize) -> (f64, f64) {
    let k = a.len() / d;
    assert_eq!(a.len(), b.len(), "centroid sets differ in size");
    let dist: Vec<f64> = (0..k * k)
        .map(|ij| {
            sq_dist(
                &a[(ij / k) * d..(ij / k + 1) * d],
                &b[(ij % k) * d..(ij % k + 1) * d],
            )
            .sqrt()
        })
        .collect();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = (f64::INFINITY, f64::INFINITY);
    permute(&mut perm, 0, &mut |p| {
        let ds = p.iter().enumerate().map(|(i, &j)| dist[i * k + j]);
        let (sum, max) = ds.fold((0.0, 0.0f64), |(s, m), v| (s + v, m.max(v)));
        if max < best.1 || (max == best.1 && sum / k as f64 <= best.0) {
            best = (sum / k as f64, max);
        }
    });
    best
}

fn permute(v: &mut Vec<usize>, at: usize, visit: &mut impl FnMut(&[usize])) {
    if at == v.len() {
        visit(v);
        return;
    }
    for i in at..v.len() {
        v.swap(at, i);
        permute(v, at + 1, visit);
        v.swap(at, i);
    }
}

/// Centroids of a cGMM layer reshaped to the patches they describe.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphabetSheet {
    /// One `f x f x C` patch per component.
    pub patches: Tensor4,
}

pub fn export_alphabet(model: &DcgmmModel, layer: usize) -> Result<AlphabetSheet> {
    let layers = model.layers();
    let params = model.cgmm(layer).ok_or_else(|| {
        Error::InvalidArgument(format!("layer {} is not a cGMM layer", layer + 1))
    })?;
    let Some(&LayerSpec::Folding { f, stride }) = layer.checked_sub(1).and_then(|i| layers.get(i))
    else {
        return Err(Error::InvalidArgument(format!(
            "layer {} is not fed by a folding layer",
            layer + 1
        )));
    };
    let c_in = model.shapes()[layer - 1].c;
    let patch = Shape3::new(f, f, c_in);
    let mixture = &params.mixtures()[0];
    let mut out = Tensor4::zeros(params.k(), patch);
    for k in 0..params.k() {
        let mu = mixture.centroid(k);
        for (c, &v) in mu.iter().enumerate() {
            let (h, w, ch) = folding_source_index(f, stride, c_in, (0, 0, c));
            out.channel_vector_mut(k, h, w)?[ch] = v;
        }
    }
    Ok(AlphabetSheet { patches: out })
}
