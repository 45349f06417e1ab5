//! Linear softmax classifier on the flattened activities of the layer below,
//! with an approximate inversion used to turn a class into a control signal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax, Shape3, Tensor4};

/// Floor applied to control entries before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-3;
/// Minimum entry of an inverted control signal.
pub const MIN_CONTROL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    in_dim: usize,
    classes: usize,
    /// Row-major `in_dim x classes`.
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl ClassifierParams {
    pub fn zeros(in_dim: usize, classes: usize) -> Self {
        Self {
            in_dim,
            classes,
            weights: vec![0.0; in_dim * classes],
            bias: vec![0.0; classes],
        }
    }

    pub fn from_parts(
        in_dim: usize,
        classes: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if weights.len() != in_dim * classes {
            return Err(Error::DimensionMismatch {
                expected: in_dim * classes,
                actual: weights.len(),
            });
        }
        if bias.len() != classes {
            return Err(Error::DimensionMismatch {
                expected: classes,
                actual: bias.len(),
            });
        }
        Ok(Self {
            in_dim,
            classes,
            weights,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    fn check_input(&self, input: &Tensor4) -> Result<()> {
        if input.shape().len() != self.in_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} flattened entries", self.in_dim),
                actual: input.shape().to_string(),
            });
        }
        Ok(())
    }

    fn logits(&self, x: &[f32]) -> Vec<f64> {
        let mut z: Vec<f64> = self.bias.iter().map(|&b| b as f64).collect();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.classes..(i + 1) * self.classes];
            for (zs, &w) in z.iter_mut().zip(row) {
                *zs += xi as f64 * w as f64;
            }
        }
        z
    }

    /// Class probabilities, shape `n x 1 x 1 x S`.
    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        self.check_input(input)?;
        let mut out = Vec::with_capacity(input.n() * self.classes);
        for n in 0..input.n() {
            out.extend(
                softmax(&self.logits(input.sample(n)))
                    .into_iter()
                    .map(|p| p as f32),
            );
        }
        Tensor4::from_vec(input.n(), Shape3::new(1, 1, self.classes), out)
    }

    /// Inverts one probability vector `t` into a strictly positive control
    /// signal of shape `in_shape`. Returns the signal and the offset `c`.
    pub fn backward(&self, t: &[f64], in_shape: Shape3) -> Result<(Vec<f64>, f64)> {
        if t.len() != self.classes {
            return Err(Error::DimensionMismatch {
                expected: self.classes,
                actual: t.len(),
            });
        }
        if in_shape.len() != self.in_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} entries", self.in_dim),
                actual: in_shape.to_string(),
            });
        }
        let total: f64 = t.iter().sum();
        if t.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidControl(format!(
                "classifier control must be a probability vector (sum {total})"
            )));
        }
        let s = self.classes as f64;
        let shifted: Vec<f64> = t
            .iter()
            .zip(&self.bias)
            .map(|(&v, &b)| ((1.0 - s * LOG_FLOOR) * v + LOG_FLOOR).ln() - b as f64)
            .collect();
        let u: Vec<f64> = self
            .weights
            .chunks(self.classes)
            .map(|row| row.iter().zip(&shifted).map(|(&w, &v)| w as f64 * v).sum())
            .collect();
        let min = u.iter().copied().fold(f64::INFINITY, f64::min);
        let c = MIN_CONTROL - min;
        // subtract first so the minimum lands on MIN_CONTROL without rounding
        Ok((u.iter().map(|&v| (v - min) + MIN_CONTROL).collect(), c))
    }

    /// Mean cross-entropy of a batch and the number of correct argmax predictions.
    pub fn cross_entropy(&self, input: &Tensor4, labels: &[u8]) -> Result<(f64, usize)> {
        let probs = self.forward(input)?;
        self.check_labels(input, labels)?;
        let mut loss = 0.0;
        let mut correct = 0;
        for (p, &y) in probs.data().chunks(self.classes).zip(labels) {
            loss -= (p[y as usize] as f64).max(f64::MIN_POSITIVE).ln();
            let best = p
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > p[b] { i } else { b });
            correct += (best == y as usize) as usize;
        }
        Ok((loss / input.n() as f64, correct))
    }

    fn check_labels(&self, input: &Tensor4, labels: &[u8]) -> Result<()> {
        if labels.len() != input.n() {
            return Err(Error::DimensionMismatch {
                expected: input.n(),
                actual: labels.len(),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y as usize >= self.classes) {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    /// One gradient-descent step on the batch-mean cross-entropy. Returns the
    /// loss before the step.
    pub fn descend(&mut self, input: &Tensor4, labels: &[u8], lr: f64) -> Result<f64> {
        self.check_input(input)?;
        self.check_labels(input, labels)?;
        let s = self.classes;
        let mut gw = vec![0.0f64; self.weights.len()];
        let mut gb = vec![0.0f64; s];
        let mut loss = 0.0;
        for (n, &y) in labels.iter().enumerate() {
            let x = input.sample(n);
            let mut delta = softmax(&self.logits(x));
            loss -= delta[y as usize].max(f64::MIN_POSITIVE).ln();
            delta[y as usize] -= 1.0;
            for (g, d) in gb.iter_mut().zip(&delta) {
                *g += d;
            }
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (g, d) in gw[i * s..(i + 1) * s].iter_mut().zip(&delta) {
                    *g += xi as f64 * d;
                }
            }
        }
        let step = lr / input.n() as f64;
        for (w, g) in self.weights.iter_mut().zip(&gw) {
            *w -= (step * g) as f32;
        }
        for (b, g) in self.bias.iter_mut().zip(&gb) {
            *b -= (step * g) as f32;
        }
        Ok(loss / input.n() as f64)
    }
}
