//! Layer types: folding (half-convolution), max-pooling, convolutional GMM
//! and linear classification. Each has a forward transform and a backwards
//! transform of control signals.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::Sharing;
use crate::tensor::Shape3;

pub mod cgmm;
pub mod classifier;
pub mod folding;
pub mod pooling;

pub use cgmm::{
    cgmm_backward, cgmm_forward, cgmm_input_gradient, cgmm_loss_input_gradient, CgmmForward,
};
pub use classifier::ClassifierParams;
pub use folding::{folding_backward, folding_forward, folding_scatter_add, folding_source_index};
pub use pooling::{pooling_backward, pooling_forward, pooling_route_gradient, PoolForward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Folding { f: usize, stride: usize },
    Pooling { f: usize, stride: usize },
    Cgmm { k: usize, sharing: Sharing },
    Classifier { classes: usize },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Folding { f: k, stride } => write!(f, "F({k},{stride})"),
            LayerSpec::Pooling { f: k, stride } => write!(f, "P({k},{stride})"),
            LayerSpec::Cgmm {
                k,
                sharing: Sharing::Shared,
            } => write!(f, "G({k})"),
            LayerSpec::Cgmm {
                k,
                sharing: Sharing::Independent,
            } => write!(f, "G({k})i"),
            LayerSpec::Classifier { classes } => write!(f, "C({classes})"),
        }
    }
}

impl LayerSpec {
    /// Checks the parameter ranges of a single layer.
    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::Config {
                index,
                token: self.to_string(),
                reason: reason.to_string(),
            })
        };
        match *self {
            LayerSpec::Folding { f, stride } | LayerSpec::Pooling { f, stride } => {
                if f == 0 || stride == 0 {
                    return bad("kernel size and stride must be >= 1");
                }
            }
            LayerSpec::Cgmm { k, .. } => {
                if k == 0 {
                    return bad("K must be >= 1");
                }
            }
            LayerSpec::Classifier { classes } => {
                if classes < 2 {
                    return bad("a classifier needs S >= 2 classes");
                }
            }
        }
        Ok(())
    }

    /// Shape of the forward activities for an input of shape `input`.
    /// `index` is the 1-based layer position used in error messages.
    pub fn output_shape(&self, input: Shape3, index: usize) -> Result<Shape3> {
        self.validate(index)?;
        match *self {
            LayerSpec::Folding { f, stride } | LayerSpec::Pooling { f, stride } => {
                if f > input.h || f > input.w {
                    return Err(Error::Config {
                        index,
                        token: self.to_string(),
                        reason: format!("kernel {f} larger than input {input}"),
                    });
                }
                if !(input.h - f).is_multiple_of(stride) || !(input.w - f).is_multiple_of(stride) {
                    log::warn!(
                        "layer {index} ({self}): stride {stride} does not tile input {input}; \
                         trailing rows/columns are dropped"
                    );
                }
                let h = 1 + (input.h - f) / stride;
                let w = 1 + (input.w - f) / stride;
                let c = match self {
                    LayerSpec::Folding { .. } => f * f * input.c,
                    _ => input.c,
                };
                Ok(Shape3::new(h, w, c))
            }
            LayerSpec::Cgmm { k, .. } => Ok(Shape3::new(input.h, input.w, k)),
            LayerSpec::Classifier { classes } => Ok(Shape3::new(1, 1, classes)),
        }
    }

    pub fn is_cgmm(&self) -> bool {
        matches!(self, LayerSpec::Cgmm { .. })
    }
}
