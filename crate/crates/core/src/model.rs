//! Layer stacks built from the architecture DSL, e.g. `F(3,1)-G(25)-P(2,2)-G(49)i-C(10)`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{sharpen, SamplerConfig, SharpenConfig};
use crate::gmm::{CgmmParams, Sharing};
use crate::layers::{
    cgmm_backward, cgmm_forward, folding_backward, folding_forward, pooling_backward,
    pooling_forward, ClassifierParams, LayerSpec,
};
use crate::tensor::{Shape3, Tensor4};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub input_shape: Shape3,
    pub layers: Vec<LayerSpec>,
}

/// Parses an architecture string and validates it against `input_shape`.
pub fn parse_config(text: &str, input_shape: Shape3) -> Result<ModelConfig> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if compact.is_empty() {
        return Err(Error::Config {
            index: 0,
            token: String::new(),
            reason: "empty architecture".into(),
        });
    }
    let layers = compact
        .split('-')
        .enumerate()
        .map(|(i, token)| parse_layer(token, i + 1))
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        name: compact,
        input_shape,
        layers,
    };
    config.shapes()?;
    Ok(config)
}

fn parse_layer(token: &str, index: usize) -> Result<LayerSpec> {
    let bad = |reason: &str| Error::Config {
        index,
        token: token.to_string(),
        reason: reason.to_string(),
    };
    let mut chars = token.chars();
    let kind = chars.next().ok_or_else(|| bad("empty layer token"))?;
    let rest = chars.as_str();
    let close = rest.find(')').ok_or_else(|| bad("missing ')'"))?;
    let inner = rest
        .strip_prefix('(')
        .map(|r| &r[..close - 1])
        .ok_or_else(|| bad("expected '(' after layer letter"))?;
    let suffix = &rest[close + 1..];
    let args = inner
        .split(',')
        .map(|a| {
            a.parse::<usize>()
                .map_err(|_| bad("arguments must be non-negative integers"))
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = match (kind, args.as_slice(), suffix) {
        ('F', &[f, stride], "") => LayerSpec::Folding { f, stride },
        ('P', &[f, stride], "") => LayerSpec::Pooling { f, stride },
        ('G', &[k], "") => LayerSpec::Cgmm {
            k,
            sharing: Sharing::Shared,
        },
        ('G', &[k], "i") => LayerSpec::Cgmm {
            k,
            sharing: Sharing::Independent,
        },
        ('C', &[classes], "") => LayerSpec::Classifier { classes },
        ('F' | 'P', _, "") => return Err(bad("expects two arguments (f,stride)")),
        ('G' | 'C', _, "" | "i") => return Err(bad("expects one argument")),
        ('F' | 'P' | 'G' | 'C', _, _) => return Err(bad("unexpected trailing characters")),
        _ => return Err(bad("unknown layer type; expected F, P, G or C")),
    };
    spec.validate(index)?;
    Ok(spec)
}

/// Parameter counts of a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCount {
    /// Centroid values of all cGMM layers plus classifier weights and biases.
    pub centroids: usize,
    /// Every trainable value, including mixture weights and precisions.
    pub total: usize,
}

impl ModelConfig {
    /// The architecture string.
    pub fn arch(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    /// Input shape followed by the output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<Shape3>> {
        let mut shapes = vec![self.input_shape];
        let last = self.layers.len();
        let mut cgmm = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Classifier { .. } = layer {
                if i + 1 != last {
                    return Err(Error::Config {
                        index: i + 1,
                        token: layer.to_string(),
                        reason: "a classifier may only be the final layer".into(),
                    });
                }
            }
            cgmm += layer.is_cgmm() as usize;
            let next = layer.output_shape(shapes[i], i + 1)?;
            shapes.push(next);
        }
        if cgmm == 0 {
            return Err(Error::Config {
                index: 0,
                token: self.arch(),
                reason: "at least one G layer is required".into(),
            });
        }
        Ok(shapes)
    }

    pub fn count_parameters(&self) -> Result<ParameterCount> {
        let shapes = self.shapes()?;
        let mut count = ParameterCount {
            centroids: 0,
            total: 0,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let input = shapes[i];
            match *layer {
                LayerSpec::Cgmm { k, sharing } => {
                    let copies = match sharing {
                        Sharing::Shared => 1,
                        Sharing::Independent => input.positions(),
                    };
                    count.centroids += copies * k * input.c;
                    count.total += copies * k * (2 * input.c + 1);
                }
                LayerSpec::Classifier { classes } => {
                    count.centroids += classes * (input.len() + 1);
                    count.total += classes * (input.len() + 1);
                }
                _ => {}
            }
        }
        Ok(count)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} on {}", self.arch(), self.input_shape)
    }
}

/// A named architecture with its published parameter count.
#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub arch: &'static str,
    pub published: usize,
    /// Whether the published count is reproduced by shared-mode counting.
    pub verified: bool,
    pub note: &'static str,
}

pub const PRESETS: [Preset; 7] = [
    Preset {
        name: "A",
        arch: "F(28,1)-G(49)",
        published: 38416,
        verified: true,
        note: "",
    },
    Preset {
        name: "B",
        arch: "F(8,2)-G(49)-F(11,1)-G(49)",
        published: 293657,
        verified: true,
        note: "",
    },
    Preset {
        name: "C",
        arch: "F(8,1)-G(49)-P(2,2)-G(49)",
        published: 243236,
        verified: false,
        note: "published count matches only with the top G(49) in independent mode",
    },
    Preset {
        name: "D",
        arch: "F(3,1)-G(25)-P(2,2)-F(4,1)-G(25)-P(2,2)-F(5,5)-G(49)",
        published: 40850,
        verified: true,
        note: "",
    },
    Preset {
        name: "E",
        arch: "F(3,1)-G(25)-F(4,2)-G(25)-F(12,1)-G(49)",
        published: 186625,
        verified: true,
        note: "",
    },
    Preset {
        name: "F",
        arch: "F(3,1)-G(25)-F(4,2)-G(25)-F(4,2)-G(25)-F(5,1)-G(49)",
        published: 50850,
        verified: true,
        note: "",
    },
    Preset {
        name: "G",
        arch: "F(3,1)-G(25)-P(2,2)-F(3,1)-G(25)-P(2,2)-F(3,1)-G(25)-P(2,2)-F(2,1)-G(49)",
        published: 16375,
        verified: false,
        note: "floor shape inference leaves a 1x1 input for the final F(2,1)",
    },
];

pub fn preset(name: &str) -> Option<&'static Preset> {
    let name = name.trim().trim_start_matches("DCGMM-");
    PRESETS.iter().find(|p| p.name.eq_ignore_ascii_case(name))
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Cgmm(CgmmParams),
    Classifier(ClassifierParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcgmmModel {
    config: ModelConfig,
    shapes: Vec<Shape3>,
    params: Vec<LayerParams>,
    steps_seen: Vec<u64>,
}

/// Everything produced by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Output of every layer.
    pub activities: Vec<Tensor4>,
    /// Per-sample loss of each cGMM layer; `None` for other layers.
    pub losses: Vec<Option<Vec<f64>>>,
    /// Winning component per (sample, position) of each cGMM layer.
    pub winners: Vec<Option<Vec<u32>>>,
    /// Argmax indices of each pooling layer.
    pub pool_argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardTrace {
    /// Per-sample losses of the cGMM layer at `layer`.
    pub fn loss(&self, layer: usize) -> Option<&[f64]> {
        self.losses.get(layer)?.as_deref()
    }

    pub fn mean_loss(&self, layer: usize) -> Option<f64> {
        self.loss(layer)
            .map(|l| l.iter().sum::<f64>() / l.len() as f64)
    }
}

/// The control signal that starts a backward pass.
#[derive(Debug, Clone, Copy)]
pub enum TopControl<'a> {
    /// Uniform component choice at the topmost cGMM layer.
    Uniform,
    /// One-hot class inverted through the classifier.
    Class(usize),
    /// An explicit tensor of the topmost layer's output shape.
    Signal(&'a Tensor4),
}

impl DcgmmModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let shapes = config.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| match *layer {
                LayerSpec::Cgmm { k, sharing } => {
                    let input = shapes[i];
                    LayerParams::Cgmm(CgmmParams::init(
                        k,
                        input.c,
                        sharing,
                        input.positions(),
                        &mut rng,
                    ))
                }
                LayerSpec::Classifier { classes } => {
                    LayerParams::Classifier(ClassifierParams::zeros(shapes[i].len(), classes))
                }
                _ => LayerParams::None,
            })
            .collect();
        let steps_seen = vec![0; config.layers.len()];
        Ok(Self {
            config,
            shapes,
            params,
            steps_seen,
        })
    }

    /// Assembles a model from explicit parameter blocks, checking their dimensions.
    pub fn from_parts(
        config: ModelConfig,
        params: Vec<LayerParams>,
        steps_seen: Vec<u64>,
    ) -> Result<Self> {
        let shapes = config.shapes()?;
        if params.len() != config.layers.len() || steps_seen.len() != config.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: config.layers.len(),
                actual: params.len(),
            });
        }
        for (i, (layer, p)) in config.layers.iter().zip(&params).enumerate() {
            let input = shapes[i];
            let ok = match (layer, p) {
                (LayerSpec::Cgmm { k, sharing }, LayerParams::Cgmm(c)) => {
                    let copies = match sharing {
                        Sharing::Shared => 1,
                        Sharing::Independent => input.positions(),
                    };
                    c.k() == *k
                        && c.d() == input.c
                        && c.sharing() == *sharing
                        && c.mixtures().len() == copies
                }
                (LayerSpec::Classifier { classes }, LayerParams::Classifier(c)) => {
                    c.classes() == *classes && c.in_dim() == input.len()
                }
                (LayerSpec::Folding { .. } | LayerSpec::Pooling { .. }, LayerParams::None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Config {
                    index: i + 1,
                    token: layer.to_string(),
                    reason: "parameter block does not match the layer".into(),
                });
            }
        }
        Ok(Self {
            config,
            shapes,
            params,
            steps_seen,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.config.layers
    }

    /// Input shape followed by every layer's output shape.
    pub fn shapes(&self) -> &[Shape3] {
        &self.shapes
    }

    pub fn input_shape(&self) -> Shape3 {
        self.shapes[0]
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn cgmm(&self, layer: usize) -> Option<&CgmmParams> {
        match self.params.get(layer)? {
            LayerParams::Cgmm(p) => Some(p),
            _ => None,
        }
    }

    pub fn classifier(&self) -> Option<&ClassifierParams> {
        match self.params.last()? {
            LayerParams::Classifier(c) => Some(c),
            _ => None,
        }
    }

    /// Layer indices of the cGMM layers, bottom to top.
    pub fn cgmm_layers(&self) -> Vec<usize> {
        (0..self.config.layers.len())
            .filter(|&i| self.config.layers[i].is_cgmm())
            .collect()
    }

    pub fn top_cgmm(&self) -> usize {
        *self
            .cgmm_layers()
            .last()
            .expect("validated config has a cGMM layer")
    }

    pub fn steps_seen(&self) -> &[u64] {
        &self.steps_seen
    }

    pub(crate) fn steps_seen_mut(&mut self) -> &mut [u64] {
        &mut self.steps_seen
    }

    pub fn count_parameters(&self) -> ParameterCount {
        self.config.count_parameters().expect("validated config")
    }

    pub fn forward(&self, batch: &Tensor4) -> Result<ForwardTrace> {
        if batch.shape() != self.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape().to_string(),
                actual: batch.shape().to_string(),
            });
        }
        let layers = self.config.layers.len();
        let mut trace = ForwardTrace {
            activities: Vec::with_capacity(layers),
            losses: vec![None; layers],
            winners: vec![None; layers],
            pool_argmax: vec![None; layers],
        };
        for (i, layer) in self.config.layers.iter().enumerate() {
            let input = if i == 0 {
                batch
            } else {
                &trace.activities[i - 1]
            };
            let out = match (*layer, &self.params[i]) {
                (LayerSpec::Folding { f, stride }, _) => folding_forward(f, stride, input)?,
                (LayerSpec::Pooling { f, stride }, _) => {
                    let pooled = pooling_forward(f, stride, input)?;
                    trace.pool_argmax[i] = Some(pooled.argmax);
                    pooled.activities
                }
                (LayerSpec::Cgmm { .. }, LayerParams::Cgmm(p)) => {
                    let out = cgmm_forward(&p.prepare(), input)?;
                    trace.losses[i] = Some(out.losses);
                    trace.winners[i] = Some(out.winners);
                    out.activities
                }
                (LayerSpec::Classifier { .. }, LayerParams::Classifier(c)) => c.forward(input)?,
                _ => unreachable!("parameter blocks are checked at construction"),
            };
            trace.activities.push(out);
        }
        Ok(trace)
    }

    /// Generates `n` samples by running every layer in backwards mode.
    pub fn backward(
        &self,
        top: TopControl<'_>,
        n: usize,
        sampler: &SamplerConfig,
        sharpening: &SharpenConfig,
    ) -> Result<Tensor4> {
        let last = self.config.layers.len() - 1;
        match top {
            TopControl::Uniform => self.backward_from(last, None, n, sampler, sharpening),
            TopControl::Signal(t) => {
                self.backward_from(last, Some(t.clone()), n, sampler, sharpening)
            }
            TopControl::Class(class) => {
                let classifier = self.classifier().ok_or_else(|| {
                    Error::InvalidArgument(
                        "class-conditional sampling needs a classifier layer".into(),
                    )
                })?;
                if class >= classifier.classes() {
                    return Err(Error::InvalidArgument(format!(
                        "class {class} out of range for {} classes",
                        classifier.classes()
                    )));
                }
                let mut t = vec![0.0; classifier.classes()];
                t[class] = 1.0;
                let (signal, _) = classifier.backward(&t, self.shapes[last])?;
                let one: Vec<f32> = signal.iter().map(|&v| v as f32).collect();
                let control = Tensor4::from_vec(n, self.shapes[last], one.repeat(n))?;
                if last == 0 {
                    return Err(Error::InvalidArgument(
                        "a classifier cannot be the only layer".into(),
                    ));
                }
                self.backward_from(last - 1, Some(control), n, sampler, sharpening)
            }
        }
    }

    /// Backwards pass starting at layer `start`, whose output-shaped
    /// `control` (or none, for uniform sampling) drives the pass.
    pub fn backward_from(
        &self,
        start: usize,
        mut control: Option<Tensor4>,
        n: usize,
        sampler: &SamplerConfig,
        sharpening: &SharpenConfig,
    ) -> Result<Tensor4> {
        let layers = &self.config.layers;
        if start >= layers.len() {
            return Err(Error::InvalidArgument(format!("no layer {start}")));
        }
        if let Some(t) = &control {
            let expected = self.shapes[start + 1];
            if t.shape() != expected || t.n() != n {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n} x {expected}"),
                    actual: format!("{} x {}", t.n(), t.shape()),
                });
            }
        }
        let mut streams: Vec<ChaCha8Rng> = (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
                rng.set_stream(i as u64);
                rng
            })
            .collect();
        for i in (0..=start).rev() {
            let in_shape = self.shapes[i];
            control = match (layers[i], &self.params[i]) {
                (LayerSpec::Classifier { .. }, LayerParams::Classifier(c)) => match control {
                    Some(t) => {
                        let mut data = Vec::with_capacity(n * in_shape.len());
                        for b in 0..n {
                            let probs: Vec<f64> = t.sample(b).iter().map(|&v| v as f64).collect();
                            let (signal, _) = c.backward(&probs, in_shape)?;
                            data.extend(signal.iter().map(|&v| v as f32));
                        }
                        Some(Tensor4::from_vec(n, in_shape, data)?)
                    }
                    None => None,
                },
                (LayerSpec::Cgmm { .. }, LayerParams::Cgmm(p)) => {
                    let out = cgmm_backward(
                        &p.prepare(),
                        in_shape,
                        n,
                        control.as_ref(),
                        &mut streams,
                        sampler.top_s,
                        sampler.variance_scale,
                    )?;
                    Some(out.samples)
                }
                (LayerSpec::Pooling { f, stride }, _) => match control {
                    Some(t) => Some(pooling_backward(f, stride, in_shape, &t)?),
                    None => None,
                },
                (LayerSpec::Folding { f, stride }, _) => match control {
                    Some(t) => {
                        let t0 = folding_backward(f, stride, in_shape, &t)?;
                        match self.sharpen_target(i) {
                            Some(target) if sharpening.iterations > 0 => {
                                Some(sharpen(self, i, target, t0, sharpening)?.control)
                            }
                            _ => Some(t0),
                        }
                    }
                    None => None,
                },
                _ => unreachable!("parameter blocks are checked at construction"),
            };
        }
        control.ok_or_else(|| Error::InvalidArgument("backward pass produced no sample".into()))
    }

    /// The next-highest cGMM layer above `layer`, provided only folding and
    /// pooling layers lie in between.
    pub fn sharpen_target(&self, layer: usize) -> Option<usize> {
        let layers = &self.config.layers;
        for (j, spec) in layers.iter().enumerate().skip(layer) {
            match spec {
                LayerSpec::Cgmm { .. } => return Some(j),
                LayerSpec::Folding { .. } | LayerSpec::Pooling { .. } => {}
                LayerSpec::Classifier { .. } => return None,
            }
        }
        None
    }
}
