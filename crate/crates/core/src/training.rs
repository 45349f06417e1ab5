//! Mini-batch SGD where every cGMM layer ascends its own loss and the
//! classifier descends cross-entropy, with staggered start times.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gmm::{kmeans_pp, MixtureGrad, Sharing};
use crate::model::{DcgmmModel, LayerParams};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_centroids: f64,
    pub lr_logits: f64,
    pub lr_precisions: f64,
    pub lr_classifier: f64,
    /// Start fraction per cGMM layer, bottom to top. `None` uses `0.1 * L`.
    pub delays: Option<Vec<f64>>,
    /// Start fraction of the classifier. `None` places it after the top cGMM.
    pub classifier_delay: Option<f64>,
    pub seed: u64,
    pub shuffle: bool,
    pub centroid_init: CentroidInit,
    /// Held-out evaluation interval in steps (0: only at start, activation
    /// steps and the end).
    pub eval_every: usize,
}

/// How a cGMM layer's centroids are set when it starts training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidInit {
    /// k-means++ seeds drawn from the layer's input on its first active batch
    /// (skipped when the centroid learning rate is 0).
    Data,
    /// Keep the model's initial centroids.
    Keep,
}

/// Most candidate vectors considered when seeding a shared layer.
const SEED_POOL: usize = 4096;

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 100,
            lr_centroids: 0.011,
            lr_logits: 0.0011,
            lr_precisions: 0.0011,
            lr_classifier: 0.01,
            delays: None,
            classifier_delay: None,
            seed: 0,
            shuffle: true,
            centroid_init: CentroidInit::Data,
            eval_every: 0,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::InvalidArgument(format!("line {line}: invalid value {value:?} for {key}"))
    })
}

impl TrainSchedule {
    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_overrides(mut self, text: &str) -> Result<Self> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("line {}: expected key = value", i + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let n = i + 1;
            match key {
                "epochs" => self.epochs = parse_value(n, key, value)?,
                "batch_size" => self.batch_size = parse_value(n, key, value)?,
                "lr_centroids" => self.lr_centroids = parse_value(n, key, value)?,
                "lr_logits" => self.lr_logits = parse_value(n, key, value)?,
                "lr_precisions" => self.lr_precisions = parse_value(n, key, value)?,
                "lr_classifier" => self.lr_classifier = parse_value(n, key, value)?,
                "classifier_delay" => self.classifier_delay = Some(parse_value(n, key, value)?),
                "seed" => self.seed = parse_value(n, key, value)?,
                "shuffle" => self.shuffle = parse_value(n, key, value)?,
                "eval_every" => self.eval_every = parse_value(n, key, value)?,
                "centroid_init" => {
                    self.centroid_init = match value {
                        "data" => CentroidInit::Data,
                        "keep" => CentroidInit::Keep,
                        _ => {
                            return Err(Error::InvalidArgument(format!(
                                "line {n}: centroid_init is data or keep"
                            )))
                        }
                    }
                }
                "delays" => {
                    self.delays = Some(
                        value
                            .split(',')
                            .map(|v| parse_value(n, key, v.trim()))
                            .collect::<Result<_>>()?,
                    )
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "line {n}: unknown key {key:?}"
                    )))
                }
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        let lrs = [
            self.lr_centroids,
            self.lr_logits,
            self.lr_precisions,
            self.lr_classifier,
        ];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return Err(Error::InvalidArgument(
                "learning rates must be finite and >= 0".into(),
            ));
        }
        let delays = self
            .delays
            .iter()
            .flatten()
            .chain(self.classifier_delay.iter());
        for &d in delays {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::InvalidArgument(format!("delay {d} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Start fraction of every trainable layer (`None` for the others).
    pub fn layer_delays(&self, model: &DcgmmModel) -> Result<Vec<Option<f64>>> {
        let cgmm = model.cgmm_layers();
        if let Some(d) = &self.delays {
            if d.len() != cgmm.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} delays given for {} cGMM layers",
                    d.len(),
                    cgmm.len()
                )));
            }
        }
        let mut out = vec![None; model.layers().len()];
        for (ordinal, &layer) in cgmm.iter().enumerate() {
            let l = ordinal + 1;
            out[layer] = Some(match &self.delays {
                Some(d) => d[ordinal],
                None => 0.1 * l as f64,
            });
        }
        if model.classifier().is_some() {
            let default = 0.1 * (cgmm.len() + 1) as f64;
            out[model.layers().len() - 1] = Some(self.classifier_delay.unwrap_or(default.min(0.9)));
        }
        Ok(out)
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// First step (0-based) at which a layer with start fraction `delay` updates.
pub fn activation_step(delay: f64, total_steps: usize) -> usize {
    // the small slack keeps products such as 0.3 * 10 from rounding up
    (delay * total_steps as f64 - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    /// Classifier accuracy on the training batches of an epoch.
    TrainAccuracy,
    TestAccuracy,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::TrainAccuracy => "train_accuracy",
            Split::TestAccuracy => "test_accuracy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    /// Number of optimizer steps completed when the value was measured.
    pub step: usize,
    /// 1-based layer position.
    pub layer: usize,
    pub split: Split,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// `(layer, step)` at which each trainable layer started updating.
    pub activation_steps: Vec<(usize, usize)>,
    pub total_steps: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,layer,split,value\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{:e}",
                r.step,
                r.layer,
                r.split.as_str(),
                r.value
            )
            .expect("string write");
        }
        out
    }

    /// Records of one layer and split, in step order.
    pub fn series(&self, layer: usize, split: Split) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.layer == layer && r.split == split)
            .map(|r| (r.step, r.value))
            .collect()
    }
}

/// Mean per-sample loss of every cGMM layer as `(layer index, loss)`.
pub fn evaluate_losses(
    model: &DcgmmModel,
    data: &Tensor4,
    batch_size: usize,
) -> Result<Vec<(usize, f64)>> {
    let scores = sample_scores(model, data, batch_size)?;
    Ok(scores
        .into_iter()
        .map(|(layer, s)| (layer, s.iter().sum::<f64>() / s.len().max(1) as f64))
        .collect())
}

/// Per-sample loss of every cGMM layer as `(layer index, losses)`.
pub fn sample_scores(
    model: &DcgmmModel,
    data: &Tensor4,
    batch_size: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let layers = model.cgmm_layers();
    let mut out: Vec<(usize, Vec<f64>)> = layers
        .iter()
        .map(|&l| (l, Vec::with_capacity(data.n())))
        .collect();
    let batch_size = batch_size.max(1);
    for start in (0..data.n()).step_by(batch_size) {
        let idx: Vec<usize> = (start..(start + batch_size).min(data.n())).collect();
        let trace = model.forward(&data.select(&idx))?;
        for (layer, scores) in out.iter_mut() {
            scores.extend_from_slice(trace.loss(*layer).expect("cGMM layer"));
        }
    }
    Ok(out)
}

fn classifier_accuracy(model: &DcgmmModel, data: &Dataset, batch_size: usize) -> Result<f64> {
    let Some(classifier) = model.classifier() else {
        return Ok(f64::NAN);
    };
    let last = model.layers().len() - 1;
    let mut correct = 0;
    for start in (0..data.len()).step_by(batch_size.max(1)) {
        let batch = data.slice(start, start + batch_size);
        let trace = model.forward(&batch.images)?;
        let input = &trace.activities[last - 1];
        correct += classifier.cross_entropy(input, &batch.labels)?.1;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Re-seeds the centroids of a fresh cGMM layer from its input batch.
fn seed_centroids(model: &mut DcgmmModel, layer: usize, input: &Tensor4, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + layer as u64);
    let LayerParams::Cgmm(params) = &mut model.params_mut()[layer] else {
        unreachable!("cGMM layer")
    };
    let (k, d) = (params.k(), params.d());
    let positions = input.shape().positions();
    let vector = |i: usize| &input.data()[i * d..(i + 1) * d];
    match params.sharing() {
        Sharing::Shared => {
            let total = input.n() * positions;
            let picks = rand::seq::index::sample(&mut rng, total, total.min(SEED_POOL));
            let pool: Vec<f64> = picks
                .iter()
                .flat_map(|i| vector(i).iter().map(|&v| v as f64))
                .collect();
            let seeds = kmeans_pp(&pool, d, k, &mut rng);
            params.mixtures_mut()[0].set_centroids(&seeds)?;
        }
        Sharing::Independent => {
            for (pos, m) in params.mixtures_mut().iter_mut().enumerate() {
                let pool: Vec<f64> = (0..input.n())
                    .flat_map(|n| vector(n * positions + pos).iter().map(|&v| v as f64))
                    .collect();
                m.set_centroids(&kmeans_pp(&pool, d, k, &mut rng))?;
            }
        }
    }
    Ok(())
}

fn numerical(step: usize, layer: usize, reason: impl Into<String>) -> Error {
    Error::Numerical {
        step,
        layer,
        reason: reason.into(),
    }
}

/// Gradient of a cGMM layer's loss, averaged over batch and positions
/// (shared) or over the batch only (one mixture per position).
fn cgmm_gradients(
    model: &DcgmmModel,
    layer: usize,
    input: &Tensor4,
    winners: &[u32],
) -> Vec<MixtureGrad> {
    let params = model.cgmm(layer).expect("cGMM layer");
    let prepared = params.prepare();
    let positions = input.shape().positions();
    let (k, d) = (params.k(), params.d());
    let mut grads = vec![MixtureGrad::zeros(k, d); params.mixtures().len()];
    let weight = match params.sharing() {
        Sharing::Shared => 1.0 / (input.n() * positions) as f64,
        Sharing::Independent => 1.0 / input.n() as f64,
    };
    for n in 0..input.n() {
        for (pos, x) in input.positions(n).enumerate() {
            let best = winners[n * positions + pos] as usize;
            let g = match params.sharing() {
                Sharing::Shared => &mut grads[0],
                Sharing::Independent => &mut grads[pos],
            };
            prepared
                .mixture(pos)
                .accumulate_for_component(x, best, weight, g);
        }
    }
    grads
}

/// Trains `model` in place. On a numerical abort the model holds the state
/// reached before the failing update.
pub fn train(
    model: &mut DcgmmModel,
    data: &Dataset,
    schedule: &TrainSchedule,
    held_out: Option<&Dataset>,
) -> Result<TrainLog> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    if data.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: model.input_shape().to_string(),
            actual: data.shape().to_string(),
        });
    }
    let delays = schedule.layer_delays(model)?;
    let per_epoch = schedule.steps_per_epoch(data.len());
    let total = per_epoch * schedule.epochs;
    let activation: Vec<Option<usize>> = delays
        .iter()
        .map(|d| d.map(|d| activation_step(d, total)))
        .collect();
    let mut log = TrainLog {
        total_steps: total,
        activation_steps: activation
            .iter()
            .enumerate()
            .filter_map(|(l, a)| a.map(|s| (l + 1, s)))
            .collect(),
        ..TrainLog::default()
    };
    let classifier_layer = model.classifier().map(|_| model.layers().len() - 1);
    let evaluate = |model: &DcgmmModel, step: usize, log: &mut TrainLog| -> Result<()> {
        let Some(test) = held_out else { return Ok(()) };
        for (layer, loss) in evaluate_losses(model, &test.images, schedule.batch_size)? {
            if !loss.is_finite() {
                return Err(numerical(step, layer + 1, "non-finite held-out loss"));
            }
            log.records.push(LogRecord {
                step,
                layer: layer + 1,
                split: Split::Test,
                value: loss,
            });
        }
        Ok(())
    };
    let is_eval_step = |step: usize| {
        step == 0
            || step == total
            || activation.contains(&Some(step))
            || (schedule.eval_every > 0 && step.is_multiple_of(schedule.eval_every))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _epoch in 0..schedule.epochs {
        if schedule.shuffle {
            order.shuffle(&mut rng);
        }
        let mut correct = 0usize;
        for chunk in order.chunks(schedule.batch_size) {
            if is_eval_step(step) {
                evaluate(model, step, &mut log)?;
            }
            let batch = data.select(chunk);
            let mut trace = model.forward(&batch.images)?;
            // seeding counts as a centroid update, so frozen centroids stay put
            if schedule.centroid_init == CentroidInit::Data && schedule.lr_centroids > 0.0 {
                let fresh: Vec<usize> = model
                    .cgmm_layers()
                    .into_iter()
                    .filter(|&l| activation[l] == Some(step) && model.steps_seen()[l] == 0)
                    .collect();
                for &layer in &fresh {
                    let input = if layer == 0 {
                        batch.images.clone()
                    } else {
                        trace.activities[layer - 1].clone()
                    };
                    seed_centroids(model, layer, &input, schedule.seed)?;
                }
                if !fresh.is_empty() {
                    trace = model.forward(&batch.images)?;
                }
            }
            for &layer in &model.cgmm_layers() {
                let losses = trace.loss(layer).expect("cGMM layer");
                let mean = losses.iter().sum::<f64>() / losses.len() as f64;
                if !mean.is_finite() {
                    return Err(numerical(
                        step,
                        layer + 1,
                        format!("non-finite batch loss {mean}"),
                    ));
                }
                log.records.push(LogRecord {
                    step,
                    layer: layer + 1,
                    split: Split::Train,
                    value: mean,
                });
            }
            // all gradients come from the same forward pass
            let mut updates = Vec::new();
            for &layer in &model.cgmm_layers() {
                if activation[layer].is_some_and(|a| step >= a) {
                    let input = if layer == 0 {
                        &batch.images
                    } else {
                        &trace.activities[layer - 1]
                    };
                    let winners = trace.winners[layer].as_deref().expect("cGMM layer");
                    updates.push((layer, cgmm_gradients(model, layer, input, winners)));
                }
            }
            for (layer, grads) in updates {
                let LayerParams::Cgmm(params) = &mut model.params_mut()[layer] else {
                    unreachable!("cGMM layer")
                };
                for (m, g) in params.mixtures_mut().iter_mut().zip(&grads) {
                    m.ascend(
                        g,
                        schedule.lr_logits,
                        schedule.lr_centroids,
                        schedule.lr_precisions,
                    );
                }
                model.steps_seen_mut()[layer] += 1;
            }
            if let Some(layer) = classifier_layer {
                let input = &trace.activities[layer - 1];
                let LayerParams::Classifier(c) = &mut model.params_mut()[layer] else {
                    unreachable!("classifier layer")
                };
                correct += c.cross_entropy(input, &batch.labels)?.1;
                if activation[layer].is_some_and(|a| step >= a) {
                    let loss = c.descend(input, &batch.labels, schedule.lr_classifier)?;
                    if !loss.is_finite() {
                        return Err(numerical(step, layer + 1, "non-finite cross-entropy"));
                    }
                    model.steps_seen_mut()[layer] += 1;
                }
            }
            step += 1;
        }
        if let Some(layer) = classifier_layer {
            log.records.push(LogRecord {
                step,
                layer: layer + 1,
                split: Split::TrainAccuracy,
                value: correct as f64 / data.len() as f64,
            });
            if let Some(test) = held_out {
                log.records.push(LogRecord {
                    step,
                    layer: layer + 1,
                    split: Split::TestAccuracy,
                    value: classifier_accuracy(model, test, schedule.batch_size)?,
                });
            }
        }
    }
    if is_eval_step(step) {
        evaluate(model, step, &mut log)?;
    }
    Ok(log)
}
