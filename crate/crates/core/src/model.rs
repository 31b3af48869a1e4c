//! Prompt-tuning analog over a frozen encoder.
//!
//! The only trainable parameters are `m` prompt vectors `p_j` (each of the
//! encoder dimension), a head vector `v` and a bias `b`:
//!
//! ```text
//! u_j   = tanh(p_j . e)
//! logit = sum_j v_j u_j + b
//! pr    = sigmoid(logit)
//! ```
//!
//! Gradients are flattened as `[p_1 .. p_m, v, b]`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Example, Label};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::seeds::{self, Stream};

pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptHeadParams {
    pub prompt_tokens: usize,
    pub dim: usize,
    /// `prompt_tokens x dim`, row-major.
    pub prompt: Vec<f64>,
    pub head: Vec<f64>,
    pub bias: f64,
}

impl PromptHeadParams {
    pub fn zeros(prompt_tokens: usize, dim: usize) -> Self {
        PromptHeadParams {
            prompt_tokens,
            dim,
            prompt: vec![0.0; prompt_tokens * dim],
            head: vec![0.0; prompt_tokens],
            bias: 0.0,
        }
    }

    /// Gaussian prompt and head entries with standard deviation `std`, zero bias.
    pub fn init<R: rand::Rng + ?Sized>(prompt_tokens: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("init_std validated");
        let mut p = Self::zeros(prompt_tokens, dim);
        p.prompt.iter_mut().for_each(|x| *x = normal.sample(rng));
        p.head.iter_mut().for_each(|x| *x = normal.sample(rng));
        p
    }

    /// Trainable parameter count, `m*d + m + 1`.
    pub fn len(&self) -> usize {
        self.prompt_tokens * self.dim + self.prompt_tokens + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn prompt_row(&self, j: usize) -> &[f64] {
        &self.prompt[j * self.dim..(j + 1) * self.dim]
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.prompt);
        out.extend_from_slice(&self.head);
        out.push(self.bias);
        out
    }

    pub fn from_flat(prompt_tokens: usize, dim: usize, flat: &[f64]) -> Result<Self> {
        let n = prompt_tokens * dim;
        if flat.len() != n + prompt_tokens + 1 {
            return Err(Error::Contract(format!(
                "flat parameter length {} does not match {prompt_tokens}x{dim} prompt",
                flat.len()
            )));
        }
        Ok(PromptHeadParams {
            prompt_tokens,
            dim,
            prompt: flat[..n].to_vec(),
            head: flat[n..n + prompt_tokens].to_vec(),
            bias: flat[n + prompt_tokens],
        })
    }

    /// Visit every parameter mutably in flattened order.
    fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut i = 0;
        for x in self.prompt.iter_mut().chain(self.head.iter_mut()) {
            f(i, x);
            i += 1;
        }
        f(i, &mut self.bias);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        z / (1.0 + z)
    }
}

fn check_dim(params: &PromptHeadParams, e: &[f64]) -> Result<()> {
    if e.len() != params.dim {
        return Err(Error::Contract(format!(
            "embedding has dimension {}, parameters expect {}",
            e.len(),
            params.dim
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hidden units `u_j` and the logit.
fn activations(params: &PromptHeadParams, e: &[f64], units: &mut Vec<f64>) -> f64 {
    units.clear();
    let mut logit = params.bias;
    for j in 0..params.prompt_tokens {
        let u = dot(params.prompt_row(j), e).tanh();
        logit += params.head[j] * u;
        units.push(u);
    }
    logit
}

/// Positive-class probability for one embedding.
pub fn forward(params: &PromptHeadParams, e: &[f64]) -> Result<f64> {
    check_dim(params, e)?;
    let mut units = Vec::with_capacity(params.prompt_tokens);
    Ok(sigmoid(activations(params, e, &mut units)))
}

/// Binary cross-entropy of a probability against a label.
pub fn bce(pr: f64, label: Label) -> f64 {
    let pr = pr.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let y = label.target();
    -(y * pr.ln() + (1.0 - y) * (1.0 - pr).ln())
}

pub fn loss_embedded(params: &PromptHeadParams, e: &[f64], label: Label) -> Result<f64> {
    Ok(bce(forward(params, e)?, label))
}

pub fn loss(params: &PromptHeadParams, example: &Example, encoder: &Encoder) -> Result<f64> {
    loss_embedded(params, encoder.embed_text(&example.text).as_slice(), example.label)
}

/// Accumulates `scale * dL/dW` into `out` and returns the loss.
fn accumulate_gradient(
    params: &PromptHeadParams,
    e: &[f64],
    label: Label,
    scale: f64,
    units: &mut Vec<f64>,
    out: &mut [f64],
) -> f64 {
    let logit = activations(params, e, units);
    let pr = sigmoid(logit);
    let r = pr - label.target();
    let (m, d) = (params.prompt_tokens, params.dim);
    for j in 0..m {
        let coef = scale * r * params.head[j] * (1.0 - units[j] * units[j]);
        for (o, &x) in out[j * d..(j + 1) * d].iter_mut().zip(e) {
            *o += coef * x;
        }
        out[m * d + j] += scale * r * units[j];
    }
    out[m * d + m] += scale * r;
    bce(pr, label)
}

/// Exact per-example loss gradient, flattened as `[p_1..p_m, v, b]`.
///
/// Weight decay is not part of this gradient.
pub fn gradient_embedded(params: &PromptHeadParams, e: &[f64], label: Label) -> Result<Vec<f64>> {
    check_dim(params, e)?;
    let mut out = vec![0.0; params.len()];
    let mut units = Vec::with_capacity(params.prompt_tokens);
    accumulate_gradient(params, e, label, 1.0, &mut units, &mut out);
    Ok(out)
}

pub fn per_example_gradient(params: &PromptHeadParams, example: &Example, encoder: &Encoder) -> Result<Vec<f64>> {
    gradient_embedded(params, encoder.embed_text(&example.text).as_slice(), example.label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub init_std: f64,
    pub seed: u64,
    /// Number of prompt vectors `m`.
    pub prompt_tokens: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 20,
            optimizer: Optimizer::Adam,
            init_std: 0.02,
            seed: 0,
            prompt_tokens: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.learning_rate", self.learning_rate),
            ("train.init_std", self.init_std),
            ("train.adam_eps", self.adam_eps),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("train.weight_decay", "must be non-negative"));
        }
        for (field, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(field, format!("must lie in [0, 1), got {v}")));
            }
        }
        for (field, v) in [
            ("train.batch_size", self.batch_size),
            ("train.epochs", self.epochs),
            ("train.prompt_tokens", self.prompt_tokens),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Parameter snapshot taken after an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_loss: f64,
    pub params: PromptHeadParams,
}

/// Training input: a borrowed embedding and its current label.
pub type Sample<'a> = (&'a [f64], Label);

pub fn mean_loss(params: &PromptHeadParams, samples: &[Sample<'_>]) -> Result<f64> {
    let mut total = 0.0;
    for (e, y) in samples {
        total += loss_embedded(params, e, *y)?;
    }
    Ok(total / samples.len() as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One AdamW step with decoupled weight decay.
    fn step(&mut self, cfg: &TrainConfig, params: &mut PromptHeadParams, grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let (m, v) = (&mut self.m, &mut self.v);
        params.for_each_mut(|i, w| {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
            *w -= cfg.learning_rate * (update + cfg.weight_decay * *w);
        });
    }
}

/// Train from a fresh seeded initialization and keep the checkpoint with the
/// lowest mean loss on `checkpoint_val` (ties go to the earliest epoch).
pub fn train_embedded(
    config: &TrainConfig,
    train_set: &[Sample<'_>],
    checkpoint_val: &[Sample<'_>],
) -> Result<(PromptHeadParams, Vec<Checkpoint>)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if checkpoint_val.is_empty() {
        return Err(Error::Contract("checkpoint evaluation subset is empty".into()));
    }
    let dim = train_set[0].0.len();
    if let Some((e, _)) = train_set.iter().chain(checkpoint_val).find(|(e, _)| e.len() != dim) {
        return Err(Error::Contract(format!(
            "mixed embedding dimensions {} and {}",
            dim,
            e.len()
        )));
    }

    let mut init_rng = seeds::rng(config.seed, Stream::TrainInit, 0);
    let mut shuffle_rng = seeds::rng(config.seed, Stream::TrainShuffle, 0);
    let mut params = PromptHeadParams::init(config.prompt_tokens, dim, config.init_std, &mut init_rng);
    let mut adam = Adam::new(params.len());
    let mut grad = vec![0.0; params.len()];
    let mut units = Vec::with_capacity(config.prompt_tokens);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut checkpoints = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / idx.len() as f64;
            let mut batch_loss = 0.0;
            for &i in idx {
                let (e, y) = train_set[i];
                batch_loss += scale * accumulate_gradient(&params, e, y, scale, &mut units, &mut grad);
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch + 1,
                    loss: batch_loss,
                });
            }
            adam.step(config, &mut params, &grad);
        }
        let val_loss = mean_loss(&params, checkpoint_val)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: 0,
                loss: val_loss,
            });
        }
        checkpoints.push(Checkpoint {
            epoch,
            val_loss,
            params: params.clone(),
        });
    }

    let best = select_best(&checkpoints).params.clone();
    Ok((best, checkpoints))
}

/// Lowest `val_loss`, earliest epoch on ties. Panics on an empty list.
pub fn select_best(checkpoints: &[Checkpoint]) -> &Checkpoint {
    checkpoints
        .iter()
        .reduce(|best, c| if c.val_loss < best.val_loss { c } else { best })
        .expect("at least one checkpoint")
}

pub fn train(
    config: &TrainConfig,
    train_set: &[Example],
    checkpoint_val: &[Example],
    encoder: &Encoder,
) -> Result<(PromptHeadParams, Vec<Checkpoint>)> {
    let train_emb: Vec<_> = train_set.iter().map(|e| encoder.embed_text(&e.text)).collect();
    let val_emb: Vec<_> = checkpoint_val.iter().map(|e| encoder.embed_text(&e.text)).collect();
    let train_samples: Vec<Sample<'_>> = train_emb
        .iter()
        .zip(train_set)
        .map(|(e, ex)| (e.as_slice(), ex.label))
        .collect();
    let val_samples: Vec<Sample<'_>> = val_emb
        .iter()
        .zip(checkpoint_val)
        .map(|(e, ex)| (e.as_slice(), ex.label))
        .collect();
    train_embedded(config, &train_samples, &val_samples)
}

pub fn predict_scores(
    params: &PromptHeadParams,
    examples: &[Example],
    encoder: &Encoder,
) -> Result<Vec<(String, f64)>> {
    examples
        .iter()
        .map(|ex| Ok((ex.id.clone(), forward(params, encoder.embed_text(&ex.text).as_slice())?)))
        .collect()
}

pub fn save_checkpoints(path: &Path, checkpoints: &[Checkpoint]) -> Result<()> {
    let json = serde_json::to_string(checkpoints)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoints(path: &Path) -> Result<Vec<Checkpoint>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&raw)?)
}
