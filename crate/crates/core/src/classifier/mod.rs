//! Span classifiers: mean-pooled span embedding ++ concept one-hot → MLP head,
//! trained with class-weighted cross entropy, frozen or unfrozen encoder.

mod grid;
mod registry;

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledInstance;
use crate::encoder::{EncoderError, EncoderParams, EncoderState};
use crate::evaluation::macro_f1;
use crate::ontology::{ConceptId, TaskId};
use crate::optim::{clip_global_norm, AdamW};

pub use grid::{grid_search, Grid, GridCandidate, GridPoint, GridResult};
pub use registry::{
    MajorityTrainer, NeuralTrainer, TaskContext, TaskTrainer, TrainerRegistry, TrainerSettings,
};

pub const NUM_CONCEPTS: usize = ConceptId::ALL.len();

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("empty span range")]
    EmptySpan,
    #[error("class {class:?} has zero training examples")]
    ZeroCount { class: String },
    #[error("no training examples")]
    EmptyTrain,
    #[error("no dev examples")]
    EmptyDev,
    #[error("non-finite loss at step {0}")]
    NonFinite(usize),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("every grid configuration was skipped")]
    NoConfigs,
    #[error("unknown trainer {0:?}")]
    UnknownTrainer(String),
    #[error("trainer {0:?} needs an encoder")]
    MissingEncoder(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Baseline(#[from] crate::baseline::BaselineError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error(transparent)]
    Stratify(#[from] crate::stratify::StratifyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_dim: Option<usize>,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden_dim: None,
            dropout: 0.1,
        }
    }
}

impl HeadConfig {
    pub fn input_dim(&self, d: usize) -> usize {
        d + NUM_CONCEPTS
    }
}

/// Head weights. Without a hidden layer `w1`/`b1` are empty and `w2` maps the
/// input straight to scores.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl HeadParams {
    pub fn zeros(input_dim: usize, hidden: Option<usize>, classes: usize) -> Self {
        let (w1, b1, m) = match hidden {
            Some(h) => (Array2::zeros((h, input_dim)), Array1::zeros(h), h),
            None => (Array2::zeros((0, 0)), Array1::zeros(0), input_dim),
        };
        HeadParams {
            w1,
            b1,
            w2: Array2::zeros((classes, m)),
            b2: Array1::zeros(classes),
        }
    }

    /// Glorot-style normal initialisation; biases start at zero.
    pub fn random(input_dim: usize, hidden: Option<usize>, classes: usize, seed: u64) -> Self {
        let mut p = HeadParams::zeros(input_dim, hidden, classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in [&mut p.w1, &mut p.w2] {
            if w.is_empty() {
                continue;
            }
            let sd = (2.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            let dist = Normal::new(0.0, sd).unwrap();
            w.mapv_inplace(|_| dist.sample(&mut rng));
        }
        p
    }

    pub fn has_hidden(&self) -> bool {
        !self.w1.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        HeadParams {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.dim()),
            b2: Array1::zeros(self.b2.len()),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }

    fn add_assign(&mut self, o: &HeadParams) {
        self.w1 += &o.w1;
        self.b1 += &o.b1;
        self.w2 += &o.w2;
        self.b2 += &o.b2;
    }
}

/// Intermediate values of one head pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub z: Array1<f64>,
    /// Dropout multipliers for the input (1 everywhere at evaluation).
    pub z_mask: Array1<f64>,
    pub pre: Array1<f64>,
    pub h_mask: Array1<f64>,
    /// Input to the output layer after activation and dropout.
    pub top: Array1<f64>,
    pub scores: Array1<f64>,
}

fn dropout_mask(n: usize, p: f64, rng: Option<&mut ChaCha8Rng>) -> Array1<f64> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            Array1::from_shape_fn(n, |_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        }
        _ => Array1::ones(n),
    }
}

/// Runs the head on feature vector `z`. Dropout applies only when `rng` is
/// given (training).
pub fn head_forward(p: &HeadParams, z: Array1<f64>, dropout: f64, mut rng: Option<&mut ChaCha8Rng>) -> HeadCache {
    let z_mask = dropout_mask(z.len(), dropout, rng.as_deref_mut());
    let zd = &z * &z_mask;
    let (pre, h_mask, top) = if p.has_hidden() {
        let pre = p.w1.dot(&zd) + &p.b1;
        let h_mask = dropout_mask(pre.len(), dropout, rng);
        let top = pre.mapv(|x| x.max(0.0)) * &h_mask;
        (pre, h_mask, top)
    } else {
        (Array1::zeros(0), Array1::zeros(0), zd)
    };
    let scores = p.w2.dot(&top) + &p.b2;
    HeadCache {
        z,
        z_mask,
        pre,
        h_mask,
        top,
        scores,
    }
}

/// Accumulates head gradients for `dscores` and returns `∂L/∂z`.
pub fn head_backward(p: &HeadParams, c: &HeadCache, dscores: &Array1<f64>, g: &mut HeadParams) -> Array1<f64> {
    g.b2 += dscores;
    g.w2 += &outer(dscores, &c.top);
    let dtop = p.w2.t().dot(dscores);
    let dzd = if p.has_hidden() {
        let dpre = &dtop * &c.h_mask * &c.pre.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        g.b1 += &dpre;
        g.w1 += &outer(&dpre, &(&c.z * &c.z_mask));
        p.w1.t().dot(&dpre)
    } else {
        dtop
    };
    dzd * &c.z_mask
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view()
        .insert_axis(Axis(1))
        .dot(&b.view().insert_axis(Axis(0)))
}

/// Head input: pooled span embedding followed by the concept indicator.
pub fn features(pooled: &Array1<f64>, concept: ConceptId) -> Array1<f64> {
    let mut z = Array1::zeros(pooled.len() + NUM_CONCEPTS);
    z.slice_mut(s![..pooled.len()]).assign(pooled);
    z[pooled.len() + concept.index()] = 1.0;
    z
}

/// Weights ∝ 1/proportion, normalised to mean 1.
pub fn class_weights(counts: &[(String, usize)]) -> Result<Vec<f64>, ClassifierError> {
    if let Some((c, _)) = counts.iter().find(|(_, n)| *n == 0) {
        return Err(ClassifierError::ZeroCount { class: c.clone() });
    }
    let total: usize = counts.iter().map(|(_, n)| n).sum();
    let inv: Vec<f64> = counts.iter().map(|(_, n)| total as f64 / *n as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|w| w / mean).collect())
}

/// Softmax cross entropy of `scores` against class `y`, with `∂CE/∂scores`.
pub fn cross_entropy(scores: &Array1<f64>, y: usize) -> (f64, Array1<f64>) {
    let max = scores.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exp = scores.mapv(|x| (x - max).exp());
    let z = exp.sum();
    let mut grad = exp / z;
    let loss = -(grad[y].ln());
    grad[y] -= 1.0;
    (loss, grad)
}

/// One instance ready for the model: token ids of its window, the span's
/// token range, its concept and its gold class index.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub ids: Vec<u32>,
    pub span: Range<usize>,
    pub concept: ConceptId,
    pub class: usize,
}

impl TaskExample {
    pub fn from_instance(inst: &LabeledInstance, vocab: &crate::encoder::Vocabulary, classes: &[String]) -> Result<Self, ClassifierError> {
        let class = classes
            .iter()
            .position(|c| *c == inst.class)
            .ok_or_else(|| ClassifierError::UnknownClass(inst.class.clone()))?;
        if inst.span_range.is_empty() {
            return Err(ClassifierError::EmptySpan);
        }
        Ok(TaskExample {
            ids: inst.window.iter().map(|t| vocab.id(t)).collect(),
            span: inst.span_range.clone(),
            concept: inst.concept,
            class,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub encoder: EncoderState,
    pub head: HeadParams,
    pub task: TaskId,
    pub classes: Vec<String>,
    pub config: HeadConfig,
}

impl TaskModel {
    pub fn new(encoder: EncoderState, task: TaskId, classes: Vec<String>, config: HeadConfig, seed: u64) -> Self {
        let head = HeadParams::random(config.input_dim(encoder.d), config.hidden_dim, classes.len(), seed);
        TaskModel {
            encoder,
            head,
            task,
            classes,
            config,
        }
    }

    pub fn pooled(&self, ids: &[u32], span: Range<usize>) -> Result<Array1<f64>, ClassifierError> {
        if span.is_empty() || span.end > ids.len() {
            return Err(ClassifierError::EmptySpan);
        }
        let h = self.encoder.encode(ids)?;
        Ok(EncoderState::mean_pool(&h, span))
    }

    /// Evaluation-mode class scores (no dropout, unnormalised).
    pub fn forward(&self, ids: &[u32], span: Range<usize>, concept: ConceptId) -> Result<Array1<f64>, ClassifierError> {
        let z = features(&self.pooled(ids, span)?, concept);
        Ok(head_forward(&self.head, z, 0.0, None).scores)
    }

    pub fn predict(&self, ex: &TaskExample) -> Result<usize, ClassifierError> {
        Ok(argmax(&self.forward(&ex.ids, ex.span.clone(), ex.concept)?))
    }

    /// Training-mode weighted loss over a batch and, when `dropout_seed` is
    /// given, its gradients w.r.t. head and (if `encoder_grads`) encoder.
    pub fn batch_loss(
        &self,
        batch: &[&TaskExample],
        weights: &[f64],
        dropout_seed: Option<u64>,
        with_grad: bool,
        encoder_grads: bool,
    ) -> Result<(f64, Option<(HeadParams, Option<EncoderParams>)>), ClassifierError> {
        let norm: f64 = batch.iter().map(|e| weights[e.class]).sum();
        if norm == 0.0 {
            return Ok((0.0, with_grad.then(|| (self.head.zeros_like(), None))));
        }
        let parts: Vec<Result<(f64, Option<(HeadParams, Option<EncoderParams>)>), ClassifierError>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(crate::seeds::derive(s, &i.to_string())));
                let cache = self.encoder.forward(&ex.ids)?;
                if ex.span.is_empty() || ex.span.end > ex.ids.len() {
                    return Err(ClassifierError::EmptySpan);
                }
                let pooled = EncoderState::mean_pool(&cache.h, ex.span.clone());
                let hc = head_forward(&self.head, features(&pooled, ex.concept), self.config.dropout, rng.as_mut());
                let w = weights[ex.class] / norm;
                let (ce, dscores) = cross_entropy(&hc.scores, ex.class);
                if !with_grad {
                    return Ok((w * ce, None));
                }
                let mut hg = self.head.zeros_like();
                let dz = head_backward(&self.head, &hc, &(dscores * w), &mut hg);
                let eg = if encoder_grads {
                    let mut eg = self.encoder.params.zeros_like();
                    let mut dh = Array2::zeros(cache.h.dim());
                    let share = dz.slice(s![..self.encoder.d]).to_owned() / ex.span.len() as f64;
                    for r in ex.span.clone() {
                        dh.row_mut(r).assign(&share);
                    }
                    self.encoder.backward(&cache, &dh, &mut eg);
                    Some(eg)
                } else {
                    None
                };
                Ok((w * ce, Some((hg, eg))))
            })
            .collect();
        let mut loss = 0.0;
        let mut acc: Option<(HeadParams, Option<EncoderParams>)> = None;
        for part in parts {
            let (l, g) = part?;
            loss += l;
            if let Some((hg, eg)) = g {
                match &mut acc {
                    None => acc = Some((hg, eg)),
                    Some((ah, ae)) => {
                        ah.add_assign(&hg);
                        if let (Some(ae), Some(eg)) = (ae.as_mut(), eg.as_ref()) {
                            ae.add_assign(eg);
                        }
                    }
                }
            }
        }
        Ok((loss, acc))
    }
}

pub fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub early_stop_patience: usize,
    pub early_stop_tolerance: f64,
    pub warmup_steps: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub grad_clip_max_norm: f64,
    pub frozen_encoder: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            min_steps: 50,
            max_steps: 500,
            eval_every: 5,
            early_stop_patience: 5,
            early_stop_tolerance: 0.01,
            warmup_steps: 100,
            decay_every: 50,
            decay_factor: 0.9,
            weight_decay: 0.1,
            grad_clip_max_norm: 1.0,
            frozen_encoder: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::Config(m.to_string()));
        if self.min_steps > self.max_steps {
            return bad("min_steps exceeds max_steps");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.decay_every == 0 {
            return bad("batch_size, eval_every and decay_every must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    /// Linear warmup to the base rate, then a 10% cut every `decay_every`
    /// steps. `step` counts completed updates.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        } else {
            let k = (step - self.warmup_steps) / self.decay_every;
            self.learning_rate * self.decay_factor.powi(k as i32)
        }
    }
}

/// Early stopping on dev loss and dev macro-F1. Evaluations before
/// `min_steps` are ignored; the first one at or after it sets the reference.
/// Training stops once `patience` further evaluations pass with neither
/// metric improving by the relative tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct StopMonitor {
    pub min_steps: usize,
    pub patience: usize,
    pub tolerance: f64,
    best_loss: Option<f64>,
    best_f1: f64,
    bad: usize,
}

impl StopMonitor {
    pub fn new(min_steps: usize, patience: usize, tolerance: f64) -> Self {
        StopMonitor {
            min_steps,
            patience,
            tolerance,
            best_loss: None,
            best_f1: 0.0,
            bad: 0,
        }
    }

    pub fn observe(&mut self, step: usize, loss: f64, f1: f64) -> bool {
        if step < self.min_steps {
            return false;
        }
        let Some(best_loss) = self.best_loss else {
            self.best_loss = Some(loss);
            self.best_f1 = f1;
            return false;
        };
        let loss_better = loss < best_loss * (1.0 - self.tolerance);
        let f1_better = f1 > self.best_f1 * (1.0 + self.tolerance);
        if loss_better {
            self.best_loss = Some(loss);
        }
        if f1_better {
            self.best_f1 = f1;
        }
        if loss_better || f1_better {
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.bad >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub loss: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TaskModel,
    pub history: Vec<TrainRecord>,
    /// Step of the returned snapshot.
    pub best_step: usize,
    pub steps: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn best_dev_f1(&self) -> f64 {
        self.history
            .iter()
            .find(|r| r.step == self.best_step)
            .map_or(0.0, |r| r.dev_f1)
    }
}

/// Per-class training weights: inverse-proportion weights over the classes
/// present in `train`, zero for classes with no examples.
pub fn training_weights(train: &[TaskExample], n_classes: usize) -> Result<Vec<f64>, ClassifierError> {
    let mut counts = vec![0usize; n_classes];
    for e in train {
        counts[e.class] += 1;
    }
    let present: Vec<(String, usize)> = counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(i, &n)| (i.to_string(), n))
        .collect();
    let w = class_weights(&present)?;
    let mut out = vec![0.0; n_classes];
    for ((i, _), w) in present.iter().zip(w) {
        out[i.parse::<usize>().unwrap()] = w;
    }
    Ok(out)
}

/// Dev loss (with training weights) and macro-F1 of `model`.
pub fn evaluate_dev(model: &TaskModel, dev: &[TaskExample], weights: &[f64]) -> Result<DevMetrics, ClassifierError> {
    let scores: Vec<Array1<f64>> = dev
        .par_iter()
        .map(|e| model.forward(&e.ids, e.span.clone(), e.concept))
        .collect::<Result<_, _>>()?;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut preds = Vec::with_capacity(dev.len());
    for (s, e) in scores.iter().zip(dev) {
        let w = weights[e.class];
        num += w * cross_entropy(s, e.class).0;
        den += w;
        preds.push(argmax(s));
    }
    let golds: Vec<usize> = dev.iter().map(|e| e.class).collect();
    Ok(DevMetrics {
        loss: if den > 0.0 { num / den } else { 0.0 },
        macro_f1: macro_f1(&golds, &preds)?,
    })
}

pub type DevEvaluator<'a> = dyn FnMut(&TaskModel, usize) -> DevMetrics + 'a;

pub fn train_task(
    model: TaskModel,
    train: &[TaskExample],
    dev: &[TaskExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ClassifierError> {
    train_task_with(model, train, dev, cfg, None)
}

/// As [`train_task`]; a supplied `evaluator` replaces dev-set evaluation
/// and receives the model and the number of completed steps.
pub fn train_task_with(
    mut model: TaskModel,
    train: &[TaskExample],
    dev: &[TaskExample],
    cfg: &TrainConfig,
    mut evaluator: Option<&mut DevEvaluator<'_>>,
) -> Result<TrainOutcome, ClassifierError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ClassifierError::EmptyTrain);
    }
    if dev.is_empty() && evaluator.is_none() {
        return Err(ClassifierError::EmptyDev);
    }
    let weights = training_weights(train, model.classes.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(cfg.seed, "batches"));
    let dropout_seed = crate::seeds::derive(cfg.seed, "dropout");

    // Frozen: the encoder never changes, so pool every training span once.
    let frozen_pooled: Option<Vec<Array1<f64>>> = if cfg.frozen_encoder {
        Some(
            train
                .par_iter()
                .map(|e| model.pooled(&e.ids, e.span.clone()))
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };

    let mut opt_head = AdamW::new(cfg.weight_decay);
    let mut opt_enc = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut monitor = StopMonitor::new(cfg.min_steps, cfg.early_stop_patience, cfg.early_stop_tolerance);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, TaskModel)> = None;
    let mut stopped_early = false;
    let mut step = 0;
    while step < cfg.max_steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let idx = &order[cursor..end];
        cursor = end;
        let lr = cfg.lr(step);
        let seed = crate::seeds::derive(dropout_seed, &step.to_string());
        let (loss, mut head_g, mut enc_g) = match &frozen_pooled {
            Some(pooled) => {
                let (l, g) = frozen_batch(&model, train, pooled, idx, &weights, seed);
                (l, g, None)
            }
            None => {
                let batch: Vec<&TaskExample> = idx.iter().map(|&i| &train[i]).collect();
                let (l, g) = model.batch_loss(&batch, &weights, Some(seed), true, true)?;
                let (hg, eg) = g.expect("gradients requested");
                (l, hg, eg)
            }
        };
        if !loss.is_finite() {
            return Err(ClassifierError::NonFinite(step));
        }
        {
            let mut all: Vec<&mut [f64]> = head_g.slices_mut();
            if let Some(eg) = enc_g.as_mut() {
                all.extend(eg.slices_mut());
            }
            clip_global_norm(all, cfg.grad_clip_max_norm);
        }
        opt_head.step(model.head.slices_mut(), head_g.slices(), lr);
        if let Some(eg) = &enc_g {
            opt_enc.step(model.encoder.params.slices_mut(), eg.slices(), lr);
        }
        step += 1;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let m = match evaluator.as_mut() {
                Some(f) => f(&model, step),
                None => evaluate_dev(&model, dev, &weights)?,
            };
            if !m.loss.is_finite() {
                return Err(ClassifierError::NonFinite(step));
            }
            history.push(TrainRecord {
                step,
                lr,
                train_loss: loss,
                dev_loss: m.loss,
                dev_f1: m.macro_f1,
            });
            if best.as_ref().is_none_or(|(f, _, _)| m.macro_f1 > *f) {
                best = Some((m.macro_f1, step, model.clone()));
            }
            if monitor.observe(step, m.loss, m.macro_f1) {
                stopped_early = step < cfg.max_steps;
                break;
            }
        }
    }
    let (_, best_step, best_model) = best.expect("at least one evaluation");
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_step,
        steps: step,
        stopped_early,
    })
}

fn frozen_batch(
    model: &TaskModel,
    train: &[TaskExample],
    pooled: &[Array1<f64>],
    idx: &[usize],
    weights: &[f64],
    seed: u64,
) -> (f64, HeadParams) {
    let norm: f64 = idx.iter().map(|&i| weights[train[i].class]).sum();
    let mut g = model.head.zeros_like();
    if norm == 0.0 {
        return (0.0, g);
    }
    let mut loss = 0.0;
    for (j, &i) in idx.iter().enumerate() {
        let e = &train[i];
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, &j.to_string()));
        let hc = head_forward(&model.head, features(&pooled[i], e.concept), model.config.dropout, Some(&mut rng));
        let w = weights[e.class] / norm;
        let (ce, ds) = cross_entropy(&hc.scores, e.class);
        loss += w * ce;
        head_backward(&model.head, &hc, &(ds * w), &mut g);
    }
    (loss, g)
}

/// Class index counts per class name, in class order.
pub fn class_counts(examples: &[TaskExample], classes: &[String]) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = classes.iter().map(|c| (c.clone(), 0)).collect();
    for e in examples {
        *out.get_mut(&classes[e.class]).unwrap() += 1;
    }
    out
}
