//! Masked-language-model pretraining.

use ndarray::{Array1, Array2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EncoderError, EncoderInit, EncoderParams, EncoderState, Vocabulary, MASK, PAD};
use crate::optim::AdamW;
use crate::seeds;

/// Output projection from encoder states to vocabulary logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead {
    /// `[vocab × d]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl MlmHead {
    pub fn zeros(vocab: usize, d: usize) -> Self {
        MlmHead {
            w: Array2::zeros((vocab, d)),
            b: Array1::zeros(vocab),
        }
    }

    pub fn random(vocab: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        let mut h = MlmHead::zeros(vocab, d);
        h.w.mapv_inplace(|_| dist.sample(&mut rng));
        h
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice().unwrap(), self.b.as_slice().unwrap()]
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_slice_mut().unwrap(), self.b.as_slice_mut().unwrap()]
    }

    fn add_assign(&mut self, o: &MlmHead) {
        self.w += &o.w;
        self.b += &o.b;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub mask_prob: f64,
    pub max_masks_per_seq: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub initial_lr: f64,
    pub weight_decay: f64,
    /// Sequences per optimizer step, realised by accumulating micro-batches.
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub eval_every: usize,
    pub early_stop_tolerance: f64,
    pub early_stop_patience: usize,
    pub max_seq_len: usize,
    pub eval_fraction: f64,
    pub subset_size: Option<usize>,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            mask_prob: 0.15,
            max_masks_per_seq: 20,
            max_steps: 16_500,
            warmup_steps: 5_000,
            initial_lr: 5e-5,
            weight_decay: 0.01,
            effective_batch: 1_024,
            micro_batch: 32,
            eval_every: 100,
            early_stop_tolerance: 0.01,
            early_stop_patience: 3,
            max_seq_len: 128,
            eval_fraction: 0.05,
            subset_size: None,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad("mask_prob must lie in (0, 1)");
        }
        if self.warmup_steps > self.max_steps {
            return bad("warmup_steps exceeds max_steps");
        }
        if self.effective_batch == 0 || self.micro_batch == 0 || self.eval_every == 0 {
            return bad("batch sizes and eval_every must be positive");
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad("eval_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    /// Learning rate for the optimizer update that follows `step` completed
    /// updates: linear warmup to `initial_lr`, then linear decay to zero at
    /// `max_steps`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.initial_lr * step as f64 / self.warmup_steps as f64
        } else if self.max_steps <= self.warmup_steps {
            0.0
        } else {
            let left = self.max_steps.saturating_sub(step) as f64;
            self.initial_lr * left / (self.max_steps - self.warmup_steps) as f64
        }
    }
}

/// Named pretraining corpus sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PretrainPreset {
    Zero,
    Small,
    Medium,
    Large,
}

impl PretrainPreset {
    pub const ALL: [PretrainPreset; 4] = [
        PretrainPreset::Zero,
        PretrainPreset::Small,
        PretrainPreset::Medium,
        PretrainPreset::Large,
    ];

    /// Documents used out of `available`; presets larger than the corpus use
    /// all of it.
    pub fn documents(self, available: usize) -> usize {
        match self {
            PretrainPreset::Zero => 0,
            PretrainPreset::Small => available.min(1_024),
            PretrainPreset::Medium => available.min(16_384),
            PretrainPreset::Large => available,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PretrainPreset::Zero => "Zero",
            PretrainPreset::Small => "Small",
            PretrainPreset::Medium => "Medium",
            PretrainPreset::Large => "Large",
        }
    }
}

impl std::str::FromStr for PretrainPreset {
    type Err = EncoderError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PretrainPreset::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| EncoderError::Config(format!("unknown preset {s:?}")))
    }
}

/// Uniform seeded sample of `n` items, kept in input order.
pub fn subset_corpus<T: Clone>(docs: &[T], n: usize, seed: u64) -> Result<Vec<T>, EncoderError> {
    if n > docs.len() {
        return Err(EncoderError::SubsetTooLarge {
            n,
            size: docs.len(),
        });
    }
    let mut idx = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), docs.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| docs[i].clone()).collect())
}

/// Splits each text into token-id chunks of at most `max_len`.
pub fn sequences_from_texts<S: AsRef<str>>(vocab: &Vocabulary, texts: &[S], max_len: usize) -> Vec<Vec<u32>> {
    texts
        .iter()
        .flat_map(|t| {
            let ids = vocab.encode(t.as_ref());
            ids.chunks(max_len).map(<[u32]>::to_vec).collect::<Vec<_>>()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// A masked sequence: input ids and `(position, original id)` targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSeq {
    pub ids: Vec<u32>,
    pub targets: Vec<(usize, u32)>,
}

/// Selects each non-PAD position with probability `mask_prob`, keeps a
/// uniformly chosen subset of at most `max_masks`, and replaces them with MASK.
pub fn mask_sequence(ids: &[u32], mask_prob: f64, max_masks: usize, rng: &mut impl Rng) -> MaskedSeq {
    let mut chosen: Vec<usize> = (0..ids.len())
        .filter(|&i| ids[i] != PAD && rng.gen_bool(mask_prob))
        .collect();
    if chosen.len() > max_masks {
        let mut keep = index::sample(rng, chosen.len(), max_masks).into_vec();
        keep.sort_unstable();
        chosen = keep.into_iter().map(|j| chosen[j]).collect();
    }
    let mut masked = ids.to_vec();
    let targets = chosen
        .into_iter()
        .map(|i| {
            masked[i] = MASK;
            (i, ids[i])
        })
        .collect();
    MaskedSeq {
        ids: masked,
        targets,
    }
}

/// Mean masked-token cross-entropy over `batch` and, if requested, its
/// gradient with respect to encoder and head parameters.
pub fn mlm_loss(
    enc: &EncoderState,
    head: &MlmHead,
    batch: &[MaskedSeq],
    with_grad: bool,
) -> Result<(f64, Option<(EncoderParams, MlmHead)>), EncoderError> {
    let total: usize = batch.iter().map(|m| m.targets.len()).sum();
    if total == 0 {
        return Ok((0.0, with_grad.then(|| (enc.params.zeros_like(), MlmHead::zeros(head.b.len(), enc.d)))));
    }
    let norm = 1.0 / total as f64;
    let parts: Vec<Result<(f64, Option<(EncoderParams, MlmHead)>), EncoderError>> = batch
        .par_chunks(8)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut grads = with_grad.then(|| (enc.params.zeros_like(), MlmHead::zeros(head.b.len(), enc.d)));
            for seq in chunk {
                if seq.targets.is_empty() {
                    continue;
                }
                let cache = enc.forward(&seq.ids)?;
                let mut dh = Array2::zeros(cache.h.dim());
                for &(pos, target) in &seq.targets {
                    let hrow = cache.h.row(pos);
                    let logits = head.w.dot(&hrow) + &head.b;
                    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let exp = logits.mapv(|x| (x - max).exp());
                    let z = exp.sum();
                    loss += -(logits[target as usize] - max - z.ln());
                    if let Some((_, hg)) = grads.as_mut() {
                        let mut dlogits = exp / z;
                        dlogits[target as usize] -= 1.0;
                        dlogits *= norm;
                        for (v, &g) in dlogits.iter().enumerate() {
                            if g != 0.0 {
                                let mut row = hg.w.row_mut(v);
                                row.scaled_add(g, &hrow);
                            }
                        }
                        hg.b += &dlogits;
                        let mut drow = dh.row_mut(pos);
                        drow += &head.w.t().dot(&dlogits);
                    }
                }
                if let Some((eg, _)) = grads.as_mut() {
                    enc.backward(&cache, &dh, eg);
                }
            }
            Ok((loss, grads))
        })
        .collect();
    let mut loss = 0.0;
    let mut acc: Option<(EncoderParams, MlmHead)> = None;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        if let Some((eg, hg)) = g {
            match acc.as_mut() {
                None => acc = Some((eg, hg)),
                Some((ae, ah)) => {
                    ae.add_assign(&eg);
                    ah.add_assign(&hg);
                }
            }
        }
    }
    Ok((loss * norm, acc))
}

/// Stops after `patience` consecutive evaluations that fail to beat the best
/// loss by more than `tolerance`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub tolerance: f64,
    pub patience: usize,
    best: f64,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(tolerance: f64, patience: usize) -> Self {
        EarlyStopping {
            tolerance,
            patience,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Records one evaluation loss; returns true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.tolerance {
            self.best = loss;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.bad >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: EncoderState,
    pub head: MlmHead,
    pub history: Vec<EvalRecord>,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Trains encoder and head on masked-token prediction with held-out
/// evaluation and early stopping.
pub fn mlm_pretrain(
    enc: EncoderState,
    head: MlmHead,
    sequences: &[Vec<u32>],
    cfg: &MlmConfig,
    seed: u64,
) -> Result<PretrainOutcome, EncoderError> {
    mlm_pretrain_with(enc, head, sequences, cfg, seed, None)
}

/// As [`mlm_pretrain`]; when `evaluator` is given it replaces the held-out
/// loss and receives the number of completed steps.
pub fn mlm_pretrain_with(
    mut enc: EncoderState,
    mut head: MlmHead,
    sequences: &[Vec<u32>],
    cfg: &MlmConfig,
    seed: u64,
    mut evaluator: Option<&mut dyn FnMut(usize) -> f64>,
) -> Result<PretrainOutcome, EncoderError> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(EncoderError::EmptyCorpus);
    }
    if cfg.max_steps == 0 {
        return Ok(PretrainOutcome {
            encoder: enc,
            head,
            history: Vec::new(),
            steps: 0,
            stopped_early: false,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "mlm"));
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut rng);
    let n_eval = if sequences.len() > 1 {
        ((sequences.len() as f64 * cfg.eval_fraction).ceil() as usize).clamp(1, sequences.len() - 1)
    } else {
        0
    };
    let (eval_idx, train_idx) = order.split_at(n_eval);
    let train_idx: Vec<usize> = if train_idx.is_empty() { eval_idx.to_vec() } else { train_idx.to_vec() };
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "mlm-eval"));
    let eval_set: Vec<MaskedSeq> = eval_idx
        .iter()
        .map(|&i| mask_sequence(&sequences[i], cfg.mask_prob, cfg.max_masks_per_seq, &mut eval_rng))
        .collect();

    let mut opt = AdamW::new(cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.early_stop_tolerance, cfg.early_stop_patience);
    let mut history = Vec::new();
    let mut cursor = train_idx.len();
    let mut epoch_order = train_idx.clone();
    let mut stopped_early = false;
    let mut steps = 0;

    for step in 0..cfg.max_steps {
        let mut batch_loss = 0.0;
        let mut batch_masks = 0usize;
        let mut enc_grad = enc.params.zeros_like();
        let mut head_grad = MlmHead::zeros(head.b.len(), enc.d);
        let mut remaining = cfg.effective_batch;
        let mut micro_batches = Vec::new();
        while remaining > 0 {
            let take = remaining.min(cfg.micro_batch);
            let mut mb = Vec::with_capacity(take);
            for _ in 0..take {
                if cursor == epoch_order.len() {
                    epoch_order.shuffle(&mut rng);
                    cursor = 0;
                }
                let ids = &sequences[epoch_order[cursor]];
                cursor += 1;
                mb.push(mask_sequence(ids, cfg.mask_prob, cfg.max_masks_per_seq, &mut rng));
            }
            remaining -= take;
            micro_batches.push(mb);
        }
        // Each micro-batch gradient is a per-token mean; re-weight by token
        // count so the accumulated gradient is the mean over the whole batch.
        for mb in &micro_batches {
            let n: usize = mb.iter().map(|m| m.targets.len()).sum();
            if n == 0 {
                continue;
            }
            let (loss, grads) = mlm_loss(&enc, &head, mb, true)?;
            let (mut eg, mut hg) = grads.expect("gradient requested");
            eg.scale(n as f64);
            hg.w *= n as f64;
            hg.b *= n as f64;
            enc_grad.add_assign(&eg);
            head_grad.add_assign(&hg);
            batch_loss += loss * n as f64;
            batch_masks += n;
        }
        if batch_masks > 0 {
            let inv = 1.0 / batch_masks as f64;
            enc_grad.scale(inv);
            head_grad.w *= inv;
            head_grad.b *= inv;
            batch_loss *= inv;
        }
        if !batch_loss.is_finite() {
            return Err(EncoderError::Divergence(step));
        }
        let lr = cfg.lr(step);
        let mut params = enc.params.slices_mut();
        params.extend(head.slices_mut());
        let mut grads = enc_grad.slices();
        grads.extend(head_grad.slices());
        opt.step(params, grads, lr);
        steps = step + 1;

        if steps % cfg.eval_every == 0 || steps == cfg.max_steps {
            let eval_loss = match evaluator.as_mut() {
                Some(f) => f(steps),
                None => mlm_loss(&enc, &head, &eval_set, false)?.0,
            };
            if !eval_loss.is_finite() {
                return Err(EncoderError::Divergence(step));
            }
            history.push(EvalRecord {
                step: steps,
                lr,
                train_loss: batch_loss,
                eval_loss,
            });
            if stopper.observe(eval_loss) {
                stopped_early = steps < cfg.max_steps;
                break;
            }
        }
    }
    enc.init = EncoderInit::FromCheckpoint;
    Ok(PretrainOutcome {
        encoder: enc,
        head,
        history,
        steps,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let cfg = MlmConfig::default();
        assert_eq!(cfg.lr(0), 0.0);
        assert!((cfg.lr(2_500) - 2.5e-5).abs() < 1e-18);
        assert!((cfg.lr(5_000) - 5e-5).abs() < 1e-18);
        assert!((cfg.lr(10_750) - 2.5e-5).abs() < 1e-18);
        assert_eq!(cfg.lr(16_500), 0.0);
    }

    #[test]
    fn masking_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<u32> = (0..200).map(|i| 3 + i % 7).collect();
        for _ in 0..200 {
            let m = mask_sequence(&ids, 0.15, 20, &mut rng);
            assert!(m.targets.len() <= 20);
            for &(p, t) in &m.targets {
                assert_eq!(m.ids[p], MASK);
                assert_eq!(ids[p], t);
            }
        }
        assert!(mask_sequence(&ids, 0.0, 20, &mut rng).targets.is_empty());
        let pads = vec![PAD; 50];
        assert!(mask_sequence(&pads, 0.9, 20, &mut rng).targets.is_empty());
    }

    #[test]
    fn early_stopping_patience() {
        let mut s = EarlyStopping::new(0.01, 3);
        assert!(!s.observe(1.0));
        assert!(!s.observe(0.995));
        assert!(!s.observe(0.999));
        assert!(s.observe(1.0));
        let mut s = EarlyStopping::new(0.01, 3);
        for l in [1.0, 0.9, 0.8, 0.7] {
            assert!(!s.observe(l));
        }
    }

    #[test]
    fn subset_sampling() {
        let docs: Vec<usize> = (0..50).collect();
        assert_eq!(subset_corpus(&docs, 50, 3).unwrap(), docs);
        let a = subset_corpus(&docs, 10, 3).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, subset_corpus(&docs, 10, 3).unwrap());
        assert!(subset_corpus(&docs, 51, 3).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(PretrainPreset::Small.documents(100_000), 1_024);
        assert_eq!(PretrainPreset::Medium.documents(100_000), 16_384);
        assert_eq!(PretrainPreset::Large.documents(700), 700);
        assert_eq!("medium".parse::<PretrainPreset>().unwrap(), PretrainPreset::Medium);
    }
}
