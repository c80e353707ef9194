//! A small trainable text encoder: token embeddings plus trainable positional
//! encodings, followed by one single-head scaled dot-product self-attention
//! layer with a residual connection.
//!
//! ```text
//! X = E[ids] + P[pos]
//! Q, K, V = X Wq, X Wk, X Wv
//! A = softmax(Q Kᵀ / √d)
//! H = X + (A V) Wo
//! ```
//!
//! Gradients are computed by hand (see [`EncoderState::backward`]) in `f64`
//! so they can be checked against finite differences.

mod checkpoint;
pub mod mlm;
mod vocab;

use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use mlm::{
    mask_sequence, mlm_loss, mlm_pretrain, mlm_pretrain_with, sequences_from_texts, subset_corpus,
    EarlyStopping, EvalRecord, MaskedSeq, PretrainOutcome,
    MlmConfig, MlmHead, PretrainPreset,
};
pub use vocab::{Vocabulary, MASK, PAD, SPECIALS, UNK};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("token id {id} outside vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("sequence position {pos} exceeds maximum length {max_len}")]
    TooLong { pos: usize, max_len: usize },
    #[error("non-finite loss at step {0}")]
    Divergence(usize),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error("cannot sample {n} documents from {size}")]
    SubsetTooLarge { n: usize, size: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderInit {
    Random,
    FromCheckpoint,
}

/// Encoder weights. Also used as the gradient accumulator of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub emb: Array2<f64>,
    pub pos: Array2<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

pub const PARAM_NAMES: [&str; 6] = ["emb", "pos", "wq", "wk", "wv", "wo"];

impl EncoderParams {
    pub fn zeros(vocab: usize, max_len: usize, d: usize) -> Self {
        EncoderParams {
            emb: Array2::zeros((vocab, d)),
            pos: Array2::zeros((max_len, d)),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams::zeros(self.emb.nrows(), self.pos.nrows(), self.emb.ncols())
    }

    pub fn tensors(&self) -> [&Array2<f64>; 6] {
        [&self.emb, &self.pos, &self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 6] {
        [
            &mut self.emb,
            &mut self.pos,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
        ]
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.tensors()
            .into_iter()
            .map(|t| t.as_slice().expect("standard layout"))
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.tensors_mut()
            .into_iter()
            .map(|t| t.as_slice_mut().expect("standard layout"))
            .collect()
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, f: f64) {
        for a in self.tensors_mut() {
            a.mapv_inplace(|x| x * f);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub x: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub a: Array2<f64>,
    pub o: Array2<f64>,
    /// Encoder output, one row per token.
    pub h: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub vocab: Vocabulary,
    pub params: EncoderParams,
    pub d: usize,
    pub max_len: usize,
    pub init: EncoderInit,
}

/// Sinusoidal position table with rows `p` and columns alternating sin/cos.
pub fn sinusoidal(max_len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((max_len, d), |(p, j)| {
        let i = (j / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Row-wise softmax.
pub fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut a = s.clone();
    for mut row in a.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    a
}

impl EncoderState {
    pub fn zeros(vocab: Vocabulary, d: usize, max_len: usize) -> Self {
        let params = EncoderParams::zeros(vocab.len(), max_len, d);
        EncoderState {
            vocab,
            params,
            d,
            max_len,
            init: EncoderInit::Random,
        }
    }

    /// Random initialisation with scaled sinusoidal positions.
    pub fn random(vocab: Vocabulary, d: usize, max_len: usize, seed: u64) -> Self {
        assert!(d > 0, "embedding dimension must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = EncoderState::zeros(vocab, d, max_len);
        let emb = Normal::new(0.0, 0.5).unwrap();
        let proj = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        let out = Normal::new(0.0, 0.1 / (d as f64).sqrt()).unwrap();
        let p = &mut state.params;
        p.emb.mapv_inplace(|_| emb.sample(&mut rng));
        p.pos = sinusoidal(max_len, d) * 0.1;
        for w in [&mut p.wq, &mut p.wk, &mut p.wv] {
            w.mapv_inplace(|_| proj.sample(&mut rng));
        }
        p.wo.mapv_inplace(|_| out.sample(&mut rng));
        state
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EncoderState, EncoderError> {
        Ok(load_checkpoint(path)?.0)
    }

    pub fn num_params(&self) -> usize {
        self.params.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn forward(&self, ids: &[u32]) -> Result<ForwardCache, EncoderError> {
        let positions: Vec<usize> = (0..ids.len()).collect();
        self.forward_at(ids, &positions)
    }

    /// Encodes one sequence at explicit positions.
    pub fn forward_at(&self, ids: &[u32], positions: &[usize]) -> Result<ForwardCache, EncoderError> {
        assert_eq!(ids.len(), positions.len());
        let p = &self.params;
        let (n, d) = (ids.len(), self.d);
        let mut x = Array2::zeros((n, d));
        for (i, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
            if id as usize >= self.vocab.len() {
                return Err(EncoderError::IdOutOfRange {
                    id,
                    size: self.vocab.len(),
                });
            }
            if pos >= self.max_len {
                return Err(EncoderError::TooLong {
                    pos,
                    max_len: self.max_len,
                });
            }
            let mut row = x.row_mut(i);
            row += &p.emb.row(id as usize);
            row += &p.pos.row(pos);
        }
        let q = x.dot(&p.wq);
        let k = x.dot(&p.wk);
        let v = x.dot(&p.wv);
        let scale = 1.0 / (d as f64).sqrt();
        let a = softmax_rows(&(q.dot(&k.t()) * scale));
        let o = a.dot(&v);
        let h = &x + &o.dot(&p.wo);
        Ok(ForwardCache {
            ids: ids.to_vec(),
            positions: positions.to_vec(),
            x,
            q,
            k,
            v,
            a,
            o,
            h,
        })
    }

    pub fn encode(&self, ids: &[u32]) -> Result<Array2<f64>, EncoderError> {
        Ok(self.forward(ids)?.h)
    }

    /// Accumulates into `grads` the gradient of a loss given `dh = ∂L/∂H`.
    pub fn backward(&self, cache: &ForwardCache, dh: &Array2<f64>, grads: &mut EncoderParams) {
        let p = &self.params;
        let scale = 1.0 / (self.d as f64).sqrt();
        grads.wo += &cache.o.t().dot(dh);
        let d_o = dh.dot(&p.wo.t());
        let d_a = d_o.dot(&cache.v.t());
        let d_v = cache.a.t().dot(&d_o);
        // softmax backward, row by row
        let row_dot = (&d_a * &cache.a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_s = &cache.a * &(&d_a - &row_dot) * scale;
        let d_q = d_s.dot(&cache.k);
        let d_k = d_s.t().dot(&cache.q);
        grads.wq += &cache.x.t().dot(&d_q);
        grads.wk += &cache.x.t().dot(&d_k);
        grads.wv += &cache.x.t().dot(&d_v);
        let dx = dh + &d_q.dot(&p.wq.t()) + &d_k.dot(&p.wk.t()) + &d_v.dot(&p.wv.t());
        for (i, (&id, &pos)) in cache.ids.iter().zip(&cache.positions).enumerate() {
            let row = dx.row(i);
            let mut e = grads.emb.row_mut(id as usize);
            e += &row;
            let mut pp = grads.pos.row_mut(pos);
            pp += &row;
        }
    }

    /// Mean of encoder output rows in `range`.
    pub fn mean_pool(h: &Array2<f64>, range: std::ops::Range<usize>) -> ndarray::Array1<f64> {
        h.slice(s![range, ..])
            .mean_axis(Axis(0))
            .expect("non-empty range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vocab(n: usize) -> Vocabulary {
        let mut t: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        t.extend((0..n).map(|i| format!("t{i}")));
        Vocabulary::from_tokens(t).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let e = EncoderState::zeros(vocab(4), 3, 8);
        let h = e.encode(&[3, 4, 5]).unwrap();
        assert_eq!(h.dim(), (3, 3));
        assert!(h.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let e = EncoderState::zeros(vocab(2), 2, 4);
        assert!(matches!(e.encode(&[9]), Err(EncoderError::IdOutOfRange { .. })));
        assert!(matches!(e.encode(&[3; 5]), Err(EncoderError::TooLong { .. })));
    }

    /// Two tokens, d = 2, with attention weights worked out by hand.
    #[test]
    fn hand_computed_two_token_instance() {
        let mut e = EncoderState::zeros(vocab(2), 2, 2);
        e.params.emb.row_mut(3).assign(&array![1.0, 0.0]);
        e.params.emb.row_mut(4).assign(&array![0.0, 1.0]);
        e.params.pos = array![[0.0, 0.0], [0.5, 0.5]];
        e.params.wq = Array2::eye(2);
        e.params.wk = Array2::eye(2);
        e.params.wv = Array2::eye(2);
        e.params.wo = Array2::eye(2);

        // ids [3, 4]: x0 = (1,0), x1 = (0.5,1.5)
        // scores/√2: s00 = 1/√2, s01 = 0.5/√2, s10 = 0.5/√2, s11 = 2.5/√2
        let r = 2f64.sqrt();
        let w = |a: f64, b: f64| {
            let (ea, eb) = (a.exp(), b.exp());
            (ea / (ea + eb), eb / (ea + eb))
        };
        let (a00, a01) = w(1.0 / r, 0.5 / r);
        let (a10, a11) = w(0.5 / r, 2.5 / r);
        let h = e.encode(&[3, 4]).unwrap();
        let expect = [
            [1.0 + a00 * 1.0 + a01 * 0.5, 0.0 + a00 * 0.0 + a01 * 1.5],
            [0.5 + a10 * 1.0 + a11 * 0.5, 1.5 + a10 * 0.0 + a11 * 1.5],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert!((h[[i, j]] - expect[i][j]).abs() < 1e-12);
            }
        }

        // Swapped tokens: without positional terms the rows would simply swap.
        let swapped = e.encode(&[4, 3]).unwrap();
        e.params.pos.fill(0.0);
        let a = e.encode(&[3, 4]).unwrap();
        let b = e.encode(&[4, 3]).unwrap();
        assert!((&a.row(0) - &b.row(1)).iter().all(|x| x.abs() < 1e-12));
        assert!((&swapped.row(1) - &h.row(0)).iter().any(|x| x.abs() > 1e-3));
    }

    #[test]
    fn sinusoid_values() {
        let p = sinusoidal(3, 4);
        assert_eq!(p[[0, 0]], 0.0);
        assert_eq!(p[[0, 1]], 1.0);
        assert!((p[[1, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((p[[2, 2]] - (2.0 / 100.0f64).sin()).abs() < 1e-15);
    }
}
