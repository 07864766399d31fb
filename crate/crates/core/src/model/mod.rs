//! Small decoder-style transformer language model with exact analytic
//! gradients.
//!
//! Block layout is pre-norm (GPT-2 style):
//!
//! ```text
//! x -> LN1 -> MHA -> (+x) -> LN2 -> W1, act, W2 -> dropout -> (+) -> next block
//! ```
//!
//! Weights follow the `y = x W^T + b` convention: every weight matrix is
//! stored `out x in`, so FFN `w1` is `ffn_width x d_model`.

mod checkpoint;
mod forward;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numkernel::{Matrix, Rng};
use crate::scalar::Scalar;

pub use checkpoint::{load_archive, save_archive, Archive};
pub use forward::{BlockTrace, SequenceTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Next-token prediction with a causal attention mask.
    Causal,
    /// Masked-token prediction with bidirectional attention.
    Masked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Width of each block's first FFN linear layer.
    pub ffn_width: usize,
    pub max_positions: usize,
    pub activation: Activation,
    pub task: Task,
    pub tied_embedding: bool,
    pub decoder_bias: bool,
    pub dropout_rate: f64,
    /// Token id substituted at masked positions for the masked task.
    pub mask_token: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 500,
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            ffn_width: 256,
            max_positions: 256,
            activation: Activation::Relu,
            task: Task::Causal,
            tied_embedding: false,
            decoder_bias: true,
            dropout_rate: 0.0,
            mask_token: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab_size >= 1, InvalidArgument, "vocab_size must be >= 1");
        ensure!(self.d_model >= 1, InvalidArgument, "d_model must be >= 1");
        ensure!(self.n_heads >= 1, InvalidArgument, "n_heads must be >= 1");
        ensure!(
            self.d_model.is_multiple_of(self.n_heads),
            InvalidArgument,
            "d_model {} not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        ensure!(self.ffn_width >= 1, InvalidArgument, "ffn_width must be >= 1");
        ensure!(self.max_positions >= 1, InvalidArgument, "max_positions must be >= 1");
        ensure!(
            (0.0..1.0).contains(&self.dropout_rate),
            InvalidArgument,
            "dropout_rate {} outside [0, 1)",
            self.dropout_rate
        );
        ensure!(
            self.task == Task::Causal || self.mask_token < self.vocab_size,
            InvalidArgument,
            "mask_token {} outside vocabulary",
            self.mask_token
        );
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total number of FFN rows across all blocks.
    pub fn total_ffn_rows(&self) -> usize {
        self.n_layers * self.ffn_width
    }
}

/// Parameters of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_scale: Vec<T>,
    pub ln1_shift: Vec<T>,
    pub wq: Matrix<T>,
    pub bq: Vec<T>,
    pub wk: Matrix<T>,
    pub bk: Vec<T>,
    pub wv: Matrix<T>,
    pub bv: Vec<T>,
    pub wo: Matrix<T>,
    pub bo: Vec<T>,
    pub ln2_scale: Vec<T>,
    pub ln2_shift: Vec<T>,
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let k = cfg.ffn_width;
        Self {
            ln1_scale: vec![T::zero(); d],
            ln1_shift: vec![T::zero(); d],
            wq: Matrix::zeros(d, d),
            bq: vec![T::zero(); d],
            wk: Matrix::zeros(d, d),
            bk: vec![T::zero(); d],
            wv: Matrix::zeros(d, d),
            bv: vec![T::zero(); d],
            wo: Matrix::zeros(d, d),
            bo: vec![T::zero(); d],
            ln2_scale: vec![T::zero(); d],
            ln2_shift: vec![T::zero(); d],
            w1: Matrix::zeros(k, d),
            b1: vec![T::zero(); k],
            w2: Matrix::zeros(d, k),
            b2: vec![T::zero(); d],
        }
    }
}

/// All model parameters. Also used, with identical shapes, as the gradient
/// container inside [`GradientUpdate`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub token_embedding: Matrix<T>,
    pub positional_embedding: Matrix<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub lnf_scale: Vec<T>,
    pub lnf_shift: Vec<T>,
    /// Untied decoder weight (`vocab x d_model`); `None` when tied to the
    /// token embedding.
    pub decoder_weight: Option<Matrix<T>>,
    pub decoder_bias: Option<Vec<T>>,
}

/// Borrowed view of one named parameter tensor.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a [T],
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a mut [T],
}

macro_rules! block_tensors {
    ($b:expr, $d:expr, $k:expr, $emit:ident) => {{
        $emit("ln1_scale", (1, $d), &$b.ln1_scale);
        $emit("ln1_shift", (1, $d), &$b.ln1_shift);
        $emit("wq", ($d, $d), $b.wq.as_slice());
        $emit("bq", (1, $d), &$b.bq);
        $emit("wk", ($d, $d), $b.wk.as_slice());
        $emit("bk", (1, $d), &$b.bk);
        $emit("wv", ($d, $d), $b.wv.as_slice());
        $emit("bv", (1, $d), &$b.bv);
        $emit("wo", ($d, $d), $b.wo.as_slice());
        $emit("bo", (1, $d), &$b.bo);
        $emit("ln2_scale", (1, $d), &$b.ln2_scale);
        $emit("ln2_shift", (1, $d), &$b.ln2_shift);
        $emit("w1", ($k, $d), $b.w1.as_slice());
        $emit("b1", (1, $k), &$b.b1);
        $emit("w2", ($d, $k), $b.w2.as_slice());
        $emit("b2", (1, $d), &$b.b2);
    }};
}

macro_rules! block_tensors_mut {
    ($b:expr, $d:expr, $k:expr, $emit:ident) => {{
        $emit("ln1_scale", (1, $d), &mut $b.ln1_scale);
        $emit("ln1_shift", (1, $d), &mut $b.ln1_shift);
        $emit("wq", ($d, $d), $b.wq.as_mut_slice());
        $emit("bq", (1, $d), &mut $b.bq);
        $emit("wk", ($d, $d), $b.wk.as_mut_slice());
        $emit("bk", (1, $d), &mut $b.bk);
        $emit("wv", ($d, $d), $b.wv.as_mut_slice());
        $emit("bv", (1, $d), &mut $b.bv);
        $emit("wo", ($d, $d), $b.wo.as_mut_slice());
        $emit("bo", (1, $d), &mut $b.bo);
        $emit("ln2_scale", (1, $d), &mut $b.ln2_scale);
        $emit("ln2_shift", (1, $d), &mut $b.ln2_shift);
        $emit("w1", ($k, $d), $b.w1.as_mut_slice());
        $emit("b1", (1, $k), &mut $b.b1);
        $emit("w2", ($d, $k), $b.w2.as_mut_slice());
        $emit("b2", (1, $d), &mut $b.b2);
    }};
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        Ok(Self {
            config: config.clone(),
            token_embedding: Matrix::zeros(v, d),
            positional_embedding: Matrix::zeros(config.max_positions, d),
            blocks: (0..config.n_layers).map(|_| BlockParams::zeros(config)).collect(),
            lnf_scale: vec![T::zero(); d],
            lnf_shift: vec![T::zero(); d],
            decoder_weight: (!config.tied_embedding).then(|| Matrix::zeros(v, d)),
            decoder_bias: config.decoder_bias.then(|| vec![T::zero(); v]),
        })
    }

    /// Random-normal initialisation: every tensor `N(0, 0.02^2)` except
    /// layer-norm scales (1) and shifts (0).
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let std = 0.02;
        p.for_each_tensor_mut(|t| {
            let is_ln = t.name.contains("ln") && (t.name.ends_with("scale") || t.name.ends_with("shift"));
            if is_ln {
                let fill = if t.name.ends_with("scale") { T::one() } else { T::zero() };
                t.data.iter_mut().for_each(|x| *x = fill);
            } else {
                t.data.iter_mut().for_each(|x| *x = T::lit(std * rng.normal()));
            }
        });
        Ok(p)
    }

    /// Visits every tensor in a fixed canonical order.
    pub fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(TensorRef<'a, T>)) {
        let d = self.config.d_model;
        let k = self.config.ffn_width;
        let v = self.config.vocab_size;
        f(TensorRef {
            name: "token_embedding".into(),
            shape: (v, d),
            data: self.token_embedding.as_slice(),
        });
        f(TensorRef {
            name: "positional_embedding".into(),
            shape: self.positional_embedding.shape(),
            data: self.positional_embedding.as_slice(),
        });
        for (i, b) in self.blocks.iter().enumerate() {
            let mut emit = |name: &str, shape: (usize, usize), data: &'a [T]| {
                f(TensorRef {
                    name: format!("blocks.{i}.{name}"),
                    shape,
                    data,
                })
            };
            block_tensors!(b, d, k, emit);
        }
        f(TensorRef {
            name: "lnf_scale".into(),
            shape: (1, d),
            data: &self.lnf_scale,
        });
        f(TensorRef {
            name: "lnf_shift".into(),
            shape: (1, d),
            data: &self.lnf_shift,
        });
        if let Some(w) = &self.decoder_weight {
            f(TensorRef {
                name: "decoder_weight".into(),
                shape: (v, d),
                data: w.as_slice(),
            });
        }
        if let Some(b) = &self.decoder_bias {
            f(TensorRef {
                name: "decoder_bias".into(),
                shape: (1, v),
                data: b,
            });
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(TensorMut<'_, T>)) {
        let d = self.config.d_model;
        let k = self.config.ffn_width;
        let v = self.config.vocab_size;
        let s = self.positional_embedding.shape();
        f(TensorMut {
            name: "token_embedding".into(),
            shape: (v, d),
            data: self.token_embedding.as_mut_slice(),
        });
        f(TensorMut {
            name: "positional_embedding".into(),
            shape: s,
            data: self.positional_embedding.as_mut_slice(),
        });
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let mut emit = |name: &str, shape: (usize, usize), data: &mut [T]| {
                f(TensorMut {
                    name: format!("blocks.{i}.{name}"),
                    shape,
                    data,
                })
            };
            block_tensors_mut!(b, d, k, emit);
        }
        f(TensorMut {
            name: "lnf_scale".into(),
            shape: (1, d),
            data: &mut self.lnf_scale,
        });
        f(TensorMut {
            name: "lnf_shift".into(),
            shape: (1, d),
            data: &mut self.lnf_shift,
        });
        if let Some(w) = &mut self.decoder_weight {
            f(TensorMut {
                name: "decoder_weight".into(),
                shape: (v, d),
                data: w.as_mut_slice(),
            });
        }
        if let Some(b) = &mut self.decoder_bias {
            f(TensorMut {
                name: "decoder_bias".into(),
                shape: (1, v),
                data: b,
            });
        }
    }

    /// Flattened copy of every tensor in canonical order.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.for_each_tensor(|t| out.extend_from_slice(t.data));
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|t| n += t.data.len());
        n
    }

    /// Element-wise `self += alpha * other`; shapes must match.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        ensure!(
            self.config == other.config,
            Shape,
            "parameter sets built from different configs"
        );
        let flat = other.to_flat();
        let mut offset = 0;
        self.for_each_tensor_mut(|t| {
            let n = t.data.len();
            for (x, y) in t.data.iter_mut().zip(&flat[offset..offset + n]) {
                *x += alpha * *y;
            }
            offset += t.data.len();
        });
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.for_each_tensor_mut(|t| t.data.iter_mut().for_each(|x| *x *= s));
    }

    /// Global L2 norm over all tensors.
    pub fn global_norm(&self) -> T {
        let mut acc = T::zero();
        self.for_each_tensor(|t| acc += t.data.iter().map(|&x| x * x).sum::<T>());
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|t| ok &= t.data.iter().all(|x| x.is_finite()));
        ok
    }

    /// The matrix used to decode hidden states into logits.
    pub fn decoder_matrix(&self) -> &Matrix<T> {
        self.decoder_weight.as_ref().unwrap_or(&self.token_embedding)
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config).expect("config already validated");
        let flat = self.to_flat();
        let mut offset = 0;
        out.for_each_tensor_mut(|t| {
            let n = t.data.len();
            for (x, y) in t.data.iter_mut().zip(&flat[offset..offset + n]) {
                *x = U::lit(y.as_f64());
            }
            offset += t.data.len();
        });
        out
    }
}

/// A fixed-length run of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// A user's local batch. `masks` lists the masked positions of each sequence
/// and is only consulted for [`Task::Masked`].
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Batch {
    pub sequences: Vec<TokenSequence>,
    pub masks: Option<Vec<Vec<usize>>>,
}

impl Batch {
    pub fn causal(sequences: Vec<TokenSequence>) -> Self {
        Self { sequences, masks: None }
    }

    pub fn masked(sequences: Vec<TokenSequence>, masks: Vec<Vec<usize>>) -> Self {
        Self {
            sequences,
            masks: Some(masks),
        }
    }

    /// Masks each position independently with probability `rate`, forcing at
    /// least one masked position per sequence.
    pub fn with_random_masks(sequences: Vec<TokenSequence>, rate: f64, rng: &mut Rng) -> Self {
        let masks = sequences
            .iter()
            .map(|s| {
                let mut m: Vec<usize> = (0..s.len()).filter(|_| rng.bernoulli(rate)).collect();
                if m.is_empty() && !s.is_empty() {
                    m.push(rng.below(s.len()));
                }
                m
            })
            .collect();
        Self::masked(sequences, masks)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Per-parameter gradients mirroring [`ModelParams`], averaged over the
/// loss-bearing tokens that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientUpdate<T> {
    pub grads: ModelParams<T>,
    /// Number of loss-bearing tokens behind this update (summed over users
    /// after aggregation).
    pub token_count: usize,
}

impl<T: Scalar> GradientUpdate<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            grads: ModelParams::zeros(config)?,
            token_count: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.grads.config
    }
}

pub(crate) fn check_tokens(cfg: &ModelConfig, batch: &Batch) -> Result<()> {
    ensure!(!batch.is_empty(), InvalidArgument, "empty batch");
    for (i, s) in batch.sequences.iter().enumerate() {
        ensure!(!s.is_empty(), InvalidArgument, "sequence {i} is empty");
        ensure!(
            s.len() <= cfg.max_positions,
            InvalidArgument,
            "sequence {i} has length {} > max_positions {}",
            s.len(),
            cfg.max_positions
        );
        if let Some(&bad) = s.ids().iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} in sequence {i} >= vocab_size {}",
                cfg.vocab_size
            )));
        }
    }
    if cfg.task == Task::Masked {
        let masks = batch
            .masks
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("masked task needs mask positions".into()))?;
        ensure!(
            masks.len() == batch.len(),
            Shape,
            "{} mask lists for {} sequences",
            masks.len(),
            batch.len()
        );
        for (s, m) in batch.sequences.iter().zip(masks) {
            ensure!(
                m.iter().all(|&p| p < s.len()),
                InvalidArgument,
                "mask position outside sequence"
            );
        }
    }
    Ok(())
}

pub use forward::{dropout_loss, forward_loss, gradient};
