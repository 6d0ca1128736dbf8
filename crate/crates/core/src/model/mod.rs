//! Transformer encoder classifier with pluggable attention patterns.

mod checkpoint;
mod layout;
mod mask;
mod network;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layout::build_layout;
pub use mask::{build_mask, AttentionMask, AttentionPattern, RowLayout};
pub use network::{ForwardCache, Gradients};

use crate::class::{ProbabilityVector, NUM_CLASSES};
use crate::real::Real;
use crate::tokenizer::TokenWindow;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid attention pattern: {0}")]
    InvalidPattern(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("window does not match the model: {0}")]
    BadWindow(String),
    #[error("non-finite value in {0}")]
    NumericalFault(String),
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint was trained with a different vocabulary")]
    VocabMismatch,
    #[error("checkpoint config does not match the expected config")]
    ConfigMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_ffn_mult() -> usize {
    4
}

/// Architecture of a [`ClassifierModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub classes: usize,
    pub pattern: AttentionPattern,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// d=64, L=2, H=4, dropout 0.1.
    pub fn desk_default(context: usize, vocab_size: usize, pattern: AttentionPattern) -> Self {
        Self {
            context,
            vocab_size,
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            classes: NUM_CLASSES,
            pattern,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.context < 2 {
            return bad(format!("context {} < 2", self.context));
        }
        if self.classes != NUM_CLASSES {
            return bad(format!("class count must be {NUM_CLASSES}, got {}", self.classes));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.layers == 0 || self.ffn_mult == 0 {
            return bad("layers and ffn_mult must be positive".into());
        }
        if self.vocab_size < crate::tokenizer::FIRST_REAL_ID as usize {
            return bad(format!("vocab size {} lacks reserved tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.pattern.validate(self.context)?;
        if !self.pattern.cls_is_global() {
            return Err(ModelError::InvalidPattern(
                "sparse patterns must make the [CLS] position global (g >= 1 / gb >= 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Offsets of one encoder layer's tensors inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ParamLayout {
    pub tensors: Vec<TensorInfo>,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

impl ParamLayout {
    fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorInfo { name, shape, offset });
            offset
        };
        let tok_emb = push("tok_emb".into(), vec![cfg.vocab_size, d]);
        let pos_emb = push("pos_emb".into(), vec![cfg.context, d]);
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut p = |n: &str, shape: Vec<usize>| push(format!("layer{l}.{n}"), shape);
                LayerOffsets {
                    wq: p("wq", vec![d, d]),
                    bq: p("bq", vec![d]),
                    wk: p("wk", vec![d, d]),
                    bk: p("bk", vec![d]),
                    wv: p("wv", vec![d, d]),
                    bv: p("bv", vec![d]),
                    wo: p("wo", vec![d, d]),
                    bo: p("bo", vec![d]),
                    ln1_g: p("ln1_gamma", vec![d]),
                    ln1_b: p("ln1_beta", vec![d]),
                    w1: p("ffn_w1", vec![d, f]),
                    b1: p("ffn_b1", vec![f]),
                    w2: p("ffn_w2", vec![f, d]),
                    b2: p("ffn_b2", vec![d]),
                    ln2_g: p("ln2_gamma", vec![d]),
                    ln2_b: p("ln2_beta", vec![d]),
                }
            })
            .collect();
        let head_w = push("head_w".into(), vec![d, cfg.classes]);
        let head_b = push("head_b".into(), vec![cfg.classes]);
        Self { tensors, tok_emb, pos_emb, layers, head_w, head_b, total }
    }
}

/// Encoder classifier. All parameters live in one flat vector in
/// declaration order; [`ClassifierModel::tensors`] names the slices.
#[derive(Debug, Clone)]
pub struct ClassifierModel<T: Real> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<T>,
}

impl<T: Real> ClassifierModel<T> {
    /// Fresh model: N(0, 1) token embeddings, zero positional embeddings,
    /// N(0, 1/fan_in) weight matrices, zero biases and unit layer-norm gains.
    /// Fully determined by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for t in &layout.tensors {
            let slice = &mut params[t.range()];
            let std = match (t.name.as_str(), t.shape.as_slice()) {
                ("pos_emb", _) => continue,
                ("tok_emb", _) => 1.0,
                (_, &[fan_in, _]) => 1.0 / (fan_in as f64).sqrt(),
                (name, _) if name.ends_with("gamma") => {
                    slice.fill(T::one());
                    continue;
                }
                _ => continue,
            };
            let normal = Normal::new(0.0, std).expect("valid std");
            for v in slice.iter_mut() {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
        Ok(Self { config, layout, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::BadCheckpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.layout.tensors.iter().find(|t| t.name == name)
    }

    /// Zeroes the classification head (weights and bias).
    pub fn zero_head(&mut self) {
        let k = self.config.classes;
        let d = self.config.d_model;
        let (w, b) = (self.layout.head_w, self.layout.head_b);
        self.params[w..w + d * k].fill(T::zero());
        self.params[b..b + k].fill(T::zero());
    }

    /// Same parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> ClassifierModel<U> {
        ClassifierModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub(crate) fn check_window(&self, window: &TokenWindow) -> Result<(), ModelError> {
        let c = self.config.context;
        if window.ids.len() != c {
            return Err(ModelError::BadWindow(format!("length {} != context {c}", window.ids.len())));
        }
        if window.valid_len == 0 || window.valid_len > c {
            return Err(ModelError::BadWindow(format!("valid_len {} out of range", window.valid_len)));
        }
        if let Some(&id) = window.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::BadWindow(format!("token id {id} >= vocab size {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Raw classification scores for one window (inference mode).
    pub fn logits(&self, window: &TokenWindow) -> Result<[f64; NUM_CLASSES], ModelError> {
        self.check_window(window)?;
        let cache = self.forward_cached(window, None)?;
        Ok(cache.logits_f64())
    }

    /// Class probabilities for one window (inference mode, no dropout).
    pub fn forward(&self, window: &TokenWindow) -> Result<ProbabilityVector, ModelError> {
        self.logits(window).map(|l| ProbabilityVector::from_logits(&l))
    }

    /// [`forward`](Self::forward) over many windows in parallel; output order
    /// follows input order.
    pub fn forward_batch(&self, windows: &[TokenWindow]) -> Result<Vec<ProbabilityVector>, ModelError> {
        windows.par_iter().map(|w| self.forward(w)).collect()
    }
}
