//! LLaMA-style decoder: configuration, parameters and the per-layer
//! transformation that the recurrence engine re-enters.

pub mod checkpoint;
mod layers;
pub mod position;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{Float, Gradients, Graph, Tensor, TensorError, Var};

pub use layers::{attention, embed, forward_stack, layer_forward, lm_head, AttentionContext};
pub use position::PositionalMode;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds the model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token count {len} is not a multiple of sequence length {seq_len}")]
    RaggedBatch { len: usize, seq_len: usize },
    #[error("parameter set does not match config: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Standard deviation of the normal initializer for weight matrices.
pub const INIT_STD: f64 = 0.02;
pub const DEFAULT_RMSNORM_EPS: f64 = 1e-5;

fn default_eps() -> f64 {
    DEFAULT_RMSNORM_EPS
}

/// SwiGLU inner width: `round(8d/3)` rounded up to a multiple of 8.
pub fn default_mlp_hidden(hidden_dim: usize) -> usize {
    let raw = (8.0 * hidden_dim as f64 / 3.0).round() as usize;
    raw.div_ceil(8) * 8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mlp_hidden: usize,
    pub pos_mode: PositionalMode,
    #[serde(default = "default_eps")]
    pub rmsnorm_eps: f64,
}

impl ModelConfig {
    pub fn new(
        hidden_dim: usize,
        n_layers: usize,
        n_heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
        pos_mode: PositionalMode,
    ) -> Self {
        Self {
            hidden_dim,
            n_layers,
            n_heads,
            vocab_size,
            max_seq_len,
            mlp_hidden: default_mlp_hidden(hidden_dim),
            pos_mode,
            rmsnorm_eps: DEFAULT_RMSNORM_EPS,
        }
    }

    /// The 1.2M-parameter configuration (d=128, 4 layers, 4 heads, vocab 1024).
    pub fn paper_small(pos_mode: PositionalMode) -> Self {
        Self::new(128, 4, 4, 1024, 1024, pos_mode.with_max_len(1024))
    }

    /// The 100M-parameter configuration (d=768, 8 layers, 8 heads, vocab 32000).
    pub fn paper_large(pos_mode: PositionalMode) -> Self {
        Self::new(768, 8, 8, 32000, 1024, pos_mode.with_max_len(1024))
    }

    /// Byte-level configuration small enough to train on a laptop CPU.
    pub fn desk_small(pos_mode: PositionalMode) -> Self {
        Self::new(64, 4, 4, crate::data::BYTE_VOCAB, 128, pos_mode.with_max_len(128))
    }

    /// Smallest configuration used by the gradient verification suites.
    pub fn tiny(pos_mode: PositionalMode) -> Self {
        Self::new(16, 2, 2, 32, 8, pos_mode.with_max_len(8))
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.hidden_dim == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return bad("hidden_dim, n_heads and vocab_size must be positive".into());
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.max_seq_len == 0 || self.mlp_hidden == 0 {
            return bad("max_seq_len and mlp_hidden must be positive".into());
        }
        if self.hidden_dim % self.n_heads != 0 {
            return bad(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if !(self.rmsnorm_eps > 0.0) {
            return bad(format!("rmsnorm_eps must be > 0, got {}", self.rmsnorm_eps));
        }
        match self.pos_mode {
            PositionalMode::Rope { theta } => {
                if !(theta > 1.0) {
                    return bad(format!("RoPE theta must be > 1, got {theta}"));
                }
                if self.head_dim() % 2 != 0 {
                    return bad(format!("RoPE needs an even head_dim, got {}", self.head_dim()));
                }
            }
            PositionalMode::LearnedAbsolute { max_len } if max_len < self.max_seq_len => {
                return bad(format!(
                    "learned position table length {max_len} < max_seq_len {}",
                    self.max_seq_len
                ));
            }
            _ => {}
        }
        Ok(())
    }

    /// Parameter count implied by the config (untied embedding and head).
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        let per_layer = 4 * d * d + 3 * d * self.mlp_hidden + 2 * d;
        let pos = match self.pos_mode {
            PositionalMode::LearnedAbsolute { max_len } => max_len * d,
            _ => 0,
        };
        2 * self.vocab_size * d + pos + self.n_layers * per_layer + d
    }
}

/// What the optimizer needs to know about one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    /// Decoder layer the tensor belongs to, if any.
    pub layer: Option<usize>,
    /// Whether decoupled weight decay applies (matrices only; never norms or embeddings).
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub w_gate: Tensor<F>,
    pub w_up: Tensor<F>,
    pub w_down: Tensor<F>,
    pub attn_norm: Tensor<F>,
    pub mlp_norm: Tensor<F>,
}

const LAYER_FIELDS: [(&str, bool); 9] = [
    ("wq", true),
    ("wk", true),
    ("wv", true),
    ("wo", true),
    ("w_gate", true),
    ("w_up", true),
    ("w_down", true),
    ("attn_norm", false),
    ("mlp_norm", false),
];

impl<F: Float> LayerParams<F> {
    pub fn tensors(&self) -> [&Tensor<F>; 9] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
            &self.attn_norm,
            &self.mlp_norm,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<F>; 9] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
            &mut self.attn_norm,
            &mut self.mlp_norm,
        ]
    }

    pub(crate) fn from_iter(it: &mut impl Iterator<Item = Tensor<F>>) -> Self {
        let mut next = || it.next().expect("enough tensors for a layer");
        Self {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            w_gate: next(),
            w_up: next(),
            w_down: next(),
            attn_norm: next(),
            mlp_norm: next(),
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph<F>, trainable: bool) -> LayerVars<'g, F> {
        let mut vars = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) });
        let mut next = || vars.next().expect("nine tensors");
        LayerVars {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            w_gate: next(),
            w_up: next(),
            w_down: next(),
            attn_norm: next(),
            mlp_norm: next(),
        }
    }
}

/// Graph handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars<'g, F> {
    pub wq: Var<'g, F>,
    pub wk: Var<'g, F>,
    pub wv: Var<'g, F>,
    pub wo: Var<'g, F>,
    pub w_gate: Var<'g, F>,
    pub w_up: Var<'g, F>,
    pub w_down: Var<'g, F>,
    pub attn_norm: Var<'g, F>,
    pub mlp_norm: Var<'g, F>,
}

impl<'g, F: Float> LayerVars<'g, F> {
    pub fn vars(&self) -> [Var<'g, F>; 9] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.w_gate,
            self.w_up,
            self.w_down,
            self.attn_norm,
            self.mlp_norm,
        ]
    }

    /// Collects this layer's gradients into a parameter-shaped container.
    pub fn grads(&self, grads: &Gradients<F>, like: &LayerParams<F>) -> Result<LayerParams<F>> {
        let mut out = Vec::with_capacity(9);
        for (v, t) in self.vars().into_iter().zip(like.tensors()) {
            out.push(match grads.get(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(t.shape().to_vec())?,
            });
        }
        Ok(LayerParams::from_iter(&mut out.into_iter()))
    }
}

/// All learnable values of a model. Also used as the container for gradients
/// and optimizer moments, since those share the parameters' shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<F>,
    pub pos_emb: Option<Tensor<F>>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Tensor<F>,
    pub head: Tensor<F>,
}

impl<F: Float> ModelParams<F> {
    /// Normal(0, 0.02²) weights and unit norm scales, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::INIT);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut gauss = |shape: [usize; 2]| {
            Tensor::from_fn(shape, |_| F::from_f64(normal.sample(&mut rng)))
        };
        let (d, m, v) = (config.hidden_dim, config.mlp_hidden, config.vocab_size);
        let tok_emb = gauss([v, d])?;
        let pos_emb = match config.pos_mode {
            PositionalMode::LearnedAbsolute { max_len } => Some(gauss([max_len, d])?),
            _ => None,
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                wq: gauss([d, d])?,
                wk: gauss([d, d])?,
                wv: gauss([d, d])?,
                wo: gauss([d, d])?,
                w_gate: gauss([d, m])?,
                w_up: gauss([d, m])?,
                w_down: gauss([m, d])?,
                attn_norm: Tensor::ones([d])?,
                mlp_norm: Tensor::ones([d])?,
            });
        }
        let head = gauss([d, v])?;
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: Tensor::ones([d])?,
            head,
        })
    }

    /// Names, layer membership and decay flags, in [`Self::tensors`] order.
    pub fn param_infos(config: &ModelConfig) -> Vec<ParamInfo> {
        let mut out = vec![ParamInfo {
            name: "tok_emb".into(),
            layer: None,
            decay: false,
        }];
        if matches!(config.pos_mode, PositionalMode::LearnedAbsolute { .. }) {
            out.push(ParamInfo {
                name: "pos_emb".into(),
                layer: None,
                decay: false,
            });
        }
        for l in 0..config.n_layers {
            for (field, decay) in LAYER_FIELDS {
                out.push(ParamInfo {
                    name: format!("layers.{l}.{field}"),
                    layer: Some(l),
                    decay,
                });
            }
        }
        out.push(ParamInfo {
            name: "final_norm".into(),
            layer: None,
            decay: false,
        });
        out.push(ParamInfo {
            name: "head".into(),
            layer: None,
            decay: true,
        });
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = vec![&self.tok_emb];
        out.extend(self.pos_emb.as_ref());
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.final_norm);
        out.push(&self.head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.tok_emb];
        out.extend(self.pos_emb.as_mut());
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        Self::param_infos(&self.config)
            .into_iter()
            .map(|i| i.name)
            .zip(self.tensors())
            .collect()
    }

    /// Rebuilds a parameter set from tensors in [`Self::tensors`] order,
    /// checking every shape against the config.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let infos = Self::param_infos(config);
        if infos.len() != tensors.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} tensors, got {}",
                infos.len(),
                tensors.len()
            )));
        }
        let template = ModelParams::<f32>::shapes_only(config);
        for ((info, t), shape) in infos.iter().zip(&tensors).zip(template) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamMismatch(format!(
                    "{}: expected shape {:?}, got {:?}",
                    info.name,
                    shape,
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let tok_emb = it.next().expect("checked count");
        let pos_emb = matches!(config.pos_mode, PositionalMode::LearnedAbsolute { .. })
            .then(|| it.next().expect("checked count"));
        let layers = (0..config.n_layers).map(|_| LayerParams::from_iter(&mut it)).collect();
        let final_norm = it.next().expect("checked count");
        let head = it.next().expect("checked count");
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
        })
    }

    fn shapes_only(config: &ModelConfig) -> Vec<Vec<usize>> {
        let (d, m, v) = (config.hidden_dim, config.mlp_hidden, config.vocab_size);
        let mut out = vec![vec![v, d]];
        if let PositionalMode::LearnedAbsolute { max_len } = config.pos_mode {
            out.push(vec![max_len, d]);
        }
        for _ in 0..config.n_layers {
            out.extend([
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, m],
                vec![d, m],
                vec![m, d],
                vec![d],
                vec![d],
            ]);
        }
        out.push(vec![d]);
        out.push(vec![d, v]);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().fill(F::zero());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        let tensors = self.tensors().into_iter().map(|t| t.cast()).collect();
        ModelParams::from_tensors(&self.config, tensors).expect("same config and shapes")
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Registers every tensor on `g`, as differentiable leaves when `trainable`.
    pub fn bind<'g>(&self, g: &'g Graph<F>, trainable: bool) -> BoundParams<'g, F> {
        let leaf = |t: &Tensor<F>| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
        BoundParams {
            tok_emb: leaf(&self.tok_emb),
            pos_emb: self.pos_emb.as_ref().map(leaf),
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
            final_norm: leaf(&self.final_norm),
            head: leaf(&self.head),
        }
    }
}

/// Graph handles for a whole [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams<'g, F> {
    pub tok_emb: Var<'g, F>,
    pub pos_emb: Option<Var<'g, F>>,
    pub layers: Vec<LayerVars<'g, F>>,
    pub final_norm: Var<'g, F>,
    pub head: Var<'g, F>,
}

impl<'g, F: Float> BoundParams<'g, F> {
    pub fn vars(&self) -> Vec<Var<'g, F>> {
        let mut out = vec![self.tok_emb];
        out.extend(self.pos_emb);
        for l in &self.layers {
            out.extend(l.vars());
        }
        out.push(self.final_norm);
        out.push(self.head);
        out
    }

    /// Gradients for every parameter, zero where a tensor did not influence the loss.
    pub fn grads(&self, grads: &Gradients<F>, like: &ModelParams<F>) -> Result<ModelParams<F>> {
        let mut out = Vec::new();
        for (v, t) in self.vars().into_iter().zip(like.tensors()) {
            out.push(match grads.get(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(t.shape().to_vec())?,
            });
        }
        ModelParams::from_tensors(&like.config, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_hidden_rounding() {
        assert_eq!(default_mlp_hidden(128), 344);
        assert_eq!(default_mlp_hidden(64), 176);
        assert_eq!(default_mlp_hidden(16), 48);
        assert_eq!(default_mlp_hidden(768), 2048);
    }

    #[test]
    fn init_is_deterministic_with_unit_norms() {
        let cfg = ModelConfig::tiny(PositionalMode::Nope);
        let a = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let b = ModelParams::<f64>::init(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f64>::init(&cfg, 4).unwrap();
        assert_ne!(a, c);
        for l in &a.layers {
            assert!(l.attn_norm.data().iter().all(|&v| v == 1.0));
            assert!(l.mlp_norm.data().iter().all(|&v| v == 1.0));
        }
        assert!(a.final_norm.data().iter().all(|&v| v == 1.0));
        assert_eq!(a.param_count(), cfg.param_count());
    }

    /// Golden counts for the presets. Table-size sanity: the small preset
    /// sits within 15% of 1.2M and the large preset within 15% of 100M.
    #[test]
    fn preset_parameter_counts() {
        let small = ModelConfig::paper_small(PositionalMode::Nope);
        assert_eq!(small.param_count(), 1_053_824);
        assert!((small.param_count() as f64 / 1.2e6 - 1.0).abs() < 0.15);
        let large = ModelConfig::paper_large(PositionalMode::Nope);
        assert_eq!(large.param_count(), 105_788_160);
        assert!((large.param_count() as f64 / 100e6 - 1.0).abs() < 0.15);
        let p = ModelParams::<f32>::init(&small, 0).unwrap();
        assert_eq!(p.param_count(), 1_053_824);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = ModelConfig::tiny(PositionalMode::Nope);
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny(PositionalMode::Rope { theta: 10_000.0 });
        cfg.hidden_dim = 6;
        cfg.n_heads = 2;
        assert!(cfg.validate().is_err(), "odd head_dim under RoPE");
        let cfg = ModelConfig::tiny(PositionalMode::Rope { theta: 1.0 });
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny(PositionalMode::Nope);
        cfg.pos_mode = PositionalMode::LearnedAbsolute { max_len: 4 };
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny(PositionalMode::Nope);
        cfg.n_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let cfg = ModelConfig::tiny(PositionalMode::LearnedAbsolute { max_len: 8 });
        let p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let tensors: Vec<_> = p.tensors().into_iter().cloned().collect();
        assert_eq!(ModelParams::from_tensors(&cfg, tensors.clone()).unwrap(), p);
        let mut bad = tensors;
        bad[1] = Tensor::zeros([3, 3]).unwrap();
        assert!(ModelParams::from_tensors(&cfg, bad).is_err());
    }
}
