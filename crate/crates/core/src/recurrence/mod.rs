//! Forward passes under a recurrence strategy.
//!
//! * Intra-layer recurrence (ILR): a reuse map `[r_1, …, r_L]` re-enters
//!   layer `l` on its own output `r_l` times with the same weights.
//! * Block recurrence: the whole stack runs `steps` times; step `t` reads
//!   `x_t = h_{t−1} + e` with `h_0 = 0`, so one step is the plain model.
//!
//! Layer indices in this module are zero-based.

pub mod oracle;
mod probe;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Batch;
use crate::model::{embed, layer_forward, lm_head, AttentionContext, BoundParams, ModelConfig, ModelError, ModelParams};
use crate::tensor::{Float, Graph, Tensor, Var};

pub use probe::{logit_probe, ProbeState};

#[derive(Debug, Error)]
pub enum RecurrenceError {
    #[error("map length {len} ≠ layers {layers}")]
    MapLength { len: usize, layers: usize },
    #[error("reuse counts must be ≥ 1, got {0:?}")]
    NonPositiveCount(Vec<usize>),
    #[error("block recurrence needs at least one step")]
    ZeroSteps,
    #[error("layer {layer} out of range for a {layers}-layer model")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::tensor::TensorError> for RecurrenceError {
    fn from(e: crate::tensor::TensorError) -> Self {
        RecurrenceError::Model(e.into())
    }
}

pub type Result<T, E = RecurrenceError> = std::result::Result<T, E>;

/// Per-layer iteration counts `[r_1, …, r_L]`, every entry at least 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ReuseMap(Vec<usize>);

impl ReuseMap {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(RecurrenceError::NonPositiveCount(counts));
        }
        Ok(Self(counts))
    }

    pub fn ones(n_layers: usize) -> Self {
        Self(vec![1; n_layers])
    }

    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn effective_depth(&self) -> usize {
        self.0.iter().sum()
    }
}

impl TryFrom<Vec<usize>> for ReuseMap {
    type Error = RecurrenceError;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ReuseMap> for Vec<usize> {
    fn from(m: ReuseMap) -> Self {
        m.0
    }
}

impl fmt::Display for ReuseMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// How layers are re-entered during one forward pass.
///
/// Serialized as `{"strategy":"baseline"}`, `{"strategy":"ilr","map":[4,2,1,1]}`
/// or `{"strategy":"block","steps":2}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase", try_from = "RawStrategy")]
pub enum RecurrenceStrategy {
    Baseline,
    #[serde(rename = "ilr")]
    IntraLayer {
        map: ReuseMap,
    },
    Block {
        steps: usize,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStrategy {
    strategy: String,
    map: Option<ReuseMap>,
    steps: Option<usize>,
}

impl TryFrom<RawStrategy> for RecurrenceStrategy {
    type Error = String;

    fn try_from(r: RawStrategy) -> std::result::Result<Self, String> {
        match (r.strategy.as_str(), r.map, r.steps) {
            ("baseline", None, None) => Ok(RecurrenceStrategy::Baseline),
            ("ilr", Some(map), None) => Ok(RecurrenceStrategy::IntraLayer { map }),
            ("block", None, Some(steps)) => Ok(RecurrenceStrategy::Block { steps }),
            ("baseline" | "ilr" | "block", _, _) => Err(format!("fields do not match strategy {:?}", r.strategy)),
            (k, _, _) => Err(format!("unknown strategy {k:?} (expected baseline, ilr or block)")),
        }
    }
}

impl RecurrenceStrategy {
    pub fn ilr(counts: &[usize]) -> Result<Self> {
        Ok(RecurrenceStrategy::IntraLayer {
            map: ReuseMap::new(counts.to_vec())?,
        })
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match self {
            RecurrenceStrategy::Baseline => Ok(()),
            RecurrenceStrategy::IntraLayer { map } => {
                if map.counts().contains(&0) {
                    return Err(RecurrenceError::NonPositiveCount(map.counts().to_vec()));
                }
                if map.len() != config.n_layers {
                    return Err(RecurrenceError::MapLength {
                        len: map.len(),
                        layers: config.n_layers,
                    });
                }
                Ok(())
            }
            RecurrenceStrategy::Block { steps } => {
                if *steps == 0 {
                    Err(RecurrenceError::ZeroSteps)
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Total number of layer applications in one forward pass.
    pub fn effective_depth(&self, n_layers: usize) -> usize {
        match self {
            RecurrenceStrategy::Baseline => n_layers,
            RecurrenceStrategy::IntraLayer { map } => map.effective_depth(),
            RecurrenceStrategy::Block { steps } => steps * n_layers,
        }
    }

    /// How many times each layer runs per forward pass.
    pub fn layer_applications(&self, n_layers: usize) -> Vec<usize> {
        match self {
            RecurrenceStrategy::Baseline => vec![1; n_layers],
            RecurrenceStrategy::IntraLayer { map } => map.counts().to_vec(),
            RecurrenceStrategy::Block { steps } => vec![*steps; n_layers],
        }
    }

    /// Strategy name for result tables.
    pub fn kind(&self) -> String {
        match self {
            RecurrenceStrategy::Baseline => "baseline".into(),
            RecurrenceStrategy::IntraLayer { .. } => "ilr".into(),
            RecurrenceStrategy::Block { steps } => format!("block(r={steps})"),
        }
    }

    /// Reuse-map column for result tables (`-` when not an ILR run).
    pub fn map_label(&self) -> String {
        match self {
            RecurrenceStrategy::IntraLayer { map } => map.to_string(),
            _ => "-".into(),
        }
    }
}

impl fmt::Display for RecurrenceStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecurrenceStrategy::Baseline => f.write_str("Baseline"),
            RecurrenceStrategy::IntraLayer { map } => write!(f, "ILR {map}"),
            RecurrenceStrategy::Block { steps } => write!(f, "Block (r={steps})"),
        }
    }
}

/// Where a captured state came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateLabel {
    /// Block step (always 0 outside block recurrence).
    pub step: usize,
    pub layer: usize,
    /// Zero-based re-entry index `k − 1` within the layer.
    pub iteration: usize,
}

impl fmt::Display for StateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {} layer {} iter {}", self.step, self.layer, self.iteration)
    }
}

/// Block-recurrence step record: the step input `x_t` and output `h_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStep<F> {
    pub input: Tensor<F>,
    pub hidden: Tensor<F>,
}

/// Every intermediate state of a forward pass, in execution order.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<F> {
    pub embedding: Tensor<F>,
    pub states: Vec<(StateLabel, Tensor<F>)>,
    pub block_steps: Vec<BlockStep<F>>,
}

impl<F: Float> ForwardTrace<F> {
    fn new(embedding: Tensor<F>) -> Self {
        Self {
            embedding,
            states: Vec::new(),
            block_steps: Vec::new(),
        }
    }

    /// States `h^(l,1) … h^(l,r_l)` of layer `layer` (all block steps in order).
    pub fn layer_states(&self, layer: usize) -> Vec<&Tensor<F>> {
        self.states
            .iter()
            .filter(|(l, _)| l.layer == layer)
            .map(|(_, t)| t)
            .collect()
    }
}

/// Result of a recorded forward pass.
pub struct Forward<'g, F> {
    pub logits: Var<'g, F>,
    pub embedding: Var<'g, F>,
    /// Input to the first application of each layer (last block step in block mode).
    pub layer_inputs: Vec<Var<'g, F>>,
    pub trace: Option<ForwardTrace<F>>,
}

/// Records the forward pass of `strategy` on `g`.
pub fn forward<'g, F: Float>(
    params: &BoundParams<'g, F>,
    config: &ModelConfig,
    strategy: &RecurrenceStrategy,
    ids: &[usize],
    seq_len: usize,
    capture: bool,
) -> Result<Forward<'g, F>> {
    strategy.validate(config)?;
    match strategy {
        RecurrenceStrategy::Baseline => {
            forward_ilr(params, config, &ReuseMap::ones(config.n_layers), ids, seq_len, capture)
        }
        RecurrenceStrategy::IntraLayer { map } => forward_ilr(params, config, map, ids, seq_len, capture),
        RecurrenceStrategy::Block { steps } => forward_block(params, config, *steps, ids, seq_len, capture),
    }
}

/// Intra-layer recurrence: `h^(l,1) = f_l(h^(l−1))`, `h^(l,k) = f_l(h^(l,k−1))`.
/// Every re-entry uses the same layer parameters and the original token
/// positions; nothing positional is added between iterations.
pub fn forward_ilr<'g, F: Float>(
    params: &BoundParams<'g, F>,
    config: &ModelConfig,
    map: &ReuseMap,
    ids: &[usize],
    seq_len: usize,
    capture: bool,
) -> Result<Forward<'g, F>> {
    RecurrenceStrategy::IntraLayer { map: map.clone() }.validate(config)?;
    let ctx = AttentionContext::new(config, ids.len(), seq_len)?;
    let embedding = embed(params, config, ids, seq_len)?;
    let mut trace = capture.then(|| ForwardTrace::new(embedding.value()));
    let mut layer_inputs = Vec::with_capacity(config.n_layers);
    let mut h = embedding;
    for (l, (layer, &reps)) in params.layers.iter().zip(map.counts()).enumerate() {
        layer_inputs.push(h);
        for k in 0..reps {
            h = layer_forward(h, layer, config, &ctx)?;
            if let Some(tr) = trace.as_mut() {
                tr.states.push((
                    StateLabel {
                        step: 0,
                        layer: l,
                        iteration: k,
                    },
                    h.value(),
                ));
            }
        }
    }
    Ok(Forward {
        logits: lm_head(params, config, h)?,
        embedding,
        layer_inputs,
        trace,
    })
}

/// Block recurrence with `x_t = h_{t−1} + e` and `h_0 = 0`.
pub fn forward_block<'g, F: Float>(
    params: &BoundParams<'g, F>,
    config: &ModelConfig,
    steps: usize,
    ids: &[usize],
    seq_len: usize,
    capture: bool,
) -> Result<Forward<'g, F>> {
    RecurrenceStrategy::Block { steps }.validate(config)?;
    let ctx = AttentionContext::new(config, ids.len(), seq_len)?;
    let embedding = embed(params, config, ids, seq_len)?;
    let mut trace = capture.then(|| ForwardTrace::new(embedding.value()));
    let mut layer_inputs = vec![embedding; config.n_layers];
    let mut hidden: Option<Var<'g, F>> = None;
    for t in 0..steps {
        // h_0 = 0, so the first step's input is exactly e.
        let x = match hidden {
            None => embedding,
            Some(h) => h.add(embedding)?,
        };
        let mut h = x;
        for (l, layer) in params.layers.iter().enumerate() {
            layer_inputs[l] = h;
            h = layer_forward(h, layer, config, &ctx)?;
            if let Some(tr) = trace.as_mut() {
                tr.states.push((
                    StateLabel {
                        step: t,
                        layer: l,
                        iteration: 0,
                    },
                    h.value(),
                ));
            }
        }
        if let Some(tr) = trace.as_mut() {
            tr.block_steps.push(BlockStep {
                input: x.value(),
                hidden: h.value(),
            });
        }
        hidden = Some(h);
    }
    let h = hidden.expect("steps ≥ 1");
    Ok(Forward {
        logits: lm_head(params, config, h)?,
        embedding,
        layer_inputs,
        trace,
    })
}

/// Logits without recording gradients.
pub fn logits<F: Float>(
    params: &ModelParams<F>,
    strategy: &RecurrenceStrategy,
    ids: &[usize],
    seq_len: usize,
) -> Result<Tensor<F>> {
    let g = Graph::new();
    let bound = params.bind(&g, false);
    Ok(forward(&bound, &params.config, strategy, ids, seq_len, false)?.logits.value())
}

/// Logits together with the captured trace.
pub fn logits_with_trace<F: Float>(
    params: &ModelParams<F>,
    strategy: &RecurrenceStrategy,
    ids: &[usize],
    seq_len: usize,
) -> Result<(Tensor<F>, ForwardTrace<F>)> {
    let g = Graph::new();
    let bound = params.bind(&g, false);
    let out = forward(&bound, &params.config, strategy, ids, seq_len, true)?;
    Ok((out.logits.value(), out.trace.expect("capture requested")))
}

/// Mean cross-entropy of `batch` and the gradient for every parameter.
pub fn loss_and_grads<F: Float>(
    params: &ModelParams<F>,
    strategy: &RecurrenceStrategy,
    batch: &Batch,
) -> Result<(f64, ModelParams<F>)> {
    let g = Graph::new();
    let bound = params.bind(&g, true);
    let out = forward(&bound, &params.config, strategy, &batch.inputs, batch.seq_len, false)?;
    let loss = out.logits.cross_entropy_mean(&batch.targets)?;
    let value = loss.value().data()[0].as_f64();
    let grads = g.backward(loss)?;
    Ok((value, bound.grads(&grads, params)?))
}

/// Mean cross-entropy of `batch` without gradients.
pub fn loss<F: Float>(params: &ModelParams<F>, strategy: &RecurrenceStrategy, batch: &Batch) -> Result<f64> {
    let g = Graph::new();
    let bound = params.bind(&g, false);
    let out = forward(&bound, &params.config, strategy, &batch.inputs, batch.seq_len, false)?;
    Ok(out.logits.cross_entropy_mean(&batch.targets)?.value().data()[0].as_f64())
}
