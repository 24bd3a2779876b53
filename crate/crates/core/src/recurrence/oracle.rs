//! Reference computations for gradients through re-entered layers.
//!
//! Each routine reaches the same quantity as plain autodiff by a different
//! route: an explicit chain of vector-Jacobian products, one stop-gradient
//! graph per application, or an untied unrolled copy of the model.

use crate::data::Batch;
use crate::model::{embed, layer_forward, lm_head, AttentionContext, LayerParams, LayerVars, ModelConfig, ModelParams};
use crate::tensor::{Float, Graph, Tensor, Var};

use super::{forward_ilr, RecurrenceError, RecurrenceStrategy, ReuseMap, Result};

fn check(params: &ModelParams<impl Float>, map: &ReuseMap, layer: usize) -> Result<()> {
    RecurrenceStrategy::IntraLayer { map: map.clone() }.validate(&params.config)?;
    if layer >= params.config.n_layers {
        return Err(RecurrenceError::LayerOutOfRange {
            layer,
            layers: params.config.n_layers,
        });
    }
    Ok(())
}

fn apply<'g, F: Float>(
    mut h: Var<'g, F>,
    layer: &LayerVars<'g, F>,
    reps: usize,
    config: &ModelConfig,
    ctx: &AttentionContext<F>,
) -> Result<Var<'g, F>> {
    for _ in 0..reps {
        h = layer_forward(h, layer, config, ctx)?;
    }
    Ok(h)
}

/// Layers `from..L` (each with its reuse count), head and mean loss.
fn tail<'g, F: Float>(
    mut h: Var<'g, F>,
    layers: &[LayerVars<'g, F>],
    from: usize,
    map: &ReuseMap,
    bound: &crate::model::BoundParams<'g, F>,
    config: &ModelConfig,
    ctx: &AttentionContext<F>,
    targets: &[usize],
) -> Result<Var<'g, F>> {
    for l in from..layers.len() {
        h = apply(h, &layers[l], map.counts()[l], config, ctx)?;
    }
    Ok(lm_head(bound, config, h)?.cross_entropy_mean(targets)?)
}

/// Hidden state entering layer `layer` (`h^(l−1)`), computed without gradients.
pub fn layer_input<F: Float>(params: &ModelParams<F>, map: &ReuseMap, batch: &Batch, layer: usize) -> Result<Tensor<F>> {
    check(params, map, layer)?;
    let config = &params.config;
    let g = Graph::new();
    let bound = params.bind(&g, false);
    let ctx = AttentionContext::new(config, batch.inputs.len(), batch.seq_len)?;
    let mut h = embed(&bound, config, &batch.inputs, batch.seq_len)?;
    for l in 0..layer {
        h = apply(h, &bound.layers[l], map.counts()[l], config, &ctx)?;
    }
    Ok(h.value())
}

/// Loss as a function of the state entering `layer`, everything else fixed.
pub fn loss_from_layer<F: Float>(
    params: &ModelParams<F>,
    map: &ReuseMap,
    batch: &Batch,
    layer: usize,
    h: &Tensor<F>,
) -> Result<f64> {
    check(params, map, layer)?;
    let config = &params.config;
    let g = Graph::new();
    let bound = params.bind(&g, false);
    let ctx = AttentionContext::new(config, batch.inputs.len(), batch.seq_len)?;
    let x = g.constant(h.clone());
    let loss = tail(x, &bound.layers, layer, map, &bound, config, &ctx, &batch.targets)?;
    Ok(loss.value().data()[0].as_f64())
}

/// `∂L/∂h^(l−1)` two ways.
#[derive(Clone, Debug)]
pub struct InputGradientCheck<F> {
    pub layer: usize,
    /// Gradient retained on the intermediate node of one end-to-end backward pass.
    pub autodiff: Tensor<F>,
    /// `J_f(h^(l,0))ᵀ ⋯ J_f(h^(l,r−1))ᵀ δ^(l,r)`, one VJP per re-entry.
    pub sweep: Tensor<F>,
    /// `δ^(l,k) = ∂L/∂h^(l,k)` for `k = 1..=r_l` (index `k − 1`).
    pub deltas: Vec<Tensor<F>>,
    /// `h^(l,0) … h^(l,r_l)`.
    pub states: Vec<Tensor<F>>,
}

pub fn input_gradient_oracle<F: Float>(
    params: &ModelParams<F>,
    map: &ReuseMap,
    batch: &Batch,
    layer: usize,
) -> Result<InputGradientCheck<F>> {
    check(params, map, layer)?;
    let config = &params.config;
    let ctx = AttentionContext::new(config, batch.inputs.len(), batch.seq_len)?;
    let reps = map.counts()[layer];

    // End to end, with every parameter live.
    let g = Graph::new();
    let bound = params.bind(&g, true);
    let mut h = embed(&bound, config, &batch.inputs, batch.seq_len)?;
    for l in 0..layer {
        h = apply(h, &bound.layers[l], map.counts()[l], config, &ctx)?;
    }
    let h_in = h.retain_grad();
    let mut states = vec![h_in.value()];
    let mut h = h_in;
    for _ in 0..reps {
        h = layer_forward(h, &bound.layers[layer], config, &ctx)?;
        states.push(h.value());
    }
    let loss = tail(h, &bound.layers, layer + 1, map, &bound, config, &ctx, &batch.targets)?;
    let autodiff = g
        .backward(loss)?
        .take(h_in)
        .ok_or_else(|| RecurrenceError::Model(crate::model::ModelError::InvalidConfig("no gradient reached the layer input".into())))?;

    // δ^(l,r_l) from a suffix graph rooted at the last state.
    let g = Graph::new();
    let bound = params.bind(&g, false);
    let x = g.leaf(states[reps].clone());
    let loss = tail(x, &bound.layers, layer + 1, map, &bound, config, &ctx, &batch.targets)?;
    let mut delta = g.backward(loss)?.take(x).expect("leaf gradient");

    let mut deltas = vec![delta.clone()];
    for k in (0..reps).rev() {
        let g = Graph::new();
        let lv = params.layers[layer].bind(&g, false);
        let x = g.leaf(states[k].clone());
        let y = layer_forward(x, &lv, config, &ctx)?;
        delta = g.backward_from(y, delta)?.take(x).expect("leaf gradient");
        if k > 0 {
            deltas.push(delta.clone());
        }
    }
    deltas.reverse();
    Ok(InputGradientCheck {
        layer,
        autodiff,
        sweep: delta,
        deltas,
        states,
    })
}

/// The gradient of one re-entered layer's parameters, split by application.
#[derive(Clone, Debug)]
pub struct GradientDecomposition<F> {
    pub layer: usize,
    /// Contribution of application `k`: parameters live only there, every
    /// other application reading a detached copy.
    pub stop_gradient: Vec<LayerParams<F>>,
    /// Contribution of application `k` as `(∂f/∂θ at h^(l,k−1))ᵀ δ^(l,k)`.
    pub vjp: Vec<LayerParams<F>>,
    /// Shared-parameter gradient from ordinary autodiff.
    pub autodiff: LayerParams<F>,
}

impl<F: Float> GradientDecomposition<F> {
    pub fn stop_gradient_sum(&self) -> LayerParams<F> {
        sum_layers(&self.stop_gradient)
    }

    pub fn vjp_sum(&self) -> LayerParams<F> {
        sum_layers(&self.vjp)
    }
}

fn sum_layers<F: Float>(parts: &[LayerParams<F>]) -> LayerParams<F> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        for (a, b) in acc.tensors_mut().into_iter().zip(p.tensors()) {
            a.add_assign(b);
        }
    }
    acc
}

/// Largest relative difference between two parameter sets, per tensor
/// `max|a−b| / max(max|a|, max|b|, floor)`.
pub fn layer_relative_error<F: Float>(a: &LayerParams<F>, b: &LayerParams<F>, floor: f64) -> f64 {
    a.tensors()
        .into_iter()
        .zip(b.tensors())
        .map(|(x, y)| {
            let scale = x
                .data()
                .iter()
                .chain(y.data())
                .fold(floor, |m, v| m.max(v.as_f64().abs()));
            x.max_abs_diff(y) / scale
        })
        .fold(0.0, f64::max)
}

pub fn param_gradient_decomposition<F: Float>(
    params: &ModelParams<F>,
    map: &ReuseMap,
    batch: &Batch,
    layer: usize,
) -> Result<GradientDecomposition<F>> {
    check(params, map, layer)?;
    let config = &params.config;
    let ctx = AttentionContext::new(config, batch.inputs.len(), batch.seq_len)?;
    let reps = map.counts()[layer];

    let g = Graph::new();
    let bound = params.bind(&g, true);
    let out = forward_ilr(&bound, config, map, &batch.inputs, batch.seq_len, false)?;
    let grads = g.backward(out.logits.cross_entropy_mean(&batch.targets)?)?;
    let autodiff = bound.layers[layer].grads(&grads, &params.layers[layer])?;

    let mut stop_gradient = Vec::with_capacity(reps);
    for k in 0..reps {
        let g = Graph::new();
        let bound = params.bind(&g, false);
        let live = params.layers[layer].bind(&g, true);
        let mut h = embed(&bound, config, &batch.inputs, batch.seq_len)?;
        for l in 0..layer {
            h = apply(h, &bound.layers[l], map.counts()[l], config, &ctx)?;
        }
        for j in 0..reps {
            let weights = if j == k { &live } else { &bound.layers[layer] };
            h = layer_forward(h, weights, config, &ctx)?;
        }
        let loss = tail(h, &bound.layers, layer + 1, map, &bound, config, &ctx, &batch.targets)?;
        stop_gradient.push(live.grads(&g.backward(loss)?, &params.layers[layer])?);
    }

    let sweep = input_gradient_oracle(params, map, batch, layer)?;
    let mut vjp = Vec::with_capacity(reps);
    for k in 0..reps {
        let g = Graph::new();
        let live = params.layers[layer].bind(&g, true);
        let x = g.constant(sweep.states[k].clone());
        let y = layer_forward(x, &live, config, &ctx)?;
        let grads = g.backward_from(y, sweep.deltas[k].clone())?;
        vjp.push(live.grads(&grads, &params.layers[layer])?);
    }

    Ok(GradientDecomposition {
        layer,
        stop_gradient,
        vjp,
        autodiff,
    })
}

/// An untied model whose stack lists layer `l` `r_l` times in a row.
/// Running it as a plain stack reproduces the ILR forward pass.
pub fn tied_unroll<F: Float>(params: &ModelParams<F>, map: &ReuseMap) -> Result<ModelParams<F>> {
    RecurrenceStrategy::IntraLayer { map: map.clone() }.validate(&params.config)?;
    let mut out = params.clone();
    out.config.n_layers = map.effective_depth();
    out.layers = params
        .layers
        .iter()
        .zip(map.counts())
        .flat_map(|(l, &r)| std::iter::repeat(l.clone()).take(r))
        .collect();
    Ok(out)
}

/// Sums the unrolled copies' gradients back onto the tied layers.
pub fn fold_unrolled<F: Float>(grads: &ModelParams<F>, map: &ReuseMap, config: &ModelConfig) -> Result<ModelParams<F>> {
    if grads.layers.len() != map.effective_depth() || map.len() != config.n_layers {
        return Err(RecurrenceError::MapLength {
            len: grads.layers.len(),
            layers: map.effective_depth(),
        });
    }
    let mut out = grads.clone();
    out.config = config.clone();
    let mut copies = grads.layers.iter();
    out.layers = map
        .counts()
        .iter()
        .map(|&r| {
            let group: Vec<LayerParams<F>> = copies.by_ref().take(r).cloned().collect();
            sum_layers(&group)
        })
        .collect();
    Ok(out)
}
