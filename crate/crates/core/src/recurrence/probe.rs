use crate::model::{lm_head, ModelParams};
use crate::tensor::{Float, Graph, Tensor};

use super::{ForwardTrace, Result, StateLabel};

/// Next-token distribution read off one intermediate state through the
/// final norm and output head.
#[derive(Clone, Debug)]
pub struct ProbeState<F> {
    pub label: StateLabel,
    /// Softmax over the vocabulary, one row per position.
    pub probs: Tensor<F>,
    /// Top-`k` `(token, probability)` per position, most likely first.
    pub top: Vec<Vec<(usize, f64)>>,
}

/// Decodes every state in `trace`. The entry for the last state equals the
/// model's own output distribution.
pub fn logit_probe<F: Float>(params: &ModelParams<F>, trace: &ForwardTrace<F>, top_k: usize) -> Result<Vec<ProbeState<F>>> {
    let mut out = Vec::with_capacity(trace.states.len());
    for (label, state) in &trace.states {
        let g = Graph::new();
        let bound = params.bind(&g, false);
        let logits = lm_head(&bound, &params.config, g.constant(state.clone()))?;
        let probs = logits.softmax_rows(None)?.value();
        let v = probs.last_dim();
        let top = probs
            .data()
            .chunks(v)
            .map(|row| {
                let mut idx: Vec<usize> = (0..v).collect();
                idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
                idx.into_iter().take(top_k).map(|i| (i, row[i].as_f64())).collect()
            })
            .collect();
        out.push(ProbeState {
            label: *label,
            probs,
            top,
        });
    }
    Ok(out)
}
