use serde::{Deserialize, Serialize};

use crate::data::{windows, Batch};
use crate::model::ModelParams;
use crate::recurrence::{logits, RecurrenceStrategy};
use crate::tensor::{token_nll, Float};

use super::{AnalysisError, Result};

/// Windows per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: RecurrenceStrategy,
    pub pos_mode: String,
    pub perplexity: f64,
    pub tokens: usize,
    pub nll_mean: f64,
    pub nll_std: f64,
}

/// `exp(mean NLL)` over every full, non-overlapping window of `tokens`.
pub fn perplexity<F: Float>(
    params: &ModelParams<F>,
    strategy: &RecurrenceStrategy,
    tokens: &[usize],
    seq_len: usize,
) -> Result<EvalReport> {
    let all: Vec<&[usize]> = windows(tokens, seq_len).collect();
    if all.is_empty() {
        return Err(AnalysisError::EmptySplit {
            len: tokens.len(),
            need: seq_len + 1,
        });
    }
    let mut nll = Vec::with_capacity(all.len() * seq_len);
    for chunk in all.chunks(EVAL_CHUNK) {
        let batch = Batch::from_windows(chunk.iter().copied(), seq_len).expect("whole windows");
        let out = logits(params, strategy, &batch.inputs, seq_len)?;
        nll.extend(token_nll(&out, &batch.targets)?);
    }
    let n = nll.len() as f64;
    let mean = nll.iter().sum::<f64>() / n;
    let var = nll.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(EvalReport {
        strategy: strategy.clone(),
        pos_mode: params.config.pos_mode.label().to_string(),
        perplexity: mean.exp(),
        tokens: nll.len(),
        nll_mean: mean,
        nll_std: var.sqrt(),
    })
}
