use crate::tensor::{Float, Tensor, Var};

use std::rc::Rc;

use super::position::{alibi_bias, causal_mask, rope_tables};
use super::{BoundParams, LayerVars, ModelConfig, ModelError, PositionalMode, Result};

/// Per-forward constants shared by every attention call: batch geometry,
/// token positions and the additive score masks (causal, plus the ALiBi
/// bias per head in ALiBi mode).
pub struct AttentionContext<F> {
    pub batch: usize,
    pub seq_len: usize,
    pub positions: Vec<usize>,
    masks: Vec<Tensor<F>>,
    rope: Option<(Rc<Vec<F>>, Rc<Vec<F>>)>,
}

impl<F: Float> AttentionContext<F> {
    /// Context for `n_tokens` ids laid out as rows of `seq_len`, with
    /// positions `0..seq_len`.
    pub fn new(config: &ModelConfig, n_tokens: usize, seq_len: usize) -> Result<Self> {
        let positions: Vec<usize> = (0..seq_len).collect();
        Self::with_positions(config, n_tokens, seq_len, &positions)
    }

    pub fn with_positions(
        config: &ModelConfig,
        n_tokens: usize,
        seq_len: usize,
        positions: &[usize],
    ) -> Result<Self> {
        if seq_len == 0 || n_tokens == 0 || n_tokens % seq_len != 0 {
            return Err(ModelError::RaggedBatch {
                len: n_tokens,
                seq_len,
            });
        }
        if seq_len > config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: seq_len,
                max: config.max_seq_len,
            });
        }
        if positions.len() != seq_len {
            return Err(ModelError::InvalidConfig(format!(
                "{} positions for sequence length {seq_len}",
                positions.len()
            )));
        }
        let causal = causal_mask::<F>(seq_len);
        let masks = match config.pos_mode {
            PositionalMode::Alibi => {
                let bias = alibi_bias::<F>(config.n_heads, seq_len);
                let tt = seq_len * seq_len;
                (0..config.n_heads)
                    .map(|h| {
                        let mut m = causal.clone();
                        for (v, &b) in m.data_mut().iter_mut().zip(&bias.data()[h * tt..(h + 1) * tt]) {
                            *v += b;
                        }
                        m
                    })
                    .collect()
            }
            _ => vec![causal],
        };
        let batch = n_tokens / seq_len;
        let rope = match config.pos_mode {
            PositionalMode::Rope { theta } => Some(rope_tables(positions, batch, config.hidden_dim, config.n_heads, theta)),
            _ => None,
        };
        Ok(Self {
            batch,
            seq_len,
            positions: positions.to_vec(),
            masks,
            rope,
        })
    }

    fn mask(&self, head: usize) -> &Tensor<F> {
        &self.masks[head.min(self.masks.len() - 1)]
    }
}

/// Token embeddings for `(batch·T)` ids. In learned-absolute mode the
/// position rows `0..T` are added here, once, and nowhere else.
pub fn embed<'g, F: Float>(
    params: &BoundParams<'g, F>,
    config: &ModelConfig,
    ids: &[usize],
    seq_len: usize,
) -> Result<Var<'g, F>> {
    if seq_len == 0 || ids.is_empty() || ids.len() % seq_len != 0 {
        return Err(ModelError::RaggedBatch {
            len: ids.len(),
            seq_len,
        });
    }
    if seq_len > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: seq_len,
            max: config.max_seq_len,
        });
    }
    let tokens = params.tok_emb.gather_rows(ids)?;
    match params.pos_emb {
        Some(table) => {
            let pos_ids: Vec<usize> = (0..ids.len()).map(|i| i % seq_len).collect();
            Ok(tokens.add(table.gather_rows(&pos_ids)?)?)
        }
        None => Ok(tokens),
    }
}

/// Causal multi-head self-attention over a `(batch·T)×d` activation.
pub fn attention<'g, F: Float>(
    x: Var<'g, F>,
    layer: &LayerVars<'g, F>,
    config: &ModelConfig,
    ctx: &AttentionContext<F>,
) -> Result<Var<'g, F>> {
    let (t, hd) = (ctx.seq_len, config.head_dim());
    let mut q = x.matmul(layer.wq)?;
    let mut k = x.matmul(layer.wk)?;
    let v = x.matmul(layer.wv)?;
    if let Some((cos, sin)) = &ctx.rope {
        q = q.rotate_pairs(cos.clone(), sin.clone())?;
        k = k.rotate_pairs(cos.clone(), sin.clone())?;
    }
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let mut rows = Vec::with_capacity(ctx.batch);
    for b in 0..ctx.batch {
        let mut heads = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let qh = q.slice(b * t, t, h * hd, hd)?;
            let kh = k.slice(b * t, t, h * hd, hd)?;
            let vh = v.slice(b * t, t, h * hd, hd)?;
            let scores = qh.matmul(kh.transpose()?)?.scale(scale);
            let probs = scores.softmax_rows(Some(ctx.mask(h)))?;
            heads.push(probs.matmul(vh)?);
        }
        rows.push(if heads.len() == 1 { heads[0] } else { Var::concat_cols(&heads)? });
    }
    let merged = if rows.len() == 1 { rows[0] } else { Var::concat_rows(&rows)? };
    Ok(merged.matmul(layer.wo)?)
}

/// One decoder layer: pre-norm attention and pre-norm SwiGLU, each with a
/// residual connection.
pub fn layer_forward<'g, F: Float>(
    x: Var<'g, F>,
    layer: &LayerVars<'g, F>,
    config: &ModelConfig,
    ctx: &AttentionContext<F>,
) -> Result<Var<'g, F>> {
    let eps = config.rmsnorm_eps;
    let h = x.add(attention(x.rms_norm(layer.attn_norm, eps)?, layer, config, ctx)?)?;
    let u = h.rms_norm(layer.mlp_norm, eps)?;
    let gated = u.matmul(layer.w_gate)?.silu().mul(u.matmul(layer.w_up)?)?;
    Ok(h.add(gated.matmul(layer.w_down)?)?)
}

/// Final norm and output projection to vocabulary logits.
pub fn lm_head<'g, F: Float>(
    params: &BoundParams<'g, F>,
    config: &ModelConfig,
    h: Var<'g, F>,
) -> Result<Var<'g, F>> {
    Ok(h.rms_norm(params.final_norm, config.rmsnorm_eps)?.matmul(params.head)?)
}

/// Plain stack: every layer applied once, in order.
pub fn forward_stack<'g, F: Float>(
    params: &BoundParams<'g, F>,
    config: &ModelConfig,
    ids: &[usize],
    seq_len: usize,
) -> Result<Var<'g, F>> {
    let ctx = AttentionContext::new(config, ids.len(), seq_len)?;
    let mut h = embed(params, config, ids, seq_len)?;
    for layer in &params.layers {
        h = layer_forward(h, layer, config, &ctx)?;
    }
    lm_head(params, config, h)
}
