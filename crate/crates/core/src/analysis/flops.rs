//! Analytical FLOPs count. A multiply-add is two FLOPs; the backward pass
//! is taken as twice the forward pass, so training costs three forwards.

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::recurrence::{RecurrenceStrategy, ReuseMap};

/// Training FLOPs reported for the small model: baseline, one layer
/// reused, every layer doubled.
pub const REPORTED_BASELINE: f64 = 4.13e15;
pub const REPORTED_REUSE_SINGLE_LAYER: f64 = 5.16e15;
pub const REPORTED_DOUBLED_DEPTH: f64 = 8.24e15;

/// Cost of one application of one decoder layer to a length-`T` sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPassFlops {
    /// Q, K, V, O projections plus the causal score and value products.
    pub attention: f64,
    pub mlp: f64,
    /// The two pre-norms.
    pub norms: f64,
}

impl LayerPassFlops {
    pub fn total(&self) -> f64 {
        self.attention + self.mlp + self.norms
    }
}

/// Per-sequence layer cost. Query `i` attends to `i+1` keys, so the score
/// and value products cover `T(T+1)/2` query-key pairs.
pub fn layer_pass_flops(config: &ModelConfig, seq_len: usize) -> LayerPassFlops {
    let t = seq_len as f64;
    let d = config.hidden_dim as f64;
    let m = config.mlp_hidden as f64;
    let pairs = t * (t + 1.0) / 2.0;
    LayerPassFlops {
        attention: 2.0 * 4.0 * t * d * d + 2.0 * 2.0 * pairs * d,
        mlp: 2.0 * 3.0 * t * d * m,
        norms: 2.0 * norm_flops(t, d),
    }
}

// Square, sum, scale by 1/rms and by the weight: four per element.
fn norm_flops(t: f64, d: f64) -> f64 {
    4.0 * t * d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub applications: usize,
    pub per_application: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub strategy: RecurrenceStrategy,
    pub seq_len: usize,
    pub effective_depth: usize,
    pub per_layer: Vec<LayerFlops>,
    /// Forward FLOPs per sequence, by component.
    pub attention: f64,
    pub mlp: f64,
    pub norms: f64,
    pub head: f64,
    pub embedding: f64,
    /// Σ per-layer totals (what recurrence multiplies).
    pub layer_total: f64,
    pub forward_total: f64,
    pub training_tokens: f64,
    /// `3 × forward_total × training_tokens / T`.
    pub training_total: f64,
}

pub fn forward_flops(
    config: &ModelConfig,
    strategy: &RecurrenceStrategy,
    seq_len: usize,
    training_tokens: f64,
) -> FlopsReport {
    let pass = layer_pass_flops(config, seq_len);
    let apps = strategy.layer_applications(config.n_layers);
    let per_layer: Vec<LayerFlops> = apps
        .iter()
        .enumerate()
        .map(|(layer, &a)| LayerFlops {
            layer,
            applications: a,
            per_application: pass.total(),
            total: a as f64 * pass.total(),
        })
        .collect();
    let depth: f64 = apps.iter().sum::<usize>() as f64;
    let t = seq_len as f64;
    let d = config.hidden_dim as f64;
    // Like the embedding lookup, the block input sum x_t = h_{t−1} + e is not counted.
    let layer_total: f64 = per_layer.iter().map(|l| l.total).sum();
    let head = 2.0 * t * d * config.vocab_size as f64;
    let final_norm = norm_flops(t, d);
    let forward_total = layer_total + head + final_norm;
    FlopsReport {
        strategy: strategy.clone(),
        seq_len,
        effective_depth: strategy.effective_depth(config.n_layers),
        per_layer,
        attention: depth * pass.attention,
        mlp: depth * pass.mlp,
        norms: depth * pass.norms + final_norm,
        head,
        embedding: 0.0,
        layer_total,
        forward_total,
        training_tokens,
        training_total: 3.0 * forward_total * training_tokens / t,
    }
}

/// Cost ratios of the two recurrent configurations against the baseline:
/// one reused layer (map `[1,2,1,…,1]`) and every layer doubled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRatios {
    pub reuse_single_layer: f64,
    pub doubled_depth: f64,
    pub reuse_single_layer_training: f64,
    pub doubled_depth_training: f64,
    pub reported_reuse_single_layer: f64,
    pub reported_doubled_depth: f64,
}

pub fn reference_ratios(config: &ModelConfig, seq_len: usize) -> ReferenceRatios {
    let l = config.n_layers;
    let mut single = vec![1; l];
    single[l.min(2) - 1] = 2;
    let base = forward_flops(config, &RecurrenceStrategy::Baseline, seq_len, seq_len as f64);
    let reuse = forward_flops(
        config,
        &RecurrenceStrategy::IntraLayer {
            map: ReuseMap::new(single).expect("positive counts"),
        },
        seq_len,
        seq_len as f64,
    );
    let doubled = forward_flops(
        config,
        &RecurrenceStrategy::IntraLayer {
            map: ReuseMap::new(vec![2; l]).expect("positive counts"),
        },
        seq_len,
        seq_len as f64,
    );
    ReferenceRatios {
        reuse_single_layer: reuse.layer_total / base.layer_total,
        doubled_depth: doubled.layer_total / base.layer_total,
        reuse_single_layer_training: reuse.training_total / base.training_total,
        doubled_depth_training: doubled.training_total / base.training_total,
        reported_reuse_single_layer: REPORTED_REUSE_SINGLE_LAYER / REPORTED_BASELINE,
        reported_doubled_depth: REPORTED_DOUBLED_DEPTH / REPORTED_BASELINE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PositionalMode;

    fn small() -> ModelConfig {
        ModelConfig::paper_small(PositionalMode::rope())
    }

    #[test]
    fn hand_counted_tiny_layer() {
        // d=16, T=8, m=48: 8·8·256 + 4·36·16 = 16384 + 2304; 6·8·16·48 = 36864; 2·4·8·16 = 1024.
        let p = layer_pass_flops(&ModelConfig::tiny(PositionalMode::Nope), 8);
        assert_eq!(p.attention, 18688.0);
        assert_eq!(p.mlp, 36864.0);
        assert_eq!(p.norms, 1024.0);
    }

    #[test]
    fn components_sum_to_total() {
        for s in [
            RecurrenceStrategy::Baseline,
            RecurrenceStrategy::ilr(&[3, 1, 2, 1]).unwrap(),
            RecurrenceStrategy::Block { steps: 3 },
        ] {
            let r = forward_flops(&small(), &s, 1024, 1e6);
            let sum = r.attention + r.mlp + r.norms + r.head + r.embedding;
            assert!((sum - r.forward_total).abs() <= 1e-9 * r.forward_total);
        }
    }

    #[test]
    fn ratios_are_exact() {
        for (cfg, t) in [(small(), 1024), (ModelConfig::tiny(PositionalMode::Nope), 8)] {
            let mut cfg = cfg;
            cfg.n_layers = 4;
            let r = reference_ratios(&cfg, t);
            assert_eq!(r.reuse_single_layer, 1.25);
            assert_eq!(r.doubled_depth, 2.0);
        }
    }

    #[test]
    fn linear_in_each_count_and_block_scaling() {
        let cfg = small();
        let base = forward_flops(&cfg, &RecurrenceStrategy::Baseline, 256, 256.0);
        let per = base.per_layer[0].per_application;
        let mut prev = base.training_total;
        for r in 2..5 {
            let s = RecurrenceStrategy::ilr(&[1, 1, r, 1]).unwrap();
            let f = forward_flops(&cfg, &s, 256, 256.0);
            assert!((f.layer_total - base.layer_total - (r - 1) as f64 * per).abs() < 1e-3);
            assert!(f.training_total > prev);
            prev = f.training_total;
        }
        let block = forward_flops(&cfg, &RecurrenceStrategy::Block { steps: 3 }, 256, 256.0);
        assert_eq!(block.layer_total, 3.0 * base.layer_total);
        assert_eq!(block.head, base.head);
    }

    #[test]
    fn small_baseline_absolute() {
        let r = forward_flops(&small(), &RecurrenceStrategy::Baseline, 1024, 500e6);
        let rel = (r.training_total - REPORTED_BASELINE).abs() / REPORTED_BASELINE;
        assert!(rel < 0.25, "{:.3e}", r.training_total);
    }
}
