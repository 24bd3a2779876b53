//! Runnable oracle suite: finite differences, the reverse Jacobian sweep,
//! per-application gradient decomposition, strategy equivalences, positional
//! encoding properties and the FLOPs ratios. Each check reports what it
//! measured against its tolerance.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{forward_flops, reference_ratios, REPORTED_BASELINE};
use crate::data::Batch;
use crate::model::position::{alibi_bias, apply_rope};
use crate::model::{attention, embed, layer_forward, AttentionContext, ModelConfig, ModelParams, PositionalMode};
use crate::recurrence::oracle::{
    input_gradient_oracle, layer_relative_error, param_gradient_decomposition, tied_unroll, fold_unrolled,
};
use crate::recurrence::{logits, logits_with_trace, loss, loss_and_grads, RecurrenceStrategy, ReuseMap, Result};
use crate::tensor::grad_check::relative_error;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Tiny,
    Small,
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "small" => Ok(Scale::Small),
            other => Err(format!("unknown scale {other:?} (expected tiny or small)")),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Tiny => "tiny",
            Scale::Small => "small",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub tolerance: f64,
    pub measured: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, tolerance: f64, measured: f64) -> Self {
        Self {
            name: name.into(),
            tolerance,
            measured,
            passed: measured <= tolerance,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<52} measured {:>10.3e}  tolerance {:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub scale: Scale,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Model, reuse map, batch and how many coordinates per tensor to probe by
/// finite differences (`None` = all).
pub struct Fixture {
    pub config: ModelConfig,
    pub map: ReuseMap,
    pub batch: Batch,
    pub fd_samples: Option<usize>,
}

impl Fixture {
    pub fn new(scale: Scale, mode: PositionalMode) -> Self {
        let (config, map, batch_size, fd_samples) = match scale {
            Scale::Tiny => (ModelConfig::tiny(mode), vec![3, 2], 2, None),
            Scale::Small => (ModelConfig::new(32, 4, 4, 64, 16, mode.with_max_len(16)), vec![2, 3, 1, 2], 2, Some(24)),
        };
        let t = config.max_seq_len;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = batch_size * t;
        let inputs: Vec<usize> = (0..n).map(|_| rng.gen_range(0..config.vocab_size)).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..config.vocab_size)).collect();
        Self {
            config,
            map: ReuseMap::new(map).expect("positive counts"),
            batch: Batch::new(inputs, targets, t).expect("whole rows"),
            fd_samples,
        }
    }

    pub fn params(&self) -> ModelParams<f64> {
        // Larger than the training init so every path carries a visible gradient.
        let mut p = ModelParams::<f64>::init(&self.config, 5).expect("valid config");
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        p
    }

    pub fn strategy(&self) -> RecurrenceStrategy {
        RecurrenceStrategy::IntraLayer { map: self.map.clone() }
    }
}

/// Step of the five-point central stencil. The loss is a sum over many
/// tokens, so at h≈1e-5 roundoff swamps gradients near the 1e-8 floor.
pub const FD_STEP: f64 = 1e-3;

/// Largest relative error between backward() and central differences over
/// the probed coordinates of every parameter tensor.
pub fn finite_difference_error(fx: &Fixture, params: &ModelParams<f64>, floor: f64) -> Result<f64> {
    let strategy = fx.strategy();
    let (_, grads) = loss_and_grads(params, &strategy, &fx.batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let n = params.tensors()[ti].numel();
        let coords: Vec<usize> = match fx.fd_samples {
            Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let mut p = params.clone();
            let x0 = p.tensors()[ti].data()[j];
            let mut at = |k: f64| {
                p.tensors_mut()[ti].data_mut()[j] = x0 + k * FD_STEP;
                loss(&p, &strategy, &fx.batch)
            };
            let fd = (-at(2.0)? + 8.0 * at(1.0)? - 8.0 * at(-1.0)? + at(-2.0)?) / (12.0 * FD_STEP);
            let ad = grads.tensors()[ti].data()[j];
            worst = worst.max(relative_error(ad, fd, floor));
        }
    }
    Ok(worst)
}

fn rel_max(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = a.data().iter().chain(b.data()).fold(1e-300_f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / scale
}

fn params_relative_error(a: &ModelParams<f64>, b: &ModelParams<f64>) -> f64 {
    a.tensors()
        .into_iter()
        .zip(b.tensors())
        .map(|(x, y)| rel_max(x, y))
        .fold(0.0, f64::max)
}

pub fn gradient_checks(fx: &Fixture, out: &mut Vec<Check>) -> Result<()> {
    let params = fx.params();
    let mode = fx.config.pos_mode.label();
    out.push(Check::new(
        format!("finite differences, map {} ({mode})", fx.map),
        1e-4,
        finite_difference_error(fx, &params, 1e-8)?,
    ));
    for layer in 0..fx.config.n_layers {
        let c = input_gradient_oracle(&params, &fx.map, &fx.batch, layer)?;
        out.push(Check::new(
            format!("input-gradient sweep, layer {layer} ({mode})"),
            1e-9,
            rel_max(&c.autodiff, &c.sweep),
        ));
    }
    for layer in 0..fx.config.n_layers {
        let r = fx.map.counts()[layer];
        if r < 2 {
            continue;
        }
        let d = param_gradient_decomposition(&params, &fx.map, &fx.batch, layer)?;
        out.push(Check::new(
            format!("stop-gradient sum, layer {layer} r={r} ({mode})"),
            1e-10,
            layer_relative_error(&d.stop_gradient_sum(), &d.autodiff, 1e-30),
        ));
        out.push(Check::new(
            format!("per-application VJP sum, layer {layer} r={r} ({mode})"),
            1e-10,
            layer_relative_error(&d.vjp_sum(), &d.autodiff, 1e-30),
        ));
    }
    Ok(())
}

pub fn equivalence_checks(fx: &Fixture, out: &mut Vec<Check>) -> Result<()> {
    let params = fx.params();
    let mode = fx.config.pos_mode.label();
    let t = fx.batch.seq_len;
    let ids = &fx.batch.inputs;
    let base = logits(&params, &RecurrenceStrategy::Baseline, ids, t)?;
    let ones = logits(
        &params,
        &RecurrenceStrategy::IntraLayer {
            map: ReuseMap::ones(fx.config.n_layers),
        },
        ids,
        t,
    )?;
    let block = logits(&params, &RecurrenceStrategy::Block { steps: 1 }, ids, t)?;
    out.push(Check::new(format!("baseline ≡ ILR all-ones ({mode})"), 1e-12, base.max_abs_diff(&ones)));
    out.push(Check::new(format!("baseline ≡ block, 1 step ({mode})"), 1e-12, base.max_abs_diff(&block)));

    let strategy = fx.strategy();
    let unrolled = tied_unroll(&params, &fx.map)?;
    let a = logits(&params, &strategy, ids, t)?;
    let b = logits(&unrolled, &RecurrenceStrategy::Baseline, ids, t)?;
    out.push(Check::new(format!("tied unroll forward ({mode})"), 1e-12, a.max_abs_diff(&b)));
    let (_, tied) = loss_and_grads(&params, &strategy, &fx.batch)?;
    let (_, untied) = loss_and_grads(&unrolled, &RecurrenceStrategy::Baseline, &fx.batch)?;
    let folded = fold_unrolled(&untied, &fx.map, &params.config)?;
    out.push(Check::new(
        format!("tied unroll gradient sum ({mode})"),
        1e-10,
        params_relative_error(&tied, &folded),
    ));
    Ok(())
}

/// Max |score(p) − score(p + shift)| of RoPE-rotated query-key dot products.
pub fn rope_shift_error(positions: &[usize], shift: usize, n_heads: usize, head_dim: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = n_heads * head_dim;
    let t = positions.len();
    let q = Tensor::from_fn([t, d], |_| rng.gen_range(-1.0..1.0)).expect("extents");
    let k = Tensor::from_fn([t, d], |_| rng.gen_range(-1.0..1.0)).expect("extents");
    let scores = |pos: &[usize]| {
        let g = Graph::new();
        let (qr, kr) = apply_rope(g.constant(q.clone()), g.constant(k.clone()), pos, n_heads, 10_000.0).expect("shapes");
        let (qr, kr) = (qr.value(), kr.value());
        let mut s = Vec::new();
        for h in 0..n_heads {
            for i in 0..t {
                for j in 0..t {
                    let dot: f64 = (0..head_dim)
                        .map(|c| qr.data()[i * d + h * head_dim + c] * kr.data()[j * d + h * head_dim + c])
                        .sum();
                    s.push(dot);
                }
            }
        }
        s
    };
    let shifted: Vec<usize> = positions.iter().map(|p| p + shift).collect();
    scores(positions)
        .iter()
        .zip(scores(&shifted))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub fn position_checks(out: &mut Vec<Check>) -> Result<()> {
    let positions: Vec<usize> = (0..8).collect();
    out.push(Check::new("RoPE score invariance under position shift +37", 1e-10, rope_shift_error(&positions, 37, 2, 8)));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_fn([1, 16], |_| rng.gen_range(-1.0..1.0)).expect("extents");
    let g = Graph::new();
    let (q0, k0) = apply_rope(g.constant(x.clone()), g.constant(x.clone()), &[0], 2, 10_000.0)?;
    let identity = q0.value().max_abs_diff(&x).max(k0.value().max_abs_diff(&x));
    out.push(Check::new("RoPE position 0 is the identity", 0.0, identity));

    let (h, t) = (4, 12);
    let bias = alibi_bias::<f64>(h, t);
    let mut dev: f64 = 0.0;
    for hh in 0..h {
        for i in 0..t {
            dev = dev.max(bias.data()[(hh * t + i) * t + i].abs());
            for j in 0..t {
                if i + 1 < t && j + 1 < t {
                    let a = bias.data()[(hh * t + i) * t + j];
                    let b = bias.data()[(hh * t + i + 1) * t + j + 1];
                    dev = dev.max((a - b).abs());
                }
            }
        }
    }
    out.push(Check::new("ALiBi bias depends on distance only, zero diagonal", 0.0, dev));

    let cfg = ModelConfig::tiny(PositionalMode::Nope);
    let p = ModelParams::<f64>::init(&cfg, 8)?;
    let gph = Graph::new();
    let b = p.bind(&gph, false);
    let ids: Vec<usize> = (0..8).map(|i| (i * 3) % 32).collect();
    let e = embed(&b, &cfg, &ids, 8)?;
    let ctx_a = AttentionContext::new(&cfg, 8, 8)?;
    let ctx_b = AttentionContext::with_positions(&cfg, 8, 8, &[5, 9, 2, 40, 7, 7, 100, 1])?;
    let ya = attention(e, &b.layers[0], &cfg, &ctx_a)?.value();
    let yb = attention(e, &b.layers[0], &cfg, &ctx_b)?.value();
    out.push(Check::new("NoPE attention ignores the position argument", 0.0, ya.max_abs_diff(&yb)));

    out.push(Check::new(
        "learned positions added once under map [2,1,1,1]",
        0.0,
        learned_positions_once_error()?,
    ));
    Ok(())
}

/// Replays an ILR [2,1,1,1] trace with a learned position table: the
/// embedding must be token row + position row, and every state must be the
/// layer applied to the previous state with nothing added in between.
pub fn learned_positions_once_error() -> Result<f64> {
    let mut cfg = ModelConfig::tiny(PositionalMode::LearnedAbsolute { max_len: 8 });
    cfg.n_layers = 4;
    let mut p = ModelParams::<f64>::init(&cfg, 9)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    if let Some(pos) = p.pos_emb.as_mut() {
        for v in pos.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let ids: Vec<usize> = (0..8).map(|i| (i * 5 + 2) % 32).collect();
    let strategy = RecurrenceStrategy::ilr(&[2, 1, 1, 1])?;
    let (_, trace) = logits_with_trace(&p, &strategy, &ids, 8)?;
    let pos = p.pos_emb.as_ref().expect("learned table");
    let mut err: f64 = 0.0;
    for (r, &id) in ids.iter().enumerate() {
        for c in 0..cfg.hidden_dim {
            let want = p.tok_emb.data()[id * cfg.hidden_dim + c] + pos.data()[r * cfg.hidden_dim + c];
            err = err.max((trace.embedding.data()[r * cfg.hidden_dim + c] - want).abs());
        }
    }
    let g = Graph::new();
    let b = p.bind(&g, false);
    let ctx = AttentionContext::new(&cfg, ids.len(), 8)?;
    let mut prev = trace.embedding.clone();
    for (label, state) in &trace.states {
        let replay = layer_forward(g.constant(prev.clone()), &b.layers[label.layer], &cfg, &ctx)?.value();
        err = err.max(replay.max_abs_diff(state));
        prev = state.clone();
    }
    Ok(err)
}

pub fn flops_checks(out: &mut Vec<Check>) {
    let cfg = ModelConfig::paper_small(PositionalMode::rope());
    let r = reference_ratios(&cfg, 1024);
    out.push(Check::new("FLOPs ratio reuse-one-layer / baseline = 1.25", 0.0, (r.reuse_single_layer - 1.25).abs()));
    out.push(Check::new("FLOPs ratio doubled depth / baseline = 2.0", 0.0, (r.doubled_depth - 2.0).abs()));
    out.push(Check::new(
        "FLOPs doubled-depth ratio vs reported 1.995",
        0.02,
        (r.doubled_depth - r.reported_doubled_depth).abs() / r.reported_doubled_depth,
    ));
    let base = forward_flops(&cfg, &RecurrenceStrategy::Baseline, 1024, 500e6);
    out.push(Check::new(
        "FLOPs small baseline at 500M tokens vs 4.13e15",
        0.25,
        (base.training_total - REPORTED_BASELINE).abs() / REPORTED_BASELINE,
    ));
}

/// Full suite: gradient and equivalence checks under all four positional
/// modes, then the positional and FLOPs checks.
pub fn run_suite(scale: Scale) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for mode in PositionalMode::ALL {
        let fx = Fixture::new(scale, mode);
        gradient_checks(&fx, &mut checks)?;
        equivalence_checks(&fx, &mut checks)?;
    }
    position_checks(&mut checks)?;
    flops_checks(&mut checks);
    Ok(SuiteReport { scale, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_parsing() {
        assert_eq!("tiny".parse::<Scale>().unwrap(), Scale::Tiny);
        assert!("huge".parse::<Scale>().is_err());
    }

    #[test]
    fn position_and_flops_checks_pass() {
        let mut c = Vec::new();
        position_checks(&mut c).unwrap();
        flops_checks(&mut c);
        for check in &c {
            assert!(check.passed, "{check}");
        }
    }

    #[test]
    fn equivalences_pass_at_small_scale() {
        let mut c = Vec::new();
        equivalence_checks(&Fixture::new(Scale::Small, PositionalMode::Alibi), &mut c).unwrap();
        assert!(c.iter().all(|x| x.passed), "{c:?}");
    }

    #[test]
    fn a_broken_gradient_is_caught() {
        let fx = Fixture::new(Scale::Tiny, PositionalMode::Nope);
        let p = fx.params();
        assert!(finite_difference_error(&fx, &p, 1e-8).unwrap() < 1e-4);
        let c = Check::new("x", 1e-4, 2e-4);
        assert!(!c.passed);
        assert!(c.to_string().starts_with("FAIL"));
    }
}
