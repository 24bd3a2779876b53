//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any gating criterion fails.

use std::time::{Duration, Instant};

use ilr_core::analysis::{forward_flops, perplexity, reference_ratios, sweep, REPORTED_BASELINE, REPORTED_DOUBLED_DEPTH};
use ilr_core::config::{RunConfig, PRESETS};
use ilr_core::data::{decode_cache, encode_cache, read_cache, synthetic_text, tokenize_bytes, write_cache, Corpus};
use ilr_core::model::checkpoint::{self, CheckpointMeta, StoredParams};
use ilr_core::model::position::{alibi_bias, alibi_slopes, apply_rope};
use ilr_core::model::{attention, embed, layer_forward, AttentionContext};
use ilr_core::recurrence::oracle::{input_gradient_oracle, param_gradient_decomposition};
use ilr_core::recurrence::{logits, logits_with_trace, loss, loss_and_grads};
use ilr_core::train::{self, TrainConfig};
use ilr_core::{Batch, Float, Graph, ModelConfig, ModelParams, PositionalMode, RecurrenceStrategy, ReuseMap, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    gating: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome {
        passed,
        gating: true,
        detail,
    }
}

fn tiny_params(mode: PositionalMode, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(&ModelConfig::tiny(mode), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    p
}

fn tiny_batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * 8;
    let inputs = (0..n).map(|_| rng.gen_range(0..32)).collect();
    let targets = (0..n).map(|_| rng.gen_range(0..32)).collect();
    Batch::new(inputs, targets, 8).unwrap()
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = a.data().iter().chain(b.data()).fold(1e-300_f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / scale
}

fn ilr(map: &[usize]) -> RecurrenceStrategy {
    RecurrenceStrategy::ilr(map).unwrap()
}

// Central differences on every coordinate of every parameter tensor. The
// five-point stencil keeps roundoff below the 1e-8 floor at a step of 1e-3.
fn criterion_1() -> Outcome {
    let started = Instant::now();
    let strategy = ilr(&[3, 2]);
    let batch = tiny_batch(1);
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for mode in PositionalMode::ALL {
        let params = tiny_params(mode, 2);
        let (_, grads) = loss_and_grads(&params, &strategy, &batch).unwrap();
        let n_tensors = params.tensors().len();
        for ti in 0..n_tensors {
            for j in 0..params.tensors()[ti].numel() {
                let mut p = params.clone();
                let x0 = p.tensors()[ti].data()[j];
                let mut at = |k: f64| {
                    p.tensors_mut()[ti].data_mut()[j] = x0 + k * h;
                    loss(&p, &strategy, &batch).unwrap()
                };
                let fd = (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * h);
                worst = worst.max(rel(grads.tensors()[ti].data()[j], fd, 1e-8));
                count += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 60.0,
        format!("{count} coordinates over 4 PE modes, max rel err {worst:.2e} (tol 1e-4), {secs:.1}s (limit 60s)"),
    )
}

fn criterion_2() -> Outcome {
    let map = ReuseMap::new(vec![3, 2]).unwrap();
    let batch = tiny_batch(3);
    let mut worst: f64 = 0.0;
    for mode in PositionalMode::ALL {
        let params = tiny_params(mode, 4);
        for layer in 0..2 {
            let c = input_gradient_oracle(&params, &map, &batch, layer).unwrap();
            assert!(c.autodiff.data().iter().any(|v| v.abs() > 1e-6), "vacuous input gradient");
            worst = worst.max(max_rel(&c.autodiff, &c.sweep));
        }
    }
    outcome(worst <= 1e-9, format!("every layer, 4 PE modes, max rel err {worst:.2e} (tol 1e-9)"))
}

fn criterion_3() -> Outcome {
    let map = ReuseMap::new(vec![3, 2]).unwrap();
    let batch = tiny_batch(5);
    let mut worst: f64 = 0.0;
    let mut spread: f64 = 0.0;
    for mode in PositionalMode::ALL {
        let params = tiny_params(mode, 6);
        for layer in 0..2 {
            let d = param_gradient_decomposition(&params, &map, &batch, layer).unwrap();
            let sum = d.stop_gradient_sum();
            for (s, a) in sum.tensors().into_iter().zip(d.autodiff.tensors()) {
                worst = worst.max(max_rel(s, a));
            }
            // The contributions must differ, otherwise the sum says nothing.
            for (x, y) in d.stop_gradient[0].tensors().into_iter().zip(d.stop_gradient[1].tensors()) {
                spread = spread.max(x.max_abs_diff(y));
            }
        }
    }
    outcome(
        worst <= 1e-10 && spread > 1e-6,
        format!("r ∈ {{3, 2}}, 4 PE modes, max rel err {worst:.2e} (tol 1e-10)"),
    )
}

// Unrolled copy built here: one untied layer per application, gradients
// summed back per original layer.
fn unroll(p: &ModelParams<f64>, map: &[usize]) -> ModelParams<f64> {
    let mut out = p.clone();
    out.layers = map.iter().enumerate().flat_map(|(l, &r)| std::iter::repeat(p.layers[l].clone()).take(r)).collect();
    out.config.n_layers = out.layers.len();
    out
}

fn fold(g: &ModelParams<f64>, map: &[usize], like: &ModelParams<f64>) -> ModelParams<f64> {
    let mut out = g.clone();
    out.config = like.config.clone();
    out.layers.clear();
    let mut next = 0;
    for &r in map {
        let mut acc = g.layers[next].clone();
        for k in 1..r {
            for (a, b) in acc.tensors_mut().into_iter().zip(g.layers[next + k].tensors()) {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
        }
        next += r;
        out.layers.push(acc);
    }
    out
}

fn criterion_4() -> Outcome {
    let batch = tiny_batch(7);
    let ids = &batch.inputs;
    let map = [3, 2];
    let (mut eq, mut fwd, mut bwd): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for mode in PositionalMode::ALL {
        let p = tiny_params(mode, 8);
        let base = logits(&p, &RecurrenceStrategy::Baseline, ids, 8).unwrap();
        eq = eq.max(base.max_abs_diff(&logits(&p, &ilr(&[1, 1]), ids, 8).unwrap()));
        eq = eq.max(base.max_abs_diff(&logits(&p, &RecurrenceStrategy::Block { steps: 1 }, ids, 8).unwrap()));

        let u = unroll(&p, &map);
        let a = logits(&p, &ilr(&map), ids, 8).unwrap();
        let b = logits(&u, &RecurrenceStrategy::Baseline, ids, 8).unwrap();
        fwd = fwd.max(a.max_abs_diff(&b));
        let (_, tied) = loss_and_grads(&p, &ilr(&map), &batch).unwrap();
        let (_, untied) = loss_and_grads(&u, &RecurrenceStrategy::Baseline, &batch).unwrap();
        let folded = fold(&untied, &map, &p);
        for (x, y) in tied.tensors().into_iter().zip(folded.tensors()) {
            bwd = bwd.max(max_rel(x, y));
        }
    }
    outcome(
        eq <= 1e-12 && fwd <= 1e-12 && bwd <= 1e-10,
        format!(
            "4 PE modes: baseline/all-ones/block(1) {eq:.1e} (tol 1e-12), unroll forward {fwd:.1e} (tol 1e-12), gradient sum {bwd:.1e} (tol 1e-10)"
        ),
    )
}

fn rope_scores(q: &Tensor<f64>, k: &Tensor<f64>, positions: &[usize], heads: usize) -> Vec<f64> {
    let g = Graph::new();
    let (qr, kr) = apply_rope(g.constant(q.clone()), g.constant(k.clone()), positions, heads, 10_000.0).unwrap();
    let (qr, kr) = (qr.value(), kr.value());
    let (t, d) = (q.shape()[0], q.shape()[1]);
    let hd = d / heads;
    let mut s = Vec::new();
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                s.push((0..hd).map(|c| qr.data()[i * d + h * hd + c] * kr.data()[j * d + h * hd + c]).sum());
            }
        }
    }
    s
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (t, d, heads) = (10, 16, 2);
    let q = Tensor::from_fn([t, d], |_| rng.gen_range(-1.0..1.0)).unwrap();
    let k = Tensor::from_fn([t, d], |_| rng.gen_range(-1.0..1.0)).unwrap();
    let pos: Vec<usize> = (0..t).collect();
    let base = rope_scores(&q, &k, &pos, heads);
    let mut shift_err: f64 = 0.0;
    for s in [1, 7, 100, 1000] {
        let shifted: Vec<usize> = pos.iter().map(|p| p + s).collect();
        for (a, b) in base.iter().zip(rope_scores(&q, &k, &shifted, heads)) {
            shift_err = shift_err.max((a - b).abs());
        }
    }

    let g = Graph::new();
    let row = Tensor::from_fn([1, d], |i| i as f64 - 3.5).unwrap();
    let (q0, k0) = apply_rope(g.constant(row.clone()), g.constant(row.clone()), &[0], heads, 10_000.0).unwrap();
    let identity = q0.value().data() == row.data() && k0.value().data() == row.data();

    let h = 4;
    let bias = alibi_bias::<f64>(h, t);
    let slopes = alibi_slopes(h);
    let mut alibi_ok = slopes == vec![0.25, 0.0625, 0.015625, 0.00390625];
    for hh in 0..h {
        for i in 0..t {
            for j in 0..t {
                let b = bias.data()[(hh * t + i) * t + j];
                let want = -slopes[hh] * (i as f64 - j as f64);
                alibi_ok &= if i == j { b == 0.0 } else { b == want };
            }
        }
    }

    let cfg = ModelConfig::tiny(PositionalMode::Nope);
    let p = tiny_params(PositionalMode::Nope, 10);
    let gr = Graph::new();
    let bound = p.bind(&gr, false);
    let ids: Vec<usize> = (0..8).map(|i| (i * 11) % 32).collect();
    let e = embed(&bound, &cfg, &ids, 8).unwrap();
    let a = attention(e, &bound.layers[0], &cfg, &AttentionContext::new(&cfg, 8, 8).unwrap()).unwrap().value();
    let alt = AttentionContext::with_positions(&cfg, 8, 8, &[3, 1, 4, 1, 5, 9, 2, 6]).unwrap();
    let b = attention(e, &bound.layers[0], &cfg, &alt).unwrap().value();
    let nope_ok = a.data() == b.data();

    let once_ok = learned_positions_once();
    outcome(
        shift_err < 1e-10 && identity && alibi_ok && nope_ok && once_ok,
        format!(
            "RoPE shift {shift_err:.1e} (tol 1e-10), RoPE pos-0 identity {identity}, ALiBi distance-only {alibi_ok}, NoPE invariant {nope_ok}, learned positions once {once_ok}"
        ),
    )
}

// Under [2,1,1,1] the embedding is token + position row, and each layer
// application consumes the previous state exactly, with no position re-added.
fn learned_positions_once() -> bool {
    let mut cfg = ModelConfig::tiny(PositionalMode::LearnedAbsolute { max_len: 8 });
    cfg.n_layers = 4;
    let mut p = ModelParams::<f64>::init(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for v in p.pos_emb.as_mut().unwrap().data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let ids: Vec<usize> = (0..16).map(|i| (i * 5 + 1) % 32).collect();
    let (_, trace) = logits_with_trace(&p, &ilr(&[2, 1, 1, 1]), &ids, 8).unwrap();
    let d = cfg.hidden_dim;
    let pos = p.pos_emb.as_ref().unwrap();
    let mut ok = trace.states.len() == 5;
    for (r, &id) in ids.iter().enumerate() {
        for c in 0..d {
            let want = p.tok_emb.data()[id * d + c] + pos.data()[(r % 8) * d + c];
            ok &= trace.embedding.data()[r * d + c] == want;
        }
    }
    let g = Graph::new();
    let b = p.bind(&g, false);
    let ctx = AttentionContext::new(&cfg, ids.len(), 8).unwrap();
    let mut prev = trace.embedding.clone();
    for (label, state) in &trace.states {
        let replay = layer_forward(g.constant(prev.clone()), &b.layers[label.layer], &cfg, &ctx).unwrap().value();
        ok &= replay.data() == state.data();
        prev = state.clone();
    }
    ok
}

fn criterion_6() -> Outcome {
    let cfg = ModelConfig::paper_small(PositionalMode::rope());
    let (t, d, m, v) = (1024.0, cfg.hidden_dim as f64, cfg.mlp_hidden as f64, cfg.vocab_size as f64);
    let layer = 8.0 * t * d * d + 4.0 * d * t * (t + 1.0) / 2.0 + 6.0 * t * d * m + 8.0 * t * d;
    let fwd = 4.0 * layer + 2.0 * t * d * v + 4.0 * t * d;
    let tokens = 500e6;
    let hand = 3.0 * fwd * tokens / t;
    let lib = forward_flops(&cfg, &RecurrenceStrategy::Baseline, 1024, tokens).training_total;
    let r = reference_ratios(&cfg, 1024);
    let reported_ratio = REPORTED_DOUBLED_DEPTH / REPORTED_BASELINE;
    let abs_err = (lib - REPORTED_BASELINE).abs() / REPORTED_BASELINE;
    let passed = rel(lib, hand, 1.0) < 1e-12
        && r.reuse_single_layer == 1.25
        && r.doubled_depth == 2.0
        && (r.doubled_depth - reported_ratio).abs() / reported_ratio <= 0.02
        && abs_err <= 0.25;
    outcome(
        passed,
        format!(
            "reuse-one-layer {} (want 1.25), doubled {} vs reported {reported_ratio:.4} (±2%), baseline {lib:.3e} vs 4.13e15 ({:+.1}%, ±25%)",
            r.reuse_single_layer,
            r.doubled_depth,
            100.0 * (lib - REPORTED_BASELINE) / REPORTED_BASELINE
        ),
    )
}

fn smoke_corpus() -> Corpus {
    let text = synthetic_text(1 << 20, 2024);
    assert!(text.len() >= 1 << 20);
    ilr_core::data::split(tokenize_bytes(&text), 0.1, 128).unwrap()
}

fn smoke_run(corpus: &Corpus) -> (ModelParams<f32>, ilr_core::train::TrainReport) {
    let cfg = ModelConfig::desk_small(PositionalMode::rope());
    let tc = TrainConfig::desk_small();
    let mut p = ModelParams::<f32>::init(&cfg, tc.seed).unwrap();
    let report = train::train(&mut p, corpus.train(), &RecurrenceStrategy::Baseline, &tc, &mut ()).unwrap();
    (p, report)
}

fn bits(p: &ModelParams<f32>) -> Vec<u32> {
    p.tensors().into_iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

fn criterion_7() -> Outcome {
    let started = Instant::now();
    let corpus = smoke_corpus();
    let (p1, r1) = smoke_run(&corpus);
    let ppl = perplexity(&p1, &RecurrenceStrategy::Baseline, corpus.test(), 128).unwrap().perplexity;
    let (p2, r2) = smoke_run(&corpus);
    let same_losses = r1.losses.iter().map(|v| v.to_bits()).eq(r2.losses.iter().map(|v| v.to_bits()));
    let identical = same_losses && bits(&p1) == bits(&p2);
    let (first, last) = (r1.initial_loss.unwrap(), r1.final_loss.unwrap());
    let secs = started.elapsed().as_secs_f64();
    outcome(
        r1.steps == 500 && last <= 0.8 * first && ppl < 257.0 && identical && secs < 900.0,
        format!(
            "{} bytes, 500 steps: loss {first:.3} → {last:.3} (ratio {:.3}, need ≤ 0.8), test ppl {ppl:.2} (< 257), rerun bit-identical {identical}, {secs:.0}s for both runs",
            corpus.tokens.len(),
            last / first
        ),
    )
}

fn criterion_8() -> Outcome {
    let corpus = smoke_corpus();
    let spec = RunConfig::preset("desk-small").unwrap().sweep_spec(1).unwrap();
    let table = sweep::<f32>(&corpus, &spec).unwrap();
    let csv = table.to_csv().unwrap();
    let dir = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let path = dir.join("acceptance-sweep.csv");
    std::fs::write(&path, &csv).unwrap();
    println!("{}", table.render());
    let summary = table.summary();
    let means: Vec<String> = summary
        .iter()
        .map(|s| format!("{} {}: {}", s.strategy, s.reuse_map, s.mean_perplexity.map_or("failed".into(), |m| format!("{m:.3}"))))
        .collect();
    let produced = table.rows.len() == 9 && summary.len() == 3 && table.rows.iter().all(|r| r.perplexity.is_some());
    Outcome {
        passed: produced,
        gating: false,
        detail: format!("3-seed means [{}], csv at {}", means.join("; "), path.display()),
    }
}

fn same_bits<F: Float>(a: &ModelParams<F>, b: &ModelParams<F>) -> bool {
    a.config == b.config
        && a.tensors().len() == b.tensors().len()
        && a.tensors().into_iter().zip(b.tensors()).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(u, v)| u.as_f64().to_bits() == v.as_f64().to_bits())
        })
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::desk_small(PositionalMode::Alibi);
    let meta = CheckpointMeta {
        model: cfg.clone(),
        strategy: ilr(&[2, 1, 1, 1]),
        seq_len: 128,
        step: 123,
    };
    let p32 = ModelParams::<f32>::init(&cfg, 3).unwrap();
    let p64 = tiny_params(PositionalMode::LearnedAbsolute { max_len: 8 }, 4);
    let meta64 = CheckpointMeta {
        model: p64.config.clone(),
        ..meta.clone()
    };
    let path = dir.path().join("a.ckpt");
    checkpoint::save(&path, &meta, &p32).unwrap();
    let (m, s) = checkpoint::load(&path).unwrap();
    let mut ckpt_ok = m == meta && matches!(&s, StoredParams::F32(q) if same_bits(q, &p32));
    let bytes = checkpoint::encode(&meta64, &p64).unwrap();
    let (m, s) = checkpoint::decode(&bytes).unwrap();
    ckpt_ok &= m == meta64 && matches!(&s, StoredParams::F64(q) if same_bits(q, &p64));
    if let StoredParams::F64(q) = &s {
        ckpt_ok &= checkpoint::encode(&meta64, q).unwrap() == bytes;
    }

    let text = synthetic_text(50_000, 5);
    let tokens = tokenize_bytes(&text);
    let mut cache_ok = decode_cache(&encode_cache(&tokens).unwrap()).unwrap() == tokens;
    let cache = dir.path().join("c.toks");
    write_cache(&cache, &tokens).unwrap();
    cache_ok &= read_cache(&cache).unwrap() == tokens;
    let raw = dir.path().join("c.txt");
    std::fs::write(&raw, &text).unwrap();
    let a = Corpus::from_files(&[raw], 0.1, 64).unwrap();
    let b = Corpus::from_files(&[cache], 0.1, 64).unwrap();
    cache_ok &= a.tokens == b.tokens && a.train_end == b.train_end;

    let mut config_ok = true;
    for name in PRESETS {
        let c = RunConfig::preset(name).unwrap();
        let once = c.to_json();
        let parsed = RunConfig::from_json(&once, name).unwrap();
        config_ok &= parsed == c && parsed.to_json() == once;
    }
    outcome(
        ckpt_ok && cache_ok && config_ok,
        format!("checkpoint f32/f64 bit-exact {ckpt_ok}, token cache bit-exact {cache_ok}, config fixed point over {} presets {config_ok}", PRESETS.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient correctness (finite differences)", criterion_1),
        ("2 input-gradient reverse sweep", criterion_2),
        ("3 parameter-gradient decomposition", criterion_3),
        ("4 strategy equivalences", criterion_4),
        ("5 positional-encoding properties", criterion_5),
        ("6 FLOPs model", criterion_6),
        ("7 desk-scale training smoke", criterion_7),
        ("8 desk-scale direction sweep (informational)", criterion_8),
        ("9 checkpoint, cache and config round-trips", criterion_9),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut lines = Vec::new();
    for (name, run) in criteria {
        if only.as_deref().is_some_and(|o| !name.starts_with(o)) {
            continue;
        }
        let started = Instant::now();
        let o = run();
        let took = started.elapsed();
        let tag = match (o.passed, o.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (informational)",
        };
        let line = format!("{tag} criterion {name}: {} [{}]", o.detail, fmt(took));
        println!("{line}");
        lines.push(line);
        if !o.passed && o.gating {
            failed += 1;
        }
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("  {l}");
    }
    if failed > 0 {
        eprintln!("{failed} gating criteria failed");
        std::process::exit(1);
    }
}

fn fmt(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}
