use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ilr_core::analysis::{self, forward_flops, perplexity, reference_ratios, EvalReport};
use ilr_core::config::{Precision, RunConfig};
use ilr_core::data::{detokenize, tokenize_bytes, Corpus};
use ilr_core::model::checkpoint::{self, CheckpointMeta, StoredParams};
use ilr_core::recurrence::{logit_probe, logits_with_trace, RecurrenceStrategy, ReuseMap};
use ilr_core::train::{self, tail_mean, StepRecord, TrainError, TrainHooks};
use ilr_core::verify::{run_suite, Scale};
use ilr_core::{Float, ModelParams};
use serde_json::json;

use crate::failure::{Classify, Failure, Result, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC};

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).or_exit(EXIT_CONFIG)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn load_corpus(paths: &[PathBuf], test_fraction: f64, seq_len: usize, vocab_size: usize) -> Result<Corpus> {
    let c = Corpus::from_files(paths, test_fraction, seq_len).ctx_exit(EXIT_CONFIG, "reading corpus")?;
    if let Some(&max) = c.tokens.iter().max() {
        if max >= vocab_size {
            return Err(Failure::config(format!(
                "corpus contains token id {max} but the model vocabulary has {vocab_size} entries"
            )));
        }
    }
    Ok(c)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result {
    fs::write(path, contents).ctx_exit(EXIT_IO, format!("writing {}", path.display()))
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn train_error(e: TrainError) -> Failure {
    match e {
        TrainError::NonFinite { .. } => Failure::new(EXIT_NUMERIC, e),
        TrainError::Hook(_) => Failure::new(EXIT_IO, e),
        _ => Failure::new(EXIT_CONFIG, e),
    }
}

fn eval_error(e: analysis::AnalysisError) -> Failure {
    match e {
        analysis::AnalysisError::Tensor(_) => Failure::new(EXIT_NUMERIC, e),
        _ => Failure::new(EXIT_CONFIG, e),
    }
}

/// Writes the JSONL step log and periodic checkpoints.
struct Recorder {
    log: BufWriter<File>,
    dir: PathBuf,
    meta: CheckpointMeta,
    verbose: bool,
    started: Instant,
}

impl<F: Float> TrainHooks<F> for Recorder {
    fn on_step(&mut self, r: &StepRecord) -> train::Result<()> {
        serde_json::to_writer(&mut self.log, r).map_err(|e| TrainError::Hook(format!("step log: {e}")))?;
        writeln!(self.log).map_err(|e| TrainError::Hook(format!("step log: {e}")))?;
        if self.verbose && (r.step % 10 == 0 || r.step + 1 == self.meta.step) {
            eprintln!(
                "step {:>6}  loss {:.4}  lr {:.2e}  |g| {:.3}  {:.1}s",
                r.step,
                r.loss,
                r.lr,
                r.grad_norm,
                self.started.elapsed().as_secs_f64()
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, step: usize, params: &ModelParams<F>) -> train::Result<()> {
        let meta = CheckpointMeta { step, ..self.meta.clone() };
        let path = self.dir.join(format!("step-{step:06}.ckpt"));
        checkpoint::save(&path, &meta, params).map_err(|e| TrainError::Hook(e.to_string()))
    }
}

pub fn train(config: &Path, seed: Option<u64>, verbose: bool) -> Result {
    let cfg = load_config(config, seed)?;
    let corpus = load_corpus(&cfg.data.paths, cfg.data.test_fraction, cfg.train.seq_len, cfg.model.vocab_size)?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg, &corpus, verbose),
        Precision::F64 => train_as::<f64>(&cfg, &corpus, verbose),
    }
}

fn train_as<F: Float>(cfg: &RunConfig, corpus: &Corpus, verbose: bool) -> Result {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).ctx_exit(EXIT_IO, format!("creating {}", dir.display()))?;
    write_file(&dir.join("config.json"), cfg.to_json())?;
    let log_path = dir.join("log.jsonl");
    let log = File::create(&log_path).ctx_exit(EXIT_IO, format!("creating {}", log_path.display()))?;
    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        strategy: cfg.strategy.clone(),
        seq_len: cfg.train.seq_len,
        step: cfg.train.total_steps,
    };
    let mut params = ModelParams::<F>::init(&cfg.model, cfg.train.seed).or_exit(EXIT_CONFIG)?;
    let mut rec = Recorder {
        log: BufWriter::new(log),
        dir: dir.clone(),
        meta: meta.clone(),
        verbose,
        started: Instant::now(),
    };
    let outcome = train::train(&mut params, corpus.train(), &cfg.strategy, &cfg.train, &mut rec);
    rec.log.flush().ctx_exit(EXIT_IO, "flushing step log")?;
    let report = match outcome {
        Ok(r) => r,
        Err(e) => {
            if let TrainError::NonFinite { step, .. } = e {
                let path = dir.join("last-good.ckpt");
                checkpoint::save(&path, &CheckpointMeta { step, ..meta }, &params).or_exit(EXIT_IO)?;
                eprintln!("saved the last finite parameters to {}", path.display());
            }
            return Err(train_error(e));
        }
    };
    checkpoint::save(&dir.join("final.ckpt"), &meta, &params).or_exit(EXIT_IO)?;
    let test = perplexity(&params, &cfg.strategy, corpus.test(), cfg.train.seq_len).map_err(eval_error)?;
    if !test.perplexity.is_finite() {
        return Err(Failure::numeric(format!("test perplexity is {}", test.perplexity)));
    }
    let flops = forward_flops(&cfg.model, &cfg.strategy, cfg.train.seq_len, report.tokens_seen as f64);
    let summary = json!({
        "strategy": cfg.strategy,
        "pos_mode": cfg.model.pos_mode.label(),
        "precision": cfg.precision,
        "seed": cfg.train.seed,
        "param_count": params.param_count(),
        "steps": report.steps,
        "tokens_seen": report.tokens_seen,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "final_loss_tail_mean": tail_mean(&report.losses, 10),
        "test": test,
        "train_flops": flops.training_total,
    });
    write_file(&dir.join("summary.json"), pretty(&summary))?;
    println!("{}", pretty(&summary).trim_end());
    if verbose {
        eprintln!("finished in {:.1}s", rec.started.elapsed().as_secs_f64());
    }
    Ok(())
}

/// `baseline`, `ilr:2,1,1,1`, `block:3`, or the JSON form.
pub fn parse_strategy(s: &str) -> std::result::Result<RecurrenceStrategy, String> {
    let s = s.trim();
    if s.starts_with('{') {
        return serde_json::from_str(s).map_err(|e| e.to_string());
    }
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    match kind.to_ascii_lowercase().as_str() {
        "baseline" if arg.is_empty() => Ok(RecurrenceStrategy::Baseline),
        "ilr" => {
            let counts = arg
                .split(',')
                .map(|c| c.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format!("reuse map {arg:?}: {e}"))?;
            let map = ReuseMap::new(counts).map_err(|e| e.to_string())?;
            Ok(RecurrenceStrategy::IntraLayer { map })
        }
        "block" => {
            let steps = arg.trim().parse().map_err(|e| format!("block steps {arg:?}: {e}"))?;
            Ok(RecurrenceStrategy::Block { steps })
        }
        _ => Err(format!("unrecognized strategy {s:?}")),
    }
}

pub fn eval(ckpt: &Path, corpus: &[PathBuf], strategy: Option<&str>, test_fraction: f64) -> Result {
    let (meta, stored) = checkpoint::load(ckpt).ctx_exit(EXIT_CONFIG, format!("reading {}", ckpt.display()))?;
    let strategy = match strategy {
        Some(s) => parse_strategy(s).map_err(Failure::config)?,
        None => meta.strategy.clone(),
    };
    strategy
        .validate(&meta.model)
        .ctx_exit(EXIT_CONFIG, format!("strategy {strategy} does not fit the checkpoint"))?;
    let corpus = load_corpus(corpus, test_fraction, meta.seq_len, meta.model.vocab_size)?;
    let report = match &stored {
        StoredParams::F32(p) => eval_as(p, &strategy, &corpus, meta.seq_len),
        StoredParams::F64(p) => eval_as(p, &strategy, &corpus, meta.seq_len),
    }?;
    println!("{}", pretty(&report).trim_end());
    Ok(())
}

fn eval_as<F: Float>(p: &ModelParams<F>, s: &RecurrenceStrategy, corpus: &Corpus, seq_len: usize) -> Result<EvalReport> {
    let r = perplexity(p, s, corpus.test(), seq_len).map_err(eval_error)?;
    if !r.perplexity.is_finite() {
        return Err(Failure::numeric(format!("perplexity is {}", r.perplexity)));
    }
    Ok(r)
}

pub fn flops(config: Option<&Path>, preset: Option<&str>) -> Result {
    let cfg = match (config, preset) {
        (Some(p), _) => load_config(p, None)?,
        (None, Some(name)) => RunConfig::preset(name).or_exit(EXIT_CONFIG)?,
        (None, None) => return Err(Failure::config("give --config or --preset")),
    };
    let t = cfg.train.seq_len;
    let tokens = (cfg.train.total_steps * cfg.train.batch_size * t) as f64;
    let report = forward_flops(&cfg.model, &cfg.strategy, t, tokens);
    let ratios = reference_ratios(&cfg.model, t);
    println!("{}", pretty(&json!({ "report": report, "ratios": ratios })).trim_end());
    Ok(())
}

pub fn sweep(config: &Path, jobs: usize, seed: Option<u64>, verbose: bool) -> Result {
    if jobs == 0 {
        return Err(Failure::config("--jobs must be at least 1"));
    }
    let cfg = load_config(config, seed)?;
    let spec = cfg
        .sweep_spec(jobs)
        .ok_or_else(|| Failure::config(format!("{} has no sweep section", config.display())))?;
    let corpus = load_corpus(&cfg.data.paths, cfg.data.test_fraction, cfg.train.seq_len, cfg.model.vocab_size)?;
    let started = Instant::now();
    let table = match cfg.precision {
        Precision::F32 => analysis::sweep::<f32>(&corpus, &spec),
        Precision::F64 => analysis::sweep::<f64>(&corpus, &spec),
    }
    .or_exit(EXIT_CONFIG)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).ctx_exit(EXIT_IO, format!("creating {}", dir.display()))?;
    write_file(&dir.join("sweep.csv"), table.to_csv().or_exit(EXIT_IO)?)?;
    write_file(&dir.join("sweep.json"), pretty(&table.to_json()))?;
    println!("{}", table.render());
    if verbose {
        eprintln!("{} runs in {:.1}s", table.rows.len(), started.elapsed().as_secs_f64());
    }
    let failed = table.rows.iter().filter(|r| r.perplexity.is_none()).count();
    if failed == table.rows.len() {
        return Err(Failure::numeric("every sweep run failed"));
    }
    if failed > 0 {
        eprintln!("warning: {failed} of {} runs failed", table.rows.len());
    }
    Ok(())
}

pub fn verify(scale: Scale, json_out: Option<&Path>) -> Result {
    let started = Instant::now();
    let report = run_suite(scale).or_exit(EXIT_NUMERIC)?;
    for c in &report.checks {
        println!("{c}");
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    println!(
        "{} of {} checks passed ({scale}, {:.1}s)",
        report.checks.len() - failed,
        report.checks.len(),
        started.elapsed().as_secs_f64()
    );
    if let Some(p) = json_out {
        write_file(p, pretty(&report))?;
    }
    if failed > 0 {
        return Err(Failure::numeric(format!("{failed} checks failed")));
    }
    Ok(())
}

pub fn probe(ckpt: &Path, text: Option<&str>, file: Option<&Path>, top_k: usize) -> Result {
    let (meta, stored) = checkpoint::load(ckpt).ctx_exit(EXIT_CONFIG, format!("reading {}", ckpt.display()))?;
    let bytes = match (text, file) {
        (Some(t), _) => t.as_bytes().to_vec(),
        (None, Some(p)) => fs::read(p).ctx_exit(EXIT_CONFIG, format!("reading {}", p.display()))?,
        (None, None) => return Err(Failure::config("give --text or --file")),
    };
    let mut ids = tokenize_bytes(&bytes);
    if ids.is_empty() {
        return Err(Failure::config("probe text is empty"));
    }
    ids.truncate(meta.seq_len.min(meta.model.max_seq_len));
    let out = match &stored {
        StoredParams::F32(p) => probe_as(p, &meta.strategy, &ids, top_k),
        StoredParams::F64(p) => probe_as(p, &meta.strategy, &ids, top_k),
    }?;
    println!("{}", pretty(&out).trim_end());
    Ok(())
}

fn token_text(id: usize) -> String {
    String::from_utf8_lossy(&detokenize(&[id])).into_owned()
}

fn probe_as<F: Float>(p: &ModelParams<F>, s: &RecurrenceStrategy, ids: &[usize], top_k: usize) -> Result<serde_json::Value> {
    let (_, trace) = logits_with_trace(p, s, ids, ids.len()).or_exit(EXIT_CONFIG)?;
    let states = logit_probe(p, &trace, top_k).or_exit(EXIT_NUMERIC)?;
    let states: Vec<_> = states
        .iter()
        .map(|st| {
            let positions: Vec<_> = st
                .top
                .iter()
                .zip(ids)
                .map(|(top, &id)| {
                    json!({
                        "input": token_text(id),
                        "top": top.iter().map(|&(t, pr)| json!({"token": t, "text": token_text(t), "p": pr})).collect::<Vec<_>>(),
                    })
                })
                .collect();
            json!({
                "step": st.label.step,
                "layer": st.label.layer,
                "iteration": st.label.iteration,
                "positions": positions,
            })
        })
        .collect();
    Ok(json!({ "strategy": s, "tokens": ids.len(), "states": states }))
}

pub fn preset(name: &str, corpus: Vec<PathBuf>, output_dir: Option<PathBuf>) -> Result {
    let mut cfg = RunConfig::preset(name).or_exit(EXIT_CONFIG)?;
    if !corpus.is_empty() {
        cfg.data.paths = corpus;
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    println!("{}", cfg.to_json());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_shorthand() {
        assert_eq!(parse_strategy("baseline").unwrap(), RecurrenceStrategy::Baseline);
        assert_eq!(parse_strategy("ilr:2, 1,1").unwrap(), RecurrenceStrategy::ilr(&[2, 1, 1]).unwrap());
        assert_eq!(parse_strategy("Block:3").unwrap(), RecurrenceStrategy::Block { steps: 3 });
        assert_eq!(
            parse_strategy(r#"{"strategy":"ilr","map":[1,2]}"#).unwrap(),
            RecurrenceStrategy::ilr(&[1, 2]).unwrap()
        );
        for bad in ["ilr:", "ilr:0,1", "block:x", "loop", "baseline:2"] {
            assert!(parse_strategy(bad).is_err(), "{bad}");
        }
    }
}
