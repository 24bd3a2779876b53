use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::model::{ModelConfig, ModelParams, PositionalMode};
use crate::recurrence::RecurrenceStrategy;
use crate::rng;
use crate::tensor::Float;
use crate::train::{train, TrainConfig};

use super::{forward_flops, perplexity, AnalysisError, Result};

/// Grid of runs: every strategy × positional mode × seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub strategies: Vec<RecurrenceStrategy>,
    /// Empty means the model config's own mode.
    pub pos_modes: Vec<PositionalMode>,
    pub seeds: Vec<u64>,
    /// Runs in flight at once.
    pub jobs: usize,
}

/// `n` run seeds drawn from the sweep stream of `base`.
pub fn derive_seeds(base: u64, n: usize) -> Vec<u64> {
    let mut r = rng::stream(base, rng::SWEEP);
    (0..n).map(|_| r.gen::<u32>() as u64).collect()
}

/// One CSV row. `perplexity` is empty for failed runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: String,
    pub reuse_map: String,
    pub pos_mode: String,
    pub seed: u64,
    pub perplexity: Option<f64>,
    pub train_flops: f64,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub reuse_map: String,
    pub pos_mode: String,
    pub runs: usize,
    pub failed: usize,
    pub per_seed: Vec<Option<f64>>,
    pub mean_perplexity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Trains and evaluates every run of `spec`. Runs start from the same
/// initialization for a given seed and mode; a failing run is recorded and
/// the others carry on.
pub fn sweep<F: Float>(corpus: &Corpus, spec: &SweepSpec) -> Result<SweepTable> {
    if spec.strategies.is_empty() {
        return Err(AnalysisError::NoStrategies);
    }
    if spec.seeds.is_empty() {
        return Err(AnalysisError::NoSeeds);
    }
    let modes = if spec.pos_modes.is_empty() {
        vec![spec.model.pos_mode]
    } else {
        spec.pos_modes.clone()
    };
    let mut runs = Vec::new();
    for s in &spec.strategies {
        for m in &modes {
            for &seed in &spec.seeds {
                runs.push((s.clone(), *m, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs.max(1))
        .build()
        .map_err(|e| AnalysisError::Pool(e.to_string()))?;
    let rows = pool.install(|| {
        runs.par_iter()
            .map(|(s, m, seed)| run_one::<F>(corpus, spec, s, *m, *seed))
            .collect()
    });
    Ok(SweepTable { rows })
}

fn run_one<F: Float>(corpus: &Corpus, spec: &SweepSpec, strategy: &RecurrenceStrategy, mode: PositionalMode, seed: u64) -> SweepRow {
    let mut model = spec.model.clone();
    model.pos_mode = mode.with_max_len(model.max_seq_len);
    let cfg = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let tokens = (cfg.total_steps * cfg.batch_size * cfg.seq_len) as f64;
    let mut row = SweepRow {
        strategy: strategy.kind(),
        reuse_map: strategy.map_label(),
        pos_mode: mode.label().to_string(),
        seed,
        perplexity: None,
        train_flops: forward_flops(&model, strategy, cfg.seq_len, tokens).training_total,
        status: "ok".into(),
    };
    let result = (|| -> std::result::Result<f64, String> {
        let mut params = ModelParams::<F>::init(&model, seed).map_err(|e| e.to_string())?;
        train(&mut params, corpus.train(), strategy, &cfg, &mut ()).map_err(|e| e.to_string())?;
        let r = perplexity(&params, strategy, corpus.test(), cfg.seq_len).map_err(|e| e.to_string())?;
        if r.perplexity.is_finite() {
            Ok(r.perplexity)
        } else {
            Err("non-finite perplexity".into())
        }
    })();
    match result {
        Ok(p) => row.perplexity = Some(p),
        Err(e) => row.status = format!("failed: {e}"),
    }
    row
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| AnalysisError::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Per (strategy, map, mode) group: per-seed values and the mean over
    /// successful runs, in first-appearance order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut order: Vec<(String, String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, String, String), Vec<&SweepRow>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.strategy.clone(), r.reuse_map.clone(), r.pos_mode.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|key| {
                let rows = &groups[&key];
                let ok: Vec<f64> = rows.iter().filter_map(|r| r.perplexity).collect();
                SummaryRow {
                    runs: rows.len(),
                    failed: rows.len() - ok.len(),
                    per_seed: rows.iter().map(|r| r.perplexity).collect(),
                    mean_perplexity: (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
                    strategy: key.0,
                    reuse_map: key.1,
                    pos_mode: key.2,
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rows": self.rows,
            "summary": self.summary(),
        })
    }

    /// Mean perplexity with strategies down the side and positional modes across.
    pub fn render(&self) -> String {
        let summary = self.summary();
        let mut modes: Vec<&str> = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        for s in &summary {
            if !modes.contains(&s.pos_mode.as_str()) {
                modes.push(&s.pos_mode);
            }
            let label = row_label(s);
            if !labels.contains(&label) {
                labels.push(label);
            }
        }
        let width = labels.iter().map(|l| l.len()).max().unwrap_or(8).max(8);
        let mut out = format!("{:width$}", "strategy");
        for m in &modes {
            let _ = write!(out, " {m:>12}");
        }
        out.push('\n');
        for label in &labels {
            let _ = write!(out, "{label:width$}");
            for m in &modes {
                let cell = summary
                    .iter()
                    .find(|s| &row_label(s) == label && s.pos_mode == *m)
                    .map(|s| match s.mean_perplexity {
                        Some(p) if s.failed == 0 => format!("{p:.3}"),
                        Some(p) => format!("{p:.3}*"),
                        None => "failed".into(),
                    })
                    .unwrap_or_else(|| "-".into());
                let _ = write!(out, " {cell:>12}");
            }
            out.push('\n');
        }
        out
    }
}

fn row_label(s: &SummaryRow) -> String {
    if s.reuse_map == "-" {
        s.strategy.clone()
    } else {
        format!("{} {}", s.strategy, s.reuse_map)
    }
}
