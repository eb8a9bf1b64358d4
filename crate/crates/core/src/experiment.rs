//! Evaluation sweeps over demonstration count, demonstration order and
//! retrieval mode, with one CSV row per cell.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataError;
use crate::model::Model;
use crate::pipeline::{evaluate_items, DemoOrder, EvalOutput, InferenceConfig, PipelineError, Prepared, RetrievalMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Count,
    Order,
    Robustness,
}

/// Retrieval counts of the count sweep.
pub const COUNT_KS: [usize; 5] = [0, 1, 5, 10, 15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub mode: String,
    pub k: usize,
    pub order: DemoOrder,
    /// Seed of the run, or `mean` for an averaged row.
    pub seed: String,
    pub arg_i_f1: f64,
    pub arg_c_f1: f64,
    pub strict_f1: f64,
    pub relaxed_f1: f64,
    #[serde(skip)]
    pub wall_ms: u128,
}

impl ExperimentRow {
    pub fn from_output(mode: &str, cfg: &InferenceConfig, seed: u64, out: &EvalOutput) -> Self {
        Self {
            mode: mode.to_string(),
            k: cfg.k,
            order: cfg.order,
            seed: seed.to_string(),
            arg_i_f1: out.report.arg_i.f1(),
            arg_c_f1: out.report.arg_c.f1(),
            strict_f1: out.report.strict.f1(),
            relaxed_f1: out.report.relaxed.f1(),
            wall_ms: out.wall_ms,
        }
    }
}

fn mode_name(prefix: bool, mode: RetrievalMode) -> String {
    let m = match mode {
        RetrievalMode::Topk => "topk",
        RetrievalMode::Random => "random",
        RetrievalMode::None => "none",
    };
    format!("{}-{m}", if prefix { "prefix" } else { "cmr" })
}

/// Scores `model` on the test split under `cfg`.
pub fn run_cell(model: &Model, prep: &Prepared, cfg: &InferenceConfig, prefix: bool) -> Result<ExperimentRow, PipelineError> {
    let out = evaluate_items(model, prep, &prep.test, &prep.corpus.test, cfg, prefix)?;
    Ok(ExperimentRow::from_output(&mode_name(prefix, cfg.mode), cfg, cfg.seed, &out))
}

/// Top-k retrieval at each of `ks`, normal order.
pub fn count_sweep(model: &Model, prep: &Prepared, ks: &[usize], base: &InferenceConfig) -> Result<Vec<ExperimentRow>, PipelineError> {
    ks.iter()
        .map(|&k| {
            let cfg = InferenceConfig {
                k,
                mode: RetrievalMode::Topk,
                order: DemoOrder::Normal,
                ..base.clone()
            };
            run_cell(model, prep, &cfg, false)
        })
        .collect()
}

/// Normal, reversed and shuffled demonstrations at `base.k`.
pub fn order_sweep(model: &Model, prep: &Prepared, base: &InferenceConfig) -> Result<Vec<ExperimentRow>, PipelineError> {
    [DemoOrder::Normal, DemoOrder::Reverse, DemoOrder::Shuffle]
        .into_iter()
        .map(|order| {
            let cfg = InferenceConfig {
                order,
                mode: RetrievalMode::Topk,
                ..base.clone()
            };
            run_cell(model, prep, &cfg, false)
        })
        .collect()
}

/// Top-k against random retrieval for the memory model and, when given,
/// the prefix baseline.
pub fn robustness(
    model: &Model,
    prefix_model: Option<&Model>,
    prep: &Prepared,
    base: &InferenceConfig,
) -> Result<Vec<ExperimentRow>, PipelineError> {
    let mut rows = Vec::new();
    for (m, prefix) in [(Some(model), false), (prefix_model, true)] {
        let Some(m) = m else { continue };
        for mode in [RetrievalMode::Topk, RetrievalMode::Random] {
            let cfg = InferenceConfig {
                mode,
                order: DemoOrder::Normal,
                ..base.clone()
            };
            rows.push(run_cell(m, prep, &cfg, prefix)?);
        }
    }
    Ok(rows)
}

/// One averaged row per (mode, k, order), in order of first appearance.
pub fn mean_rows(rows: &[ExperimentRow]) -> Vec<ExperimentRow> {
    let mut out: Vec<(ExperimentRow, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.seed != "mean") {
        match out.iter_mut().find(|(m, _)| m.mode == r.mode && m.k == r.k && m.order == r.order) {
            Some((m, n)) => {
                m.arg_i_f1 += r.arg_i_f1;
                m.arg_c_f1 += r.arg_c_f1;
                m.strict_f1 += r.strict_f1;
                m.relaxed_f1 += r.relaxed_f1;
                m.wall_ms += r.wall_ms;
                *n += 1;
            }
            None => out.push((
                ExperimentRow {
                    seed: "mean".into(),
                    ..r.clone()
                },
                1,
            )),
        }
    }
    out.into_iter()
        .map(|(mut m, n)| {
            let c = n as f64;
            m.arg_i_f1 /= c;
            m.arg_c_f1 /= c;
            m.strict_f1 /= c;
            m.relaxed_f1 /= c;
            m.wall_ms /= n as u128;
            m
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
