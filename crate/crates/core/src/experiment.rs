//! Experiment grid: methods × scenarios × seeds over the synthetic
//! spurious dataset, with per-batch logs, pairwise Wilcoxon tests and
//! JSON/CSV reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{gen_spurious_dataset, make_stream, CorruptionKind, SpuriousDatasetConfig, StreamBatch, StreamScenario};
use crate::error::{Error, Result};
use crate::metrics::Tally;
use crate::model::{build_reference_net, load_checkpoint, pretrain, ModelState, PretrainConfig};
use crate::stats::{wilcoxon_signed_rank, WilcoxonResult};
use crate::theory::{corollary_from_counts, CorollaryReport};
use crate::tta::{Adapter, AdapterConfig, Membership, Method};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset settings; `seed` is replaced by each run seed.
    pub dataset: SpuriousDatasetConfig,
    pub scenarios: Vec<StreamScenario>,
    pub methods: Vec<Method>,
    pub adapter: AdapterConfig,
    /// Each seed drives dataset generation, pretraining, stream order and
    /// adapter randomness.
    pub seeds: Vec<u64>,
    /// Source model to adapt. When absent a model is pretrained per seed.
    pub checkpoint: Option<PathBuf>,
    /// Used when `checkpoint` is absent; its `seed` is replaced by the run seed.
    pub pretrain: PretrainConfig,
    /// Measure wall-clock time per run. Off by default so that reports are
    /// byte-identical across repeated runs.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: SpuriousDatasetConfig::default(),
            scenarios: vec![StreamScenario::default()],
            methods: Method::ALL.to_vec(),
            adapter: AdapterConfig::default(),
            seeds: vec![0, 1, 2],
            checkpoint: None,
            pretrain: PretrainConfig::default(),
            record_timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() || self.scenarios.is_empty() {
            return Err(Error::Config("methods, seeds and scenarios must be non-empty".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::Config("methods must not repeat".into()));
        }
        self.dataset.validate()?;
        self.adapter.dual.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Counts for one streamed batch; every reported metric is a function of
/// these logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub index: usize,
    pub size: usize,
    pub corruption: Option<CorruptionKind>,
    pub n_plus: usize,
    pub n_minus: usize,
    /// D+ samples whose pre-update prediction was correct.
    pub plus_correct: usize,
    /// D- samples whose pre-update prediction was correct.
    pub minus_correct: usize,
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub loss_dual: f64,
    pub updated: bool,
    pub tally: Tally,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: Method,
    pub seed: u64,
    pub scenario: String,
    pub avg_acc: f64,
    pub worst_group_acc: f64,
    pub macro_f1: f64,
    pub per_group_acc: Vec<f64>,
    pub pct_adapt: f64,
    pub pct_corr_adapt: f64,
    pub wall_clock_s: Option<f64>,
    pub batches: Vec<BatchLog>,
}

/// Scalar summary derived from batch logs.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub avg_acc: f64,
    pub worst_group_acc: f64,
    pub macro_f1: f64,
    pub per_group_acc: Vec<f64>,
    pub pct_adapt: f64,
    pub pct_corr_adapt: f64,
}

/// Recomputes the headline metrics from per-batch logs.
pub fn summarize(batches: &[BatchLog]) -> Result<Summary> {
    let first = batches
        .first()
        .ok_or_else(|| Error::InsufficientData("no batches to summarize".into()))?;
    let mut tally = first.tally.clone();
    for b in &batches[1..] {
        tally.merge(&b.tally)?;
    }
    let m = tally.metrics()?;
    let n = tally.total() as f64;
    let selected: usize = batches.iter().map(|b| b.n_plus + b.n_minus).sum();
    // Likely-correct samples that are right plus likely-incorrect ones
    // that are wrong.
    let well_sorted: usize = batches
        .iter()
        .map(|b| b.plus_correct + (b.n_minus - b.minus_correct))
        .sum();
    Ok(Summary {
        avg_acc: m.accuracy,
        worst_group_acc: m.worst_group,
        macro_f1: m.macro_f1,
        per_group_acc: m.per_group,
        pct_adapt: 100.0 * selected as f64 / n,
        pct_corr_adapt: 100.0 * well_sorted as f64 / n,
    })
}

impl ExperimentResult {
    /// Accuracy of the two selected sets over the whole stream.
    pub fn corollary(&self) -> CorollaryReport {
        let sum = |f: fn(&BatchLog) -> usize| self.batches.iter().map(f).sum::<usize>();
        corollary_from_counts(
            sum(|b| b.n_plus),
            sum(|b| b.plus_correct),
            sum(|b| b.n_minus),
            sum(|b| b.minus_correct),
        )
    }

    /// Accuracy per corruption condition (`None` for clean batches).
    pub fn condition_accuracy(&self) -> BTreeMap<Option<CorruptionKind>, f64> {
        let mut acc: BTreeMap<Option<CorruptionKind>, (usize, usize)> = BTreeMap::new();
        for b in &self.batches {
            let e = acc.entry(b.corruption).or_default();
            e.0 += b.tally.correct();
            e.1 += b.tally.total();
        }
        acc.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect()
    }
}

/// Streams `batches` through a fresh adapter and scores the pre-update
/// predictions.
pub fn run_stream(
    method: Method,
    adapter_cfg: &AdapterConfig,
    model: &ModelState,
    batches: &[StreamBatch],
    scenario: &str,
    seed: u64,
    record_timing: bool,
) -> Result<ExperimentResult> {
    let num_classes = model.arch.num_classes;
    let num_groups = 2 * num_classes;
    let start = Instant::now();
    let mut adapter = Adapter::new(method, adapter_cfg.clone(), model.clone(), seed)?;
    let mut logs = Vec::with_capacity(batches.len());
    for (index, batch) in batches.iter().enumerate() {
        let wrap = |e| Error::Batch { index, source: Box::new(e) };
        let out = adapter.adapt_step(&batch.images).map_err(wrap)?;
        let tally = Tally::from_predictions(&out.predictions, &batch.labels, &batch.groups, num_classes, num_groups)
            .map_err(wrap)?;
        let (mut plus_correct, mut minus_correct) = (0, 0);
        for ((m, p), y) in out.membership.iter().zip(&out.predictions).zip(&batch.labels) {
            match m {
                Membership::Plus if p == y => plus_correct += 1,
                Membership::Minus if p == y => minus_correct += 1,
                _ => {}
            }
        }
        logs.push(BatchLog {
            index,
            size: batch.labels.len(),
            corruption: batch.corruption,
            n_plus: out.n_plus,
            n_minus: out.n_minus,
            plus_correct,
            minus_correct,
            loss_plus: out.loss.plus,
            loss_minus: out.loss.minus,
            loss_dual: out.loss.dual,
            updated: out.updated,
            tally,
        });
    }
    let s = summarize(&logs)?;
    for (name, v) in [("avg_acc", s.avg_acc), ("macro_f1", s.macro_f1), ("pct_adapt", s.pct_adapt)] {
        if !v.is_finite() {
            return Err(Error::Contract(format!("{method} produced non-finite {name}")));
        }
    }
    Ok(ExperimentResult {
        method,
        seed,
        scenario: scenario.to_string(),
        avg_acc: s.avg_acc,
        worst_group_acc: s.worst_group_acc,
        macro_f1: s.macro_f1,
        per_group_acc: s.per_group_acc,
        pct_adapt: s.pct_adapt,
        pct_corr_adapt: s.pct_corr_adapt,
        wall_clock_s: record_timing.then(|| start.elapsed().as_secs_f64()),
        batches: logs,
    })
}

/// Source model used for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub seed: u64,
    pub from_checkpoint: bool,
    pub val_accuracy: f64,
}

/// Paired test of DualTTA against one baseline across conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonEntry {
    pub baseline: Method,
    pub conditions: usize,
    pub alternative: String,
    pub result: Option<WilcoxonResult>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub sources: Vec<SourceRecord>,
    pub results: Vec<ExperimentResult>,
    pub wilcoxon: Vec<WilcoxonEntry>,
}

impl ExperimentReport {
    pub fn find(&self, method: Method, seed: u64, scenario: &str) -> Option<&ExperimentResult> {
        self.results
            .iter()
            .find(|r| r.method == method && r.seed == seed && r.scenario == scenario)
    }
}

fn source_model(cfg: &ExperimentConfig, seed: u64, checkpoint: Option<&ModelState>) -> Result<(ModelState, SourceRecord, crate::data::DatasetSplits)> {
    let data = gen_spurious_dataset(&SpuriousDatasetConfig { seed, ..cfg.dataset.clone() })?;
    let (model, val_accuracy, from_checkpoint) = match checkpoint {
        Some(m) => {
            let acc = m.accuracy(&data.source_val, cfg.pretrain.batch_size.max(2))?;
            (m.clone(), acc, true)
        }
        None => {
            let init = build_reference_net(cfg.dataset.num_classes, cfg.dataset.channels, seed)?;
            let pcfg = PretrainConfig { seed, ..cfg.pretrain.clone() };
            let (m, rep) = pretrain(&init, &data.source_train, &data.source_val, &pcfg)?;
            (m, rep.val_accuracy, false)
        }
    };
    if model.arch.num_classes != cfg.dataset.num_classes || model.arch.in_channels != cfg.dataset.channels {
        return Err(Error::Checkpoint(format!(
            "model expects {} classes and {} channels, dataset has {} and {}",
            model.arch.num_classes, model.arch.in_channels, cfg.dataset.num_classes, cfg.dataset.channels
        )));
    }
    Ok((model, SourceRecord { seed, from_checkpoint, val_accuracy }, data))
}

/// Runs the full grid. Rows are ordered by method, then scenario, then seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let checkpoint = cfg.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let mut sources = Vec::new();
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let (model, record, data) = source_model(cfg, seed, checkpoint.as_ref())?;
        sources.push(record);
        for scenario in &cfg.scenarios {
            let stream = make_stream(&data.target_test, scenario, seed)?;
            for &method in &cfg.methods {
                results.push(run_stream(
                    method,
                    &cfg.adapter,
                    &model,
                    &stream,
                    scenario.kind.as_str(),
                    seed,
                    cfg.record_timing,
                )?);
            }
        }
    }
    let method_rank = |m: Method| cfg.methods.iter().position(|x| *x == m).unwrap_or(usize::MAX);
    let scenario_rank = |s: &str| cfg.scenarios.iter().position(|x| x.kind.as_str() == s).unwrap_or(usize::MAX);
    results.sort_by_key(|r| (method_rank(r.method), scenario_rank(&r.scenario), r.seed));
    let wilcoxon = compare_against_baselines(&results, &cfg.methods);
    Ok(ExperimentReport {
        config: cfg.clone(),
        sources,
        results,
        wilcoxon,
    })
}

/// Conditions are (scenario, corruption, seed) cells.
fn condition_scores(results: &[ExperimentResult], method: Method) -> BTreeMap<(String, Option<CorruptionKind>, u64), f64> {
    let mut out = BTreeMap::new();
    for r in results.iter().filter(|r| r.method == method) {
        for (corruption, acc) in r.condition_accuracy() {
            out.insert((r.scenario.clone(), corruption, r.seed), acc);
        }
    }
    out
}

pub fn compare_against_baselines(results: &[ExperimentResult], methods: &[Method]) -> Vec<WilcoxonEntry> {
    if !methods.contains(&Method::Dualtta) {
        return Vec::new();
    }
    let ours = condition_scores(results, Method::Dualtta);
    methods
        .iter()
        .filter(|m| **m != Method::Dualtta)
        .map(|&baseline| {
            let theirs = condition_scores(results, baseline);
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (key, v) in &ours {
                if let Some(w) = theirs.get(key) {
                    a.push(*v);
                    b.push(*w);
                }
            }
            let (result, note) = match wilcoxon_signed_rank(&a, &b) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            WilcoxonEntry {
                baseline,
                conditions: a.len(),
                alternative: "two-sided".to_string(),
                result,
                note,
            }
        })
        .collect()
}

pub const CSV_HEADER: [&str; 9] = [
    "method",
    "seed",
    "scenario",
    "avg_acc",
    "worst_group_acc",
    "macro_f1",
    "pct_adapt",
    "pct_corr_adapt",
    "wall_clock_s",
];

pub fn results_csv(results: &[ExperimentResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Malformed(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in results {
        w.write_record([
            r.method.as_str().to_string(),
            r.seed.to_string(),
            r.scenario.clone(),
            r.avg_acc.to_string(),
            r.worst_group_acc.to_string(),
            r.macro_f1.to_string(),
            r.pct_adapt.to_string(),
            r.pct_corr_adapt.to_string(),
            r.wall_clock_s.map(|t| t.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Malformed(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Malformed(format!("csv: {e}")))
}

/// Writes `results.json` and `results.csv` into `dir`, creating it.
pub fn emit_reports(report: &ExperimentReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("results.json");
    let csv_path = dir.join("results.csv");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Malformed(format!("json: {e}")))?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    fs::write(&csv_path, results_csv(&report.results)?).map_err(|e| Error::io(&csv_path, e))?;
    Ok((json_path, csv_path))
}
