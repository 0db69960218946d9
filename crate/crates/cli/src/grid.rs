//! Grid cells: expansion, training, evaluation and the on-disk layout.
//!
//! ```text
//! <output_dir>/cells/<learner>__<strategy>__seed<seed>/
//!     config.json      everything that determines training
//!     training.json    best validation point
//!     log.csv          validation curve
//!     best.ckpt        parameters at the best validation point
//!     results/<spec>.csv
//!     summary.json     written last; its presence marks a finished cell
//! ```
//!
//! Training output is staged in a sibling temp directory and renamed into
//! place; result files and the summary are each written to a temp file and
//! renamed, so an interrupted run never leaves a cell that looks finished.

use std::fs;
use std::path::{Path, PathBuf};

use cifsl_core::learners::{AdaptationConfig, Learner, LearnerKind};
use cifsl_core::metrics::{
    read_task_records, summarize, write_task_records, MetricsRecord, SpecResult,
};
use cifsl_core::nn::{Checkpoint, EncoderConfig};
use cifsl_core::protocol::{evaluate, train, EpisodeConfig, TrainSchedule};
use cifsl_core::rebalance::Strategy;
use cifsl_core::seed;
use cifsl_core::MetaDataset;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, LearnerEntry, NamedSpec};
use crate::error::{CliError, CliResult};

pub const SUMMARY: &str = "summary.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub learner: LearnerEntry,
    pub strategy: String,
    pub root_seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!(
            "{}__{}__seed{}",
            self.learner.kind, self.strategy, self.root_seed
        )
    }

    /// Seed of training and initialization; depends only on this cell's
    /// coordinates.
    pub fn seed(&self) -> u64 {
        seed::cell_seed(self.root_seed, self.learner.kind.as_str(), &self.strategy)
    }
}

/// Learner-major, then strategy, then seed.
pub fn expand(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for l in &cfg.learners {
        for s in &cfg.strategies {
            for &root_seed in &cfg.seeds {
                cells.push(Cell {
                    learner: l.clone(),
                    strategy: s.clone(),
                    root_seed,
                });
            }
        }
    }
    cells
}

pub fn cells_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("cells")
}

pub fn cell_dir(cfg: &ExperimentConfig, cell: &Cell) -> PathBuf {
    cells_dir(cfg).join(cell.id())
}

/// Evaluation tasks depend only on the root seed, so every learner and
/// strategy is scored on the same tasks.
pub fn eval_seed(root_seed: u64) -> u64 {
    seed::mix_str(root_seed, "evaluation")
}

/// Everything that determines a cell's trained parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub learner: LearnerKind,
    pub strategy: String,
    pub root_seed: u64,
    pub cell_seed: u64,
    pub adaptation: AdaptationConfig,
    pub encoder: EncoderConfig,
    pub schedule: TrainSchedule,
    pub episodes: EpisodeConfig,
    pub dataset: crate::config::DatasetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub best_episode: usize,
    pub best_val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecSummary {
    pub name: String,
    pub record: MetricsRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub learner: LearnerKind,
    pub strategy: String,
    pub root_seed: u64,
    /// Hash of the evaluation settings the results were produced with.
    pub eval_fingerprint: String,
    pub best_episode: usize,
    pub best_val_accuracy: f64,
    pub specs: Vec<SpecSummary>,
}

/// Shared, read-only state of one grid invocation.
pub struct GridContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub dataset: &'a MetaDataset,
}

impl GridContext<'_> {
    pub fn cell_config(&self, cell: &Cell) -> CellConfig {
        let adaptation = cell.learner.adaptation();
        let episodes = EpisodeConfig::new(
            adaptation.train_way,
            self.cfg.schedule.query_per_class,
            self.cfg.evaluation.sigma_aug,
        );
        CellConfig {
            learner: cell.learner.kind,
            strategy: cell.strategy.clone(),
            root_seed: cell.root_seed,
            cell_seed: cell.seed(),
            adaptation,
            encoder: self.cfg.encoder_config(self.dataset.feature_dim()),
            schedule: self.cfg.schedule.clone(),
            episodes,
            dataset: self.cfg.dataset.clone(),
        }
    }
}

pub fn eval_fingerprint(cfg: &ExperimentConfig) -> String {
    let text = serde_json::to_string(&(
        &cfg.eval_specs,
        &cfg.evaluation.tasks_per_spec,
        &cfg.evaluation.sigma_aug,
    ))
    .expect("eval settings serialize");
    format!("{:016x}", seed::fnv1a(&text))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    /// Finished summary already present.
    Skipped,
    /// Trained parameters reused, results recomputed.
    Evaluated,
    Trained,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Skipped => "skipped",
            Outcome::Evaluated => "evaluated",
            Outcome::Trained => "trained",
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(CliError::json(path))
}

/// Writes through a temp file in the same directory, then renames.
fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(CliError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(CliError::io(path))
}

/// True when the cell directory holds training output for exactly this
/// configuration.
fn trained_matches(dir: &Path, expected: &str) -> bool {
    dir.join("best.ckpt").is_file()
        && dir.join("training.json").is_file()
        && fs::read_to_string(dir.join("config.json")).is_ok_and(|s| s == expected)
}

fn summary_fresh(dir: &Path, fingerprint: &str) -> bool {
    read_json::<CellSummary>(&dir.join(SUMMARY)).is_ok_and(|s| s.eval_fingerprint == fingerprint)
}

/// Trains, evaluates or skips one cell.
pub fn run_cell(ctx: &GridContext, cell: &Cell, force: bool) -> CliResult<Outcome> {
    let dir = cell_dir(ctx.cfg, cell);
    let cell_cfg = ctx.cell_config(cell);
    let cfg_text = to_json(&cell_cfg);
    let fingerprint = eval_fingerprint(ctx.cfg);
    if !force && trained_matches(&dir, &cfg_text) {
        if summary_fresh(&dir, &fingerprint) {
            return Ok(Outcome::Skipped);
        }
        match evaluate_cell(ctx, cell) {
            Ok(_) => return Ok(Outcome::Evaluated),
            Err(e) => eprintln!(
                "{}: cannot reuse training output ({e}); retraining",
                cell.id()
            ),
        }
    }
    train_cell(ctx, cell, &cell_cfg, &cfg_text)?;
    evaluate_cell(ctx, cell)?;
    Ok(Outcome::Trained)
}

fn train_cell(
    ctx: &GridContext,
    cell: &Cell,
    cell_cfg: &CellConfig,
    cfg_text: &str,
) -> CliResult<()> {
    let strategy = Strategy::preset(&cell.strategy)?;
    let ds = ctx.dataset;
    let learner = Learner::new(
        cell.learner.kind,
        cell_cfg.adaptation.clone(),
        &cell_cfg.encoder,
        ds.train.num_classes() + ds.val.num_classes(),
        seed::mix_str(cell_cfg.cell_seed, "init"),
    )?;
    learner.check_loss(&strategy.infer_loss)?;
    let run = train(
        learner,
        ds,
        &strategy,
        &cell_cfg.schedule,
        &cell_cfg.episodes,
        cell_cfg.cell_seed,
    )?;

    let dir = cell_dir(ctx.cfg, cell);
    let staging = cells_dir(ctx.cfg).join(format!(".staging-{}", cell.id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(CliError::io(&staging))?;
    }
    fs::create_dir_all(&staging).map_err(CliError::io(&staging))?;
    let put = |name: &str, contents: &[u8]| {
        let p = staging.join(name);
        fs::write(&p, contents).map_err(CliError::io(p))
    };
    put("config.json", cfg_text.as_bytes())?;
    let record = TrainingRecord {
        best_episode: run.best_episode,
        best_val_accuracy: run.best_accuracy,
    };
    put("training.json", to_json(&record).as_bytes())?;
    let mut log = String::from("episode,split,accuracy\n");
    for p in &run.log {
        log.push_str(&format!("{},{},{}\n", p.episode, p.split, p.accuracy));
    }
    put("log.csv", log.as_bytes())?;
    put("best.ckpt", run.best.checkpoint()?.to_text().as_bytes())?;

    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(CliError::io(&dir))?;
    }
    fs::rename(&staging, &dir).map_err(CliError::io(&dir))
}

/// Scores the cell's best checkpoint on every eval spec and writes the
/// task CSVs and the summary.
pub fn evaluate_cell(ctx: &GridContext, cell: &Cell) -> CliResult<CellSummary> {
    let dir = cell_dir(ctx.cfg, cell);
    let ckpt = Checkpoint::load(&dir.join("best.ckpt"))?;
    let learner = Learner::from_checkpoint(&ckpt)?;
    let training: TrainingRecord = read_json(&dir.join("training.json"))?;
    let strategy = Strategy::preset(&cell.strategy)?;
    let specs: Vec<_> = ctx.cfg.eval_specs.iter().map(NamedSpec::spec).collect();
    let results = evaluate(
        &learner,
        &strategy,
        &ctx.dataset.test,
        &specs,
        ctx.cfg.evaluation.tasks_per_spec,
        eval_seed(cell.root_seed),
        ctx.cfg.evaluation.sigma_aug,
    )?;

    let results_dir = dir.join("results");
    fs::create_dir_all(&results_dir).map_err(CliError::io(&results_dir))?;
    let mut summaries = Vec::with_capacity(results.len());
    for (named, res) in ctx.cfg.eval_specs.iter().zip(&results) {
        let mut buf = Vec::new();
        write_task_records(&mut buf, &res.tasks)?;
        write_atomic(&results_dir.join(format!("{}.csv", named.name)), &buf)?;
        summaries.push(SpecSummary {
            name: named.name.clone(),
            record: summarize(&res.spec, &res.tasks)?,
        });
    }
    let summary = CellSummary {
        learner: cell.learner.kind,
        strategy: cell.strategy.clone(),
        root_seed: cell.root_seed,
        eval_fingerprint: eval_fingerprint(ctx.cfg),
        best_episode: training.best_episode,
        best_val_accuracy: training.best_val_accuracy,
        specs: summaries,
    };
    write_atomic(&dir.join(SUMMARY), to_json(&summary).as_bytes())?;
    Ok(summary)
}

/// Re-evaluates a trained cell. Fails if the cell has no training output
/// for the current configuration.
pub fn reevaluate_cell(ctx: &GridContext, cell: &Cell, force: bool) -> CliResult<Outcome> {
    let dir = cell_dir(ctx.cfg, cell);
    if !trained_matches(&dir, &to_json(&ctx.cell_config(cell))) {
        return Err(CliError::Runtime(format!(
            "{}: no training output for the current config; use `run`",
            cell.id()
        )));
    }
    if !force && summary_fresh(&dir, &eval_fingerprint(ctx.cfg)) {
        return Ok(Outcome::Skipped);
    }
    evaluate_cell(ctx, cell)?;
    Ok(Outcome::Evaluated)
}

/// Task records of a finished cell, one entry per eval spec, read back from
/// its CSVs.
pub fn load_results(cfg: &ExperimentConfig, cell: &Cell) -> CliResult<Vec<SpecResult>> {
    let dir = cell_dir(cfg, cell);
    let summary: CellSummary = read_json(&dir.join(SUMMARY))?;
    if summary.eval_fingerprint != eval_fingerprint(cfg) {
        return Err(CliError::Runtime(format!(
            "{}: results are stale; run `evaluate`",
            cell.id()
        )));
    }
    cfg.eval_specs
        .iter()
        .map(|named| {
            let path = dir.join("results").join(format!("{}.csv", named.name));
            let file = fs::File::open(&path).map_err(CliError::io(&path))?;
            let tasks = read_task_records(std::io::BufReader::new(file), &path)?;
            if tasks.len() != cfg.evaluation.tasks_per_spec {
                return Err(CliError::Runtime(format!(
                    "{}: {} task records, expected {}",
                    path.display(),
                    tasks.len(),
                    cfg.evaluation.tasks_per_spec
                )));
            }
            Ok(SpecResult {
                spec: named.spec(),
                tasks,
            })
        })
        .collect()
}

/// Runs `op` over every cell in parallel (on the current rayon pool),
/// printing one line per cell. Failures are reported and counted but never
/// stop the other cells.
pub fn for_each_cell<F>(cells: &[Cell], verb: &str, op: F) -> CliResult<Vec<Outcome>>
where
    F: Fn(&Cell) -> CliResult<Outcome> + Sync,
{
    let total = cells.len();
    let results: Vec<CliResult<Outcome>> = cells
        .par_iter()
        .map(|cell| {
            let r = op(cell);
            match &r {
                Ok(o) => eprintln!("{verb} {}: {}", cell.id(), o.as_str()),
                Err(e) => eprintln!("{verb} {}: FAILED: {e}", cell.id()),
            }
            r
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed > 0 {
        return Err(CliError::Cells { failed, total });
    }
    Ok(results.into_iter().map(|r| r.expect("checked")).collect())
}
