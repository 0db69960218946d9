//! Per-task and aggregate statistics.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::Prediction;
use crate::tasks::ImbalanceSpec;

/// Normal quantile for a two-sided 95% interval.
pub const Z95: f64 = 1.96;

/// Rows are true slots, columns predicted slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    way: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(way: usize) -> Self {
        Self {
            way,
            counts: vec![0; way * way],
        }
    }

    pub fn way(&self) -> usize {
        self.way
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.way + predicted]
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.way || predicted >= self.way {
            return Err(Error::Validation(format!(
                "slot out of range for {}-way: ({truth}, {predicted})",
                self.way
            )));
        }
        self.counts[truth * self.way + predicted] += 1;
        Ok(())
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.way).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.way).map(|t| self.get(t, predicted)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.way).map(|c| self.get(c, c)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            0.0
        } else {
            self.trace() as f64 / n as f64
        }
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.way.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], way: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(way);
    for (&p, &t) in preds.iter().zip(labels) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-slot scores (0/0 counts as 0) and their macro-averaged F1.
pub fn precision_recall_f1(cm: &ConfusionMatrix) -> (Vec<ClassScores>, f64) {
    let scores: Vec<ClassScores> = (0..cm.way())
        .map(|c| {
            let tp = cm.get(c, c);
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            ClassScores {
                precision,
                recall,
                f1: f1(precision, recall),
            }
        })
        .collect();
    let macro_f1 = scores.iter().map(|s| s.f1).sum::<f64>() / scores.len().max(1) as f64;
    (scores, macro_f1)
}

/// Mean and 95% half-width `1.96 s / sqrt(n)` with Bessel's correction.
pub fn ci95(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Stats(format!(
            "confidence interval needs at least 2 values, got {n}"
        )));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok((values[0], 0.0));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, Z95 * var.sqrt() / (n as f64).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub ci95: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Self> {
        let (mean, ci95) = ci95(values)?;
        Ok(Self { mean, ci95 })
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.ci95
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci95
    }

    /// True when the two intervals do not intersect.
    pub fn separated_from(&self, other: &Stat) -> bool {
        self.lower() > other.upper() || other.lower() > self.upper()
    }
}

/// Outcome of one evaluation task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRecord {
    pub task_index: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Support shots per slot.
    pub shots: Vec<usize>,
    /// Correct query predictions per true slot.
    pub correct: Vec<u64>,
    /// Queries per true slot.
    pub total: Vec<u64>,
    /// Predictions made per slot.
    pub predicted: Vec<u64>,
}

impl TaskRecord {
    pub fn from_prediction(
        task_index: usize,
        seed: u64,
        shots: Vec<usize>,
        pred: &Prediction,
    ) -> Result<Self> {
        let way = shots.len();
        let cm = confusion(&pred.predicted, &pred.labels, way)?;
        let (_, macro_f1) = precision_recall_f1(&cm);
        Ok(Self {
            task_index,
            seed,
            accuracy: cm.accuracy(),
            macro_f1,
            correct: (0..way).map(|c| cm.get(c, c)).collect(),
            total: (0..way).map(|c| cm.row_sum(c)).collect(),
            predicted: (0..way).map(|c| cm.col_sum(c)).collect(),
            shots,
        })
    }

    pub fn precision(&self, slot: usize) -> f64 {
        ratio(self.correct[slot], self.predicted[slot])
    }

    pub fn recall(&self, slot: usize) -> f64 {
        ratio(self.correct[slot], self.total[slot])
    }
}

const HEADER: [&str; 8] = [
    "task_index",
    "seed",
    "accuracy",
    "macro_f1",
    "shots",
    "correct",
    "total",
    "predicted",
];

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_task_records<W: Write>(out: W, records: &[TaskRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in records {
        w.write_record([
            r.task_index.to_string(),
            r.seed.to_string(),
            r.accuracy.to_string(),
            r.macro_f1.to_string(),
            join(&r.shots),
            join(&r.correct),
            join(&r.total),
            join(&r.predicted),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_task_records<R: Read>(input: R, origin: &Path) -> Result<Vec<TaskRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let line = i + 2;
        let bad = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let row = row?;
        if row.len() != HEADER.len() {
            return Err(bad(format!(
                "expected {} fields, found {}",
                HEADER.len(),
                row.len()
            )));
        }
        fn scalar<T: std::str::FromStr>(s: &str, name: &str) -> std::result::Result<T, String> {
            s.parse().map_err(|_| format!("bad {name} {s:?}"))
        }
        fn list<T: std::str::FromStr>(s: &str, name: &str) -> std::result::Result<Vec<T>, String> {
            s.split_whitespace().map(|v| scalar(v, name)).collect()
        }
        let rec = (|| -> std::result::Result<TaskRecord, String> {
            Ok(TaskRecord {
                task_index: scalar(&row[0], "task_index")?,
                seed: scalar(&row[1], "seed")?,
                accuracy: scalar(&row[2], "accuracy")?,
                macro_f1: scalar(&row[3], "macro_f1")?,
                shots: list(&row[4], "shots")?,
                correct: list(&row[5], "correct")?,
                total: list(&row[6], "total")?,
                predicted: list(&row[7], "predicted")?,
            })
        })()
        .map_err(bad)?;
        let way = rec.shots.len();
        if rec.correct.len() != way || rec.total.len() != way || rec.predicted.len() != way {
            return Err(bad("per-slot fields disagree on way".into()));
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotStat {
    pub k: usize,
    pub precision: Stat,
    pub recall: Stat,
}

/// Summary of one spec's evaluation (`summary.json` entry).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub spec: String,
    pub rho: f64,
    pub n_tasks: usize,
    pub accuracy: Stat,
    pub macro_f1: Stat,
    /// Only for deterministic shot distributions; slot order is shot order.
    pub per_slot: Vec<SlotStat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_run_accuracy: Option<Vec<f64>>,
}

/// Task records of one spec.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecResult {
    pub spec: ImbalanceSpec,
    pub tasks: Vec<TaskRecord>,
}

pub fn summarize(spec: &ImbalanceSpec, tasks: &[TaskRecord]) -> Result<MetricsRecord> {
    let accs: Vec<f64> = tasks.iter().map(|t| t.accuracy).collect();
    let f1s: Vec<f64> = tasks.iter().map(|t| t.macro_f1).collect();
    let mut per_slot = Vec::new();
    if spec.support.is_deterministic() {
        if let Some(first) = tasks.first() {
            for (slot, &k) in first.shots.iter().enumerate() {
                let p: Vec<f64> = tasks.iter().map(|t| t.precision(slot)).collect();
                let r: Vec<f64> = tasks.iter().map(|t| t.recall(slot)).collect();
                per_slot.push(SlotStat {
                    k,
                    precision: Stat::of(&p)?,
                    recall: Stat::of(&r)?,
                });
            }
        }
    }
    Ok(MetricsRecord {
        spec: spec.name(),
        rho: spec.support.nominal_ratio(spec.way)?,
        n_tasks: tasks.len(),
        accuracy: Stat::of(&accs)?,
        macro_f1: Stat::of(&f1s)?,
        per_slot,
        per_run_accuracy: None,
    })
}

/// Pools task records of several runs of the same spec before computing
/// intervals; per-run mean accuracies are kept alongside.
pub fn aggregate_runs(runs: &[SpecResult]) -> Result<MetricsRecord> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Stats("no runs to aggregate".into()))?;
    if let Some(other) = runs.iter().find(|r| r.spec != first.spec) {
        return Err(Error::Stats(format!(
            "cannot pool {:?} with {:?}",
            first.spec.name(),
            other.spec.name()
        )));
    }
    let pooled: Vec<TaskRecord> = runs.iter().flat_map(|r| r.tasks.iter().cloned()).collect();
    let mut rec = summarize(&first.spec, &pooled)?;
    rec.per_run_accuracy = Some(
        runs.iter()
            .map(|r| r.tasks.iter().map(|t| t.accuracy).sum::<f64>() / r.tasks.len().max(1) as f64)
            .collect(),
    );
    Ok(rec)
}

/// `(acc - balanced, (acc - balanced) / balanced)`.
pub fn delta(accuracy: f64, balanced: f64) -> (f64, f64) {
    let abs = accuracy - balanced;
    (abs, abs / balanced)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub spec: String,
    pub abs: f64,
    pub rel: f64,
}

pub fn balanced_vs_imbalanced_delta(
    records: &[MetricsRecord],
    balanced_spec: &str,
) -> Result<Vec<Delta>> {
    let base = records
        .iter()
        .find(|r| r.spec == balanced_spec)
        .ok_or_else(|| Error::Stats(format!("no record for balanced spec {balanced_spec:?}")))?;
    Ok(records
        .iter()
        .map(|r| {
            let (abs, rel) = delta(r.accuracy.mean, base.accuracy.mean);
            Delta {
                spec: r.spec.clone(),
                abs,
                rel,
            }
        })
        .collect())
}
