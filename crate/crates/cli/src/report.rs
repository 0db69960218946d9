//! Aggregation of finished cells into tables.
//!
//! Everything is recomputed from the per-task CSVs: records of all seeds of
//! a learner × strategy pair are pooled per spec, and deltas against the
//! balanced reference spec use the pooled unrounded means.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cifsl_core::learners::LearnerKind;
use cifsl_core::metrics::{
    aggregate_runs, balanced_vs_imbalanced_delta, MetricsRecord, SpecResult,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::grid::{expand, load_results};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub learner: LearnerKind,
    pub strategy: String,
    /// Eval spec name from the config.
    pub spec: String,
    pub seeds: usize,
    pub record: MetricsRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_abs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_rel: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub balanced_spec: Option<String>,
    pub rows: Vec<ReportRow>,
    /// Cells without usable results, with the reason.
    pub missing: Vec<(String, String)>,
}

impl Report {
    pub fn row(&self, learner: LearnerKind, strategy: &str, spec: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.learner == learner && r.strategy == strategy && r.spec == spec)
    }
}

pub fn build(cfg: &ExperimentConfig) -> CliResult<Report> {
    let cells = expand(cfg);
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    let balanced = cfg.balanced_spec().map(str::to_string);
    let balanced_label = balanced
        .as_deref()
        .and_then(|b| cfg.eval_specs.iter().find(|s| s.name == b))
        .map(|s| s.spec().name());
    for l in &cfg.learners {
        for strategy in &cfg.strategies {
            // per_spec[i] collects the runs of eval spec i across seeds
            let mut per_spec: Vec<Vec<SpecResult>> = vec![Vec::new(); cfg.eval_specs.len()];
            for cell in cells
                .iter()
                .filter(|c| c.learner.kind == l.kind && &c.strategy == strategy)
            {
                match load_results(cfg, cell) {
                    Ok(results) => {
                        for (slot, r) in per_spec.iter_mut().zip(results) {
                            slot.push(r);
                        }
                    }
                    Err(e) => missing.push((cell.id(), e.to_string())),
                }
            }
            if per_spec[0].is_empty() {
                continue;
            }
            let records = per_spec
                .iter()
                .map(|runs| aggregate_runs(runs))
                .collect::<Result<Vec<_>, _>>()?;
            let deltas = match &balanced_label {
                Some(label) => Some(balanced_vs_imbalanced_delta(&records, label)?),
                None => None,
            };
            for (i, (named, record)) in cfg.eval_specs.iter().zip(records).enumerate() {
                rows.push(ReportRow {
                    learner: l.kind,
                    strategy: strategy.clone(),
                    spec: named.name.clone(),
                    seeds: per_spec[i].len(),
                    record,
                    delta_abs: deltas.as_ref().map(|d| d[i].abs),
                    delta_rel: deltas.as_ref().map(|d| d[i].rel),
                });
            }
        }
    }
    Ok(Report {
        balanced_spec: balanced,
        rows,
        missing,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn pm(s: &cifsl_core::metrics::Stat) -> String {
    format!("{} ± {}", pct(s.mean), pct(s.ci95))
}

/// Markdown tables: accuracy, macro F1 and deltas with learner rows and
/// spec columns (one table per strategy), then per-slot tables.
pub fn markdown(cfg: &ExperimentConfig, report: &Report) -> String {
    let mut md = String::from("# Results\n\n");
    let _ = writeln!(
        md,
        "{} rows from {} cells; {} cells missing. Values in percent, ± is the 95% interval over pooled tasks.\n",
        report.rows.len(),
        expand(cfg).len() - report.missing.len(),
        report.missing.len()
    );
    md.push_str("| spec | support | ρ |\n|---|---|---|\n");
    for s in &cfg.eval_specs {
        let rho = s
            .spec()
            .support
            .nominal_ratio(s.way)
            .map(|r| format!("{r:.2}"))
            .unwrap_or_default();
        let _ = writeln!(md, "| {} | {} | {} |", s.name, s.spec().name(), rho);
    }
    md.push('\n');

    let header = |md: &mut String| {
        md.push_str("| learner |");
        for s in &cfg.eval_specs {
            let _ = write!(md, " {} |", s.name);
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(cfg.eval_specs.len()));
        md.push('\n');
    };
    type Cellfmt = fn(&ReportRow) -> String;
    let mut tables: Vec<(&str, Cellfmt)> = vec![
        ("Accuracy", |r| pm(&r.record.accuracy)),
        ("Macro F1", |r| pm(&r.record.macro_f1)),
    ];
    if report.balanced_spec.is_some() {
        tables.push((
            "Accuracy delta vs balanced (points / relative %)",
            |r| match (r.delta_abs, r.delta_rel) {
                (Some(a), Some(rel)) => format!("{:+.2} / {:+.2}%", 100.0 * a, 100.0 * rel),
                _ => String::new(),
            },
        ));
    }
    for (title, cell) in tables {
        for strategy in &cfg.strategies {
            let _ = writeln!(md, "## {title}, strategy `{strategy}`\n");
            header(&mut md);
            for l in &cfg.learners {
                let _ = write!(md, "| {} |", l.kind);
                for s in &cfg.eval_specs {
                    let text = report
                        .row(l.kind, strategy, &s.name)
                        .map(cell)
                        .unwrap_or_else(|| "–".into());
                    let _ = write!(md, " {text} |");
                }
                md.push('\n');
            }
            md.push('\n');
        }
    }

    for s in &cfg.eval_specs {
        if !s.spec().support.is_deterministic() {
            continue;
        }
        for strategy in &cfg.strategies {
            let rows: Vec<_> = cfg
                .learners
                .iter()
                .filter_map(|l| report.row(l.kind, strategy, &s.name))
                .collect();
            let Some(first) = rows.first() else { continue };
            let _ = writeln!(
                md,
                "## Per-slot precision / recall, spec `{}`, strategy `{strategy}`\n",
                s.name
            );
            md.push_str("| learner |");
            for slot in &first.record.per_slot {
                let _ = write!(md, " K={} P | K={} R |", slot.k, slot.k);
            }
            md.push_str("\n|---|");
            md.push_str(&"---|---|".repeat(first.record.per_slot.len()));
            md.push('\n');
            for r in rows {
                let _ = write!(md, "| {} |", r.learner);
                for slot in &r.record.per_slot {
                    let _ = write!(
                        md,
                        " {} | {} |",
                        pct(slot.precision.mean),
                        pct(slot.recall.mean)
                    );
                }
                md.push('\n');
            }
            md.push('\n');
        }
    }

    if !report.missing.is_empty() {
        md.push_str("## Missing cells\n\n");
        for (id, why) in &report.missing {
            let _ = writeln!(md, "- `{id}`: {why}");
        }
    }
    md
}

fn results_csv(cfg: &ExperimentConfig, report: &Report) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    w.write_record([
        "learner",
        "strategy",
        "spec",
        "label",
        "rho",
        "seeds",
        "n_tasks",
        "accuracy",
        "accuracy_ci95",
        "macro_f1",
        "macro_f1_ci95",
        "delta_abs",
        "delta_rel",
    ])
    .map_err(csv_err)?;
    for r in &report.rows {
        let label = cfg
            .eval_specs
            .iter()
            .find(|s| s.name == r.spec)
            .map(|s| s.spec().name())
            .unwrap_or_default();
        w.write_record([
            r.learner.to_string(),
            r.strategy.clone(),
            r.spec.clone(),
            label,
            r.record.rho.to_string(),
            r.seeds.to_string(),
            r.record.n_tasks.to_string(),
            r.record.accuracy.mean.to_string(),
            r.record.accuracy.ci95.to_string(),
            r.record.macro_f1.mean.to_string(),
            r.record.macro_f1.ci95.to_string(),
            opt(r.delta_abs),
            opt(r.delta_rel),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

fn per_slot_csv(report: &Report) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "learner",
        "strategy",
        "spec",
        "slot",
        "k",
        "precision",
        "precision_ci95",
        "recall",
        "recall_ci95",
    ])
    .map_err(csv_err)?;
    for r in &report.rows {
        for (i, s) in r.record.per_slot.iter().enumerate() {
            w.write_record([
                r.learner.to_string(),
                r.strategy.clone(),
                r.spec.clone(),
                i.to_string(),
                s.k.to_string(),
                s.precision.mean.to_string(),
                s.precision.ci95.to_string(),
                s.recall.mean.to_string(),
                s.recall.ci95.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(format!("csv: {e}"))
}

/// Writes `report/{report.md, results.csv, per_slot.csv, report.json}`
/// under the output directory and returns the report directory.
pub fn write(cfg: &ExperimentConfig, report: &Report) -> CliResult<PathBuf> {
    let dir = cfg.output_dir.join("report");
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let put = |name: &str, bytes: &[u8]| -> CliResult<()> {
        let p: PathBuf = Path::new(&dir).join(name);
        fs::write(&p, bytes).map_err(CliError::io(p))
    };
    put("report.md", markdown(cfg, report).as_bytes())?;
    put("results.csv", &results_csv(cfg, report)?)?;
    put("per_slot.csv", &per_slot_csv(report)?)?;
    let mut json =
        serde_json::to_string_pretty(report).map_err(CliError::json(dir.join("report.json")))?;
    json.push('\n');
    put("report.json", json.as_bytes())?;
    Ok(dir)
}
