use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cifsl_core::data::load_features;
use cifsl_core::metrics::{read_task_records, Stat};
use cifsl_core::tasks::read_tasks;

const BIN: &str = env!("CARGO_BIN_EXE_cifsl");

fn cifsl(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn cifsl")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

/// The shipped minimal config, redirected into `dir`.
fn minimal_config(dir: &Path, seeds: &str) -> PathBuf {
    let text = fs::read_to_string(repo_file("configs/minimal.toml")).unwrap();
    let text = text
        .replace("output_dir = \"../runs/minimal\"", "output_dir = \"out\"")
        .replace("seeds = [0]", &format!("seeds = {seeds}"));
    let path = dir.join("minimal.toml");
    fs::write(&path, text).unwrap();
    path
}

fn cell(dir: &Path, id: &str) -> PathBuf {
    dir.join("out/cells").join(id)
}

#[test]
fn minimal_config_yields_one_cell_with_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal_config(tmp.path(), "[0]");
    let out = cifsl(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cells: Vec<_> = fs::read_dir(tmp.path().join("out/cells"))
        .unwrap()
        .collect();
    assert_eq!(cells.len(), 1);
    let dir = cell(tmp.path(), "protonet__standard__seed0");
    for f in [
        "summary.json",
        "config.json",
        "training.json",
        "log.csv",
        "best.ckpt",
    ] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    for spec in ["balanced-5shot", "linear-1-9", "step-1-9-1minor"] {
        let p = dir.join("results").join(format!("{spec}.csv"));
        let recs = read_task_records(fs::File::open(&p).unwrap(), &p).unwrap();
        assert_eq!(recs.len(), 50);
    }
}

#[test]
fn rerun_without_force_retrains_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal_config(tmp.path(), "[0, 1]");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&cifsl(&["run", "--config", cfg])), 0);
    let files = ["summary.json", "best.ckpt", "log.csv"];
    let stamp = |id: &str| {
        files
            .iter()
            .map(|f| {
                fs::metadata(cell(tmp.path(), id).join(f))
                    .unwrap()
                    .modified()
                    .unwrap()
            })
            .collect::<Vec<_>>()
    };
    let before = [
        stamp("protonet__standard__seed0"),
        stamp("protonet__standard__seed1"),
    ];
    let summary =
        fs::read(cell(tmp.path(), "protonet__standard__seed0").join("summary.json")).unwrap();

    std::thread::sleep(std::time::Duration::from_millis(20));
    let out = cifsl(&["run", "--config", cfg]);
    assert_eq!(code(&out), 0);
    assert!(
        stderr(&out).contains("0 trained, 0 evaluated, 2 skipped"),
        "{}",
        stderr(&out)
    );
    assert_eq!(
        [
            stamp("protonet__standard__seed0"),
            stamp("protonet__standard__seed1")
        ],
        before
    );

    // --force retrains, and retraining reproduces the same bytes.
    let out = cifsl(&["run", "--config", cfg, "--force", "--workers", "1"]);
    assert!(stderr(&out).contains("2 trained"), "{}", stderr(&out));
    assert_ne!(stamp("protonet__standard__seed0"), before[0]);
    assert_eq!(
        fs::read(cell(tmp.path(), "protonet__standard__seed0").join("summary.json")).unwrap(),
        summary
    );
}

#[test]
fn partial_cells_are_completed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal_config(tmp.path(), "[0]");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&cifsl(&["run", "--config", cfg])), 0);
    let dir = cell(tmp.path(), "protonet__standard__seed0");
    let summary = fs::read(dir.join("summary.json")).unwrap();
    let ckpt_time = fs::metadata(dir.join("best.ckpt"))
        .unwrap()
        .modified()
        .unwrap();

    // Interrupted after training: only evaluation is redone.
    fs::remove_file(dir.join("summary.json")).unwrap();
    let out = cifsl(&["run", "--config", cfg]);
    assert!(stderr(&out).contains("1 evaluated"), "{}", stderr(&out));
    assert_eq!(fs::read(dir.join("summary.json")).unwrap(), summary);
    assert_eq!(
        fs::metadata(dir.join("best.ckpt"))
            .unwrap()
            .modified()
            .unwrap(),
        ckpt_time
    );

    // Unreadable checkpoint: retrained.
    fs::remove_file(dir.join("summary.json")).unwrap();
    fs::write(dir.join("best.ckpt"), "garbage").unwrap();
    let out = cifsl(&["run", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("1 trained"), "{}", stderr(&out));
    assert_eq!(fs::read(dir.join("summary.json")).unwrap(), summary);
}

#[test]
fn corrupt_cells_fail_individually() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal_config(tmp.path(), "[0, 1]");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&cifsl(&["run", "--config", cfg])), 0);
    let bad = cell(tmp.path(), "protonet__standard__seed1");
    fs::write(bad.join("best.ckpt"), "garbage").unwrap();

    let out = cifsl(&["evaluate", "--config", cfg, "--force"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(
        err.contains("evaluate protonet__standard__seed1: FAILED"),
        "{err}"
    );
    assert!(
        err.contains("evaluate protonet__standard__seed0: evaluated"),
        "{err}"
    );
    assert!(err.contains("1 of 2 cells failed"), "{err}");

    // The report covers the healthy cells and flags the broken one.
    fs::remove_file(bad.join("summary.json")).unwrap();
    let out = cifsl(&["report", "--config", cfg]);
    assert_eq!(code(&out), 2);
    let md = fs::read_to_string(tmp.path().join("out/report/report.md")).unwrap();
    assert!(md.contains("protonet__standard__seed1"), "{md}");
    assert!(md.contains("| protonet |"), "{md}");
}

#[test]
fn config_errors_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let good = fs::read_to_string(minimal_config(tmp.path(), "[0]")).unwrap();
    let cases = [
        ("version", good.replace("version = 1", "version = 7")),
        ("strategy", good.replace("\"standard\"", "\"sideways\"")),
        (
            "combo",
            good.replace("\"standard\"", "\"standard-weighted-infer\""),
        ),
        (
            "dup spec",
            good.replace("name = \"linear-1-9\"", "name = \"balanced-5shot\""),
        ),
        ("syntax", good.replace("seeds = [0]", "seeds = [0")),
        ("empty", good.replace("seeds = [0]", "seeds = []")),
    ];
    for (what, text) in cases {
        let p = tmp.path().join("bad.toml");
        fs::write(&p, text).unwrap();
        let out = cifsl(&["run", "--config", p.to_str().unwrap()]);
        assert_eq!(code(&out), 1, "{what}: {}", stderr(&out));
        assert!(stderr(&out).contains("config error"), "{what}");
    }
    assert!(!tmp.path().join("out").exists());

    let missing = cifsl(&[
        "run",
        "--config",
        tmp.path().join("nope.toml").to_str().unwrap(),
    ]);
    assert_eq!(code(&missing), 1);
    let cfg = tmp.path().join("minimal.toml");
    assert_eq!(
        code(&cifsl(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--workers",
            "0"
        ])),
        1
    );
    assert_eq!(code(&cifsl(&["run"])), 1);
    assert_eq!(
        code(&cifsl(&[
            "dump-tasks",
            "--config",
            cfg.to_str().unwrap(),
            "--spec",
            "x"
        ])),
        1
    );
}

#[test]
fn desk_grid_has_108_cells() {
    let out = cifsl(&[
        "plan",
        "--config",
        repo_file("configs/desk.toml").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let ids: std::collections::BTreeSet<_> =
        text.lines().filter(|l| l.contains("__seed")).collect();
    assert_eq!(ids.len(), 108);
    assert!(text.contains("108 cells (9 learners × 4 strategies × 3 seeds), 7 eval specs"));
}

/// The desk grid's shape with a tiny dataset and schedule: all 108 cells
/// train, and the report has one row per learner in every table.
#[test]
fn desk_shaped_grid_reports_nine_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut doc: toml::Table =
        toml::from_str(&fs::read_to_string(repo_file("configs/desk.toml")).unwrap()).unwrap();
    let tiny: toml::Table = toml::from_str(
        r#"
output_dir = "out"
[dataset.synthetic]
classes_per_split = [10, 6, 6]
samples_per_class = 30
feature_dim = 4
[encoder]
hidden = [8]
embed_dim = 8
[schedule]
total_episodes = 4
val_every = 2
val_tasks = 2
pretrain_batch = 16
query_per_class = 4
"#,
    )
    .unwrap();
    for key in ["output_dir", "dataset", "encoder", "schedule"] {
        doc.insert(key.into(), tiny[key].clone());
    }
    doc["evaluation"]
        .as_table_mut()
        .unwrap()
        .insert("tasks_per_spec".into(), 4.into());
    // few inner steps keep the MAML cells fast
    for l in doc["learners"].as_array_mut().unwrap() {
        let t = l.as_table_mut().unwrap();
        let kind = t["kind"].as_str().unwrap().to_string();
        let mut a = toml::Table::new();
        a.insert("inner_steps".into(), 2.into());
        a.insert("finetune_steps".into(), 5.into());
        if kind == "fomaml" {
            a.insert("meta_batch".into(), 4.into());
        }
        t.insert("adaptation".into(), a.into());
    }
    let cfg = tmp.path().join("desk.toml");
    fs::write(&cfg, toml::to_string(&doc).unwrap()).unwrap();
    let cfg = cfg.to_str().unwrap();

    let out = cifsl(&["run", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(
        stderr(&out).contains("108 cells: 108 trained"),
        "{}",
        stderr(&out)
    );
    assert_eq!(code(&cifsl(&["report", "--config", cfg])), 0);

    let md = fs::read_to_string(tmp.path().join("out/report/report.md")).unwrap();
    let section = md
        .split("## Accuracy, strategy `random-shot`\n")
        .nth(1)
        .unwrap();
    let table: Vec<_> = section
        .lines()
        .skip(1)
        .take_while(|l| l.starts_with('|'))
        .collect();
    assert_eq!(table.len(), 2 + 9, "{section}");
    assert!(table[0].contains("balanced-5shot") && table[0].contains("random-1-9"));
    for row in &table[2..] {
        assert_eq!(row.matches('|').count(), 2 + 7, "{row}");
        assert!(!row.contains('–'), "{row}");
    }

    let csv = fs::read_to_string(tmp.path().join("out/report/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9 * 4 * 7);
}

#[test]
fn report_recomputes_from_task_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal_config(tmp.path(), "[0, 1]");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&cifsl(&["run", "--config", cfg])), 0);

    // Tamper with the rounded summaries; the report must not notice.
    for s in [0, 1] {
        let p = cell(tmp.path(), &format!("protonet__standard__seed{s}")).join("summary.json");
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        for spec in v["specs"].as_array_mut().unwrap() {
            spec["record"]["accuracy"]["mean"] = 0.0.into();
        }
        fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
    }
    assert_eq!(code(&cifsl(&["report", "--config", cfg])), 0);
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("out/report/report.json")).unwrap(),
    )
    .unwrap();

    let pooled = |spec: &str| {
        let accs: Vec<f64> = [0, 1]
            .iter()
            .flat_map(|s| {
                let p = cell(tmp.path(), &format!("protonet__standard__seed{s}"))
                    .join(format!("results/{spec}.csv"));
                read_task_records(fs::File::open(&p).unwrap(), &p).unwrap()
            })
            .map(|r| r.accuracy)
            .collect();
        assert_eq!(accs.len(), 100);
        Stat::of(&accs).unwrap()
    };
    let rows = report["rows"].as_array().unwrap();
    let row = |spec: &str| rows.iter().find(|r| r["spec"] == spec).unwrap();
    let bal = pooled("balanced-5shot");
    for spec in ["balanced-5shot", "linear-1-9", "step-1-9-1minor"] {
        let expect = pooled(spec);
        let r = row(spec);
        assert_eq!(r["seeds"], 2);
        assert_eq!(
            r["record"]["accuracy"]["mean"].as_f64().unwrap(),
            expect.mean
        );
        assert_eq!(
            r["record"]["accuracy"]["ci95"].as_f64().unwrap(),
            expect.ci95
        );
        assert_eq!(r["delta_abs"].as_f64().unwrap(), expect.mean - bal.mean);
        assert_eq!(
            r["delta_rel"].as_f64().unwrap(),
            (expect.mean - bal.mean) / bal.mean
        );
        assert_eq!(r["record"]["per_run_accuracy"].as_array().unwrap().len(), 2);
    }
    assert_eq!(
        row("step-1-9-1minor")["record"]["per_slot"]
            .as_array()
            .unwrap()
            .len(),
        5
    );
}

#[test]
fn dump_tasks_matches_evaluation_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal_config(tmp.path(), "[3]");
    let cfg = cfg.to_str().unwrap();
    let dump = |extra: &[&str]| {
        let mut args = vec![
            "dump-tasks",
            "--config",
            cfg,
            "--spec",
            "step-1-9-1minor",
            "--count",
            "4",
        ];
        args.extend_from_slice(extra);
        let out = cifsl(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        out.stdout
    };
    let a = dump(&[]);
    assert_eq!(a, dump(&[]));
    assert_ne!(a, dump(&["--seed", "4"]));
    let tasks = read_tasks(a.as_slice()).unwrap();
    assert_eq!(tasks.len(), 4);
    for t in &tasks {
        assert_eq!(t.support_shots().counts(), [1, 9, 9, 9, 9]);
        assert_eq!(t.query_shots().counts(), [16; 5]);
    }

    // The dumped tasks are the ones the evaluation scored.
    assert_eq!(code(&cifsl(&["run", "--config", cfg])), 0);
    let p = cell(tmp.path(), "protonet__standard__seed3").join("results/step-1-9-1minor.csv");
    let recs = read_task_records(fs::File::open(&p).unwrap(), &p).unwrap();
    for (t, r) in tasks.iter().zip(&recs) {
        assert_eq!(t.support_shots().counts(), r.shots.as_slice());
        assert_eq!(r.total, vec![16; 5]);
    }
}

#[test]
fn generate_data_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal_config(tmp.path(), "[0]");
    let out = cifsl(&["generate-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ds = load_features(&tmp.path().join("out/data/features.csv")).unwrap();
    let expected = cifsl_cli::ExperimentConfig::load(&cfg)
        .unwrap()
        .build_dataset()
        .unwrap();
    assert_eq!(ds, expected);
}

#[test]
fn selftest_passes() {
    let out = cifsl(&["selftest", "--instances", "10", "--oracle-instances", "50"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 21);
    assert!(text.lines().all(|l| l.contains(" ok ")), "{text}");
}
