use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cifsl_cli::config::ExperimentConfig;
use cifsl_cli::error::{CliError, CliResult};
use cifsl_cli::grid::{self, GridContext};
use cifsl_cli::report;
use cifsl_core::data::save_features;
use cifsl_core::protocol::eval_task;
use cifsl_core::selftest::{gradient_suite, oracle_suite};
use cifsl_core::tasks::write_task;

/// Class-imbalanced few-shot learning experiments.
#[derive(Parser)]
#[command(name = "cifsl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the configured dataset and write it as feature CSV.
    GenerateData(ConfigArgs),
    /// Train and evaluate every learner × strategy × seed cell.
    Run(GridArgs),
    /// Re-evaluate trained cells from their best checkpoints.
    Evaluate(GridArgs),
    /// Aggregate finished cells into tables under <output_dir>/report.
    Report(ConfigArgs),
    /// List the grid cells a config expands to.
    Plan(ConfigArgs),
    /// Print evaluation tasks of one spec in the task dump format.
    DumpTasks(DumpArgs),
    /// Run the gradient-check and oracle suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Use this root seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Redo cells that already have results.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Eval spec name.
    #[arg(long)]
    spec: String,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 1000)]
    oracle_instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn pool(workers: Option<usize>) -> CliResult<rayon::ThreadPool> {
    if workers == Some(0) {
        return Err(CliError::Config("--workers must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn grid_command(args: &GridArgs, reevaluate: bool) -> CliResult<()> {
    let cfg = load(&args.common)?;
    let pool = pool(args.workers)?;
    let dataset = cfg.build_dataset()?;
    let ctx = GridContext {
        cfg: &cfg,
        dataset: &dataset,
    };
    let cells = grid::expand(&cfg);
    let dir = grid::cells_dir(&cfg);
    std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let outcomes = pool.install(|| {
        if reevaluate {
            grid::for_each_cell(&cells, "evaluate", |c| {
                grid::reevaluate_cell(&ctx, c, args.force)
            })
        } else {
            grid::for_each_cell(&cells, "run", |c| grid::run_cell(&ctx, c, args.force))
        }
    })?;
    let count = |o| outcomes.iter().filter(|&&x| x == o).count();
    eprintln!(
        "{} cells: {} trained, {} evaluated, {} skipped",
        cells.len(),
        count(grid::Outcome::Trained),
        count(grid::Outcome::Evaluated),
        count(grid::Outcome::Skipped)
    );
    Ok(())
}

fn generate_data(args: &ConfigArgs) -> CliResult<()> {
    let cfg = load(args)?;
    let ds = cfg.build_dataset()?;
    let dir = cfg.output_dir.join("data");
    std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let path = dir.join("features.csv");
    save_features(&ds, &path)?;
    println!(
        "{}: {} train / {} val / {} test classes, {} vectors, dim {}",
        path.display(),
        ds.train.num_classes(),
        ds.val.num_classes(),
        ds.test.num_classes(),
        ds.num_samples(),
        ds.feature_dim()
    );
    Ok(())
}

fn report_command(args: &ConfigArgs) -> CliResult<()> {
    let cfg = load(args)?;
    let rep = report::build(&cfg)?;
    let dir = report::write(&cfg, &rep)?;
    println!("report written to {}", dir.display());
    for (id, why) in &rep.missing {
        eprintln!("missing {id}: {why}");
    }
    if rep.missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Cells {
            failed: rep.missing.len(),
            total: grid::expand(&cfg).len(),
        })
    }
}

fn plan(args: &ConfigArgs) -> CliResult<()> {
    let cfg = load(args)?;
    let cells = grid::expand(&cfg);
    let mut out = std::io::stdout().lock();
    for c in &cells {
        let _ = writeln!(out, "{}", c.id());
    }
    let _ = writeln!(
        out,
        "{} cells ({} learners × {} strategies × {} seeds), {} eval specs",
        cells.len(),
        cfg.learners.len(),
        cfg.strategies.len(),
        cfg.seeds.len(),
        cfg.eval_specs.len()
    );
    Ok(())
}

fn dump_tasks(args: &DumpArgs) -> CliResult<()> {
    let cfg = load(&args.common)?;
    let (index, named) = cfg
        .eval_specs
        .iter()
        .enumerate()
        .find(|(_, s)| s.name == args.spec)
        .ok_or_else(|| CliError::Config(format!("no eval spec named {:?}", args.spec)))?;
    let ds = cfg.build_dataset()?;
    let root = grid::eval_seed(cfg.seeds[0]);
    let mut out: Box<dyn std::io::Write> = match &args.out {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(CliError::io(p))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    let spec = named.spec();
    for t in 0..args.count {
        let task = eval_task(&ds.test, &spec, root, index, t)?;
        write_task(&mut out, &task).map_err(CliError::io("<output>"))?;
    }
    out.flush().map_err(CliError::io("<output>"))
}

fn selftest(args: &SelftestArgs) -> CliResult<()> {
    let mut outcomes = gradient_suite(args.instances, args.seed);
    outcomes.extend(oracle_suite(args.oracle_instances, args.seed));
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} of {} checks failed",
            outcomes.len()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::GenerateData(a) => generate_data(a),
        Command::Run(a) => grid_command(a, false),
        Command::Evaluate(a) => grid_command(a, true),
        Command::Report(a) => report_command(a),
        Command::Plan(a) => plan(a),
        Command::DumpTasks(a) => dump_tasks(a),
        Command::Selftest(a) => selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // e.g. `cifsl dump-tasks ... | head`
        Err(CliError::Io { source, .. }) if source.kind() == std::io::ErrorKind::BrokenPipe => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
