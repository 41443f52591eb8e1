//! `jitdp`: convert corpora, run experiment plans, and turn reports into tables.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors
//! (bad flags, malformed plans, unknown backbone names).

mod plots;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use jitdp::corpus::legacy::convert_legacy_file;
use jitdp::corpus::{write_corpus, Corpus};
use jitdp::encode::BackboneCache;
use jitdp::experiments::{
    compare_runs, load_report, run_plan, write_report_tables, ExperimentError, ExperimentPlan,
    ExperimentReport, NamedRun, RunContext,
};

#[derive(Debug, Parser)]
#[command(name = "jitdp", version, about = "Just-in-time defect prediction experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Backbone weight cache root (default: $JITDP_CACHE, then ~/.cache/jitdp).
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Never fetch backbone weights; also enabled by $JITDP_OFFLINE.
    #[arg(long, global = true)]
    offline: bool,
    /// Print progress detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a legacy pickled release into a canonical corpus file.
    ConvertLegacy {
        input: PathBuf,
        output: PathBuf,
        /// Dataset name used in diagnostics.
        #[arg(long)]
        name: Option<String>,
    },
    /// Run an experiment plan.
    Run(RunArgs),
    /// Write tables (and optionally plots) for a finished run.
    Report {
        /// Run directory containing report.json.
        dir: PathBuf,
        /// Where tables go (default: <dir>/tables).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plots: bool,
    },
    /// Pairwise t-tests and efficiency across one or more run directories.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Only compare cells on this dataset.
        #[arg(long)]
        dataset: Option<String>,
        /// Test thresholded 0/1 predictions instead of raw scores.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write ttest/efficiency files here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    plan: PathBuf,
    /// Output root; each plan gets a subdirectory named by its hash.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Replace the plan's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Print the resolved grid and exit without writing anything.
    #[arg(long)]
    dry_run: bool,
    /// Re-run cells that already have results.
    #[arg(long)]
    force: bool,
    /// Also render SVG plots next to the tables.
    #[arg(long)]
    plots: bool,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn classify(e: ExperimentError) -> Failure {
    match e {
        ExperimentError::PlanIo { .. } | ExperimentError::Plan(_) | ExperimentError::UnknownBackbone(_) => {
            Failure::Usage(e.into())
        }
        other => Failure::Runtime(other.into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ConvertLegacy { input, output, name } => convert(&input, &output, name),
        Command::Run(args) => run(&cli.global, args),
        Command::Report { dir, out, plots } => report(&dir, out, plots),
        Command::Compare { dirs, dataset, threshold, out } => compare(&dirs, dataset, threshold, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", chain(&e));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", chain(&e));
            ExitCode::from(1)
        }
    }
}

// error sources, skipping any already spelled out by their parent
fn chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn convert(input: &Path, output: &Path, name: Option<String>) -> Result<(), Failure> {
    let records = convert_legacy_file(input).map_err(|e| anyhow!(e))?;
    let name = name.unwrap_or_else(|| {
        input.file_stem().map_or_else(|| "corpus".into(), |s| s.to_string_lossy().into_owned())
    });
    let corpus = Corpus::new(name, records);
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_corpus(&corpus, output).map_err(|e| anyhow!(e))?;
    println!(
        "{}: {} records ({} defective) -> {}",
        corpus.name,
        corpus.total_count(),
        corpus.defect_count(),
        output.display()
    );
    Ok(())
}

fn run(global: &Global, args: RunArgs) -> Result<(), Failure> {
    let mut plan = ExperimentPlan::from_path(&args.plan).map_err(classify)?;
    if let Some(seed) = args.seed {
        plan.seeds = vec![seed];
    }
    if args.workers == 0 {
        return Err(Failure::Usage(anyhow!("--workers must be at least 1")));
    }
    plan.validate().map_err(classify)?;
    let grid = plan.grid().map_err(classify)?;
    let root = args.out.join(plan.plan_hash());

    if args.dry_run {
        println!("plan {} ({} cells, {} epochs) -> {}", plan.plan_hash(), grid.len(), plan.epochs(), root.display());
        for key in &grid {
            let cfg = plan.train_config(key.backbone, key.seed);
            println!(
                "  {:<40} lr={:e} batch={} dir={}",
                key.label(),
                cfg.learning_rate,
                cfg.batch_size,
                key.dir().display()
            );
        }
        return Ok(());
    }

    let mut ctx = RunContext::in_memory().with_out(&args.out);
    ctx.cache = cache(global);
    ctx.workers = args.workers;
    ctx.force = args.force;
    if global.verbose > 0 {
        eprintln!("running {} cells with {} worker(s)", grid.len(), ctx.workers);
    }
    let report = run_plan(&plan, &ctx).map_err(classify)?;
    let tables = root.join("tables");
    write_report_tables(&report, &tables).map_err(|e| anyhow!(e))?;
    if args.plots {
        plots::write_plots(&report, &tables)?;
    }
    summarize(&report);
    println!("results in {}", root.display());

    let failed = report.failed_cells().count();
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} of {} cells failed", report.cells.len())));
    }
    Ok(())
}

fn cache(global: &Global) -> BackboneCache {
    let mut cache = BackboneCache::from_env();
    if let Some(root) = &global.cache {
        cache.root = root.clone();
    }
    cache.offline |= global.offline;
    cache
}

fn summarize(report: &ExperimentReport) {
    for cell in &report.cells {
        let label = cell.key.label();
        match (cell.result(), cell.error()) {
            (Some(r), _) => {
                let m = &r.metrics;
                let tag = if cell.resumed { " (resumed)" } else { "" };
                println!(
                    "  {label:<40} acc={} prec={} rec={} f1={} auc={}{tag}",
                    m.accuracy.display(),
                    m.precision.display(),
                    m.recall.display(),
                    m.f1.display(),
                    m.auc.display()
                );
            }
            (None, Some(e)) => println!("  {label:<40} FAILED: {e}"),
            (None, None) => {}
        }
    }
}

fn report(dir: &Path, out: Option<PathBuf>, plots: bool) -> Result<(), Failure> {
    let report = load_report(dir).map_err(|e| anyhow!(e))?;
    let out = out.unwrap_or_else(|| dir.join("tables"));
    let written = write_report_tables(&report, &out).map_err(|e| anyhow!(e))?;
    if plots {
        plots::write_plots(&report, &out)?;
    }
    summarize(&report);
    println!("{} tables -> {}", written.len(), out.display());
    Ok(())
}

fn compare(dirs: &[PathBuf], dataset: Option<String>, threshold: Option<f64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let reports = dirs
        .iter()
        .map(|d| load_report(d).map_err(|e| anyhow!(e)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let prefix = reports.len() > 1;

    let mut by_dataset: BTreeMap<&str, Vec<(String, _)>> = BTreeMap::new();
    for (i, report) in reports.iter().enumerate() {
        for (key, result) in report.ok_cells() {
            if dataset.as_deref().is_some_and(|d| d != key.dataset) {
                continue;
            }
            let name = if prefix { format!("{}:{}", i + 1, key.label()) } else { key.label() };
            by_dataset.entry(key.dataset.as_str()).or_default().push((name, result));
        }
    }
    if by_dataset.is_empty() {
        return Err(Failure::Usage(anyhow!("no successful cells to compare")));
    }

    for (name, runs) in &by_dataset {
        if runs.len() < 2 {
            println!("{name}: only one run, nothing to compare");
            continue;
        }
        let named: Vec<NamedRun<'_>> = runs.iter().map(|(n, r)| NamedRun { name: n, result: r }).collect();
        let bundle = compare_runs(&named, threshold).map_err(|e| anyhow!(e))?;
        println!("== {name}");
        print!("{}", bundle.ttest.render());
        let mut eff = String::from("model\tseconds\tparams\tcheckpoint_bytes\n");
        for (model, e) in &bundle.efficiency {
            eff.push_str(&format!("{model}\t{:.3}\t{}\t{}\n", e.seconds, e.param_count, e.checkpoint_bytes));
        }
        print!("{eff}");
        if let Some(out) = &out {
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let write = |file: String, text: String| {
                let path = out.join(file);
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
            };
            write(format!("ttest_{name}.tsv"), bundle.ttest.to_tsv())?;
            write(format!("ttest_{name}.txt"), bundle.ttest.render())?;
            write(format!("efficiency_{name}.tsv"), eff)?;
        }
    }
    Ok(())
}
