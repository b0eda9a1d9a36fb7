//! Command implementations behind the `atdt` binary.

pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use atdt_core::dataset::{build_dataset, derive_seed, export_split, SplitKind, SplitManifest};
use atdt_core::pipeline::{run_experiment, Direction, ExperimentPlan, Manifest, Method, RunResult};
use atdt_core::scenegen::Domain;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub const EXIT_RUN_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Environment variable overriding the master seed.
pub const SEED_ENV: &str = "ATDT_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "atdt",
    version,
    about = "Cross-task feature transfer experiments on a two-domain toy benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the A and B datasets to Netpbm files.
    GenData(GenDataArgs),
    /// Train and evaluate the requested methods.
    Run(RunArgs),
    /// Summarize finished runs into tables and image triptychs.
    Report(ReportArgs),
    /// Gradient checks, metric oracles and renderer invariants.
    Selftest,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Experiment config (JSON); only its dataset section and first seed matter.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Render B from the same scene seeds as A.
    #[arg(long)]
    pub paired: bool,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Experiment config or a run manifest (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Comma-separated subset of atdt,baseline,oracle,multitask.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, value_parser = parse_direction)]
    pub direction: Option<Direction>,
    /// A seed count (`5` runs seeds 0..5 from the master seed) or an explicit
    /// comma-separated list (`1,4,9`).
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub split_level: Option<usize>,
    #[arg(long)]
    pub no_batchnorm: bool,
    #[arg(long)]
    pub no_shared_encoder: bool,
    #[arg(long)]
    pub proxy_labels: bool,
    #[arg(long)]
    pub paired: bool,
    /// Seeds run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Output roots of `atdt run`; may be repeated.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    match s {
        "dep2sem" => Ok(Direction::Dep2sem),
        "sem2dep" => Ok(Direction::Sem2dep),
        _ => Err(format!("expected dep2sem or sem2dep, got {s:?}")),
    }
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            error: error.into(),
        }
    }

    pub fn run(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_RUN_FAILURE,
            error: error.into(),
        }
    }
}

/// Core errors split into configuration problems and everything else.
fn classify(e: atdt_core::Error) -> Failure {
    match e {
        atdt_core::Error::Config(_) => Failure::config(e),
        other => Failure::run(other),
    }
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Run(a) => run(&a).map(|_| ()),
        Command::Report(a) => report::report(&a.runs, &a.out).map_err(Failure::run),
        Command::Selftest => selftest(),
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::config(anyhow!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Reads an experiment config, or the config inside a run manifest.
pub fn load_plan(path: Option<&Path>) -> Result<ExperimentPlan, Failure> {
    let Some(path) = path else {
        return Ok(ExperimentPlan::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::config)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::config)?;
    let is_manifest = value.get("version").is_some() && value.get("config").is_some();
    let plan = if is_manifest {
        let m: Manifest = serde_json::from_value(value)
            .with_context(|| format!("manifest {}", path.display()))
            .map_err(Failure::config)?;
        ExperimentPlan {
            seeds: vec![m.seed],
            ..m.config
        }
    } else {
        serde_json::from_value(value)
            .with_context(|| format!("config {}", path.display()))
            .map_err(Failure::config)?
    };
    Ok(plan)
}

/// Applies command-line flags and `ATDT_SEED` on top of the file config.
pub fn resolve_plan(args: &RunArgs) -> Result<ExperimentPlan, Failure> {
    let mut plan = load_plan(args.config.as_deref())?;
    if let Some(ms) = &args.methods {
        plan.methods = ms
            .iter()
            .map(|m| Method::parse(m.trim()).ok_or_else(|| Failure::config(anyhow!("unknown method {m:?}"))))
            .collect::<Result<_, _>>()?;
        plan.ablations.clear();
    }
    if let Some(d) = args.direction {
        plan.direction = d;
    }
    if let Some(l) = args.split_level {
        plan.split_level = l;
    }
    plan.use_batchnorm &= !args.no_batchnorm;
    plan.shared_encoder &= !args.no_shared_encoder;
    plan.proxy_labels_on_b |= args.proxy_labels;
    plan.dataset.paired |= args.paired;
    let master = env_seed()?;
    if let Some(s) = &args.seeds {
        plan.seeds = parse_seeds(s, master.or(plan.seeds.first().copied()).unwrap_or(0))?;
    } else if let Some(m) = master {
        plan.seeds = (0..plan.seeds.len() as u64).map(|i| m + i).collect();
    }
    if args.jobs == 0 {
        return Err(Failure::config(anyhow!("--jobs must be at least 1")));
    }
    plan.validate().map_err(classify)?;
    Ok(plan)
}

fn parse_seeds(s: &str, master: u64) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::config(anyhow!("--seeds expects a count or a comma-separated list, got {s:?}"));
    if s.contains(',') {
        s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
    } else {
        let n: u64 = s.trim().parse().map_err(|_| bad())?;
        Ok((master..master + n).collect())
    }
}

pub fn run(args: &RunArgs) -> Result<RunResult, Failure> {
    let plan = resolve_plan(args)?;
    eprintln!(
        "running `{}` ({}) seeds {:?} into {}",
        plan.name,
        plan.direction,
        plan.seeds,
        args.out.display()
    );
    let result = run_experiment(&plan, Some(&args.out), args.jobs).map_err(classify)?;
    print!("{}", summary(&result));
    let failures: Vec<String> = result
        .seeds
        .iter()
        .flat_map(|s| {
            s.failures()
                .into_iter()
                .map(move |(k, e)| format!("seed {} {k}: {e}", s.seed))
        })
        .collect();
    if failures.is_empty() {
        Ok(result)
    } else {
        Err(Failure::run(anyhow!(
            "{} sub-run(s) failed; partial results kept\n  {}",
            failures.len(),
            failures.join("\n  ")
        )))
    }
}

/// Seed-mean of the primary metric per result key.
pub fn summary(result: &RunResult) -> String {
    let metric = match result.plan.direction.target() {
        atdt_core::nets::Task::Segmentation => "mIoU",
        atdt_core::nets::Task::Depth => "AbsRel",
    };
    let mut keys: Vec<&String> = result.seeds.iter().flat_map(|s| s.results.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut out = format!(
        "{:<18} {:>10} {:>10}\n",
        "method",
        format!("B {metric}"),
        format!("A {metric}")
    );
    for k in keys {
        let cell = |v: Option<f64>| v.map_or("failed".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "{:<18} {:>10} {:>10}\n",
            k,
            cell(result.mean_primary_b(k)),
            cell(result.mean_primary_a(k))
        ));
    }
    out
}

#[derive(Serialize)]
struct DataManifest<'a> {
    seed: u64,
    dataset_seed: u64,
    config: &'a atdt_core::dataset::DatasetConfig,
    splits: Vec<(String, SplitManifest)>,
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), Failure> {
    let plan = load_plan(args.config.as_deref())?;
    let mut cfg = plan.dataset.clone();
    cfg.paired |= args.paired;
    cfg.validate().map_err(classify)?;
    let seed = match env_seed()? {
        Some(s) => s,
        None => plan.seeds.first().copied().unwrap_or(0),
    };
    // Same derivation as the pipeline, so the files match what `run` trains on.
    let dataset_seed = derive_seed(seed, "data");
    let data = build_dataset(&cfg, dataset_seed).map_err(classify)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(Failure::config)?;
    let mut splits = Vec::new();
    for domain in [Domain::A, Domain::B] {
        let d = data.domain(domain);
        for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
            let Some(split) = d.split(kind) else { continue };
            let rel = format!("{}/{}", domain_dir(domain), kind.name());
            let m = export_split(&args.out.join(&rel), split, kind).map_err(classify)?;
            splits.push((rel, m));
        }
    }
    let manifest = DataManifest {
        seed,
        dataset_seed,
        config: &cfg,
        splits,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(Failure::run)?;
    fs::write(args.out.join("manifest.json"), json + "\n").map_err(Failure::run)?;
    eprintln!("wrote datasets for seed {seed} to {}", args.out.display());
    Ok(())
}

fn domain_dir(d: Domain) -> &'static str {
    match d {
        Domain::A => "a",
        Domain::B => "b",
    }
}

pub fn selftest() -> Result<(), Failure> {
    let start = std::time::Instant::now();
    let checks = atdt_core::selftest::run();
    for c in &checks {
        println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!(
        "{} checks, {failed} failed, {:.1}s",
        checks.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::run(anyhow!("{failed} self-test check(s) failed")))
    }
}
