//! `tl`: run, compare, plan, and cost-model subcommands.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tl_core::experiment::{compare, prepare_data, run_experiment, ExperimentConfig, Method};
use tl_core::orchestrator::{Aggregation, ExecutionMode};
use tl_core::simnet::{estimate_runtime, simulate_method, CostMethod, CostParams};
use tl_core::vbatch::{build_global_index, collect_index_ranges, plan_epoch, IndexRangeReport};
use tl_core::Error;

#[derive(Parser)]
#[command(name = "tl", version, about = "Traversal learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method and write metrics as JSON lines, ending with a summary.
    Run(Common),
    /// Train two methods over several seeds and report their differences.
    Compare(CompareArgs),
    /// Print one epoch's traversal plan as JSON lines.
    Plan(PlanArgs),
    /// Print closed-form and simulated per-round runtimes.
    CostModel(CostArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// cl, tl, fedavg, sl, sl_plus or sfl.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    /// deterministic or pipelined.
    #[arg(long)]
    mode: Option<String>,
    /// per-sample or node-mean.
    #[arg(long)]
    aggregation: Option<String>,
    /// Output file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Method of the second run; defaults to cl.
    #[arg(long, default_value = "cl")]
    against: String,
    /// Separate configuration for the second run; flags still apply to both.
    #[arg(long)]
    config_b: Option<PathBuf>,
    /// Number of consecutive training seeds.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    common: Common,
    /// Total samples, dealt round-robin over --nodes.
    #[arg(long)]
    samples: Option<usize>,
    /// Explicit per-node sample counts, e.g. 3,2.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    epoch: usize,
    /// Assign global ids in a seeded random order instead of node order.
    #[arg(long)]
    randomize_ids: bool,
}

#[derive(Args)]
struct CostArgs {
    /// TOML or JSON file with t_comp_client, t_comm, t_agg, t_comp_server and
    /// optionally extra_client_layers_factor.
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 50)]
    batches: usize,
    /// Extra seconds per message in the simulation.
    #[arg(long, default_value_t = 0.0)]
    latency: f64,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Validation(_) => Failure::Usage(e),
            other => Failure::Runtime(other),
        }
    }
}

fn io_err(e: io::Error) -> Failure {
    Failure::Runtime(Error::Io(e))
}

fn main() -> ExitCode {
    let env = env_logger::Env::default().filter_or("TL_LOG_LEVEL", "warn");
    env_logger::Builder::from_env(env).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(c) => cmd_run(&c),
        Command::Compare(c) => cmd_compare(&c),
        Command::Plan(p) => cmd_plan(&p),
        Command::CostModel(c) => cmd_cost(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>, flags: &Common) -> Result<ExperimentConfig, Error> {
    let mut c = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let t = &mut c.training;
    if let Some(v) = flags.seed {
        t.seed = v;
    }
    if let Some(v) = &flags.method {
        t.method = v.parse()?;
    }
    if let Some(v) = flags.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = flags.epochs {
        t.epochs = v;
    }
    if let Some(v) = flags.lr {
        t.learning_rate = v;
    }
    if let Some(v) = &flags.mode {
        t.mode = v.parse::<ExecutionMode>()?;
    }
    if let Some(v) = &flags.aggregation {
        t.aggregation = v.parse::<Aggregation>()?;
    }
    if let Some(v) = flags.nodes {
        c.partition.nodes = v;
    }
    if let Some(v) = &flags.out {
        c.output.metrics = Some(v.clone());
    }
    c.validate()?;
    Ok(c)
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_run(flags: &Common) -> Result<(), Failure> {
    let config = load_config(flags.config.as_deref(), flags)?;
    log::info!("running {} for {} epochs", config.training.method, config.training.epochs);
    let result = run_experiment(&config)?;
    let path = config.output.metrics.as_deref();
    let mut out = open_output(path)?;
    for line in &result.lines {
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    if path.is_some() {
        println!("{}", result.lines.last().expect("summary line"));
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<(), Failure> {
    let a = load_config(args.common.config.as_deref(), &args.common)?;
    let mut b = match &args.config_b {
        Some(p) => load_config(Some(p), &args.common)?,
        None => a.clone(),
    };
    b.training.method = args.against.parse::<Method>()?;
    let report = compare(&a, &b, args.seeds)?;
    let mut out = open_output(args.common.out.as_deref())?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(Error::Format(e.to_string())))?;
    writeln!(out, "{text}").map_err(io_err)?;
    out.flush().map_err(io_err)
}

fn cmd_plan(args: &PlanArgs) -> Result<(), Failure> {
    let flags = &args.common;
    let config = load_config(flags.config.as_deref(), flags)?;
    let sizes: Vec<usize> = if let Some(s) = &args.sizes {
        s.clone()
    } else if let Some(total) = args.samples {
        let n = flags.nodes.unwrap_or(1);
        if n == 0 {
            return Err(Error::Config("--nodes must be >= 1".into()).into());
        }
        (0..n).map(|i| total / n + usize::from(i < total % n)).collect()
    } else {
        prepare_data(&config)?.shards.iter().map(|s| s.dataset.len()).collect()
    };
    let reports = collect_index_ranges(sizes.iter().enumerate().map(|(i, &c)| IndexRangeReport {
        node_id: i as u32,
        sample_count: c,
    }))?;
    let seed = config.training.seed;
    let map = build_global_index(&reports, args.randomize_ids, seed);
    let (_, plan) = plan_epoch(&map, config.training.batch_size, seed, args.epoch)?;
    let mut out = open_output(flags.out.as_deref())?;
    for batch in &plan.batches {
        for step in &batch.steps {
            let rec = serde_json::json!({
                "epoch": args.epoch,
                "batch_id": batch.batch_id,
                "node_id": step.node_id,
                "local_indices": step.local_indices,
                "positions": step.positions,
            });
            writeln!(out, "{rec}").map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

fn cmd_cost(args: &CostArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.params)
        .map_err(|e| Error::Config(format!("cannot read params {}: {e}", args.params.display())))?;
    let is_json = args.params.extension().is_some_and(|e| e == "json");
    let params: CostParams = if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
    };
    params.validate()?;
    let mut out = open_output(args.out.as_deref())?;
    if !args.json {
        writeln!(out, "{:<8} {:>14} {:>14}", "method", "closed_form_s", "simulated_s").map_err(io_err)?;
    }
    for m in CostMethod::ALL {
        let closed = estimate_runtime(m, &params);
        let sim = simulate_method(m, &params, args.batches, args.latency)?;
        if args.json {
            let rec = serde_json::json!({ "method": m.name(), "closed_form_s": closed, "simulated_s": sim });
            writeln!(out, "{rec}").map_err(io_err)?;
        } else {
            writeln!(out, "{:<8} {:>14.6} {:>14.6}", m.name(), closed, sim).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}
