//! `trustfed` command line: run scenarios, compare their traces, and
//! benchmark the selection optimizer.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
//! configuration error.

mod output;

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use log::info;
use trustfed::config::ScenarioConfig;
use trustfed::flsim::trace::{read_jsonl, summarize, write_jsonl, write_summary_csv};
use trustfed::flsim::{run_scenario, RoundTrace};
use trustfed::optimizer::{evaluate_objectives, exhaustive_optimum, ga_optimize, GaParams, Instance, MAX_EXHAUSTIVE};

use output::{git_blob_sha1, write_atomic, RunManifest};

#[derive(Parser)]
#[command(name = "trustfed", version, about = "Trust-driven client selection for federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its trace, summary, trust log and manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: available cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Merge two or more traces into one per-round CSV.
    Compare {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the selection optimizer on a stored instance.
    BenchOpt {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also enumerate every selection (at most 20 devices).
        #[arg(long)]
        oracle: bool,
    },
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

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

type CmdResult = Result<(), Failure>;

fn init_logging() {
    let level = match std::env::var("TRUSTFED_LOG").as_deref() {
        Ok("debug") => log::LevelFilter::Debug,
        Ok("info") => log::LevelFilter::Info,
        Ok("trace") => log::LevelFilter::Trace,
        _ => log::LevelFilter::Off,
    };
    env_logger::Builder::new().filter_level(level).init();
}

fn cmd_run(config: &Path, out: &Path, workers: Option<usize>) -> CmdResult {
    let bytes = fs::read(config).with_context(|| format!("reading {}", config.display())).map_err(usage)?;
    let text = std::str::from_utf8(&bytes).context("config is not UTF-8").map_err(usage)?;
    let cfg = ScenarioConfig::from_json(text).with_context(|| format!("invalid config {}", config.display())).map_err(usage)?;
    if let Some(n) = workers {
        if n == 0 {
            return Err(usage(anyhow!("--workers must be positive")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("starting worker pool")?;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let started = Instant::now();
    let run = run_scenario(&cfg).context("scenario failed")?;
    let elapsed = started.elapsed().as_secs_f64();
    info!("{}: {} rounds in {elapsed:.1}s", cfg.name, run.traces.len());

    write_atomic(&out.join("trace.jsonl"), |w| Ok(write_jsonl(w, &run.traces)?))?;
    write_atomic(&out.join("summary.csv"), |w| Ok(write_summary_csv(w, &summarize(&run.traces))?))?;
    write_atomic(&out.join("trust_log.jsonl"), |w| Ok(write_jsonl(w, &run.trust_log)?))?;
    let manifest = RunManifest {
        config_path: config.to_path_buf(),
        output_dir: out.to_path_buf(),
        scenario: cfg.name.clone(),
        config_sha1: git_blob_sha1(&bytes),
        duration_secs: elapsed,
    };
    write_atomic(&out.join("manifest.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        Ok(w.write_all(b"\n")?)
    })?;
    let last = run.traces.last().map_or(0.0, |t| t.global_accuracy);
    println!("{}: {} rounds, final accuracy {last:.4}, outputs in {}", cfg.name, run.traces.len(), out.display());
    Ok(())
}

/// Column label for a trace: its directory name for `trace.jsonl`, else its stem.
fn trace_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "trace" {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

fn cmd_compare(paths: &[PathBuf], out: &Path) -> CmdResult {
    if paths.len() < 2 {
        return Err(usage(anyhow!("compare needs at least two traces, got {}", paths.len())));
    }
    let mut runs: Vec<(String, Vec<RoundTrace>)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, p) in paths.iter().enumerate() {
        let file = File::open(p).with_context(|| format!("opening {}", p.display())).map_err(usage)?;
        let traces: Vec<RoundTrace> = read_jsonl(file).with_context(|| format!("reading {}", p.display())).map_err(usage)?;
        let mut label = trace_label(p);
        if !seen.insert(label.clone()) {
            label = format!("{label}_{i}");
            seen.insert(label.clone());
        }
        runs.push((label, traces));
    }
    let rounds = runs[0].1.len();
    if let Some((label, t)) = runs.iter().find(|(_, t)| t.len() != rounds) {
        return Err(usage(anyhow!("{label} has {} rounds, {} has {rounds}", t.len(), runs[0].0)));
    }
    let summaries: Vec<_> = runs.iter().map(|(_, t)| summarize(t)).collect();
    write_atomic(out, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["round".to_string()];
        for (label, _) in &runs {
            header.extend(["accuracy", "trust_honest", "trust_malicious", "dismissed"].map(|c| format!("{c}_{label}")));
        }
        csv.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in 0..rounds {
            let mut row = vec![summaries[0][r].round.to_string()];
            for s in &summaries {
                let s = &s[r];
                row.extend([s.global_accuracy.to_string(), opt(s.mean_trust_honest), opt(s.mean_trust_malicious), s.dismissed.to_string()]);
            }
            csv.write_record(&row)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    println!("compared {} traces over {rounds} rounds into {}", runs.len(), out.display());
    Ok(())
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn cmd_bench_opt(instance: &Path, seed: u64, oracle: bool) -> CmdResult {
    let ctx = Instance::load(instance).with_context(|| format!("loading {}", instance.display())).map_err(usage)?;
    if oracle && ctx.len() > MAX_EXHAUSTIVE {
        return Err(usage(anyhow!("--oracle supports at most {MAX_EXHAUSTIVE} devices, instance has {}", ctx.len())));
    }
    let started = Instant::now();
    let result = match ga_optimize(&ctx, &GaParams::default(), seed) {
        Ok(r) => r,
        Err(trustfed::Error::NoFeasibleSolution) => {
            println!("result: no-feasible-solution");
            return Err(Failure::Runtime(anyhow!("no-feasible-solution")));
        }
        Err(e) => return Err(Failure::Runtime(e.into())),
    };
    let chosen = &result.chosen;
    let ids: Vec<String> = chosen.selection.selected().map(|i| ctx.devices[i].id.to_string()).collect();
    println!("devices: {}", ctx.len());
    println!("selection: {}", chosen.selection.to_bit_string());
    println!("selected_ids: [{}]", ids.join(", "));
    println!("objectives: {}", fmt_vec(&evaluate_objectives(&chosen.selection, &ctx).as_array()));
    println!("fitness: {:.6}", chosen.fitness);
    println!("pareto_size: {}", result.pareto.len());
    println!("generations: {}", result.generations_run);
    println!("elapsed_secs: {:.3}", started.elapsed().as_secs_f64());
    if oracle {
        let (best, fitness) = exhaustive_optimum(&ctx).map_err(|e| Failure::Runtime(e.into()))?;
        println!("oracle_selection: {}", best.to_bit_string());
        println!("oracle_fitness: {fitness:.6}");
        let ratio = if fitness > 0.0 { chosen.fitness / fitness } else { 1.0 };
        println!("ratio: {ratio:.6}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let result = match &cli.command {
        Command::Run { config, out, workers } => cmd_run(config, out, *workers),
        Command::Compare { traces, out } => cmd_compare(traces, out),
        Command::BenchOpt { instance, seed, oracle } => cmd_bench_opt(instance, *seed, *oracle),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
