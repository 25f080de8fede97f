use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use layerfuzz::coverage::CoverageRow;
use layerfuzz::difftest::{bridge, builtin_backend, open_backend, run_differential, BugRecord, FAULTS};
use layerfuzz::graph::save_model;
use layerfuzz::registry::Registry;
use layerfuzz::rng::derive;
use layerfuzz::scheduler::{fuzz_to_dir, load_seed, CampaignConfig, Selection};
use layerfuzz::synthesis::{synthesize, SynthesisConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_BUGS: u8 = 2;
const EXIT_RESIDUAL: u8 = 3;

#[derive(Parser)]
#[command(name = "layerfuzz", version, about = "Coverage-guided fuzzing of tensor computation graphs")]
struct Cli {
    /// Operator registry document; the built-in registry when omitted.
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize small seeds covering the diversity of existing models.
    Synthesize {
        /// Model documents or `zoo:<name>`.
        #[arg(required = true)]
        models: Vec<String>,
        #[arg(long, default_value = "synthesized")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-model time budget in seconds.
        #[arg(long, default_value_t = 300.0)]
        budget: f64,
    },
    /// Run a fuzzing campaign.
    Fuzz {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Time budget in seconds.
        #[arg(long)]
        budget: Option<f64>,
        /// Comma-separated backend ids.
        #[arg(long, value_delimiter = ',')]
        backends: Option<Vec<String>>,
        #[arg(long, default_value = "campaign")]
        out: PathBuf,
        /// Fault for the faulty backend; see `list-faults`.
        #[arg(long)]
        fault: Option<String>,
        #[arg(long)]
        no_synthesis: bool,
        #[arg(long)]
        max_iterations: Option<u64>,
        #[arg(long, value_parser = parse_selection)]
        selection: Option<Selection>,
    },
    /// Re-run the differential check on a saved model.
    Replay {
        model: PathBuf,
        /// Backends; defaults to those recorded in the campaign's bug report.
        #[arg(long, value_delimiter = ',')]
        backends: Option<Vec<String>>,
        #[arg(long)]
        fault: Option<String>,
        #[arg(long = "threshold", default_value_t = 0.4)]
        threshold: f64,
    },
    /// Summarize a campaign directory.
    Report { dir: PathBuf },
    /// List the faults the faulty backend can inject.
    ListFaults,
    /// Serve a built-in backend over the stdio protocol.
    #[command(hide = true)]
    ServeBackend {
        id: String,
        /// Exit abruptly on the first execute request.
        #[arg(long)]
        abort_on_execute: bool,
    },
}

fn parse_selection(s: &str) -> Result<Selection, String> {
    match s {
        "mcmc" => Ok(Selection::Mcmc),
        "random" => Ok(Selection::Random),
        _ => Err(format!("expected `mcmc` or `random`, got `{s}`")),
    }
}

/// Points `backends` at the requested fault. A bare `faulty` entry is
/// replaced first, then a `fused` one (the faulty backend is fused with a
/// defect); otherwise `faulty:<fault>` is appended.
fn apply_fault(backends: &mut Vec<String>, fault: &str) -> Result<()> {
    let id = format!("faulty:{fault}");
    builtin_backend(&id).map_err(anyhow::Error::msg)?;
    let slot = backends
        .iter()
        .position(|b| b == "faulty")
        .or_else(|| backends.iter().position(|b| b == "fused"));
    match slot {
        Some(i) => backends[i] = id,
        None => backends.push(id),
    }
    Ok(())
}

fn load_registry(path: Option<&Path>) -> Result<Registry> {
    match path {
        None => Ok(Registry::builtin()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Registry::load(&text).with_context(|| format!("registry {}", p.display()))
        }
    }
}

fn stem(spec: &str) -> String {
    match spec.strip_prefix("zoo:") {
        Some(name) => name.to_string(),
        None => Path::new(spec)
            .file_stem()
            .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned()),
    }
}

fn cmd_synthesize(registry: &Registry, models: &[String], out: &Path, seed: u64, budget: f64) -> Result<u8> {
    std::fs::create_dir_all(out)?;
    let config = SynthesisConfig {
        time_budget: Duration::from_secs_f64(budget.max(0.0)),
        ..SynthesisConfig::default()
    };
    let mut code = 0;
    for spec in models {
        let original = load_seed(spec, registry)?;
        let name = stem(spec);
        let (graph, report) = synthesize(&original, registry, &config, &mut derive(seed, &format!("synthesis:{name}")))?;
        let path = out.join(format!("{name}.synth.json"));
        save_model(&graph, registry, &path)?;
        let doc = serde_json::json!({ "model": spec, "output": path, "report": report });
        println!("{}", serde_json::to_string_pretty(&doc)?);
        if !report.residual.is_empty() {
            eprintln!("{spec}: {} items left uncovered", report.residual.len());
            code = EXIT_RESIDUAL;
        }
    }
    Ok(code)
}

#[allow(clippy::too_many_arguments)]
fn cmd_fuzz(
    registry: &Registry,
    config_path: Option<&Path>,
    seed: Option<u64>,
    budget: Option<f64>,
    backends: Option<Vec<String>>,
    out: &Path,
    fault: Option<&str>,
    no_synthesis: bool,
    max_iterations: Option<u64>,
    selection: Option<Selection>,
) -> Result<u8> {
    let mut config = match config_path {
        Some(p) => CampaignConfig::load(p)?,
        None => CampaignConfig::default(),
    };
    if let Some(s) = seed {
        config.rng_seed = s;
    }
    if let Some(b) = budget {
        config.time_budget_seconds = b;
    }
    if let Some(b) = backends {
        config.backends = b;
    }
    if let Some(f) = fault {
        apply_fault(&mut config.backends, f)?;
    }
    if no_synthesis {
        config.synthesize_first = false;
    }
    if max_iterations.is_some() {
        config.max_iterations = max_iterations;
    }
    if let Some(s) = selection {
        config.selection = s;
    }
    for w in config.check()? {
        eprintln!("warning: {w}");
    }

    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing the interrupt handler")?;

    let result = fuzz_to_dir(&config, registry, out, Some(stop))?;
    let row = result.final_row().cloned();
    println!(
        "{} iterations, {:.1}s, {} unique bugs ({} bug verdicts), pool {}",
        result.iterations,
        result.elapsed_seconds,
        result.bugs.len(),
        result.bugs.observed,
        result.pool_size
    );
    if let Some(r) = row {
        println!(
            "coverage: input {:.3} param {:.3} sequence {:.3}, {} behavior paths",
            r.cov_input, r.cov_param, r.cov_sequence, r.behavior_paths
        );
    }
    for key in result.bugs.records.keys() {
        println!("bug: {key}");
    }
    if result.stopped_early {
        eprintln!("interrupted; artifacts in {} are complete up to the last iteration", out.display());
    }
    Ok(if result.bugs.is_empty() { 0 } else { EXIT_BUGS })
}

/// Backends recorded for `model` in a sibling `report.json`, if any.
fn recorded_backends(model: &Path) -> Option<Vec<String>> {
    let report = model.parent()?.join("report.json");
    let records: Vec<BugRecord> = serde_json::from_str(&std::fs::read_to_string(report).ok()?).ok()?;
    let name = model.file_name()?.to_string_lossy().into_owned();
    records
        .into_iter()
        .find(|r| r.model.as_deref().is_some_and(|m| m.ends_with(&name)))
        .map(|r| r.backends)
}

fn cmd_replay(
    registry: &Registry,
    model: &Path,
    backends: Option<Vec<String>>,
    fault: Option<&str>,
    threshold: f64,
) -> Result<u8> {
    let graph = load_seed(&model.to_string_lossy(), registry)?;
    let mut ids = backends
        .or_else(|| recorded_backends(model))
        .unwrap_or_else(|| vec!["eager".into(), "fused".into()]);
    if let Some(f) = fault {
        apply_fault(&mut ids, f)?;
    }
    let mut opened = Vec::new();
    for id in &ids {
        opened.push(open_backend(id, registry).map_err(|e| anyhow::anyhow!("backend `{id}`: {e}"))?);
    }
    let verdict = run_differential(&graph, &mut opened, threshold);
    let failures: Vec<_> = verdict
        .failures()
        .map(|(b, f)| serde_json::json!({ "backend": b, "stage": f.stage, "trace": f.trace }))
        .collect();
    let doc = serde_json::json!({
        "verdict": verdict.kind,
        "backends": ids,
        "d_mad": verdict.d_mad,
        "failures": failures,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(if verdict.kind.is_bug() { EXIT_BUGS } else { 0 })
}

fn cmd_report(dir: &Path) -> Result<u8> {
    let report = dir.join("bugs/report.json");
    let text = std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
    let records: Vec<BugRecord> = serde_json::from_str(&text)?;
    let csv = std::fs::read_to_string(dir.join("coverage.csv")).unwrap_or_default();
    if let Some(row) = csv.lines().skip(1).filter_map(CoverageRow::parse).last() {
        println!(
            "iterations {} time {:.1}s input {:.3} param {:.3} sequence {:.3} paths {}",
            row.iteration, row.timestamp, row.cov_input, row.cov_param, row.cov_sequence, row.behavior_paths
        );
    }
    println!("{} unique bugs", records.len());
    for r in &records {
        println!(
            "  [{}] {} (iteration {}, model {})",
            r.verdict.as_str(),
            r.key,
            r.iteration,
            r.model.as_deref().unwrap_or("-")
        );
    }
    Ok(if records.is_empty() { 0 } else { EXIT_BUGS })
}

fn cmd_list_faults() -> u8 {
    for (_, id, description, verdict, kind) in FAULTS {
        println!("{id}\t{verdict}\t{kind}\t{description}");
    }
    0
}

fn cmd_serve(registry: &Registry, id: &str, abort_on_execute: bool) -> Result<u8> {
    let mut backend = builtin_backend(id).map_err(anyhow::Error::msg)?;
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    if abort_on_execute {
        let mut tripwire = Tripwire(backend);
        bridge::serve(&mut tripwire, registry, stdin, stdout)?;
    } else {
        bridge::serve(backend.as_mut(), registry, stdin, stdout)?;
    }
    Ok(0)
}

/// Dies on the first execute, standing in for a host library that aborts.
struct Tripwire(Box<dyn layerfuzz::difftest::Backend>);

impl layerfuzz::difftest::Backend for Tripwire {
    fn id(&self) -> String {
        self.0.id()
    }

    fn build(&mut self, graph: &layerfuzz::graph::ModelGraph) -> Result<layerfuzz::difftest::Handle, layerfuzz::difftest::Failure> {
        self.0.build(graph)
    }

    fn execute(
        &mut self,
        _: layerfuzz::difftest::Handle,
        _: &[layerfuzz::tensor::ValueTensor],
    ) -> Result<layerfuzz::difftest::Execution, layerfuzz::difftest::Failure> {
        std::process::abort()
    }
}

fn run(cli: Cli) -> Result<u8> {
    let registry = load_registry(cli.registry.as_deref())?;
    match cli.command {
        Command::Synthesize {
            models,
            out,
            seed,
            budget,
        } => cmd_synthesize(&registry, &models, &out, seed, budget),
        Command::Fuzz {
            config,
            seed,
            budget,
            backends,
            out,
            fault,
            no_synthesis,
            max_iterations,
            selection,
        } => cmd_fuzz(
            &registry,
            config.as_deref(),
            seed,
            budget,
            backends,
            &out,
            fault.as_deref(),
            no_synthesis,
            max_iterations,
            selection,
        ),
        Command::Replay {
            model,
            backends,
            fault,
            threshold,
        } => cmd_replay(&registry, &model, backends, fault.as_deref(), threshold),
        Command::Report { dir } => cmd_report(&dir),
        Command::ListFaults => Ok(cmd_list_faults()),
        Command::ServeBackend { id, abort_on_execute } => cmd_serve(&registry, &id, abort_on_execute),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
