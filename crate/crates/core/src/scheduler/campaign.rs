//! The campaign loop and its artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{
    collect_diversity, cov_sequence, diversity_gain, mean_coverage, BehaviorCoverage, CoverageConfig,
    CoverageRow, DiversitySnapshot,
};
use crate::difftest::{analyze, builtin_backend, open_backend, run_differential, Backend, Deduplicator, Execution, Failure, Handle, Verdict};
use crate::graph::{load_model, save_model, validate, ModelGraph};
use crate::mutation::{MutationConfig, MutationError, MutationKind, Mutator};
use crate::registry::Registry;
use crate::rng::derive;
use crate::synthesis::{synthesize, SynthesisConfig};
use crate::tensor::ValueTensor;
use crate::zoo;

use super::{score, select_operator, ModelPool, SchedulerStats};

// The virtual clock charges a fixed cost per mutation and per backend
// execution plus a cost per multiply-add. Bug triage (localization and
// override bisection) is not charged.

/// Virtual seconds charged per mutation attempt.
pub const MUTATE_COST: f64 = 0.01;
/// Virtual seconds charged per backend build-and-execute.
pub const EXEC_COST: f64 = 0.02;
/// Virtual seconds charged per multiply-add reported by a backend.
pub const WORK_COST: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Metropolis-Hastings over fitness-sorted operators.
    Mcmc,
    /// Uniform operator choice, for comparison.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Budget measured by a deterministic cost model; runs are replayable.
    Virtual,
    /// Budget measured in elapsed real time.
    Wall,
}

fn default_budget() -> f64 {
    600.0
}
fn default_lambda() -> f64 {
    0.5
}
fn default_p() -> f64 {
    0.4
}
fn default_pool() -> usize {
    50
}
fn default_five() -> usize {
    5
}
fn default_threshold() -> f64 {
    0.4
}
fn default_backends() -> Vec<String> {
    vec!["eager".into(), "fused".into()]
}
fn default_seeds() -> Vec<String> {
    zoo::NAMES.iter().map(|n| format!("zoo:{n}")).collect()
}
fn default_true() -> bool {
    true
}
fn default_selection() -> Selection {
    Selection::Mcmc
}
fn default_clock() -> Clock {
    Clock::Virtual
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    #[serde(default = "default_budget")]
    pub time_budget_seconds: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_pool")]
    pub pool_capacity: usize,
    #[serde(default = "default_five")]
    pub sigma: usize,
    #[serde(default = "default_five")]
    pub n_shape: usize,
    #[serde(rename = "T", default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_backends")]
    pub backends: Vec<String>,
    #[serde(default = "default_seeds")]
    pub initial_seeds: Vec<String>,
    #[serde(default = "default_true")]
    pub synthesize_first: bool,
    #[serde(default = "default_selection")]
    pub selection: Selection,
    #[serde(default = "default_clock")]
    pub clock: Clock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
    #[serde(default)]
    pub stop_on_first_bug: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks ranges and backend ids. Returns warnings for values outside
    /// the recommended ranges.
    pub fn check(&self) -> Result<Vec<String>, ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !self.time_budget_seconds.is_finite() || self.time_budget_seconds < 0.0 {
            return bad(format!("time_budget_seconds must be >= 0, got {}", self.time_budget_seconds));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad(format!("p must lie in (0, 1), got {}", self.p));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad(format!("T must lie in (0, 1], got {}", self.threshold));
        }
        if self.pool_capacity == 0 || self.sigma == 0 || self.n_shape == 0 {
            return bad("pool_capacity, sigma and n_shape must be positive".into());
        }
        if self.backends.len() < 2 {
            return bad("at least two backends are needed for differential testing".into());
        }
        for b in &self.backends {
            if !b.starts_with("bridge:") {
                builtin_backend(b).map_err(ConfigError::Invalid)?;
            }
        }
        if self.initial_seeds.is_empty() {
            return bad("initial_seeds is empty".into());
        }
        let mut warnings = Vec::new();
        if !(0.313..=0.598).contains(&self.p) {
            warnings.push(format!("p = {} is outside the recommended range [0.313, 0.598]", self.p));
        }
        Ok(warnings)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("seed `{0}`: {1}")]
    Seed(String, String),
    #[error("backend `{0}`: {1}")]
    Backend(String, String),
    #[error("artifact i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Loads `zoo:<name>` or a model-exchange document path.
pub fn load_seed(spec: &str, registry: &Registry) -> Result<ModelGraph, CampaignError> {
    let g = match spec.strip_prefix("zoo:") {
        Some(name) => zoo::model(name, registry)
            .ok_or_else(|| CampaignError::Seed(spec.into(), format!("no zoo model named `{name}`")))?,
        None => load_model(Path::new(spec), registry).map_err(|e| CampaignError::Seed(spec.into(), e.to_string()))?,
    };
    validate(&g, registry).map_err(|v| {
        CampaignError::Seed(
            spec.into(),
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "),
        )
    })?;
    Ok(g)
}

#[derive(Default)]
struct Meter {
    runs: AtomicU64,
    work: AtomicU64,
}

/// Counts executions so the virtual clock can charge for them.
struct Metered {
    inner: Box<dyn Backend>,
    meter: Arc<Meter>,
}

impl Backend for Metered {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn build(&mut self, graph: &ModelGraph) -> Result<Handle, Failure> {
        self.inner.build(graph)
    }

    fn execute(&mut self, handle: Handle, inputs: &[ValueTensor]) -> Result<Execution, Failure> {
        self.meter.runs.fetch_add(1, Ordering::Relaxed);
        let r = self.inner.execute(handle, inputs);
        if let Ok(e) = &r {
            self.meter.work.fetch_add(e.work, Ordering::Relaxed);
        }
        r
    }

    fn release(&mut self, handle: Handle) {
        self.inner.release(handle)
    }
}

fn make_backends(config: &CampaignConfig, registry: &Registry, meter: &Arc<Meter>) -> Result<Vec<Box<dyn Backend>>, CampaignError> {
    let mut out: Vec<Box<dyn Backend>> = Vec::new();
    for id in &config.backends {
        let inner = open_backend(id, registry).map_err(|e| CampaignError::Backend(id.clone(), e))?;
        out.push(Box::new(Metered {
            inner,
            meter: meter.clone(),
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Artifacts directory; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Set from outside to stop after the current iteration.
    pub stop: Option<Arc<AtomicBool>>,
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub iterations: u64,
    pub rows: Vec<CoverageRow>,
    pub bugs: Deduplicator,
    pub stats: SchedulerStats,
    /// How often each operator was selected.
    pub selections: [u64; 8],
    pub invalid_mutants: u64,
    pub not_applicable: u64,
    /// Mutants every backend rejected.
    pub invalid_models: u64,
    pub pool_size: usize,
    pub elapsed_seconds: f64,
    pub diversity: DiversitySnapshot,
    pub behavior: BehaviorCoverage,
    pub stopped_early: bool,
}

impl CampaignResult {
    pub fn final_row(&self) -> Option<&CoverageRow> {
        self.rows.last()
    }
}

struct Artifacts {
    dir: PathBuf,
    csv: BufWriter<File>,
    log: BufWriter<File>,
    saved_models: u64,
}

impl Artifacts {
    fn create(dir: &Path, config: &CampaignConfig) -> std::io::Result<Self> {
        fs::create_dir_all(dir.join("models"))?;
        fs::create_dir_all(dir.join("bugs"))?;
        fs::write(dir.join("config-snapshot.toml"), config.to_toml())?;
        let mut csv = BufWriter::new(File::create(dir.join("coverage.csv"))?);
        writeln!(csv, "{}", CoverageRow::HEADER)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            csv,
            log: BufWriter::new(File::create(dir.join("campaign.log"))?),
            saved_models: 0,
        })
    }

    fn row(&mut self, row: &CoverageRow) -> std::io::Result<()> {
        writeln!(self.csv, "{}", row.to_csv())?;
        self.csv.flush()
    }

    fn log(&mut self, line: &str) -> std::io::Result<()> {
        writeln!(self.log, "{line}")
    }

    fn save_model(&mut self, sub: &str, name: &str, g: &ModelGraph, registry: &Registry) -> std::io::Result<String> {
        let rel = format!("{sub}/{name}.json");
        save_model(g, registry, &self.dir.join(&rel)).map_err(|e| std::io::Error::other(e.to_string()))?;
        self.saved_models += 1;
        Ok(rel)
    }

    fn write_report(&mut self, bugs: &Deduplicator) -> std::io::Result<()> {
        let records: Vec<_> = bugs.records.values().collect();
        let text = serde_json::to_string_pretty(&records).expect("records serialize");
        fs::write(self.dir.join("bugs/report.json"), text)?;
        self.log.flush()
    }
}

struct Clocked {
    kind: Clock,
    start: Instant,
    virtual_seconds: f64,
    meter: Arc<Meter>,
    last_runs: u64,
    last_work: u64,
}

impl Clocked {
    fn charge(&mut self, fixed: f64) {
        let runs = self.meter.runs.load(Ordering::Relaxed);
        let work = self.meter.work.load(Ordering::Relaxed);
        self.virtual_seconds += fixed
            + (runs - self.last_runs) as f64 * EXEC_COST
            + (work - self.last_work) as f64 * WORK_COST;
        self.last_runs = runs;
        self.last_work = work;
    }

    /// Forgets executions since the last charge, for work that stands in
    /// for offline triage.
    fn discard(&mut self) {
        self.last_runs = self.meter.runs.load(Ordering::Relaxed);
        self.last_work = self.meter.work.load(Ordering::Relaxed);
    }

    fn now(&self) -> f64 {
        match self.kind {
            Clock::Virtual => self.virtual_seconds,
            Clock::Wall => self.start.elapsed().as_secs_f64(),
        }
    }
}

fn coverage_row(
    t: f64,
    iteration: u64,
    snap: &DiversitySnapshot,
    behavior: &BehaviorCoverage,
    cov: &CoverageConfig,
    registry: &Registry,
) -> CoverageRow {
    let (ci, cp) = mean_coverage(snap, cov, registry);
    CoverageRow {
        timestamp: t,
        iteration,
        cov_input: ci,
        cov_param: cp,
        cov_sequence: cov_sequence(snap, registry),
        behavior_paths: behavior.len(),
    }
}

/// Runs one campaign. Deterministic for a fixed config under the virtual
/// clock with built-in backends.
pub fn run_campaign(config: &CampaignConfig, registry: &Registry, options: &RunOptions) -> Result<CampaignResult, CampaignError> {
    config.check()?;
    let cov = CoverageConfig {
        n_shape: config.n_shape,
        sigma: config.sigma,
        ..CoverageConfig::default()
    };
    let mut seeds = Vec::new();
    for s in &config.initial_seeds {
        seeds.push((s.clone(), load_seed(s, registry)?));
    }
    let meter = Arc::new(Meter::default());
    let mut backends = make_backends(config, registry, &meter)?;
    let mut artifacts = match &options.out_dir {
        Some(d) => Some(Artifacts::create(d, config)?),
        None => None,
    };
    let mut rng = derive(config.rng_seed, "campaign");
    if config.synthesize_first {
        let syn_cfg = SynthesisConfig::default();
        for (name, g) in &mut seeds {
            let mut srng = derive(config.rng_seed, &format!("synthesis:{name}"));
            match synthesize(g, registry, &syn_cfg, &mut srng) {
                Ok((s, report)) => {
                    if let Some(a) = &mut artifacts {
                        a.log(&format!(
                            "synthesized {name}: {} -> {} nodes, residual {}",
                            report.original_stats.nodes,
                            report.synthesized_stats.nodes,
                            report.residual.len()
                        ))?;
                    }
                    if report.residual.is_empty() {
                        *g = s;
                    }
                }
                Err(e) => {
                    if let Some(a) = &mut artifacts {
                        a.log(&format!("synthesis of {name} failed: {e}; keeping original"))?;
                    }
                }
            }
        }
    }

    let mut clock = Clocked {
        kind: config.clock,
        start: Instant::now(),
        virtual_seconds: 0.0,
        meter,
        last_runs: 0,
        last_work: 0,
    };
    let mut pool = ModelPool::new(config.pool_capacity);
    let mut snapshot = DiversitySnapshot::default();
    let mut behavior = BehaviorCoverage::default();
    let mut bugs = Deduplicator::default();
    let mut stats = SchedulerStats::default();
    let mut selections = [0u64; 8];
    let (mut invalid_mutants, mut not_applicable, mut invalid_models) = (0, 0, 0);
    let mut rows = Vec::new();

    let handle_verdict = |g: &ModelGraph,
                              verdict: &Verdict,
                              iteration: u64,
                              backends: &mut [Box<dyn Backend>],
                              bugs: &mut Deduplicator,
                              artifacts: &mut Option<Artifacts>|
     -> Result<bool, CampaignError> {
        if !verdict.kind.is_bug() {
            return Ok(false);
        }
        let mut record = analyze(g, registry, verdict, backends, config.threshold, iteration);
        if bugs.contains(&record.key) {
            bugs.observed += 1;
            return Ok(false);
        }
        if let Some(a) = artifacts {
            let name = format!("bug-{:04}", bugs.len() + 1);
            record.model = Some(a.save_model("bugs", &name, g, registry)?);
            a.log(&format!("iter {iteration}: new bug {} ({})", record.key, name))?;
        }
        bugs.observe(record);
        if let Some(a) = artifacts {
            a.write_report(bugs)?;
        }
        Ok(true)
    };

    for (i, (name, g)) in seeds.iter().enumerate() {
        snapshot.merge(&collect_diversity(g, registry));
        let verdict = run_differential(g, &mut backends, config.threshold);
        behavior.record(&verdict.behavior);
        clock.charge(0.0);
        handle_verdict(g, &verdict, 0, &mut backends, &mut bugs, &mut artifacts)?;
        clock.discard();
        if let Some(a) = &mut artifacts {
            a.save_model("models", &format!("seed-{i:02}"), g, registry)?;
            a.log(&format!("seed {name}: {}", verdict.kind.as_str()))?;
        }
        pool.insert(g.clone(), &mut rng);
    }
    clock.charge(0.0);
    let row = coverage_row(clock.now(), 0, &snapshot, &behavior, &cov, registry);
    if let Some(a) = &mut artifacts {
        a.row(&row)?;
    }
    rows.push(row);

    let mutator = Mutator::with_config(
        registry,
        MutationConfig {
            n_shape: config.n_shape,
            ..MutationConfig::default()
        },
    );
    let mut k1 = 1usize;
    let mut iteration = 0u64;
    let mut stopped_early = false;
    loop {
        if clock.now() >= config.time_budget_seconds {
            break;
        }
        if config.max_iterations.is_some_and(|m| iteration >= m) {
            break;
        }
        if options.stop.as_ref().is_some_and(|s| s.load(Ordering::SeqCst)) {
            stopped_early = true;
            break;
        }
        if config.stop_on_first_bug && !bugs.is_empty() {
            break;
        }
        iteration += 1;
        let op = match config.selection {
            Selection::Mcmc => {
                let (op, k) = select_operator(&stats, k1, config.p, &mut rng);
                k1 = k;
                op
            }
            Selection::Random => MutationKind::ALL[rng.gen_range(0..MutationKind::ALL.len())],
        };
        selections[op.index()] += 1;
        let seed = pool.choose(&mut rng).expect("pool holds the seeds").clone();
        let line = match mutator.apply(op, &seed, &snapshot, &mut rng) {
            Err(e) => {
                match e {
                    MutationError::InvalidMutant(_) => invalid_mutants += 1,
                    _ => not_applicable += 1,
                }
                stats.record(op, 0.0);
                format!("iter {iteration}: {op} failed: {e}")
            }
            Ok(outcome) => {
                let m = outcome.mutant;
                let diverse = !diversity_gain(&m, registry, &snapshot, &cov).is_empty();
                let verdict = run_differential(&m, &mut backends, config.threshold);
                if verdict.kind == crate::difftest::VerdictKind::Invalid {
                    invalid_models += 1;
                }
                let branch = behavior.record(&verdict.behavior);
                let s = score(diverse, branch, config.lambda);
                stats.record(op, s);
                snapshot.merge(&collect_diversity(&m, registry));
                clock.charge(0.0);
                let new_bug = handle_verdict(&m, &verdict, iteration, &mut backends, &mut bugs, &mut artifacts)?;
                clock.discard();
                let admitted = s > 0.0;
                if admitted {
                    if let Some(a) = &mut artifacts {
                        a.save_model("models", &format!("m{iteration:06}"), &m, registry)?;
                    }
                }
                pool.offer(m, s, &mut rng);
                format!(
                    "iter {iteration}: {op} score={s} verdict={}{}{}{}",
                    verdict.kind.as_str(),
                    verdict.d_mad.map(|d| format!(" d_mad={d:.4}")).unwrap_or_default(),
                    if admitted { " admitted" } else { "" },
                    if new_bug { " new-bug" } else { "" }
                )
            }
        };
        clock.charge(MUTATE_COST);
        let row = coverage_row(clock.now(), iteration, &snapshot, &behavior, &cov, registry);
        if let Some(a) = &mut artifacts {
            a.log(&line)?;
            a.row(&row)?;
        }
        rows.push(row);
    }

    if let Some(a) = &mut artifacts {
        a.log(&format!(
            "done: {iteration} iterations, {} unique bugs, {invalid_mutants} invalid mutants{}",
            bugs.len(),
            if stopped_early { ", stopped early" } else { "" }
        ))?;
        a.write_report(&bugs)?;
    }
    Ok(CampaignResult {
        iterations: iteration,
        rows,
        bugs,
        stats,
        selections,
        invalid_mutants,
        not_applicable,
        invalid_models,
        pool_size: pool.len(),
        elapsed_seconds: clock.now(),
        diversity: snapshot,
        behavior,
        stopped_early,
    })
}

/// `run_campaign` writing artifacts to `out`.
pub fn fuzz_to_dir(
    config: &CampaignConfig,
    registry: &Registry,
    out: &Path,
    stop: Option<Arc<AtomicBool>>,
) -> Result<CampaignResult, CampaignError> {
    run_campaign(
        config,
        registry,
        &RunOptions {
            out_dir: Some(out.to_path_buf()),
            stop,
        },
    )
}
