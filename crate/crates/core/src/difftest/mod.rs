//! Backends, verdicts and bug deduplication.

pub mod bridge;
mod dedup;
mod eager;
mod fused;
mod oracle;
mod scalar;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::graph::ModelGraph;
use crate::registry::Registry;
use crate::tensor::ValueTensor;

pub use dedup::{analyze, crash_signature, localize, BugRecord, Deduplicator};
pub use eager::EagerBackend;
pub use fused::{Fault, FusedBackend, FAULTS};
pub use oracle::{
    collapse_outputs, d_mad, pseudo_label, run_differential, BackendOutcome, DmadError, Verdict,
    VerdictKind,
};

/// Opaque reference to a built model inside one backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Handle(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Build,
    Run,
}

/// Backend-side failure with a stack-trace-like text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: Stage,
    pub trace: String,
}

impl Failure {
    pub fn build(trace: impl Into<String>) -> Self {
        Failure {
            stage: Stage::Build,
            trace: trace.into(),
        }
    }

    pub fn run(trace: impl Into<String>) -> Self {
        Failure {
            stage: Stage::Run,
            trace: trace.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stage = match self.stage {
            Stage::Build => "build",
            Stage::Run => "run",
        };
        write!(f, "{stage} failure: {}", self.trace.lines().next().unwrap_or(""))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub outputs: Vec<ValueTensor>,
    /// Internal code paths taken, namespaced by backend.
    pub behavior: BTreeSet<String>,
    /// Rough multiply-add count, used for cost accounting.
    pub work: u64,
}

pub trait Backend: Send {
    fn id(&self) -> String;
    fn build(&mut self, graph: &ModelGraph) -> Result<Handle, Failure>;
    fn execute(&mut self, handle: Handle, inputs: &[ValueTensor]) -> Result<Execution, Failure>;
    fn release(&mut self, _handle: Handle) {}
}

/// Build, execute once and release.
pub fn run_once(
    backend: &mut dyn Backend,
    graph: &ModelGraph,
    inputs: &[ValueTensor],
) -> Result<Execution, Failure> {
    let h = backend.build(graph)?;
    let r = backend.execute(h, inputs);
    backend.release(h);
    r
}

/// Parses a built-in backend id: `eager`, `fused` or `faulty:<fault>`.
pub fn builtin_backend(id: &str) -> Result<Box<dyn Backend>, String> {
    match id {
        "eager" => Ok(Box::new(EagerBackend::new())),
        "fused" => Ok(Box::new(FusedBackend::new(None))),
        other => match other.strip_prefix("faulty:") {
            Some(f) => {
                let fault: Fault = f.parse()?;
                Ok(Box::new(FusedBackend::new(Some(fault))))
            }
            None => Err(format!("unknown backend `{other}`")),
        },
    }
}

/// Opens a built-in backend, or `bridge:<program> [args...]` for one served
/// by a child process.
pub fn open_backend(id: &str, registry: &Registry) -> Result<Box<dyn Backend>, String> {
    let Some(cmd) = id.strip_prefix("bridge:") else {
        return builtin_backend(id);
    };
    let mut parts = cmd.split_whitespace();
    let program = parts.next().ok_or("empty bridge command")?;
    let args: Vec<String> = parts.map(str::to_string).collect();
    let b = bridge::BridgeBackend::spawn(id, std::path::Path::new(program), &args, registry.clone())
        .map_err(|f| f.trace)?;
    Ok(Box::new(b))
}
