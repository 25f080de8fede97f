//! Bug records and deduplication.
//!
//! Crashes are keyed by their normalized trace. NaN and inconsistency
//! verdicts are keyed by the operator kind they localize to plus whether a
//! special-value input override is needed to trigger them.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::coverage::compute_producers;
use crate::graph::{ModelGraph, NodeId, Source};
use crate::registry::Registry;

use super::{run_differential, Backend, Verdict, VerdictKind};

/// Prefix graphs whose D_MAD exceeds this are treated as diverging while
/// localizing an inconsistency. Well above f32 rounding noise.
const LOCALIZE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugRecord {
    pub key: String,
    pub verdict: VerdictKind,
    pub responsible_kind: Option<String>,
    pub responsible_node: Option<NodeId>,
    /// Nodes whose special-value override is required to reproduce.
    pub special_inputs: Vec<NodeId>,
    pub signature: Option<String>,
    pub backends: Vec<String>,
    pub d_mad: Option<f64>,
    pub iteration: u64,
    /// Path of the saved triggering model, relative to the campaign dir.
    pub model: Option<String>,
}

/// Normalizes a failure trace: numbers, node ids and bracketed shapes are
/// replaced so that the same defect on different graphs collapses.
pub fn crash_signature(trace: &str) -> String {
    static PATTERNS: OnceLock<[(Regex, &'static str); 3]> = OnceLock::new();
    let pats = PATTERNS.get_or_init(|| {
        [
            (Regex::new(r"\[[^\]]*\]").expect("regex"), "[..]"),
            (Regex::new(r"\bn\d+\b").expect("regex"), "n#"),
            (Regex::new(r"\d+").expect("regex"), "#"),
        ]
    });
    trace
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            pats.iter()
                .fold(l.to_string(), |s, (re, rep)| re.replace_all(&s, *rep).into_owned())
        })
        .collect::<Vec<_>>()
        .join(" | ")
}

fn prefix(graph: &ModelGraph, id: NodeId) -> Option<ModelGraph> {
    let mut g = graph.clone();
    g.outputs = vec![Source::node(id)];
    g.prune_unreachable();
    let spec = g.nodes.get(&id)?.output_spec.as_ref()?;
    (!spec.has_empty_extent()).then_some(g)
}

fn reproduces(v: &Verdict, kind: VerdictKind) -> bool {
    match kind {
        VerdictKind::Inconsistency => v.kind == kind || v.d_mad.is_some_and(|d| d > LOCALIZE_TOLERANCE),
        k => v.kind == k,
    }
}

/// Earliest node (topological order) whose prefix graph reproduces `kind`.
/// Utility nodes hand the blame to the nearest compute node feeding them.
pub fn localize(
    graph: &ModelGraph,
    registry: &Registry,
    backends: &mut [Box<dyn Backend>],
    threshold: f64,
    kind: VerdictKind,
) -> Option<NodeId> {
    for id in graph.topo_order()? {
        let Some(g) = prefix(graph, id) else { continue };
        if !reproduces(&run_differential(&g, backends, threshold), kind) {
            continue;
        }
        if registry.is_utility(&graph.nodes[&id].kind) {
            if let Some(p) = compute_producers(graph, registry, Source::node(id)).into_iter().next() {
                return Some(p);
            }
        }
        return Some(id);
    }
    None
}

/// Drops special-value overrides one at a time, keeping only those the
/// verdict depends on.
fn needed_overrides(
    graph: &ModelGraph,
    backends: &mut [Box<dyn Backend>],
    threshold: f64,
    kind: VerdictKind,
) -> Vec<NodeId> {
    let mut g = graph.clone();
    let with: Vec<NodeId> = g.nodes.values().filter(|n| n.input_override.is_some()).map(|n| n.id).collect();
    let mut needed = Vec::new();
    for id in with {
        let saved = g.nodes.get_mut(&id).and_then(|n| n.input_override.take());
        if run_differential(&g, backends, threshold).kind != kind {
            if let Some(n) = g.nodes.get_mut(&id) {
                n.input_override = saved;
            }
            needed.push(id);
        }
    }
    needed
}

/// Builds the deduplicated record for a bug verdict on `graph`.
pub fn analyze(
    graph: &ModelGraph,
    registry: &Registry,
    verdict: &Verdict,
    backends: &mut [Box<dyn Backend>],
    threshold: f64,
    iteration: u64,
) -> BugRecord {
    let responsible = localize(graph, registry, backends, threshold, verdict.kind);
    let responsible_kind = responsible.map(|id| graph.nodes[&id].kind.clone());
    let backends_ids: Vec<String> = verdict.outcomes.iter().map(|o| o.backend().to_string()).collect();
    let mut record = BugRecord {
        key: String::new(),
        verdict: verdict.kind,
        responsible_kind: responsible_kind.clone(),
        responsible_node: responsible,
        special_inputs: Vec::new(),
        signature: None,
        backends: backends_ids,
        d_mad: verdict.d_mad,
        iteration,
        model: None,
    };
    match verdict.kind {
        VerdictKind::Crash => {
            let sig = verdict
                .failures()
                .map(|(b, f)| format!("{b}: {}", crash_signature(&f.trace)))
                .collect::<Vec<_>>()
                .join(" || ");
            record.key = format!("crash:{sig}");
            record.signature = Some(sig);
        }
        kind => {
            record.special_inputs = needed_overrides(graph, backends, threshold, kind);
            let class = if record.special_inputs.is_empty() { "" } else { "+special_input" };
            record.key = format!(
                "{}:{}{class}",
                kind.as_str(),
                responsible_kind.as_deref().unwrap_or("unknown")
            );
        }
    }
    record
}

/// Keeps the first record per key.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Deduplicator {
    pub records: BTreeMap<String, BugRecord>,
    /// Bug verdicts seen, duplicates included.
    pub observed: u64,
}

impl Deduplicator {
    /// Returns true when `record` opens a new key.
    pub fn observe(&mut self, record: BugRecord) -> bool {
        self.observed += 1;
        if self.records.contains_key(&record.key) {
            return false;
        }
        self.records.insert(record.key.clone(), record);
        true
    }

    pub fn contains(&self, key: &str) -> bool {
        self.records.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
