//! Layer input, parameter and sequence coverage, plus behavior paths.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dtype::DTypeLabel;
use crate::graph::{ModelGraph, NodeId, Source};
use crate::registry::{ParamKind, Registry, RegistryError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub n_type: usize,
    pub n_shape: usize,
    pub sigma: usize,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            n_type: 6,
            n_shape: 5,
            sigma: 5,
        }
    }
}

/// Observed input and parameter values for one compute kind.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindDiversity {
    pub dtypes: BTreeSet<DTypeLabel>,
    pub ranks: BTreeSet<usize>,
    pub shapes: BTreeSet<String>,
    pub params: BTreeMap<String, BTreeSet<String>>,
}

/// One element of the input (D_i), parameter (D_p) or sequence (D_s) sets.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "item", rename_all = "snake_case")]
pub enum DiversityItem {
    Dtype { kind: String, dtype: DTypeLabel },
    Rank { kind: String, rank: usize },
    Shape { kind: String, shape: String },
    Param { kind: String, param: String, value: String },
    Sequence { from: String, to: String },
}

impl DiversityItem {
    pub fn is_input(&self) -> bool {
        matches!(
            self,
            DiversityItem::Dtype { .. } | DiversityItem::Rank { .. } | DiversityItem::Shape { .. }
        )
    }

    pub fn is_param(&self) -> bool {
        matches!(self, DiversityItem::Param { .. })
    }

    pub fn is_sequence(&self) -> bool {
        matches!(self, DiversityItem::Sequence { .. })
    }

    /// Kind the item belongs to (the consumer for sequences).
    pub fn kind(&self) -> &str {
        match self {
            DiversityItem::Dtype { kind, .. }
            | DiversityItem::Rank { kind, .. }
            | DiversityItem::Shape { kind, .. }
            | DiversityItem::Param { kind, .. } => kind,
            DiversityItem::Sequence { to, .. } => to,
        }
    }
}

impl fmt::Display for DiversityItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiversityItem::Dtype { kind, dtype } => write!(f, "{kind}:dtype={dtype}"),
            DiversityItem::Rank { kind, rank } => write!(f, "{kind}:rank={rank}"),
            DiversityItem::Shape { kind, shape } => write!(f, "{kind}:shape={shape}"),
            DiversityItem::Param { kind, param, value } => write!(f, "{kind}:{param}={value}"),
            DiversityItem::Sequence { from, to } => write!(f, "{from}->{to}"),
        }
    }
}

/// Union of everything observed so far. All sets only grow.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversitySnapshot {
    pub kinds: BTreeMap<String, KindDiversity>,
    pub sequences: BTreeSet<(String, String)>,
}

impl DiversitySnapshot {
    pub fn kind(&self, kind: &str) -> Option<&KindDiversity> {
        self.kinds.get(kind)
    }

    pub fn insert(&mut self, item: &DiversityItem) -> bool {
        match item {
            DiversityItem::Dtype { kind, dtype } => {
                self.kinds.entry(kind.clone()).or_default().dtypes.insert(*dtype)
            }
            DiversityItem::Rank { kind, rank } => {
                self.kinds.entry(kind.clone()).or_default().ranks.insert(*rank)
            }
            DiversityItem::Shape { kind, shape } => self
                .kinds
                .entry(kind.clone())
                .or_default()
                .shapes
                .insert(shape.clone()),
            DiversityItem::Param { kind, param, value } => self
                .kinds
                .entry(kind.clone())
                .or_default()
                .params
                .entry(param.clone())
                .or_default()
                .insert(value.clone()),
            DiversityItem::Sequence { from, to } => {
                self.sequences.insert((from.clone(), to.clone()))
            }
        }
    }

    pub fn contains(&self, item: &DiversityItem) -> bool {
        match item {
            DiversityItem::Sequence { from, to } => {
                self.sequences.contains(&(from.clone(), to.clone()))
            }
            _ => {
                let Some(k) = self.kinds.get(item.kind()) else {
                    return false;
                };
                match item {
                    DiversityItem::Dtype { dtype, .. } => k.dtypes.contains(dtype),
                    DiversityItem::Rank { rank, .. } => k.ranks.contains(rank),
                    DiversityItem::Shape { shape, .. } => k.shapes.contains(shape),
                    DiversityItem::Param { param, value, .. } => {
                        k.params.get(param).is_some_and(|s| s.contains(value))
                    }
                    DiversityItem::Sequence { .. } => unreachable!(),
                }
            }
        }
    }

    /// Every item, in a stable order.
    pub fn items(&self) -> BTreeSet<DiversityItem> {
        let mut out = BTreeSet::new();
        for (kind, k) in &self.kinds {
            for d in &k.dtypes {
                out.insert(DiversityItem::Dtype {
                    kind: kind.clone(),
                    dtype: *d,
                });
            }
            for r in &k.ranks {
                out.insert(DiversityItem::Rank {
                    kind: kind.clone(),
                    rank: *r,
                });
            }
            for s in &k.shapes {
                out.insert(DiversityItem::Shape {
                    kind: kind.clone(),
                    shape: s.clone(),
                });
            }
            for (p, vals) in &k.params {
                for v in vals {
                    out.insert(DiversityItem::Param {
                        kind: kind.clone(),
                        param: p.clone(),
                        value: v.clone(),
                    });
                }
            }
        }
        for (a, b) in &self.sequences {
            out.insert(DiversityItem::Sequence {
                from: a.clone(),
                to: b.clone(),
            });
        }
        out
    }

    pub fn merge(&mut self, other: &DiversitySnapshot) {
        for item in other.items() {
            self.insert(&item);
        }
    }

    /// Items of `self` absent from `other`.
    pub fn difference(&self, other: &DiversitySnapshot) -> BTreeSet<DiversityItem> {
        self.items()
            .into_iter()
            .filter(|i| !other.contains(i))
            .collect()
    }

    pub fn is_superset_of(&self, other: &DiversitySnapshot) -> bool {
        other.difference(self).is_empty()
    }

    pub fn count(&self) -> (usize, usize, usize) {
        let items = self.items();
        (
            items.iter().filter(|i| i.is_input()).count(),
            items.iter().filter(|i| i.is_param()).count(),
            self.sequences.len(),
        )
    }
}

/// Nearest compute producers of `src`, looking through utility nodes.
pub fn compute_producers(graph: &ModelGraph, registry: &Registry, src: Source) -> Vec<NodeId> {
    let mut out = Vec::new();
    let mut stack = vec![src];
    let mut seen = BTreeSet::new();
    while let Some(s) = stack.pop() {
        let Some(id) = s.node_id() else { continue };
        if !seen.insert(id) {
            continue;
        }
        let Some(node) = graph.node(id) else { continue };
        if registry.is_utility(&node.kind) {
            stack.extend(node.inputs.iter().rev().copied());
        } else {
            out.push(id);
        }
    }
    out
}

/// Diversity sets of a single graph. Specs must be inferred.
pub fn collect_diversity(graph: &ModelGraph, registry: &Registry) -> DiversitySnapshot {
    let mut snap = DiversitySnapshot::default();
    for node in graph.nodes.values() {
        let Ok(schema) = registry.schema(&node.kind) else {
            continue;
        };
        if schema.is_utility {
            continue;
        }
        let k = snap.kinds.entry(node.kind.clone()).or_default();
        for src in &node.inputs {
            if let Some(spec) = graph.spec_of(*src) {
                k.dtypes.insert(spec.dtype);
                k.ranks.insert(spec.rank());
                k.shapes.insert(spec.shape_key());
            }
        }
        for p in schema.params.iter().filter(|p| p.kind != ParamKind::Shape) {
            if let Some(v) = node.params.get(&p.name) {
                k.params
                    .entry(p.name.clone())
                    .or_default()
                    .insert(v.canonical());
            }
        }
        for src in &node.inputs {
            for pred in compute_producers(graph, registry, *src) {
                let a = &graph.nodes[&pred].kind;
                if registry.valid_sequence(a, &node.kind).unwrap_or(false) {
                    snap.sequences.insert((a.clone(), node.kind.clone()));
                }
            }
        }
    }
    snap
}

/// Input coverage of one kind.
pub fn cov_input(
    kind: &str,
    snap: &DiversitySnapshot,
    config: &CoverageConfig,
    registry: &Registry,
) -> Result<f64, RegistryError> {
    let schema = registry.schema(kind)?;
    let denom = config.n_type + schema.n_dim() + config.n_shape;
    let Some(k) = snap.kind(kind) else {
        return Ok(0.0);
    };
    let ranks = k
        .ranks
        .iter()
        .filter(|r| schema.accepted_input_ranks.contains(r))
        .count();
    let num = k.dtypes.len().min(config.n_type) + ranks + k.shapes.len().min(config.n_shape);
    Ok(num as f64 / denom as f64)
}

/// Parameter coverage of one kind; kinds without parameters report 1.
pub fn cov_param(
    kind: &str,
    snap: &DiversitySnapshot,
    config: &CoverageConfig,
    registry: &Registry,
) -> Result<f64, RegistryError> {
    let schema = registry.schema(kind)?;
    let mut num = 0;
    let mut denom = 0;
    for p in schema.mutable_params() {
        let n = p.space_size(config.sigma);
        let covered = snap
            .kind(kind)
            .and_then(|k| k.params.get(&p.name))
            .map_or(0, BTreeSet::len);
        num += covered.min(n);
        denom += n;
    }
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / denom as f64)
}

pub fn cov_sequence(snap: &DiversitySnapshot, registry: &Registry) -> f64 {
    let space = registry.sequence_space_size();
    if space == 0 {
        return 0.0;
    }
    let covered = snap
        .sequences
        .iter()
        .filter(|(a, b)| registry.valid_sequence(a, b).unwrap_or(false))
        .count();
    covered as f64 / space as f64
}

/// Unweighted means of input and parameter coverage over compute kinds.
pub fn mean_coverage(snap: &DiversitySnapshot, config: &CoverageConfig, registry: &Registry) -> (f64, f64) {
    let kinds: Vec<&str> = registry.compute_kinds().map(|s| s.kind.as_str()).collect();
    if kinds.is_empty() {
        return (0.0, 0.0);
    }
    let n = kinds.len() as f64;
    let ci: f64 = kinds
        .iter()
        .map(|k| cov_input(k, snap, config, registry).unwrap_or(0.0))
        .sum();
    let cp: f64 = kinds
        .iter()
        .map(|k| cov_param(k, snap, config, registry).unwrap_or(0.0))
        .sum();
    (ci / n, cp / n)
}

/// Items of `graph` not yet in `cumulative`. Shapes only count while the
/// kind is below the `n_shape` cap, since further shapes add no coverage.
pub fn diversity_gain(
    graph: &ModelGraph,
    registry: &Registry,
    cumulative: &DiversitySnapshot,
    config: &CoverageConfig,
) -> BTreeSet<DiversityItem> {
    collect_diversity(graph, registry)
        .difference(cumulative)
        .into_iter()
        .filter(|item| match item {
            DiversityItem::Shape { kind, .. } => {
                cumulative.kind(kind).map_or(0, |k| k.shapes.len()) < config.n_shape
            }
            _ => true,
        })
        .collect()
}

/// Backend-reported behavior paths seen so far.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorCoverage {
    pub covered_paths: BTreeSet<String>,
}

impl BehaviorCoverage {
    /// Unions `paths` in; true when at least one was new.
    pub fn record<'a>(&mut self, paths: impl IntoIterator<Item = &'a String>) -> bool {
        let mut new = false;
        for p in paths {
            if !self.covered_paths.contains(p) {
                self.covered_paths.insert(p.clone());
                new = true;
            }
        }
        new
    }

    pub fn len(&self) -> usize {
        self.covered_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covered_paths.is_empty()
    }
}

pub fn record_behavior(paths: &BTreeSet<String>, cumulative: &BehaviorCoverage) -> (bool, BehaviorCoverage) {
    let mut next = cumulative.clone();
    let new = next.record(paths);
    (new, next)
}

/// One row of the coverage growth curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub timestamp: f64,
    pub iteration: u64,
    pub cov_input: f64,
    pub cov_param: f64,
    pub cov_sequence: f64,
    pub behavior_paths: usize,
}

impl CoverageRow {
    pub const HEADER: &'static str = "timestamp,iteration,cov_input,cov_param,cov_sequence,behavior_paths";

    pub fn to_csv(&self) -> String {
        format!(
            "{:.3},{},{:.6},{:.6},{:.6},{}",
            self.timestamp,
            self.iteration,
            self.cov_input,
            self.cov_param,
            self.cov_sequence,
            self.behavior_paths
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(CoverageRow {
            timestamp: f[0].parse().ok()?,
            iteration: f[1].parse().ok()?,
            cov_input: f[2].parse().ok()?,
            cov_param: f[3].parse().ok()?,
            cov_sequence: f[4].parse().ok()?,
            behavior_paths: f[5].parse().ok()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::infer_specs;
    use crate::tensor::TensorSpec;

    fn chain(kinds: &[&str], input: &[usize]) -> ModelGraph {
        let reg = Registry::builtin();
        let mut g = ModelGraph::new(input[0], 0, vec![TensorSpec::new(DTypeLabel::Float32, input.to_vec())]);
        let mut prev = Source::input(0);
        for k in kinds {
            let id = g.add_node(*k, reg.schema(k).unwrap().default_params(), vec![prev], DTypeLabel::Float32);
            prev = Source::node(id);
        }
        g.outputs.push(prev);
        infer_specs(&mut g, &reg).unwrap();
        g
    }

    #[test]
    fn single_conv_has_no_pairs() {
        let reg = Registry::builtin();
        let snap = collect_diversity(&chain(&["Conv2D"], &[2, 8, 8, 3]), &reg);
        let k = snap.kind("Conv2D").unwrap();
        assert_eq!(k.dtypes.iter().collect::<Vec<_>>(), vec![&DTypeLabel::Float32]);
        assert_eq!(k.shapes.iter().collect::<Vec<_>>(), vec!["2x8x8x3"]);
        assert!(snap.sequences.is_empty());
    }

    #[test]
    fn utility_nodes_are_transparent() {
        let reg = Registry::builtin();
        let mut g = chain(&["Conv2D"], &[2, 8, 8, 3]);
        let mut p = reg.schema("Cast").unwrap().default_params();
        p.insert("dtype".into(), crate::registry::ParamValue::Str("float64".into()));
        let cast = g.add_node("Cast", p, vec![Source::node(NodeId(1))], DTypeLabel::Float32);
        let relu = g.add_node(
            "ReLU",
            reg.schema("ReLU").unwrap().default_params(),
            vec![Source::node(cast)],
            DTypeLabel::Float64,
        );
        g.outputs = vec![Source::node(relu)];
        infer_specs(&mut g, &reg).unwrap();
        let snap = collect_diversity(&g, &reg);
        assert_eq!(
            snap.sequences.iter().cloned().collect::<Vec<_>>(),
            vec![("Conv2D".to_string(), "ReLU".to_string())]
        );
    }

    #[test]
    fn gain_is_pure_and_idempotent() {
        let reg = Registry::builtin();
        let cfg = CoverageConfig::default();
        let g = chain(&["Dense", "Softmax"], &[2, 4]);
        let empty = DiversitySnapshot::default();
        let a = diversity_gain(&g, &reg, &empty, &cfg);
        let b = diversity_gain(&g, &reg, &empty, &cfg);
        assert_eq!(a, b);
        assert!(a.contains(&DiversityItem::Sequence {
            from: "Dense".into(),
            to: "Softmax".into()
        }));
        let mut cum = empty.clone();
        cum.merge(&collect_diversity(&g, &reg));
        assert!(diversity_gain(&g, &reg, &cum, &cfg).is_empty());
    }

    #[test]
    fn behavior_recording() {
        let cov = BehaviorCoverage::default();
        let (new, cov) = record_behavior(&["a".to_string()].into(), &cov);
        assert!(new);
        let (new, cov2) = record_behavior(&["a".to_string()].into(), &cov);
        assert!(!new);
        assert_eq!(cov, cov2);
        let (new, _) = record_behavior(&BTreeSet::new(), &cov);
        assert!(!new);
    }

    #[test]
    fn csv_row_round_trip() {
        let row = CoverageRow {
            timestamp: 1.5,
            iteration: 3,
            cov_input: 0.25,
            cov_param: 0.5,
            cov_sequence: 0.125,
            behavior_paths: 7,
        };
        assert_eq!(CoverageRow::parse(&row.to_csv()), Some(row));
    }
}
