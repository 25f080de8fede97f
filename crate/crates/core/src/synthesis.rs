//! Seed synthesis: build a small graph from scratch that covers the input,
//! parameter and sequence diversity of a larger original.
//!
//! Gaps are closed in a fixed priority order. Parameter gaps come first and
//! are filled by inserting a layer configured like an original node. Input
//! gaps come next. They are filled by inserting a copy of a layer of that
//! kind whose input is converted to the missing dtype, rank or shape. Sequence gaps come last.
//! They are filled by connecting a node of the producer kind to a new
//! consumer copy. Consumers of a merging kind take that node on every input.
//!
//! ```
//! use layerfuzz::graph::validate;
//! use layerfuzz::registry::Registry;
//! use layerfuzz::synthesis::{synthesize, SynthesisConfig};
//! use layerfuzz::{rng, zoo};
//!
//! let reg = Registry::builtin();
//! let original = zoo::model("lenet", &reg).unwrap();
//! let (small, report) =
//!     synthesize(&original, &reg, &SynthesisConfig::default(), &mut rng::derive(7, "syn")).unwrap();
//! assert!(report.residual.is_empty());
//! assert!(validate(&small, &reg).is_ok());
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::coverage::{collect_diversity, compute_producers, DiversityItem, DiversitySnapshot};
use crate::dtype::DTypeLabel;
use crate::graph::{infer_specs, validate, weight_shapes, ModelGraph, NodeId, Source};
use crate::mutation::repair::{adapt, add_inferred};
use crate::registry::{ParamValue, Registry};
use crate::tensor::TensorSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisConfig {
    pub time_budget: Duration,
    /// Failed attempts after which a gap is moved to the residual.
    pub attempts_per_gap: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            time_budget: Duration::from_secs(300),
            attempts_per_gap: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub compute_nodes: usize,
    pub weights: usize,
    pub d_i: usize,
    pub d_p: usize,
    pub d_s: usize,
}

impl GraphStats {
    /// Specs must be inferred.
    pub fn of(graph: &ModelGraph, registry: &Registry) -> Self {
        let weights = graph
            .compute_nodes(registry)
            .map(|n| {
                let inputs = graph.input_specs(n.id).unwrap_or_default();
                weight_shapes(n, &inputs)
                    .iter()
                    .map(|s| s.iter().product::<usize>())
                    .sum::<usize>()
            })
            .sum();
        let (d_i, d_p, d_s) = collect_diversity(graph, registry).count();
        GraphStats {
            nodes: graph.nodes.len(),
            compute_nodes: graph.compute_node_count(registry),
            weights,
            d_i,
            d_p,
            d_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthesisReport {
    pub original_stats: GraphStats,
    pub synthesized_stats: GraphStats,
    /// Original items still uncovered when synthesis stopped.
    pub residual: Vec<DiversityItem>,
    /// Seconds.
    pub elapsed: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error("original graph is invalid: {0}")]
    InvalidOriginal(String),
}

/// Configuration of one original compute node.
#[derive(Debug, Clone)]
struct Template {
    kind: String,
    params: BTreeMap<String, ParamValue>,
    dtype: DTypeLabel,
    inputs: Vec<TensorSpec>,
}

impl Template {
    fn covers(&self, item: &DiversityItem) -> bool {
        match item {
            DiversityItem::Param { kind, param, value } => {
                *kind == self.kind && self.params.get(param).is_some_and(|v| v.canonical() == *value)
            }
            DiversityItem::Dtype { kind, dtype } => *kind == self.kind && self.inputs.iter().any(|s| s.dtype == *dtype),
            DiversityItem::Rank { kind, rank } => *kind == self.kind && self.inputs.iter().any(|s| s.rank() == *rank),
            DiversityItem::Shape { kind, shape } => {
                *kind == self.kind && self.inputs.iter().any(|s| s.shape_key() == *shape)
            }
            DiversityItem::Sequence { to, .. } => *to == self.kind,
        }
    }
}

struct Synth<'a> {
    registry: &'a Registry,
    templates: Vec<Template>,
    target: &'a DiversitySnapshot,
}

impl Synth<'_> {
    /// Cost of adapting `src` to `spec`: one per differing property.
    fn cost(g: &ModelGraph, src: Source, spec: &TensorSpec) -> Option<usize> {
        let s = g.spec_of(src)?;
        if s.shape.first() != spec.shape.first() || (s.has_empty_extent() && s != spec) {
            return None;
        }
        Some(usize::from(s.dtype != spec.dtype) + usize::from(s.rank() != spec.rank()) + usize::from(s.shape != spec.shape))
    }

    /// Cheapest tensor to feed `kind`, preferring producers that open a
    /// sequence the original has.
    fn pick_source<R: Rng + ?Sized>(
        &self,
        g: &ModelGraph,
        have: &DiversitySnapshot,
        kind: &str,
        spec: &TensorSpec,
        rng: &mut R,
    ) -> Option<Source> {
        let sources = (0..g.inputs.len())
            .map(Source::input)
            .chain(g.nodes.keys().map(|id| Source::node(*id)));
        let mut best: Vec<(usize, Source)> = Vec::new();
        for src in sources {
            let Some(cost) = Self::cost(g, src, spec) else { continue };
            let opens = compute_producers(g, self.registry, src).iter().any(|p| {
                let pair = (g.nodes[p].kind.clone(), kind.to_string());
                self.target.sequences.contains(&pair) && !have.sequences.contains(&pair)
            });
            let rank = 2 * cost + usize::from(!opens);
            match best.first() {
                Some((r, _)) if *r < rank => {}
                Some((r, _)) if *r == rank => best.push((rank, src)),
                _ => best = vec![(rank, src)],
            }
        }
        best.choose(rng).map(|(_, s)| *s)
    }

    /// Appends a node configured like `t`. Every input comes from `from`
    /// when given, otherwise from the cheapest source.
    fn realize<R: Rng + ?Sized>(
        &self,
        g: &ModelGraph,
        have: &DiversitySnapshot,
        t: &Template,
        from: Option<NodeId>,
        rng: &mut R,
    ) -> Result<ModelGraph, String> {
        let mut s = g.clone();
        let mut inserted = Vec::new();
        let mut inputs = Vec::new();
        for spec in &t.inputs {
            let src = match from {
                Some(id) => Source::node(id),
                None => self
                    .pick_source(&s, have, &t.kind, spec, rng)
                    .ok_or_else(|| format!("no tensor can feed {}", t.kind))?,
            };
            inputs.push(adapt(&mut s, src, spec, &mut inserted)?);
        }
        add_inferred(&mut s, &t.kind, t.params.clone(), inputs, t.dtype)?;
        let consumed: BTreeSet<NodeId> = s
            .nodes
            .values()
            .flat_map(|n| n.inputs.iter().filter_map(Source::node_id))
            .collect();
        s.outputs = s
            .nodes
            .keys()
            .filter(|id| !consumed.contains(id))
            .map(|id| Source::node(*id))
            .collect();
        infer_specs(&mut s, self.registry).map_err(|e| e.to_string())?;
        validate(&s, self.registry).map_err(|v| v[0].to_string())?;
        Ok(s)
    }

    fn close<R: Rng + ?Sized>(
        &self,
        g: &ModelGraph,
        have: &DiversitySnapshot,
        gap: &DiversityItem,
        rng: &mut R,
    ) -> Result<ModelGraph, String> {
        let candidates: Vec<&Template> = self.templates.iter().filter(|t| t.covers(gap)).collect();
        let t = *candidates.choose(rng).ok_or("no original node carries this item")?;
        let from = match gap {
            DiversityItem::Sequence { from, .. } => {
                let ids: Vec<NodeId> = g
                    .nodes
                    .values()
                    .filter(|n| n.kind == *from && !n.output_spec().has_empty_extent())
                    .map(|n| n.id)
                    .collect();
                Some(*ids.choose(rng).ok_or_else(|| format!("no {from} node to connect from"))?)
            }
            _ => None,
        };
        self.realize(g, have, t, from, rng)
    }
}

/// Synthesizes a graph covering `original`'s diversity. Stops when every
/// item is covered, when each remaining gap has failed
/// `attempts_per_gap` times, or at the time budget. Uncovered items are
/// reported in [`SynthesisReport::residual`].
pub fn synthesize<R: Rng + ?Sized>(
    original: &ModelGraph,
    registry: &Registry,
    config: &SynthesisConfig,
    rng: &mut R,
) -> Result<(ModelGraph, SynthesisReport), SynthesisError> {
    let start = Instant::now();
    let mut original = original.clone();
    infer_specs(&mut original, registry).map_err(|e| SynthesisError::InvalidOriginal(e.to_string()))?;
    validate(&original, registry).map_err(|v| SynthesisError::InvalidOriginal(v[0].to_string()))?;
    let target = collect_diversity(&original, registry);
    let templates = original
        .compute_nodes(registry)
        .map(|n| Template {
            kind: n.kind.clone(),
            params: n.params.clone(),
            dtype: n.dtype,
            inputs: original.input_specs(n.id).unwrap_or_default(),
        })
        .collect();
    let synth = Synth {
        registry,
        templates,
        target: &target,
    };

    let mut g = ModelGraph::new(original.batch, original.weight_seed, original.inputs.clone());
    let mut failures: BTreeMap<DiversityItem, usize> = BTreeMap::new();
    loop {
        if start.elapsed() >= config.time_budget {
            break;
        }
        let have = collect_diversity(&g, registry);
        let gaps: Vec<DiversityItem> = target
            .difference(&have)
            .into_iter()
            .filter(|i| failures.get(i).copied().unwrap_or(0) < config.attempts_per_gap)
            .collect();
        let tier: Vec<&DiversityItem> = [DiversityItem::is_param, DiversityItem::is_input, DiversityItem::is_sequence]
            .iter()
            .map(|f| gaps.iter().filter(|i| f(i)).collect::<Vec<_>>())
            .find(|v| !v.is_empty())
            .unwrap_or_default();
        let Some(gap) = tier.choose(rng).map(|i| (*i).clone()) else {
            break;
        };
        match synth.close(&g, &have, &gap, rng) {
            Ok(next) if collect_diversity(&next, registry).contains(&gap) => g = next,
            _ => *failures.entry(gap).or_default() += 1,
        }
    }

    let residual = target.difference(&collect_diversity(&g, registry)).into_iter().collect();
    let report = SynthesisReport {
        original_stats: GraphStats::of(&original, registry),
        synthesized_stats: GraphStats::of(&g, registry),
        residual,
        elapsed: start.elapsed().as_secs_f64(),
    };
    Ok((g, report))
}
