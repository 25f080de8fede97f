//! Random valid graphs, used as seeds and as test corpora.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dtype::DTypeLabel;
use crate::graph::{infer_specs, validate, ModelGraph, NodeId, Source};
use crate::mutation::repair::adapt;
use crate::mutation::Mutator;
use crate::registry::{ParamKind, ParamValue, Registry};
use crate::tensor::TensorSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub batch: usize,
    /// Upper bound on all nodes, utility nodes included.
    pub max_nodes: usize,
    /// Compute nodes to aim for.
    pub compute_nodes: usize,
    pub max_depth: usize,
    pub max_elements: usize,
    pub dtype: DTypeLabel,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            batch: 2,
            max_nodes: 40,
            compute_nodes: 8,
            max_depth: 30,
            max_elements: 4096,
            dtype: DTypeLabel::Float32,
        }
    }
}

/// Random input spec of rank 2, 3 or 4 with small extents.
pub fn random_input<R: Rng + ?Sized>(batch: usize, dtype: DTypeLabel, rng: &mut R) -> TensorSpec {
    let shape = match rng.gen_range(0..3) {
        0 => vec![batch, rng.gen_range(2..=12)],
        1 => vec![batch, rng.gen_range(4..=10), rng.gen_range(1..=4)],
        _ => vec![batch, rng.gen_range(5..=9), rng.gen_range(5..=9), rng.gen_range(1..=3)],
    };
    TensorSpec::new(dtype, shape)
}

fn random_params<R: Rng + ?Sized>(
    registry: &Registry,
    kind: &str,
    rng: &mut R,
) -> BTreeMap<String, ParamValue> {
    let schema = registry.schema(kind).expect("known kind");
    let mut params = schema.default_params();
    for p in schema.params.iter().filter(|p| p.kind != ParamKind::Shape) {
        let domain = p.domain();
        if let Some(v) = domain.choose(rng) {
            params.insert(p.name.clone(), v.clone());
        }
    }
    params
}

/// Appends one compute node of a random kind after a random tensor.
/// Returns the new node's id, or `None` when nothing fit.
fn grow<R: Rng + ?Sized>(
    g: &mut ModelGraph,
    registry: &Registry,
    config: &GenConfig,
    rng: &mut R,
) -> Option<NodeId> {
    let mutator = Mutator::new(registry);
    let kinds: Vec<&str> = registry.compute_kinds().map(|s| s.kind.as_str()).collect();
    let mut sources: Vec<Source> = (0..g.inputs.len()).map(Source::input).collect();
    sources.extend(g.nodes.values().filter(|n| !n.output_spec().has_empty_extent()).map(|n| Source::node(n.id)));
    for _ in 0..8 {
        let kind = *kinds.choose(rng)?;
        let schema = registry.schema(kind).ok()?;
        let params = if rng.gen_bool(0.3) {
            schema.default_params()
        } else {
            random_params(registry, kind, rng)
        };
        if params.get("units").and_then(ParamValue::as_i64) == Some(0) {
            continue;
        }
        let mut scratch = g.clone();
        let id = if schema.is_merging {
            let spec_groups = group_by_spec(&scratch, &sources);
            let pair = spec_groups.into_iter().filter(|v| v.len() >= 2).collect::<Vec<_>>();
            match pair.choose(rng) {
                Some(group) => {
                    let picked: Vec<Source> = group.choose_multiple(rng, 2).copied().collect();
                    let dtype = scratch.spec_of(picked[0])?.dtype;
                    match crate::mutation::repair::add_inferred(&mut scratch, kind, params, picked, dtype) {
                        Ok(id) => id,
                        Err(_) => continue,
                    }
                }
                None => {
                    let src = *sources.choose(rng)?;
                    let mut inserted = Vec::new();
                    match mutator.attach(&mut scratch, kind, params, src, &mut inserted) {
                        Ok(id) => id,
                        Err(_) => continue,
                    }
                }
            }
        } else {
            let src = *sources.choose(rng)?;
            let mut inserted = Vec::new();
            match mutator.attach(&mut scratch, kind, params, src, &mut inserted) {
                Ok(id) => id,
                Err(_) => continue,
            }
        };
        let out = scratch.nodes[&id].output_spec();
        if out.has_empty_extent()
            || out.numel() > config.max_elements
            || scratch.nodes.len() > config.max_nodes
            || scratch.nodes.values().any(|n| n.output_spec().numel() > config.max_elements)
        {
            continue;
        }
        scratch.outputs = sinks(&scratch);
        if scratch.depth() > config.max_depth {
            continue;
        }
        *g = scratch;
        return Some(id);
    }
    None
}

fn group_by_spec(g: &ModelGraph, sources: &[Source]) -> Vec<Vec<Source>> {
    let mut groups: BTreeMap<TensorSpec, Vec<Source>> = BTreeMap::new();
    for s in sources {
        if let Some(spec) = g.spec_of(*s) {
            groups.entry(spec.clone()).or_default().push(*s);
        }
    }
    groups.into_values().collect()
}

/// Nodes nobody consumes, in id order.
fn sinks(g: &ModelGraph) -> Vec<Source> {
    let consumers = g.consumer_map();
    g.nodes
        .keys()
        .filter(|id| !consumers.contains_key(id))
        .map(|id| Source::node(*id))
        .collect()
}

/// A random graph that passes [`validate`].
pub fn random_graph<R: Rng + ?Sized>(registry: &Registry, config: &GenConfig, rng: &mut R) -> ModelGraph {
    loop {
        let input = random_input(config.batch, config.dtype, rng);
        let mut g = ModelGraph::new(config.batch, rng.gen(), vec![input]);
        let mut added = 0;
        let mut stalls = 0;
        while added < config.compute_nodes && stalls < 4 {
            match grow(&mut g, registry, config, rng) {
                Some(_) => added += 1,
                None => stalls += 1,
            }
        }
        if added == 0 {
            continue;
        }
        g.outputs = sinks(&g);
        if infer_specs(&mut g, registry).is_ok() && validate(&g, registry).is_ok() {
            return g;
        }
    }
}

/// A graph built from one random block stacked several times, so that a
/// large share of compute nodes repeat an earlier (kind, params, input
/// spec) configuration.
pub fn repetitive_graph<R: Rng + ?Sized>(
    registry: &Registry,
    max_nodes: usize,
    rng: &mut R,
) -> ModelGraph {
    loop {
        let input = random_input(2, DTypeLabel::Float32, rng);
        let block_cfg = GenConfig {
            compute_nodes: rng.gen_range(2..=4),
            max_nodes: max_nodes / 3,
            ..GenConfig::default()
        };
        // Build the block as a chain ending in a repair back to the input spec.
        let mut block = ModelGraph::new(2, 0, vec![input.clone()]);
        let mut ok = true;
        for _ in 0..block_cfg.compute_nodes {
            let before = block.nodes.len();
            if grow_chain(&mut block, registry, &block_cfg, rng).is_none() {
                ok = false;
                break;
            }
            debug_assert!(block.nodes.len() > before);
        }
        if !ok {
            continue;
        }
        let end = *block.outputs.first().expect("chain end");
        let mut inserted = Vec::new();
        let Ok(end) = adapt(&mut block, end, &input, &mut inserted) else {
            continue;
        };
        block.outputs = vec![end];
        let per_block = block.nodes.len();
        if per_block == 0 {
            continue;
        }
        let reps = (max_nodes / per_block).clamp(2, 8);
        let mut g = ModelGraph::new(2, rng.gen(), vec![input.clone()]);
        let mut tail = Source::input(0);
        for _ in 0..reps {
            let mut map: BTreeMap<NodeId, NodeId> = BTreeMap::new();
            let order = block.topo_order().expect("acyclic");
            for id in order {
                let n = &block.nodes[&id];
                let inputs = n
                    .inputs
                    .iter()
                    .map(|s| match s {
                        Source::GraphInput { .. } => tail,
                        Source::Node { node, slot } => Source::Node {
                            node: map[node],
                            slot: *slot,
                        },
                    })
                    .collect();
                let new = g.add_node(n.kind.clone(), n.params.clone(), inputs, n.dtype);
                map.insert(id, new);
            }
            tail = match end {
                Source::Node { node, slot } => Source::Node { node: map[&node], slot },
                other => other,
            };
        }
        g.outputs = vec![tail];
        if infer_specs(&mut g, registry).is_ok() && validate(&g, registry).is_ok() && g.nodes.len() <= max_nodes {
            return g;
        }
    }
}

/// Like [`grow`] but always extends the current chain end.
fn grow_chain<R: Rng + ?Sized>(
    g: &mut ModelGraph,
    registry: &Registry,
    config: &GenConfig,
    rng: &mut R,
) -> Option<NodeId> {
    let mutator = Mutator::new(registry);
    let src = g.outputs.first().copied().unwrap_or(Source::input(0));
    let kinds: Vec<&str> = registry
        .compute_kinds()
        .filter(|s| !s.is_merging)
        .map(|s| s.kind.as_str())
        .collect();
    for _ in 0..12 {
        let kind = *kinds.choose(rng)?;
        let params = random_params(registry, kind, rng);
        if params.get("units").and_then(ParamValue::as_i64) == Some(0) {
            continue;
        }
        let mut scratch = g.clone();
        let mut inserted = Vec::new();
        let Ok(id) = mutator.attach(&mut scratch, kind, params, src, &mut inserted) else {
            continue;
        };
        let out = scratch.nodes[&id].output_spec();
        if out.has_empty_extent() || out.numel() > config.max_elements {
            continue;
        }
        scratch.outputs = vec![Source::node(id)];
        *g = scratch;
        return Some(id);
    }
    None
}

/// Share of compute nodes whose (kind, params, input specs) configuration
/// already occurred at a smaller id.
pub fn duplicate_ratio(graph: &ModelGraph, registry: &Registry) -> f64 {
    let mut seen = std::collections::BTreeSet::new();
    let mut dup = 0;
    let mut total = 0;
    for n in graph.compute_nodes(registry) {
        total += 1;
        let key = (
            n.kind.clone(),
            n.params.iter().map(|(k, v)| format!("{k}={}", v.canonical())).collect::<Vec<_>>(),
            graph.input_specs(n.id),
            n.dtype,
        );
        if !seen.insert(format!("{key:?}")) {
            dup += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        dup as f64 / total as f64
    }
}
