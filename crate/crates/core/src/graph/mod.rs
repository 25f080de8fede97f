//! Computation-graph IR.
//!
//! A [`ModelGraph`] is a DAG of [`LayerNode`]s. Each node has one output
//! tensor (slot 0); edges are [`Source`] references to either a graph input
//! or another node. Graphs are plain values: mutations clone and edit.

mod format;
mod infer;
pub mod sidecar;
mod validate;
mod weights;

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dtype::DTypeLabel;
use crate::registry::{ParamValue, Registry};
use crate::tensor::{TensorSpec, ValueTensor};

pub use format::{deserialize, load_model, save_model, serialize, FormatError, FORMAT_VERSION};
pub use infer::{conv_geometry, infer_node, infer_specs, ConvGeometry, InferError};
pub use validate::{validate, Constraint, Violation};
pub use weights::{default_inputs, materialize_weights, weight_shapes};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Producer of a tensor edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    GraphInput { graph_input: usize },
    Node { node: NodeId, slot: usize },
}

impl Source {
    pub fn input(index: usize) -> Self {
        Source::GraphInput { graph_input: index }
    }

    pub fn node(id: NodeId) -> Self {
        Source::Node { node: id, slot: 0 }
    }

    pub fn node_id(&self) -> Option<NodeId> {
        match self {
            Source::Node { node, .. } => Some(*node),
            Source::GraphInput { .. } => None,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::GraphInput { graph_input } => write!(f, "input{graph_input}"),
            Source::Node { node, slot } => write!(f, "{node}:{slot}"),
        }
    }
}

/// Execution-time replacement of a node's input payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecialValue {
    Nan,
    Inf,
    NegInf,
}

impl SpecialValue {
    pub fn value(self) -> f64 {
        match self {
            SpecialValue::Nan => f64::NAN,
            SpecialValue::Inf => f64::INFINITY,
            SpecialValue::NegInf => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: NodeId,
    pub kind: String,
    pub params: BTreeMap<String, ParamValue>,
    pub inputs: Vec<Source>,
    /// Initialization dtype: inputs must carry it, compute outputs carry it.
    pub dtype: DTypeLabel,
    pub input_override: Option<SpecialValue>,
    /// Filled by shape inference.
    pub output_spec: Option<TensorSpec>,
}

impl LayerNode {
    pub fn new(
        id: NodeId,
        kind: impl Into<String>,
        params: BTreeMap<String, ParamValue>,
        inputs: Vec<Source>,
        dtype: DTypeLabel,
    ) -> Self {
        LayerNode {
            id,
            kind: kind.into(),
            params,
            inputs,
            dtype,
            input_override: None,
            output_spec: None,
        }
    }

    pub fn param(&self, name: &str) -> Option<&ParamValue> {
        self.params.get(name)
    }

    pub fn int_param(&self, name: &str) -> Option<i64> {
        self.params.get(name).and_then(ParamValue::as_i64)
    }

    pub fn real_param(&self, name: &str) -> Option<f64> {
        self.params.get(name).and_then(ParamValue::as_f64)
    }

    pub fn bool_param(&self, name: &str) -> Option<bool> {
        self.params.get(name).and_then(ParamValue::as_bool)
    }

    pub fn str_param(&self, name: &str) -> Option<&str> {
        self.params.get(name).and_then(ParamValue::as_str)
    }

    pub fn output_spec(&self) -> &TensorSpec {
        self.output_spec
            .as_ref()
            .unwrap_or_else(|| panic!("{} has no inferred output spec", self.id))
    }
}

/// Key for an explicitly supplied weight tensor.
pub type WeightKey = (NodeId, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub batch: usize,
    pub weight_seed: u64,
    pub inputs: Vec<TensorSpec>,
    pub nodes: BTreeMap<NodeId, LayerNode>,
    pub outputs: Vec<Source>,
    /// Weights loaded from a sidecar; override materialized ones.
    pub explicit_weights: BTreeMap<WeightKey, ValueTensor>,
    /// Graph input payloads loaded from a sidecar.
    pub explicit_inputs: BTreeMap<usize, ValueTensor>,
}

impl ModelGraph {
    pub fn new(batch: usize, weight_seed: u64, inputs: Vec<TensorSpec>) -> Self {
        ModelGraph {
            batch,
            weight_seed,
            inputs,
            nodes: BTreeMap::new(),
            outputs: Vec::new(),
            explicit_weights: BTreeMap::new(),
            explicit_inputs: BTreeMap::new(),
        }
    }

    pub fn next_id(&self) -> NodeId {
        NodeId(self.nodes.keys().next_back().map_or(1, |id| id.0 + 1))
    }

    pub fn node(&self, id: NodeId) -> Option<&LayerNode> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut LayerNode> {
        self.nodes.get_mut(&id)
    }

    /// Adds a node with a fresh id and returns the id.
    pub fn add_node(
        &mut self,
        kind: impl Into<String>,
        params: BTreeMap<String, ParamValue>,
        inputs: Vec<Source>,
        dtype: DTypeLabel,
    ) -> NodeId {
        let id = self.next_id();
        self.nodes
            .insert(id, LayerNode::new(id, kind, params, inputs, dtype));
        id
    }

    /// Spec of the tensor produced at `src`, if known.
    pub fn spec_of(&self, src: Source) -> Option<&TensorSpec> {
        match src {
            Source::GraphInput { graph_input } => self.inputs.get(graph_input),
            Source::Node { node, .. } => self.nodes.get(&node)?.output_spec.as_ref(),
        }
    }

    pub fn input_specs(&self, id: NodeId) -> Option<Vec<TensorSpec>> {
        self.nodes[&id]
            .inputs
            .iter()
            .map(|s| self.spec_of(*s).cloned())
            .collect()
    }

    /// Nodes consuming the output of `id`, each listed once, in id order.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.inputs.iter().any(|s| s.node_id() == Some(id)))
            .map(|n| n.id)
            .collect()
    }

    /// Map from producer to consumers for the whole graph.
    pub fn consumer_map(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut map: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for n in self.nodes.values() {
            for s in &n.inputs {
                if let Some(p) = s.node_id() {
                    let entry = map.entry(p).or_default();
                    if entry.last() != Some(&n.id) {
                        entry.push(n.id);
                    }
                }
            }
        }
        map
    }

    /// Topological order (Kahn, smallest id first). `None` on a cycle or a
    /// dangling reference.
    pub fn topo_order(&self) -> Option<Vec<NodeId>> {
        let mut indegree: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut edges: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for n in self.nodes.values() {
            let preds: BTreeSet<NodeId> = n.inputs.iter().filter_map(Source::node_id).collect();
            for p in &preds {
                if !self.nodes.contains_key(p) {
                    return None;
                }
                edges.entry(*p).or_default().push(n.id);
            }
            indegree.insert(n.id, preds.len());
        }
        let mut ready: BinaryHeap<Reverse<NodeId>> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(id, _)| Reverse(*id))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for succ in edges.get(&id).map(Vec::as_slice).unwrap_or_default() {
                let d = indegree.get_mut(succ).expect("known node");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(*succ));
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    /// Replaces every use of `from` (node inputs and graph outputs) with
    /// `to`, except inside the nodes listed in `keep`.
    pub fn redirect_uses(&mut self, from: Source, to: Source, keep: &[NodeId]) {
        for n in self.nodes.values_mut() {
            if keep.contains(&n.id) {
                continue;
            }
            for s in n.inputs.iter_mut() {
                if *s == from {
                    *s = to;
                }
            }
        }
        for s in self.outputs.iter_mut() {
            if *s == from {
                *s = to;
            }
        }
    }

    /// True if `target` is reachable from `from` along data edges.
    pub fn reaches(&self, from: NodeId, target: NodeId) -> bool {
        if from == target {
            return true;
        }
        let consumers = self.consumer_map();
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                continue;
            }
            for c in consumers.get(&n).map(Vec::as_slice).unwrap_or_default() {
                if *c == target {
                    return true;
                }
                stack.push(*c);
            }
        }
        false
    }

    pub fn compute_node_count(&self, registry: &Registry) -> usize {
        self.nodes
            .values()
            .filter(|n| !registry.is_utility(&n.kind))
            .count()
    }

    pub fn compute_nodes<'a>(&'a self, registry: &'a Registry) -> impl Iterator<Item = &'a LayerNode> {
        self.nodes
            .values()
            .filter(move |n| !registry.is_utility(&n.kind))
    }

    /// Output specs of the graph outputs, if inferred.
    pub fn output_specs(&self) -> Option<Vec<TensorSpec>> {
        self.outputs.iter().map(|s| self.spec_of(*s).cloned()).collect()
    }

    /// Length of the longest input-to-output path, counted in nodes.
    pub fn depth(&self) -> usize {
        let Some(order) = self.topo_order() else {
            return 0;
        };
        let mut depth: BTreeMap<NodeId, usize> = BTreeMap::new();
        for id in order {
            let d = self.nodes[&id]
                .inputs
                .iter()
                .filter_map(|s| s.node_id())
                .map(|p| depth[&p])
                .max()
                .unwrap_or(0)
                + 1;
            depth.insert(id, d);
        }
        depth.values().copied().max().unwrap_or(0)
    }

    /// Whether any node computes at a reduced-precision label.
    pub fn uses_reduced_precision(&self) -> bool {
        self.nodes.values().any(|n| n.dtype.is_reduced_precision())
            || self.inputs.iter().any(|s| s.dtype.is_reduced_precision())
    }

    /// Drops nodes that no graph output depends on.
    pub fn prune_unreachable(&mut self) {
        let mut live = BTreeSet::new();
        let mut stack: Vec<NodeId> = self.outputs.iter().filter_map(Source::node_id).collect();
        while let Some(id) = stack.pop() {
            if !live.insert(id) {
                continue;
            }
            if let Some(n) = self.nodes.get(&id) {
                stack.extend(n.inputs.iter().filter_map(Source::node_id));
            }
        }
        self.nodes.retain(|id, _| live.contains(id));
        self.explicit_weights.retain(|(id, _), _| live.contains(id));
    }
}
