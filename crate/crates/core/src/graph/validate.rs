//! The four tensor constraints plus structural checks.

use std::fmt;

use serde::Serialize;

use crate::registry::{ParamKind, Registry};
use crate::tensor::TensorSpec;

use super::{infer_node, ModelGraph, NodeId, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    InputDegree,
    Dimension,
    Shape,
    Datatype,
    Acyclic,
    Reference,
    Params,
    Extent,
    Inference,
    UnknownKind,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Constraint::InputDegree => "input-degree",
            Constraint::Dimension => "dimension",
            Constraint::Shape => "shape",
            Constraint::Datatype => "datatype",
            Constraint::Acyclic => "acyclic",
            Constraint::Reference => "reference",
            Constraint::Params => "params",
            Constraint::Extent => "extent",
            Constraint::Inference => "inference",
            Constraint::UnknownKind => "unknown-kind",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub constraint: Constraint,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(n) => write!(f, "{n}: {} constraint: {}", self.constraint, self.detail),
            None => write!(f, "{} constraint: {}", self.constraint, self.detail),
        }
    }
}

/// Checks every node against its schema. Specs are recomputed along the
/// way, so stale `output_spec` values on the graph are ignored.
pub fn validate(graph: &ModelGraph, registry: &Registry) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let mut push = |node: Option<NodeId>, constraint: Constraint, detail: String| {
        violations.push(Violation {
            node,
            constraint,
            detail,
        })
    };

    for (i, s) in graph.inputs.iter().enumerate() {
        if s.rank() == 0 || s.has_empty_extent() {
            push(None, Constraint::Extent, format!("graph input {i} has shape {:?}", s.shape));
        }
    }

    let Some(order) = graph.topo_order() else {
        push(None, Constraint::Acyclic, "graph has a cycle or a dangling edge".into());
        return Err(violations);
    };

    let mut specs: std::collections::BTreeMap<NodeId, TensorSpec> = Default::default();
    let spec_of = |specs: &std::collections::BTreeMap<NodeId, TensorSpec>, src: &Source| match src {
        Source::GraphInput { graph_input } => graph.inputs.get(*graph_input).cloned(),
        Source::Node { node, slot } if *slot == 0 => specs.get(node).cloned(),
        Source::Node { .. } => None,
    };

    for id in order {
        let node = &graph.nodes[&id];
        let Ok(schema) = registry.schema(&node.kind) else {
            push(Some(id), Constraint::UnknownKind, node.kind.clone());
            continue;
        };
        let mut inputs = Vec::with_capacity(node.inputs.len());
        let mut missing = false;
        for src in &node.inputs {
            match spec_of(&specs, src) {
                Some(s) => inputs.push(s),
                None => {
                    missing = true;
                }
            }
        }
        if missing {
            push(Some(id), Constraint::Reference, "input refers to an unknown tensor".into());
            continue;
        }

        if !schema.input_arity.contains(inputs.len()) {
            push(
                Some(id),
                Constraint::InputDegree,
                format!(
                    "{} takes {}..={} inputs, got {}",
                    node.kind,
                    schema.input_arity.min,
                    schema.input_arity.max,
                    inputs.len()
                ),
            );
        }
        for s in &inputs {
            if !schema.accepted_input_ranks.contains(&s.rank()) {
                push(
                    Some(id),
                    Constraint::Dimension,
                    format!("{} does not accept rank {}", node.kind, s.rank()),
                );
            }
            if !schema.accepted_dtypes.contains(&s.dtype) {
                push(
                    Some(id),
                    Constraint::Datatype,
                    format!("{} does not accept {}", node.kind, s.dtype),
                );
            } else if node.kind != "Cast" && s.dtype != node.dtype {
                push(
                    Some(id),
                    Constraint::Datatype,
                    format!("input is {} but the node is initialized as {}", s.dtype, node.dtype),
                );
            }
            if !schema.is_utility && s.has_empty_extent() {
                push(
                    Some(id),
                    Constraint::Extent,
                    format!("{} input has an empty extent {:?}", node.kind, s.shape),
                );
            }
        }
        if schema.is_merging {
            if let Some(first) = inputs.first() {
                if inputs.iter().any(|s| s.shape != first.shape) {
                    push(
                        Some(id),
                        Constraint::Shape,
                        format!(
                            "merge inputs differ: {:?}",
                            inputs.iter().map(|s| &s.shape).collect::<Vec<_>>()
                        ),
                    );
                }
            }
        }
        for p in &schema.params {
            match node.params.get(&p.name) {
                None => push(Some(id), Constraint::Params, format!("missing param `{}`", p.name)),
                Some(v) if p.kind != ParamKind::Shape && !p.admits(v) => push(
                    Some(id),
                    Constraint::Params,
                    format!("param `{}` = {v} outside its domain", p.name),
                ),
                _ => {}
            }
        }
        for name in node.params.keys() {
            if schema.param(name).is_none() {
                push(Some(id), Constraint::Params, format!("unexpected param `{name}`"));
            }
        }

        let refs: Vec<&TensorSpec> = inputs.iter().collect();
        match infer_node(&node.kind, &node.params, &refs, node.dtype) {
            Ok(spec) => {
                if !schema.produced_output_ranks.contains(&spec.rank()) {
                    push(
                        Some(id),
                        Constraint::Dimension,
                        format!("{} produced undeclared rank {}", node.kind, spec.rank()),
                    );
                }
                specs.insert(id, spec);
            }
            Err(e) => push(Some(id), Constraint::Inference, e),
        }
    }

    for (i, o) in graph.outputs.iter().enumerate() {
        match spec_of(&specs, o) {
            None => push(None, Constraint::Reference, format!("graph output {i} is dangling")),
            Some(s) if s.has_empty_extent() => push(
                o.node_id(),
                Constraint::Extent,
                format!("graph output {i} has an empty extent"),
            ),
            _ => {}
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::DTypeLabel;
    use crate::registry::ParamValue;
    use std::collections::BTreeMap;

    fn graph_with_add(a: &[usize], b: &[usize]) -> ModelGraph {
        let reg = Registry::builtin();
        let mut g = ModelGraph::new(
            5,
            0,
            vec![
                TensorSpec::new(DTypeLabel::Float32, a.to_vec()),
                TensorSpec::new(DTypeLabel::Float32, b.to_vec()),
            ],
        );
        let add = g.add_node(
            "Add",
            reg.schema("Add").unwrap().default_params(),
            vec![Source::input(0), Source::input(1)],
            DTypeLabel::Float32,
        );
        g.outputs.push(Source::node(add));
        g
    }

    #[test]
    fn equal_merge_shapes_pass() {
        let reg = Registry::builtin();
        assert!(validate(&graph_with_add(&[5, 6, 6, 2], &[5, 6, 6, 2]), &reg).is_ok());
    }

    #[test]
    fn unequal_merge_shapes_violate_shape_constraint() {
        let reg = Registry::builtin();
        let v = validate(&graph_with_add(&[5, 6, 6, 2], &[5, 3, 3, 2]), &reg).unwrap_err();
        assert!(v.iter().any(|v| v.constraint == Constraint::Shape && v.node == Some(NodeId(1))));
    }

    #[test]
    fn conv2d_rank3_violates_dimension() {
        let reg = Registry::builtin();
        let mut g = ModelGraph::new(2, 0, vec![TensorSpec::new(DTypeLabel::Float32, vec![2, 8, 3])]);
        let c = g.add_node(
            "Conv2D",
            reg.schema("Conv2D").unwrap().default_params(),
            vec![Source::input(0)],
            DTypeLabel::Float32,
        );
        g.outputs.push(Source::node(c));
        let v = validate(&g, &reg).unwrap_err();
        assert!(v.iter().any(|v| v.constraint == Constraint::Dimension));
    }

    #[test]
    fn precision_mismatch_violates_datatype() {
        let reg = Registry::builtin();
        let mut g = ModelGraph::new(2, 0, vec![TensorSpec::new(DTypeLabel::Float16, vec![2, 4])]);
        let r = g.add_node(
            "ReLU",
            reg.schema("ReLU").unwrap().default_params(),
            vec![Source::input(0)],
            DTypeLabel::Float32,
        );
        g.outputs.push(Source::node(r));
        let v = validate(&g, &reg).unwrap_err();
        assert_eq!(v[0].constraint, Constraint::Datatype);
    }

    #[test]
    fn single_input_add_violates_degree() {
        let reg = Registry::builtin();
        let mut g = ModelGraph::new(2, 0, vec![TensorSpec::new(DTypeLabel::Float32, vec![2, 4])]);
        let a = g.add_node("Add", BTreeMap::new(), vec![Source::input(0)], DTypeLabel::Float32);
        g.outputs.push(Source::node(a));
        let v = validate(&g, &reg).unwrap_err();
        assert!(v.iter().any(|v| v.constraint == Constraint::InputDegree));
    }

    #[test]
    fn out_of_domain_param() {
        let reg = Registry::builtin();
        let mut g = ModelGraph::new(2, 0, vec![TensorSpec::new(DTypeLabel::Float32, vec![2, 4])]);
        let mut p = reg.schema("Dense").unwrap().default_params();
        p.insert("units".into(), ParamValue::Int(99));
        let d = g.add_node("Dense", p, vec![Source::input(0)], DTypeLabel::Float32);
        g.outputs.push(Source::node(d));
        let v = validate(&g, &reg).unwrap_err();
        assert!(v.iter().any(|v| v.constraint == Constraint::Params));
    }
}
