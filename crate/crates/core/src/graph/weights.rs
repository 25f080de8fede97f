//! Deterministic weight and input materialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::{TensorSpec, ValueTensor};

use super::{LayerNode, ModelGraph, NodeId};

/// Shapes of the weight slots a node owns, given its input specs.
///
/// Slot order per kind:
/// Dense/Conv: kernel, bias (bias only with `use_bias`);
/// SeparableConv2D: depthwise, pointwise, bias;
/// BatchNormalization: gamma, beta, moving_mean, moving_variance;
/// LayerNormalization: gamma, beta.
pub fn weight_shapes(node: &LayerNode, inputs: &[TensorSpec]) -> Vec<Vec<usize>> {
    let Some(first) = inputs.first() else {
        return Vec::new();
    };
    let channels = *first.shape.last().unwrap_or(&1);
    let int = |name: &str| node.int_param(name).unwrap_or(0).max(0) as usize;
    let bias = node.bool_param("use_bias").unwrap_or(false);
    let mut shapes = Vec::new();
    match node.kind.as_str() {
        "Dense" => {
            shapes.push(vec![channels, int("units")]);
            if bias {
                shapes.push(vec![int("units")]);
            }
        }
        "Conv1D" => {
            shapes.push(vec![int("kernel_size"), channels, int("filters")]);
            if bias {
                shapes.push(vec![int("filters")]);
            }
        }
        "Conv2D" => {
            let k = int("kernel_size");
            shapes.push(vec![k, k, channels, int("filters")]);
            if bias {
                shapes.push(vec![int("filters")]);
            }
        }
        "SeparableConv2D" => {
            let k = int("kernel_size");
            let dm = int("depth_multiplier");
            shapes.push(vec![k, k, channels, dm]);
            shapes.push(vec![1, 1, channels * dm, int("filters")]);
            if bias {
                shapes.push(vec![int("filters")]);
            }
        }
        "BatchNormalization" => shapes.extend(std::iter::repeat_n(vec![channels], 4)),
        "LayerNormalization" => shapes.extend(std::iter::repeat_n(vec![channels], 2)),
        _ => {}
    }
    shapes
}

fn node_rng(seed: u64, node: &LayerNode, inputs: &[TensorSpec]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(node.id.0.to_le_bytes());
    h.update(node.kind.as_bytes());
    for (k, v) in &node.params {
        h.update(k.as_bytes());
        h.update([0]);
        h.update(v.canonical().as_bytes());
        h.update([0]);
    }
    for s in inputs {
        h.update(s.dtype.as_str().as_bytes());
        h.update(s.shape_key().as_bytes());
        h.update([0]);
    }
    h.update(node.dtype.as_str().as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Weights for `id`: explicit sidecar tensors where present, otherwise
/// uniform draws in [-0.5, 0.5] seeded from the graph's `weight_seed` and the
/// node's identity. BatchNormalization gets `moving_variance = 1 + u` and
/// unit/zero gamma/beta when `scale`/`center` are off.
pub fn materialize_weights(graph: &ModelGraph, id: NodeId) -> Vec<ValueTensor> {
    let node = &graph.nodes[&id];
    let inputs = graph.input_specs(id).unwrap_or_default();
    let shapes = weight_shapes(node, &inputs);
    let mut rng = node_rng(graph.weight_seed, node, &inputs);
    let bn = node.kind == "BatchNormalization";
    let ln = node.kind == "LayerNormalization";
    shapes
        .into_iter()
        .enumerate()
        .map(|(slot, shape)| {
            let spec = TensorSpec::new(node.dtype, shape);
            let n = spec.numel();
            let mut data: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..=0.5)).collect();
            if bn || ln {
                let scale = node.bool_param("scale").unwrap_or(true);
                let center = node.bool_param("center").unwrap_or(true);
                match slot {
                    0 if !scale => data.fill(1.0),
                    1 if !center => data.fill(0.0),
                    3 if bn => data.iter_mut().for_each(|v| *v += 1.0),
                    _ => {}
                }
            }
            match graph.explicit_weights.get(&(id, slot)) {
                Some(t) if t.spec == spec => t.clone(),
                _ => ValueTensor::new(spec, data),
            }
        })
        .collect()
}

/// Graph input payloads: explicit sidecar tensors where present, otherwise
/// uniform draws in [-0.5, 0.5] seeded from `weight_seed`.
pub fn default_inputs(graph: &ModelGraph) -> Vec<ValueTensor> {
    graph
        .inputs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            if let Some(t) = graph.explicit_inputs.get(&i) {
                if t.spec == *spec {
                    return t.clone();
                }
            }
            let mut h = Sha256::new();
            h.update(b"input");
            h.update(graph.weight_seed.to_le_bytes());
            h.update((i as u64).to_le_bytes());
            h.update(spec.shape_key().as_bytes());
            let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
            let data = (0..spec.numel()).map(|_| rng.gen_range(-0.5..=0.5)).collect();
            ValueTensor::new(spec.clone(), data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::DTypeLabel;
    use crate::graph::{infer_specs, Source};
    use crate::registry::{ParamValue, Registry};

    fn dense_graph(seed: u64) -> ModelGraph {
        let reg = Registry::builtin();
        let mut g = ModelGraph::new(5, seed, vec![TensorSpec::new(DTypeLabel::Float32, vec![5, 16])]);
        let mut p = reg.schema("Dense").unwrap().default_params();
        p.insert("units".into(), ParamValue::Int(4));
        p.insert("use_bias".into(), ParamValue::Bool(true));
        let d = g.add_node("Dense", p, vec![Source::input(0)], DTypeLabel::Float32);
        g.outputs.push(Source::node(d));
        infer_specs(&mut g, &reg).unwrap();
        g
    }

    #[test]
    fn dense_weight_lengths() {
        let w = materialize_weights(&dense_graph(1), NodeId(1));
        assert_eq!(w[0].data.len(), 64);
        assert_eq!(w[1].data.len(), 4);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = materialize_weights(&dense_graph(1), NodeId(1));
        let b = materialize_weights(&dense_graph(1), NodeId(1));
        let c = materialize_weights(&dense_graph(2), NodeId(1));
        assert!(a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y)));
        assert_ne!(a[0].data, c[0].data);
        assert!(a[0].data.iter().all(|v| (-0.5..=0.5).contains(v)));
    }
}
