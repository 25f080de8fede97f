//! Shape and dtype inference.

use std::collections::BTreeMap;

use crate::dtype::DTypeLabel;
use crate::registry::{ParamValue, Registry};
use crate::tensor::TensorSpec;

use super::{ModelGraph, NodeId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferError {
    #[error("{node}: {reason}")]
    Node { node: NodeId, reason: String },
    #[error("graph has a cycle or a dangling edge")]
    Structure,
    #[error("graph output {0} references a missing node")]
    DanglingOutput(String),
}

/// Output extent and leading pad of a sliding window along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub out: usize,
    pub pad_before: usize,
    pub pad_total: usize,
}

/// Window geometry for `valid`/`same` padding with an effective kernel of
/// `dilation * (kernel - 1) + 1` taps. `None` when the window does not fit.
pub fn conv_geometry(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    same: bool,
) -> Option<ConvGeometry> {
    if kernel == 0 || stride == 0 || dilation == 0 || input == 0 {
        return None;
    }
    let effective = dilation * (kernel - 1) + 1;
    if same {
        let out = input.div_ceil(stride);
        let pad_total = ((out - 1) * stride + effective).saturating_sub(input);
        Some(ConvGeometry {
            out,
            pad_before: pad_total / 2,
            pad_total,
        })
    } else {
        if input < effective {
            return None;
        }
        Some(ConvGeometry {
            out: (input - effective) / stride + 1,
            pad_before: 0,
            pad_total: 0,
        })
    }
}

fn int(params: &BTreeMap<String, ParamValue>, name: &str) -> Result<usize, String> {
    let v = params
        .get(name)
        .and_then(ParamValue::as_i64)
        .ok_or_else(|| format!("missing integer param `{name}`"))?;
    usize::try_from(v).map_err(|_| format!("param `{name}` is negative"))
}

fn text<'a>(params: &'a BTreeMap<String, ParamValue>, name: &str) -> Result<&'a str, String> {
    params
        .get(name)
        .and_then(ParamValue::as_str)
        .ok_or_else(|| format!("missing param `{name}`"))
}

fn resolve_axis(params: &BTreeMap<String, ParamValue>, rank: usize) -> Result<usize, String> {
    let axis = params
        .get("axis")
        .and_then(ParamValue::as_i64)
        .ok_or("missing param `axis`")?;
    let resolved = if axis < 0 { rank as i64 + axis } else { axis };
    if resolved < 1 || resolved >= rank as i64 {
        return Err(format!("axis {axis} invalid for rank {rank}"));
    }
    Ok(resolved as usize)
}

/// Infers one node's output spec from its kind, params, input specs and
/// initialization dtype. Registry membership is not checked here.
pub fn infer_node(
    kind: &str,
    params: &BTreeMap<String, ParamValue>,
    inputs: &[&TensorSpec],
    dtype: DTypeLabel,
) -> Result<TensorSpec, String> {
    let first = inputs.first().ok_or("node has no inputs")?;
    let shape = &first.shape;
    let rank = shape.len();
    let out = |shape: Vec<usize>| Ok(TensorSpec::new(dtype, shape));
    match kind {
        "Dense" => {
            let units = int(params, "units")?;
            let mut s = shape.clone();
            *s.last_mut().ok_or("rank-0 input")? = units;
            out(s)
        }
        "Conv1D" | "Conv2D" | "SeparableConv2D" | "MaxPooling2D" | "AveragePooling2D" => {
            let spatial = match kind {
                "Conv1D" => 1,
                _ => 2,
            };
            if rank != spatial + 2 {
                return Err(format!("{kind} needs rank {}, got {rank}", spatial + 2));
            }
            let pooling = kind.ends_with("Pooling2D");
            let (kernel, dilation) = if pooling {
                (int(params, "pool_size")?, 1)
            } else {
                let d = if kind == "SeparableConv2D" {
                    1
                } else {
                    int(params, "dilation_rate")?
                };
                (int(params, "kernel_size")?, d)
            };
            let stride = int(params, "strides")?;
            let same = text(params, "padding")? == "same";
            let mut s = shape.clone();
            for axis in 1..=spatial {
                let g = conv_geometry(shape[axis], kernel, stride, dilation, same).ok_or_else(
                    || {
                        format!(
                            "window {kernel} (dilation {dilation}) does not fit extent {}",
                            shape[axis]
                        )
                    },
                )?;
                s[axis] = g.out;
            }
            if !pooling {
                s[spatial + 1] = int(params, "filters")?;
            }
            out(s)
        }
        "GlobalAveragePooling2D" => {
            if rank != 4 {
                return Err(format!("GlobalAveragePooling2D needs rank 4, got {rank}"));
            }
            let keep = params
                .get("keepdims")
                .and_then(ParamValue::as_bool)
                .unwrap_or(false);
            if keep {
                out(vec![shape[0], 1, 1, shape[3]])
            } else {
                out(vec![shape[0], shape[3]])
            }
        }
        "Flatten" => out(vec![shape[0], shape[1..].iter().product()]),
        "Softmax" => {
            resolve_axis(params, rank)?;
            out(shape.clone())
        }
        "BatchNormalization" | "LayerNormalization" | "ReLU" | "LeakyReLU" | "ELU"
        | "Dropout" => out(shape.clone()),
        "Add" | "Multiply" => {
            if inputs.iter().any(|s| s.shape != *shape) {
                return Err("merge inputs differ in shape".into());
            }
            out(shape.clone())
        }
        "Concatenate" => {
            let axis = resolve_axis(params, rank)?;
            if inputs.iter().any(|s| s.shape != *shape) {
                return Err("merge inputs differ in shape".into());
            }
            let mut s = shape.clone();
            s[axis] = shape[axis] * inputs.len();
            out(s)
        }
        "Cast" => {
            let target: DTypeLabel = text(params, "dtype")?
                .parse()
                .map_err(|e| format!("{e}"))?;
            Ok(TensorSpec::new(target, shape.clone()))
        }
        "Reshape" | "Pad" | "Crop" => {
            let target = params
                .get("target_shape")
                .and_then(ParamValue::as_shape)
                .ok_or("missing target_shape")?
                .to_vec();
            if target.is_empty() || target[0] != shape[0] {
                return Err("target shape must keep the batch extent".into());
            }
            match kind {
                "Reshape" => {
                    if target.iter().product::<usize>() != first.numel() {
                        return Err(format!("cannot reshape {shape:?} to {target:?}"));
                    }
                }
                "Pad" => {
                    if target.len() != rank || target.iter().zip(shape).any(|(t, s)| t < s) {
                        return Err(format!("cannot pad {shape:?} to {target:?}"));
                    }
                }
                _ => {
                    if target.len() != rank || target.iter().zip(shape).any(|(t, s)| t > s) {
                        return Err(format!("cannot crop {shape:?} to {target:?}"));
                    }
                }
            }
            Ok(TensorSpec::new(first.dtype, target))
        }
        other => Err(format!("no inference rule for kind `{other}`")),
    }
}

/// Fills `output_spec` on every node, in topological order.
pub fn infer_specs(graph: &mut ModelGraph, registry: &Registry) -> Result<(), InferError> {
    let order = graph.topo_order().ok_or(InferError::Structure)?;
    for id in order {
        let node = &graph.nodes[&id];
        if !registry.contains(&node.kind) {
            return Err(InferError::Node {
                node: id,
                reason: format!("unknown kind `{}`", node.kind),
            });
        }
        let specs: Vec<&TensorSpec> = node
            .inputs
            .iter()
            .map(|s| graph.spec_of(*s))
            .collect::<Option<_>>()
            .ok_or(InferError::Structure)?;
        let spec = infer_node(&node.kind, &node.params, &specs, node.dtype)
            .map_err(|reason| InferError::Node { node: id, reason })?;
        graph.nodes.get_mut(&id).expect("node").output_spec = Some(spec);
    }
    for o in &graph.outputs {
        if graph.spec_of(*o).is_none() {
            return Err(InferError::DanglingOutput(o.to_string()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::ParamValue as P;

    fn params(pairs: &[(&str, P)]) -> BTreeMap<String, P> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    fn conv(filters: i64, k: i64, s: i64, d: i64, pad: &str) -> BTreeMap<String, P> {
        params(&[
            ("filters", P::Int(filters)),
            ("kernel_size", P::Int(k)),
            ("strides", P::Int(s)),
            ("dilation_rate", P::Int(d)),
            ("padding", P::Str(pad.into())),
            ("activation", P::Str("linear".into())),
            ("use_bias", P::Bool(true)),
        ])
    }

    fn spec(shape: &[usize]) -> TensorSpec {
        TensorSpec::new(DTypeLabel::Float32, shape.to_vec())
    }

    #[test]
    fn conv2d_valid_padding() {
        let s = infer_node(
            "Conv2D",
            &conv(2, 3, 1, 1, "valid"),
            &[&spec(&[5, 8, 8, 3])],
            DTypeLabel::Float32,
        )
        .unwrap();
        assert_eq!(s.shape, vec![5, 6, 6, 2]);
    }

    #[test]
    fn conv2d_same_padding_rounds_up() {
        let s = infer_node(
            "Conv2D",
            &conv(4, 3, 2, 1, "same"),
            &[&spec(&[1, 7, 7, 1])],
            DTypeLabel::Float32,
        )
        .unwrap();
        assert_eq!(s.shape, vec![1, 4, 4, 4]);
    }

    #[test]
    fn dense_replaces_last_extent() {
        let s = infer_node(
            "Dense",
            &params(&[("units", P::Int(4))]),
            &[&spec(&[5, 16])],
            DTypeLabel::Float32,
        )
        .unwrap();
        assert_eq!(s.shape, vec![5, 4]);
    }

    #[test]
    fn max_pool_valid() {
        let p = params(&[
            ("pool_size", P::Int(2)),
            ("strides", P::Int(2)),
            ("padding", P::Str("valid".into())),
        ]);
        let s = infer_node("MaxPooling2D", &p, &[&spec(&[1, 7, 7, 1])], DTypeLabel::Float32).unwrap();
        assert_eq!(s.shape, vec![1, 3, 3, 1]);
    }

    #[test]
    fn kernel_larger_than_extent_fails() {
        let r = infer_node(
            "Conv2D",
            &conv(2, 5, 1, 2, "valid"),
            &[&spec(&[1, 6, 6, 1])],
            DTypeLabel::Float32,
        );
        assert!(r.is_err());
    }

    #[test]
    fn concatenate_sums_axis() {
        let p = params(&[("axis", P::Int(-1))]);
        let a = spec(&[2, 3, 4]);
        let s = infer_node("Concatenate", &p, &[&a, &a], DTypeLabel::Float32).unwrap();
        assert_eq!(s.shape, vec![2, 3, 8]);
    }

    #[test]
    fn geometry_same_padding() {
        let g = conv_geometry(8, 3, 2, 2, true).unwrap();
        assert_eq!(g.out, 4);
        // (4-1)*2 + 5 - 8 = 3
        assert_eq!(g.pad_total, 3);
        assert_eq!(g.pad_before, 1);
    }
}
