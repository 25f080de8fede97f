//! Utility-node chains that convert one tensor spec into another.

use std::collections::BTreeMap;

use crate::dtype::DTypeLabel;
use crate::graph::{infer_node, ModelGraph, NodeId, Source};
use crate::registry::ParamValue;
use crate::tensor::TensorSpec;

/// Adds a node and fills its output spec from its inputs' current specs.
pub(crate) fn add_inferred(
    g: &mut ModelGraph,
    kind: &str,
    params: BTreeMap<String, ParamValue>,
    inputs: Vec<Source>,
    dtype: DTypeLabel,
) -> Result<NodeId, String> {
    let specs: Vec<TensorSpec> = inputs
        .iter()
        .map(|s| g.spec_of(*s).cloned().ok_or_else(|| format!("{s} has no spec")))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&TensorSpec> = specs.iter().collect();
    let spec = infer_node(kind, &params, &refs, dtype)?;
    let id = g.add_node(kind, params, inputs, dtype);
    g.nodes.get_mut(&id).expect("just added").output_spec = Some(spec);
    Ok(id)
}

/// Re-infers one node from its inputs' current specs.
pub(crate) fn reinfer(g: &mut ModelGraph, id: NodeId) -> Result<TensorSpec, String> {
    let node = &g.nodes[&id];
    let specs: Vec<TensorSpec> = node
        .inputs
        .iter()
        .map(|s| g.spec_of(*s).cloned().ok_or_else(|| format!("{s} has no spec")))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&TensorSpec> = specs.iter().collect();
    let spec = infer_node(&node.kind, &node.params, &refs, node.dtype)?;
    g.nodes.get_mut(&id).expect("node").output_spec = Some(spec.clone());
    Ok(spec)
}

fn shape_param(shape: &[usize]) -> BTreeMap<String, ParamValue> {
    BTreeMap::from([("target_shape".to_string(), ParamValue::Shape(shape.to_vec()))])
}

fn utility(
    g: &mut ModelGraph,
    kind: &str,
    shape: &[usize],
    src: Source,
    dtype: DTypeLabel,
    inserted: &mut Vec<NodeId>,
) -> Result<Source, String> {
    let id = add_inferred(g, kind, shape_param(shape), vec![src], dtype)?;
    inserted.push(id);
    Ok(Source::node(id))
}

pub(crate) fn cast(
    g: &mut ModelGraph,
    src: Source,
    from: DTypeLabel,
    to: DTypeLabel,
    inserted: &mut Vec<NodeId>,
) -> Result<Source, String> {
    let params = BTreeMap::from([("dtype".to_string(), ParamValue::Str(to.as_str().to_string()))]);
    let id = add_inferred(g, "Cast", params, vec![src], from)?;
    inserted.push(id);
    Ok(Source::node(id))
}

pub(crate) fn reshape(
    g: &mut ModelGraph,
    src: Source,
    shape: &[usize],
    inserted: &mut Vec<NodeId>,
) -> Result<Source, String> {
    let dtype = g.spec_of(src).ok_or("no spec")?.dtype;
    utility(g, "Reshape", shape, src, dtype, inserted)
}

/// Crops and/or pads (constant 0) `src` to `target`, which must have the
/// same rank.
pub(crate) fn crop_pad(
    g: &mut ModelGraph,
    src: Source,
    target: &[usize],
    inserted: &mut Vec<NodeId>,
) -> Result<Source, String> {
    let spec = g.spec_of(src).ok_or("no spec")?.clone();
    if spec.rank() != target.len() {
        return Err(format!("rank mismatch {:?} vs {target:?}", spec.shape));
    }
    let mut cur = src;
    let lower: Vec<usize> = spec.shape.iter().zip(target).map(|(a, b)| *a.min(b)).collect();
    if lower != spec.shape {
        cur = utility(g, "Crop", &lower, cur, spec.dtype, inserted)?;
    }
    if lower.as_slice() != target {
        cur = utility(g, "Pad", target, cur, spec.dtype, inserted)?;
    }
    Ok(cur)
}

/// Rank change: appends length-1 dims when growing, folds trailing dims
/// into the last kept one when shrinking.
pub(crate) fn change_rank(
    g: &mut ModelGraph,
    src: Source,
    rank: usize,
    inserted: &mut Vec<NodeId>,
) -> Result<Source, String> {
    let shape = g.spec_of(src).ok_or("no spec")?.shape.clone();
    if rank == shape.len() {
        return Ok(src);
    }
    if rank < 2 {
        return Err(format!("cannot adapt to rank {rank}"));
    }
    let target: Vec<usize> = if rank > shape.len() {
        shape
            .iter()
            .copied()
            .chain(std::iter::repeat_n(1, rank - shape.len()))
            .collect()
    } else {
        let mut t = shape[..rank - 1].to_vec();
        t.push(shape[rank - 1..].iter().product());
        t
    };
    reshape(g, src, &target, inserted)
}

/// Cast, rank change and crop/pad taking `src` to exactly `target`.
pub(crate) fn adapt(
    g: &mut ModelGraph,
    src: Source,
    target: &TensorSpec,
    inserted: &mut Vec<NodeId>,
) -> Result<Source, String> {
    let spec = g.spec_of(src).ok_or("no spec")?.clone();
    if spec.shape.first() != target.shape.first() {
        return Err("batch extent differs".into());
    }
    let mut cur = src;
    if spec.dtype != target.dtype {
        cur = cast(g, cur, spec.dtype, target.dtype, inserted)?;
    }
    cur = change_rank(g, cur, target.rank(), inserted)?;
    crop_pad(g, cur, &target.shape, inserted)
}

/// Repairs `id`'s output back to `original` and points every former use of
/// `id` at the repaired tensor. Returns the tensor consumers now see.
pub(crate) fn restore_output(
    g: &mut ModelGraph,
    id: NodeId,
    original: &TensorSpec,
    inserted: &mut Vec<NodeId>,
) -> Result<Source, String> {
    let current = g.nodes[&id].output_spec.clone().ok_or("node not inferred")?;
    if current == *original {
        return Ok(Source::node(id));
    }
    let before = inserted.len();
    let repaired = adapt(g, Source::node(id), original, inserted)?;
    let keep: Vec<NodeId> = inserted[before..].to_vec();
    g.redirect_uses(Source::node(id), repaired, &keep);
    Ok(repaired)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{infer_specs, validate};
    use crate::registry::Registry;

    #[test]
    fn adapt_covers_dtype_rank_and_extent() {
        let reg = Registry::builtin();
        let mut g = ModelGraph::new(2, 0, vec![TensorSpec::new(DTypeLabel::Float32, vec![2, 5])]);
        let target = TensorSpec::new(DTypeLabel::Float16, vec![2, 3, 4, 1]);
        let mut inserted = Vec::new();
        let out = adapt(&mut g, Source::input(0), &target, &mut inserted).unwrap();
        g.outputs.push(out);
        infer_specs(&mut g, &reg).unwrap();
        assert_eq!(g.spec_of(out), Some(&target));
        validate(&g, &reg).unwrap();
        let kinds: Vec<&str> = inserted.iter().map(|id| g.nodes[id].kind.as_str()).collect();
        assert_eq!(kinds, vec!["Cast", "Reshape", "Crop", "Pad"]);
    }

    #[test]
    fn shrinking_rank_folds_trailing_dims() {
        let mut g = ModelGraph::new(2, 0, vec![TensorSpec::new(DTypeLabel::Float32, vec![2, 3, 4, 5])]);
        let mut inserted = Vec::new();
        let out = change_rank(&mut g, Source::input(0), 2, &mut inserted).unwrap();
        assert_eq!(g.spec_of(out).unwrap().shape, vec![2, 60]);
    }
}
