//! JSON model-exchange document.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dtype::DTypeLabel;
use crate::registry::{ParamValue, Registry};
use crate::tensor::TensorSpec;

use super::sidecar::{self, SidecarError, SidecarKey};
use super::{infer_specs, LayerNode, ModelGraph, NodeId, Source, SpecialValue};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("malformed model document: {0}")]
    Malformed(String),
    #[error("unsupported format_version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("document targets registry version `{found}`, loaded registry is `{expected}`")]
    RegistryVersion { found: String, expected: String },
    #[error("unknown kind `{0}`")]
    UnknownKind(String),
    #[error("duplicate node id {0}")]
    DuplicateId(NodeId),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sidecar(#[from] SidecarError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: NodeId,
    kind: String,
    params: BTreeMap<String, ParamValue>,
    inputs: Vec<Source>,
    dtype: DTypeLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_override: Option<SpecialValue>,
}

#[derive(Serialize, Deserialize)]
struct SidecarRef {
    path: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format_version: u32,
    registry_version: String,
    batch: usize,
    weight_seed: u64,
    inputs: Vec<TensorSpec>,
    nodes: Vec<NodeDoc>,
    outputs: Vec<Source>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sidecar: Option<SidecarRef>,
}

fn to_document(graph: &ModelGraph, registry: &Registry, sidecar: Option<String>) -> Document {
    Document {
        format_version: FORMAT_VERSION,
        registry_version: registry.version().to_string(),
        batch: graph.batch,
        weight_seed: graph.weight_seed,
        inputs: graph.inputs.clone(),
        nodes: graph
            .nodes
            .values()
            .map(|n| NodeDoc {
                id: n.id,
                kind: n.kind.clone(),
                params: n.params.clone(),
                inputs: n.inputs.clone(),
                dtype: n.dtype,
                input_override: n.input_override,
            })
            .collect(),
        outputs: graph.outputs.clone(),
        sidecar: sidecar.map(|path| SidecarRef { path }),
    }
}

/// Pretty-printed document. Explicit weights are not embedded; use
/// [`save_model`] to write them to a sidecar.
pub fn serialize(graph: &ModelGraph, registry: &Registry) -> String {
    serde_json::to_string_pretty(&to_document(graph, registry, None)).expect("serializable")
}

fn from_document(doc: Document, registry: &Registry) -> Result<(ModelGraph, Option<String>), FormatError> {
    if doc.format_version != FORMAT_VERSION {
        return Err(FormatError::Version {
            found: doc.format_version,
        });
    }
    if doc.registry_version != registry.version() {
        return Err(FormatError::RegistryVersion {
            found: doc.registry_version,
            expected: registry.version().to_string(),
        });
    }
    let mut graph = ModelGraph::new(doc.batch, doc.weight_seed, doc.inputs);
    for n in doc.nodes {
        if !registry.contains(&n.kind) {
            return Err(FormatError::UnknownKind(n.kind));
        }
        if graph.nodes.contains_key(&n.id) {
            return Err(FormatError::DuplicateId(n.id));
        }
        let mut node = LayerNode::new(n.id, n.kind, n.params, n.inputs, n.dtype);
        node.input_override = n.input_override;
        graph.nodes.insert(n.id, node);
    }
    graph.outputs = doc.outputs;
    infer_specs(&mut graph, registry).map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok((graph, doc.sidecar.map(|s| s.path)))
}

/// Parses a document and infers all specs. A referenced sidecar is ignored;
/// use [`load_model`] to resolve it.
pub fn deserialize(text: &str, registry: &Registry) -> Result<ModelGraph, FormatError> {
    let doc: Document =
        serde_json::from_str(text).map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok(from_document(doc, registry)?.0)
}

/// Writes `path` and, when the graph carries explicit tensors, a sidecar
/// next to it with extension `.lfts`.
pub fn save_model(graph: &ModelGraph, registry: &Registry, path: &Path) -> Result<(), FormatError> {
    let mut sidecar_name = None;
    if !graph.explicit_weights.is_empty() || !graph.explicit_inputs.is_empty() {
        let side: PathBuf = path.with_extension("lfts");
        let mut entries: Vec<(SidecarKey, _)> = graph
            .explicit_inputs
            .iter()
            .map(|(i, t)| (SidecarKey::Input(*i), t.clone()))
            .collect();
        entries.extend(
            graph
                .explicit_weights
                .iter()
                .map(|((node, slot), t)| (SidecarKey::Weight { node: *node, slot: *slot }, t.clone())),
        );
        sidecar::write_file(&side, &entries)?;
        sidecar_name = side.file_name().map(|n| n.to_string_lossy().into_owned());
    }
    let doc = to_document(graph, registry, sidecar_name);
    std::fs::write(path, serde_json::to_string_pretty(&doc).expect("serializable"))?;
    Ok(())
}

/// Reads a document plus its sidecar (resolved relative to the document).
pub fn load_model(path: &Path, registry: &Registry) -> Result<ModelGraph, FormatError> {
    let text = std::fs::read_to_string(path)?;
    let doc: Document =
        serde_json::from_str(&text).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let (mut graph, side) = from_document(doc, registry)?;
    if let Some(side) = side {
        let side_path = path.parent().unwrap_or(Path::new(".")).join(side);
        for (key, t) in sidecar::read_file(&side_path)? {
            match key {
                SidecarKey::Weight { node, slot } => {
                    graph.explicit_weights.insert((node, slot), t);
                }
                SidecarKey::Input(i) => {
                    graph.explicit_inputs.insert(i, t);
                }
                SidecarKey::Output(_) => {}
            }
        }
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ValueTensor;

    fn small() -> ModelGraph {
        let reg = Registry::builtin();
        let mut g = ModelGraph::new(2, 9, vec![TensorSpec::new(DTypeLabel::Float32, vec![2, 4])]);
        let d = g.add_node(
            "Dense",
            reg.schema("Dense").unwrap().default_params(),
            vec![Source::input(0)],
            DTypeLabel::Float32,
        );
        let r = g.add_node(
            "ReLU",
            reg.schema("ReLU").unwrap().default_params(),
            vec![Source::node(d)],
            DTypeLabel::Float32,
        );
        g.nodes.get_mut(&r).unwrap().input_override = Some(SpecialValue::Inf);
        g.outputs.push(Source::node(r));
        infer_specs(&mut g, &reg).unwrap();
        g
    }

    #[test]
    fn round_trip() {
        let reg = Registry::builtin();
        let g = small();
        let back = deserialize(&serialize(&g, &reg), &reg).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn unknown_kind_rejected() {
        let reg = Registry::builtin();
        let text = serialize(&small(), &reg).replace("\"ReLU\"", "\"Mystery\"");
        assert!(matches!(deserialize(&text, &reg), Err(FormatError::UnknownKind(k)) if k == "Mystery"));
    }

    #[test]
    fn version_mismatch_rejected() {
        let reg = Registry::builtin();
        let text = serialize(&small(), &reg).replace("\"format_version\": 1", "\"format_version\": 7");
        assert!(matches!(deserialize(&text, &reg), Err(FormatError::Version { found: 7 })));
    }

    #[test]
    fn empty_graph_round_trips() {
        let reg = Registry::builtin();
        let g = ModelGraph::new(2, 0, vec![TensorSpec::new(DTypeLabel::Float32, vec![2, 3])]);
        let back = deserialize(&serialize(&g, &reg), &reg).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn sidecar_attached_on_save() {
        let reg = Registry::builtin();
        let mut g = small();
        let spec = TensorSpec::new(DTypeLabel::Float32, vec![2, 4]);
        g.explicit_inputs.insert(0, ValueTensor::filled(spec, 0.25));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&g, &reg, &path).unwrap();
        assert!(dir.path().join("m.lfts").exists());
        let back = load_model(&path, &reg).unwrap();
        assert_eq!(back, g);
    }
}
