//! Small hand-built seed models, referenced as `zoo:<name>`.

use std::collections::BTreeMap;

use crate::dtype::DTypeLabel;
use crate::graph::{infer_specs, ModelGraph, Source};
use crate::registry::{ParamValue, Registry};
use crate::tensor::TensorSpec;

pub const NAMES: [&str; 5] = ["lenet", "resnet-block", "mobilenet-like", "text-conv1d", "mlp"];

struct Builder<'a> {
    registry: &'a Registry,
    g: ModelGraph,
}

impl<'a> Builder<'a> {
    fn new(registry: &'a Registry, input: Vec<usize>) -> Self {
        Builder {
            registry,
            g: ModelGraph::new(input[0], 7, vec![TensorSpec::new(DTypeLabel::Float32, input)]),
        }
    }

    fn node(&mut self, kind: &str, overrides: &[(&str, ParamValue)], inputs: Vec<Source>) -> Source {
        let mut params = self.registry.schema(kind).expect("zoo kind").default_params();
        for (k, v) in overrides {
            params.insert(k.to_string(), v.clone());
        }
        Source::node(self.g.add_node(kind, params, inputs, DTypeLabel::Float32))
    }

    fn then(&mut self, src: Source, kind: &str, overrides: &[(&str, ParamValue)]) -> Source {
        self.node(kind, overrides, vec![src])
    }

    fn finish(mut self, out: Source) -> ModelGraph {
        self.g.outputs = vec![out];
        infer_specs(&mut self.g, self.registry).expect("zoo model infers");
        self.g
    }
}

fn int(v: i64) -> ParamValue {
    ParamValue::Int(v)
}

fn text(v: &str) -> ParamValue {
    ParamValue::Str(v.to_string())
}

/// Builds the named seed model.
pub fn model(name: &str, registry: &Registry) -> Option<ModelGraph> {
    let g = match name {
        "lenet" => {
            let mut b = Builder::new(registry, vec![2, 12, 12, 1]);
            let x = b.then(Source::input(0), "Conv2D", &[("filters", int(4)), ("activation", text("relu"))]);
            let x = b.then(x, "MaxPooling2D", &[]);
            let x = b.then(x, "Conv2D", &[("filters", int(6)), ("kernel_size", int(2)), ("activation", text("relu"))]);
            let x = b.then(x, "MaxPooling2D", &[]);
            let x = b.then(x, "Flatten", &[]);
            let x = b.then(x, "Dense", &[("units", int(12)), ("activation", text("relu"))]);
            let x = b.then(x, "Dense", &[("units", int(4))]);
            let x = b.then(x, "Softmax", &[]);
            b.finish(x)
        }
        "resnet-block" => {
            let mut b = Builder::new(registry, vec![2, 8, 8, 4]);
            let same = [("padding", text("same")), ("filters", int(4))];
            let x = b.then(Source::input(0), "Conv2D", &same);
            let x = b.then(x, "BatchNormalization", &[]);
            let x = b.then(x, "ReLU", &[]);
            let x = b.then(x, "Conv2D", &same);
            let x = b.then(x, "BatchNormalization", &[]);
            let x = b.node("Add", &[], vec![x, Source::input(0)]);
            let x = b.then(x, "ReLU", &[]);
            b.finish(x)
        }
        "mobilenet-like" => {
            let mut b = Builder::new(registry, vec![2, 9, 9, 3]);
            let x = b.then(Source::input(0), "SeparableConv2D", &[("filters", int(6)), ("strides", int(2)), ("padding", text("same"))]);
            let x = b.then(x, "BatchNormalization", &[]);
            let x = b.then(x, "ReLU", &[("max_value", ParamValue::Real(6.0))]);
            let x = b.then(x, "GlobalAveragePooling2D", &[]);
            let x = b.then(x, "Dropout", &[]);
            let x = b.then(x, "Dense", &[("units", int(5))]);
            let x = b.then(x, "Softmax", &[]);
            b.finish(x)
        }
        "text-conv1d" => {
            let mut b = Builder::new(registry, vec![2, 10, 4]);
            let x = b.then(Source::input(0), "Conv1D", &[("filters", int(6)), ("activation", text("relu"))]);
            let x = b.then(x, "LayerNormalization", &[]);
            let x = b.then(x, "Conv1D", &[("filters", int(4)), ("dilation_rate", int(2))]);
            let x = b.then(x, "ELU", &[]);
            let x = b.then(x, "Flatten", &[]);
            let x = b.then(x, "Dense", &[("units", int(3))]);
            let x = b.then(x, "Softmax", &[]);
            b.finish(x)
        }
        "mlp" => {
            let mut b = Builder::new(registry, vec![2, 10]);
            let x = b.then(Source::input(0), "Dense", &[("units", int(16)), ("activation", text("tanh"))]);
            let x = b.then(x, "Dropout", &[]);
            let y = b.then(x, "Dense", &[("units", int(16))]);
            let y = b.then(y, "LeakyReLU", &[]);
            let x = b.node("Concatenate", &[], vec![x, y]);
            let x = b.then(x, "LayerNormalization", &[]);
            let x = b.then(x, "Dense", &[("units", int(4)), ("activation", text("sigmoid"))]);
            b.finish(x)
        }
        _ => return None,
    };
    Some(g)
}

/// All zoo models keyed by name.
pub fn all(registry: &Registry) -> BTreeMap<&'static str, ModelGraph> {
    NAMES
        .iter()
        .map(|n| (*n, model(n, registry).expect("listed model")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate;

    #[test]
    fn every_zoo_model_validates() {
        let reg = Registry::builtin();
        for (name, g) in all(&reg) {
            validate(&g, &reg).unwrap_or_else(|v| panic!("{name}: {v:?}"));
        }
        assert!(model("vgg", &reg).is_none());
    }
}
