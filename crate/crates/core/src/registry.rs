//! Operator registry: the closed universe of operator kinds.
//!
//! Every coverage denominator is derived from here. The registry is loaded
//! from a TOML description (the built-in one lives in `registry/default.toml`)
//! and is immutable afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dtype::DTypeLabel;

const DEFAULT_REGISTRY: &str = include_str!("../registry/default.toml");

/// A concrete parameter value as it appears on a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Real(f64),
    Str(String),
    Shape(Vec<usize>),
}

impl ParamValue {
    /// Canonical text form; coverage sets store these.
    pub fn canonical(&self) -> String {
        match self {
            ParamValue::Bool(b) => b.to_string(),
            ParamValue::Int(i) => i.to_string(),
            ParamValue::Real(r) => canonical_real(*r),
            ParamValue::Str(s) => s.clone(),
            ParamValue::Shape(dims) => dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x"),
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ParamValue::Int(i) => Some(*i),
            ParamValue::Real(r) if r.fract() == 0.0 => Some(*r as i64),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(i) => Some(*i as f64),
            ParamValue::Real(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ParamValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_shape(&self) -> Option<&[usize]> {
        match self {
            ParamValue::Shape(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

fn canonical_real(r: f64) -> String {
    let rounded = (r * 1e6).round() / 1e6;
    // -0 and 0 are the same coverage bucket
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    format!("{rounded}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Numeric,
    Categorical,
    /// Free-form extent list; only utility operators use it.
    Shape,
}

/// Inclusive numeric interval. Integer ranges sample every integer;
/// real ranges sample the grid `min + k * step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericRange {
    pub min: f64,
    pub max: f64,
    #[serde(default)]
    pub integer: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
}

impl NumericRange {
    fn values(&self) -> Vec<ParamValue> {
        if self.integer {
            (self.min as i64..=self.max as i64)
                .map(ParamValue::Int)
                .collect()
        } else {
            let step = self.step.unwrap_or((self.max - self.min) / 10.0);
            let n = ((self.max - self.min) / step + 1e-9).floor() as usize;
            (0..=n)
                .map(|k| {
                    let v = self.min + k as f64 * step;
                    ParamValue::Real((v * 1e9).round() / 1e9)
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categorical_domain: Vec<ParamValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeric_range: Option<NumericRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ParamValue>,
}

impl ParamSpec {
    /// Coverage denominator `n_pi`: the domain length for categorical
    /// parameters, `sigma` for numeric ones.
    pub fn space_size(&self, sigma: usize) -> usize {
        match self.kind {
            ParamKind::Categorical => self.categorical_domain.len(),
            ParamKind::Numeric => sigma,
            ParamKind::Shape => 0,
        }
    }

    /// Every value the sampler can produce, in domain order.
    pub fn domain(&self) -> Vec<ParamValue> {
        match self.kind {
            ParamKind::Categorical => self.categorical_domain.clone(),
            ParamKind::Numeric => self
                .numeric_range
                .as_ref()
                .map(NumericRange::values)
                .unwrap_or_default(),
            ParamKind::Shape => Vec::new(),
        }
    }

    pub fn default_value(&self) -> ParamValue {
        if let Some(v) = &self.default {
            return v.clone();
        }
        match self.kind {
            ParamKind::Shape => ParamValue::Shape(Vec::new()),
            _ => self
                .domain()
                .into_iter()
                .next()
                .unwrap_or(ParamValue::Int(0)),
        }
    }

    /// True when `value` is drawn from this parameter's domain.
    pub fn admits(&self, value: &ParamValue) -> bool {
        match self.kind {
            ParamKind::Shape => value.as_shape().is_some(),
            _ => {
                let c = value.canonical();
                self.domain().iter().any(|v| v.canonical() == c)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arity {
    pub min: usize,
    pub max: usize,
}

impl Arity {
    pub fn contains(&self, n: usize) -> bool {
        (self.min..=self.max).contains(&n)
    }
}

fn all_dtypes() -> BTreeSet<DTypeLabel> {
    DTypeLabel::ALL.into_iter().collect()
}

/// Per-kind contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSchema {
    pub kind: String,
    pub input_arity: Arity,
    pub accepted_input_ranks: BTreeSet<usize>,
    pub produced_output_ranks: BTreeSet<usize>,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default = "all_dtypes")]
    pub accepted_dtypes: BTreeSet<DTypeLabel>,
    #[serde(default)]
    pub is_merging: bool,
    #[serde(default)]
    pub is_utility: bool,
}

impl OperatorSchema {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Parameters that count toward parameter coverage.
    pub fn mutable_params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.iter().filter(|p| p.kind != ParamKind::Shape)
    }

    /// `n_dim(l)`: the number of accepted input ranks.
    pub fn n_dim(&self) -> usize {
        self.accepted_input_ranks.len()
    }

    pub fn default_params(&self) -> BTreeMap<String, ParamValue> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.default_value()))
            .collect()
    }

    fn check(&self) -> Result<(), RegistryError> {
        let bad = |reason: &str| RegistryError::InvalidSchema {
            kind: self.kind.clone(),
            reason: reason.to_string(),
        };
        if self.accepted_input_ranks.is_empty() || self.produced_output_ranks.is_empty() {
            return Err(RegistryError::EmptyRankSet(self.kind.clone()));
        }
        if self.input_arity.min > self.input_arity.max || self.input_arity.min == 0 {
            return Err(bad("input_arity must satisfy 1 <= min <= max"));
        }
        if self.is_merging && self.input_arity.min < 2 {
            return Err(bad("merging kinds need input_arity.min >= 2"));
        }
        if !self.is_merging && (self.input_arity.min != 1 || self.input_arity.max != 1) {
            return Err(bad("non-merging kinds take exactly one input"));
        }
        if self.accepted_dtypes.is_empty() {
            return Err(bad("accepted_dtypes is empty"));
        }
        let mut names = BTreeSet::new();
        for p in &self.params {
            if !names.insert(p.name.as_str()) {
                return Err(bad(&format!("duplicate param `{}`", p.name)));
            }
            match p.kind {
                ParamKind::Categorical => {
                    if p.categorical_domain.is_empty() {
                        return Err(bad(&format!("param `{}` has an empty domain", p.name)));
                    }
                    let distinct: BTreeSet<_> =
                        p.categorical_domain.iter().map(|v| v.canonical()).collect();
                    if distinct.len() != p.categorical_domain.len() {
                        return Err(bad(&format!("param `{}` domain has duplicates", p.name)));
                    }
                }
                ParamKind::Numeric => {
                    let Some(range) = &p.numeric_range else {
                        return Err(bad(&format!("param `{}` lacks numeric_range", p.name)));
                    };
                    if range.min > range.max || range.step.is_some_and(|s| s <= 0.0) {
                        return Err(bad(&format!("param `{}` has a bad range", p.name)));
                    }
                }
                ParamKind::Shape => {}
            }
            if let Some(d) = &p.default {
                if !p.admits(d) {
                    return Err(bad(&format!("param `{}` default outside domain", p.name)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("malformed registry document: {0}")]
    Malformed(String),
    #[error("duplicate operator kind `{0}`")]
    DuplicateKind(String),
    #[error("operator `{0}` has an empty rank set")]
    EmptyRankSet(String),
    #[error("operator `{kind}`: {reason}")]
    InvalidSchema { kind: String, reason: String },
    #[error("unknown operator kind `{0}`")]
    UnknownKind(String),
    #[error("operator `{kind}` has no parameter `{param}`")]
    UnknownParam { kind: String, param: String },
}

#[derive(Deserialize)]
struct RegistryDocument {
    registry_version: String,
    #[serde(default, rename = "operator")]
    operators: Vec<OperatorSchema>,
}

/// Immutable set of operator schemas.
#[derive(Debug, Clone)]
pub struct Registry {
    version: String,
    schemas: BTreeMap<String, OperatorSchema>,
}

impl Registry {
    /// Parses and checks a registry description.
    pub fn load(source: &str) -> Result<Self, RegistryError> {
        let doc: RegistryDocument =
            toml::from_str(source).map_err(|e| RegistryError::Malformed(e.to_string()))?;
        Self::from_schemas(doc.registry_version, doc.operators)
    }

    pub fn from_schemas(
        version: impl Into<String>,
        schemas: impl IntoIterator<Item = OperatorSchema>,
    ) -> Result<Self, RegistryError> {
        let mut map = BTreeMap::new();
        for schema in schemas {
            schema.check()?;
            if map.contains_key(&schema.kind) {
                return Err(RegistryError::DuplicateKind(schema.kind));
            }
            map.insert(schema.kind.clone(), schema);
        }
        Ok(Registry {
            version: version.into(),
            schemas: map,
        })
    }

    /// The registry shipped with the crate.
    pub fn builtin() -> Self {
        Self::load(DEFAULT_REGISTRY).expect("built-in registry is valid")
    }

    pub fn builtin_source() -> &'static str {
        DEFAULT_REGISTRY
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn schema(&self, kind: &str) -> Result<&OperatorSchema, RegistryError> {
        self.schemas
            .get(kind)
            .ok_or_else(|| RegistryError::UnknownKind(kind.to_string()))
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.schemas.contains_key(kind)
    }

    pub fn is_utility(&self, kind: &str) -> bool {
        self.schemas.get(kind).is_some_and(|s| s.is_utility)
    }

    pub fn schemas(&self) -> impl Iterator<Item = &OperatorSchema> {
        self.schemas.values()
    }

    /// Non-utility kinds in name order.
    pub fn compute_kinds(&self) -> impl Iterator<Item = &OperatorSchema> {
        self.schemas.values().filter(|s| !s.is_utility)
    }

    pub fn utility_kinds(&self) -> impl Iterator<Item = &OperatorSchema> {
        self.schemas.values().filter(|s| s.is_utility)
    }

    pub fn merging_kinds(&self) -> impl Iterator<Item = &OperatorSchema> {
        self.compute_kinds().filter(|s| s.is_merging)
    }

    /// `N_layer`.
    pub fn n_layer(&self) -> usize {
        self.compute_kinds().count()
    }

    /// Whether `a` can feed `b`: some rank `a` emits is accepted by `b`.
    pub fn valid_sequence(&self, a: &str, b: &str) -> Result<bool, RegistryError> {
        let sa = self.schema(a)?;
        let sb = self.schema(b)?;
        if sa.is_utility || sb.is_utility {
            return Ok(false);
        }
        Ok(!sa
            .produced_output_ranks
            .is_disjoint(&sb.accepted_input_ranks))
    }

    /// All valid ordered pairs of compute kinds.
    pub fn valid_pairs(&self) -> Vec<(String, String)> {
        let kinds: Vec<&OperatorSchema> = self.compute_kinds().collect();
        let mut out = Vec::new();
        for a in &kinds {
            for b in &kinds {
                if !a.produced_output_ranks.is_disjoint(&b.accepted_input_ranks) {
                    out.push((a.kind.clone(), b.kind.clone()));
                }
            }
        }
        out
    }

    /// Denominator of sequence coverage.
    pub fn sequence_space_size(&self) -> usize {
        self.valid_pairs().len()
    }

    /// Draws a value for `param_name`, preferring values whose canonical
    /// form is not in `avoid`. Falls back to a uniform draw over the whole
    /// domain when everything is avoided.
    pub fn sample_param_value<R: Rng + ?Sized>(
        &self,
        schema: &OperatorSchema,
        param_name: &str,
        avoid: &BTreeSet<String>,
        rng: &mut R,
    ) -> Result<ParamValue, RegistryError> {
        let spec = schema
            .param(param_name)
            .ok_or_else(|| RegistryError::UnknownParam {
                kind: schema.kind.clone(),
                param: param_name.to_string(),
            })?;
        Ok(sample_from_spec(spec, avoid, rng))
    }
}

pub(crate) fn sample_from_spec<R: Rng + ?Sized>(
    spec: &ParamSpec,
    avoid: &BTreeSet<String>,
    rng: &mut R,
) -> ParamValue {
    let domain = spec.domain();
    if domain.is_empty() {
        return spec.default_value();
    }
    let fresh: Vec<&ParamValue> = domain
        .iter()
        .filter(|v| !avoid.contains(&v.canonical()))
        .collect();
    match fresh.choose(rng) {
        Some(v) => (*v).clone(),
        None => domain.choose(rng).expect("non-empty domain").clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema(kind: &str, inputs: &[usize], outputs: &[usize]) -> OperatorSchema {
        OperatorSchema {
            kind: kind.to_string(),
            input_arity: Arity { min: 1, max: 1 },
            accepted_input_ranks: inputs.iter().copied().collect(),
            produced_output_ranks: outputs.iter().copied().collect(),
            params: Vec::new(),
            accepted_dtypes: all_dtypes(),
            is_merging: false,
            is_utility: false,
        }
    }

    const COMPUTE_KINDS: [&str; 18] = [
        "Dense",
        "Conv1D",
        "Conv2D",
        "SeparableConv2D",
        "MaxPooling2D",
        "AveragePooling2D",
        "GlobalAveragePooling2D",
        "BatchNormalization",
        "LayerNormalization",
        "ReLU",
        "LeakyReLU",
        "ELU",
        "Softmax",
        "Dropout",
        "Flatten",
        "Add",
        "Multiply",
        "Concatenate",
    ];

    #[test]
    fn builtin_registry_contents() {
        let reg = Registry::builtin();
        let compute: BTreeSet<_> = reg.compute_kinds().map(|s| s.kind.as_str()).collect();
        let expected: BTreeSet<_> = COMPUTE_KINDS.into_iter().collect();
        assert_eq!(compute, expected);
        let utility: BTreeSet<_> = reg.utility_kinds().map(|s| s.kind.as_str()).collect();
        assert_eq!(
            utility,
            ["Cast", "Crop", "Pad", "Reshape"].into_iter().collect()
        );
        assert_eq!(reg.n_layer(), 18);
        assert_eq!(reg.version(), "1");
    }

    #[test]
    fn empty_registry_has_empty_sequence_space() {
        let reg = Registry::load("registry_version = \"0\"\n").unwrap();
        assert_eq!(reg.n_layer(), 0);
        assert_eq!(reg.sequence_space_size(), 0);
    }

    #[test]
    fn pooling_cannot_feed_rank4_conv() {
        let reg = Registry::from_schemas(
            "t",
            [
                schema("GlobalAveragePooling2D", &[4], &[2]),
                schema("Conv2D", &[4], &[4]),
            ],
        )
        .unwrap();
        assert!(!reg
            .valid_sequence("GlobalAveragePooling2D", "Conv2D")
            .unwrap());
        assert!(reg.valid_sequence("Conv2D", "GlobalAveragePooling2D").unwrap());
    }

    #[test]
    fn valid_sequence_cases() {
        let reg = Registry::from_schemas(
            "t",
            [
                schema("A", &[3, 4, 5], &[4]),
                schema("B", &[4], &[5]),
                schema("C", &[2], &[2]),
            ],
        )
        .unwrap();
        assert!(reg.valid_sequence("A", "A").unwrap());
        assert!(!reg.valid_sequence("B", "B").unwrap());
        assert!(reg.valid_sequence("C", "C").unwrap());
        assert!(matches!(
            reg.valid_sequence("A", "Z"),
            Err(RegistryError::UnknownKind(_))
        ));
    }

    #[test]
    fn seven_pair_space() {
        let reg = Registry::from_schemas(
            "t",
            [
                schema("A", &[4], &[4]),
                schema("B", &[4], &[2]),
                schema("C", &[2, 4], &[4]),
            ],
        )
        .unwrap();
        assert_eq!(reg.sequence_space_size(), 7);
        let pairs = reg.valid_pairs();
        assert!(!pairs.contains(&("B".into(), "A".into())));
        assert!(!pairs.contains(&("B".into(), "B".into())));
    }

    #[test]
    fn single_kind_self_pair() {
        let reg = Registry::from_schemas("t", [schema("A", &[2, 3], &[3])]).unwrap();
        assert_eq!(reg.sequence_space_size(), 1);
    }

    #[test]
    fn load_errors() {
        assert!(matches!(
            Registry::load("not toml ["),
            Err(RegistryError::Malformed(_))
        ));
        let dup = Registry::from_schemas("t", [schema("A", &[2], &[2]), schema("A", &[2], &[2])]);
        assert!(matches!(dup, Err(RegistryError::DuplicateKind(_))));
        let empty = Registry::from_schemas("t", [schema("A", &[], &[2])]);
        assert!(matches!(empty, Err(RegistryError::EmptyRankSet(_))));
        let mut merge = schema("M", &[2], &[2]);
        merge.is_merging = true;
        assert!(Registry::from_schemas("t", [merge]).is_err());
    }

    #[test]
    fn sample_param_prefers_fresh_values() {
        let reg = Registry::builtin();
        let conv = reg.schema("Conv2D").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let avoid: BTreeSet<String> = ["relu".to_string()].into();
        for _ in 0..50 {
            let v = reg
                .sample_param_value(conv, "activation", &avoid, &mut rng)
                .unwrap();
            assert_ne!(v.canonical(), "relu");
        }
        let strides = reg
            .sample_param_value(conv, "strides", &BTreeSet::new(), &mut rng)
            .unwrap();
        let s = strides.as_i64().unwrap();
        assert!((1..=3).contains(&s));
        let all: BTreeSet<String> = conv
            .param("activation")
            .unwrap()
            .domain()
            .iter()
            .map(|v| v.canonical())
            .collect();
        let v = reg
            .sample_param_value(conv, "activation", &all, &mut rng)
            .unwrap();
        assert!(all.contains(&v.canonical()));
        assert!(reg
            .sample_param_value(conv, "nope", &all, &mut rng)
            .is_err());
    }

    #[test]
    fn numeric_space_size_is_sigma() {
        let reg = Registry::builtin();
        let conv = reg.schema("Conv2D").unwrap();
        assert_eq!(conv.param("filters").unwrap().space_size(5), 5);
        assert_eq!(conv.param("padding").unwrap().space_size(5), 2);
        let dense = reg.schema("Dense").unwrap();
        let units = dense.param("units").unwrap().domain();
        assert_eq!(units.first().unwrap().as_i64(), Some(0));
    }

    #[test]
    fn canonical_reals() {
        assert_eq!(ParamValue::Real(0.1 + 0.2).canonical(), "0.3");
        assert_eq!(ParamValue::Real(-0.0).canonical(), "0");
        assert_eq!(ParamValue::Shape(vec![2, 3]).canonical(), "2x3");
    }
}
