use std::collections::BTreeSet;

use layerfuzz::coverage::{
    collect_diversity, cov_input, cov_param, cov_sequence, mean_coverage, CoverageConfig, DiversityItem,
    DiversitySnapshot,
};
use layerfuzz::dtype::DTypeLabel;
use layerfuzz::registry::{Arity, NumericRange, OperatorSchema, ParamKind, ParamSpec, ParamValue, Registry};
use layerfuzz::zoo;

fn schema(kind: &str, inputs: &[usize], outputs: &[usize], params: Vec<ParamSpec>) -> OperatorSchema {
    OperatorSchema {
        kind: kind.into(),
        input_arity: Arity { min: 1, max: 1 },
        accepted_input_ranks: inputs.iter().copied().collect(),
        produced_output_ranks: outputs.iter().copied().collect(),
        params,
        accepted_dtypes: DTypeLabel::ALL.into_iter().collect(),
        is_merging: false,
        is_utility: false,
    }
}

fn categorical(name: &str, values: &[&str]) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind: ParamKind::Categorical,
        categorical_domain: values.iter().map(|v| ParamValue::Str(v.to_string())).collect(),
        numeric_range: None,
        default: None,
    }
}

fn numeric(name: &str, min: i64, max: i64) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind: ParamKind::Numeric,
        categorical_domain: Vec::new(),
        numeric_range: Some(NumericRange {
            min: min as f64,
            max: max as f64,
            integer: true,
            step: None,
        }),
        default: None,
    }
}

fn abc() -> Registry {
    Registry::from_schemas(
        "t",
        [
            schema("A", &[4], &[4], vec![]),
            schema("B", &[4], &[2], vec![]),
            schema("C", &[2, 4], &[4], vec![]),
        ],
    )
    .unwrap()
}

fn seq(a: &str, b: &str) -> DiversityItem {
    DiversityItem::Sequence {
        from: a.into(),
        to: b.into(),
    }
}

#[test]
fn input_coverage_five_fourteenths() {
    let reg = Registry::from_schemas("t", [schema("K", &[2, 3, 4], &[4], vec![])]).unwrap();
    let mut snap = DiversitySnapshot::default();
    for dtype in [DTypeLabel::Float32, DTypeLabel::Float64] {
        snap.insert(&DiversityItem::Dtype { kind: "K".into(), dtype });
    }
    snap.insert(&DiversityItem::Rank { kind: "K".into(), rank: 4 });
    for shape in ["2x8x8x3", "2x6x6x3"] {
        snap.insert(&DiversityItem::Shape {
            kind: "K".into(),
            shape: shape.into(),
        });
    }
    let v = cov_input("K", &snap, &CoverageConfig::default(), &reg).unwrap();
    assert!((v - 5.0 / 14.0).abs() < 1e-12, "{v}");
}

#[test]
fn param_coverage_four_sevenths() {
    let reg = Registry::from_schemas(
        "t",
        [schema(
            "Conv2D",
            &[4],
            &[4],
            vec![categorical("padding", &["valid", "same"]), numeric("filters", 1, 8)],
        )],
    )
    .unwrap();
    let mut snap = DiversitySnapshot::default();
    for (param, value) in [("padding", "valid"), ("padding", "same"), ("filters", "2"), ("filters", "7")] {
        snap.insert(&DiversityItem::Param {
            kind: "Conv2D".into(),
            param: param.into(),
            value: value.into(),
        });
    }
    let v = cov_param("Conv2D", &snap, &CoverageConfig::default(), &reg).unwrap();
    assert!((v - 4.0 / 7.0).abs() < 1e-12, "{v}");
}

#[test]
fn seven_pair_sequence_space() {
    let reg = abc();
    assert_eq!(reg.sequence_space_size(), 7);
    let kinds = ["A", "B", "C"];
    let mut brute = 0;
    for a in kinds {
        for b in kinds {
            let sa = reg.schema(a).unwrap();
            let sb = reg.schema(b).unwrap();
            let ok = !sa.produced_output_ranks.is_disjoint(&sb.accepted_input_ranks);
            assert_eq!(reg.valid_sequence(a, b).unwrap(), ok);
            brute += usize::from(ok);
        }
    }
    assert_eq!(brute, 7);
    assert!(!reg.valid_sequence("B", "A").unwrap());
    assert!(!reg.valid_sequence("B", "B").unwrap());

    let mut snap = DiversitySnapshot::default();
    for (a, b) in [("A", "A"), ("A", "B"), ("B", "C")] {
        snap.insert(&seq(a, b));
    }
    assert!((cov_sequence(&snap, &reg) - 3.0 / 7.0).abs() < 1e-12);
}

#[test]
fn invalid_pairs_do_not_count() {
    let reg = abc();
    let mut snap = DiversitySnapshot::default();
    snap.insert(&seq("B", "A"));
    assert_eq!(cov_sequence(&snap, &reg), 0.0);
}

#[test]
fn caps_on_shapes_dtypes_and_numeric_values() {
    let reg = Registry::from_schemas("t", [schema("K", &[2], &[2], vec![numeric("units", 0, 16)])]).unwrap();
    let cfg = CoverageConfig::default();
    assert_eq!((cfg.sigma, cfg.n_shape, cfg.n_type), (5, 5, 6));
    let mut snap = DiversitySnapshot::default();
    for dtype in DTypeLabel::ALL {
        snap.insert(&DiversityItem::Dtype { kind: "K".into(), dtype });
    }
    snap.insert(&DiversityItem::Rank { kind: "K".into(), rank: 2 });
    for i in 0..9 {
        snap.insert(&DiversityItem::Shape {
            kind: "K".into(),
            shape: format!("2x{i}"),
        });
        snap.insert(&DiversityItem::Param {
            kind: "K".into(),
            param: "units".into(),
            value: i.to_string(),
        });
    }
    assert_eq!(cov_input("K", &snap, &cfg, &reg).unwrap(), 1.0);
    assert_eq!(cov_param("K", &snap, &cfg, &reg).unwrap(), 1.0);
}

#[test]
fn kinds_without_params_report_full_param_coverage() {
    let reg = abc();
    let snap = DiversitySnapshot::default();
    assert_eq!(cov_param("A", &snap, &CoverageConfig::default(), &reg).unwrap(), 1.0);
    assert_eq!(cov_input("A", &snap, &CoverageConfig::default(), &reg).unwrap(), 0.0);
}

#[test]
fn unknown_kind_is_an_error() {
    let reg = abc();
    assert!(cov_input("Z", &DiversitySnapshot::default(), &CoverageConfig::default(), &reg).is_err());
}

#[test]
fn utility_kinds_never_appear_in_snapshots() {
    let reg = Registry::builtin();
    let utility: BTreeSet<&str> = reg.utility_kinds().map(|s| s.kind.as_str()).collect();
    for g in zoo::all(&reg).values() {
        let snap = collect_diversity(g, &reg);
        for k in snap.kinds.keys() {
            assert!(!utility.contains(k.as_str()), "{k}");
        }
        for (a, b) in &snap.sequences {
            assert!(!utility.contains(a.as_str()) && !utility.contains(b.as_str()));
        }
    }
}

#[test]
fn zoo_coverage_is_a_fraction() {
    let reg = Registry::builtin();
    let mut snap = DiversitySnapshot::default();
    for g in zoo::all(&reg).values() {
        snap.merge(&collect_diversity(g, &reg));
    }
    let (ci, cp) = mean_coverage(&snap, &CoverageConfig::default(), &reg);
    let cs = cov_sequence(&snap, &reg);
    for v in [ci, cp, cs] {
        assert!(v > 0.0 && v < 1.0, "{v}");
    }
}
