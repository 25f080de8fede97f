use std::collections::BTreeSet;

use layerfuzz::difftest::{
    builtin_backend, collapse_outputs, d_mad, pseudo_label, run_differential, Backend, DmadError, Execution,
    Failure, Handle, VerdictKind,
};
use layerfuzz::dtype::DTypeLabel;
use layerfuzz::graph::ModelGraph;
use layerfuzz::registry::Registry;
use layerfuzz::tensor::{TensorSpec, ValueTensor};
use layerfuzz::zoo;
use proptest::prelude::*;

#[test]
fn identical_outputs_have_zero_distance() {
    let y = [0.3, -2.0, 5.0];
    assert_eq!(d_mad(&y, &y, &[0.0, 1.0, 0.0]).unwrap(), 0.0);
    assert_eq!(d_mad(&[0.0], &[0.0], &[0.0]).unwrap(), 0.0);
}

#[test]
fn one_versus_three_is_one_half() {
    assert!((d_mad(&[1.0], &[3.0], &[0.0]).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn one_sided_zero_deviation_is_one() {
    assert_eq!(d_mad(&[0.0, 1.0], &[4.0, -1.0], &[0.0, 1.0]).unwrap(), 1.0);
}

#[test]
fn length_mismatch_is_an_error() {
    assert_eq!(
        d_mad(&[1.0], &[1.0, 2.0], &[0.0]),
        Err(DmadError::LengthMismatch(1, 2, 1))
    );
}

#[test]
fn collapse_pads_and_sums() {
    let a = ValueTensor::new(TensorSpec::new(DTypeLabel::Float64, vec![3]), vec![1.0, 2.0, 3.0]);
    let b = ValueTensor::new(TensorSpec::new(DTypeLabel::Float64, vec![1, 2]), vec![10.0, 20.0]);
    assert_eq!(collapse_outputs(&[a, b]), vec![11.0, 22.0, 3.0]);
    assert!(collapse_outputs(&[]).is_empty());
}

#[test]
fn pseudo_label_is_one_hot() {
    for len in 1..20 {
        let o = pseudo_label(7, len);
        assert_eq!(o.iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(o.iter().filter(|v| **v == 0.0).count(), len - 1);
        assert_eq!(o, pseudo_label(7, len));
    }
}

/// Returns fixed outputs, or fails.
struct Canned {
    id: &'static str,
    out: Option<Vec<f64>>,
}

impl Backend for Canned {
    fn id(&self) -> String {
        self.id.into()
    }
    fn build(&mut self, _graph: &ModelGraph) -> Result<Handle, Failure> {
        Ok(Handle(0))
    }
    fn execute(&mut self, _h: Handle, _inputs: &[ValueTensor]) -> Result<Execution, Failure> {
        match &self.out {
            None => Err(Failure::run("boom at n3 [2, 4]")),
            Some(v) => Ok(Execution {
                outputs: vec![ValueTensor::new(TensorSpec::new(DTypeLabel::Float64, vec![v.len()]), v.clone())],
                behavior: BTreeSet::from([format!("{}:ran", self.id)]),
                work: 1,
            }),
        }
    }
}

fn canned(a: Option<Vec<f64>>, b: Option<Vec<f64>>) -> Vec<Box<dyn Backend>> {
    vec![Box::new(Canned { id: "a", out: a }), Box::new(Canned { id: "b", out: b })]
}

fn verdict(a: Option<Vec<f64>>, b: Option<Vec<f64>>) -> VerdictKind {
    let reg = Registry::builtin();
    let g = zoo::model("mlp", &reg).unwrap();
    run_differential(&g, &mut canned(a, b), 0.4).kind
}

#[test]
fn verdict_classification() {
    let n = f64::NAN;
    assert_eq!(verdict(None, None), VerdictKind::Invalid);
    assert_eq!(verdict(Some(vec![1.0]), None), VerdictKind::Crash);
    assert_eq!(verdict(Some(vec![n, 1.0]), Some(vec![1.0, 1.0])), VerdictKind::Nan);
    assert_eq!(verdict(Some(vec![n, 1.0]), Some(vec![1.0, n])), VerdictKind::Nan);
    assert_eq!(verdict(Some(vec![n, 1.0]), Some(vec![n, 1.0])), VerdictKind::Pass);
    assert_eq!(verdict(Some(vec![f64::INFINITY]), Some(vec![0.0])), VerdictKind::Pass);
    assert_eq!(verdict(Some(vec![1.0, 2.0]), Some(vec![1.0, 2.0])), VerdictKind::Pass);
    assert_eq!(verdict(Some(vec![10.0, 20.0]), Some(vec![0.5, 0.5])), VerdictKind::Inconsistency);
}

#[test]
fn verdict_records_behavior_and_distance() {
    let reg = Registry::builtin();
    let g = zoo::model("mlp", &reg).unwrap();
    let v = run_differential(&g, &mut canned(Some(vec![1.0, 1.0]), Some(vec![1.0, 1.0])), 0.4);
    assert_eq!(v.d_mad, Some(0.0));
    assert_eq!(v.behavior, BTreeSet::from(["a:ran".to_string(), "b:ran".to_string()]));
    let v = run_differential(&g, &mut canned(Some(vec![1.0]), None), 0.4);
    assert_eq!(v.failures().count(), 1);
    assert!(v.d_mad.is_none());
}

#[test]
fn builtin_backends_agree_on_zoo() {
    let reg = Registry::builtin();
    for (name, g) in zoo::all(&reg) {
        let mut bs = vec![builtin_backend("eager").unwrap(), builtin_backend("fused").unwrap()];
        let v = run_differential(&g, &mut bs, 0.4);
        assert_eq!(v.kind, VerdictKind::Pass, "{name}");
        assert!(v.d_mad.unwrap() < 1e-3, "{name}: {:?}", v.d_mad);
        assert!(!v.behavior.is_empty());
    }
}

#[test]
fn unknown_backend_ids_are_rejected() {
    assert!(builtin_backend("tensorflow").is_err());
    assert!(builtin_backend("faulty:nope").is_err());
    assert!(builtin_backend("faulty:relu_nan").is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]
    #[test]
    fn d_mad_stays_in_unit_interval(
        v in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6, -1e6f64..1e6), 1..16)
    ) {
        let y: Vec<f64> = v.iter().map(|t| t.0).collect();
        let y2: Vec<f64> = v.iter().map(|t| t.1).collect();
        let o: Vec<f64> = v.iter().map(|t| t.2).collect();
        let d = d_mad(&y, &y2, &o).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, d_mad(&y2, &y, &o).unwrap());
    }
}
