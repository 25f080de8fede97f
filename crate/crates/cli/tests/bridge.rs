use std::path::{Path, PathBuf};

use layerfuzz::difftest::bridge::BridgeBackend;
use layerfuzz::difftest::{open_backend, run_differential, run_once, EagerBackend, Stage, VerdictKind};
use layerfuzz::graph::{default_inputs, load_model};
use layerfuzz::registry::Registry;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/five_op.json")
}

fn exe() -> &'static str {
    env!("CARGO_BIN_EXE_layerfuzz")
}

#[test]
fn bridge_matches_eager_on_explicit_weights() {
    let reg = Registry::builtin();
    let g = load_model(&fixture(), &reg).unwrap();
    assert_eq!(g.compute_node_count(&reg), 5);
    assert!(!g.explicit_weights.is_empty());
    assert!(!g.explicit_inputs.is_empty());
    let inputs = default_inputs(&g);
    let mut bridge = BridgeBackend::spawn(
        "bridge:eager",
        Path::new(exe()),
        &["serve-backend".to_string(), "eager".to_string()],
        reg.clone(),
    )
    .unwrap();
    let remote = run_once(&mut bridge, &g, &inputs).unwrap();
    let local = run_once(&mut EagerBackend::new(), &g, &inputs).unwrap();
    assert_eq!(remote.outputs.len(), local.outputs.len());
    for (r, l) in remote.outputs.iter().zip(&local.outputs) {
        assert_eq!(r.shape(), l.shape());
        for (a, b) in r.data.iter().zip(&l.data) {
            assert!((a - b).abs() <= 1e-3 * b.abs().max(1e-6), "{a} vs {b}");
        }
    }
    assert!(local.outputs[0].data.iter().any(|v| *v != 0.0));
}

#[test]
fn bridge_in_differential_run() {
    let reg = Registry::builtin();
    let g = load_model(&fixture(), &reg).unwrap();
    let id = format!("bridge:{} serve-backend fused", exe());
    let mut bs = vec![Box::new(EagerBackend::new()) as _, open_backend(&id, &reg).unwrap()];
    let v = run_differential(&g, &mut bs, 0.4);
    assert_eq!(v.kind, VerdictKind::Pass);
    assert!(v.d_mad.unwrap() < 1e-3);
}

#[test]
fn host_abort_is_a_crash_verdict() {
    let reg = Registry::builtin();
    let g = load_model(&fixture(), &reg).unwrap();
    let id = format!("bridge:{} serve-backend eager --abort-on-execute", exe());
    let mut bs = vec![Box::new(EagerBackend::new()) as _, open_backend(&id, &reg).unwrap()];
    let v = run_differential(&g, &mut bs, 0.4);
    assert_eq!(v.kind, VerdictKind::Crash);
    let (backend, failure) = v.failures().next().unwrap();
    assert_eq!(backend, id);
    assert_eq!(failure.stage, Stage::Run);
    assert_eq!(failure.trace, "bridge: backend process exited");
    // The dead worker is replaced, so the next model gets as far as execute.
    let again = run_differential(&g, &mut bs, 0.4);
    assert_eq!(again.kind, VerdictKind::Crash);
    assert_eq!(again.failures().next().unwrap().1.trace, failure.trace);
}

#[test]
fn missing_program_fails_to_open() {
    let reg = Registry::builtin();
    assert!(open_backend("bridge:/nonexistent/worker", &reg).is_err());
    assert!(open_backend("bridge:", &reg).is_err());
}
