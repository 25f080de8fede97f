use layerfuzz::coverage::collect_diversity;
use layerfuzz::generate::{duplicate_ratio, repetitive_graph};
use layerfuzz::graph::validate;
use layerfuzz::registry::Registry;
use layerfuzz::rng::derive;
use layerfuzz::synthesis::{synthesize, GraphStats, SynthesisConfig};
use layerfuzz::zoo;

#[test]
fn repetitive_originals_shrink() {
    let reg = Registry::builtin();
    for i in 0..8u64 {
        let g = repetitive_graph(&reg, 60, &mut derive(i, "orig"));
        assert!(g.nodes.len() <= 60);
        assert!(duplicate_ratio(&g, &reg) >= 0.3);
        let (s, report) = synthesize(&g, &reg, &SynthesisConfig::default(), &mut derive(i, "syn")).unwrap();
        assert!(report.residual.is_empty(), "{:?}", report.residual);
        assert!(validate(&s, &reg).is_ok());
        assert!(collect_diversity(&s, &reg).is_superset_of(&collect_diversity(&g, &reg)));
        assert!(s.nodes.len() < g.nodes.len());
        assert_eq!(report.synthesized_stats, GraphStats::of(&s, &reg));
    }
}

#[test]
fn zoo_models_are_covered() {
    let reg = Registry::builtin();
    for (name, g) in zoo::all(&reg) {
        let (s, report) = synthesize(&g, &reg, &SynthesisConfig::default(), &mut derive(0, name)).unwrap();
        assert!(report.residual.is_empty(), "{name}: {:?}", report.residual);
        assert!(collect_diversity(&s, &reg).is_superset_of(&collect_diversity(&g, &reg)), "{name}");
    }
}

#[test]
fn zero_budget_leaves_a_residual() {
    let reg = Registry::builtin();
    let g = zoo::model("resnet-block", &reg).unwrap();
    let cfg = SynthesisConfig {
        time_budget: std::time::Duration::ZERO,
        ..SynthesisConfig::default()
    };
    let (_, report) = synthesize(&g, &reg, &cfg, &mut derive(0, "x")).unwrap();
    assert!(!report.residual.is_empty());
}
