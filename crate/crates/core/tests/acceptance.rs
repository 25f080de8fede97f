//! End-to-end checks, one PASS/FAIL line each. Exits non-zero if any fail.

use std::fs;
use std::time::Instant;

use layerfuzz::coverage::{
    collect_diversity, cov_input, cov_param, cov_sequence, CoverageConfig, CoverageRow, DiversityItem,
    DiversitySnapshot,
};
use layerfuzz::difftest::{builtin_backend, d_mad, run_differential, Fault, VerdictKind, FAULTS};
use layerfuzz::dtype::DTypeLabel;
use layerfuzz::generate::{duplicate_ratio, random_graph, repetitive_graph, GenConfig};
use layerfuzz::graph::validate;
use layerfuzz::mutation::{MutationError, MutationKind, Mutator};
use layerfuzz::registry::{Arity, NumericRange, OperatorSchema, ParamKind, ParamSpec, ParamValue, Registry};
use layerfuzz::rng::derive;
use layerfuzz::scheduler::{acceptance, fuzz_to_dir, run_campaign, CampaignConfig, RunOptions, Selection};
use layerfuzz::synthesis::{synthesize, SynthesisConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn c1_table() -> Outcome {
    let want = [1.0, 1.0, 1.0, 0.6, 0.36, 0.22, 0.13, 0.08];
    let got: Vec<f64> = (1..=8).map(|k2| acceptance(3, k2, 0.4)).collect();
    let pass = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 0.005);
    let shown: Vec<String> = got.iter().map(|g| format!("{g:.4}")).collect();
    outcome(pass, format!("p=0.4 k1=3: [{}]", shown.join(", ")))
}

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

fn c2_coverage() -> Outcome {
    let cfg = CoverageConfig::default();
    let mut checks = Vec::new();

    let reg = Registry::from_schemas("t", [schema("K", &[2, 3, 4], &[4], vec![])]).unwrap();
    let mut snap = DiversitySnapshot::default();
    for dtype in [DTypeLabel::Float32, DTypeLabel::Float64] {
        snap.insert(&DiversityItem::Dtype { kind: "K".into(), dtype });
    }
    snap.insert(&DiversityItem::Rank { kind: "K".into(), rank: 4 });
    for shape in ["2x4x4x1", "2x5x5x1"] {
        snap.insert(&DiversityItem::Shape { kind: "K".into(), shape: shape.into() });
    }
    let ci = cov_input("K", &snap, &cfg, &reg).unwrap();
    checks.push(("input 5/14", (ci - 5.0 / 14.0).abs() < 1e-12));

    let padding = ParamSpec {
        name: "padding".into(),
        kind: ParamKind::Categorical,
        categorical_domain: vec![ParamValue::Str("valid".into()), ParamValue::Str("same".into())],
        numeric_range: None,
        default: None,
    };
    let filters = ParamSpec {
        name: "filters".into(),
        kind: ParamKind::Numeric,
        categorical_domain: Vec::new(),
        numeric_range: Some(NumericRange { min: 1.0, max: 16.0, integer: true, step: None }),
        default: None,
    };
    let reg = Registry::from_schemas("t", [schema("Conv2D", &[4], &[4], vec![padding, filters])]).unwrap();
    let mut snap = DiversitySnapshot::default();
    for (param, value) in [("padding", "valid"), ("padding", "same"), ("filters", "3"), ("filters", "8")] {
        snap.insert(&DiversityItem::Param { kind: "Conv2D".into(), param: param.into(), value: value.into() });
    }
    let cp = cov_param("Conv2D", &snap, &cfg, &reg).unwrap();
    checks.push(("param 4/7", (cp - 4.0 / 7.0).abs() < 1e-12));
    for v in 0..9 {
        snap.insert(&DiversityItem::Param { kind: "Conv2D".into(), param: "filters".into(), value: v.to_string() });
    }
    checks.push(("sigma cap", cov_param("Conv2D", &snap, &cfg, &reg).unwrap() == 1.0));

    let reg = Registry::from_schemas(
        "t",
        [schema("A", &[4], &[4], vec![]), schema("B", &[4], &[2], vec![]), schema("C", &[2, 4], &[4], vec![])],
    )
    .unwrap();
    let brute = ["A", "B", "C"]
        .iter()
        .flat_map(|a| ["A", "B", "C"].map(|b| (*a, b)))
        .filter(|(a, b)| {
            let (sa, sb) = (reg.schema(a).unwrap(), reg.schema(b).unwrap());
            !sa.produced_output_ranks.is_disjoint(&sb.accepted_input_ranks)
        })
        .count();
    checks.push(("7-pair space", reg.sequence_space_size() == 7 && brute == 7));
    let mut snap = DiversitySnapshot::default();
    for (a, b) in [("A", "A"), ("A", "B"), ("B", "C"), ("B", "A")] {
        snap.insert(&DiversityItem::Sequence { from: a.into(), to: b.into() });
    }
    checks.push(("sequence 3/7", (cov_sequence(&snap, &reg) - 3.0 / 7.0).abs() < 1e-12));

    let reg = Registry::from_schemas("t", [schema("K", &[2], &[2], vec![])]).unwrap();
    let mut snap = DiversitySnapshot::default();
    for dtype in DTypeLabel::ALL {
        snap.insert(&DiversityItem::Dtype { kind: "K".into(), dtype });
    }
    snap.insert(&DiversityItem::Rank { kind: "K".into(), rank: 2 });
    for i in 0..8 {
        snap.insert(&DiversityItem::Shape { kind: "K".into(), shape: format!("2x{i}") });
    }
    checks.push(("n_type/n_shape caps", cov_input("K", &snap, &cfg, &reg).unwrap() == 1.0));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = if failed.is_empty() {
        format!("{} checks", checks.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    outcome(failed.is_empty(), detail)
}

fn c3_dmad() -> Outcome {
    let zero = d_mad(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 1.0]).unwrap() == 0.0;
    let half = (d_mad(&[1.0], &[3.0], &[0.0]).unwrap() - 0.5).abs() < 1e-12;
    let one = d_mad(&[0.0, 1.0], &[2.0, 2.0], &[0.0, 1.0]).unwrap() == 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut in_range = true;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..12);
        let mut v = || (0..n).map(|_| rng.gen_range(-1e3..1e3)).collect::<Vec<f64>>();
        let (y, y2, o) = (v(), v(), v());
        let d = d_mad(&y, &y2, &o).unwrap();
        in_range &= (0.0..=1.0).contains(&d);
    }
    outcome(
        zero && half && one && in_range,
        format!("identical={zero} 1-vs-3={half} one-sided={one} range over 10^4={in_range}"),
    )
}

fn c4_mutation() -> Outcome {
    let reg = Registry::builtin();
    let m = Mutator::new(&reg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seeds: Vec<_> = (0..20).map(|_| random_graph(&reg, &GenConfig::default(), &mut rng)).collect();
    let small = seeds.iter().all(|g| g.nodes.len() <= 40 && validate(g, &reg).is_ok());
    let (mut produced, mut valid, mut node_level, mut preserved) = (0u32, 0u32, 0u32, 0u32);
    for i in 0..1000 {
        let g = &seeds[i % 20];
        let snap = collect_diversity(g, &reg);
        let kind = MutationKind::ALL[rng.gen_range(0..8)];
        match m.apply(kind, g, &snap, &mut rng) {
            Ok(out) => {
                produced += 1;
                if validate(&out.mutant, &reg).is_ok() {
                    valid += 1;
                }
                if kind.is_node_level() {
                    node_level += 1;
                    let kept = g.nodes.values().all(|n| {
                        out.touched.contains(&n.id)
                            || out.mutant.nodes.get(&n.id).is_none_or(|x| x.output_spec == n.output_spec)
                    }) && g.output_specs() == out.mutant.output_specs();
                    preserved += u32::from(kept);
                }
            }
            Err(MutationError::InvalidMutant(_)) => produced += 1,
            Err(_) => {}
        }
    }
    let rate = f64::from(valid) / f64::from(produced.max(1));
    outcome(
        small && rate >= 0.95 && preserved == node_level,
        format!(
            "{valid}/{produced} mutants valid ({:.1}%), {preserved}/{node_level} node-level mutants keep specs",
            rate * 100.0
        ),
    )
}

fn c5_synthesis() -> Outcome {
    let reg = Registry::builtin();
    let (mut ok, mut slowest) = (0, 0.0f64);
    let mut notes = Vec::new();
    for i in 0..20u64 {
        let g = repetitive_graph(&reg, 60, &mut derive(i, "original"));
        let dup = duplicate_ratio(&g, &reg);
        let start = Instant::now();
        let (s, report) = synthesize(&g, &reg, &SynthesisConfig::default(), &mut derive(i, "synthesis")).unwrap();
        let secs = start.elapsed().as_secs_f64();
        slowest = slowest.max(secs);
        let superset = collect_diversity(&s, &reg).is_superset_of(&collect_diversity(&g, &reg));
        let good = g.nodes.len() <= 60
            && dup >= 0.3
            && secs < 300.0
            && (!report.residual.is_empty() || (superset && s.nodes.len() < g.nodes.len()));
        if good {
            ok += 1;
        } else {
            notes.push(format!("#{i}: dup={dup:.2} nodes {}->{}", g.nodes.len(), s.nodes.len()));
        }
    }
    outcome(
        ok == 20,
        format!("{ok}/20 laws hold, slowest {slowest:.3}s{}", if notes.is_empty() { String::new() } else { format!("; {}", notes.join("; ")) }),
    )
}

fn c6_equivalence() -> Outcome {
    let reg = Registry::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut eager = builtin_backend("eager").unwrap();
    let mut fused = builtin_backend("fused").unwrap();
    let (mut worst, mut compared, mut deepest) = (0.0f64, 0, 0);
    for _ in 0..500 {
        let cfg = GenConfig {
            dtype: DTypeLabel::Float64,
            compute_nodes: rng.gen_range(1..=28),
            ..GenConfig::default()
        };
        let g = random_graph(&reg, &cfg, &mut rng);
        deepest = deepest.max(g.depth());
        let mut bs = vec![eager, fused];
        let v = run_differential(&g, &mut bs, 0.4);
        if let Some(d) = v.d_mad {
            worst = worst.max(d);
            compared += 1;
        }
        if v.kind != VerdictKind::Pass && v.kind != VerdictKind::Invalid {
            worst = worst.max(1.0);
        }
        let mut it = bs.into_iter();
        eager = it.next().unwrap();
        fused = it.next().unwrap();
    }
    outcome(
        worst < 1e-6 && deepest <= 30,
        format!("max d_mad {worst:.2e} over {compared}/500 finite graphs, depth <= {deepest}"),
    )
}

fn c7_faults() -> Outcome {
    let reg = Registry::builtin();
    let mut all = true;
    let mut parts = Vec::new();
    for (fault, id, _, verdict, _) in FAULTS {
        let mut hits = 0;
        for seed in 0..5 {
            let c = CampaignConfig {
                rng_seed: seed,
                time_budget_seconds: 600.0,
                backends: vec!["eager".into(), format!("faulty:{id}")],
                ..CampaignConfig::default()
            };
            let r = run_campaign(&c, &reg, &RunOptions::default()).unwrap();
            if r.bugs.records.values().any(|b| b.verdict.as_str() == verdict) {
                hits += 1;
            }
        }
        let _: Fault = fault;
        all &= hits >= 4;
        parts.push(format!("{id} {hits}/5"));
    }
    outcome(all, parts.join(", "))
}

/// Time-weighted mean of `cov_input + cov_param + cov_sequence` over the run.
fn curve_mean(rows: &[CoverageRow]) -> f64 {
    let total = rows.last().map_or(0.0, |r| r.timestamp) - rows[0].timestamp;
    if total <= 0.0 {
        return 0.0;
    }
    rows.windows(2)
        .map(|w| (w[1].timestamp - w[0].timestamp) * (w[0].cov_input + w[0].cov_param + w[0].cov_sequence))
        .sum::<f64>()
        / total
}

fn c8_scheduler() -> Outcome {
    let reg = Registry::builtin();
    let mut all = true;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let mut means = [0.0; 2];
        for (i, selection) in [Selection::Mcmc, Selection::Random].into_iter().enumerate() {
            let c = CampaignConfig {
                rng_seed: seed,
                time_budget_seconds: 1800.0,
                selection,
                ..CampaignConfig::default()
            };
            means[i] = curve_mean(&run_campaign(&c, &reg, &RunOptions::default()).unwrap().rows);
        }
        all &= means[0] >= means[1];
        parts.push(format!("seed {seed}: mcmc {:.4} random {:.4}", means[0], means[1]));
    }
    outcome(all, parts.join("; "))
}

fn c9_determinism() -> Outcome {
    let reg = Registry::builtin();
    let dir = tempfile::tempdir().unwrap();
    let c = CampaignConfig {
        rng_seed: 9,
        time_budget_seconds: 300.0,
        backends: vec!["eager".into(), "faulty:dense_zero_crash".into()],
        ..CampaignConfig::default()
    };
    let a = fuzz_to_dir(&c, &reg, &dir.path().join("a"), None).unwrap();
    let b = fuzz_to_dir(&c, &reg, &dir.path().join("b"), None).unwrap();
    let csv_a = fs::read(dir.path().join("a/coverage.csv")).unwrap();
    let csv_b = fs::read(dir.path().join("b/coverage.csv")).unwrap();
    let keys_a: Vec<&String> = a.bugs.records.keys().collect();
    let keys_b: Vec<&String> = b.bugs.records.keys().collect();
    outcome(
        csv_a == csv_b && keys_a == keys_b,
        format!(
            "coverage.csv identical={} ({} bytes), keys identical={} ({} keys)",
            csv_a == csv_b,
            csv_a.len(),
            keys_a == keys_b,
            keys_a.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("MH table", c1_table),
        ("coverage formulas", c2_coverage),
        ("D_MAD", c3_dmad),
        ("mutation validity", c4_mutation),
        ("synthesis laws", c5_synthesis),
        ("backend equivalence", c6_equivalence),
        ("seeded faults", c7_faults),
        ("scheduler value", c8_scheduler),
        ("determinism", c9_determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {n} ({name}): {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
