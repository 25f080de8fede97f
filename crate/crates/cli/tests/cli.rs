use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_layerfuzz"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["fuzz", "--selection", "greedy"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
}

#[test]
fn list_faults() {
    let o = run(&["list-faults"]);
    assert_eq!(code(&o), 0);
    let ids: Vec<String> = stdout(&o).lines().map(|l| l.split('\t').next().unwrap().to_string()).collect();
    assert_eq!(ids, ["pad_off_by_one", "relu_nan", "dense_zero_crash"]);
}

#[test]
fn bad_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "tau = 3\n").unwrap();
    let o = run(&["fuzz", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert_eq!(code(&run(&["fuzz", "--fault", "nope", "--max-iterations", "1"])), 1);
    assert_eq!(code(&run(&["--registry", "/nonexistent.toml", "list-faults"])), 1);
    assert_eq!(code(&run(&["replay", "/nonexistent.json"])), 1);
}

#[test]
fn synthesize_writes_models() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("syn");
    let o = run(&["synthesize", "zoo:lenet", "zoo:mlp", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("lenet.synth.json").exists());
    assert!(out.join("mlp.synth.json").exists());
    assert!(stdout(&o).contains("\"residual\": []"));

    let o = run(&["synthesize", "zoo:resnet-block", "--budget", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

fn fuzz(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["fuzz", "--out", out.to_str().unwrap(), "--seed", "3"];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn clean_campaign_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = fuzz(&dir.path().join("c"), &["--max-iterations", "200"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("200 iterations"));
    assert_eq!(code(&run(&["report", dir.path().join("c").to_str().unwrap()])), 0);
}

#[test]
fn fault_campaign_report_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = fuzz(&out, &["--fault", "relu_nan", "--max-iterations", "600"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("bug: nan:ReLU"));
    for f in ["coverage.csv", "campaign.log", "config-snapshot.toml", "bugs/report.json", "bugs/bug-0001.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let snapshot = fs::read_to_string(out.join("config-snapshot.toml")).unwrap();
    assert!(snapshot.contains("faulty:relu_nan"));

    let o = run(&["report", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("[nan] nan:ReLU"));

    let bug = out.join("bugs/bug-0001.json");
    let o = run(&["replay", bug.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_ne!(v["verdict"], "pass");
    assert_eq!(v["backends"][1], "faulty:relu_nan");

    let o = run(&["replay", bug.to_str().unwrap(), "--backends", "eager,fused"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn campaigns_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = ["--fault", "dense_zero_crash", "--budget", "20"];
    assert_eq!(code(&fuzz(&a, &args)), code(&fuzz(&b, &args)));
    for f in ["coverage.csv", "campaign.log", "bugs/report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_drives_the_campaign() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "time_budget_seconds = 5\nrng_seed = 1\ninitial_seeds = [\"zoo:mlp\"]\nselection = \"random\"\nsynthesize_first = false\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = run(&["fuzz", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("coverage.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let t: f64 = last.split(',').next().unwrap().parse().unwrap();
    assert!((5.0..5.2).contains(&t), "{t}");
    assert!(fs::read_to_string(out.join("config-snapshot.toml")).unwrap().contains("selection = \"random\""));
}
