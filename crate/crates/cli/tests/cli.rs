use std::path::Path;
use std::process::{Command, Output};

fn fedgraph(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedgraph"))
        .args(args)
        .current_dir(dir)
        .env_remove("FEDGRAPH_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMOKE: &str = r#"{"clients": 4, "rounds": 2, "seeds": [0]}"#;

#[test]
fn smoke_run_writes_three_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMOKE);
    let start = std::time::Instant::now();
    let out = fedgraph(&["run", &cfg, "--out-dir", "out"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed().as_secs() < 10);
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["effective_config.json", "report.json", "rounds.csv"]);
    let csv = std::fs::read_to_string(dir.path().join("out/rounds.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# fedgraph "));
    assert!(lines.next().unwrap().starts_with("# config: {"));
    assert_eq!(lines.next().unwrap(), "seed,round,client,accuracy,loss,aggregator");
    // initial evaluation plus two rounds, four clients each
    assert_eq!(lines.count(), 12);
    let report = read_json(&dir.path().join("out/report.json"));
    assert!(report["version"].as_str().unwrap().starts_with("fedgraph"));
    assert_eq!(report["config"]["clients"], 4);
}

#[test]
fn same_seed_gives_identical_csv_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMOKE);
    for o in ["a", "b"] {
        let out = fedgraph(&["run", &cfg, "--seed", "7", "--out-dir", o], dir.path());
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.path().join("a/rounds.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/rounds.csv")).unwrap();
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().contains("\n7,0,0,"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"clients": 4, "jgesr": {"alhpa": 0.1}}"#);
    let out = fedgraph(&["run", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alhpa"));

    let bad = write(dir.path(), "bad.json", "{ not json");
    assert_eq!(fedgraph(&["run", &bad], dir.path()).status.code(), Some(2));
    let missing = fedgraph(&["run", "does-not-exist.json"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    let ov = fedgraph(&["run", &cfg, "--override", "alhpa=1"], dir.path());
    assert_eq!(ov.status.code(), Some(2));
}

#[test]
fn overrides_reach_nested_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMOKE);
    let out = fedgraph(
        &[
            "run",
            &cfg,
            "--override",
            "rounds=1",
            "--override",
            "jgesr.alpha=0.1",
            "--out-dir",
            "o",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let eff = read_json(&dir.path().join("o/effective_config.json"));
    assert_eq!(eff["config"]["rounds"], 1);
    assert_eq!(eff["config"]["jgesr"]["alpha"], 0.1);
}

#[test]
fn out_dir_comes_from_environment_when_not_given() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"clients": 4, "rounds": 1, "seeds": [0]}"#);
    let out = Command::new(env!("CARGO_BIN_EXE_fedgraph"))
        .args(["run", &cfg])
        .current_dir(dir.path())
        .env("FEDGRAPH_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from-env/rounds.csv").exists());

    let cfg2 = write(
        dir.path(),
        "d.json",
        r#"{"clients": 4, "rounds": 1, "seeds": [0], "out_dir": "from-config"}"#,
    );
    let out = Command::new(env!("CARGO_BIN_EXE_fedgraph"))
        .args(["run", &cfg2])
        .current_dir(dir.path())
        .env("FEDGRAPH_OUT_DIR", "from-env-2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from-config/rounds.csv").exists());
    assert!(!dir.path().join("from-env-2").exists());
}

#[test]
fn compare_emits_a_two_by_two_table_with_shared_draws() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"clients": 4, "rounds": 2, "seeds": [0, 1], "aggregators": ["mean", "jgesr"], "noise_levels": [0.1, 0.2]}"#,
    );
    let out = fedgraph(&["compare", &cfg, "--out-dir", "cmp"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = std::fs::read_to_string(dir.path().join("cmp/compare.md")).unwrap();
    let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| ")).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].contains("s = 0.1") && rows[0].contains("s = 0.2"));
    assert!(rows[1].starts_with("| mean |") && rows[2].starts_with("| jgesr |"));
    let csv = std::fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 5);
    let json = read_json(&dir.path().join("cmp/compare.json"));
    let draws = json["draws"].as_array().unwrap();
    assert_eq!(draws.len(), 4);
    assert!(draws
        .iter()
        .all(|d| d["channel_digests"].as_array().unwrap().len() == 2));

    let one = write(
        dir.path(),
        "one.json",
        r#"{"clients": 4, "rounds": 1, "aggregators": ["mean"]}"#,
    );
    assert_eq!(fedgraph(&["compare", &one], dir.path()).status.code(), Some(2));
}

#[test]
fn sweep_emits_the_rate_grid_and_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"clients": 4, "rounds": 2, "seeds": [3], "noise_scale": 0.1}"#,
    );
    let out = fedgraph(&["sweep-missing", &cfg, "--out-dir", "sw"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sw/sweep_missing.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 11);
    let rates: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    let expect: Vec<String> = (0..=10).map(|i| format!("0.{i:02}")).collect();
    assert_eq!(rates, expect);

    let run = fedgraph(
        &["run", &cfg, "--override", "missing_rate=0", "--out-dir", "r"],
        dir.path(),
    );
    assert!(run.status.success());
    let report = read_json(&dir.path().join("r/report.json"));
    let acc = format!("{:.6}", report["mean_final_accuracy"].as_f64().unwrap());
    assert_eq!(rows[0].split(',').nth(2).unwrap(), acc);

    let mean = write(
        dir.path(),
        "m.json",
        r#"{"clients": 4, "rounds": 1, "aggregator": "mean"}"#,
    );
    assert_eq!(fedgraph(&["sweep-missing", &mean], dir.path()).status.code(), Some(2));
}

#[test]
fn repeated_compare_and_sweep_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"clients": 4, "rounds": 1, "seeds": [0], "aggregators": ["mean", "two_step"], "missing_rates": [0.0, 0.1]}"#,
    );
    for o in ["x", "y"] {
        assert!(fedgraph(&["compare", &cfg, "--out-dir", o], dir.path())
            .status
            .success());
        assert!(fedgraph(&["sweep-missing", &cfg, "--out-dir", o], dir.path())
            .status
            .success());
    }
    for f in ["compare.csv", "compare.md", "sweep_missing.csv"] {
        let a = std::fs::read(dir.path().join("x").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("y").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        fedgraph::harness::Experiment::from_str(&text, &[], None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
