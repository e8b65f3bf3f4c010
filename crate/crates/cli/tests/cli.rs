use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn trainlog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trainlog"))
        .args(args)
        .env_remove("L4_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = trainlog(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A NETWORK failure on node 5 of 12 plus two successful runs.
fn network_job(root: &Path) {
    fs::write(root.join("spec.toml"), "node_count = 12\niterations = 40\n").unwrap();
    fs::write(root.join("fault.toml"), "fault_type = \"NETWORK\"\ntarget_nodes = [5]\nonset_iteration = 30\n").unwrap();
    let spec = root.join("spec.toml");
    ok(&["synth", "generate", "--spec", p(&spec), "--fault", p(&root.join("fault.toml")), "--seed", "3", "--out", p(&root.join("failed"))]);
    for (k, seed) in [(0, "101"), (1, "102")] {
        let out = root.join(format!("history_{k}"));
        ok(&["synth", "generate", "--spec", p(&spec), "--seed", seed, "--out", p(&out)]);
    }
}

fn diagnose_args(root: &Path) -> Vec<String> {
    ["diagnose", "--failed", p(&root.join("failed")), "--history", p(&root.join("history_0")), p(&root.join("history_1"))]
        .map(String::from)
        .to_vec()
}

#[test]
fn diagnose_names_the_injected_node() {
    let dir = tempfile::tempdir().unwrap();
    network_job(dir.path());
    let truth: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("failed/truth.json")).unwrap()).unwrap();
    assert_eq!(truth["faulty_nodes"][0], "rank_05");

    let args = diagnose_args(dir.path());
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let report: Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(report["no_findings"], false);
    let ranking: Vec<&str> = report["node_ranking"].as_array().unwrap().iter().map(|v| v["node_id"].as_str().unwrap()).collect();
    assert!(ranking.iter().take(8).any(|&n| n == "rank_05"), "{ranking:?}");
    assert!(report["filter_stats"]["records_out"].as_u64() < report["filter_stats"]["records_in"].as_u64());

    // same inputs, same bytes
    assert_eq!(ok(&args), ok(&args));
}

#[test]
fn without_history_the_filter_passes_everything() {
    let dir = tempfile::tempdir().unwrap();
    network_job(dir.path());
    let report: Value = serde_json::from_str(&ok(&["diagnose", "--failed", p(&dir.path().join("failed"))])).unwrap();
    let stats = &report["filter_stats"];
    assert_eq!(stats["records_in"], stats["records_out"]);
    assert_eq!(stats["applied"], false);
}

#[test]
fn operational_errors_exit_nonzero() {
    let out = trainlog(&["diagnose", "--failed", "/definitely/not/here"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here"));

    let dir = tempfile::tempdir().unwrap();
    network_job(dir.path());
    let failed = dir.path().join("failed");
    assert!(!trainlog(&["diagnose", "--failed", p(&failed), "--drain-depth", "1"]).status.success());
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "no-such-knob = 1\n").unwrap();
    assert!(!trainlog(&["diagnose", "--failed", p(&failed), "--config", p(&cfg)]).status.success());
    let bad_seed = Command::new(env!("CARGO_BIN_EXE_trainlog"))
        .args(["diagnose", "--failed", p(&failed)])
        .env("L4_SEED", "not-a-number")
        .output()
        .unwrap();
    assert!(!bad_seed.status.success());
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    network_job(dir.path());
    let cfg = dir.path().join("run.toml");
    let failed = dir.path().join("failed");
    fs::write(&cfg, format!("failed = {:?}\nformat = \"text\"\nseed = 4\n", p(&failed))).unwrap();
    let text = ok(&["diagnose", "--config", p(&cfg)]);
    assert!(text.starts_with("job failed"), "{text}");
    let json = ok(&["diagnose", "--config", p(&cfg), "--format", "json"]);
    assert!(serde_json::from_str::<Value>(&json).is_ok());

    let out = dir.path().join("report.json");
    ok(&["diagnose", "--config", p(&cfg), "--format", "json", "--out", p(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap(), json);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    network_job(dir.path());
    let failed = dir.path().join("failed");
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_trainlog"));
        cmd.args(["diagnose", "--failed", p(&failed), "--iforest-trees", "3"]).env_remove("L4_SEED");
        if let Some(e) = env {
            cmd.env("L4_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success());
        out.stdout
    };
    assert_eq!(run(Some("11"), None), run(None, Some("11")));
    assert_eq!(run(Some("99"), Some("11")), run(None, Some("11")));
}

#[test]
fn parse_dumps_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    network_job(dir.path());
    let text = ok(&["parse", p(&dir.path().join("failed"))]);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["node", "ts", "level", "event_id", "template", "params"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let records = text.lines().count();
    let report: Value = serde_json::from_str(&ok(&["diagnose", "--failed", p(&dir.path().join("failed"))])).unwrap();
    assert_eq!(report["filter_stats"]["records_in"].as_u64().unwrap() as usize, records);
}

#[test]
fn library_add_list_match() {
    let dir = tempfile::tempdir().unwrap();
    network_job(dir.path());
    let lib = dir.path().join("faults.toml");
    ok(&[
        "library", "add", "--library", p(&lib), "--id", "roce-link", "--name", "RoCE link down",
        "--category", "network", "--event", "NIC port link down", "--event", "error cqe status",
        "--root-cause", "optical module failure", "--remediation", "replace the module",
    ]);
    let dup = trainlog(&["library", "add", "--library", p(&lib), "--id", "roce-link", "--category", "network", "--event", "x"]);
    assert!(!dup.status.success());
    assert!(String::from_utf8_lossy(&dup.stderr).contains("already exists"));

    let extra = dir.path().join("extra.toml");
    fs::write(
        &extra,
        "[[pattern]]\nid = \"ecc\"\nname = \"HBM ECC\"\ncategory = \"ACCELERATOR\"\nsignature_events = [\"/ECC error/\"]\n\
         root_cause = \"bad memory\"\nremediation = \"drain the node\"\n",
    )
    .unwrap();
    ok(&["library", "add", "--library", p(&lib), "--from", p(&extra)]);
    assert_eq!(ok(&["library", "list", "--library", p(&lib)]), "roce-link\tNETWORK\tRoCE link down\necc\tACCELERATOR\tHBM ECC\n");

    let matches: Value = serde_json::from_str(&ok(&["library", "match", "--library", p(&lib), p(&dir.path().join("failed"))])).unwrap();
    let ids: Vec<&str> = matches.as_array().unwrap().iter().map(|m| m["pattern_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["roce-link"]);

    let args = diagnose_args(dir.path());
    let mut args: Vec<&str> = args.iter().map(String::as_str).collect();
    args.extend(["--library", p(&lib)]);
    let report: Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(report["library_matches"][0]["pattern_id"], "roce-link");
}

#[test]
fn eval_emits_a_stable_table() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["synth", "corpus", "--out", p(&corpus), "--seeds", "0..2"]);
    let summary = dir.path().join("summary.csv");
    let table = ok(&["--jobs", "2", "eval", p(&corpus), "--summary", p(&summary)]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], trainlog::synth::corpus::CSV_HEADER);
    assert_eq!(lines.len(), 3);
    let width = lines[0].split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == width));
    assert!(lines[1].starts_with("0,NETWORK,"));
    let summary = fs::read_to_string(summary).unwrap();
    assert!(summary.starts_with("metric,value\ncases,2.0000\n"));

    assert!(!trainlog(&["eval", p(dir.path())]).status.success(), "no cases is an error");
}
