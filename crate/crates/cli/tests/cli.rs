use std::process::{Command, Output};

fn tl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tl")).args(args).output().expect("spawn tl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn summary(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(o);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn run_cl_ends_with_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.jsonl");
    let o = tl(&["run", "--method", "cl", "--epochs", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.len() > 1);
    let last: serde_json::Value = serde_json::from_str(lines[lines.len() - 1]).unwrap();
    assert_eq!(last["record"], "summary");
    assert_eq!(last["method"], "cl");
    assert!(last["metrics"]["accuracy"].is_f64());
    assert_eq!(last["parameter_hash"].as_str().unwrap().len(), 16);
    for l in &lines[..lines.len() - 1] {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["loss"].is_f64());
    }
}

#[test]
fn single_node_tl_hash_matches_cl() {
    let a = summary(&tl(&["run", "--method", "tl", "--nodes", "1", "--seed", "4", "--epochs", "2"]));
    let b = summary(&tl(&["run", "--method", "cl", "--nodes", "1", "--seed", "4", "--epochs", "2"]));
    assert_eq!(a["parameter_hash"], b["parameter_hash"]);
}

#[test]
fn runs_are_reproducible_modulo_wall_clock() {
    let strip = |o: Output| -> Vec<serde_json::Value> {
        stdout(&o)
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    };
    let args = ["run", "--method", "tl", "--mode", "pipelined", "--epochs", "2", "--seed", "9"];
    assert_eq!(strip(tl(&args)), strip(tl(&args)));
}

#[test]
fn every_method_runs() {
    for m in ["cl", "tl", "fedavg", "sl", "sl_plus", "sfl"] {
        let s = summary(&tl(&["run", "--method", m, "--epochs", "1"]));
        assert_eq!(s["method"], m);
    }
}

#[test]
fn zero_learning_rate_exits_2() {
    let o = tl(&["run", "--lr", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let o = tl(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn bad_config_field_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, "[dataset]\ntrain_fraction = 1.5\n").unwrap();
    let o = tl(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset.train_fraction"));
    std::fs::write(&p, "[dataset]\nsource = \"csv\"\npath = \"/nonexistent.csv\"\n").unwrap();
    let o = tl(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset.path"));
}

#[test]
fn plan_two_nodes_five_samples() {
    let o = tl(&["plan", "--nodes", "2", "--samples", "5", "--batch-size", "2"]);
    assert!(o.status.success());
    let recs: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut batches = std::collections::BTreeMap::<u64, Vec<u64>>::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in &recs {
        let b = r["batch_id"].as_u64().unwrap();
        let pos = batches.entry(b).or_default();
        pos.extend(r["positions"].as_array().unwrap().iter().map(|p| p.as_u64().unwrap()));
        for l in r["local_indices"].as_array().unwrap() {
            assert!(seen.insert((r["node_id"].as_u64().unwrap(), l.as_u64().unwrap())));
        }
    }
    assert_eq!(batches.len(), 3);
    for (b, mut pos) in batches {
        pos.sort_unstable();
        let want: Vec<u64> = (0..if b == 2 { 1 } else { 2 }).collect();
        assert_eq!(pos, want);
    }
    assert_eq!(seen.len(), 5);
}

#[test]
fn cost_model_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.toml");
    std::fs::write(&p, "t_comp_client = [1.0, 2.0, 3.0]\nt_comm = 0.5\nt_agg = 0.2\nt_comp_server = 0.1\n").unwrap();
    let o = tl(&["cost-model", "--params", p.to_str().unwrap(), "--json"]);
    assert!(o.status.success());
    let fl = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["method"] == "fl")
        .unwrap();
    assert!((fl["closed_form_s"].as_f64().unwrap() - 3.7).abs() < 1e-12);
    let table = tl(&["cost-model", "--params", p.to_str().unwrap()]);
    assert!(stdout(&table).lines().any(|l| l.starts_with("fl ") && l.contains("3.700000")));
}

#[test]
fn compare_cl_against_itself() {
    let o = tl(&["compare", "--method", "cl", "--against", "cl", "--seeds", "2", "--epochs", "1"]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["max_parameter_distance"], 0.0);
    assert_eq!(r["min_prediction_agreement"], 1.0);
    assert_eq!(r["seeds"].as_array().unwrap().len(), 2);
}

#[test]
fn compare_rejects_mismatched_layers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.toml");
    std::fs::write(&p, "[model]\nlayers = \"8,4:relu,3:softmax\"\n").unwrap();
    let o = tl(&["compare", "--config-b", p.to_str().unwrap(), "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.layers"));
}
