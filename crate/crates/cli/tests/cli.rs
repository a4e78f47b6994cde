use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn dvote(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dvote"));
    c.args(args).env_remove("DVOTE_SEED");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fixture_election_matches_the_expected_tally_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let scenario = fixture("election-100.json");
    let o = dvote(
        &[
            "--out",
            a.to_str().unwrap(),
            "run-election",
            scenario.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(
        json(&a.join("tally.json")),
        json(&fixture("expected-tally.json"))
    );
    for f in [
        "ledger.jsonl",
        "transcript.jsonl",
        "provenance/signature.json",
        "provenance/vote-reader.json",
    ] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    let o = dvote(
        &[
            "--parallel",
            "--out",
            b.to_str().unwrap(),
            "run-election",
            scenario.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0));
    for f in ["report.json", "ledger.jsonl", "transcript.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn seed_override_and_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = json(&fixture("election-100.json"));
    s["election"]["voters"] = 20.into();
    let path = dir.path().join("s.json");
    std::fs::write(&path, s.to_string()).unwrap();
    let out = dir.path().join("o");
    let args = [
        "--out",
        out.to_str().unwrap(),
        "run-election",
        path.to_str().unwrap(),
    ];
    assert_eq!(dvote(&args, &[("DVOTE_SEED", "7")]).status.code(), Some(0));
    let r = json(&out.join("report.json"));
    assert_eq!(r["seed"], 7);
    assert!(r.get("generated_at").is_none());

    let mut args2 = vec!["--seed", "8", "--fixed-clock=false"];
    args2.extend(args);
    assert_eq!(dvote(&args2, &[("DVOTE_SEED", "7")]).status.code(), Some(0));
    let r = json(&out.join("report.json"));
    assert_eq!(r["seed"], 8);
    assert!(r["generated_at"].as_str().unwrap().starts_with("unix:"));
}

#[test]
fn malformed_scenario_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"name\": ").unwrap();
    let o = dvote(&["run-election", path.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("EOF"));
    assert_eq!(dvote(&["no-such-command"], &[]).status.code(), Some(2));
}

#[test]
fn zero_honest_scenario_completes_with_a_prominent_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = dvote(
        &[
            "--out",
            dir.path().to_str().unwrap(),
            "run-election",
            fixture("zero-honest.json").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("WARNING: anytrust_holds=false"));
    let r = json(&dir.path().join("report.json"));
    assert_eq!(r["anytrust_holds"], false);
    assert!(r["warning"].is_string());
}

#[test]
fn one_plus_one_is_not_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = dvote(
        &[
            "--out",
            dir.path().to_str().unwrap(),
            "dispute-demo",
            "--program",
            "add",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0));
    let t = json(&dir.path().join("dispute.json"));
    assert_eq!(t["bisections"], 0);
    assert_eq!(t["games"][0]["verdict"], "challenger-wins");
    assert_eq!(t["games"][0]["rounds_elapsed"], 1);
}

#[test]
fn signature_dispute_bisects_log_t_times() {
    let dir = tempfile::tempdir().unwrap();
    let o = dvote(
        &[
            "--out",
            dir.path().to_str().unwrap(),
            "dispute-demo",
            "--program",
            "sig-model",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0));
    let t = json(&dir.path().join("dispute.json"));
    let steps = t["step_count"].as_u64().unwrap();
    assert_eq!(t["k"].as_u64().unwrap(), steps / 2);
    assert_eq!(
        t["bisections"].as_u64().unwrap(),
        (steps as f64).log2().ceil() as u64
    );
}

#[test]
fn corrupted_inputs_are_rejected_outright_and_k_is_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let o = dvote(
        &[
            "--out",
            dir.path().to_str().unwrap(),
            "dispute-demo",
            "--k",
            "0",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0));
    let t = json(&dir.path().join("dispute.json"));
    assert!(t["games"].as_array().unwrap().is_empty());
    assert!(t["rejections"][0]["error"]
        .as_str()
        .unwrap()
        .contains("committed input"));
    assert_eq!(
        dvote(&["dispute-demo", "--k", "99"], &[]).status.code(),
        Some(2)
    );
}

#[test]
fn training_audit_and_independent_reverification() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = fixture("training-signature.json");
    let o = dvote(
        &["--out", out, "audit-training", cfg.to_str().unwrap()],
        &[],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("forged from step 5: invalid(5, TraceMismatch)"));
    let v = json(&dir.path().join("verdict.json"));
    assert_eq!(v["verdict"]["status"], "valid");

    let record = dir.path().join("record-signature.json");
    let forged = dir.path().join("record-signature-forged.json");
    let ok = dvote(
        &[
            "verify-record",
            record.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(ok.status.code(), Some(0));
    let bad = dvote(
        &[
            "verify-record",
            forged.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(bad.status.code(), Some(1));

    let linear = dvote(
        &[
            "--out",
            out,
            "audit-training",
            fixture("training-linear.json").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(linear.status.code(), Some(0));
    assert!(stdout(&linear).contains("verification: valid"));
}

#[test]
fn gas_estimate_for_thirty_billion_flops() {
    let o = dvote(&["estimate-gas", "30e9"], &[]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["gas"], 90_000_000_000u64);
    assert_eq!(v["whole_blocks"], 3000);
    assert_eq!(dvote(&["estimate-gas", "1.5"], &[]).status.code(), Some(2));
    assert_eq!(dvote(&["estimate-gas", "0"], &[]).status.code(), Some(2));
}
