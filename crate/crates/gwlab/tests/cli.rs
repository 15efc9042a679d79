use std::fs;
use std::process::Command;

fn gwlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gwlab"))
}

#[test]
fn run_writes_csv_and_summary_with_hash_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"experiment":"thm1","schedule":[256,1024,4096],"tolerances":{"relative":0.5,"trend_points":0}}"#).unwrap();
    let out = dir.path().join("out");
    let st = gwlab()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "9", "--jobs", "1"])
        .output()
        .unwrap();
    assert_eq!(
        st.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&st.stdout)
    );
    let csv = fs::read_to_string(out.join("thm1.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(
        header.starts_with("# config_hash=") && header.contains("seed=9"),
        "{header}"
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], true);
    assert_eq!(summary["rows"].as_array().unwrap().len(), 3);
    assert!(header.contains(summary["config_hash"].as_str().unwrap()));
}

#[test]
fn tolerance_failure_exits_with_two() {
    let st = gwlab()
        .args([
            "verify",
            "thm1",
            "--schedule",
            "256,1024",
            "--tolerance",
            "1e-6",
        ])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stdout).contains("FAIL final_ratio"));
}

#[test]
fn invalid_phi_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(
        &cfg,
        r#"{"experiment":"corollary","schedule":[4,8],"phi":{"table":[4,2]}}"#,
    )
    .unwrap();
    let st = gwlab()
        .args(["run", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&st.stderr).contains("invalid config"));
}

#[test]
fn unknown_experiment_exits_with_one() {
    let st = gwlab().args(["verify", "thm9"]).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
}

#[test]
fn reruns_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let st = gwlab()
            .args([
                "verify",
                "zubkov",
                "--replicates",
                "20000",
                "--mc-n",
                "256",
                "--seed",
                "4",
                "--jobs",
                "2",
                "--out",
            ])
            .arg(&out)
            .output()
            .unwrap();
        assert!(st.status.code().is_some());
        fs::read_to_string(out.join("zubkov.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}
