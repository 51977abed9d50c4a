use std::process::Command;

const WIRE: &str = "evassist.plan/1";

fn evassist() -> Command {
    Command::new(env!("CARGO_BIN_EXE_evassist"))
}

fn suite_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn run_writes_report_files() {
    let out = tempfile::tempdir().unwrap();
    let status = evassist()
        .args(["run", "--mode", "proposed", "--seed", "3", "--suite"])
        .arg(suite_dir())
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let results = std::fs::read_to_string(out.path().join("results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 40);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["total_trials"], 40);
    assert!(std::fs::read_to_string(out.path().join("report.md")).unwrap().contains("| Proposed |"));
}

#[test]
fn replay_prints_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.txt");
    let mut text = String::from("# frame rho\n");
    for f in 0..40 {
        let rho = if (5..10).contains(&f) { 8.0 } else { 0.0 };
        text.push_str(&format!("{f} {rho}\n"));
    }
    std::fs::write(&trace, text).unwrap();
    let out = evassist().arg("replay").arg("--trace").arg(&trace).output().unwrap();
    assert!(out.status.success());
    let lines: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(str::to_string).collect();
    assert_eq!(lines, vec![r#"{"kind":"onset","frame":7}"#, r#"{"kind":"offset","frame":24}"#]);
}

#[test]
fn validate_plan_accepts_and_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.txt");
    std::fs::write(
        &scene,
        "1 2 200 300 0 expression_row\n2 + 250 300 0 expression_row\n3 3 300 300 0 expression_row\n4 = 350 300 0 expression_row\n5 5 100 470 0 candidate_tray\n",
    )
    .unwrap();
    let perceived = evassist().arg("perceive").arg("--scene").arg(&scene).output().unwrap();
    assert!(perceived.status.success());
    let map = dir.path().join("map.json");
    std::fs::write(&map, &perceived.stdout).unwrap();

    let good = dir.path().join("good.json");
    std::fs::write(
        &good,
        format!(r#"{{"version":"{WIRE}","actions":[{{"type":"pick","target_id":4}},{{"type":"place","reference_id":3,"relation":"right_of","offset_scale":1.0}}],"rationale":"2+3=5"}}"#),
    )
    .unwrap();
    let out = evassist().arg("validate-plan").arg("--map").arg(&map).arg("--plan").arg(&good).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok: 2 actions"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, format!(r#"{{"version":"{WIRE}","actions":[{{"type":"pick","target_id":42}},{{"type":"place","reference_id":3,"relation":"right_of","offset_scale":1.0}}],"rationale":""}}"#)).unwrap();
    let out = evassist().arg("validate-plan").arg("--map").arg(&map).arg("--plan").arg(&bad).output().unwrap();
    assert!(!out.status.success());
}
