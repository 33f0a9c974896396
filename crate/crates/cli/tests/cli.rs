use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_collsynth"))
}

fn synth(dir: &Path, extra: &[&str]) -> (String, i32) {
    let out = dir.join("schedule.json");
    let mut cmd = bin();
    cmd.args([
        "synth",
        "--builder",
        "ring:4:uni",
        "--collective",
        "scatter",
        "--root",
        "0",
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    cmd.args(extra);
    let output = cmd.output().expect("runs");
    (
        String::from_utf8_lossy(&output.stdout).to_string(),
        output.status.code().unwrap_or(-1),
    )
}

#[test]
fn synth_ilp_scatter_reports_three_steps() {
    let dir = tempfile::tempdir().unwrap();
    let (stdout, code) = synth(dir.path(), &["--synthesizer", "ilp", "--time-limit", "30"]);
    assert_eq!(code, 0, "stdout: {stdout}");
    assert!(stdout.contains("t_f: 3 steps"), "stdout: {stdout}");
    // Manifest sits alongside the schedule.
    assert!(dir.path().join("schedule.manifest.json").exists());
}

#[test]
fn synth_greedy_is_deterministic() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let args = ["--synthesizer", "greedy", "--runs", "8"];
    let (_, code_a) = synth(dir_a.path(), &args);
    let (_, code_b) = synth(dir_b.path(), &args);
    assert_eq!(code_a, 0);
    assert_eq!(code_b, 0);
    let a = std::fs::read(dir_a.path().join("schedule.json")).unwrap();
    let b = std::fs::read(dir_b.path().join("schedule.json")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical schedules");
}

#[test]
fn verify_detects_tampering_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let (_, code) = synth(dir.path(), &["--synthesizer", "greedy"]);
    assert_eq!(code, 0);
    let path = dir.path().join("schedule.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let sends = v["sends"].as_array_mut().unwrap();
    sends.pop();
    std::fs::write(&path, v.to_string()).unwrap();

    let output = bin()
        .args([
            "verify",
            "--builder",
            "ring:4:uni",
            "--collective",
            "scatter",
            "--root",
            "0",
            "--schedule",
            path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stdout).contains("violation"));
}

#[test]
fn eval_reproduces_the_synth_reported_time() {
    let dir = tempfile::tempdir().unwrap();
    let (stdout, code) = synth(dir.path(), &["--synthesizer", "greedy"]);
    assert_eq!(code, 0);
    let reported: f64 = stdout
        .lines()
        .find(|l| l.starts_with("evaluated:"))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap();
    let output = bin()
        .args([
            "eval",
            "--builder",
            "ring:4:uni",
            "--schedule",
            dir.path().join("schedule.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    let report: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("eval prints JSON");
    let evaluated = report["collective_time_us"].as_f64().unwrap();
    assert!((evaluated - reported).abs() < 1e-6);
}

#[test]
fn taccl_like_schedule_passes_only_relaxed_verification() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("schedule.json");
    // Two chunks per NPU force contention on the ring's single egress links.
    let status = bin()
        .args([
            "synth",
            "--builder",
            "ring:3:uni",
            "--collective",
            "all-gather",
            "--chunks-per-npu",
            "2",
            "--synthesizer",
            "taccl-like",
            "--time-limit",
            "30",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));

    let strict = bin()
        .args([
            "verify",
            "--builder",
            "ring:3:uni",
            "--collective",
            "all-gather",
            "--chunks-per-npu",
            "2",
            "--schedule",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(strict.status.code(), Some(1), "congestion must be flagged");

    let relaxed = bin()
        .args([
            "verify",
            "--builder",
            "ring:3:uni",
            "--collective",
            "all-gather",
            "--chunks-per-npu",
            "2",
            "--schedule",
            out.to_str().unwrap(),
            "--relaxed",
        ])
        .output()
        .unwrap();
    assert_eq!(relaxed.status.code(), Some(0));
}

#[test]
fn compare_prints_all_columns() {
    let output = bin()
        .args([
            "compare",
            "--builder",
            "ring:3:uni",
            "--collective",
            "all-gather",
            "--time-limit",
            "10",
            "--seed",
            "1",
        ])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&output.stdout);
    for name in ["ilp", "greedy", "clustered", "taccl-like", "ring", "direct"] {
        assert!(stdout.contains(name), "missing {name} in:\n{stdout}");
    }
}

#[test]
fn unreachable_exits_3_and_bad_input_exits_2() {
    // Failing NPU 1 cuts the uni ring; scatter from 0 cannot reach anyone.
    let output = bin()
        .args([
            "synth",
            "--builder",
            "ring:3:uni",
            "--fail",
            "1",
            "--collective",
            "scatter",
            "--root",
            "0",
            "--out",
            "/tmp/unused_schedule.json",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));

    let output = bin()
        .args([
            "synth",
            "--builder",
            "ring:9000x:uni",
            "--collective",
            "scatter",
            "--root",
            "0",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn custom_collective_file_on_a_composed_topology() {
    let dir = tempfile::tempdir().unwrap();
    let coll_path = dir.path().join("collective.json");
    // Two chunks crossing the 8-NPU Ring(2) x FC(4) system.
    std::fs::write(
        &coll_path,
        serde_json::json!({
            "kind": "custom",
            "chunks": [{"id": 0, "size_bytes": 1048576}, {"id": 1, "size_bytes": 1048576}],
            "pre": [[0, 0], [1, 5]],
            "post": [[0, 7], [1, 2], [1, 0]],
            "combining": false,
        })
        .to_string(),
    )
    .unwrap();
    let out = dir.path().join("schedule.json");
    let output = bin()
        .args([
            "synth",
            "--dims",
            "ring:2:bi,fc:4",
            "--bw-gbps",
            "200,100",
            "--collective-file",
            coll_path.to_str().unwrap(),
            "--synthesizer",
            "clustered",
            "--cluster-window",
            "4",
            "--time-limit",
            "20",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));

    let verify = bin()
        .args([
            "verify",
            "--dims",
            "ring:2:bi,fc:4",
            "--bw-gbps",
            "200,100",
            "--collective-file",
            coll_path.to_str().unwrap(),
            "--schedule",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(verify.status.code(), Some(0), "{}", String::from_utf8_lossy(&verify.stdout));
}

#[test]
fn fault_injection_still_synthesizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("schedule.json");
    let output = bin()
        .args([
            "synth",
            "--builder",
            "mesh:4x4",
            "--fail",
            "7,9",
            "--collective",
            "all-reduce",
            "--synthesizer",
            "greedy",
            "--runs",
            "4",
            "--seed",
            "2",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));

    let verify = bin()
        .args([
            "verify",
            "--builder",
            "mesh:4x4",
            "--fail",
            "7,9",
            "--collective",
            "all-reduce",
            "--schedule",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(verify.status.code(), Some(0), "{}", String::from_utf8_lossy(&verify.stdout));
}
