use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_selfspec"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn speedup_emits_one_row() {
    let o = run(&["speedup", "--k", "16", "--alpha", "0.75", "--s", "0.05", "--batch", "64", "--kv-bytes", "1e10"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("t_base_ms,t_spec_ms,eta,attn_reduction"));
    assert!(lines[1].contains("7.22222222"));
}

#[test]
fn speedup_rejects_bad_point() {
    let o = run(&["speedup", "--k", "0", "--alpha", "0.75", "--s", "0.05", "--batch", "64", "--kv-bytes", "1e10"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(configs().join("toy.toml")).unwrap();
    std::fs::write(&bad, text.replace("[spec]", "[spec]\nstride = 3")).unwrap();
    let o = run(&["simulate", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stride"));

    let missing = dir.path().join("missing.toml");
    let o = run(&["decode", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn decode_matches_greedy() {
    let cfg = configs().join("toy.toml");
    let dir = tempfile::tempdir().unwrap();
    let rounds = dir.path().join("rounds.csv");
    let o = run(&[
        "decode",
        "--config",
        cfg.to_str().unwrap(),
        "--prompt",
        "3,1,4,1,5,9,2,6",
        "--max-output",
        "40",
        "--rounds-csv",
        rounds.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("matches greedy decoding"));
    let csv = std::fs::read_to_string(rounds).unwrap();
    assert!(csv.starts_with("round_index,accepted_count,kv_len,budget"));
}

#[test]
fn simulate_is_byte_stable() {
    let cfg = configs().join("toy.toml");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", d.path().to_str().unwrap(), "--tokens"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["sim.csv", "sim.json"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let json = std::fs::read_to_string(dirs[0].path().join("sim.json")).unwrap();
    assert!(json.contains("\"realized_alpha\""));
    let csv = std::fs::read_to_string(dirs[0].path().join("sim.csv")).unwrap();
    assert!(csv.starts_with(
        "iteration,gemm_tokens,attn_bytes,latency_ms,device_util,offloaded_pages,stalled_requests\n"
    ));
}

#[test]
fn sweep_writes_one_row_per_point() {
    let cfg = configs().join("toy.toml");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = run(&[
        "sweep", "--config", cfg.to_str().unwrap(), "--k", "2,4", "--s", "0.1,0.2", "--alpha", "0.5,0.9", "--batch", "4",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 1 + 8);
    assert!(text.starts_with("k,s,alpha,batch,tokens_per_second,eta"));
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}
