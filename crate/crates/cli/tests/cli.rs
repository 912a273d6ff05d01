use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn spes(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spes"))
        .args(args)
        .env("SPES_METRICS_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = spes(root, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn config_lists_presets_and_resolves_overrides() {
    let root = tempfile::tempdir().unwrap();
    let list = ok(root.path(), &["config", "--list"]);
    for name in ["desk-spes", "desk-diloco", "desk-centralized", "desk-tiny"] {
        assert!(list.lines().any(|l| l.trim() == name), "{list}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&ok(root.path(), &["config", "--preset", "desk-spes", "--nodes", "2", "--h", "7"])).unwrap();
    assert_eq!(json["nodes"], 2);
    assert_eq!(json["h"], 7);
}

#[test]
fn run_then_report() {
    let root = tempfile::tempdir().unwrap();
    let text = ok(root.path(), &["run", "--preset", "desk-tiny", "--name", "tiny"]);
    assert!(text.contains("final eval ce"), "{text}");
    let dir = root.path().join("tiny");
    for f in ["metrics.csv", "manifest.json", "ledger.json", "cost.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&ok(root.path(), &["report", "tiny", "--json"])).unwrap();
    assert_eq!(report["no_rounds"], false);
    assert_eq!(report["totals"]["rounds"], 5);
    assert_eq!(report["issues"].as_array().unwrap().len(), 0);
    assert_eq!(report["ledger"]["within_overhead"], true);

    // the absolute path works as well as the name
    let by_path = ok(root.path(), &["report", dir.to_str().unwrap()]);
    assert!(by_path.contains("final losses"), "{by_path}");
}

#[test]
fn cost_two_b() {
    let root = tempfile::tempdir().unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&ok(root.path(), &["cost", "--model", "2b", "--nodes", "16", "--attention"])).unwrap();
    let ratio = json["comm_ratio"].as_f64().unwrap();
    assert!((ratio - 0.667).abs() <= 0.005, "{ratio}");
    assert_eq!(json["nodes"], 16);
}

#[test]
fn theory_check_writes_its_report() {
    let root = tempfile::tempdir().unwrap();
    let text = ok(
        root.path(),
        &["theory-check", "--rounds", "40", "--variance-reps", "200", "--out", "theory"],
    );
    assert!(text.contains("variance"), "{text}");
    assert!(root.path().join("theory").join("theory.json").exists());
    let report = ok(root.path(), &["report", "theory"]);
    assert!(!report.is_empty());
}

#[test]
fn gen_corpus_writes_json() {
    let root = tempfile::tempdir().unwrap();
    let path = root.path().join("c.json");
    ok(
        root.path(),
        &["gen-corpus", "--sequences", "12", "--sources", "3", "--out", path.to_str().unwrap()],
    );
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(json["sequences"].as_array().unwrap().len(), 12);
}

#[test]
fn errors_exit_nonzero() {
    let root = tempfile::tempdir().unwrap();
    for args in [
        &["run", "--preset", "no-such-preset"][..],
        &["report", "missing-run"],
        &["cost", "--model", "2b", "--nodes", "17"],
        &["run", "--preset", "desk-tiny", "--h", "0"],
    ] {
        let out = spes(root.path(), args);
        assert!(!out.status.success(), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn serve_and_work_processes_finish_a_run() {
    let root = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let bin = env!("CARGO_BIN_EXE_spes");
    let server = Command::new(bin)
        .args(["serve", "--preset", "desk-tiny", "--name", "served", "--listen", &addr])
        .env("SPES_METRICS_ROOT", root.path())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let workers: Vec<_> = (0..2)
        .map(|node| {
            Command::new(bin)
                .args(["work", "--preset", "desk-tiny", "--connect", &addr, "--node", &node.to_string()])
                .stdout(Stdio::null())
                .stderr(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    for w in workers {
        let out = w.wait_with_output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = server.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let served: serde_json::Value =
        serde_json::from_str(&ok(root.path(), &["report", "served", "--json"])).unwrap();
    ok(root.path(), &["run", "--preset", "desk-tiny", "--name", "local"]);
    let local: serde_json::Value = serde_json::from_str(&ok(root.path(), &["report", "local", "--json"])).unwrap();
    assert_eq!(served["totals"]["rounds"], local["totals"]["rounds"]);
    assert_eq!(served["final_eval"], local["final_eval"]);
    assert_eq!(
        std::fs::read(root.path().join("served/checkpoint.bin")).unwrap(),
        std::fs::read(root.path().join("local/checkpoint.bin")).unwrap()
    );
}
