use std::path::Path;
use std::process::{Command, Output};

const STAGES: [&str; 7] = ["synth", "mine", "tokenizer-train", "train", "embed", "index", "precompute"];

/// A world small enough to run every stage in a few seconds.
const SMALL: [&str; 10] = [
    "synth.categories=6",
    "synth.items_per_category=30",
    "synth.customers=800",
    "synth.sessions=3000",
    "model.hidden_dim=16",
    "model.ffn_dim=32",
    "train.epochs=2",
    "selection.valid_pairs=100",
    "selection.valid_distractors=150",
    "eval.distractor_count=150",
];

fn feedkit(root: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_feedkit"));
    cmd.arg("--root").arg(root).env("RUST_LOG", "warn");
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().expect("spawn feedkit")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = feedkit(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(root: &Path, extra: &[&str]) {
    for stage in STAGES {
        let mut args = extra.to_vec();
        args.push(stage);
        ok(root, &args);
    }
}

fn first_customer(root: &Path) -> String {
    let events = std::fs::read_to_string(root.join("events.jsonl")).unwrap();
    let line = events.lines().find(|l| !l.starts_with('#')).unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    v["customer_id"].as_str().unwrap().to_string()
}

#[test]
fn stages_are_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), &[]);
    pipeline(b.path(), &[]);
    for file in [
        "catalog.jsonl",
        "events.jsonl",
        "pairs.tsv",
        "vocab.txt",
        "model.pfw",
        "trace.tsv",
        "embeddings.pfe",
        "index.pfi",
        "store.tsv",
    ] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(!x.is_empty(), "{file} is empty");
        assert!(x == y, "{file} differs between runs");
    }
    let text = std::fs::read_to_string(a.path().join("store.tsv")).unwrap();
    assert!(text.starts_with("# seed=0\n"));

    // a different root seed changes the world
    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["--seed", "1", "synth"]);
    let x = std::fs::read(a.path().join("events.jsonl")).unwrap();
    assert_ne!(x, std::fs::read(c.path().join("events.jsonl")).unwrap());
}

#[test]
fn feed_refresh_and_eval_read_the_pipeline_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline(root, &[]);
    let customer = first_customer(root);

    let feed: serde_json::Value = serde_json::from_str(&ok(root, &["feed", "--customer", &customer, "--size", "5"])).unwrap();
    let items = feed.as_array().unwrap();
    assert!(!items.is_empty() && items.len() <= 5);
    for (i, it) in items.iter().enumerate() {
        assert_eq!(it["rank"], i + 1);
        assert!(it["source_item_id"].is_string());
    }
    let unknown: serde_json::Value = serde_json::from_str(&ok(root, &["feed", "--customer", "nobody"])).unwrap();
    assert_eq!(unknown, serde_json::json!([]));

    ok(root, &["refresh"]);
    let feeds = std::fs::read_to_string(root.join("reports/feeds.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = feeds
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let customers: std::collections::HashSet<String> = std::fs::read_to_string(root.join("events.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["customer_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(records.len(), customers.len());

    let active = root.join("active.txt");
    std::fs::write(&active, format!("{customer}\nnobody\n{customer}\n")).unwrap();
    let out = root.join("inc.jsonl");
    ok(
        root,
        &["refresh", "--mode", "incremental", "--active", active.to_str().unwrap(), "--out", out.to_str().unwrap()],
    );
    let full = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = full.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines.len(), 1, "unknown and repeated ids are skipped");
    let rec: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(rec["customer_id"], customer.as_str());
    let batch_rec = records.iter().find(|r| r["customer_id"] == customer.as_str()).unwrap();
    assert_eq!(&rec, batch_rec);

    let table = ok(root, &["eval"]);
    assert!(table.contains("# random_baseline="));
    assert!(table.lines().any(|l| l.contains("overall")));
    let report = std::fs::read_to_string(root.join("reports/eval.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    assert_eq!(header["header"]["untrained"], false);
    ok(root, &["eval", "--untrained"]);
    assert!(root.join("reports/eval-untrained.txt").exists());
}

#[test]
fn binary_store_serves_the_same_items() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline(root, &[]);
    ok(root, &["--set", "paths.store=store.pfs", "precompute"]);
    let bytes = std::fs::read(root.join("store.pfs")).unwrap();
    assert_eq!(&bytes[..4], b"PFS1");
    let customer = first_customer(root);
    let ids = |args: &[&str]| -> Vec<String> {
        let v: serde_json::Value = serde_json::from_str(&ok(root, args)).unwrap();
        v.as_array().unwrap().iter().map(|i| i["item_id"].as_str().unwrap().to_string()).collect()
    };
    assert_eq!(
        ids(&["feed", "--customer", &customer]),
        ids(&["--set", "paths.store=store.pfs", "feed", "--customer", &customer])
    );
}

#[test]
fn missing_inputs_and_bad_config_fail_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = feedkit(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run stage `synth` first"), "{err}");

    let out = feedkit(dir.path(), &["--set", "model.bogus=1", "show-config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key model.bogus"));

    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"feed": {"feed_size": 7}}"#).unwrap();
    let shown: serde_json::Value =
        serde_json::from_str(&ok(dir.path(), &["--config", cfg.to_str().unwrap(), "--seed", "4", "show-config"])).unwrap();
    assert_eq!(shown["feed"]["feed_size"], 7);
    assert_eq!(shown["seed"], 4);
    assert_eq!(shown["synth"]["seed"], 4);
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn server_honors_surface_and_size() {
    use std::io::BufRead;

    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline(root, &[]);
    let customer = first_customer(root);
    let mut child = Command::new(env!("CARGO_BIN_EXE_feedkit"))
        .arg("--root")
        .arg(root)
        .args(["serve", "--port", "0"])
        .env("RUST_LOG", "error")
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let _server = Server(child);
    let mut line = String::new();
    std::io::BufReader::new(stdout).read_line(&mut line).unwrap();
    let base = format!("http://{}", line.trim().strip_prefix("listening on ").unwrap());

    let get = |path: &str| -> Result<serde_json::Value, ureq::Error> {
        let body = ureq::get(&format!("{base}{path}")).call()?.body_mut().read_to_string()?;
        Ok(serde_json::from_str(&body).unwrap())
    };
    let two = get(&format!("/feed/{customer}?size=2")).unwrap();
    assert!(two.as_array().unwrap().len() <= 2);
    let full = get(&format!("/feed/{customer}")).unwrap();
    assert_eq!(two.as_array().unwrap()[..], full.as_array().unwrap()[..two.as_array().unwrap().len()]);
    assert!(get(&format!("/feed/{customer}?surface=deals")).unwrap().is_array());
    assert_eq!(get("/feed/nobody").unwrap(), serde_json::json!([]));
    assert!(matches!(
        get(&format!("/feed/{customer}?surface=bogus")),
        Err(ureq::Error::StatusCode(400))
    ));
    let unknown_item = serde_json::json!({
        "customer_id": customer, "item_id": "no-such-item", "event_type": "buy", "timestamp": 5
    });
    let r = ureq::post(&format!("{base}/event")).send(unknown_item.to_string());
    assert!(matches!(r, Err(ureq::Error::StatusCode(400))));
}
