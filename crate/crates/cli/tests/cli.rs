use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, Mutex};

use axum::http::HeaderMap;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use tempfile::TempDir;

const CATEGORIES: [&str; 4] = ["Health & Household", "Electronics", "Home & Kitchen", "Sports & Outdoors"];
const SCHEMES: [&str; 6] = ["baseline", "only_local", "cat_obf_only", "cat_obf_deobf", "bert_obf_only", "bert_obf_deobf"];

fn privrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privrec")).args(args).output().expect("binary runs")
}

fn privrec_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_privrec"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn check(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 4 categories x 30 products; 24 users, each buying 9 products of a single
/// category. Health products carry a sensitive label.
fn write_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let mut meta = String::new();
    for (c, cat) in CATEGORIES.iter().enumerate() {
        for i in 0..30 {
            let label = if c == 0 { "sensitive" } else { "nonsensitive" };
            meta += &json!({
                "parent_asin": format!("P{c}{i:03}"),
                "main_category": cat,
                "title": format!("{cat} item {i} model {}", i * 7 % 13),
                "features": [format!("feature {} of {}", i % 5, cat)],
                "description": [],
                "details": {"Brand": format!("brand{}", i % 3)},
                "label": label,
            })
            .to_string();
            meta.push('\n');
        }
    }
    meta += "not json\n";
    let mut inter = String::new();
    for u in 0..24 {
        let c = u % 4;
        for k in 0..9 {
            let item = format!("P{c}{:03}", (u * 5 + k * 3) % 30);
            inter += &json!({"user_id": format!("U{u:02}"), "item_id": item, "timestamp": 1000 + k}).to_string();
            inter.push('\n');
        }
    }
    let (m, i) = (dir.join("meta.jsonl"), dir.join("interactions.jsonl"));
    fs::write(&m, meta).unwrap();
    fs::write(&i, inter).unwrap();
    (m, i)
}

fn mock_config(scheme: &str) -> String {
    let mut cfg = format!("scheme = \"{scheme}\"\nn_total = 10\nseed = 3\nparallelism = 3\n");
    if scheme.contains("obf") {
        cfg += "\n[scorer]\nkind = \"categorical\"\nsensitive_categories = [\"Health & Household\"]\n";
    }
    if scheme != "only_local" {
        cfg += "\n[server_backend]\nkind = \"mock_retrieval\"\nsame_category = true\n";
    }
    if scheme == "only_local" || scheme.ends_with("deobf") {
        cfg += "\n[local_backend]\nkind = \"mock_retrieval\"\nsame_category = true\n";
    }
    cfg
}

/// ingest -> build-index -> run every scheme -> report, all under `root`.
fn pipeline(root: &Path) -> PathBuf {
    let (meta, inter) = write_fixture(root);
    let archive = root.join("catalog.json");
    let index = root.join("index.bin");
    check(&privrec(&[
        "ingest",
        "--metadata",
        s(&meta),
        "--interactions",
        s(&inter),
        "--min-items",
        "6",
        "--window",
        "5",
        "--out",
        s(&archive),
    ]));
    check(&privrec(&["build-index", "--catalog", s(&archive), "--dimension", "128", "--out", s(&index)]));
    let mut run_dirs = Vec::new();
    for scheme in SCHEMES {
        let cfg = root.join(format!("{scheme}.toml"));
        fs::write(&cfg, mock_config(scheme)).unwrap();
        let out = root.join("runs").join(scheme);
        check(&privrec(&[
            "run",
            "--config",
            s(&cfg),
            "--catalog",
            s(&archive),
            "--index",
            s(&index),
            "--out",
            s(&out),
            "--seed",
            "11",
        ]));
        run_dirs.push(out);
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(run_dirs[0].join("manifest.json")).unwrap()).unwrap();
    let baseline_id = manifest["run_id"].as_str().unwrap().to_string();
    let report_dir = root.join("report");
    let mut args = vec!["report".to_string(), "--runs".to_string()];
    args.extend(run_dirs.iter().map(|d| s(d).to_string()));
    args.extend(["--baseline".to_string(), baseline_id, "--out".to_string(), s(&report_dir).to_string()]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = privrec(&args);
    check(&out);
    let table = String::from_utf8(out.stdout).unwrap();
    for col in ["HR@10 Categorical", "HR@10 Semantic", "L2 Distance", "L1 Distance", "PL_b (%)", "PL_s (%)"] {
        assert!(table.contains(col), "missing column {col} in\n{table}");
    }
    report_dir
}

#[test]
fn end_to_end_reports_are_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    for f in ["report.json", "report.txt"] {
        assert_eq!(fs::read(ra.join(f)).unwrap(), fs::read(rb.join(f)).unwrap(), "{f} differs between runs");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(ra.join("report.json")).unwrap()).unwrap();
    let bundles = report["bundles"].as_array().unwrap();
    let order: Vec<&str> = bundles.iter().map(|b| b["scheme"].as_str().unwrap()).collect();
    assert_eq!(order, SCHEMES);
    let deobf = bundles.iter().find(|b| b["scheme"] == "bert_obf_deobf").unwrap();
    assert_eq!(deobf["hr10_category"].as_f64(), Some(1.0));
    assert_eq!(deobf["failed_users"].as_u64(), Some(0));
    let base = &bundles[0];
    assert_eq!((base["pl_b"].as_f64(), base["pl_s"].as_f64()), (Some(1.0), None));
    for b in bundles.iter().filter(|b| b["scheme"].as_str().unwrap().contains("obf")) {
        assert_eq!(b["pl_b"].as_f64(), Some(0.0), "{}", b["scheme"]);
    }
}

#[test]
fn selfcheck_passes() {
    let out = privrec(&["selfcheck", "--seed", "5"]);
    check(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("[PASS]").count(), 5, "{text}");
    assert!(!text.contains("[FAIL]"));
}

#[test]
fn exit_codes_are_stable() {
    let dir = TempDir::new().unwrap();
    let p = |n: &str| dir.path().join(n);
    let missing = privrec(&["run", "--catalog", "c.json", "--index", "i.bin", "--out", "o"]);
    assert_eq!(missing.status.code(), Some(3));
    let absent = privrec(&["run", "--config", s(&p("nope.toml")), "--catalog", "c", "--index", "i", "--out", "o"]);
    assert_eq!(absent.status.code(), Some(3));
    fs::write(p("bad.toml"), "scheme = [unterminated").unwrap();
    let bad = privrec(&["run", "--config", s(&p("bad.toml")), "--catalog", "c", "--index", "i", "--out", "o"]);
    assert_eq!(bad.status.code(), Some(3));
    fs::write(p("incomplete.toml"), "scheme = \"baseline\"\n").unwrap();
    let incomplete = privrec(&["run", "--config", s(&p("incomplete.toml")), "--catalog", "c", "--index", "i", "--out", "o"]);
    assert_eq!(incomplete.status.code(), Some(3));
    assert_eq!(privrec(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(privrec(&[]).status.code(), Some(2));
    assert_eq!(privrec(&["--help"]).status.code(), Some(0));
}

#[test]
fn help_documents_config_keys() {
    let out = privrec(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["scheme", "n_total", "[scorer]", "[server_backend]", "auth_token_env", "--seed", "--log-level", "--parallelism"] {
        assert!(text.contains(key), "help lacks {key}");
    }
}

struct Stub {
    addr: SocketAddr,
    auth_headers: Arc<Mutex<Vec<String>>>,
}

fn spawn_chat_stub() -> Stub {
    let auth_headers = Arc::new(Mutex::new(Vec::new()));
    let seen = auth_headers.clone();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let app = Router::new().route(
                "/v1/chat/completions",
                post(move |headers: HeaderMap, Json(_body): Json<Value>| {
                    let seen = seen.clone();
                    async move {
                        let auth = headers.get("authorization").and_then(|v| v.to_str().ok()).unwrap_or("").to_string();
                        seen.lock().unwrap().push(auth);
                        let list: Vec<String> = (1..=10).map(|i| format!("{i}. Stub product {i}")).collect();
                        Json(json!({"choices": [{"message": {"role": "assistant", "content": list.join("\n")}}]}))
                    }
                }),
            );
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    Stub { addr: rx.recv().unwrap(), auth_headers }
}

fn scan_tree(dir: &Path, secret: &str) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            scan_tree(&path, secret);
        } else {
            let bytes = fs::read(&path).unwrap();
            assert!(!String::from_utf8_lossy(&bytes).contains(secret), "secret found in {}", path.display());
        }
    }
}

#[test]
fn auth_token_never_reaches_logs_or_artifacts() {
    const SECRET: &str = "sk-test-7c1f0e9a4b2d4e6f8a0b1c2d3e4f5a6b";
    let root = TempDir::new().unwrap();
    let (meta, inter) = write_fixture(root.path());
    let archive = root.path().join("catalog.json");
    let index = root.path().join("index.bin");
    check(&privrec(&[
        "ingest", "--metadata", s(&meta), "--interactions", s(&inter), "--min-items", "6", "--window", "5", "--out", s(&archive),
    ]));
    check(&privrec(&["build-index", "--catalog", s(&archive), "--dimension", "64", "--out", s(&index)]));

    let stub = spawn_chat_stub();
    let cfg = root.path().join("remote.toml");
    fs::write(
        &cfg,
        format!(
            "scheme = \"baseline\"\n[server_backend]\nkind = \"remote_api\"\nbase_url = \"http://{}\"\nmodel_name = \"stub\"\nauth_token_env = \"PRIVREC_TEST_TOKEN\"\n",
            stub.addr
        ),
    )
    .unwrap();
    let out_dir = root.path().join("run-ok");
    let ok = privrec_env(
        &["--log-level", "trace", "run", "--config", s(&cfg), "--catalog", s(&archive), "--index", s(&index), "--out", s(&out_dir)],
        &[("PRIVREC_TEST_TOKEN", SECRET)],
    );
    check(&ok);
    let headers = stub.auth_headers.lock().unwrap().clone();
    assert!(!headers.is_empty());
    assert!(headers.iter().all(|h| h == &format!("Bearer {SECRET}")));

    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let dead_cfg = root.path().join("dead.toml");
    fs::write(
        &dead_cfg,
        format!(
            "scheme = \"baseline\"\n[server_backend]\nkind = \"remote_api\"\nbase_url = \"http://{dead}\"\nmodel_name = \"stub\"\nauth_token_env = \"PRIVREC_TEST_TOKEN\"\ntimeout_secs = 2\n"
        ),
    )
    .unwrap();
    let dead_dir = root.path().join("run-dead");
    let unreachable = privrec_env(
        &["--log-level", "trace", "run", "--config", s(&dead_cfg), "--catalog", s(&archive), "--index", s(&index), "--out", s(&dead_dir)],
        &[("PRIVREC_TEST_TOKEN", SECRET)],
    );
    assert_eq!(unreachable.status.code(), Some(4), "{}", String::from_utf8_lossy(&unreachable.stderr));

    let missing_token = privrec(&["run", "--config", s(&cfg), "--catalog", s(&archive), "--index", s(&index), "--out", s(&dead_dir)]);
    assert_eq!(missing_token.status.code(), Some(3));

    for o in [&ok, &unreachable] {
        assert!(!String::from_utf8_lossy(&o.stdout).contains(SECRET));
        assert!(!String::from_utf8_lossy(&o.stderr).contains(SECRET));
    }
    scan_tree(&out_dir, SECRET);
    scan_tree(&dead_dir, SECRET);
}

#[test]
fn train_and_classify() {
    let root = TempDir::new().unwrap();
    let (meta, inter) = write_fixture(root.path());
    let archive = root.path().join("catalog.json");
    check(&privrec(&[
        "ingest", "--metadata", s(&meta), "--interactions", s(&inter), "--min-items", "6", "--window", "5", "--out", s(&archive),
    ]));
    let labels: String = CATEGORIES
        .iter()
        .enumerate()
        .flat_map(|(c, _)| {
            (0..30).map(move |i| {
                let label = if c == 0 { "sensitive" } else { "nonsensitive" };
                json!({"product_id": format!("P{c}{i:03}"), "label": label}).to_string() + "\n"
            })
        })
        .collect();
    let labels_path = root.path().join("labels.jsonl");
    fs::write(&labels_path, labels).unwrap();
    let model = root.path().join("model.bin");
    let train = privrec(&["train-classifier", "--labels", s(&labels_path), "--catalog", s(&archive), "--seed", "4", "--out", s(&model)]);
    check(&train);
    assert!(String::from_utf8_lossy(&train.stdout).contains("validation F1"));
    let scores = root.path().join("scores.jsonl");
    check(&privrec(&["classify", "--model", s(&model), "--catalog", s(&archive), "--threshold", "0.5", "--out", s(&scores)]));
    let lines: Vec<Value> = fs::read_to_string(&scores).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 120);
    for l in &lines {
        let id = l["product_id"].as_str().unwrap();
        assert_eq!(l["sensitive"].as_bool().unwrap(), id.starts_with("P0"), "{l}");
    }
}
