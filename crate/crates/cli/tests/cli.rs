use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tapnet_core::graph_io::{write_tu_dataset, Dataset, Graph};

fn tapnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tapnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Twenty small stars and paths written as a TU dataset named TOY.
fn toy_data(root: &Path) -> PathBuf {
    let mut graphs = Vec::new();
    for i in 0..20 {
        let n = 4 + i % 5;
        let edges: Vec<_> = if i % 2 == 0 {
            (1..n).map(|j| (0, j)).collect()
        } else {
            (1..n).map(|j| (j - 1, j)).collect()
        };
        graphs.push(Graph::from_edges(n, &edges, i % 2).unwrap());
    }
    let d = Dataset {
        name: "TOY".into(),
        graphs,
        num_classes: 2,
        feature_dim: 0,
    };
    let dir = root.join("data");
    write_tu_dataset(&d, dir.join("TOY")).unwrap();
    dir
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json" | "dat" | "dot")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_pooling_is_a_usage_error() {
    let o = tapnet(&["crossval", "--dataset", "MUTAG", "--pooling", "frob"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for kind in ["tap", "tap_no_lv", "tap_no_gv", "tap_no_gct", "topk", "none"] {
        assert!(err.contains(kind), "{err}");
    }
}

#[test]
fn invalid_values_are_usage_errors() {
    for args in [
        vec!["crossval", "--dataset", "X", "--rates", "0.5,1.5"],
        vec!["crossval", "--dataset", "X", "--epochs", "0"],
        vec!["crossval", "--dataset", "X", "--gating", "maybe"],
        vec!["crossval"],
        vec!["train", "--dataset", "X", "--fold", "10"],
        vec!["frobnicate"],
    ] {
        let o = tapnet(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = tapnet(&["crossval", "--dataset", "NOPE", "--data-dir", s(tmp.path()), "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("NOPE"));
    // manifest first, even for failed runs
    assert!(out.join("manifest.json").exists());
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_data(tmp.path());
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "dataset = \"TOY\"\nseed = 3\nepochs = 1\nlambda = 0.5\nhidden_dim = 8\n").unwrap();
    let out = tmp.path().join("out");
    let o = tapnet(&[
        "params", "--config", s(&cfg), "--data-dir", s(&data), "--seed", "5", "--out-dir", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["model"]["lambda"], 0.5);
    assert_eq!(m["config"]["model"]["hidden_dim"], 8);
    assert_eq!(m["config"]["train"]["epochs"], 1);

    fs::write(&cfg, "pooling = \"frob\"\n").unwrap();
    let o = tapnet(&["params", "--config", s(&cfg), "--feature-dim", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn crossval_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_data(tmp.path());
    let a = tmp.path().join("a");
    let args = [
        "crossval", "--dataset", "TOY", "--data-dir", s(&data), "--epochs", "2", "--hidden-dim", "8",
        "--seed", "7", "--out-dir", s(&a),
    ];
    let o = tapnet(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = outputs(&a);
    assert!(first.contains_key("report.json") && first.contains_key("curves.csv"));
    assert!(first.contains_key("fold9.ckpt.json"));
    let o = tapnet(&args);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(first, outputs(&a));

    let b = tmp.path().join("b");
    let o = tapnet(&["rerun", "--manifest", s(&a.join("manifest.json")), "--out-dir", s(&b)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut again = outputs(&b);
    let mut first = first;
    let ma = first.remove("manifest.json").unwrap();
    let mb = again.remove("manifest.json").unwrap();
    assert_eq!(first, again);
    let strip = |m: &[u8]| {
        let mut v: serde_json::Value = serde_json::from_slice(m).unwrap();
        v["out_dir"] = serde_json::Value::Null;
        v["config"]["out_dir"] = serde_json::Value::Null;
        v
    };
    assert_eq!(strip(&ma), strip(&mb));
}

#[test]
fn train_then_export_dot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_data(tmp.path());
    let out = tmp.path().join("t");
    let o = tapnet(&[
        "train", "--dataset", "TOY", "--data-dir", s(&data), "--epochs", "2", "--fold", "3", "--out-dir", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = out.join("fold3.ckpt.json");
    assert!(ckpt.exists());
    let csv = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let dot_dir = tmp.path().join("dot");
    let o = tapnet(&[
        "export-dot", "--dataset", "TOY", "--data-dir", s(&data), "--checkpoint", s(&ckpt),
        "--graph-index", "4", "--out-dir", s(&dot_dir),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for stage in 0..4 {
        let text = fs::read_to_string(dot_dir.join(format!("stage{stage}.dot"))).unwrap();
        assert!(text.starts_with("graph "), "{text}");
        assert!(text.trim_end().ends_with('}'));
        assert_eq!(text.matches('{').count(), text.matches('}').count());
        for line in text.lines().skip(1) {
            let line = line.trim();
            assert!(line.is_empty() || line == "}" || line.ends_with(';') || line.ends_with(']'), "{line}");
        }
    }

    let o = tapnet(&[
        "export-dot", "--dataset", "TOY", "--data-dir", s(&data), "--checkpoint", s(&ckpt),
        "--graph-index", "99", "--out-dir", s(&dot_dir),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn lambda_sweep_and_ablate_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_data(tmp.path());
    let out = tmp.path().join("sweep");
    let o = tapnet(&[
        "lambda-sweep", "--dataset", "TOY", "--data-dir", s(&data), "--epochs", "1", "--hidden-dim", "4",
        "--out-dir", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("lambda_sweep.csv")).unwrap();
    let lambdas: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(lambdas, ["0.01", "0.1", "1", "10", "100"]);

    let out = tmp.path().join("ablate");
    let o = tapnet(&[
        "ablate", "--dataset", "TOY", "--data-dir", s(&data), "--epochs", "1", "--hidden-dim", "4",
        "--num-seeds", "2", "--out-dir", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "variant,mean_acc,std_acc,acc_seed0,acc_seed1");
    let variants: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["none", "tap_no_lv", "tap_no_gv", "tap_no_gct", "tap", "tap_aux"]);
}

#[test]
fn gradcheck_detects_injected_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = tmp.path().join("ok");
    let o = tapnet(&["gradcheck", "--instances", "2", "--out-dir", s(&ok)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bad = tmp.path().join("bad");
    let o = tapnet(&["gradcheck", "--instances", "2", "--inject-sign-flip", "--out-dir", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(bad.join("gradcheck.json")).unwrap()).unwrap();
    assert!(report.to_string().contains("gcn"));
}

#[test]
fn params_reports_tap_overhead() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p");
    let o = tapnet(&["params", "--feature-dim", "7", "--num-classes", "2", "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("params.json")).unwrap()).unwrap();
    assert_eq!(v["tap_extra"], 7056);
    let o = tapnet(&[
        "params", "--feature-dim", "7", "--hidden-dim", "10", "--pooling", "topk", "--out-dir", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("params.json")).unwrap()).unwrap();
    assert_eq!(v["tap_extra"], 30);
}
