use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn gtnp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtnp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, epochs: usize, emerging: bool) -> std::path::PathBuf {
    let cfg = json!({
        "seed": 3,
        "output_dir": dir.join("run"),
        "data": {
            "synth": {
                "class_count": 3,
                "shape": [10, 10],
                "samples_per_class": 16,
                "emerging_class": emerging,
                "seed": 3
            },
            "target_train_count": 36
        },
        "model": {
            "d_f": 8, "d_g": 4, "d_u": 8, "d_z": 8,
            "conv_channels": [2, 4], "gcn_hidden": 8, "edge_hidden": 8, "message_width": 8
        },
        "train": {
            "batch_size": 8, "epochs": epochs, "n_ref": 12, "context_size": 8,
            "emerging": emerging,
            "gcn": { "epochs": 5 }
        },
        "uncertainty": { "n_draws": 5, "selected": [0] }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn synth_writes_two_four_class_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = gtnp(&["synth", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for d in ["source", "target"] {
        let meta = read_json(&out.join(d).join("meta.json"));
        assert_eq!(meta["class_count"], 4);
    }
}

#[test]
fn synth_emerging_lists_three_source_classes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1, true);
    let out = dir.path().join("data");
    assert!(gtnp(&["synth", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let src = read_json(&out.join("source/meta.json"));
    let tgt = read_json(&out.join("target/meta.json"));
    assert_eq!(src["classes_present"].as_array().unwrap().len(), 2);
    assert_eq!(tgt["classes_present"].as_array().unwrap().len(), 3);

    let dir4 = tempfile::tempdir().unwrap();
    let out4 = dir4.path().join("data");
    let cfg4 = json!({ "data": { "synth": { "emerging_class": true } } });
    let p4 = dir4.path().join("c.json");
    fs::write(&p4, cfg4.to_string()).unwrap();
    assert!(gtnp(&["synth", "--config", s(&p4), "--out", s(&out4)]).status.success());
    assert_eq!(read_json(&out4.join("source/meta.json"))["classes_present"], json!([1, 2, 3]));
    assert_eq!(read_json(&out4.join("target/meta.json"))["classes_present"], json!([0, 1, 2, 3]));
}

#[test]
fn synth_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1, false);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(gtnp(&["synth", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(gtnp(&["synth", "--config", s(&cfg), "--out", s(&b)]).status.success());
    assert_eq!(
        fs::read(a.join("source/samples.bin")).unwrap(),
        fs::read(b.join("source/samples.bin")).unwrap()
    );
    let c = dir.path().join("c");
    assert!(gtnp(&["synth", "--config", s(&cfg), "--seed", "4", "--out", s(&c)]).status.success());
    assert_ne!(
        fs::read(a.join("source/samples.bin")).unwrap(),
        fs::read(c.join("source/samples.bin")).unwrap()
    );
}

#[test]
fn prepare_windows_a_signal() {
    let dir = tempfile::tempdir().unwrap();
    let signal: String = (0..2048).map(|i| format!("{}\n", (i as f64 * 0.1).sin())).collect();
    fs::write(dir.path().join("sig.txt"), signal).unwrap();
    let manifest = json!({ "signals": [{ "path": "sig.txt", "condition": "c0", "class": 0 }] });
    let mpath = dir.path().join("manifest.json");
    fs::write(&mpath, manifest.to_string()).unwrap();
    let out = dir.path().join("prepared");
    let o = gtnp(&["prepare", "--manifest", s(&mpath), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let meta = read_json(&out.join("c0/meta.json"));
    assert_eq!(meta["labels"].as_array().unwrap().len(), 2);
}

#[test]
fn prepare_rejects_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mpath = dir.path().join("manifest.json");
    fs::write(&mpath, r#"{"signals": []}"#).unwrap();
    let out = dir.path().join("prepared");
    let o = gtnp(&["prepare", "--manifest", s(&mpath), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"seed": 1, "modle": {}}"#).unwrap();
    let o = gtnp(&["train", "--config", s(&p)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("modle"));
}

#[test]
fn zero_epoch_train_emits_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 0, false);
    let out = dir.path().join("zero");
    let o = gtnp(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.bin", "metrics.json", "uncertainty.json", "trace.jsonl", "epochs.json", "kl_trace.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let epochs = read_json(&out.join("epochs.json"));
    assert_eq!(epochs["global"][0]["var_avg"], 1.0);
}

#[test]
fn train_twice_gives_identical_metrics_and_eval_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2, false);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = gtnp(&["train", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ma = fs::read(a.join("metrics.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.json")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());

    let metrics: Value = serde_json::from_slice(&ma).unwrap();
    let accs = metrics["target_accuracy"].as_object().unwrap();
    assert!(accs.contains_key("gtnp") && accs.contains_key("source_only") && accs.contains_key("mmd_only"));
    assert!(metrics["provenance"]["config_hash"].is_string());

    let eval_out = dir.path().join("eval");
    let o = gtnp(&[
        "eval",
        "--checkpoint",
        s(&a.join("checkpoint.bin")),
        "--dataset",
        s(&a.join("data/target")),
        "--out",
        s(&eval_out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval = read_json(&eval_out.join("eval_metrics.json"));
    assert_eq!(eval["metrics"], metrics["gtnp"]["target"]);

    let rep = dir.path().join("rep");
    fs::create_dir_all(&rep).unwrap();
    fs::copy(a.join("epochs.json"), rep.join("epochs.json")).unwrap();
    assert!(gtnp(&["report", "--out", s(&rep)]).status.success());
    let kl = fs::read_to_string(rep.join("kl_trace.csv")).unwrap();
    assert!(kl.starts_with("# config_hash="));
    assert_eq!(kl.lines().count(), 2 + 2);
    assert_eq!(fs::read_to_string(rep.join("global_trace.csv")).unwrap().lines().count(), 2 + 3);

    let unc = dir.path().join("unc");
    let o = gtnp(&[
        "uncertainty",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&a.join("checkpoint.bin")),
        "--dataset",
        s(&a.join("data/target")),
        "--out",
        s(&unc),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(unc.join("uncertainty.json")).unwrap(),
        fs::read(a.join("uncertainty.json")).unwrap()
    );
}

#[test]
fn eval_rejects_shape_mismatch_and_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 0, false);
    let run = dir.path().join("run");
    assert!(gtnp(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let ck = run.join("checkpoint.bin");

    let other = dir.path().join("other");
    let p = dir.path().join("c.json");
    fs::write(&p, json!({ "data": { "synth": { "shape": [12, 12], "samples_per_class": 2 } } }).to_string()).unwrap();
    assert!(gtnp(&["synth", "--config", s(&p), "--out", s(&other)]).status.success());
    let o = gtnp(&["eval", "--checkpoint", s(&ck), "--dataset", s(&other.join("target"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("shape mismatch"));

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    fs::write(empty.join("samples.bin"), b"").unwrap();
    fs::write(
        empty.join("meta.json"),
        json!({ "shape": [10, 10], "labels": [], "domain": "target", "class_count": 3 }).to_string(),
    )
    .unwrap();
    let o = gtnp(&["eval", "--checkpoint", s(&ck), "--dataset", s(&empty)]);
    assert!(!o.status.success());
}

#[test]
fn pretrain_gcn_writes_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 0, false);
    let out = dir.path().join("gcn");
    let o = gtnp(&["pretrain-gcn", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("gcn_source.bin").exists());
    assert!(out.join("gcn_target.bin").exists());
    let trace = read_json(&out.join("gcn_trace.json"));
    assert_eq!(trace["trace"]["node_loss"].as_array().unwrap().len(), 5);
}
