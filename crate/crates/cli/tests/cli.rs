use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sdtseg::network::init_network;
use sdtseg::raster::{
    encode_mask, read_field_stack, read_mask, write_field_stack, write_weights, FieldStack, LabelMask, VOID_BYTE,
};
use serde_json::{json, Value};

fn sdtseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdtseg")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn tiny_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "train": { "epochs": 2, "batch_size": 4, "crop": 16, "trunk_width": 4, "clip": 4.0, "seed": 3 },
        "synth": { "width": 32, "height": 32, "images": 10, "min_size": 4, "max_size": 12, "seed": 7 },
        "out_dir": dir.join("run"),
    });
    merge(&mut cfg, extra);
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(b), Value::Object(e)) => {
            for (k, v) in e {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, e) => *b = e,
    }
}

fn write_pgm(path: &Path, mask: &LabelMask) {
    fs::write(path, encode_mask(mask)).unwrap();
}

#[test]
fn sdt_writes_one_channel_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let mask = LabelMask::new(6, 4, 2, (0..24).map(|p| u8::from(p % 6 >= 3)).collect(), None).unwrap();
    let input = dir.path().join("m.pgm");
    write_pgm(&input, &mask);
    let out = dir.path().join("m.sdtf");
    let o = sdtseg(&["sdt", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stack: FieldStack<f32> = read_field_stack(&out).unwrap();
    assert_eq!((stack.channels(), stack.height(), stack.width()), (2, 4, 6));
    // column 2 is one pixel from the class-1 half: +1/32 for class 0
    assert_eq!(stack.get(0, 0, 2), 1.0 / 32.0);
    assert_eq!(stack.get(1, 0, 2), -1.0 / 32.0);

    let o = sdtseg(&["sdt", input.to_str().unwrap(), "--clip", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let stack: FieldStack<f32> = read_field_stack(&out).unwrap();
    for k in 0..2 {
        for p in 0..24 {
            let expected = if mask.data()[p] as usize == k { 1.0 } else { -1.0 };
            assert_eq!(stack.channel(k)[p], expected);
        }
    }
}

#[test]
fn sdt_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.sdtf");
    let o = sdtseg(&["sdt", dir.path().join("missing.pgm").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);

    let bad = dir.path().join("bad.pgm");
    fs::write(&bad, b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").unwrap();
    assert_eq!(code(&sdtseg(&["sdt", bad.to_str().unwrap(), "--out", out.to_str().unwrap()])), 2);

    let good = dir.path().join("good.pgm");
    write_pgm(&good, &LabelMask::filled(3, 3, 2, 0).unwrap());
    let o = sdtseg(&["sdt", good.to_str().unwrap(), "--clip", "0.5", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_is_reproducible_and_writes_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = tiny_config(d.path(), json!({}));
        let o = sdtseg(&["train", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ra, rb) = (a.path().join("run"), b.path().join("run"));
    for f in ["weights.sdtw", "log.jsonl", "metrics.json", "checkpoints/epoch_000.sdtw", "checkpoints/epoch_001.sdtw"] {
        assert_eq!(fs::read(ra.join(f)).unwrap(), fs::read(rb.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(ra.join("log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "step", "lr", "nll", "l1", "total", "val_oa"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    let resolved: Value = serde_json::from_str(&fs::read_to_string(ra.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["lr"], json!(0.01));
}

#[test]
fn zero_lambda_log_keeps_l1_out_of_total() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path(), json!({ "train": { "lambda": 0.0, "epochs": 1 } }));
    assert_eq!(code(&sdtseg(&["train", cfg.to_str().unwrap()])), 0);
    let log = fs::read_to_string(d.path().join("run/log.jsonl")).unwrap();
    let line: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(line["l1"].as_f64().unwrap() > 0.0);
    assert_eq!(line["total"], line["nll"]);
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let malformed = d.path().join("bad.json");
    fs::write(&malformed, "{ \"train\": ").unwrap();
    assert_eq!(code(&sdtseg(&["train", malformed.to_str().unwrap()])), 2);
    let unknown = tiny_config(d.path(), json!({ "trian": {} }));
    assert_eq!(code(&sdtseg(&["train", unknown.to_str().unwrap()])), 2);
    let nested = tiny_config(d.path(), json!({ "train": { "learning_rate": 0.1 } }));
    assert_eq!(code(&sdtseg(&["train", nested.to_str().unwrap()])), 2);
    let invalid = tiny_config(d.path(), json!({ "train": { "crop": 64 } }));
    assert_eq!(code(&sdtseg(&["train", invalid.to_str().unwrap()])), 2);
    assert_eq!(code(&sdtseg(&["train", d.path().join("nope.json").to_str().unwrap()])), 2);
}

#[test]
fn divergence_exits_3_with_last_good_weights() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path(), json!({ "train": { "lr": 1e30 } }));
    let o = sdtseg(&["train", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.path().join("run/last_good.sdtw").exists());
}

#[test]
fn eval_reports_metrics_and_checks_classes() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path(), json!({ "train": { "epochs": 4 } }));
    assert_eq!(code(&sdtseg(&["train", cfg.to_str().unwrap()])), 0);
    let weights = d.path().join("run/weights.sdtw");
    let o = sdtseg(&["eval", weights.to_str().unwrap(), cfg.to_str().unwrap(), "--split", "train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["oa"].as_f64().unwrap() > 1.0 / 5.0);
    assert_eq!(report["per_class_f1"].as_array().unwrap().len(), 5);

    let four = tiny_config(d.path(), json!({ "synth": { "classes": 4 } }));
    let o = sdtseg(&["eval", weights.to_str().unwrap(), four.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_of_a_constant_correct_network_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    // every weight zero and a fusion bias favouring class 0
    let mut net = init_network::<f32>(2, 4, 0).unwrap();
    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    for n in names {
        net.param_mut(&n).unwrap().data_mut().fill(0.0);
    }
    net.fusion_mut().bias.data_mut().copy_from_slice(&[1.0, -1.0]);
    let weights = d.path().join("oracle.sdtw");
    write_weights(&net.to_named_tensors(), &weights).unwrap();

    let mut images = vec![];
    let mut masks = vec![];
    for i in 0..3 {
        let img = d.path().join(format!("i{i}.sdtf"));
        let data = (0..3 * 16 * 16).map(|v| ((v * (i + 3)) % 7) as f32 / 7.0).collect();
        write_field_stack(&FieldStack::new(3, 16, 16, data).unwrap(), &img).unwrap();
        let mut labels = vec![0u8; 256];
        labels[17] = VOID_BYTE;
        let m = d.path().join(format!("m{i}.pgm"));
        write_pgm(&m, &LabelMask::new(16, 16, 2, labels, Some(VOID_BYTE)).unwrap());
        images.push(img);
        masks.push(m);
    }
    let files = json!({ "images": images, "masks": masks });
    let cfg = tiny_config(d.path(), json!({ "classes": 2, "train_files": files, "val_files": files }));
    let o = sdtseg(&["eval", weights.to_str().unwrap(), cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["oa"], json!(1.0));
    assert_eq!(report["pixels_evaluated"], json!(3 * 255));

    // infer on one of the images
    let out = d.path().join("pred.pgm");
    let probs = d.path().join("probs.sdtf");
    let o = sdtseg(&[
        "infer",
        weights.to_str().unwrap(),
        images[0].to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--probs",
        probs.to_str().unwrap(),
        "--window",
        "8",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pred = read_mask(&out, Some(2)).unwrap();
    assert!(pred.data().iter().all(|&c| c == 0));
    let p: FieldStack<f32> = read_field_stack(&probs).unwrap();
    assert_eq!(p.channels(), 2);
    assert!(p.channel(0).iter().all(|&v| v > 0.5));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let o = sdtseg(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("fusion.w") && text.contains("trunk.0.w") && text.contains("lambda 2"));
    assert_eq!(code(&sdtseg(&["gradcheck", "--corrupt-gradient"])), 4);
}

#[test]
fn bench_prints_one_row_per_size() {
    let o = sdtseg(&["bench", "--sizes", "32,64,128", "--repeats", "1"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(2).unwrap().starts_with("64\t"));
    let o = sdtseg(&["bench", "--sizes", "48", "--repeats", "1"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 2);
    assert_eq!(code(&sdtseg(&["bench", "--sizes", "64,32"])), 2);
}

#[test]
fn synth_export_trains_like_the_generator() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path(), json!({ "precision": "f32" }));
    assert_eq!(code(&sdtseg(&["synth", cfg.to_str().unwrap()])), 0);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("run/synth/files.json")).unwrap()).unwrap();
    assert_eq!(manifest["train_files"]["images"].as_array().unwrap().len(), 8);
    assert_eq!(manifest["val_files"]["masks"].as_array().unwrap().len(), 2);

    let e = tempfile::tempdir().unwrap();
    let from_files = tiny_config(
        e.path(),
        json!({ "classes": 5, "train_files": manifest["train_files"], "val_files": manifest["val_files"] }),
    );
    assert_eq!(code(&sdtseg(&["train", from_files.to_str().unwrap()])), 0);
    assert_eq!(code(&sdtseg(&["train", cfg.to_str().unwrap()])), 0);
    // SDTF stores f32, so the exported images are the generated ones exactly
    assert_eq!(
        fs::read(e.path().join("run/weights.sdtw")).unwrap(),
        fs::read(d.path().join("run/weights.sdtw")).unwrap()
    );
}

#[test]
fn thread_cap_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (d, threads) in [(&a, "1"), (&b, "3")] {
        let cfg = tiny_config(d.path(), json!({ "train": { "epochs": 1 } }));
        let o = Command::new(env!("CARGO_BIN_EXE_sdtseg"))
            .env("SDTSEG_THREADS", threads)
            .args(["train", cfg.to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
    }
    assert_eq!(fs::read(a.path().join("run/weights.sdtw")).unwrap(), fs::read(b.path().join("run/weights.sdtw")).unwrap());
    let o = Command::new(env!("CARGO_BIN_EXE_sdtseg")).env("SDTSEG_THREADS", "many").args(["bench"]).output().unwrap();
    assert_eq!(code(&o), 2);
}
