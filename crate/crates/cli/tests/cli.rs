use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use lesionforge::data::{resize, synth_samples, Image};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lesionforge"));
    c.env("LESIONFORGE_THREADS", "1").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn lesionforge")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn synth(dir: &Path, n: usize, size: usize, seed: u64) {
    let o = run(&[
        "synth",
        "--out",
        p(dir),
        "--n",
        &n.to_string(),
        "--size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    v.sort();
    v
}

/// Small fast training run on 16px images.
fn quick_train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        p(data),
        "--out",
        p(out),
        "--epochs",
        "1",
        "--image-size",
        "16",
        "--batch-size",
        "8",
        "--vflip",
        "false",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

struct Trained {
    _dir: TempDir,
    checkpoint: PathBuf,
    data: PathBuf,
}

/// The synthetic reference task trained through the CLI once.
fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        synth(&data, 250, 32, 7);
        let cfg = dir.path().join("synthetic.cfg");
        std::fs::write(&cfg, "# blob task\nimage_size=32\nepochs=20\nseed=7\nvflip=false\n").unwrap();
        let out = dir.path().join("run");
        let o = run(&["train", "--data", p(&data), "--out", p(&out), "--config", p(&cfg)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Trained {
            checkpoint: out.join("model.lsnf"),
            data,
            _dir: dir,
        }
    })
}

#[test]
fn synth_writes_class_directories() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 200, 32, 1);
    assert_eq!(pngs(&dir.path().join("benign")).len(), 200);
    assert_eq!(pngs(&dir.path().join("malignant")).len(), 200);
    let img = Image::open(&dir.path().join("benign/benign_00000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
}

#[test]
fn synth_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), 5, 24, 42);
    synth(b.path(), 5, 24, 42);
    for class in ["benign", "malignant"] {
        let fa = pngs(&a.path().join(class));
        let fb = pngs(&b.path().join(class));
        assert_eq!(fa.len(), 5);
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.file_name(), y.file_name());
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }
}

#[test]
fn synth_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["synth", "--out", p(dir.path()), "--n", "0"])), 2);
    let file = dir.path().join("plain");
    std::fs::write(&file, "x").unwrap();
    let o = run(&["synth", "--out", p(&file.join("sub")), "--n", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("cannot create"), "{}", stderr(&o));
}

#[test]
fn train_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--data", p(&dir.path().join("missing")), "--out", p(&dir.path().join("o"))]);
    let echo = stdout(&o);
    assert!(echo.lines().any(|l| l == "epochs=60"), "{echo}");
    assert!(echo.lines().any(|l| l == "lr=0.0001"), "{echo}");
    assert!(echo.lines().any(|l| l == "batch_size=32"), "{echo}");
    // Missing class directories are a layout error.
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("o").exists());
}

#[test]
fn train_one_epoch_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 10, 16, 2);
    let out = dir.path().join("run");
    let o = quick_train(&data, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = std::fs::read_to_string(out.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);
    let rec: Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert_eq!(rec["epoch"], 1);
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["epochs_run"], 1);
    assert_eq!(summary["config"]["augment"]["vflip"], false);
    for k in ["accuracy", "precision", "recall", "f1"] {
        assert!(summary["val"][k].is_number(), "{k}");
    }
    assert!(stdout(&o).contains("val accuracy="));
    assert!(out.join("model.lsnf").is_file());
}

#[test]
fn train_is_reproducible_with_one_thread() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 10, 16, 3);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&quick_train(&data, &a, &["--seed", "5", "--plateau-patience", "0"])), 0);
    assert_eq!(code(&quick_train(&data, &b, &["--seed", "5", "--plateau-patience", "0"])), 0);
    for f in ["model.lsnf", "history.jsonl", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["train", "--out", p(dir.path())])), 2);

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs=1\nmomentum=0.5\n").unwrap();
    let o = run(&["train", "--data", p(dir.path()), "--out", p(dir.path()), "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("momentum"), "{}", stderr(&o));

    let o = run(&["train", "--data", p(dir.path()), "--out", p(dir.path()), "--epochs", "lots"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epochs"), "{}", stderr(&o));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "epochs=7\nbatch-size=4\n").unwrap();
    let o = run(&[
        "train",
        "--data",
        p(&dir.path().join("missing")),
        "--out",
        p(dir.path()),
        "--config",
        p(&cfg),
        "--epochs",
        "3",
    ]);
    let echo = stdout(&o);
    assert!(echo.lines().any(|l| l == "epochs=3"), "{echo}");
    assert!(echo.lines().any(|l| l == "batch_size=4"), "{echo}");
    assert!(echo.lines().any(|l| l == "lr=0.0001"), "{echo}");
}

#[test]
fn divergence_exits_3_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 6, 16, 4);
    let out = dir.path().join("run");
    let o = quick_train(&data, &out, &["--lr", "1e38"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    assert!(!out.join("model.lsnf").exists());
}

#[test]
fn eval_metrics_match_embedded_counts() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval.json");
    let o = run(&["eval", "--data", p(&t.data), "--checkpoint", p(&t.checkpoint), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&out);
    let c = &v["confusion"];
    let [tp, tn, fp, fn_] = ["tp", "tn", "fp", "fn"].map(|k| c[k].as_f64().unwrap());
    assert_eq!(tp + tn + fp + fn_, 500.0);
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    let expected = [
        ("accuracy", (tp + tn) / (tp + tn + fp + fn_)),
        ("precision", precision),
        ("recall", recall),
        ("f1", 2.0 * precision * recall / (precision + recall)),
    ];
    for (k, want) in expected {
        assert!((v[k].as_f64().unwrap() - want).abs() < 1e-12, "{k}");
    }
    assert_eq!(v["model"], "model");
    assert!(v["accuracy"].as_f64().unwrap() >= 0.95);
    assert!(stdout(&o).contains("f1="));
}

#[test]
fn corrupt_checkpoints_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 4, 16, 1);
    let run_dir = dir.path().join("run");
    assert_eq!(code(&quick_train(&data, &run_dir, &[])), 0);
    let good = std::fs::read(run_dir.join("model.lsnf")).unwrap();

    let corrupt: [(&str, Vec<u8>); 3] = [
        ("junk.lsnf", b"definitely not a checkpoint".to_vec()),
        ("short.lsnf", good[..good.len() - 9].to_vec()),
        ("version.lsnf", {
            let mut b = good.clone();
            b[4] = 99;
            b
        }),
    ];
    for (name, bytes) in corrupt {
        let ck = dir.path().join(name);
        std::fs::write(&ck, bytes).unwrap();
        let out = dir.path().join(format!("{name}.json"));
        let o = run(&["eval", "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&out)]);
        assert_eq!(code(&o), 4, "{name}: {}", stderr(&o));
        assert!(!out.exists(), "{name} left an output file");
    }
    let o = run(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&dir.path().join("absent.lsnf")),
        "--out",
        p(&dir.path().join("x.json")),
    ]);
    assert_eq!(code(&o), 4);
}

fn gradcam(ck: &Path, image: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gradcam", "--checkpoint", p(ck), "--image", p(image), "--out", p(out)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn gradcam_alpha_zero_reproduces_resized_input() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    // A 40px input exercises the resize path.
    let big = synth_samples(1, 40, 77).unwrap().remove(0).image;
    let src = dir.path().join("big.png");
    std::fs::write(&src, big.png_bytes().unwrap()).unwrap();
    let out = dir.path().join("cam.png");
    let o = gradcam(&t.checkpoint, &src, &out, &["--alpha", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let expected = resize(&Image::open(&src).unwrap(), 32).unwrap().to_rgb8();
    assert_eq!(Image::open(&out).unwrap().to_rgb8(), expected);
    assert!(stdout(&o).contains("benign=") && stdout(&o).contains("malignant="));
}

#[test]
fn gradcam_auto_matches_predicted_class() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let img = t.data.join("malignant/malignant_00003.png");
    let auto = dir.path().join("auto.png");
    let named = dir.path().join("named.png");
    let o = gradcam(&t.checkpoint, &img, &auto, &["--class", "auto"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("target=malignant"), "{}", stdout(&o));
    assert_eq!(code(&gradcam(&t.checkpoint, &img, &named, &["--class", "malignant"])), 0);
    assert_eq!(std::fs::read(&auto).unwrap(), std::fs::read(&named).unwrap());
}

#[test]
fn gradcam_unknown_layer_lists_targets() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cam.png");
    let img = t.data.join("benign/benign_00000.png");
    let o = gradcam(&t.checkpoint, &img, &out, &["--layer", "fc1"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for name in ["stem", "res1", "dense1", "sep1"] {
        assert!(err.contains(name), "{err}");
    }
    assert!(!out.exists());
    let o = gradcam(&t.checkpoint, &img, &out, &["--layer", "dense1", "--alpha", "0.7"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("layer=dense1"));
}

/// Pixels of the hottest ramp colour, recovered from a full-opacity overlay.
fn hotspot(overlay: &Image) -> Vec<(usize, usize)> {
    let mut best = f32::MAX;
    let mut at = Vec::new();
    for y in 0..overlay.height() {
        for x in 0..overlay.width() {
            let (r, g, b) = (overlay.get(x, y, 0), overlay.get(x, y, 1), overlay.get(x, y, 2));
            // The top ramp segment runs from (255, 230, 0) down to (255, 120, 0).
            if r == 255.0 && b == 0.0 && g <= 230.0 {
                if g < best {
                    best = g;
                    at.clear();
                }
                if g == best {
                    at.push((x, y));
                }
            }
        }
    }
    at
}

#[test]
fn gradcam_hotspot_overlaps_blob() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let held = synth_samples(10, 32, 1007).unwrap();
    let mut hits = 0;
    for (i, s) in held.iter().enumerate() {
        let src = dir.path().join(format!("h{i}.png"));
        std::fs::write(&src, s.image.png_bytes().unwrap()).unwrap();
        let out = dir.path().join(format!("h{i}_cam.png"));
        let class = ["benign", "malignant"][s.label];
        let o = gradcam(&t.checkpoint, &src, &out, &["--alpha", "1", "--class", class]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let spot = hotspot(&Image::open(&out).unwrap());
        if !spot.is_empty() && spot.iter().any(|&(x, y)| s.blob.contains(x, y)) {
            hits += 1;
        }
    }
    assert!(hits * 10 >= held.len() * 8, "hotspot on the blob for {hits}/{} images", held.len());
}

fn eval_file(dir: &Path, name: &str, model: &str, tp: u64, tn: u64, fp: u64, fn_: u64) -> PathBuf {
    let acc = (tp + tn) as f64 / (tp + tn + fp + fn_) as f64;
    let prec = tp as f64 / (tp + fp) as f64;
    let rec = tp as f64 / (tp + fn_) as f64;
    let v = serde_json::json!({
        "model": model,
        "accuracy": acc,
        "precision": prec,
        "recall": rec,
        "f1": 2.0 * prec * rec / (prec + rec),
        "confusion": {"tp": tp, "tn": tn, "fp": fp, "fn": fn_},
    });
    let path = dir.join(name);
    std::fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn report_merges_four_models() {
    let dir = tempfile::tempdir().unwrap();
    let files = [
        eval_file(dir.path(), "a.json", "densenet", 129, 172, 28, 21),
        eval_file(dir.path(), "b.json", "resnet", 120, 180, 20, 30),
        eval_file(dir.path(), "c.json", "xception", 110, 175, 25, 40),
        eval_file(dir.path(), "d.json", "mobilenet", 118, 170, 30, 32),
    ];
    let out = dir.path().join("table");
    let mut args = vec!["report", "--out", p(&out), "--in"];
    args.extend(files.iter().map(|f| p(f)));
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "metric,densenet,resnet,xception,mobilenet");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("accuracy,0.86000,"), "{}", lines[1]);
    let js = read_json(&out.with_extension("json"));
    assert_eq!(js["models"].as_array().unwrap().len(), 4);
    assert_eq!(js["values"][0][0], 0.86);
}

#[test]
fn report_single_and_duplicate_models() {
    let dir = tempfile::tempdir().unwrap();
    let a = eval_file(dir.path(), "a.json", "net", 5, 5, 1, 1);
    let out = dir.path().join("one");
    assert_eq!(code(&run(&["report", "--in", p(&a), "--out", p(&out)])), 0);
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "metric,net");

    let b = eval_file(dir.path(), "b.json", "net", 4, 6, 0, 2);
    let out = dir.path().join("dup");
    let o = bin()
        .env("RUST_LOG", "warn")
        .args(["report", "--in", p(&a), p(&b), "--out", p(&out)])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("duplicate model name"), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "metric,net,net-2");
}

#[test]
fn report_names_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let good = eval_file(dir.path(), "good.json", "ok", 5, 5, 1, 1);
    let bad = dir.path().join("broken.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = dir.path().join("t");
    let o = run(&["report", "--in", p(&good), p(&bad), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("broken.json"), "{}", stderr(&o));
    assert!(!out.with_extension("csv").exists());
}
