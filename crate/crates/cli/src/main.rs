mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use lesionforge::data::{
    input_tensor, load_dataset, resize, resolve_split_dir, synth_samples, train_val_split, worker_count, Image,
    CLASS_NAMES,
};
use lesionforge::gradcam::{grad_cam, overlay};
use lesionforge::layers::Mode;
use lesionforge::metrics::{self, comparison_table, MetricsReport};
use lesionforge::trainer::{build_papernet, evaluate, load_checkpoint, save_checkpoint, train, write_atomic};
use lesionforge::Error;

const USAGE: u8 = 2;
const NUMERIC: u8 = 3;
const CHECKPOINT: u8 = 4;

/// A failed command: exit code plus message.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    fn checkpoint(path: &Path, e: Error) -> Self {
        Self {
            code: CHECKPOINT,
            message: format!("cannot load checkpoint {}: {e}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => NUMERIC,
            Error::Checkpoint(_) => CHECKPOINT,
            _ => USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "lesionforge", version, about = "Train, evaluate and explain binary lesion image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Benign,
    Malignant,
    Auto,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Write a synthetic blob dataset in benign/ and malignant/ directories.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Images per class.
        #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(8..))]
        size: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the reference network on DIR/train (or DIR) with a stratified validation split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Flat key=value file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<String>,
        #[arg(long)]
        batch_size: Option<String>,
        #[arg(long)]
        lr: Option<String>,
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        image_size: Option<String>,
        #[arg(long)]
        val_fraction: Option<String>,
        #[arg(long)]
        early_stop_patience: Option<String>,
        #[arg(long)]
        plateau_patience: Option<String>,
        #[arg(long)]
        plateau_factor: Option<String>,
        #[arg(long)]
        plateau_min_delta: Option<String>,
        #[arg(long)]
        min_lr: Option<String>,
        #[arg(long)]
        rescale: Option<String>,
        #[arg(long)]
        shear: Option<String>,
        #[arg(long)]
        zoom: Option<String>,
        #[arg(long)]
        hflip: Option<String>,
        #[arg(long)]
        vflip: Option<String>,
    },
    /// Evaluate a checkpoint on DIR/test (or DIR).
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model name recorded in the output; defaults to the checkpoint file stem.
        #[arg(long)]
        name: Option<String>,
    },
    /// Render a Grad-CAM overlay for one image.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = ClassArg::Auto)]
        class: ClassArg,
        #[arg(long)]
        out: PathBuf,
        /// Target layer; defaults to the last convolutional layer.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, default_value_t = 0.4)]
        alpha: f32,
    },
    /// Merge eval summaries into a comparison table (OUT.csv and OUT.json).
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json(path: &Path, v: &Value) -> CmdResult {
    let mut text = serde_json::to_string_pretty(v).map_err(Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn cmd_synth(out: &Path, n: usize, size: usize, seed: u64) -> CmdResult {
    let samples = synth_samples(n, size, seed)?;
    for class in CLASS_NAMES {
        let dir = out.join(class);
        std::fs::create_dir_all(&dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let class = CLASS_NAMES[s.label];
        let path = out.join(class).join(format!("{class}_{:05}.png", i % n));
        write_atomic(&path, &s.image.png_bytes()?)
            .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
    }
    println!("wrote {} images of {size}x{size} to {}", samples.len(), out.display());
    Ok(())
}

fn cmd_train(data: &Path, out: &Path, config_file: Option<&Path>, flags: Vec<(String, String)>) -> CmdResult {
    let file = match config_file {
        Some(p) => config::read(p).map_err(Failure::usage)?,
        None => Vec::new(),
    };
    let mut cfg = config::resolve(&file, &flags).map_err(Failure::usage)?;
    cfg.workers = worker_count();
    cfg.validate()?;
    print!("{}", config::echo(&cfg));

    let root = resolve_split_dir(data, "train");
    let ds = load_dataset(&root)?;
    let (train_ds, val_ds) = train_val_split(&ds, cfg.val_fraction, cfg.seed)?;
    log::info!("training on {} images, validating on {}", train_ds.len(), val_ds.len());
    let mut model = build_papernet::<f32>(cfg.image_size, cfg.seed)?;
    let history = train(&mut model, &train_ds, &val_ds, &cfg, |_| {})?;
    let val = evaluate(&mut model, &val_ds, cfg.batch_size, cfg.workers)?;

    std::fs::create_dir_all(out).map_err(|e| Failure::usage(format!("cannot create {}: {e}", out.display())))?;
    let summary = json!({
        "config": cfg,
        "train_size": train_ds.len(),
        "val_size": val_ds.len(),
        "epochs_run": history.records.len(),
        "best_epoch": history.best_epoch,
        "stopped_epoch": history.stopped_epoch,
        "val": metrics::report_json(&val.report, &val.confusion),
        "val_loss": val.loss,
    });
    save_checkpoint(&model, cfg.seed, Some(&cfg), &out.join("model.lsnf"))?;
    write_atomic(&out.join("history.jsonl"), history.to_jsonl()?.as_bytes())?;
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", metric_line("val", &val.report));
    Ok(())
}

fn metric_line(label: &str, r: &MetricsReport) -> String {
    format!(
        "{label} accuracy={:.5} precision={:.5} recall={:.5} f1={:.5}",
        r.accuracy, r.precision, r.recall, r.f1
    )
}

fn cmd_eval(data: &Path, checkpoint: &Path, out: &Path, name: Option<String>) -> CmdResult {
    let mut model = load_checkpoint(checkpoint).map_err(|e| Failure::checkpoint(checkpoint, e))?.model;
    let ds = load_dataset(&resolve_split_dir(data, "test"))?;
    let eval = evaluate(&mut model, &ds, 32, worker_count())?;
    let name = name.unwrap_or_else(|| {
        checkpoint
            .file_stem()
            .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
    });
    let mut v = metrics::report_json(&eval.report, &eval.confusion);
    v["model"] = json!(name);
    v["loss"] = json!(eval.loss);
    v["images"] = json!(ds.len());
    write_json(out, &v)?;
    println!("{}", metric_line(&name, &eval.report));
    Ok(())
}

fn cmd_gradcam(
    checkpoint: &Path,
    image: &Path,
    class: ClassArg,
    out: &Path,
    layer: Option<&str>,
    alpha: f32,
) -> CmdResult {
    let mut model = load_checkpoint(checkpoint).map_err(|e| Failure::checkpoint(checkpoint, e))?.model;
    let size = model.spec().image_size;
    let img = Image::open(image)?;
    let x = input_tensor(&img, size)?;
    model.set_mode(Mode::Evaluation);
    let probs = model.forward(&x)?;
    let target = match class {
        ClassArg::Benign => 0,
        ClassArg::Malignant => 1,
        ClassArg::Auto => usize::from(probs.data()[1] > probs.data()[0]),
    };
    let cam = grad_cam(&mut model, &x, target, layer)?;
    let shown = overlay(&cam.heatmap, &resize(&img, size)?, alpha)?;
    write_atomic(out, &shown.png_bytes()?)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", out.display())))?;
    println!(
        "benign={:.5} malignant={:.5} target={} layer={}",
        cam.probabilities[0], cam.probabilities[1], CLASS_NAMES[target], cam.heatmap.source_layer
    );
    Ok(())
}

fn read_summary(path: &Path) -> Result<(String, MetricsReport), Failure> {
    let bad = |why: String| Failure::usage(format!("malformed eval summary {}: {why}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let metric = |k: &str| v.get(k).and_then(Value::as_f64).ok_or_else(|| bad(format!("missing number {k:?}")));
    let report = MetricsReport {
        accuracy: metric("accuracy")?,
        precision: metric("precision")?,
        recall: metric("recall")?,
        f1: metric("f1")?,
    };
    let name = v.get("model").and_then(Value::as_str).unwrap_or_default().to_string();
    Ok((name, report))
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> CmdResult {
    let rows = inputs.iter().map(|p| read_summary(p)).collect::<Result<Vec<_>, _>>()?;
    let table = comparison_table(&rows)?;
    let csv = out.with_extension("csv");
    let js = out.with_extension("json");
    write_atomic(&csv, table.to_csv().as_bytes())
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", csv.display())))?;
    write_json(&js, &table.to_json())?;
    print!("{}", table.to_csv());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth { out, n, size, seed } => cmd_synth(&out, n as usize, size as usize, seed),
        Command::Train {
            data,
            out,
            config,
            epochs,
            batch_size,
            lr,
            seed,
            image_size,
            val_fraction,
            early_stop_patience,
            plateau_patience,
            plateau_factor,
            plateau_min_delta,
            min_lr,
            rescale,
            shear,
            zoom,
            hflip,
            vflip,
        } => {
            let given = [
                epochs,
                batch_size,
                lr,
                seed,
                image_size,
                val_fraction,
                early_stop_patience,
                plateau_patience,
                plateau_factor,
                plateau_min_delta,
                min_lr,
                rescale,
                shear,
                zoom,
                hflip,
                vflip,
            ];
            let flags = config::KEYS
                .iter()
                .zip(given)
                .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
                .collect();
            cmd_train(&data, &out, config.as_deref(), flags)
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            name,
        } => cmd_eval(&data, &checkpoint, &out, name),
        Command::Gradcam {
            checkpoint,
            image,
            class,
            out,
            layer,
            alpha,
        } => cmd_gradcam(&checkpoint, &image, class, &out, layer.as_deref(), alpha),
        Command::Report { inputs, out } => cmd_report(&inputs, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
