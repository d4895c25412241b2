//! Flat `key=value` training config files and their merge with command-line flags.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the long flag
//! names of `train` with dashes or underscores, e.g. `batch_size=16`.

use std::path::Path;
use std::str::FromStr;

use lesionforge::trainer::TrainConfig;

pub const KEYS: [&str; 16] = [
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "image_size",
    "val_fraction",
    "early_stop_patience",
    "plateau_patience",
    "plateau_factor",
    "plateau_min_delta",
    "min_lr",
    "rescale",
    "shear",
    "zoom",
    "hflip",
    "vflip",
];

fn canonical(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses config text into `(key, value)` pairs, rejecting unknown or repeated keys.
pub fn parse(text: &str, origin: &str) -> Result<Vec<(String, String)>, String> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{origin}:{}: expected key=value, got {line:?}", n + 1))?;
        let key = canonical(k);
        if !KEYS.contains(&key.as_str()) {
            return Err(format!("{origin}:{}: unknown config key {:?}", n + 1, k.trim()));
        }
        if pairs.iter().any(|(seen, _)| *seen == key) {
            return Err(format!("{origin}:{}: key {key:?} given twice", n + 1));
        }
        pairs.push((key, v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read(path: &Path) -> Result<Vec<(String, String)>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse(&text, &path.display().to_string())
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| format!("invalid value {raw:?} for {key}: {e}"))
}

/// Applies one `key=value` setting to `cfg`.
pub fn apply(cfg: &mut TrainConfig, key: &str, raw: &str) -> Result<(), String> {
    match canonical(key).as_str() {
        "epochs" => cfg.epochs = value(key, raw)?,
        "batch_size" => cfg.batch_size = value(key, raw)?,
        "lr" => cfg.lr0 = value(key, raw)?,
        "seed" => cfg.seed = value(key, raw)?,
        "image_size" => cfg.image_size = value(key, raw)?,
        "val_fraction" => cfg.val_fraction = value(key, raw)?,
        "early_stop_patience" => cfg.early_stop.patience = value(key, raw)?,
        "plateau_patience" => cfg.plateau.patience = value(key, raw)?,
        "plateau_factor" => cfg.plateau.factor = value(key, raw)?,
        "plateau_min_delta" => cfg.plateau.min_delta = value(key, raw)?,
        "min_lr" => cfg.plateau.min_lr = value(key, raw)?,
        "rescale" => cfg.augment.rescale = value(key, raw)?,
        "shear" => cfg.augment.shear_deg = value(key, raw)?,
        "zoom" => cfg.augment.zoom = value(key, raw)?,
        "hflip" => cfg.augment.hflip = value(key, raw)?,
        "vflip" => cfg.augment.vflip = value(key, raw)?,
        other => return Err(format!("unknown config key {other:?}")),
    }
    Ok(())
}

/// Defaults, then the file, then flags.
pub fn resolve(file: &[(String, String)], flags: &[(String, String)]) -> Result<TrainConfig, String> {
    let mut cfg = TrainConfig::default();
    for (k, v) in file.iter().chain(flags) {
        apply(&mut cfg, k, v)?;
    }
    Ok(cfg)
}

/// The effective config as `key=value` lines, in [`KEYS`] order.
pub fn echo(cfg: &TrainConfig) -> String {
    let a = &cfg.augment;
    let vals: [String; 16] = [
        cfg.epochs.to_string(),
        cfg.batch_size.to_string(),
        cfg.lr0.to_string(),
        cfg.seed.to_string(),
        cfg.image_size.to_string(),
        cfg.val_fraction.to_string(),
        cfg.early_stop.patience.to_string(),
        cfg.plateau.patience.to_string(),
        cfg.plateau.factor.to_string(),
        cfg.plateau.min_delta.to_string(),
        cfg.plateau.min_lr.to_string(),
        a.rescale.to_string(),
        a.shear_deg.to_string(),
        a.zoom.to_string(),
        a.hflip.to_string(),
        a.vflip.to_string(),
    ];
    KEYS.iter()
        .zip(vals)
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}
