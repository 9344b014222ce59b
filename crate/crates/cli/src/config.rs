//! Key-value run configuration.
//!
//! Every subcommand accepts a fixed set of dotted keys. Values are resolved
//! from the built-in defaults, then an optional `--config` file, then flags.
//! The resolved set is written back as a snapshot that can be replayed with
//! `--config`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, Copy)]
pub struct KeyDef {
    pub key: &'static str,
    pub flag: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn k(
    key: &'static str,
    flag: &'static str,
    default: &'static str,
    help: &'static str,
) -> KeyDef {
    KeyDef {
        key,
        flag,
        default,
        help,
    }
}

pub const SEED: KeyDef = k("seed", "seed", "7", "global seed for every random stream");

pub const DATA: &[KeyDef] = &[
    k(
        "data.dir",
        "data",
        "",
        "image-folder dataset; empty uses the synthetic corpus",
    ),
    k(
        "data.classes",
        "classes",
        "5",
        "synthetic corpus: number of classes",
    ),
    k(
        "data.per_class",
        "per-class",
        "40",
        "synthetic corpus: images per class",
    ),
    k(
        "data.size",
        "size",
        "32",
        "synthetic corpus: image side in pixels",
    ),
];

pub const MAP_PARAMS: &[KeyDef] = &[
    k(
        "map.logistic.r",
        "logistic-r",
        "3.99",
        "Logistic map control parameter (0, 4]",
    ),
    k(
        "map.tent.mu",
        "tent-mu",
        "2",
        "Tent map control parameter (0, 2]",
    ),
    k(
        "map.sine.r",
        "sine-r",
        "1",
        "Sine map control parameter (0, 1]",
    ),
];

pub const MAP: KeyDef = k("map", "map", "sine", "chaotic map: logistic | tent | sine");

pub const AUGMENT: &[KeyDef] = &[
    k("augment.k_min", "k-min", "1", "smallest iteration count"),
    k("augment.k_max", "k-max", "5", "largest iteration count"),
    k(
        "augment.crop_size",
        "crop-size",
        "28",
        "square crop side of both views",
    ),
    k(
        "augment.flip_prob",
        "flip-prob",
        "0.5",
        "horizontal flip probability",
    ),
];

pub const ENCODER: &[KeyDef] = &[
    k(
        "encoder.widths",
        "encoder-widths",
        "8,16",
        "chaos encoder stage widths",
    ),
    k(
        "encoder.strides",
        "encoder-strides",
        "1,2",
        "chaos encoder stage strides",
    ),
    k(
        "encoder.kernel",
        "encoder-kernel",
        "3",
        "chaos encoder kernel size",
    ),
];

pub const OPTIM: &[KeyDef] = &[
    k("optim.beta1", "beta1", "0.9", "AdamW first-moment decay"),
    k("optim.beta2", "beta2", "0.999", "AdamW second-moment decay"),
    k("optim.eps", "adam-eps", "1e-8", "AdamW denominator epsilon"),
    k(
        "optim.weight_decay",
        "weight-decay",
        "0.01",
        "AdamW decoupled weight decay",
    ),
];

pub const PRETRAIN: &[KeyDef] = &[
    k("pretrain.tau", "tau", "0.5", "NT-Xent temperature"),
    k(
        "pretrain.batch_size",
        "batch-size",
        "32",
        "source images per batch",
    ),
    k("pretrain.epochs", "epochs", "15", "pretraining epochs"),
    k(
        "pretrain.lr_encoder",
        "lr-encoder",
        "0.003",
        "encoder learning rate",
    ),
    k(
        "pretrain.lr_projector",
        "lr-projector",
        "0.003",
        "projector learning rate",
    ),
    k(
        "pretrain.proj_hidden",
        "proj-hidden",
        "0",
        "projector hidden width; 0 uses the feature width",
    ),
    k(
        "pretrain.proj_dim",
        "proj-dim",
        "32",
        "projector output width",
    ),
];

pub const FINETUNE: &[KeyDef] = &[
    k(
        "finetune.chaos_checkpoint",
        "chaos-checkpoint",
        "",
        "pretrained chaos encoder (required)",
    ),
    k(
        "finetune.sup_checkpoint",
        "sup-checkpoint",
        "",
        "supervised backbone; empty trains one per fold",
    ),
    k(
        "finetune.head",
        "head",
        "ensemble",
        "ensemble | sup_only | chaos_only",
    ),
    k(
        "finetune.lr_head",
        "lr-head",
        "0.03",
        "SE gate and classifier learning rate",
    ),
    k(
        "finetune.lr_backbone",
        "lr-backbone",
        "0.0001",
        "backbone learning rate",
    ),
    k(
        "finetune.epochs",
        "epochs",
        "10",
        "fine-tuning epochs per fold",
    ),
    k("finetune.folds", "folds", "4", "cross-validation folds"),
    k(
        "finetune.batch_size",
        "batch-size",
        "16",
        "images per batch",
    ),
    k("finetune.se_ratio", "se-ratio", "4", "SE reduction ratio"),
    k(
        "finetune.flip_prob",
        "flip-prob",
        "0.5",
        "horizontal flip probability",
    ),
    k(
        "sup.epochs",
        "sup-epochs",
        "10",
        "supervised backbone epochs",
    ),
    k(
        "sup.lr",
        "sup-lr",
        "0.01",
        "supervised backbone learning rate",
    ),
    k(
        "sup.batch_size",
        "sup-batch-size",
        "16",
        "supervised backbone batch size",
    ),
    k(
        "sup.widths",
        "sup-widths",
        "16,32,64",
        "supervised backbone stage widths",
    ),
    k(
        "sup.strides",
        "sup-strides",
        "2,2,2",
        "supervised backbone stage strides",
    ),
    k(
        "sup.kernel",
        "sup-kernel",
        "3",
        "supervised backbone kernel size",
    ),
];

pub const PROBE: &[KeyDef] = &[
    k("probe.folds", "folds", "4", "cross-validation folds"),
    k(
        "probe.steps",
        "probe-steps",
        "300",
        "full-batch optimiser steps per fold",
    ),
    k("probe.lr", "probe-lr", "0.05", "probe learning rate"),
    k(
        "probe.weight_decay",
        "probe-weight-decay",
        "0.01",
        "probe weight decay",
    ),
    k(
        "probe.batch",
        "probe-batch",
        "64",
        "images per feature-extraction pass",
    ),
];

/// Resolved key-value pairs in registry order.
#[derive(Debug, Clone)]
pub struct Config {
    command: &'static str,
    entries: Vec<(KeyDef, String)>,
}

fn parse_file(text: &str, path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!(
                "{}:{}: expected 'key = value', got '{}'",
                path.display(),
                n + 1,
                raw.trim()
            ))
        })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

impl Config {
    /// Defaults, overridden by `file` entries, overridden by `flags`.
    pub fn resolve(
        command: &'static str,
        keys: &[KeyDef],
        file: Option<&Path>,
        flags: &[(&'static str, String)],
    ) -> Result<Self, CliError> {
        let mut entries: Vec<(KeyDef, String)> =
            keys.iter().map(|d| (*d, d.default.to_string())).collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Runtime(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (key, value) in parse_file(&text, path)? {
                let slot = entries
                    .iter_mut()
                    .find(|(d, _)| d.key == key)
                    .ok_or_else(|| {
                        CliError::Usage(format!(
                            "unknown config key '{key}' for '{command}' in {}",
                            path.display()
                        ))
                    })?;
                slot.1 = value;
            }
        }
        for (key, value) in flags {
            if let Some(slot) = entries.iter_mut().find(|(d, _)| d.key == *key) {
                slot.1 = value.clone();
            }
        }
        Ok(Self { command, entries })
    }

    pub fn str(&self, key: &str) -> &str {
        self.entries
            .iter()
            .find(|(d, _)| d.key == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("key '{key}' not registered for '{}'", self.command))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.str(key);
        raw.parse()
            .map_err(|_| CliError::Usage(format!("invalid value '{raw}' for '{key}'")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.str(key);
        raw.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Usage(format!("invalid list entry '{s}' for '{key}'")))
            })
            .collect()
    }

    pub fn snapshot(&self) -> String {
        let mut out = format!("# ctex {} resolved configuration\n", self.command);
        for (d, v) in &self.entries {
            let _ = writeln!(out, "{} = {v}", d.key);
        }
        out
    }
}

/// `--help` footer listing every key with its default.
pub fn keys_help(keys: &[KeyDef]) -> String {
    let width = keys.iter().map(|d| d.key.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (flag --<name>; default in brackets):\n");
    for d in keys {
        let _ = writeln!(
            out,
            "  {:width$}  --{:18} [{}] {}",
            d.key,
            d.flag,
            d.default,
            d.help,
            width = width
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[KeyDef] = &[k("a.x", "x", "1", ""), k("a.y", "y", "two", "")];

    #[test]
    fn precedence_and_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "# comment\na.x = 5 # trailing\n\na.y=three\n").unwrap();
        let cfg = Config::resolve("t", KEYS, Some(&path), &[("a.y", "four".into())]).unwrap();
        assert_eq!(cfg.get::<u32>("a.x").unwrap(), 5);
        assert_eq!(cfg.str("a.y"), "four");
        assert_eq!(
            cfg.snapshot(),
            "# ctex t resolved configuration\na.x = 5\na.y = four\n"
        );
    }

    #[test]
    fn unknown_key_and_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "a.z = 1\n").unwrap();
        match Config::resolve("t", KEYS, Some(&path), &[]) {
            Err(CliError::Usage(m)) => assert!(m.contains("a.z"), "{m}"),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "just words\n").unwrap();
        assert!(matches!(
            Config::resolve("t", KEYS, Some(&path), &[]),
            Err(CliError::Usage(_))
        ));
        let missing = dir.path().join("nope.txt");
        match Config::resolve("t", KEYS, Some(&missing), &[]) {
            Err(CliError::Runtime(m)) => assert!(m.contains("nope.txt")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn typed_values() {
        let cfg = Config::resolve("t", KEYS, None, &[("a.x", "3,4, 5".into())]).unwrap();
        assert_eq!(cfg.list::<usize>("a.x").unwrap(), vec![3, 4, 5]);
        assert!(cfg.get::<u32>("a.y").is_err());
    }
}
