use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ctex::autograd::{primitive_suite, Checkpoint};
use ctex::data::{gen_synthetic_textures, load_image_folder, LabeledDataset, SynthSpec};
use ctex::dynamics::{orbit_stats, ChaoticMapSpec, MapKind};
use ctex::evaluation::{ablate_maps, linear_probe, AblationConfig, ProbeConfig};
use ctex::imaging::{chaotic_augment, read_image, sample_k, write_image, AugmentConfig};
use ctex::network::{Encoder, EncoderConfig};
use ctex::rng;
use ctex::training::{
    composite_suite, finetune, pretrain, pretrain_init_encoder, trace_csv, AdamWConfig,
    FinetuneConfig, HeadKind, PretrainConfig, SupervisedConfig, CHAOS_PREFIX, SUP_PREFIX,
};
use serde_json::json;

use crate::config::{self, Config, KeyDef};
use crate::CliError;

pub struct Command {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: Vec<KeyDef>,
    pub run: fn(&Config, &mut Output) -> Result<(), CliError>,
}

fn key(k: &'static str, flag: &'static str, default: &'static str, help: &'static str) -> KeyDef {
    KeyDef {
        key: k,
        flag,
        default,
        help,
    }
}

fn out_key(command: &'static str) -> KeyDef {
    let default: &'static str = match command {
        "analyze-maps" => "ctex-out/analyze-maps",
        "augment" => "ctex-out/augment",
        "gen-data" => "ctex-out/data",
        "pretrain" => "ctex-out/pretrain",
        "finetune" => "ctex-out/finetune",
        "probe" => "ctex-out/probe",
        "ablate" => "ctex-out/ablate",
        _ => "ctex-out/gradcheck",
    };
    key("out", "out", default, "output directory")
}

fn keys(command: &'static str, groups: &[&[KeyDef]]) -> Vec<KeyDef> {
    let mut v: Vec<KeyDef> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    v.push(config::SEED);
    v.push(out_key(command));
    v
}

pub fn all() -> Vec<Command> {
    use config::{AUGMENT, DATA, ENCODER, FINETUNE, MAP, MAP_PARAMS, OPTIM, PRETRAIN, PROBE};
    vec![
        Command {
            name: "analyze-maps",
            about: "Lyapunov exponent and invariant density of each chaotic map",
            keys: keys(
                "analyze-maps",
                &[
                    &[
                        key(
                            "analyze.maps",
                            "maps",
                            "logistic,tent,sine",
                            "maps to analyse",
                        ),
                        key("analyze.x0", "x0", "0.123", "orbit start in (0, 1)"),
                        key(
                            "analyze.n_iter",
                            "n-iter",
                            "100000",
                            "samples after burn-in",
                        ),
                        key("analyze.burn_in", "burn-in", "1000", "discarded transient"),
                        key("analyze.bins", "bins", "20", "density histogram bins"),
                    ],
                    MAP_PARAMS,
                ],
            ),
            run: analyze_maps,
        },
        Command {
            name: "augment",
            about: "Apply the chaotic operator to an image or a directory of images",
            keys: keys(
                "augment",
                &[
                    &[
                        key("in", "in", "", "input image file or directory (required)"),
                        MAP,
                        key(
                            "k",
                            "k",
                            "random",
                            "iteration count, or 'random' for a uniform draw",
                        ),
                        AUGMENT[0],
                        AUGMENT[1],
                    ],
                    MAP_PARAMS,
                ],
            ),
            run: augment,
        },
        Command {
            name: "gen-data",
            about: "Write the synthetic texture corpus as a PNG class-folder tree",
            keys: keys("gen-data", &[&DATA[1..]]),
            run: gen_data,
        },
        Command {
            name: "pretrain",
            about: "Contrastive pretraining of the chaos encoder",
            keys: keys(
                "pretrain",
                &[DATA, &[MAP], MAP_PARAMS, AUGMENT, ENCODER, OPTIM, PRETRAIN],
            ),
            run: pretrain_cmd,
        },
        Command {
            name: "finetune",
            about: "Cross-validated SE-ensemble fine-tuning",
            keys: keys("finetune", &[DATA, FINETUNE, ENCODER, OPTIM]),
            run: finetune_cmd,
        },
        Command {
            name: "probe",
            about: "Linear probe of a frozen encoder",
            keys: keys(
                "probe",
                &[
                    DATA,
                    &[key(
                        "probe.checkpoint",
                        "checkpoint",
                        "",
                        "encoder checkpoint; empty probes the random initialisation",
                    )],
                    ENCODER,
                    PROBE,
                ],
            ),
            run: probe_cmd,
        },
        Command {
            name: "ablate",
            about: "Pretrain-and-probe grid over chaotic maps and epoch counts",
            keys: keys(
                "ablate",
                &[
                    DATA,
                    &[
                        key(
                            "ablate.maps",
                            "maps",
                            "logistic,tent,sine",
                            "maps in the grid",
                        ),
                        key(
                            "ablate.epochs",
                            "ablate-epochs",
                            "15,30",
                            "pretraining epoch settings",
                        ),
                    ],
                    MAP_PARAMS,
                    AUGMENT,
                    ENCODER,
                    OPTIM,
                    PRETRAIN,
                    PROBE,
                ],
            ),
            run: ablate_cmd,
        },
        Command {
            name: "gradcheck",
            about: "Finite-difference check of every autograd primitive and composite graph",
            keys: keys(
                "gradcheck",
                &[&[
                    key("gradcheck.eps", "eps", "1e-5", "central-difference step"),
                    key(
                        "gradcheck.tolerance",
                        "tolerance",
                        "1e-5",
                        "largest accepted relative error",
                    ),
                ]],
            ),
            run: gradcheck_cmd,
        },
    ]
}

/// Output directory of one run and the files written to it.
pub struct Output {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub jobs: usize,
}

impl Output {
    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.files.push(path.clone());
        Ok(path)
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("json value");
        text.push('\n');
        self.write(name, text)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn map_spec(cfg: &Config, kind: MapKind) -> Result<ChaoticMapSpec, CliError> {
    let key = match kind {
        MapKind::Logistic => "map.logistic.r",
        MapKind::Tent => "map.tent.mu",
        MapKind::Sine => "map.sine.r",
    };
    ChaoticMapSpec::new(kind, cfg.get(key)?).map_err(|e| CliError::Usage(e.to_string()))
}

fn map_kind(raw: &str) -> Result<MapKind, CliError> {
    raw.parse()
        .map_err(|_| CliError::Usage(format!("unknown map '{raw}'")))
}

fn map_list(cfg: &Config, key: &str) -> Result<Vec<ChaoticMapSpec>, CliError> {
    cfg.list::<String>(key)?
        .iter()
        .map(|s| map_spec(cfg, map_kind(s)?))
        .collect()
}

fn dataset(cfg: &Config) -> Result<LabeledDataset, CliError> {
    let dir = cfg.str("data.dir");
    if dir.is_empty() {
        Ok(gen_synthetic_textures(&synth_spec(cfg)?)?)
    } else {
        Ok(load_image_folder(Path::new(dir))?)
    }
}

fn synth_spec(cfg: &Config) -> Result<SynthSpec, CliError> {
    Ok(SynthSpec {
        n_classes: cfg.get("data.classes")?,
        n_per_class: cfg.get("data.per_class")?,
        size: cfg.get("data.size")?,
        seed: cfg.get("seed")?,
        ..SynthSpec::default()
    })
}

fn adamw(cfg: &Config) -> Result<AdamWConfig, CliError> {
    Ok(AdamWConfig {
        beta1: cfg.get("optim.beta1")?,
        beta2: cfg.get("optim.beta2")?,
        eps: cfg.get("optim.eps")?,
        weight_decay: cfg.get("optim.weight_decay")?,
    })
}

fn encoder_config(cfg: &Config, prefix: &str) -> Result<EncoderConfig, CliError> {
    Ok(EncoderConfig {
        in_channels: 1,
        widths: cfg.list(&format!("{prefix}.widths"))?,
        strides: cfg.list(&format!("{prefix}.strides"))?,
        kernel: cfg.get(&format!("{prefix}.kernel"))?,
    })
}

fn augment_config(cfg: &Config, map: ChaoticMapSpec) -> Result<AugmentConfig, CliError> {
    Ok(AugmentConfig {
        k_min: cfg.get("augment.k_min")?,
        k_max: cfg.get("augment.k_max")?,
        crop_size: cfg.get("augment.crop_size")?,
        flip_prob: cfg.get("augment.flip_prob")?,
        map,
    })
}

fn pretrain_config(cfg: &Config, map: ChaoticMapSpec) -> Result<PretrainConfig, CliError> {
    let hidden: usize = cfg.get("pretrain.proj_hidden")?;
    Ok(PretrainConfig {
        tau: cfg.get("pretrain.tau")?,
        batch_size: cfg.get("pretrain.batch_size")?,
        epochs: cfg.get("pretrain.epochs")?,
        lr_encoder: cfg.get("pretrain.lr_encoder")?,
        lr_projector: cfg.get("pretrain.lr_projector")?,
        adamw: adamw(cfg)?,
        augment: augment_config(cfg, map)?,
        encoder: encoder_config(cfg, "encoder")?,
        proj_hidden: (hidden > 0).then_some(hidden),
        proj_dim: cfg.get("pretrain.proj_dim")?,
        seed: cfg.get("seed")?,
    })
}

fn probe_config(cfg: &Config) -> Result<ProbeConfig, CliError> {
    Ok(ProbeConfig {
        folds: cfg.get("probe.folds")?,
        steps: cfg.get("probe.steps")?,
        lr: cfg.get("probe.lr")?,
        weight_decay: cfg.get("probe.weight_decay")?,
        seed: cfg.get("seed")?,
        batch: cfg.get("probe.batch")?,
    })
}

fn required_path<'a>(cfg: &'a Config, key: &str) -> Result<&'a Path, CliError> {
    match cfg.str(key) {
        "" => Err(CliError::Usage(format!("'{key}' is required"))),
        p => Ok(Path::new(p)),
    }
}

fn cv_json(s: &ctex::evaluation::CvSummary) -> serde_json::Value {
    json!({
        "mean_accuracy": s.mean_accuracy,
        "std_accuracy": s.std_accuracy,
        "mean_f1": s.mean_f1,
        "std_f1": s.std_f1,
        "f1_average": "macro",
        "folds": s.folds.iter().map(|f| json!({
            "fold": f.fold,
            "accuracy": f.accuracy,
            "macro_f1": f.macro_f1,
        })).collect::<Vec<_>>(),
    })
}

fn fold_metrics_csv(s: &ctex::evaluation::CvSummary) -> String {
    let mut out = String::from("epoch,split,loss,accuracy,macro_f1\n");
    for f in &s.folds {
        let _ = writeln!(out, ",fold{}.val,,{},{}", f.fold, f.accuracy, f.macro_f1);
    }
    out
}

fn analyze_maps(cfg: &Config, out: &mut Output) -> Result<(), CliError> {
    let x0: f64 = cfg.get("analyze.x0")?;
    let n_iter: usize = cfg.get("analyze.n_iter")?;
    let burn_in: usize = cfg.get("analyze.burn_in")?;
    let bins: usize = cfg.get("analyze.bins")?;
    let mut csv = String::from("map,param,lyapunov");
    for b in 0..bins {
        let _ = write!(csv, ",bin_{b}");
    }
    csv.push('\n');
    for spec in map_list(cfg, "analyze.maps")? {
        let stats = orbit_stats(&spec, x0, n_iter, burn_in, bins)?;
        let _ = write!(csv, "{},{},{}", spec.kind(), spec.param(), stats.lyapunov);
        for d in &stats.density {
            let _ = write!(csv, ",{d}");
        }
        csv.push('\n');
        println!(
            "{:<8} param={:<5} lyapunov={:.6}",
            spec.kind(),
            spec.param(),
            stats.lyapunov
        );
    }
    out.write("maps.csv", csv)?;
    Ok(())
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = std::fs::read_dir(input).map_err(|e| io_err(input, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                    matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm")
                })
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Image `i` (sorted file order) draws its `k` from stream `("augment", i)`.
fn augment(cfg: &Config, out: &mut Output) -> Result<(), CliError> {
    let input = required_path(cfg, "in")?;
    let spec = map_spec(cfg, map_kind(cfg.str("map"))?)?;
    let fixed_k: Option<usize> = match cfg.str("k") {
        "random" => None,
        _ => Some(cfg.get("k")?),
    };
    let seed: u64 = cfg.get("seed")?;
    let (k_min, k_max): (usize, usize) = (cfg.get("augment.k_min")?, cfg.get("augment.k_max")?);
    let mut log = String::from("file,k\n");
    for (i, path) in image_files(input)?.iter().enumerate() {
        let img = read_image(path)?;
        let k = match fixed_k {
            Some(k) => k,
            None => sample_k(&mut rng::stream(seed, "augment", i as u64), k_min, k_max)?,
        };
        let name = path
            .file_name()
            .expect("file name")
            .to_string_lossy()
            .into_owned();
        let name = if name.to_ascii_lowercase().ends_with(".pgm") {
            format!("{}.png", &name[..name.len() - 4])
        } else {
            name
        };
        let target = out.dir.join(&name);
        write_image(&target, &chaotic_augment(&img, &spec, k)?)?;
        out.files.push(target);
        let _ = writeln!(log, "{name},{k}");
    }
    out.write("augment.csv", log)?;
    Ok(())
}

fn gen_data(cfg: &Config, out: &mut Output) -> Result<(), CliError> {
    let ds = gen_synthetic_textures(&synth_spec(cfg)?)?;
    ds.write_folder(&out.dir)?;
    out.files.push(out.dir.join("manifest.csv"));
    println!(
        "wrote {} images in {} classes to {}",
        ds.len(),
        ds.n_classes(),
        out.dir.display()
    );
    Ok(())
}

fn pretrain_cmd(cfg: &Config, out: &mut Output) -> Result<(), CliError> {
    let ds = dataset(cfg)?;
    let spec = map_spec(cfg, map_kind(cfg.str("map"))?)?;
    let pc = pretrain_config(cfg, spec)?;
    let result = pretrain(&ds, &pc)?;
    out.write("metrics.csv", trace_csv(&result.trace))?;
    out.write("encoder.ctex", result.checkpoint()?.to_bytes())?;
    let last = result.trace.last().expect("trace has epoch 0");
    out.json(
        "summary.json",
        &json!({
            "epochs": pc.epochs,
            "map": spec.kind().name(),
            "param": spec.param(),
            "final_train_loss": last.train_loss,
            "final_probe_loss": last.probe_loss,
            "initial_probe_loss": result.trace[0].probe_loss,
        }),
    )?;
    println!(
        "pretrain: {} epochs, probe loss {:.4} -> {:.4}",
        pc.epochs, result.trace[0].probe_loss, last.probe_loss
    );
    Ok(())
}

fn finetune_cmd(cfg: &Config, out: &mut Output) -> Result<(), CliError> {
    let ds = dataset(cfg)?;
    let chaos_ck = Checkpoint::load(required_path(cfg, "finetune.chaos_checkpoint")?)?;
    let sup = match cfg.str("finetune.sup_checkpoint") {
        "" => None,
        p => Some(Encoder::from_checkpoint(
            &Checkpoint::load(Path::new(p))?,
            SUP_PREFIX,
            None,
        )?),
    };
    let head: HeadKind = cfg
        .str("finetune.head")
        .parse()
        .map_err(|e: ctex::Error| CliError::Usage(e.to_string()))?;
    let fc = FinetuneConfig {
        lr_head: cfg.get("finetune.lr_head")?,
        lr_backbone: cfg.get("finetune.lr_backbone")?,
        epochs: cfg.get("finetune.epochs")?,
        folds: cfg.get("finetune.folds")?,
        batch_size: cfg.get("finetune.batch_size")?,
        se_ratio: cfg.get("finetune.se_ratio")?,
        flip_prob: cfg.get("finetune.flip_prob")?,
        head,
        adamw: adamw(cfg)?,
        supervised: SupervisedConfig {
            epochs: cfg.get("sup.epochs")?,
            lr: cfg.get("sup.lr")?,
            batch_size: cfg.get("sup.batch_size")?,
            encoder: encoder_config(cfg, "sup")?,
        },
        chaos_encoder: encoder_config(cfg, "encoder")?,
        seed: cfg.get("seed")?,
        jobs: out.jobs,
    };
    if fc.unusual_fold_count() {
        eprintln!("warning: {} folds is outside the usual 4 to 10", fc.folds);
    }
    let report = finetune(&ds, sup.as_ref(), &chaos_ck, &fc)?;
    out.write("metrics.csv", report.metrics_csv())?;
    if let Some(cm) = report.summary.pooled_confusion() {
        out.write("confusion.csv", cm.to_csv(ds.class_names()))?;
        out.write("confusion.ppm", cm.to_ppm(16))?;
    }
    for (i, run) in report.runs.iter().enumerate() {
        out.write(&format!("fold{i}.ctex"), run.model.checkpoint()?.to_bytes())?;
    }
    let mut summary = cv_json(&report.summary);
    summary["head"] = json!(head.name());
    out.json("summary.json", &summary)?;
    println!(
        "finetune ({}): accuracy {:.4} +- {:.4}, macro F1 {:.4} +- {:.4}",
        head.name(),
        report.summary.mean_accuracy,
        report.summary.std_accuracy,
        report.summary.mean_f1,
        report.summary.std_f1
    );
    Ok(())
}

fn probe_cmd(cfg: &Config, out: &mut Output) -> Result<(), CliError> {
    let ds = dataset(cfg)?;
    let encoder = match cfg.str("probe.checkpoint") {
        "" => {
            let channels = ds.items().first().map_or(1, |(img, _)| img.channels());
            let pc = PretrainConfig {
                encoder: EncoderConfig {
                    in_channels: channels,
                    ..encoder_config(cfg, "encoder")?
                },
                augment: AugmentConfig {
                    crop_size: ds.min_side().max(1),
                    ..AugmentConfig::default()
                },
                seed: cfg.get("seed")?,
                ..PretrainConfig::default()
            };
            pretrain_init_encoder(&ds, &pc)?
        }
        p => Encoder::from_checkpoint(&Checkpoint::load(Path::new(p))?, CHAOS_PREFIX, None)?,
    };
    let summary = linear_probe(&encoder, &ds, &probe_config(cfg)?)?;
    out.write("metrics.csv", fold_metrics_csv(&summary))?;
    out.json("summary.json", &cv_json(&summary))?;
    println!(
        "probe: accuracy {:.4} +- {:.4}, macro F1 {:.4}",
        summary.mean_accuracy, summary.std_accuracy, summary.mean_f1
    );
    Ok(())
}

fn ablate_cmd(cfg: &Config, out: &mut Output) -> Result<(), CliError> {
    let ds = dataset(cfg)?;
    let maps = map_list(cfg, "ablate.maps")?;
    let first = *maps
        .first()
        .ok_or_else(|| CliError::Usage("'ablate.maps' is empty".into()))?;
    let ac = AblationConfig {
        maps,
        epochs: cfg.list("ablate.epochs")?,
        pretrain: pretrain_config(cfg, first)?,
        probe: probe_config(cfg)?,
        jobs: out.jobs,
    };
    let table = ablate_maps(&ds, &ac)?;
    out.write("ablation.csv", table.to_csv())?;
    let best: Vec<_> = table
        .best_by_epochs()
        .into_iter()
        .map(|(e, kind, acc)| json!({"epochs": e, "best_map": kind.name(), "mean_accuracy": acc}))
        .collect();
    out.json(
        "summary.json",
        &json!({
            "baseline": cv_json(&table.baseline),
            "cells": table.cells.iter().map(|c| json!({
                "map": c.map.kind().name(),
                "param": c.map.param(),
                "epochs": c.epochs,
                "seed": c.seed,
                "summary": cv_json(&c.summary),
            })).collect::<Vec<_>>(),
            "best_by_epochs": best,
        }),
    )?;
    print!("{}", table.to_csv());
    for (e, kind, acc) in table.best_by_epochs() {
        println!("observation: best map at {e} epochs is {kind} ({acc:.4})");
    }
    Ok(())
}

fn gradcheck_cmd(cfg: &Config, out: &mut Output) -> Result<(), CliError> {
    let eps: f64 = cfg.get("gradcheck.eps")?;
    let tol: f64 = cfg.get("gradcheck.tolerance")?;
    let seed: u64 = cfg.get("seed")?;
    let mut rows = primitive_suite(seed, eps)?;
    rows.extend(composite_suite(seed, eps)?);
    let mut csv = String::from("check,max_rel_error,pass\n");
    let mut failed = Vec::new();
    for (name, err) in &rows {
        let pass = *err < tol;
        println!(
            "{:<36} {err:.3e} {}",
            name,
            if pass { "ok" } else { "FAIL" }
        );
        let _ = writeln!(csv, "{name},{err:e},{pass}");
        if !pass {
            failed.push(*name);
        }
    }
    out.write("gradcheck.csv", csv)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check above {tol:e} for: {}",
            failed.join(", ")
        )))
    }
}
