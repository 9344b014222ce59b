use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::autograd::{Checkpoint, Tape};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::imaging::{make_view_pair, AugmentConfig, Image};
use crate::network::{image_batch, Encoder, EncoderConfig, Mode, Projector};
use crate::rng;

use super::loss::nt_xent;
use super::optim::{collect_grads, AdamWConfig, OptimState, ParamGroup};

/// Prefix of the contrastively trained encoder's parameters.
pub const CHAOS_PREFIX: &str = "chaos";

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub tau: f64,
    /// Source images per batch; each contributes two rows to the loss.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_encoder: f64,
    pub lr_projector: f64,
    pub adamw: AdamWConfig,
    pub augment: AugmentConfig,
    /// Stage layout; `in_channels` is taken from the dataset.
    pub encoder: EncoderConfig,
    /// Projector hidden width, `None` for the encoder feature width.
    pub proj_hidden: Option<usize>,
    pub proj_dim: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            batch_size: 32,
            epochs: 15,
            lr_encoder: 3e-3,
            lr_projector: 3e-3,
            adamw: AdamWConfig::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::chaos(1),
            proj_hidden: None,
            proj_dim: 32,
            seed: 7,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "temperature {} must be positive",
                self.tau
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidParam(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.proj_dim == 0 || self.proj_hidden == Some(0) {
            return Err(Error::InvalidParam(
                "projector widths must be positive".into(),
            ));
        }
        for lr in [self.lr_encoder, self.lr_projector] {
            if lr.is_nan() || lr < 0.0 {
                return Err(Error::InvalidParam(format!(
                    "learning rate {lr} must be >= 0"
                )));
            }
        }
        self.augment.validate()?;
        self.encoder.validate()
    }
}

/// Loss record for one epoch. Epoch 0 is the state before training and has
/// no training loss. `probe_loss` is measured on a fixed set of view pairs
/// that never changes between epochs, so it only moves when weights do.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub probe_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: Encoder,
    pub projector: Projector,
    pub trace: Vec<EpochRecord>,
}

impl PretrainOutcome {
    /// Encoder weights and architecture; the projector is not saved.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.encoder.write_checkpoint(&mut ck)?;
        Ok(ck)
    }
}

/// Metrics CSV (`epoch,split,loss,accuracy,macro_f1`) of a loss trace.
pub fn trace_csv(trace: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy,macro_f1\n");
    for r in trace {
        if let Some(l) = r.train_loss {
            let _ = writeln!(out, "{},train,{l},,", r.epoch);
        }
        let _ = writeln!(out, "{},probe,{},,", r.epoch, r.probe_loss);
    }
    out
}

fn dataset_channels(ds: &LabeledDataset, crop: usize) -> Result<usize> {
    let first = ds.items().first().ok_or(Error::EmptyDataset)?;
    let c = first.0.channels();
    for (img, _) in ds.items() {
        if img.channels() != c {
            return Err(Error::InvalidParam(format!(
                "mixed channel counts {c} and {} in dataset",
                img.channels()
            )));
        }
        if img.height() < crop || img.width() < crop {
            return Err(Error::CropTooLarge {
                crop,
                height: img.height(),
                width: img.width(),
            });
        }
    }
    Ok(c)
}

fn init_models(ds: &LabeledDataset, cfg: &PretrainConfig) -> Result<(Encoder, Projector)> {
    cfg.validate()?;
    let channels = dataset_channels(ds, cfg.augment.crop_size)?;
    let enc_cfg = EncoderConfig {
        in_channels: channels,
        ..cfg.encoder.clone()
    };
    let mut r = rng::stream(cfg.seed, "pretrain.init", 0);
    let encoder = Encoder::new(CHAOS_PREFIX, enc_cfg, &mut r)?;
    let d_f = encoder.feature_dim();
    let projector = Projector::new(
        "projector",
        d_f,
        cfg.proj_hidden.unwrap_or(d_f),
        cfg.proj_dim,
        &mut r,
    );
    Ok((encoder, projector))
}

/// The encoder exactly as [`pretrain`] initialises it, before any update;
/// the random-encoder baseline for probes.
pub fn pretrain_init_encoder(ds: &LabeledDataset, cfg: &PretrainConfig) -> Result<Encoder> {
    Ok(init_models(ds, cfg)?.0)
}

/// Interleaved `(view_i, view_j)` rows for the given images.
fn view_rows(
    ds: &LabeledDataset,
    indices: &[usize],
    cfg: &AugmentConfig,
    seed: u64,
    purpose: &str,
    offset: u64,
) -> Result<Vec<Image>> {
    let mut rows = Vec::with_capacity(2 * indices.len());
    for &i in indices {
        let mut r = rng::stream(seed, purpose, offset + i as u64);
        let pair = make_view_pair(ds.image(i), &mut r, cfg)?;
        rows.push(pair.view_i);
        rows.push(pair.view_j);
    }
    Ok(rows)
}

fn batch_loss(
    tape: &mut Tape,
    encoder: &Encoder,
    projector: &Projector,
    rows: &[Image],
    tau: f64,
    mode: Mode,
) -> Result<crate::autograd::Var> {
    let refs: Vec<&Image> = rows.iter().collect();
    let x = tape.constant(image_batch(&refs)?);
    let f = encoder.forward(tape, x, mode)?;
    let z = projector.forward(tape, f, mode)?;
    nt_xent(tape, z, tau)
}

fn nan_report(
    tape: &Tape,
    encoder: &Encoder,
    projector: &Projector,
    loss: f64,
    batch: &[usize],
) -> String {
    let mut s = format!("loss={loss}; images={batch:?}");
    let params = encoder.params().iter().chain([
        &projector.hidden.weight,
        &projector.hidden.bias,
        &projector.out.weight,
        &projector.out.bias,
    ]);
    for p in params {
        let max = p.value.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let finite = p.value.data().iter().all(|v| v.is_finite());
        let _ = write!(s, "; {} max|w|={max} finite={finite}", p.name);
    }
    let _ = write!(s, "; tape nodes={}", tape.len());
    s
}

/// Contrastive pretraining.
///
/// Each epoch shuffles the image order with stream `("pretrain.shuffle",
/// epoch)` and cuts it into batches; trailing batches with fewer than two
/// images are dropped. The view pair of image `i` in epoch `e` comes from
/// stream `("pretrain.views", e * n + i)`, so views do not depend on batch
/// composition. The encoder and projector are updated by AdamW with
/// separate constant learning rates.
pub fn pretrain(ds: &LabeledDataset, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let (mut encoder, mut projector) = init_models(ds, cfg)?;
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "pretrain.probe", 0));
    let probe_idx: Vec<usize> = order[..cfg.batch_size.min(n)].to_vec();
    let probe_rows = view_rows(
        ds,
        &probe_idx,
        &cfg.augment,
        cfg.seed,
        "pretrain.probe_views",
        0,
    )?;
    let probe = |encoder: &Encoder, projector: &Projector| -> Result<f64> {
        if probe_idx.len() < 2 {
            return Ok(0.0);
        }
        let mut tape = Tape::new();
        let l = batch_loss(
            &mut tape,
            encoder,
            projector,
            &probe_rows,
            cfg.tau,
            Mode::Frozen,
        )?;
        Ok(tape.value(l).data()[0])
    };

    let mut trace = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        probe_loss: probe(&encoder, &projector)?,
    }];
    let mut opt = OptimState::new(cfg.adamw);
    let names: Vec<String> = encoder
        .params()
        .iter()
        .map(|p| p.name.clone())
        .chain(projector.params_mut().into_iter().map(|p| p.name.clone()))
        .collect();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "pretrain.shuffle", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let rows = view_rows(
                ds,
                idx,
                &cfg.augment,
                cfg.seed,
                "pretrain.views",
                (epoch * n) as u64,
            )?;
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, &encoder, &projector, &rows, cfg.tau, Mode::Train)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: b,
                    detail: nan_report(&tape, &encoder, &projector, value, idx),
                });
            }
            tape.backward(loss)?;
            let grads = collect_grads(&tape, names.iter().map(String::as_str));
            let mut groups = [
                ParamGroup::new(cfg.lr_encoder, encoder.params_mut().iter_mut()),
                ParamGroup::new(cfg.lr_projector, projector.params_mut()),
            ];
            opt.step(&mut groups, &grads, 1.0)?;
            total += value;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::InvalidParam(format!(
                "dataset of {n} images yields no batch of at least two"
            )));
        }
        trace.push(EpochRecord {
            epoch,
            train_loss: Some(total / batches as f64),
            probe_loss: probe(&encoder, &projector)?,
        });
    }
    Ok(PretrainOutcome {
        encoder,
        projector,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_textures, SynthSpec};

    fn tiny() -> (LabeledDataset, PretrainConfig) {
        let ds = gen_synthetic_textures(&SynthSpec {
            n_classes: 3,
            n_per_class: 4,
            size: 16,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = PretrainConfig {
            batch_size: 4,
            epochs: 2,
            augment: AugmentConfig {
                crop_size: 12,
                ..AugmentConfig::default()
            },
            ..PretrainConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn zero_learning_rates_keep_probe_constant() {
        let (ds, mut cfg) = tiny();
        cfg.lr_encoder = 0.0;
        cfg.lr_projector = 0.0;
        let out = pretrain(&ds, &cfg).unwrap();
        assert_eq!(out.trace.len(), 3);
        assert!(out
            .trace
            .iter()
            .all(|r| r.probe_loss == out.trace[0].probe_loss));
        assert_eq!(out.encoder, pretrain_init_encoder(&ds, &cfg).unwrap());
    }

    #[test]
    fn deterministic_trace() {
        let (ds, cfg) = tiny();
        let a = pretrain(&ds, &cfg).unwrap();
        let b = pretrain(&ds, &cfg).unwrap();
        assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
        assert_eq!(
            a.checkpoint().unwrap().to_bytes(),
            b.checkpoint().unwrap().to_bytes()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let (ds, cfg) = tiny();
        let bad = [
            PretrainConfig {
                tau: 0.0,
                ..cfg.clone()
            },
            PretrainConfig {
                batch_size: 1,
                ..cfg.clone()
            },
            PretrainConfig {
                augment: AugmentConfig {
                    crop_size: 17,
                    ..cfg.augment.clone()
                },
                ..cfg.clone()
            },
        ];
        for c in &bad {
            assert!(pretrain(&ds, c).is_err());
        }
    }

    #[test]
    fn trace_csv_layout() {
        let t = [
            EpochRecord {
                epoch: 0,
                train_loss: None,
                probe_loss: 1.5,
            },
            EpochRecord {
                epoch: 1,
                train_loss: Some(2.0),
                probe_loss: 1.25,
            },
        ];
        assert_eq!(
            trace_csv(&t),
            "epoch,split,loss,accuracy,macro_f1\n0,probe,1.5,,\n1,train,2,,\n1,probe,1.25,,\n"
        );
    }
}
