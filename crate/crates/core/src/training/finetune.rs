use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autograd::{Checkpoint, Param, Tape, Var};
use crate::data::{kfold_split, LabeledDataset};
use crate::error::{Error, Result};
use crate::evaluation::{argmax_rows, confusion, parallel_map, CvSummary, FoldScore};
use crate::imaging::Image;
use crate::network::{image_batch, Classifier, Encoder, EncoderConfig, Mode, SeFusion};
use crate::rng;

use super::loss::cross_entropy;
use super::optim::{collect_grads, cosine_lr, AdamWConfig, OptimState, ParamGroup};
use super::pretrain::CHAOS_PREFIX;

/// Prefix of the supervised backbone's parameters.
pub const SUP_PREFIX: &str = "sup";

/// Which backbone features reach the SE gate and classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Ensemble,
    SupOnly,
    ChaosOnly,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Ensemble, HeadKind::SupOnly, HeadKind::ChaosOnly];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Ensemble => "ensemble",
            HeadKind::SupOnly => "sup_only",
            HeadKind::ChaosOnly => "chaos_only",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown head kind '{s}'")))
    }
}

/// Supervised training of the `sup` backbone with a temporary linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Stage layout; `in_channels` is taken from the dataset.
    pub encoder: EncoderConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-2,
            batch_size: 16,
            encoder: EncoderConfig::supervised(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub epochs: usize,
    pub folds: usize,
    pub batch_size: usize,
    pub se_ratio: usize,
    pub flip_prob: f64,
    pub head: HeadKind,
    pub adamw: AdamWConfig,
    /// Used when no supervised backbone is supplied: one is trained on
    /// each training fold.
    pub supervised: SupervisedConfig,
    /// Expected stage layout of the chaos encoder checkpoint.
    pub chaos_encoder: EncoderConfig,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr_head: 3e-2,
            lr_backbone: 1e-4,
            epochs: 10,
            folds: 4,
            batch_size: 16,
            se_ratio: 4,
            flip_prob: 0.5,
            head: HeadKind::Ensemble,
            adamw: AdamWConfig::default(),
            supervised: SupervisedConfig::default(),
            chaos_encoder: EncoderConfig::chaos(1),
            seed: 7,
            jobs: 1,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidParam(format!(
                "need at least 2 folds, got {}",
                self.folds
            )));
        }
        if self.batch_size == 0 || self.supervised.batch_size == 0 {
            return Err(Error::InvalidParam("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidParam(format!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            )));
        }
        for lr in [self.lr_head, self.lr_backbone, self.supervised.lr] {
            if lr.is_nan() || lr < 0.0 {
                return Err(Error::InvalidParam(format!(
                    "learning rate {lr} must be >= 0"
                )));
            }
        }
        self.supervised.encoder.validate()?;
        self.chaos_encoder.validate()
    }

    /// True outside the 4 to 10 fold protocol range.
    pub fn unusual_fold_count(&self) -> bool {
        !(4..=10).contains(&self.folds)
    }
}

/// Both backbones, the SE gate and the classifier of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub sup: Encoder,
    pub chaos: Encoder,
    pub se: SeFusion,
    pub classifier: Classifier,
    pub head: HeadKind,
}

impl EnsembleModel {
    fn new(
        sup: Encoder,
        chaos: Encoder,
        head: HeadKind,
        n_classes: usize,
        ratio: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = match head {
            HeadKind::Ensemble => sup.feature_dim() + chaos.feature_dim(),
            HeadKind::SupOnly => sup.feature_dim(),
            HeadKind::ChaosOnly => chaos.feature_dim(),
        };
        let se = SeFusion::new(
            "se",
            d,
            ratio,
            &mut rng::stream(seed, "finetune.se_init", 0),
        )?;
        Ok(Self {
            sup,
            chaos,
            se,
            classifier: Classifier::zeros("classifier", d, n_classes),
            head,
        })
    }

    /// Logits for an `N x C x H x W` batch; `backbone` selects whether the
    /// encoders record gradients.
    pub fn logits(&self, tape: &mut Tape, x: Var, backbone: Mode, head: Mode) -> Result<Var> {
        let u = match self.head {
            HeadKind::Ensemble => {
                let a = self.sup.forward(tape, x, backbone)?;
                let b = self.chaos.forward(tape, x, backbone)?;
                tape.concat(a, b)?
            }
            HeadKind::SupOnly => self.sup.forward(tape, x, backbone)?,
            HeadKind::ChaosOnly => self.chaos.forward(tape, x, backbone)?,
        };
        let fused = self.se.reweight(tape, u, head)?;
        self.classifier.forward(tape, fused, head)
    }

    pub fn predict(&self, images: &[&Image], batch: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let x = tape.constant(image_batch(chunk)?);
            let l = self.logits(&mut tape, x, Mode::Frozen, Mode::Frozen)?;
            out.extend(argmax_rows(tape.value(l)));
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_meta("head.kind", self.head.name())?;
        ck.push_meta("se.ratio", &self.se.ratio().to_string())?;
        self.sup.write_checkpoint(&mut ck)?;
        self.chaos.write_checkpoint(&mut ck)?;
        for p in [
            &self.se.w1,
            &self.se.w2,
            &self.classifier.weight,
            &self.classifier.bias,
        ] {
            ck.push_tensor(&p.name, &p.value)?;
        }
        Ok(ck)
    }

    fn param_names(&self, with_backbone: bool) -> Vec<String> {
        let mut names: Vec<String> = [
            &self.se.w1,
            &self.se.w2,
            &self.classifier.weight,
            &self.classifier.bias,
        ]
        .iter()
        .map(|p| p.name.clone())
        .collect();
        if with_backbone {
            let (sup, chaos) = match self.head {
                HeadKind::Ensemble => (true, true),
                HeadKind::SupOnly => (true, false),
                HeadKind::ChaosOnly => (false, true),
            };
            for (used, enc) in [(sup, &self.sup), (chaos, &self.chaos)] {
                if used {
                    names.extend(enc.params().iter().map(|p| p.name.clone()));
                }
            }
        }
        names
    }

    /// Head group at `lr_head`, plus the used backbones at `lr_backbone`.
    fn param_groups(&mut self, lr_head: f64, lr_backbone: Option<f64>) -> Vec<ParamGroup<'_>> {
        let Self {
            sup,
            chaos,
            se,
            classifier,
            head,
        } = self;
        let mut head_params: Vec<&mut Param> = se.params_mut().into_iter().collect();
        head_params.extend(classifier.params_mut());
        let mut groups = vec![ParamGroup::new(lr_head, head_params)];
        if let Some(lr) = lr_backbone {
            let params: Vec<&mut Param> = match head {
                HeadKind::Ensemble => sup
                    .params_mut()
                    .iter_mut()
                    .chain(chaos.params_mut().iter_mut())
                    .collect(),
                HeadKind::SupOnly => sup.params_mut().iter_mut().collect(),
                HeadKind::ChaosOnly => chaos.params_mut().iter_mut().collect(),
            };
            groups.push(ParamGroup::new(lr, params));
        }
        groups
    }
}

fn maybe_flip(img: &Image, flip_prob: f64, seed: u64, purpose: &str, index: u64) -> Image {
    if rng::stream(seed, purpose, index).gen::<f64>() < flip_prob {
        img.flip_horizontal()
    } else {
        img.clone()
    }
}

fn dataset_channels(ds: &LabeledDataset) -> Result<usize> {
    let c = ds.items().first().ok_or(Error::EmptyDataset)?.0.channels();
    if ds.items().iter().any(|(img, _)| img.channels() != c) {
        return Err(Error::InvalidParam("dataset mixes channel counts".into()));
    }
    Ok(c)
}

/// Trains a fresh supervised backbone on `train` with a temporary zero
/// initialised linear head, cosine-annealed AdamW and random flips.
pub fn train_supervised(
    ds: &LabeledDataset,
    train: &[usize],
    cfg: &SupervisedConfig,
    adamw: AdamWConfig,
    flip_prob: f64,
    seed: u64,
) -> Result<Encoder> {
    let enc_cfg = EncoderConfig {
        in_channels: dataset_channels(ds)?,
        ..cfg.encoder.clone()
    };
    let mut encoder = Encoder::new(SUP_PREFIX, enc_cfg, &mut rng::stream(seed, "sup.init", 0))?;
    let mut head = Classifier::zeros("sup_head", encoder.feature_dim(), ds.n_classes());
    let names: Vec<String> = encoder
        .params()
        .iter()
        .map(|p| p.name.clone())
        .chain([head.weight.name.clone(), head.bias.name.clone()])
        .collect();
    let mut opt = OptimState::new(adamw);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut step = 0;
    let n = ds.len() as u64;
    for epoch in 0..cfg.epochs {
        let mut order = train.to_vec();
        order.shuffle(&mut rng::stream(seed, "sup.shuffle", epoch as u64));
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let imgs: Vec<Image> = idx
                .iter()
                .map(|&i| {
                    maybe_flip(
                        ds.image(i),
                        flip_prob,
                        seed,
                        "sup.flip",
                        epoch as u64 * n + i as u64,
                    )
                })
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(image_batch(&imgs.iter().collect::<Vec<_>>())?);
            let f = encoder.forward(&mut tape, x, Mode::Train)?;
            let logits = head.forward(&mut tape, f, Mode::Train)?;
            let loss = cross_entropy(&mut tape, logits, &labels)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: b,
                    detail: format!("supervised stage loss={value}; images={idx:?}"),
                });
            }
            tape.backward(loss)?;
            let grads = collect_grads(&tape, names.iter().map(String::as_str));
            let scale = cosine_lr(step, total, 1.0)?;
            let mut params: Vec<&mut Param> = encoder.params_mut().iter_mut().collect();
            params.extend(head.params_mut());
            opt.step(&mut [ParamGroup::new(cfg.lr, params)], &grads, scale)?;
            step += 1;
        }
    }
    Ok(encoder)
}

/// Result of one cross-validation fold.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub score: FoldScore,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub model: EnsembleModel,
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub head: HeadKind,
    pub runs: Vec<FoldRun>,
    pub summary: CvSummary,
}

impl FinetuneReport {
    /// `epoch,split,loss,accuracy,macro_f1` with one `train` row per fold
    /// and epoch and one `val` row per fold; splits are prefixed `fold<i>.`.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy,macro_f1\n");
        for (i, run) in self.runs.iter().enumerate() {
            for (e, l) in run.train_loss.iter().enumerate() {
                let _ = writeln!(out, "{},fold{i}.train,{l},,", e + 1);
            }
            let _ = writeln!(
                out,
                "{},fold{i}.val,,{},{}",
                run.train_loss.len(),
                run.score.accuracy,
                run.score.macro_f1
            );
        }
        out
    }
}

fn run_fold(
    ds: &LabeledDataset,
    fold: usize,
    train: &[usize],
    val: &[usize],
    sup: Option<&Encoder>,
    chaos: &Encoder,
    cfg: &FinetuneConfig,
) -> Result<FoldRun> {
    let seed = rng::derive_seed(cfg.seed, "finetune.fold", fold as u64);
    let sup = match sup {
        Some(s) => s.clone(),
        None => train_supervised(ds, train, &cfg.supervised, cfg.adamw, cfg.flip_prob, seed)?,
    };
    let mut model = EnsembleModel::new(
        sup,
        chaos.clone(),
        cfg.head,
        ds.n_classes(),
        cfg.se_ratio,
        seed,
    )?;
    let backbone_mode = if cfg.lr_backbone > 0.0 {
        Mode::Train
    } else {
        Mode::Frozen
    };
    let train_backbone = backbone_mode == Mode::Train;
    let names = model.param_names(train_backbone);
    let mut opt = OptimState::new(cfg.adamw);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut step = 0;
    let n = ds.len() as u64;
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = train.to_vec();
        order.shuffle(&mut rng::stream(seed, "finetune.shuffle", epoch as u64));
        let mut sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let imgs: Vec<Image> = idx
                .iter()
                .map(|&i| {
                    maybe_flip(
                        ds.image(i),
                        cfg.flip_prob,
                        seed,
                        "finetune.flip",
                        epoch as u64 * n + i as u64,
                    )
                })
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(image_batch(&imgs.iter().collect::<Vec<_>>())?);
            let logits = model.logits(&mut tape, x, backbone_mode, Mode::Train)?;
            let loss = cross_entropy(&mut tape, logits, &labels)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: b,
                    detail: format!("fold {fold} loss={value}; images={idx:?}"),
                });
            }
            tape.backward(loss)?;
            let grads = collect_grads(&tape, names.iter().map(String::as_str));
            let scale = cosine_lr(step, total, 1.0)?;
            let mut groups =
                model.param_groups(cfg.lr_head, train_backbone.then_some(cfg.lr_backbone));
            opt.step(&mut groups, &grads, scale)?;
            sum += value;
            step += 1;
        }
        train_loss.push(sum / per_epoch as f64);
    }
    let images: Vec<&Image> = val.iter().map(|&i| ds.image(i)).collect();
    let preds = model.predict(&images, 64)?;
    let truth: Vec<usize> = val.iter().map(|&i| ds.label(i)).collect();
    let score = FoldScore::from_confusion(fold, confusion(&preds, &truth, ds.n_classes())?)?;
    Ok(FoldRun {
        score,
        train_loss,
        model,
    })
}

/// Stage-2 training with stratified cross-validation.
///
/// `chaos_ck` must hold a `chaos` encoder whose layout matches
/// `cfg.chaos_encoder` and the dataset's channel count. Without `sup`, a
/// supervised backbone is trained on each training fold first. The SE gate
/// and classifier learn at `lr_head`, the backbones at `lr_backbone`, both
/// under one cosine schedule over all steps.
pub fn finetune(
    ds: &LabeledDataset,
    sup: Option<&Encoder>,
    chaos_ck: &Checkpoint,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    let channels = dataset_channels(ds)?;
    let expected = EncoderConfig {
        in_channels: channels,
        ..cfg.chaos_encoder.clone()
    };
    let chaos = Encoder::from_checkpoint(chaos_ck, CHAOS_PREFIX, Some(&expected))?;
    if let Some(s) = sup {
        if s.config().in_channels != channels {
            return Err(Error::CheckpointMismatch {
                name: format!("{SUP_PREFIX} in_channels"),
                expected: vec![channels],
                found: vec![s.config().in_channels],
            });
        }
    }
    let labels = ds.labels();
    let folds = kfold_split(&labels, ds.n_classes(), cfg.folds, cfg.seed)?;
    let indexed: Vec<(usize, &crate::data::Fold)> = folds.iter().enumerate().collect();
    let runs = parallel_map(&indexed, cfg.jobs, |(i, f)| {
        run_fold(ds, *i, &f.train, &f.val, sup, &chaos, cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let summary = CvSummary::new(runs.iter().map(|r| r.score.clone()).collect());
    Ok(FinetuneReport {
        head: cfg.head,
        runs,
        summary,
    })
}
