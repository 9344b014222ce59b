//! Classification metrics, linear-probe evaluation of frozen encoders and
//! the chaotic-map ablation grid.
//!
//! F1 is the macro (unweighted) average over classes. A class whose
//! precision and recall are both zero, including a class that never occurs
//! and is never predicted, scores an F1 of 0.

use std::fmt::Write as _;

use crate::autograd::{Param, Tape, Tensor};
use crate::data::{kfold_split, LabeledDataset};
use crate::dynamics::{ChaoticMapSpec, MapKind};
use crate::error::{Error, Result};
use crate::network::{Classifier, Encoder, Mode};
use crate::rng;
use crate::training::{
    collect_grads, cross_entropy, pretrain, pretrain_init_encoder, AdamWConfig, OptimState,
    ParamGroup, PretrainConfig,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    /// Row-major `counts[true * n + predicted]`.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.n_classes).all(|t| (0..self.n_classes).all(|p| t == p || self.get(t, p) == 0))
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for id in [truth, predicted] {
            if id >= self.n_classes {
                return Err(Error::IdOutOfRange {
                    id,
                    n_classes: self.n_classes,
                });
            }
        }
        self.counts[truth * self.n_classes + predicted] += 1;
        Ok(())
    }

    /// Element-wise sum of two matrices over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::Shape {
                op: "confusion_merge",
                lhs: vec![self.n_classes],
                rhs: vec![other.n_classes],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// CSV grid with a header row of class names; rows are true classes.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let mut out = String::from("true\\pred");
        for p in 0..self.n_classes {
            let _ = write!(out, ",{}", name(p));
        }
        out.push('\n');
        for t in 0..self.n_classes {
            out.push_str(&name(t));
            for p in 0..self.n_classes {
                let _ = write!(out, ",{}", self.get(t, p));
            }
            out.push('\n');
        }
        out
    }

    /// Row-normalised heat map as a binary PPM, `cell` pixels per entry.
    /// Zero is white, a full row is dark blue.
    pub fn to_ppm(&self, cell: usize) -> Vec<u8> {
        let side = self.n_classes * cell;
        let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
        for y in 0..side {
            let t = y / cell;
            let row: u64 = (0..self.n_classes).map(|p| self.get(t, p)).sum();
            for x in 0..side {
                let v = if row == 0 {
                    0.0
                } else {
                    self.get(t, x / cell) as f64 / row as f64
                };
                let shade = |lo: f64| (255.0 - v * (255.0 - lo)).round() as u8;
                out.extend([shade(20.0), shade(40.0), shade(120.0)]);
            }
        }
        out
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Shape {
            op: "confusion",
            lhs: vec![preds.len()],
            rhs: vec![labels.len()],
        });
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&p, &t) in preds.iter().zip(labels) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok(cm.trace() as f64 / total as f64)
}

pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let n = cm.n_classes();
    let sum: f64 = (0..n)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let predicted: u64 = (0..n).map(|t| cm.get(t, c)).sum();
            let actual: u64 = (0..n).map(|p| cm.get(c, p)).sum();
            let precision = if predicted == 0 {
                0.0
            } else {
                tp / predicted as f64
            };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .sum();
    Ok(sum / n as f64)
}

/// Row-wise argmax; ties resolve to the lowest class id.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape().get(1).copied().unwrap_or(0);
    (0..logits.shape()[0])
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for c in 1..cols {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scores of one evaluated fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldScore {
    pub fold: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

impl FoldScore {
    pub fn from_confusion(fold: usize, confusion: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            fold,
            accuracy: accuracy(&confusion)?,
            macro_f1: macro_f1(&confusion)?,
            confusion,
        })
    }
}

/// Cross-fold summary.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSummary {
    pub folds: Vec<FoldScore>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
}

impl CvSummary {
    pub fn new(folds: Vec<FoldScore>) -> Self {
        let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let f1: Vec<f64> = folds.iter().map(|f| f.macro_f1).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        let (mean_f1, std_f1) = mean_std(&f1);
        Self {
            folds,
            mean_accuracy,
            std_accuracy,
            mean_f1,
            std_f1,
        }
    }

    /// Sum of the per-fold confusion matrices.
    pub fn pooled_confusion(&self) -> Option<ConfusionMatrix> {
        let mut it = self.folds.iter();
        let mut cm = it.next()?.confusion.clone();
        for f in it {
            cm.merge(&f.confusion).ok()?;
        }
        Some(cm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub folds: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Images per frozen forward pass.
    pub batch: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 4,
            steps: 300,
            lr: 0.05,
            weight_decay: 0.01,
            seed: 7,
            batch: 64,
        }
    }
}

fn standardise(features: &Tensor, train: &[usize]) -> Tensor {
    let d = features.shape()[1];
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for &i in train {
        for ((s, v), m) in std.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let std: Vec<f64> = std.iter().map(|s| s.sqrt().max(1e-8)).collect();
    let data = features
        .data()
        .chunks(d)
        .flat_map(|row| {
            row.iter()
                .zip(&mean)
                .zip(&std)
                .map(|((v, m), s)| (v - m) / s)
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(features.shape().to_vec(), data).expect("same shape")
}

/// Trains an affine classifier on fixed features with full-batch AdamW and
/// scores it on the validation rows.
pub fn fit_linear_head(
    features: &Tensor,
    labels: &[usize],
    n_classes: usize,
    train: &[usize],
    val: &[usize],
    cfg: &ProbeConfig,
) -> Result<ConfusionMatrix> {
    let x = standardise(features, train);
    let d = x.shape()[1];
    let x_train = x.select_rows(train);
    let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let mut head = Classifier::zeros("probe", d, n_classes);
    let mut opt = OptimState::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let names = [head.weight.name.clone(), head.bias.name.clone()];
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let xv = tape.constant(x_train.clone());
        let logits = head.forward(&mut tape, xv, Mode::Train)?;
        let loss = cross_entropy(&mut tape, logits, &y_train)?;
        tape.backward(loss)?;
        let grads = collect_grads(&tape, names.iter().map(String::as_str));
        opt.step(
            &mut [ParamGroup::new(cfg.lr, head.params_mut())],
            &grads,
            1.0,
        )?;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.select_rows(val));
    let logits = head.forward(&mut tape, xv, Mode::Frozen)?;
    let preds = argmax_rows(tape.value(logits));
    let truth: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    confusion(&preds, &truth, n_classes)
}

/// Frozen-encoder linear probe with stratified cross-validation. Features
/// are standardised with training-fold statistics before the head is fit.
pub fn linear_probe(
    encoder: &Encoder,
    ds: &LabeledDataset,
    cfg: &ProbeConfig,
) -> Result<CvSummary> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let features = encoder.features(&ds.images(), cfg.batch)?;
    let labels = ds.labels();
    let folds = kfold_split(&labels, ds.n_classes(), cfg.folds, cfg.seed)?;
    let scores = folds
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let cm = fit_linear_head(&features, &labels, ds.n_classes(), &f.train, &f.val, cfg)?;
            FoldScore::from_confusion(i, cm)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvSummary::new(scores))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub maps: Vec<ChaoticMapSpec>,
    pub epochs: Vec<usize>,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    /// Worker threads for grid cells.
    pub jobs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            maps: MapKind::ALL
                .iter()
                .map(|&k| ChaoticMapSpec::with_default(k))
                .collect(),
            epochs: vec![15, 30],
            pretrain: PretrainConfig::default(),
            probe: ProbeConfig::default(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub map: ChaoticMapSpec,
    pub epochs: usize,
    pub seed: u64,
    pub summary: CvSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
    pub baseline: CvSummary,
}

impl AblationTable {
    /// Grid laid out as map rows by epoch setting, baseline last.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("map,param,epochs,mean_accuracy,std_accuracy,mean_f1,std_f1\n");
        for c in &self.cells {
            let s = &c.summary;
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.4},{:.4},{:.4}",
                c.map.kind(),
                c.map.param(),
                c.epochs,
                s.mean_accuracy,
                s.std_accuracy,
                s.mean_f1,
                s.std_f1
            );
        }
        let b = &self.baseline;
        let _ = writeln!(
            out,
            "random,,0,{:.4},{:.4},{:.4},{:.4}",
            b.mean_accuracy, b.std_accuracy, b.mean_f1, b.std_f1
        );
        out
    }

    /// Map kind with the best mean accuracy at each epoch setting.
    pub fn best_by_epochs(&self) -> Vec<(usize, MapKind, f64)> {
        let mut epochs: Vec<usize> = Vec::new();
        for c in &self.cells {
            if !epochs.contains(&c.epochs) {
                epochs.push(c.epochs);
            }
        }
        epochs
            .into_iter()
            .filter_map(|e| {
                self.cells
                    .iter()
                    .filter(|c| c.epochs == e)
                    .max_by(|a, b| a.summary.mean_accuracy.total_cmp(&b.summary.mean_accuracy))
                    .map(|c| (e, c.map.kind(), c.summary.mean_accuracy))
            })
            .collect()
    }
}

/// Runs `f` over `items` on up to `jobs` scoped threads, keeping input order.
pub fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> U + Sync,
) -> Vec<U> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Pretrain-then-probe for every (map, epochs) cell plus a random-encoder
/// baseline. Cell `i` pretrains with seed `derive_seed(seed, "ablate", i)`;
/// the baseline probes the encoder initialisation of the base seed.
pub fn ablate_maps(ds: &LabeledDataset, cfg: &AblationConfig) -> Result<AblationTable> {
    let grid: Vec<(usize, ChaoticMapSpec, usize)> = cfg
        .maps
        .iter()
        .flat_map(|m| cfg.epochs.iter().map(move |&e| (*m, e)))
        .enumerate()
        .map(|(i, (m, e))| (i, m, e))
        .collect();
    let cells = parallel_map(&grid, cfg.jobs, |&(i, map, epochs)| {
        let seed = rng::derive_seed(cfg.pretrain.seed, "ablate", i as u64);
        let mut pc = cfg.pretrain.clone();
        pc.augment.map = map;
        pc.epochs = epochs;
        pc.seed = seed;
        let out = pretrain(ds, &pc)?;
        let summary = linear_probe(&out.encoder, ds, &cfg.probe)?;
        Ok(AblationCell {
            map,
            epochs,
            seed,
            summary,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let random = pretrain_init_encoder(ds, &cfg.pretrain)?;
    let baseline = linear_probe(&random, ds, &cfg.probe)?;
    Ok(AblationTable { cells, baseline })
}

/// Parameter count of a slice of parameters.
pub fn n_parameters(params: &[Param]) -> usize {
    params.iter().map(|p| p.value.numel()).sum()
}
