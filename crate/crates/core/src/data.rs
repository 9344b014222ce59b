//! Labelled datasets: a procedural texture corpus, image-folder loading and
//! stratified k-fold splits.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::imaging::{read_image, write_image, Image};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    items: Vec<(Image, usize)>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(items: Vec<(Image, usize)>, class_names: Vec<String>) -> Result<Self> {
        let n = class_names.len();
        let mut counts = vec![0usize; n];
        for (_, label) in &items {
            if *label >= n {
                return Err(Error::IdOutOfRange {
                    id: *label,
                    n_classes: n,
                });
            }
            counts[*label] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(Error::InvalidParam(format!(
                "class {c} ({}) has no items",
                class_names[c]
            )));
        }
        Ok(Self { items, class_names })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn items(&self) -> &[(Image, usize)] {
        &self.items
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.items[i].0
    }

    pub fn label(&self, i: usize) -> usize {
        self.items[i].1
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|(_, l)| *l).collect()
    }

    pub fn images(&self) -> Vec<&Image> {
        self.items.iter().map(|(img, _)| img).collect()
    }

    /// Smallest height/width over all images.
    pub fn min_side(&self) -> usize {
        self.items
            .iter()
            .map(|(img, _)| img.height().min(img.width()))
            .min()
            .unwrap_or(0)
    }

    /// Writes `<dir>/<class>/<index>.png` plus `manifest.csv` (path, label).
    pub fn write_folder(&self, dir: &Path) -> Result<()> {
        let mut manifest = String::from("path,label\n");
        for name in &self.class_names {
            let sub = dir.join(name);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        for (i, (img, label)) in self.items.iter().enumerate() {
            let rel = format!("{}/{i:05}.png", self.class_names[*label]);
            write_image(&dir.join(&rel), img)?;
            let _ = writeln!(manifest, "{rel},{label}");
        }
        let path = dir.join("manifest.csv");
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }
}

/// Procedural texture family of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TextureFamily {
    /// Sinusoidal grating; orientation in radians, frequency in cycles/pixel.
    Grating { orientation: f64, frequency: f64 },
    /// Checkerboard with square side `period` pixels.
    Checkerboard { period: f64 },
    /// Isotropic noise with power spectrum `1 / f^exponent`.
    FilteredNoise { exponent: f64 },
}

impl TextureFamily {
    pub fn name(&self) -> &'static str {
        match self {
            TextureFamily::Grating { .. } => "grating",
            TextureFamily::Checkerboard { .. } => "checker",
            TextureFamily::FilteredNoise { .. } => "noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Per-sample orientation jitter (radians, half-width).
    pub orientation_jitter: f64,
    /// Per-sample relative frequency/period jitter (half-width).
    pub scale_jitter: f64,
    /// Per-sample contrast range.
    pub contrast: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 5,
            n_per_class: 40,
            size: 32,
            seed: 7,
            orientation_jitter: 0.2,
            scale_jitter: 0.1,
            contrast: (0.5, 1.0),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidParam(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.size < 16 {
            return Err(Error::InvalidParam(format!(
                "texture size must be at least 16, got {}",
                self.size
            )));
        }
        if self.n_per_class == 0 {
            return Err(Error::InvalidParam("n_per_class must be positive".into()));
        }
        let (lo, hi) = self.contrast;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "contrast range {lo}..{hi} invalid"
            )));
        }
        Ok(())
    }

    /// Classes cycle through grating, checkerboard and noise; the cycle
    /// index selects the orientation/frequency band, period or exponent.
    pub fn class_family(&self, class: usize) -> TextureFamily {
        let variant = (class / 3) as f64;
        match class % 3 {
            0 => TextureFamily::Grating {
                orientation: (0.25 + 0.5 * variant) * PI % PI,
                frequency: 0.09 + 0.08 * variant,
            },
            1 => TextureFamily::Checkerboard {
                period: 3.0 + 3.0 * variant,
            },
            _ => TextureFamily::FilteredNoise {
                exponent: 1.0 + 1.5 * variant,
            },
        }
    }

    pub fn class_name(&self, class: usize) -> String {
        format!("c{class:02}_{}", self.class_family(class).name())
    }
}

fn grating<R: Rng + ?Sized>(
    size: usize,
    theta: f64,
    freq: f64,
    contrast: f64,
    rng: &mut R,
) -> Vec<f64> {
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (s, c) = theta.sin_cos();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 * c + y as f64 * s;
            out.push(0.5 + 0.5 * contrast * (2.0 * PI * freq * u + phase).sin());
        }
    }
    out
}

fn checkerboard<R: Rng + ?Sized>(
    size: usize,
    period: f64,
    theta: f64,
    contrast: f64,
    rng: &mut R,
) -> Vec<f64> {
    let (ox, oy) = (
        rng.gen_range(0.0..2.0 * period),
        rng.gen_range(0.0..2.0 * period),
    );
    let (s, c) = theta.sin_cos();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 * c + y as f64 * s + ox;
            let v = -(x as f64) * s + y as f64 * c + oy;
            let cell = (u / period).floor() as i64 + (v / period).floor() as i64;
            let sign = if cell.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
            out.push(0.5 + 0.5 * contrast * sign);
        }
    }
    out
}

fn filtered_noise<R: Rng + ?Sized>(
    size: usize,
    exponent: f64,
    contrast: f64,
    rng: &mut R,
) -> Vec<f64> {
    let n = size;
    let mut buf: Vec<Complex<f64>> = (0..n * n)
        .map(|_| Complex::new(rng.gen_range(-1.0..1.0), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    fft2(&mut buf, n, fwd.as_ref());
    for ky in 0..n {
        for kx in 0..n {
            let fy = ky.min(n - ky) as f64;
            let fx = kx.min(n - kx) as f64;
            let f = (fx * fx + fy * fy).sqrt();
            let gain = if f == 0.0 {
                0.0
            } else {
                f.powf(-exponent / 2.0)
            };
            buf[ky * n + kx] *= gain;
        }
    }
    fft2(&mut buf, n, inv.as_ref());
    let re: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = re.iter().sum::<f64>() / re.len() as f64;
    let std = (re.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / re.len() as f64).sqrt();
    let std = if std > 0.0 { std } else { 1.0 };
    re.iter()
        .map(|v| (0.5 + 0.2 * contrast * (v - mean) / std).clamp(0.0, 1.0))
        .collect()
}

fn fft2(buf: &mut [Complex<f64>], n: usize, fft: &dyn rustfft::Fft<f64>) {
    for row in buf.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = buf[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            buf[y * n + x] = col[y];
        }
    }
}

/// Deterministic single-channel texture corpus; item order is class-major.
pub fn gen_synthetic_textures(spec: &SynthSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut items = Vec::with_capacity(spec.n_classes * spec.n_per_class);
    for class in 0..spec.n_classes {
        let family = spec.class_family(class);
        for i in 0..spec.n_per_class {
            let mut r = rng::stream(spec.seed, "synth", (class * spec.n_per_class + i) as u64);
            let contrast = r.gen_range(spec.contrast.0..=spec.contrast.1);
            let tilt = r.gen_range(-spec.orientation_jitter..=spec.orientation_jitter);
            let scale = 1.0 + r.gen_range(-spec.scale_jitter..=spec.scale_jitter);
            let data = match family {
                TextureFamily::Grating {
                    orientation,
                    frequency,
                } => grating(
                    spec.size,
                    orientation + tilt,
                    frequency * scale,
                    contrast,
                    &mut r,
                ),
                TextureFamily::Checkerboard { period } => {
                    checkerboard(spec.size, period * scale, tilt, contrast, &mut r)
                }
                TextureFamily::FilteredNoise { exponent } => {
                    filtered_noise(spec.size, exponent, contrast, &mut r)
                }
            };
            items.push((Image::new(spec.size, spec.size, 1, data)?, class));
        }
    }
    let names = (0..spec.n_classes).map(|c| spec.class_name(c)).collect();
    LabeledDataset::new(items, names)
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// One subdirectory per class, ids assigned in sorted name order. Files
/// other than PNG/PPM/PGM are ignored.
pub fn load_image_folder(path: &Path) -> Result<LabeledDataset> {
    let mut names = Vec::new();
    let mut items = Vec::new();
    for sub in sorted_entries(path)?.into_iter().filter(|p| p.is_dir()) {
        let label = names.len();
        let files: Vec<_> = sorted_entries(&sub)?
            .into_iter()
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        if files.is_empty() {
            return Err(Error::EmptyClass(sub));
        }
        for f in files {
            items.push((read_image(&f)?, label));
        }
        names.push(
            sub.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    LabeledDataset::new(items, names)
}

/// Indices of one cross-validation fold, each list sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified k-fold partition of `labels`.
///
/// Each class is shuffled with its own seeded stream and dealt round-robin
/// into folds, continuing the deal where the previous class stopped, so
/// per-class fold counts differ by at most one and fold sizes differ by at
/// most one.
pub fn kfold_split(labels: &[usize], n_classes: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidParam(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::IdOutOfRange { id: l, n_classes });
        }
        by_class[l].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::ClassTooSmall {
                class,
                count: members.len(),
                folds: k,
            });
        }
    }
    let mut val = vec![Vec::new(); k];
    let mut cursor = 0usize;
    for (class, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng::stream(seed, "kfold", class as u64));
        for &i in members.iter() {
            val[cursor % k].push(i);
            cursor += 1;
        }
    }
    Ok(val
        .into_iter()
        .map(|mut v| {
            v.sort_unstable();
            let mut in_val = vec![false; labels.len()];
            v.iter().for_each(|&i| in_val[i] = true);
            let train = (0..labels.len()).filter(|&i| !in_val[i]).collect();
            Fold { train, val: v }
        })
        .collect())
}
