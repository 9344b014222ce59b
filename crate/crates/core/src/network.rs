//! Desk-scale encoder, projector, SE fusion and classifier head.
//!
//! Every layer owns named [`Param`]s (`<prefix>.<layer>.<tensor>`) and binds
//! them onto a caller-supplied [`Tape`] during `forward`. [`Mode::Frozen`]
//! binds parameters as constants, which is how encoders are used for feature
//! extraction.

use rand::Rng;

use crate::autograd::{Checkpoint, Param, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Frozen,
}

fn bind(tape: &mut Tape, p: &Param, mode: Mode) -> Var {
    match mode {
        Mode::Train => tape.param(p),
        Mode::Frozen => tape.frozen(p),
    }
}

fn he_uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

fn lecun_uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, (3.0 / fan_in as f64).sqrt(), rng)
}

/// Stacks equally sized images into an `N x C x H x W` tensor.
pub fn image_batch(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels(), img.height(), img.width()) != (c, h, w) {
            return Err(Error::Shape {
                op: "image_batch",
                lhs: vec![c, h, w],
                rhs: vec![img.channels(), img.height(), img.width()],
            });
        }
        data.extend(img.to_chw());
    }
    Tensor::new([images.len(), c, h, w], data)
}

/// Convolution stage layout of an encoder. Every stage is a `kernel x
/// kernel` convolution with `kernel / 2` zero padding, bias and ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl EncoderConfig {
    /// Supervised branch: three stages of widths 16/32/64.
    pub fn supervised(in_channels: usize) -> Self {
        Self {
            in_channels,
            widths: vec![16, 32, 64],
            strides: vec![2, 2, 2],
            kernel: 3,
        }
    }

    /// Chaos-pretrained branch: two stages of widths 8/16.
    pub fn chaos(in_channels: usize) -> Self {
        Self {
            in_channels,
            widths: vec![8, 16],
            strides: vec![1, 2],
            kernel: 3,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::InvalidParam(format!(
                "encoder needs one stride per stage, got widths {:?} strides {:?}",
                self.widths, self.strides
            )));
        }
        if self.in_channels == 0
            || self.kernel == 0
            || self.widths.contains(&0)
            || self.strides.contains(&0)
        {
            return Err(Error::InvalidParam("encoder sizes must be positive".into()));
        }
        Ok(())
    }

    /// Smallest square input the stages accept.
    pub fn min_input(&self) -> usize {
        // With kernel/2 padding every stage accepts any input >= 1 when the
        // kernel is odd; even kernels shrink by one per stage.
        1 + self.widths.len() * usize::from(self.kernel.is_multiple_of(2))
    }

    pub fn to_meta(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "in_channels={};widths={};strides={};kernel={}",
            self.in_channels,
            join(&self.widths),
            join(&self.strides),
            self.kernel
        )
    }

    pub fn from_meta(text: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("malformed encoder metadata '{text}'"));
        let mut cfg = EncoderConfig {
            in_channels: 0,
            widths: vec![],
            strides: vec![],
            kernel: 0,
        };
        for field in text.split(';') {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            let list = || {
                v.split(',')
                    .map(|x| x.parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()
            };
            match k {
                "in_channels" => cfg.in_channels = v.parse().map_err(|_| bad())?,
                "widths" => cfg.widths = list()?,
                "strides" => cfg.strides = list()?,
                "kernel" => cfg.kernel = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        cfg.validate().map_err(|_| bad())?;
        Ok(cfg)
    }
}

/// Convolutional feature extractor followed by global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    prefix: String,
    config: EncoderConfig,
    params: Vec<Param>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(prefix: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut cin = config.in_channels;
        for (i, &cout) in config.widths.iter().enumerate() {
            let k = config.kernel;
            params.push(Param::new(
                format!("{prefix}.conv{i}.weight"),
                he_uniform(vec![cout, cin, k, k], cin * k * k, rng),
            ));
            params.push(Param::new(
                format!("{prefix}.conv{i}.bias"),
                Tensor::zeros([cout]),
            ));
            cin = cout;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            config,
            params,
        })
    }

    /// Encoder with explicit `(weight, bias)` pairs per stage.
    pub fn from_tensors(
        prefix: &str,
        config: EncoderConfig,
        stages: Vec<(Tensor, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        if stages.len() != config.widths.len() {
            return Err(Error::InvalidParam(format!(
                "{} stage tensors for {} stages",
                stages.len(),
                config.widths.len()
            )));
        }
        let mut params = Vec::new();
        let mut cin = config.in_channels;
        for (i, (w, b)) in stages.into_iter().enumerate() {
            let k = config.kernel;
            let cout = config.widths[i];
            let want_w = vec![cout, cin, k, k];
            if w.shape() != want_w.as_slice() || b.shape() != [cout] {
                return Err(Error::CheckpointMismatch {
                    name: format!("{prefix}.conv{i}"),
                    expected: want_w,
                    found: w.shape().to_vec(),
                });
            }
            params.push(Param::new(format!("{prefix}.conv{i}.weight"), w));
            params.push(Param::new(format!("{prefix}.conv{i}.bias"), b));
            cin = cout;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            config,
            params,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// `N x C x H x W -> N x D_f`.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Shape {
                op: "encoder",
                lhs: shape,
                rhs: vec![self.config.in_channels],
            });
        }
        let pad = self.config.kernel / 2;
        let mut h = x;
        for (i, pair) in self.params.chunks(2).enumerate() {
            let w = bind(tape, &pair[0], mode);
            let b = bind(tape, &pair[1], mode);
            h = tape.conv2d(h, w, Some(b), self.config.strides[i], pad)?;
            h = tape.relu(h);
        }
        tape.mean_pool_spatial(h)
    }

    /// Pooled features for a list of images, in batches of `batch`.
    pub fn features(&self, images: &[&Image], batch: usize) -> Result<Tensor> {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(images.len() * d);
        for chunk in images.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let x = tape.constant(image_batch(chunk)?);
            let f = self.forward(&mut tape, x, Mode::Frozen)?;
            data.extend_from_slice(tape.value(f).data());
        }
        Tensor::new([images.len(), d], data)
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.push_meta(&format!("{}.arch", self.prefix), &self.config.to_meta())?;
        for p in &self.params {
            ck.push_tensor(&p.name, &p.value)?;
        }
        Ok(())
    }

    /// Restores an encoder; when `expected` is given the stored architecture
    /// must match it.
    pub fn from_checkpoint(
        ck: &Checkpoint,
        prefix: &str,
        expected: Option<&EncoderConfig>,
    ) -> Result<Self> {
        let config = EncoderConfig::from_meta(&ck.meta(&format!("{prefix}.arch"))?)?;
        if let Some(want) = expected {
            if want.widths != config.widths || want.in_channels != config.in_channels {
                let mut e = vec![want.in_channels];
                e.extend(&want.widths);
                let mut f = vec![config.in_channels];
                f.extend(&config.widths);
                return Err(Error::CheckpointMismatch {
                    name: format!("{prefix} (in_channels, widths...)"),
                    expected: e,
                    found: f,
                });
            }
        }
        let stages = (0..config.widths.len())
            .map(|i| {
                Ok((
                    ck.tensor(&format!("{prefix}.conv{i}.weight"))?,
                    ck.tensor(&format!("{prefix}.conv{i}.bias"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(prefix, config, stages)
    }
}

/// Affine map `x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(
                format!("{prefix}.weight"),
                lecun_uniform(vec![d_in, d_out], d_in, rng),
            ),
            bias: Param::new(format!("{prefix}.bias"), Tensor::zeros([d_out])),
        }
    }

    /// All-zero layer; as a classifier head it starts from uniform
    /// probabilities.
    pub fn zeros(prefix: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Param::new(format!("{prefix}.weight"), Tensor::zeros([d_in, d_out])),
            bias: Param::new(format!("{prefix}.bias"), Tensor::zeros([d_out])),
        }
    }

    pub fn from_tensors(prefix: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        let ok = weight.rank() == 2 && bias.shape() == [weight.shape()[1]];
        if !ok {
            return Err(Error::Shape {
                op: "linear",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            weight: Param::new(format!("{prefix}.weight"), weight),
            bias: Param::new(format!("{prefix}.bias"), bias),
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let w = bind(tape, &self.weight, mode);
        let b = bind(tape, &self.bias, mode);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Two-layer head `D_f -> D_h -> D_z` with ReLU between; its output is not
/// normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub hidden: Linear,
    pub out: Linear,
}

impl Projector {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        d_f: usize,
        d_h: usize,
        d_z: usize,
        rng: &mut R,
    ) -> Self {
        let mut hidden = Linear::new(&format!("{prefix}.hidden"), d_f, d_h, rng);
        hidden.weight.value = he_uniform(vec![d_f, d_h], d_f, rng);
        Self {
            hidden,
            out: Linear::new(&format!("{prefix}.out"), d_h, d_z, rng),
        }
    }

    /// `N x D_f -> N x D_z`.
    pub fn forward(&self, tape: &mut Tape, feat: Var, mode: Mode) -> Result<Var> {
        let h = self.hidden.forward(tape, feat, mode)?;
        let h = tape.relu(h);
        self.out.forward(tape, h, mode)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let [a, b] = self.hidden.params_mut();
        let [c, d] = self.out.params_mut();
        vec![a, b, c, d]
    }
}

/// Squeeze-and-excitation gate over a concatenated feature vector:
/// `s = sigmoid(W2 relu(W1 U))`, output `s * U`. No bias terms.
#[derive(Debug, Clone, PartialEq)]
pub struct SeFusion {
    /// `(D / r) x D`
    pub w1: Param,
    /// `D x (D / r)`
    pub w2: Param,
    ratio: usize,
}

/// Reduced width `floor(D / r)`, at least 1.
pub fn se_hidden_width(d: usize, ratio: usize) -> Result<usize> {
    if ratio == 0 || d / ratio < 1 {
        return Err(Error::InvalidParam(format!(
            "SE reduction ratio {ratio} leaves no hidden units for width {d}"
        )));
    }
    Ok(d / ratio)
}

impl SeFusion {
    pub fn new<R: Rng + ?Sized>(prefix: &str, d: usize, ratio: usize, rng: &mut R) -> Result<Self> {
        let dr = se_hidden_width(d, ratio)?;
        Ok(Self {
            w1: Param::new(format!("{prefix}.w1"), lecun_uniform(vec![dr, d], d, rng)),
            w2: Param::new(format!("{prefix}.w2"), lecun_uniform(vec![d, dr], dr, rng)),
            ratio,
        })
    }

    pub fn from_tensors(prefix: &str, w1: Tensor, w2: Tensor, ratio: usize) -> Result<Self> {
        let (dr, d) = match *w1.shape() {
            [a, b] => (a, b),
            _ => {
                return Err(Error::Shape {
                    op: "se_fuse",
                    lhs: w1.shape().to_vec(),
                    rhs: vec![],
                })
            }
        };
        if w2.shape() != [d, dr] {
            return Err(Error::Shape {
                op: "se_fuse",
                lhs: w1.shape().to_vec(),
                rhs: w2.shape().to_vec(),
            });
        }
        Ok(Self {
            w1: Param::new(format!("{prefix}.w1"), w1),
            w2: Param::new(format!("{prefix}.w2"), w2),
            ratio,
        })
    }

    pub fn width(&self) -> usize {
        self.w1.value.shape()[1]
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    /// Gate vector `s` for `U: N x D`.
    pub fn gates(&self, tape: &mut Tape, u: Var, mode: Mode) -> Result<Var> {
        let w1 = bind(tape, &self.w1, mode);
        let w2 = bind(tape, &self.w2, mode);
        let w1t = tape.transpose(w1)?;
        let w2t = tape.transpose(w2)?;
        let z = tape.matmul(u, w1t)?;
        let z = tape.relu(z);
        let z = tape.matmul(z, w2t)?;
        Ok(tape.sigmoid(z))
    }

    /// `concat(u_sup, u_chaos)` reweighted by its gates.
    pub fn forward(&self, tape: &mut Tape, u_sup: Var, u_chaos: Var, mode: Mode) -> Result<Var> {
        let u = tape.concat(u_sup, u_chaos)?;
        self.reweight(tape, u, mode)
    }

    /// `s * U` for an already assembled `U: N x D`.
    pub fn reweight(&self, tape: &mut Tape, u: Var, mode: Mode) -> Result<Var> {
        if tape.shape(u).len() != 2 || tape.shape(u)[1] != self.width() {
            return Err(Error::Shape {
                op: "se_fuse",
                lhs: tape.shape(u).to_vec(),
                rhs: self.w1.value.shape().to_vec(),
            });
        }
        let s = self.gates(tape, u, mode)?;
        tape.mul(s, u)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.w1, &mut self.w2]
    }
}

/// Single affine classifier head producing logits.
pub type Classifier = Linear;
