use std::collections::BTreeMap;

use crate::autograd::{Param, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Parameters sharing one base learning rate.
pub struct ParamGroup<'a> {
    pub lr: f64,
    pub params: Vec<&'a mut Param>,
}

impl<'a> ParamGroup<'a> {
    pub fn new(lr: f64, params: impl IntoIterator<Item = &'a mut Param>) -> Self {
        Self {
            lr,
            params: params.into_iter().collect(),
        }
    }
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

/// Collects the gradients of `names` from a tape after `backward`.
pub fn collect_grads<'a>(tape: &Tape, names: impl IntoIterator<Item = &'a str>) -> Grads {
    names
        .into_iter()
        .filter_map(|n| tape.param_grad(n).map(|g| (n.to_string(), g)))
        .collect()
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// Each call to [`OptimState::step`] advances the shared step counter once.
/// The effective rate of a group is `group.lr * lr_scale`; decay is applied
/// to the weights as `w -= rate * weight_decay * w`, outside the moments.
#[derive(Debug, Clone)]
pub struct OptimState {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Parameters missing from `grads` are treated as having zero gradient.
    pub fn step(
        &mut self,
        groups: &mut [ParamGroup<'_>],
        grads: &Grads,
        lr_scale: f64,
    ) -> Result<()> {
        for group in groups.iter() {
            for p in &group.params {
                if let Some(g) = grads.get(&p.name) {
                    if g.shape() != p.value.shape() {
                        return Err(Error::Shape {
                            op: "adamw",
                            lhs: p.value.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                }
                if let Some(m) = self.moments.get(&p.name) {
                    if m.first.len() != p.value.numel() {
                        return Err(Error::Shape {
                            op: "adamw",
                            lhs: p.value.shape().to_vec(),
                            rhs: vec![m.first.len()],
                        });
                    }
                }
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for group in groups.iter_mut() {
            let rate = group.lr * lr_scale;
            for p in group.params.iter_mut() {
                let n = p.value.numel();
                let m = self
                    .moments
                    .entry(p.name.clone())
                    .or_insert_with(|| Moments {
                        first: vec![0.0; n],
                        second: vec![0.0; n],
                    });
                let grad = grads.get(&p.name);
                for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                    let g = grad.map_or(0.0, |g| g.data()[i]);
                    m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
                    m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                    let m_hat = m.first[i] / bc1;
                    let v_hat = m.second[i] / bc2;
                    *w -= rate * weight_decay * *w;
                    *w -= rate * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Cosine annealing without warm-up or restarts:
/// `base_lr * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidParam(format!(
            "schedule step {step} beyond total {total_steps}"
        )));
    }
    if step == 0 {
        return Ok(base_lr);
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, v: &[f64]) -> Param {
        Param::new(name, Tensor::new([v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn zero_gradient_pure_decay() {
        let mut p = param("w", &[2.0, -4.0]);
        let mut st = OptimState::new(AdamWConfig::default());
        let grads = Grads::from([("w".to_string(), Tensor::zeros([2]))]);
        let lr = 0.1;
        for step in 1..=3 {
            st.step(&mut [ParamGroup::new(lr, [&mut p])], &grads, 1.0)
                .unwrap();
            let f = (1.0f64 - lr * 0.01).powi(step);
            assert!((p.value.data()[0] - 2.0 * f).abs() < 1e-15);
            assert!((p.value.data()[1] + 4.0 * f).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = param("w", &[0.0, 0.0]);
        let mut st = OptimState::new(cfg);
        let grads = Grads::from([("w".to_string(), Tensor::new([2], vec![3.0, -0.2]).unwrap())]);
        let lr = 1e-3;
        let mut prev = p.value.clone();
        for _ in 0..200 {
            st.step(&mut [ParamGroup::new(lr, [&mut p])], &grads, 1.0)
                .unwrap();
            let d0 = p.value.data()[0] - prev.data()[0];
            let d1 = p.value.data()[1] - prev.data()[1];
            assert!(d0 < 0.0 && d1 > 0.0);
            assert!((d0.abs() - lr).abs() < 1e-8 && (d1.abs() - lr).abs() < 1e-6);
            prev = p.value.clone();
        }
    }

    #[test]
    fn zero_scale_no_decay_is_noop() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = param("w", &[1.5, -0.25, 7.0]);
        let before = p.clone();
        let mut st = OptimState::new(cfg);
        let grads = Grads::from([(
            "w".to_string(),
            Tensor::new([3], vec![1.0, 2.0, -3.0]).unwrap(),
        )]);
        for _ in 0..4 {
            st.step(&mut [ParamGroup::new(0.1, [&mut p])], &grads, 0.0)
                .unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.steps(), 4);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = param("w", &[1.0, 2.0]);
        let mut st = OptimState::new(AdamWConfig::default());
        let grads = Grads::from([("w".to_string(), Tensor::zeros([3]))]);
        assert!(matches!(
            st.step(&mut [ParamGroup::new(0.1, [&mut p])], &grads, 1.0),
            Err(Error::Shape { op: "adamw", .. })
        ));
        assert_eq!(st.steps(), 0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.3).unwrap(), 0.3);
        assert_eq!(cosine_lr(100, 100, 0.3).unwrap(), 0.0);
        assert!((cosine_lr(50, 100, 0.3).unwrap() - 0.15).abs() < 1e-16);
        assert!(cosine_lr(101, 100, 0.3).is_err());
        assert_eq!(cosine_lr(0, 0, 0.3).unwrap(), 0.3);
    }
}
