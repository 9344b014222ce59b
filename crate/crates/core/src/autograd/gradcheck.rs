use rand::Rng;

use super::{Param, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Compares the tape gradient of a scalar function with central differences
/// and returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape.grad(xv).expect("leaf grad after backward");

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(tape.shape(out).to_vec()))
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// [`grad_check`] with respect to model parameters: `f` builds the scalar
/// from a model whose parameters are bound with [`Tape::param`], and
/// `params` lists the parameters to probe.
pub fn grad_check_params<M, P, F>(model: &M, params: P, f: F, eps: f64) -> Result<f64>
where
    M: Clone,
    P: Fn(&mut M) -> Vec<&mut Param>,
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(model, &mut tape)?;
    tape.backward(out)?;
    let mut probe = model.clone();
    let specs: Vec<(String, usize)> = params(&mut probe)
        .iter()
        .map(|p| (p.name.clone(), p.value.numel()))
        .collect();

    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(m, &mut tape)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(tape.shape(out).to_vec()))
    };

    let mut worst = 0.0f64;
    for (k, (name, numel)) in specs.iter().enumerate() {
        let analytic = tape
            .param_grad(name)
            .unwrap_or_else(|| Tensor::zeros([*numel]));
        for i in 0..*numel {
            let orig = params(&mut probe)[k].value.data()[i];
            params(&mut probe)[k].value.data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            params(&mut probe)[k].value.data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            params(&mut probe)[k].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Uniform entries kept at least `gap` away from zero, so relu kinks are
/// not straddled by a finite-difference probe.
pub fn offset_uniform<R: Rng + ?Sized>(shape: &[usize], gap: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::uniform(shape.to_vec(), 1.0, rng);
    for v in t.data_mut() {
        let mag = gap + v.abs();
        *v = if *v < 0.0 { -mag } else { mag };
    }
    t
}

type Check = (
    &'static str,
    Box<dyn Fn(&mut Tape, Var) -> Result<Var>>,
    Tensor,
);

/// Gradient check of every primitive. Each primitive is reduced to a scalar
/// through a fixed random weighting so that all output coordinates matter.
pub fn primitive_suite(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = rng::stream(seed, "gradcheck", 0);
    let mut weighted = |shape: &[usize]| Tensor::uniform(shape.to_vec(), 1.0, &mut rng);

    fn reduce(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
        let wv = tape.constant(w.clone());
        let p = tape.mul(y, wv)?;
        Ok(tape.sum(p))
    }

    let mut checks: Vec<Check> = Vec::new();
    let mut r = rng::stream(seed, "gradcheck", 1);

    let b = Tensor::uniform(vec![4, 3], 1.0, &mut r);
    let w = weighted(&[3, 3]);
    checks.push((
        "matmul",
        Box::new(move |t, x| {
            let bv = t.constant(b.clone());
            let y = t.matmul(x, bv)?;
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![3, 4], 1.0, &mut r),
    ));

    let a = Tensor::uniform(vec![2, 3], 1.0, &mut r);
    let w = weighted(&[2, 4]);
    checks.push((
        "matmul_rhs",
        Box::new(move |t, x| {
            let av = t.constant(a.clone());
            let y = t.matmul(av, x)?;
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![3, 4], 1.0, &mut r),
    ));

    let wconv = Tensor::uniform(vec![3, 2, 3, 3], 0.5, &mut r);
    let bconv = Tensor::uniform(vec![3], 0.5, &mut r);
    let w = weighted(&[2, 3, 3, 3]);
    checks.push((
        "conv2d",
        Box::new(move |t, x| {
            let wv = t.constant(wconv.clone());
            let bv = t.constant(bconv.clone());
            let y = t.conv2d(x, wv, Some(bv), 2, 1)?;
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![2, 2, 5, 5], 1.0, &mut r),
    ));

    let xconv = Tensor::uniform(vec![2, 2, 5, 5], 1.0, &mut r);
    let w = weighted(&[2, 3, 5, 5]);
    checks.push((
        "conv2d_weight",
        Box::new(move |t, wk| {
            let xv = t.constant(xconv.clone());
            let y = t.conv2d(xv, wk, None, 1, 1)?;
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![3, 2, 3, 3], 0.5, &mut r),
    ));

    let xconv = Tensor::uniform(vec![2, 2, 4, 4], 1.0, &mut r);
    let wconv = Tensor::uniform(vec![3, 2, 3, 3], 0.5, &mut r);
    let w = weighted(&[2, 3, 2, 2]);
    checks.push((
        "conv2d_bias",
        Box::new(move |t, bias| {
            let xv = t.constant(xconv.clone());
            let wv = t.constant(wconv.clone());
            let y = t.conv2d(xv, wv, Some(bias), 1, 0)?;
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![3], 0.5, &mut r),
    ));

    let other = Tensor::uniform(vec![3, 4], 1.0, &mut r);
    let w = weighted(&[3, 4]);
    checks.push((
        "add",
        Box::new(move |t, x| {
            let o = t.constant(other.clone());
            let y = t.add(x, o)?;
            let y = t.mul(y, y)?;
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![3, 4], 1.0, &mut r),
    ));

    let other = Tensor::uniform(vec![3, 4], 1.0, &mut r);
    let w = weighted(&[3, 4]);
    checks.push((
        "mul",
        Box::new(move |t, x| {
            let o = t.constant(other.clone());
            let y = t.mul(x, o)?;
            let y = t.mul(y, x)?;
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![3, 4], 1.0, &mut r),
    ));

    let bias = Tensor::uniform(vec![4], 1.0, &mut r);
    let w = weighted(&[3, 4]);
    checks.push((
        "add_bias",
        Box::new(move |t, x| {
            let bv = t.leaf(bias.clone(), false);
            let y = t.add_bias(x, bv)?;
            let y = t.sub(y, x)?;
            let y = t.mul(y, x)?;
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![3, 4], 1.0, &mut r),
    ));

    let w = weighted(&[3, 4]);
    checks.push((
        "relu",
        Box::new(move |t, x| {
            let y = t.relu(x);
            let y = t.mul(y, y)?;
            reduce(t, y, &w)
        }),
        offset_uniform(&[3, 4], 0.05, &mut r),
    ));

    let w = weighted(&[3, 4]);
    checks.push((
        "sigmoid",
        Box::new(move |t, x| {
            let y = t.sigmoid(x);
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![3, 4], 3.0, &mut r),
    ));

    let w = weighted(&[2, 3]);
    checks.push((
        "mean_pool_spatial",
        Box::new(move |t, x| {
            let y = t.mean_pool_spatial(x)?;
            let y = t.mul(y, y)?;
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![2, 3, 4, 3], 1.0, &mut r),
    ));

    let w = weighted(&[4, 5]);
    checks.push((
        "l2_normalize",
        Box::new(move |t, x| {
            let y = t.l2_normalize(x)?;
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![4, 5], 1.0, &mut r),
    ));

    let other = Tensor::uniform(vec![3, 2], 1.0, &mut r);
    let w = weighted(&[3, 6]);
    checks.push((
        "concat",
        Box::new(move |t, x| {
            let o = t.constant(other.clone());
            let y = t.concat(o, x)?;
            let y = t.mul(y, y)?;
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![3, 4], 1.0, &mut r),
    ));

    let w = weighted(&[3, 4]);
    checks.push((
        "scalar_ops",
        Box::new(move |t, x| {
            let y = t.scale(x, -1.7);
            let y = t.add_scalar(y, 0.3);
            let y = t.mul(y, y)?;
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![3, 4], 1.0, &mut r),
    ));

    checks.push((
        "transpose_mean",
        Box::new(move |t, x| {
            let xt = t.transpose(x)?;
            let y = t.matmul(x, xt)?;
            Ok(t.mean(y))
        }),
        Tensor::uniform(vec![3, 4], 1.0, &mut r),
    ));

    let w = weighted(&[4]);
    checks.push((
        "log_sum_exp",
        Box::new(move |t, x| {
            let y = t.log_sum_exp(x)?;
            reduce(t, y, &w)
        }),
        Tensor::uniform(vec![4, 5], 3.0, &mut r),
    ));

    checks.push((
        "gather",
        Box::new(move |t, x| {
            let y = t.gather(x, &[2, 0, 4, 1])?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        }),
        Tensor::uniform(vec![4, 5], 1.0, &mut r),
    ));

    checks
        .into_iter()
        .map(|(name, f, x)| Ok((name, grad_check(f, &x, eps)?)))
        .collect()
}
