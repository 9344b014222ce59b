use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Normalised temperature-scaled cross entropy over `2N` embedding rows.
///
/// Rows `2t` and `2t + 1` are the positive pair of sample `t`. Rows are
/// L2-normalised, similarities divided by `tau`, and the loss is the mean
/// over all `2N` anchors of `logsumexp_{k != i}(sim_ik / tau) - sim_ip / tau`.
pub fn nt_xent(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "temperature {tau} must be positive"
        )));
    }
    let rows = match *tape.shape(z) {
        [r, _] => r,
        _ => {
            return Err(Error::Shape {
                op: "nt_xent",
                lhs: tape.shape(z).to_vec(),
                rhs: vec![],
            })
        }
    };
    if rows < 2 || rows % 2 != 0 {
        return Err(Error::InvalidParam(format!(
            "nt_xent needs an even number of rows (2N, N >= 1), got {rows}"
        )));
    }
    let zn = tape.l2_normalize(z)?;
    let znt = tape.transpose(zn)?;
    let sim = tape.matmul(zn, znt)?;
    let logits = tape.scale(sim, 1.0 / tau);

    let mut mask = Tensor::zeros([rows, rows]);
    for i in 0..rows {
        mask.data_mut()[i * rows + i] = f64::NEG_INFINITY;
    }
    let mask = tape.constant(mask);
    let masked = tape.add(logits, mask)?;
    let lse = tape.log_sum_exp(masked)?;

    let partner: Vec<usize> = (0..rows).map(|i| i ^ 1).collect();
    let positive = tape.gather(logits, &partner)?;
    let per_anchor = tape.sub(lse, positive)?;
    Ok(tape.mean(per_anchor))
}

/// Loss value of [`nt_xent`] for a plain tensor.
pub fn nt_xent_value(z: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let loss = nt_xent(&mut tape, zv, tau)?;
    Ok(tape.value(loss).data()[0])
}

/// Mean softmax cross entropy of `logits: N x K` against class ids.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lse = tape.log_sum_exp(logits)?;
    let picked = tape.gather(logits, labels)?;
    let per_sample = tape.sub(lse, picked)?;
    Ok(tape.mean(per_sample))
}
