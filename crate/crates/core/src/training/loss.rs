use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean over all positions of `-log softmax(logits)[target]`. The last axis
/// of `logits` is the class axis; `targets` has one entry per position.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    Ok(cross_entropy_impl(logits, targets, false)?.0)
}

/// Loss plus its gradient with respect to `logits`.
pub fn cross_entropy_with_grad(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (loss, grad) = cross_entropy_impl(logits, targets, true)?;
    Ok((loss, grad.expect("requested")))
}

fn cross_entropy_impl(logits: &Tensor, targets: &[usize], want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    let classes = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("logits must have a class axis".into()))?;
    let positions = logits.len().checked_div(classes).unwrap_or(0);
    if positions != targets.len() || positions == 0 {
        return Err(Error::Shape(format!(
            "{} targets for logits {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut grad = want_grad.then(|| Tensor::zeros(logits.shape()));
    let mut total = 0.0;
    let inv = 1.0 / positions as f64;
    for (i, (row, &t)) in logits.data().chunks(classes).zip(targets).enumerate() {
        if t >= classes {
            return Err(Error::InvalidArgument(format!("target {t} out of range for {classes} classes")));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = m + sum.ln();
        total += log_z - row[t];
        if let Some(g) = grad.as_mut() {
            let out = &mut g.data_mut()[i * classes..(i + 1) * classes];
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - log_z).exp() * inv;
            }
            out[t] -= inv;
        }
    }
    Ok((total * inv, grad))
}
