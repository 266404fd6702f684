//! Multinomial logistic-regression probe on frozen features.
//!
//! Features are standardized with training-set statistics, then the
//! L2-regularized mean cross-entropy is minimized by full-batch gradient
//! descent. Step sizes come from the quadratic upper bound
//! `H <= 1/2 * blockdiag(X^T X / n, 1)` of the softmax Hessian (exact block
//! structure because standardized columns have zero mean), so every step
//! decreases the objective. The bias is not regularized.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

use super::decoder::argmax;

pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `[classes, dim]`
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    fn standardize(&self, features: &Tensor) -> Result<Tensor> {
        let dim = self.mean.len();
        if features.rank() != 2 || features.dim(1) != dim {
            return Err(Error::Shape(format!("probe expects [n, {dim}] features, got {:?}", features.shape())));
        }
        let mut x = features.clone();
        for i in 0..x.dim(0) {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        Ok(x)
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let x = self.standardize(features)?;
        Ok(logits(&x, &self.weights, &self.bias))
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(features)?;
        Ok((0..z.dim(0)).map(|i| argmax(z.row(i))).collect())
    }
}

fn logits(x: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let (n, d, k) = (x.dim(0), x.dim(1), b.len());
    let mut z = Tensor::zeros(&[n, k]);
    for i in 0..n {
        z.row_mut(i).copy_from_slice(b);
    }
    gemm(n, d, k, 1.0, x.data(), false, w.data(), true, 1.0, z.data_mut());
    z
}

fn softmax_rows(z: &mut Tensor) {
    for i in 0..z.dim(0) {
        let row = z.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
}

fn largest_eigenvalue(gram: &[f64], d: usize) -> f64 {
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut w = vec![0.0; d];
        gemm(d, d, 1, 1.0, gram, false, &v, false, 0.0, &mut w);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

/// Fits the probe to `features` (`[n, dim]`) and integer `labels`.
pub fn probe_fit(features: &Tensor, labels: &[usize], l2: f64) -> Result<LinearProbe> {
    if features.rank() != 2 || features.dim(0) != labels.len() {
        return Err(Error::Shape(format!(
            "probe needs one label per feature row, got {:?} vs {}",
            features.shape(),
            labels.len()
        )));
    }
    if !(l2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("l2 must be non-negative, got {l2}")));
    }
    if !features.is_finite() {
        return Err(Error::Numeric("probe features contain non-finite values".into()));
    }
    let (n, d) = (features.dim(0), features.dim(1));
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|s| **s).count()
    };
    if distinct < 2 {
        return Err(Error::InvalidArgument("probe needs at least two distinct classes".into()));
    }
    if n < classes {
        return Err(Error::InvalidArgument(format!("{n} samples cannot fit {classes} classes")));
    }

    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for i in 0..n {
        for (j, v) in features.row(i).iter().enumerate() {
            scale[j] += (v - mean[j]).powi(2) / n as f64;
        }
    }
    let scale: Vec<f64> = scale
        .into_iter()
        .map(|s| if s.sqrt() > 1e-12 { s.sqrt() } else { 1.0 })
        .collect();

    let mut probe = LinearProbe {
        weights: Tensor::zeros(&[classes, d]),
        bias: vec![0.0; classes],
        mean,
        scale,
        iterations: 0,
        grad_norm: f64::INFINITY,
    };
    let x = probe.standardize(features)?;

    let mut gram = vec![0.0; d * d];
    gemm(d, n, d, 1.0 / n as f64, x.data(), true, x.data(), false, 0.0, &mut gram);
    let lambda = largest_eigenvalue(&gram, d);
    let lr_w = 1.0 / (0.5 * lambda * 1.01 + l2);
    let lr_b = 1.0 / 0.5;

    let mut gw = Tensor::zeros(&[classes, d]);
    for it in 0..MAX_ITERATIONS {
        let mut p = logits(&x, &probe.weights, &probe.bias);
        softmax_rows(&mut p);
        for (i, &l) in labels.iter().enumerate() {
            p.row_mut(i)[l] -= 1.0;
        }
        // p now holds (softmax - onehot)
        gemm(classes, n, d, 1.0 / n as f64, p.data(), true, x.data(), false, 0.0, gw.data_mut());
        for (g, w) in gw.data_mut().iter_mut().zip(probe.weights.data()) {
            *g += l2 * w;
        }
        let mut gb = vec![0.0; classes];
        for i in 0..n {
            for (g, v) in gb.iter_mut().zip(p.row(i)) {
                *g += v / n as f64;
            }
        }
        let norm = (gw.sum_sq() + gb.iter().map(|g| g * g).sum::<f64>()).sqrt();
        probe.grad_norm = norm;
        probe.iterations = it;
        if norm < GRAD_TOLERANCE {
            break;
        }
        for (w, g) in probe.weights.data_mut().iter_mut().zip(gw.data()) {
            *w -= lr_w * g;
        }
        for (b, g) in probe.bias.iter_mut().zip(&gb) {
            *b -= lr_b * g;
        }
        probe.iterations = it + 1;
    }
    if !probe.weights.is_finite() {
        return Err(Error::Numeric("probe weights diverged".into()));
    }
    Ok(probe)
}

/// Fraction of rows whose predicted class equals the label.
pub fn probe_eval(probe: &LinearProbe, features: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || features.dim(0) != labels.len() {
        return Err(Error::InvalidArgument("probe evaluation needs matching non-empty features and labels".into()));
    }
    let pred = probe.predict(features)?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}
