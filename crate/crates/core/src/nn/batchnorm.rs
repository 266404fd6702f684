use super::{join, Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-feature batch normalization of `[n, d]` inputs with a learned scale
/// and shift. Training mode normalizes with batch statistics and updates
/// the running estimates; eval mode uses the running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BatchNorm1d {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[features], 1.0)),
            beta: Param::new(Tensor::zeros(&[features])),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.value.len()
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize)> {
        if x.rank() != 2 || x.dim(1) != self.features() || x.dim(0) == 0 {
            return Err(Error::Shape(format!(
                "batch norm expects [n >= 1, {}], got {:?}",
                self.features(),
                x.shape()
            )));
        }
        Ok((x.dim(0), x.dim(1)))
    }

    fn apply(&self, x: &Tensor, mean: &[f64], inv_std: Vec<f64>, batch_stats: bool) -> (Tensor, BatchNormCache) {
        let (n, d) = (x.dim(0), x.dim(1));
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut y = Tensor::zeros(&[n, d]);
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for i in 0..n {
            for j in 0..d {
                let h = (x.row(i)[j] - mean[j]) * inv_std[j];
                xhat.row_mut(i)[j] = h;
                y.row_mut(i)[j] = g[j] * h + b[j];
            }
        }
        (y, BatchNormCache { xhat, inv_std, batch_stats })
    }

    /// Normalizes with the statistics of `x` and folds them into the
    /// running estimates (unbiased variance).
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BatchNormCache)> {
        let (n, d) = self.check(x)?;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                var[j] += (x.row(i)[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let out = self.apply(x, &mean, inv_std, true);
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        let m = self.momentum;
        for j in 0..d {
            let rm = &mut self.running_mean.data_mut()[j];
            *rm = (1.0 - m) * *rm + m * mean[j];
            let rv = &mut self.running_var.data_mut()[j];
            *rv = (1.0 - m) * *rv + m * var[j] * unbias;
        }
        Ok(out)
    }

    /// Folds the statistics of `x` into the running estimates, then
    /// normalizes with the updated estimates. Gradients treat the estimates
    /// as constants, so training and evaluation apply the same transform.
    pub fn forward_running(&mut self, x: &Tensor) -> Result<(Tensor, BatchNormCache)> {
        self.forward_train(x)?;
        self.forward_eval(x)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<(Tensor, BatchNormCache)> {
        self.check(x)?;
        let inv_std = self
            .running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        Ok(self.apply(x, self.running_mean.data(), inv_std, false))
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Tensor) -> Tensor {
        let (n, d) = (dy.dim(0), dy.dim(1));
        let g = self.gamma.value.data().to_vec();
        let mut sum_dy = vec![0.0; d];
        let mut sum_dy_xhat = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                sum_dy[j] += dy.row(i)[j];
                sum_dy_xhat[j] += dy.row(i)[j] * cache.xhat.row(i)[j];
            }
        }
        for j in 0..d {
            self.gamma.grad.data_mut()[j] += sum_dy_xhat[j];
            self.beta.grad.data_mut()[j] += sum_dy[j];
        }
        let mut dx = Tensor::zeros(&[n, d]);
        for i in 0..n {
            for j in 0..d {
                let scale = g[j] * cache.inv_std[j];
                dx.row_mut(i)[j] = if cache.batch_stats {
                    scale * (dy.row(i)[j] - (sum_dy[j] + cache.xhat.row(i)[j] * sum_dy_xhat[j]) / n as f64)
                } else {
                    scale * dy.row(i)[j]
                };
            }
        }
        dx
    }
}

impl Parameterized for BatchNorm1d {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}
