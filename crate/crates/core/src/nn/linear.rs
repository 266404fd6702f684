use rand::Rng;

use super::{join, Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// `y = x W^T + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::uniform(&[out_features, in_features], in_features, rng),
            bias: Param::uniform(&[out_features], in_features, rng),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.dim(0)
    }

    /// `x` is `[n, in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, din) = check_2d(x, self.in_features())?;
        let dout = self.out_features();
        let mut y = Tensor::zeros(&[n, dout]);
        for i in 0..n {
            y.row_mut(i).copy_from_slice(self.bias.value.data());
        }
        gemm(
            n,
            din,
            dout,
            1.0,
            x.data(),
            false,
            self.weight.value.data(),
            true,
            1.0,
            y.data_mut(),
        );
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let n = x.dim(0);
        let din = self.in_features();
        let dout = self.out_features();
        gemm(
            dout,
            n,
            din,
            1.0,
            dy.data(),
            true,
            x.data(),
            false,
            1.0,
            self.weight.grad.data_mut(),
        );
        let db = self.bias.grad.data_mut();
        for i in 0..n {
            for (g, d) in db.iter_mut().zip(dy.row(i)) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&[n, din]);
        gemm(
            n,
            dout,
            din,
            1.0,
            dy.data(),
            false,
            self.weight.value.data(),
            false,
            0.0,
            dx.data_mut(),
        );
        dx
    }
}

fn check_2d(x: &Tensor, features: usize) -> Result<(usize, usize)> {
    if x.rank() != 2 || x.dim(1) != features {
        return Err(Error::Shape(format!(
            "linear layer expects [n, {}], got {:?}",
            features,
            x.shape()
        )));
    }
    Ok((x.dim(0), x.dim(1)))
}

impl Parameterized for Linear {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
