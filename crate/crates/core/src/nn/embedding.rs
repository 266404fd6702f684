use rand::Rng;

use super::{join, Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token lookup table `[vocab, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub weight: Param,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        // fan_in of a one-hot input is 1
        Self {
            weight: Param::uniform(&[vocab, dim], 1, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let dim = self.dim();
        let mut out = Tensor::zeros(&[tokens.len(), dim]);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.vocab_size() {
                return Err(Error::InvalidArgument(format!(
                    "token {t} out of range for vocabulary of {}",
                    self.vocab_size()
                )));
            }
            out.row_mut(i).copy_from_slice(self.weight.value.row(t));
        }
        Ok(out)
    }

    pub fn backward(&mut self, tokens: &[usize], dy: &Tensor) {
        for (i, &t) in tokens.iter().enumerate() {
            let src = dy.row(i);
            for (g, d) in self.weight.grad.row_mut(t).iter_mut().zip(src) {
                *g += d;
            }
        }
    }
}

impl Parameterized for Embedding {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "weight"), &self.weight);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
    }
}
