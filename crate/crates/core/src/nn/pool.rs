use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(size: usize) -> Self {
        Self { size }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MaxPoolCache)> {
        if x.rank() != 4 || x.dim(2) < self.size || x.dim(3) < self.size {
            return Err(Error::Shape(format!(
                "max pool {} cannot reduce {:?}",
                self.size,
                x.shape()
            )));
        }
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (oh, ow) = (h / self.size, w / self.size);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        let data = x.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * self.size * w + ox * self.size;
                    for dy in 0..self.size {
                        for dx in 0..self.size {
                            let idx = base + (oy * self.size + dy) * w + ox * self.size + dx;
                            // strict comparison keeps the first maximum on ties
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        Ok((
            Tensor::from_vec(&[b, c, oh, ow], out)?,
            MaxPoolCache {
                input_shape: x.shape().to_vec(),
                argmax,
            },
        ))
    }

    pub fn backward(&self, cache: &MaxPoolCache, dy: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(&cache.input_shape);
        let d = dx.data_mut();
        for (&idx, &g) in cache.argmax.iter().zip(dy.data()) {
            d[idx] += g;
        }
        dx
    }
}

/// `[b, c, h, w] -> [b, c]`
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("global pool expects rank 4, got {:?}", x.shape())));
    }
    let (b, c) = (x.dim(0), x.dim(1));
    let area = x.dim(2) * x.dim(3);
    let out = x
        .data()
        .chunks(area)
        .map(|plane| plane.iter().sum::<f64>() / area as f64)
        .collect();
    Tensor::from_vec(&[b, c], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], dy: &Tensor) -> Tensor {
    let area = input_shape[2] * input_shape[3];
    let mut dx = Tensor::zeros(input_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(area).zip(dy.data()) {
        plane.fill(g / area as f64);
    }
    dx
}
