use rand::Rng;
use rayon::prelude::*;

use super::{join, Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// 2-D convolution over `[batch, channels, height, width]` with "same"
/// padding (`kernel / 2`), lowered to im2col + GEMM per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache {
    input_shape: [usize; 4],
    out_hw: (usize, usize),
    cols: Vec<Vec<f64>>,
}

#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Param::uniform(&[out_channels], fan_in, rng),
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.dim(2)
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let k = self.kernel();
        let pad = k / 2;
        (
            (height + 2 * pad - k) / self.stride + 1,
            (width + 2 * pad - k) / self.stride + 1,
        )
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        if x.rank() != 4 || x.dim(1) != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects [b, {}, h, w], got {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        let kernel = self.kernel();
        let pad = kernel / 2;
        if x.dim(2) + 2 * pad < kernel || x.dim(3) + 2 * pad < kernel {
            return Err(Error::Shape(format!(
                "input {:?} smaller than kernel {kernel}",
                x.shape()
            )));
        }
        let (out_h, out_w) = self.output_size(x.dim(2), x.dim(3));
        Ok(Geometry {
            channels: x.dim(1),
            height: x.dim(2),
            width: x.dim(3),
            kernel,
            stride: self.stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Conv2dCache)> {
        let g = self.geometry(x)?;
        let batch = x.dim(0);
        let cout = self.out_channels();
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
            .into_par_iter()
            .map(|i| {
                let cols = im2col(x.row(i), &g);
                let mut y = vec![0.0; cout * g.out_len()];
                for (c, chunk) in y.chunks_mut(g.out_len()).enumerate() {
                    chunk.fill(b[c]);
                }
                gemm(cout, g.patch(), g.out_len(), 1.0, w, false, &cols, false, 1.0, &mut y);
                (y, cols)
            })
            .collect();
        let mut out = Vec::with_capacity(batch * cout * g.out_len());
        let mut cols = Vec::with_capacity(batch);
        for (y, c) in per_sample {
            out.extend_from_slice(&y);
            cols.push(c);
        }
        let out = Tensor::from_vec(&[batch, cout, g.out_h, g.out_w], out)?;
        let cache = Conv2dCache {
            input_shape: [batch, g.channels, g.height, g.width],
            out_hw: (g.out_h, g.out_w),
            cols,
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: &Conv2dCache, dy: &Tensor) -> Tensor {
        let [batch, channels, height, width] = cache.input_shape;
        let kernel = self.kernel();
        let g = Geometry {
            channels,
            height,
            width,
            kernel,
            stride: self.stride,
            pad: kernel / 2,
            out_h: cache.out_hw.0,
            out_w: cache.out_hw.1,
        };
        let cout = self.out_channels();
        let w = self.weight.value.data();
        let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
            .into_par_iter()
            .map(|i| {
                let dyi = dy.row(i);
                let mut dw = vec![0.0; cout * g.patch()];
                gemm(cout, g.out_len(), g.patch(), 1.0, dyi, false, &cache.cols[i], true, 0.0, &mut dw);
                let mut dcols = vec![0.0; g.patch() * g.out_len()];
                gemm(g.patch(), cout, g.out_len(), 1.0, w, true, dyi, false, 0.0, &mut dcols);
                (dw, col2im(&dcols, &g))
            })
            .collect();

        let mut dx = Vec::with_capacity(batch * channels * height * width);
        for (i, (dw, dxi)) in per_sample.into_iter().enumerate() {
            for (acc, d) in self.weight.grad.data_mut().iter_mut().zip(&dw) {
                *acc += d;
            }
            let dyi = dy.row(i);
            for (c, acc) in self.bias.grad.data_mut().iter_mut().enumerate() {
                *acc += dyi[c * g.out_len()..(c + 1) * g.out_len()].iter().sum::<f64>();
            }
            dx.extend_from_slice(&dxi);
        }
        Tensor::from_vec(&cache.input_shape, dx).expect("input shape")
    }
}

fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let mut cols = vec![0.0; g.patch() * g.out_len()];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * g.out_len()..(row + 1) * g.out_len()];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let mut x = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * g.out_len()..(row + 1) * g.out_len()];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Parameterized for Conv2d {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
