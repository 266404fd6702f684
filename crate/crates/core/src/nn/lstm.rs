//! Single-layer LSTM with explicit backpropagation through time.
//!
//! Gate pre-activations are laid out `[i | f | g | o]` along the last axis:
//!
//! ```text
//! a = x W_ih^T + h W_hh^T + b
//! i = σ(a_i)   f = σ(a_f)   g = tanh(a_g)   o = σ(a_o)
//! c' = f ⊙ c + i ⊙ g
//! h' = o ⊙ tanh(c')
//! ```

use rand::Rng;

use super::{join, sigmoid, Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub w_ih: Param,
    pub w_hh: Param,
    pub bias: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            hidden: Tensor::zeros(&[batch, hidden]),
            cell: Tensor::zeros(&[batch, hidden]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LstmStepCache {
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    /// Activated gates `[b, 4h]`.
    gates: Tensor,
    tanh_c: Tensor,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_ih = Param::uniform(&[4 * hidden, input], hidden, rng);
        let w_hh = Param::uniform(&[4 * hidden, hidden], hidden, rng);
        let mut bias = Param::uniform(&[4 * hidden], hidden, rng);
        // Forget gates start near 0.73 so early inputs survive long sequences.
        for b in &mut bias.value.data_mut()[hidden..2 * hidden] {
            *b += 1.0;
        }
        Self { w_ih, w_hh, bias }
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.value.dim(1)
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.value.dim(1)
    }

    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<(LstmState, LstmStepCache)> {
        let hs = self.hidden_size();
        let input = self.input_size();
        if x.rank() != 2 || x.dim(1) != input {
            return Err(Error::Shape(format!(
                "lstm expects input [b, {input}], got {:?}",
                x.shape()
            )));
        }
        let b = x.dim(0);
        if state.hidden.shape() != [b, hs] || state.cell.shape() != [b, hs] {
            return Err(Error::Shape(format!(
                "lstm state must be [{b}, {hs}], got {:?}",
                state.hidden.shape()
            )));
        }
        let mut pre = Tensor::zeros(&[b, 4 * hs]);
        for r in 0..b {
            pre.row_mut(r).copy_from_slice(self.bias.value.data());
        }
        gemm(b, input, 4 * hs, 1.0, x.data(), false, self.w_ih.value.data(), true, 1.0, pre.data_mut());
        gemm(
            b,
            hs,
            4 * hs,
            1.0,
            state.hidden.data(),
            false,
            self.w_hh.value.data(),
            true,
            1.0,
            pre.data_mut(),
        );

        let mut gates = pre;
        let mut cell = Tensor::zeros(&[b, hs]);
        let mut hidden = Tensor::zeros(&[b, hs]);
        let mut tanh_c = Tensor::zeros(&[b, hs]);
        for r in 0..b {
            let g = gates.row_mut(r);
            for j in 0..hs {
                g[j] = sigmoid(g[j]);
                g[hs + j] = sigmoid(g[hs + j]);
                g[2 * hs + j] = g[2 * hs + j].tanh();
                g[3 * hs + j] = sigmoid(g[3 * hs + j]);
            }
            let c_prev = state.cell.row(r);
            let g = gates.row(r);
            for j in 0..hs {
                let c = g[hs + j] * c_prev[j] + g[j] * g[2 * hs + j];
                let t = c.tanh();
                cell.row_mut(r)[j] = c;
                tanh_c.row_mut(r)[j] = t;
                hidden.row_mut(r)[j] = g[3 * hs + j] * t;
            }
        }
        let cache = LstmStepCache {
            x: x.clone(),
            h_prev: state.hidden.clone(),
            c_prev: state.cell.clone(),
            gates,
            tanh_c,
        };
        Ok((LstmState { hidden, cell }, cache))
    }

    /// Runs `xs` (each `[b, input]`) from `init`; returns per-step hidden
    /// outputs and caches.
    pub fn forward_sequence(
        &self,
        xs: &[Tensor],
        init: &LstmState,
    ) -> Result<(Vec<Tensor>, Vec<LstmStepCache>, LstmState)> {
        let mut state = init.clone();
        let mut hs = Vec::with_capacity(xs.len());
        let mut caches = Vec::with_capacity(xs.len());
        for x in xs {
            let (next, cache) = self.step(x, &state)?;
            hs.push(next.hidden.clone());
            caches.push(cache);
            state = next;
        }
        Ok((hs, caches, state))
    }

    /// Backpropagation through time. `dhs[t]` is the loss gradient flowing
    /// into the hidden output of step `t`. Returns input gradients per step.
    pub fn backward_sequence(&mut self, caches: &[LstmStepCache], dhs: &[Tensor]) -> Vec<Tensor> {
        let hs = self.hidden_size();
        let input = self.input_size();
        let mut dxs = vec![Tensor::zeros(&[0]); caches.len()];
        let Some(first) = caches.first() else {
            return dxs;
        };
        let b = first.x.dim(0);
        let mut dh_next = Tensor::zeros(&[b, hs]);
        let mut dc_next = Tensor::zeros(&[b, hs]);
        for t in (0..caches.len()).rev() {
            let cache = &caches[t];
            let mut dpre = Tensor::zeros(&[b, 4 * hs]);
            let mut dc_prev = Tensor::zeros(&[b, hs]);
            for r in 0..b {
                let g = cache.gates.row(r);
                let tc = cache.tanh_c.row(r);
                let cp = cache.c_prev.row(r);
                let dh_out = dhs[t].row(r);
                let dhn = dh_next.row(r);
                let dcn = dc_next.row(r);
                let dp = dpre.row_mut(r);
                let mut dcp = vec![0.0; hs];
                for j in 0..hs {
                    let (i, f, gg, o) = (g[j], g[hs + j], g[2 * hs + j], g[3 * hs + j]);
                    let dh = dh_out[j] + dhn[j];
                    let d_o = dh * tc[j];
                    let dc = dcn[j] + dh * o * (1.0 - tc[j] * tc[j]);
                    dp[j] = dc * gg * i * (1.0 - i);
                    dp[hs + j] = dc * cp[j] * f * (1.0 - f);
                    dp[2 * hs + j] = dc * i * (1.0 - gg * gg);
                    dp[3 * hs + j] = d_o * o * (1.0 - o);
                    dcp[j] = dc * f;
                }
                dc_prev.row_mut(r).copy_from_slice(&dcp);
            }
            gemm(4 * hs, b, input, 1.0, dpre.data(), true, cache.x.data(), false, 1.0, self.w_ih.grad.data_mut());
            gemm(
                4 * hs,
                b,
                hs,
                1.0,
                dpre.data(),
                true,
                cache.h_prev.data(),
                false,
                1.0,
                self.w_hh.grad.data_mut(),
            );
            let db = self.bias.grad.data_mut();
            for r in 0..b {
                for (acc, d) in db.iter_mut().zip(dpre.row(r)) {
                    *acc += d;
                }
            }
            let mut dx = Tensor::zeros(&[b, input]);
            gemm(b, 4 * hs, input, 1.0, dpre.data(), false, self.w_ih.value.data(), false, 0.0, dx.data_mut());
            let mut dh_prev = Tensor::zeros(&[b, hs]);
            gemm(b, 4 * hs, hs, 1.0, dpre.data(), false, self.w_hh.value.data(), false, 0.0, dh_prev.data_mut());
            dxs[t] = dx;
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        dxs
    }
}

impl Parameterized for Lstm {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "w_ih"), &self.w_ih);
        f(join(prefix, "w_hh"), &self.w_hh);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        f(join(prefix, "w_ih"), &mut self.w_ih);
        f(join(prefix, "w_hh"), &mut self.w_hh);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
