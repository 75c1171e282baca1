//! Single-layer LSTM cell with explicit forward caches for backpropagation through time.
//!
//! Gate rows are stacked as `[input, forget, candidate, output]`, each block `H` rows tall:
//!
//! ```text
//! i = σ(W_i x + U_i h + b_i)    f = σ(W_f x + U_f h + b_f)
//! g = tanh(W_g x + U_g h + b_g) o = σ(W_o x + U_o h + b_o)
//! c' = f ⊙ c + i ⊙ g            h' = o ⊙ tanh(c')
//! ```

use rand::Rng;

use super::params::{ParamSet, TensorRef};
use super::tensor::{sigmoid, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4H × E`
    pub w_input: Matrix,
    /// `4H × H`
    pub w_hidden: Matrix,
    /// `4H`
    pub bias: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_input: Matrix::zeros(4 * hidden, input),
            w_hidden: Matrix::zeros(4 * hidden, hidden),
            bias: vec![0.0; 4 * hidden],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(input: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        let w_input = Matrix::uniform(4 * hidden, input, scale, rng);
        let w_hidden = Matrix::uniform(4 * hidden, hidden, scale, rng);
        let bias = (0..4 * hidden)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        LstmParams {
            w_input,
            w_hidden,
            bias,
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_input.cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.cols()
    }

    pub(crate) fn push_tensors<'a>(&'a self, out: &mut Vec<TensorRef<'a>>) {
        let h4 = self.bias.len();
        out.push(TensorRef {
            name: "lstm.w_input",
            rows: h4,
            cols: self.w_input.cols(),
            data: self.w_input.as_slice(),
        });
        out.push(TensorRef {
            name: "lstm.w_hidden",
            rows: h4,
            cols: self.w_hidden.cols(),
            data: self.w_hidden.as_slice(),
        });
        out.push(TensorRef {
            name: "lstm.bias",
            rows: h4,
            cols: 1,
            data: &self.bias,
        });
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.w_input.as_mut_slice());
        out.push(self.w_hidden.as_mut_slice());
        out.push(&mut self.bias);
    }
}

impl ParamSet for LstmParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::with_capacity(3);
        self.push_tensors(&mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3);
        self.push_tensors_mut(&mut out);
        out
    }
}

/// Recurrent state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            c: vec![0.0; hidden],
            h: vec![0.0; hidden],
        }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub h_prev: Vec<f64>,
    /// Activated gates `[i, f, g, o]`, `4H`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

fn check_dims(params: &LstmParams, x: &[f64], c: &[f64], h: &[f64]) -> Result<()> {
    let hs = params.hidden_size();
    if x.len() != params.input_size() || c.len() != hs || h.len() != hs {
        return Err(Error::Dimension(format!(
            "lstm step expects x:{} c:{hs} h:{hs}, got x:{} c:{} h:{}",
            params.input_size(),
            x.len(),
            c.len(),
            h.len()
        )));
    }
    Ok(())
}

/// One LSTM step returning the new `(c, h)`.
pub fn lstm_step(
    x: &[f64],
    c_prev: &[f64],
    h_prev: &[f64],
    params: &LstmParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cache = lstm_step_cached(x, c_prev, h_prev, params)?;
    Ok((cache.c, cache.h))
}

pub fn lstm_step_cached(
    x: &[f64],
    c_prev: &[f64],
    h_prev: &[f64],
    params: &LstmParams,
) -> Result<StepCache> {
    check_dims(params, x, c_prev, h_prev)?;
    let hs = params.hidden_size();
    let mut gates = params.bias.clone();
    params.w_input.matvec_add(x, &mut gates);
    params.w_hidden.matvec_add(h_prev, &mut gates);
    for (k, z) in gates.iter_mut().enumerate() {
        *z = if (2 * hs..3 * hs).contains(&k) {
            z.tanh()
        } else {
            sigmoid(*z)
        };
    }
    let mut c = vec![0.0; hs];
    let mut tanh_c = vec![0.0; hs];
    let mut h = vec![0.0; hs];
    for j in 0..hs {
        let (i, f, g, o) = (
            gates[j],
            gates[hs + j],
            gates[2 * hs + j],
            gates[3 * hs + j],
        );
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    Ok(StepCache {
        x: x.to_vec(),
        c_prev: c_prev.to_vec(),
        h_prev: h_prev.to_vec(),
        gates,
        c,
        tanh_c,
        h,
    })
}

/// Gradients flowing out of one step.
pub struct StepGrads {
    pub dx: Vec<f64>,
    pub dc_prev: Vec<f64>,
    pub dh_prev: Vec<f64>,
}

/// Backward through one cached step. `dh` is the total gradient on this step's
/// `h`, `dc` the gradient on its `c` arriving from the following step.
/// Parameter gradients are accumulated into `grads`.
pub fn lstm_step_backward(
    cache: &StepCache,
    dh: &[f64],
    dc: &[f64],
    params: &LstmParams,
    grads: &mut LstmParams,
) -> StepGrads {
    let hs = params.hidden_size();
    let g = &cache.gates;
    let mut dz = vec![0.0; 4 * hs];
    let mut dc_prev = vec![0.0; hs];
    for j in 0..hs {
        let (i, f, cand, o) = (g[j], g[hs + j], g[2 * hs + j], g[3 * hs + j]);
        let tc = cache.tanh_c[j];
        let dct = dh[j] * o * (1.0 - tc * tc) + dc[j];
        let d_o = dh[j] * tc;
        let d_i = dct * cand;
        let d_g = dct * i;
        let d_f = dct * cache.c_prev[j];
        dc_prev[j] = dct * f;
        dz[j] = d_i * i * (1.0 - i);
        dz[hs + j] = d_f * f * (1.0 - f);
        dz[2 * hs + j] = d_g * (1.0 - cand * cand);
        dz[3 * hs + j] = d_o * o * (1.0 - o);
    }
    grads.w_input.outer_add(&dz, &cache.x);
    grads.w_hidden.outer_add(&dz, &cache.h_prev);
    for (b, d) in grads.bias.iter_mut().zip(&dz) {
        *b += d;
    }
    let mut dx = vec![0.0; params.input_size()];
    params.w_input.tmatvec_add(&dz, &mut dx);
    let mut dh_prev = vec![0.0; hs];
    params.w_hidden.tmatvec_add(&dz, &mut dh_prev);
    StepGrads {
        dx,
        dc_prev,
        dh_prev,
    }
}
