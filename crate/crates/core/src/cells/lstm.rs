use crate::error::Result;
use crate::numerics::{
    matmul_nt_acc, matmul_tn_acc, sigmoid, sigmoid_grad_from_output, tanh_grad_from_output, Matrix,
};
use crate::params::Parameters;

use super::{affine2, check_step_dims, CellGrads, CellState};

/// LSTM weights, stored input-major (`w_*x` is `m x n`, `w_*h` is `n x n`).
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_ix: Matrix,
    pub w_ih: Matrix,
    pub w_jx: Matrix,
    pub w_jh: Matrix,
    pub w_fx: Matrix,
    pub w_fh: Matrix,
    pub w_ox: Matrix,
    pub w_oh: Matrix,
    pub b_i: Matrix,
    pub b_j: Matrix,
    pub b_f: Matrix,
    pub b_o: Matrix,
}

impl LstmParams {
    pub fn zeros(input: usize, state: usize) -> Self {
        let wx = || Matrix::zeros(input, state);
        let wh = || Matrix::zeros(state, state);
        let b = || Matrix::zeros(1, state);
        Self {
            w_ix: wx(),
            w_ih: wh(),
            w_jx: wx(),
            w_jh: wh(),
            w_fx: wx(),
            w_fh: wh(),
            w_ox: wx(),
            w_oh: wh(),
            b_i: b(),
            b_j: b(),
            b_f: b(),
            b_o: b(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_ix.rows()
    }

    pub fn state_size(&self) -> usize {
        self.w_ix.cols()
    }
}

impl Parameters for LstmParams {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![
            &self.w_ix, &self.w_ih, &self.w_jx, &self.w_jh, &self.w_fx, &self.w_fh, &self.w_ox, &self.w_oh,
            &self.b_i, &self.b_j, &self.b_f, &self.b_o,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.w_ix,
            &mut self.w_ih,
            &mut self.w_jx,
            &mut self.w_jh,
            &mut self.w_fx,
            &mut self.w_fh,
            &mut self.w_ox,
            &mut self.w_oh,
            &mut self.b_i,
            &mut self.b_j,
            &mut self.b_f,
            &mut self.b_o,
        ]
    }
}

/// Everything the LSTM backward pass needs from one step.
#[derive(Clone, Debug)]
pub struct LstmCache {
    pub x: Matrix,
    pub h_prev: Matrix,
    pub c_prev: Matrix,
    pub i: Matrix,
    pub j: Matrix,
    pub f: Matrix,
    pub o: Matrix,
    /// Effective input gate: `i`, or `min(i, 1 - f)` when capped.
    pub g: Matrix,
    /// Per entry: whether the input-gate branch of the cap was selected.
    pub input_branch: Vec<bool>,
    pub c: Matrix,
    pub tanh_c: Matrix,
    pub capped: bool,
}

pub fn lstm_forward(
    p: &LstmParams,
    state: &CellState,
    x: &Matrix,
    cap_input_gate: bool,
) -> Result<(CellState, LstmCache)> {
    check_step_dims("lstm_forward", p.input_size(), p.state_size(), state, x)?;
    let mut i = affine2(x, &p.w_ix, &state.h, &p.w_ih, &p.b_i);
    let mut j = affine2(x, &p.w_jx, &state.h, &p.w_jh, &p.b_j);
    let mut f = affine2(x, &p.w_fx, &state.h, &p.w_fh, &p.b_f);
    let mut o = affine2(x, &p.w_ox, &state.h, &p.w_oh, &p.b_o);
    i.map_inplace(sigmoid);
    j.map_inplace(f64::tanh);
    f.map_inplace(sigmoid);
    o.map_inplace(sigmoid);

    let mut g = i.clone();
    let mut input_branch = vec![true; g.len()];
    if cap_input_gate {
        for (k, (gv, &fv)) in g.data_mut().iter_mut().zip(f.data()).enumerate() {
            let cap = 1.0 - fv;
            if *gv > cap {
                *gv = cap;
                input_branch[k] = false;
            }
        }
    }

    let mut c = f.hadamard(&state.c);
    for ((cv, &gv), &jv) in c.data_mut().iter_mut().zip(g.data()).zip(j.data()) {
        *cv += gv * jv;
    }
    let tanh_c = c.map(f64::tanh);
    let h = o.hadamard(&tanh_c);

    let cache = LstmCache {
        x: x.clone(),
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        i,
        j,
        f,
        o,
        g,
        input_branch,
        c: c.clone(),
        tanh_c,
        capped: cap_input_gate,
    };
    Ok((CellState { c, h }, cache))
}

/// Backward pass of one LSTM step. Parameter gradients are accumulated into `grads`.
pub fn lstm_backward(
    p: &LstmParams,
    cache: &LstmCache,
    grad_c: &Matrix,
    grad_h: &Matrix,
    grads: &mut LstmParams,
) -> CellGrads {
    let n = cache.c.len();
    let mut d_ai = Matrix::zeros(cache.c.rows(), cache.c.cols());
    let mut d_aj = d_ai.clone();
    let mut d_af = d_ai.clone();
    let mut d_ao = d_ai.clone();
    let mut d_c_prev = d_ai.clone();
    {
        let (dai, daj, daf, dao, dcp) =
            (d_ai.data_mut(), d_aj.data_mut(), d_af.data_mut(), d_ao.data_mut(), d_c_prev.data_mut());
        for k in 0..n {
            let o = cache.o.data()[k];
            let tc = cache.tanh_c.data()[k];
            let dh = grad_h.data()[k];
            let dc = grad_c.data()[k] + dh * o * tanh_grad_from_output(tc);
            let d_o = dh * tc;
            let jv = cache.j.data()[k];
            let f = cache.f.data()[k];
            let i = cache.i.data()[k];
            let dg = dc * jv;
            let dj = dc * cache.g.data()[k];
            let mut df = dc * cache.c_prev.data()[k];
            let di = if cache.input_branch[k] {
                dg
            } else {
                df -= dg;
                0.0
            };
            dcp[k] = dc * f;
            dai[k] = di * sigmoid_grad_from_output(i);
            daj[k] = dj * tanh_grad_from_output(jv);
            daf[k] = df * sigmoid_grad_from_output(f);
            dao[k] = d_o * sigmoid_grad_from_output(o);
        }
    }

    let mut d_x = Matrix::zeros(cache.x.rows(), cache.x.cols());
    let mut d_h_prev = Matrix::zeros(cache.h_prev.rows(), cache.h_prev.cols());
    let gates = [
        (&d_ai, &p.w_ix, &p.w_ih),
        (&d_aj, &p.w_jx, &p.w_jh),
        (&d_af, &p.w_fx, &p.w_fh),
        (&d_ao, &p.w_ox, &p.w_oh),
    ];
    for (da, wx, wh) in gates {
        matmul_nt_acc(&mut d_x, da, wx);
        matmul_nt_acc(&mut d_h_prev, da, wh);
    }
    matmul_tn_acc(&mut grads.w_ix, &cache.x, &d_ai);
    matmul_tn_acc(&mut grads.w_ih, &cache.h_prev, &d_ai);
    matmul_tn_acc(&mut grads.w_jx, &cache.x, &d_aj);
    matmul_tn_acc(&mut grads.w_jh, &cache.h_prev, &d_aj);
    matmul_tn_acc(&mut grads.w_fx, &cache.x, &d_af);
    matmul_tn_acc(&mut grads.w_fh, &cache.h_prev, &d_af);
    matmul_tn_acc(&mut grads.w_ox, &cache.x, &d_ao);
    matmul_tn_acc(&mut grads.w_oh, &cache.h_prev, &d_ao);
    d_ai.col_sum_into(&mut grads.b_i);
    d_aj.col_sum_into(&mut grads.b_j);
    d_af.col_sum_into(&mut grads.b_f);
    d_ao.col_sum_into(&mut grads.b_o);

    CellGrads { c_prev: d_c_prev, h_prev: d_h_prev, x: d_x }
}
