use crate::error::{dim_err, Result};
use crate::numerics::{
    matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid, sigmoid_grad_from_output, tanh_grad_from_output, Matrix,
};
use crate::params::Parameters;

use super::{affine2, check_step_dims, CellGrads, CellState};

/// Rewired LSTM weights, stored input-major.
///
/// The forget gate reads the proposed update `i * j` through `w_fu` instead of
/// the input, and the output gate reads only the new cell state through `w_oc`.
#[derive(Clone, Debug, PartialEq)]
pub struct RlstmParams {
    pub w_ix: Matrix,
    pub w_ih: Matrix,
    pub w_jx: Matrix,
    pub w_jh: Matrix,
    pub w_fu: Matrix,
    pub w_fh: Matrix,
    pub w_oc: Matrix,
    pub b_i: Matrix,
    pub b_j: Matrix,
    pub b_f: Matrix,
    pub b_o: Matrix,
}

impl RlstmParams {
    pub fn zeros(input: usize, state: usize) -> Self {
        let wh = || Matrix::zeros(state, state);
        let b = || Matrix::zeros(1, state);
        Self {
            w_ix: Matrix::zeros(input, state),
            w_ih: wh(),
            w_jx: Matrix::zeros(input, state),
            w_jh: wh(),
            w_fu: wh(),
            w_fh: wh(),
            w_oc: wh(),
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

impl Parameters for RlstmParams {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![
            &self.w_ix, &self.w_ih, &self.w_jx, &self.w_jh, &self.w_fu, &self.w_fh, &self.w_oc, &self.b_i,
            &self.b_j, &self.b_f, &self.b_o,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.w_ix,
            &mut self.w_ih,
            &mut self.w_jx,
            &mut self.w_jh,
            &mut self.w_fu,
            &mut self.w_fh,
            &mut self.w_oc,
            &mut self.b_i,
            &mut self.b_j,
            &mut self.b_f,
            &mut self.b_o,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct RlstmCache {
    pub x: Matrix,
    pub h_prev: Matrix,
    pub c_prev: Matrix,
    pub i: Matrix,
    pub j: Matrix,
    /// Proposed update `i * j`.
    pub u: Matrix,
    pub f: Matrix,
    /// `min(i, 1 - f)`
    pub g: Matrix,
    pub input_branch: Vec<bool>,
    pub c: Matrix,
    /// `c` after the state mask, as seen by the output gate.
    pub c_masked: Matrix,
    pub state_mask: Option<Matrix>,
    pub o: Matrix,
    pub tanh_c: Matrix,
}

pub fn rlstm_forward(
    p: &RlstmParams,
    state: &CellState,
    x: &Matrix,
    state_mask: Option<&Matrix>,
) -> Result<(CellState, RlstmCache)> {
    check_step_dims("rlstm_forward", p.input_size(), p.state_size(), state, x)?;
    if let Some(m) = state_mask {
        if !m.same_shape(&state.c) {
            return dim_err("rlstm_forward", format!("state mask {:?} vs state {:?}", m.shape(), state.c.shape()));
        }
    }
    let mut i = affine2(x, &p.w_ix, &state.h, &p.w_ih, &p.b_i);
    let mut j = affine2(x, &p.w_jx, &state.h, &p.w_jh, &p.b_j);
    i.map_inplace(sigmoid);
    j.map_inplace(f64::tanh);
    let u = i.hadamard(&j);

    // the forget gate depends on i and j, so it is computed after them
    let mut f = affine2(&u, &p.w_fu, &state.h, &p.w_fh, &p.b_f);
    f.map_inplace(sigmoid);

    let mut g = i.clone();
    let mut input_branch = vec![true; g.len()];
    for (k, (gv, &fv)) in g.data_mut().iter_mut().zip(f.data()).enumerate() {
        let cap = 1.0 - fv;
        if *gv > cap {
            *gv = cap;
            input_branch[k] = false;
        }
    }
    let mut c = f.hadamard(&state.c);
    for ((cv, &gv), &jv) in c.data_mut().iter_mut().zip(g.data()).zip(j.data()) {
        *cv += gv * jv;
    }

    let c_masked = match state_mask {
        Some(m) => c.hadamard(m),
        None => c.clone(),
    };
    let mut o = Matrix::zeros(c.rows(), c.cols());
    o.add_row_broadcast(&p.b_o);
    matmul_acc(&mut o, &c_masked, &p.w_oc);
    o.map_inplace(sigmoid);

    let tanh_c = c.map(f64::tanh);
    let h = o.hadamard(&tanh_c);
    let cache = RlstmCache {
        x: x.clone(),
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        i,
        j,
        u,
        f,
        g,
        input_branch,
        c: c.clone(),
        c_masked,
        state_mask: state_mask.cloned(),
        o,
        tanh_c,
    };
    Ok((CellState { c, h }, cache))
}

pub fn rlstm_backward(
    p: &RlstmParams,
    cache: &RlstmCache,
    grad_c: &Matrix,
    grad_h: &Matrix,
    grads: &mut RlstmParams,
) -> CellGrads {
    let (rows, cols) = cache.c.shape();
    let n = rows * cols;

    // output gate
    let mut d_ao = Matrix::zeros(rows, cols);
    for k in 0..n {
        let o = cache.o.data()[k];
        d_ao.data_mut()[k] = grad_h.data()[k] * cache.tanh_c.data()[k] * sigmoid_grad_from_output(o);
    }
    matmul_tn_acc(&mut grads.w_oc, &cache.c_masked, &d_ao);
    d_ao.col_sum_into(&mut grads.b_o);
    let mut d_c_masked = Matrix::zeros(rows, cols);
    matmul_nt_acc(&mut d_c_masked, &d_ao, &p.w_oc);
    if let Some(m) = &cache.state_mask {
        d_c_masked.hadamard_inplace(m);
    }

    // cell update
    let mut d_af = Matrix::zeros(rows, cols);
    let mut d_c_prev = Matrix::zeros(rows, cols);
    let mut d_i = Matrix::zeros(rows, cols);
    let mut d_j = Matrix::zeros(rows, cols);
    for k in 0..n {
        let o = cache.o.data()[k];
        let tc = cache.tanh_c.data()[k];
        let dc = grad_c.data()[k] + grad_h.data()[k] * o * tanh_grad_from_output(tc) + d_c_masked.data()[k];
        let f = cache.f.data()[k];
        let dg = dc * cache.j.data()[k];
        let mut df = dc * cache.c_prev.data()[k];
        if cache.input_branch[k] {
            d_i.data_mut()[k] = dg;
        } else {
            df -= dg;
        }
        d_j.data_mut()[k] = dc * cache.g.data()[k];
        d_c_prev.data_mut()[k] = dc * f;
        d_af.data_mut()[k] = df * sigmoid_grad_from_output(f);
    }

    // forget gate reads u = i * j and h_prev
    matmul_tn_acc(&mut grads.w_fu, &cache.u, &d_af);
    let mut d_h_prev = Matrix::zeros(rows, cols);
    matmul_tn_acc(&mut grads.w_fh, &cache.h_prev, &d_af);
    d_af.col_sum_into(&mut grads.b_f);
    let mut d_u = Matrix::zeros(rows, cols);
    matmul_nt_acc(&mut d_u, &d_af, &p.w_fu);
    matmul_nt_acc(&mut d_h_prev, &d_af, &p.w_fh);

    let mut d_ai = Matrix::zeros(rows, cols);
    let mut d_aj = Matrix::zeros(rows, cols);
    for k in 0..n {
        let i = cache.i.data()[k];
        let j = cache.j.data()[k];
        let du = d_u.data()[k];
        d_ai.data_mut()[k] = (d_i.data()[k] + du * j) * sigmoid_grad_from_output(i);
        d_aj.data_mut()[k] = (d_j.data()[k] + du * i) * tanh_grad_from_output(j);
    }

    let mut d_x = Matrix::zeros(cache.x.rows(), cache.x.cols());
    matmul_nt_acc(&mut d_x, &d_ai, &p.w_ix);
    matmul_nt_acc(&mut d_x, &d_aj, &p.w_jx);
    matmul_nt_acc(&mut d_h_prev, &d_ai, &p.w_ih);
    matmul_nt_acc(&mut d_h_prev, &d_aj, &p.w_jh);
    matmul_tn_acc(&mut grads.w_ix, &cache.x, &d_ai);
    matmul_tn_acc(&mut grads.w_ih, &cache.h_prev, &d_ai);
    matmul_tn_acc(&mut grads.w_jx, &cache.x, &d_aj);
    matmul_tn_acc(&mut grads.w_jh, &cache.h_prev, &d_aj);
    d_ai.col_sum_into(&mut grads.b_i);
    d_aj.col_sum_into(&mut grads.b_j);

    CellGrads { c_prev: d_c_prev, h_prev: d_h_prev, x: d_x }
}
