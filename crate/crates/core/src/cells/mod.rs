//! Recurrent cells: the LSTM (with optional input-gate cap) and the Rewired
//! LSTM, exposed both as free functions and as named [`Cell`] strategies.

mod lstm;
mod rlstm;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

pub use lstm::{lstm_backward, lstm_forward, LstmCache, LstmParams};
pub use rlstm::{rlstm_backward, rlstm_forward, RlstmCache, RlstmParams};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{matmul_acc, Matrix, Rng};
use crate::params::Parameters;

/// Recurrent pair `(c, h)`, one row per batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub c: Matrix,
    pub h: Matrix,
}

impl CellState {
    pub fn zeros(batch: usize, state: usize) -> Self {
        Self { c: Matrix::zeros(batch, state), h: Matrix::zeros(batch, state) }
    }
}

/// Gradients flowing out of one cell step.
#[derive(Clone, Debug)]
pub struct CellGrads {
    pub c_prev: Matrix,
    pub h_prev: Matrix,
    pub x: Matrix,
}

/// `x * wx + h * wh + b`, accumulated in that fixed order after the bias.
pub(crate) fn affine2(x: &Matrix, wx: &Matrix, h: &Matrix, wh: &Matrix, b: &Matrix) -> Matrix {
    let mut z = Matrix::zeros(x.rows(), wx.cols());
    z.add_row_broadcast(b);
    matmul_acc(&mut z, x, wx);
    matmul_acc(&mut z, h, wh);
    z
}

pub(crate) fn check_step_dims(op: &'static str, input: usize, state: usize, s: &CellState, x: &Matrix) -> Result<()> {
    if x.cols() != input {
        return dim_err(op, format!("input width {} but cell expects {input}", x.cols()));
    }
    if s.c.cols() != state || s.h.cols() != state {
        return dim_err(op, format!("state width {}/{} but cell expects {state}", s.c.cols(), s.h.cols()));
    }
    if s.c.rows() != x.rows() || s.h.rows() != x.rows() {
        return dim_err(op, format!("batch rows differ: x {} c {} h {}", x.rows(), s.c.rows(), s.h.rows()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellParams {
    Lstm(LstmParams),
    Rlstm(RlstmParams),
}

impl CellParams {
    pub fn state_size(&self) -> usize {
        match self {
            CellParams::Lstm(p) => p.state_size(),
            CellParams::Rlstm(p) => p.state_size(),
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            CellParams::Lstm(p) => p.input_size(),
            CellParams::Rlstm(p) => p.input_size(),
        }
    }

    pub fn forget_bias(&self) -> &Matrix {
        match self {
            CellParams::Lstm(p) => &p.b_f,
            CellParams::Rlstm(p) => &p.b_f,
        }
    }
}

impl Parameters for CellParams {
    fn tensors(&self) -> Vec<&Matrix> {
        match self {
            CellParams::Lstm(p) => p.tensors(),
            CellParams::Rlstm(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            CellParams::Lstm(p) => p.tensors_mut(),
            CellParams::Rlstm(p) => p.tensors_mut(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum CellCache {
    Lstm(LstmCache),
    Rlstm(RlstmCache),
}

/// A recurrent cell variant selectable by name.
pub trait Cell: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// All-zero parameters with this cell's layout.
    fn zeros(&self, input: usize, state: usize) -> CellParams;

    /// One step. `state_mask` is the per-layer state dropout mask; cells that
    /// do not consume it ignore it.
    fn forward(
        &self,
        p: &CellParams,
        state: &CellState,
        x: &Matrix,
        state_mask: Option<&Matrix>,
    ) -> Result<(CellState, CellCache)>;

    /// Backward pass of one step; parameter gradients accumulate into `grads`.
    fn backward(
        &self,
        p: &CellParams,
        cache: &CellCache,
        grad_c: &Matrix,
        grad_h: &Matrix,
        grads: &mut CellParams,
    ) -> Result<CellGrads>;

    /// Whether `|c| <= 1` is preserved by every step.
    fn bounded_state(&self) -> bool;
}

fn kind_mismatch<T>(cell: &str) -> Result<T> {
    Err(Error::InvalidArgument(format!("parameters or cache do not belong to a {cell} cell")))
}

/// Standard LSTM; `capped` replaces the input gate with `min(i, 1 - f)`.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub capped: bool,
}

impl Cell for LstmCell {
    fn name(&self) -> &'static str {
        if self.capped {
            "lstm"
        } else {
            "lstm-uncapped"
        }
    }

    fn zeros(&self, input: usize, state: usize) -> CellParams {
        CellParams::Lstm(LstmParams::zeros(input, state))
    }

    fn forward(
        &self,
        p: &CellParams,
        state: &CellState,
        x: &Matrix,
        _state_mask: Option<&Matrix>,
    ) -> Result<(CellState, CellCache)> {
        let CellParams::Lstm(p) = p else { return kind_mismatch(self.name()) };
        let (s, cache) = lstm_forward(p, state, x, self.capped)?;
        Ok((s, CellCache::Lstm(cache)))
    }

    fn backward(
        &self,
        p: &CellParams,
        cache: &CellCache,
        grad_c: &Matrix,
        grad_h: &Matrix,
        grads: &mut CellParams,
    ) -> Result<CellGrads> {
        match (p, cache, grads) {
            (CellParams::Lstm(p), CellCache::Lstm(cache), CellParams::Lstm(g)) => {
                Ok(lstm_backward(p, cache, grad_c, grad_h, g))
            }
            _ => kind_mismatch(self.name()),
        }
    }

    fn bounded_state(&self) -> bool {
        self.capped
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RlstmCell;

impl Cell for RlstmCell {
    fn name(&self) -> &'static str {
        "rlstm"
    }

    fn zeros(&self, input: usize, state: usize) -> CellParams {
        CellParams::Rlstm(RlstmParams::zeros(input, state))
    }

    fn forward(
        &self,
        p: &CellParams,
        state: &CellState,
        x: &Matrix,
        state_mask: Option<&Matrix>,
    ) -> Result<(CellState, CellCache)> {
        let CellParams::Rlstm(p) = p else { return kind_mismatch(self.name()) };
        let (s, cache) = rlstm_forward(p, state, x, state_mask)?;
        Ok((s, CellCache::Rlstm(cache)))
    }

    fn backward(
        &self,
        p: &CellParams,
        cache: &CellCache,
        grad_c: &Matrix,
        grad_h: &Matrix,
        grads: &mut CellParams,
    ) -> Result<CellGrads> {
        match (p, cache, grads) {
            (CellParams::Rlstm(p), CellCache::Rlstm(cache), CellParams::Rlstm(g)) => {
                Ok(rlstm_backward(p, cache, grad_c, grad_h, g))
            }
            _ => kind_mismatch(self.name()),
        }
    }

    fn bounded_state(&self) -> bool {
        true
    }
}

/// Name-indexed collection of cell strategies.
#[derive(Clone)]
pub struct CellRegistry {
    cells: BTreeMap<&'static str, Arc<dyn Cell>>,
}

impl Default for CellRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(LstmCell { capped: true }));
        r.register(Arc::new(LstmCell { capped: false }));
        r.register(Arc::new(RlstmCell));
        r
    }
}

impl CellRegistry {
    pub fn empty() -> Self {
        Self { cells: BTreeMap::new() }
    }

    /// Adds or replaces the cell under its own name.
    pub fn register(&mut self, cell: Arc<dyn Cell>) {
        self.cells.insert(cell.name(), cell);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Cell>> {
        self.cells.get(name).cloned().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown cell '{name}' (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.cells.keys().copied()
    }
}

/// Parameter initialisation.
///
/// Weight matrices are drawn from `U(-1/sqrt(n), 1/sqrt(n))` for state size
/// `n`. Forget-gate biases use Chrono init, `b_f ~ ln(U(1, t_max - 1))`;
/// all other biases start at zero.
pub fn init_cell_params(rng: &mut Rng, cell: &dyn Cell, input: usize, state: usize, t_max: f64) -> Result<CellParams> {
    if !(t_max > 2.0) {
        return Err(Error::InvalidArgument(format!("chrono init needs t_max > 2, got {t_max}")));
    }
    let mut p = cell.zeros(input, state);
    let bound = 1.0 / (state as f64).sqrt();
    for t in p.tensors_mut() {
        if t.rows() > 1 {
            uniform_fill(rng, t, bound);
        }
    }
    let b_f = match &mut p {
        CellParams::Lstm(p) => &mut p.b_f,
        CellParams::Rlstm(p) => &mut p.b_f,
    };
    for v in b_f.data_mut() {
        *v = rng.uniform_range(1.0, t_max - 1.0).ln();
    }
    Ok(p)
}

pub(crate) fn uniform_fill(rng: &mut Rng, m: &mut Matrix, bound: f64) {
    for v in m.data_mut() {
        *v = rng.uniform_range(-bound, bound);
    }
}
