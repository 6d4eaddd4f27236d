//! Mogrification: `r` rounds of mutual multiplicative gating between the
//! previous recurrent state `h` (width `n`) and the cell input `x` (width `m`)
//! before the cell update.
//!
//! With `x^-1 = x` and `h^0 = h`, odd rounds rescale the input,
//! `x^i = 2 sigmoid(Q^i h^(i-1)) * x^(i-2)`, and even rounds rescale the
//! state, `h^i = 2 sigmoid(R^i x^(i-1)) * h^(i-2)`. The result is the last
//! rung of each ladder: `h^(2 floor(r/2))` and `x^(2 floor((r+1)/2) - 1)`.

use crate::cells::uniform_fill;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{matmul, matmul_nt_acc, matmul_tn_acc, sigmoid, sigmoid_grad_from_output, Matrix, Rng};
use crate::params::Parameters;

/// Default number of rounds.
pub const DEFAULT_ROUNDS: usize = 4;

/// Default factor rank for a state size `n` when low-rank gates are enabled.
pub fn default_rank(n: usize) -> usize {
    (n / 4).max(1)
}

/// Weight of one gating round, input-major.
#[derive(Clone, Debug, PartialEq)]
pub enum GateWeight {
    Full(Matrix),
    /// `left * right`, with `left: in x k` and `right: k x out`.
    LowRank { left: Matrix, right: Matrix },
}

impl GateWeight {
    pub fn in_dim(&self) -> usize {
        match self {
            GateWeight::Full(w) => w.rows(),
            GateWeight::LowRank { left, .. } => left.rows(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            GateWeight::Full(w) => w.cols(),
            GateWeight::LowRank { right, .. } => right.cols(),
        }
    }

    /// The equivalent dense matrix.
    pub fn dense(&self) -> Matrix {
        match self {
            GateWeight::Full(w) => w.clone(),
            GateWeight::LowRank { left, right } => matmul(left, right),
        }
    }

    fn zeros_like(&self) -> GateWeight {
        match self {
            GateWeight::Full(w) => GateWeight::Full(Matrix::zeros(w.rows(), w.cols())),
            GateWeight::LowRank { left, right } => GateWeight::LowRank {
                left: Matrix::zeros(left.rows(), left.cols()),
                right: Matrix::zeros(right.rows(), right.cols()),
            },
        }
    }

    /// Returns `v * W` and, for low-rank weights, the intermediate `v * left`.
    fn apply(&self, v: &Matrix) -> (Matrix, Option<Matrix>) {
        match self {
            GateWeight::Full(w) => (matmul(v, w), None),
            GateWeight::LowRank { left, right } => {
                let mid = matmul(v, left);
                (matmul(&mid, right), Some(mid))
            }
        }
    }

    /// Accumulates weight gradients and returns the gradient w.r.t. `v`.
    fn backward(&self, v: &Matrix, mid: Option<&Matrix>, d_out: &Matrix, grad: &mut GateWeight) -> Matrix {
        let mut d_v = Matrix::zeros(v.rows(), v.cols());
        match (self, grad) {
            (GateWeight::Full(w), GateWeight::Full(gw)) => {
                matmul_tn_acc(gw, v, d_out);
                matmul_nt_acc(&mut d_v, d_out, w);
            }
            (GateWeight::LowRank { left, right }, GateWeight::LowRank { left: gl, right: gr }) => {
                let mid = mid.expect("low-rank cache holds the intermediate product");
                matmul_tn_acc(gr, mid, d_out);
                let mut d_mid = Matrix::zeros(mid.rows(), mid.cols());
                matmul_nt_acc(&mut d_mid, d_out, right);
                matmul_tn_acc(gl, v, &d_mid);
                matmul_nt_acc(&mut d_v, &d_mid, left);
            }
            _ => panic!("gradient layout does not match weight layout"),
        }
        d_v
    }

    fn tensors(&self) -> Vec<&Matrix> {
        match self {
            GateWeight::Full(w) => vec![w],
            GateWeight::LowRank { left, right } => vec![left, right],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            GateWeight::Full(w) => vec![w],
            GateWeight::LowRank { left, right } => vec![left, right],
        }
    }
}

/// Per-layer mogrifier weights. `q` holds the odd rounds (`n -> m`), `r` the
/// even rounds (`m -> n`).
#[derive(Clone, Debug, PartialEq)]
pub struct MogrifierParams {
    pub rounds: usize,
    pub q: Vec<GateWeight>,
    pub r: Vec<GateWeight>,
}

impl MogrifierParams {
    /// All-zero weights; `rank = None` gives full-rank gates.
    pub fn zeros(rounds: usize, state: usize, input: usize, rank: Option<usize>) -> Self {
        let make = |from: usize, to: usize| match rank {
            None => GateWeight::Full(Matrix::zeros(from, to)),
            Some(k) => GateWeight::LowRank { left: Matrix::zeros(from, k), right: Matrix::zeros(k, to) },
        };
        let q = (0..rounds.div_ceil(2)).map(|_| make(state, input)).collect();
        let r = (0..rounds / 2).map(|_| make(input, state)).collect();
        Self { rounds, q, r }
    }

    /// Uniform `U(-1/sqrt(n), 1/sqrt(n))` init of every matrix (or factor).
    pub fn init(rng: &mut Rng, rounds: usize, state: usize, input: usize, rank: Option<usize>) -> Result<Self> {
        if rank == Some(0) {
            return Err(Error::InvalidArgument("mogrifier rank must be at least 1".into()));
        }
        let mut p = Self::zeros(rounds, state, input, rank);
        let bound = 1.0 / (state as f64).sqrt();
        for t in p.tensors_mut() {
            uniform_fill(rng, t, bound);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            rounds: self.rounds,
            q: self.q.iter().map(GateWeight::zeros_like).collect(),
            r: self.r.iter().map(GateWeight::zeros_like).collect(),
        }
    }

    /// Weight of round `i` (1-based).
    pub fn round_weight(&self, i: usize) -> &GateWeight {
        if i % 2 == 1 {
            &self.q[(i - 1) / 2]
        } else {
            &self.r[i / 2 - 1]
        }
    }

    fn round_weight_mut(&mut self, i: usize) -> &mut GateWeight {
        if i % 2 == 1 {
            &mut self.q[(i - 1) / 2]
        } else {
            &mut self.r[i / 2 - 1]
        }
    }

    fn check(&self) -> Result<()> {
        if self.q.len() != self.rounds.div_ceil(2) || self.r.len() != self.rounds / 2 {
            return dim_err(
                "mogrifier",
                format!("{} rounds need {} Q and {} R matrices", self.rounds, self.rounds.div_ceil(2), self.rounds / 2),
            );
        }
        Ok(())
    }
}

impl Parameters for MogrifierParams {
    /// Round order: Q1, R2, Q3, R4, ...
    fn tensors(&self) -> Vec<&Matrix> {
        (1..=self.rounds).flat_map(|i| self.round_weight(i).tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        let (q, r) = (&mut self.q, &mut self.r);
        let mut qi = q.iter_mut();
        let mut ri = r.iter_mut();
        for i in 1..=self.rounds {
            let w = if i % 2 == 1 { qi.next() } else { ri.next() };
            out.extend(w.expect("round count matches weights").tensors_mut());
        }
        out
    }
}

#[derive(Clone, Debug)]
struct RoundCache {
    /// The vector fed through the round's weight (`h^(i-1)` or `x^(i-1)`).
    source: Matrix,
    mid: Option<Matrix>,
    gate: Matrix,
    /// The rung being rescaled (`x^(i-2)` or `h^(i-2)`).
    scaled: Matrix,
}

/// Intermediate values of one mogrification.
#[derive(Clone, Debug)]
pub struct MogrifyCache {
    rounds: Vec<RoundCache>,
    /// `(ladder index, value)` for `x^-1, x^1, x^3, ...`
    pub x_ladder: Vec<(i64, Matrix)>,
    /// `(ladder index, value)` for `h^0, h^2, ...`
    pub h_ladder: Vec<(i64, Matrix)>,
}

/// Runs the gating ladder. Returns `(h_out, x_out, cache)`.
pub fn mogrify_forward(p: &MogrifierParams, h: &Matrix, x: &Matrix) -> Result<(Matrix, Matrix, MogrifyCache)> {
    p.check()?;
    if h.rows() != x.rows() {
        return dim_err("mogrify", format!("batch rows differ: h {} x {}", h.rows(), x.rows()));
    }
    if let Some(q) = p.q.first() {
        if q.in_dim() != h.cols() || q.out_dim() != x.cols() {
            return dim_err(
                "mogrify",
                format!("Q is {}->{} but h is {} wide and x is {} wide", q.in_dim(), q.out_dim(), h.cols(), x.cols()),
            );
        }
    }
    let mut x_cur = x.clone();
    let mut h_cur = h.clone();
    let mut x_ladder = vec![(-1, x.clone())];
    let mut h_ladder = vec![(0, h.clone())];
    let mut rounds = Vec::with_capacity(p.rounds);
    for i in 1..=p.rounds {
        let w = p.round_weight(i);
        let (source, scaled) = if i % 2 == 1 { (&h_cur, &x_cur) } else { (&x_cur, &h_cur) };
        if w.in_dim() != source.cols() || w.out_dim() != scaled.cols() {
            return dim_err("mogrify", format!("round {i} weight is {}->{}", w.in_dim(), w.out_dim()));
        }
        let (mut gate, mid) = w.apply(source);
        gate.map_inplace(sigmoid);
        let mut next = scaled.clone();
        for (v, &s) in next.data_mut().iter_mut().zip(gate.data()) {
            *v *= 2.0 * s;
        }
        rounds.push(RoundCache { source: source.clone(), mid, gate, scaled: scaled.clone() });
        if i % 2 == 1 {
            x_ladder.push((i as i64, next.clone()));
            x_cur = next;
        } else {
            h_ladder.push((i as i64, next.clone()));
            h_cur = next;
        }
    }
    Ok((h_cur, x_cur, MogrifyCache { rounds, x_ladder, h_ladder }))
}

/// Gradients through the ladder. Weight gradients accumulate into `grads`;
/// returns `(grad_h, grad_x)` for the original inputs.
pub fn mogrify_backward(
    p: &MogrifierParams,
    cache: &MogrifyCache,
    grad_h_out: &Matrix,
    grad_x_out: &Matrix,
    grads: &mut MogrifierParams,
) -> (Matrix, Matrix) {
    let mut gh = grad_h_out.clone();
    let mut gx = grad_x_out.clone();
    for i in (1..=p.rounds).rev() {
        let rc = &cache.rounds[i - 1];
        let (g_out, g_src) = if i % 2 == 1 { (&mut gx, &mut gh) } else { (&mut gh, &mut gx) };
        // out = 2 s * scaled
        let mut d_a = Matrix::zeros(rc.gate.rows(), rc.gate.cols());
        for k in 0..d_a.len() {
            let s = rc.gate.data()[k];
            let go = g_out.data()[k];
            d_a.data_mut()[k] = go * 2.0 * rc.scaled.data()[k] * sigmoid_grad_from_output(s);
            g_out.data_mut()[k] = go * 2.0 * s;
        }
        let d_src = p.round_weight(i).backward(&rc.source, rc.mid.as_ref(), &d_a, grads.round_weight_mut(i));
        g_src.add_assign(&d_src);
    }
    (gh, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_mat(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn zero_rounds_is_identity() {
        let mut rng = Rng::new(1);
        let p = MogrifierParams::zeros(0, 3, 5, None);
        let h = rand_mat(&mut rng, 2, 3);
        let x = rand_mat(&mut rng, 2, 5);
        let (ho, xo, cache) = mogrify_forward(&p, &h, &x).unwrap();
        assert_eq!((ho, xo), (h.clone(), x.clone()));
        let (gh, gx) = mogrify_backward(&p, &cache, &h, &x, &mut p.zeros_like());
        assert_eq!((gh, gx), (h, x));
    }

    #[test]
    fn zero_weights_are_identity_for_any_rounds() {
        let mut rng = Rng::new(2);
        for r in 0..8 {
            for rank in [None, Some(2)] {
                let p = MogrifierParams::zeros(r, 4, 6, rank);
                let h = rand_mat(&mut rng, 3, 4);
                let x = rand_mat(&mut rng, 3, 6);
                let (ho, xo, _) = mogrify_forward(&p, &h, &x).unwrap();
                assert_eq!(ho, h);
                assert_eq!(xo, x);
            }
        }
    }

    #[test]
    fn matrix_counts() {
        for r in 0..7 {
            let p = MogrifierParams::zeros(r, 3, 3, None);
            assert_eq!(p.q.len(), r.div_ceil(2));
            assert_eq!(p.r.len(), r / 2);
        }
    }

    #[test]
    fn output_index_law() {
        let mut rng = Rng::new(3);
        for r in 0..=6usize {
            let p = MogrifierParams::init(&mut rng, r, 4, 4, None).unwrap();
            let h = rand_mat(&mut rng, 1, 4);
            let x = rand_mat(&mut rng, 1, 4);
            let (ho, xo, cache) = mogrify_forward(&p, &h, &x).unwrap();
            let hi = 2 * (r as i64 / 2);
            let xi = 2 * ((r as i64 + 1) / 2) - 1;
            let h_rung = cache.h_ladder.iter().find(|(k, _)| *k == hi).unwrap();
            let x_rung = cache.x_ladder.iter().find(|(k, _)| *k == xi).unwrap();
            assert_eq!(ho, h_rung.1);
            assert_eq!(xo, x_rung.1);
            assert_eq!(cache.h_ladder.last().unwrap().0, hi);
            assert_eq!(cache.x_ladder.last().unwrap().0, xi);
        }
    }

    #[test]
    fn low_rank_equals_dense_product() {
        let mut rng = Rng::new(4);
        let low = MogrifierParams::init(&mut rng, 4, 6, 6, Some(2)).unwrap();
        let dense = MogrifierParams {
            rounds: 4,
            q: low.q.iter().map(|w| GateWeight::Full(w.dense())).collect(),
            r: low.r.iter().map(|w| GateWeight::Full(w.dense())).collect(),
        };
        let h = rand_mat(&mut rng, 2, 6);
        let x = rand_mat(&mut rng, 2, 6);
        let (h1, x1, c1) = mogrify_forward(&low, &h, &x).unwrap();
        let (h2, x2, c2) = mogrify_forward(&dense, &h, &x).unwrap();
        assert!(h1.zip_map(&h2, |a, b| (a - b).abs()).max_abs() < 1e-14);
        assert!(x1.zip_map(&x2, |a, b| (a - b).abs()).max_abs() < 1e-14);
        let gho = rand_mat(&mut rng, 2, 6);
        let gxo = rand_mat(&mut rng, 2, 6);
        let (gh1, gx1) = mogrify_backward(&low, &c1, &gho, &gxo, &mut low.zeros_like());
        let (gh2, gx2) = mogrify_backward(&dense, &c2, &gho, &gxo, &mut dense.zeros_like());
        assert!(gh1.zip_map(&gh2, |a, b| (a - b).abs()).max_abs() < 1e-13);
        assert!(gx1.zip_map(&gx2, |a, b| (a - b).abs()).max_abs() < 1e-13);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = MogrifierParams::zeros(2, 3, 4, None);
        assert!(mogrify_forward(&p, &Matrix::zeros(1, 3), &Matrix::zeros(1, 5)).is_err());
        assert!(mogrify_forward(&p, &Matrix::zeros(2, 3), &Matrix::zeros(1, 4)).is_err());
    }
}
