use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::params::Parameters;

/// Rectified Adam hyperparameters and moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct RAdamState {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

/// Which update rule a step used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RAdamBranch {
    /// Bias-corrected momentum only; the variance estimate is not yet trusted.
    Momentum,
    Rectified,
}

/// Maximum length of the approximated simple moving average.
pub fn rho_inf(beta2: f64) -> f64 {
    2.0 / (1.0 - beta2) - 1.0
}

pub fn rho_t(beta2: f64, t: u64) -> f64 {
    let bt = beta2.powf(t as f64);
    rho_inf(beta2) - 2.0 * t as f64 * bt / (1.0 - bt)
}

pub fn branch_at(beta2: f64, t: u64) -> RAdamBranch {
    if rho_t(beta2, t) > 4.0 {
        RAdamBranch::Rectified
    } else {
        RAdamBranch::Momentum
    }
}

/// Variance rectification term `r_t`.
pub fn rectifier(beta2: f64, t: u64) -> f64 {
    let ri = rho_inf(beta2);
    let rt = rho_t(beta2, t);
    (((rt - 4.0) * (rt - 2.0) * ri) / ((ri - 4.0) * (ri - 2.0) * rt)).sqrt()
}

impl RAdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    /// Zeroed moments shaped like `params`, default betas and epsilon.
    pub fn new<P: Parameters>(params: &P, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros, beta1: Self::BETA1, beta2: Self::BETA2, eps: Self::EPS, lr }
    }

    /// Applies one update to `params` in place. A non-finite gradient leaves
    /// both parameters and state untouched and reports divergence.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<RAdamBranch> {
        let gs = grads.tensors();
        if gs.len() != self.m.len() || gs.iter().zip(&self.m).any(|(g, m)| !g.same_shape(m)) {
            return Err(Error::DimensionMismatch { op: "radam_step", detail: "gradients do not match optimizer state".into() });
        }
        if let Some((k, i)) = gs.iter().enumerate().find_map(|(k, g)| g.first_non_finite().map(|i| (k, i))) {
            return Err(Error::Divergence(format!("non-finite gradient in tensor {k} at index {i}")));
        }
        let mut ps = params.tensors_mut();
        if ps.len() != gs.len() || ps.iter().zip(&gs).any(|(p, g)| !p.same_shape(g)) {
            return Err(Error::DimensionMismatch { op: "radam_step", detail: "parameters do not match gradients".into() });
        }

        self.step += 1;
        let t = self.step;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powf(t as f64);
        let bc2 = 1.0 - b2.powf(t as f64);
        let branch = branch_at(b2, t);
        let r = match branch {
            RAdamBranch::Rectified => rectifier(b2, t),
            RAdamBranch::Momentum => 0.0,
        };
        for ((p, g), (m, v)) in ps.iter_mut().zip(&gs).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = p.data_mut();
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                *pi -= match branch {
                    RAdamBranch::Rectified => self.lr * r * m_hat / ((*vi / bc2).sqrt() + self.eps),
                    RAdamBranch::Momentum => self.lr * m_hat,
                };
            }
        }
        Ok(branch)
    }
}

/// Functional form of [`RAdamState::step`].
pub fn radam_step<P: Parameters>(state: &mut RAdamState, params: &mut P, grads: &P) -> Result<RAdamBranch> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Vec1(Matrix);

    impl Parameters for Vec1 {
        fn tensors(&self) -> Vec<&Matrix> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn first_step_momentum_only() {
        assert!((rho_inf(0.999) - 1999.0).abs() < 1e-9);
        assert!((rho_t(0.999, 1) - 1.0).abs() < 1e-9);
        let mut p = Vec1(Matrix::filled(1, 2, 1.0));
        let g = Vec1(Matrix::from_vec(1, 2, vec![0.5, -2.0]).unwrap());
        let mut s = RAdamState::new(&p, 0.1);
        assert_eq!(s.step(&mut p, &g).unwrap(), RAdamBranch::Momentum);
        // m_hat equals g on the first step
        assert!((p.0.get(0, 0) - 0.95).abs() < 1e-15);
        assert!((p.0.get(0, 1) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn branch_switch_at_step_five() {
        let branches: Vec<_> = (1..=6).map(|t| branch_at(0.999, t)).collect();
        use RAdamBranch::*;
        assert_eq!(branches, [Momentum, Momentum, Momentum, Momentum, Rectified, Rectified]);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Vec1(Matrix::filled(2, 2, 0.3));
        let before = p.0.clone();
        let g = Vec1(Matrix::zeros(2, 2));
        let mut s = RAdamState::new(&p, 1.0);
        for _ in 0..8 {
            s.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.0, before);
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut p = Vec1(Matrix::filled(1, 3, 1.0));
        let g = Vec1(Matrix::from_vec(1, 3, vec![1.0, f64::NAN, 0.0]).unwrap());
        let mut s = RAdamState::new(&p, 0.1);
        let before = (p.0.clone(), s.clone());
        assert!(matches!(s.step(&mut p, &g), Err(Error::Divergence(_))));
        assert_eq!((p.0, s), before);
    }

    #[test]
    fn rectified_step_matches_formula() {
        let mut p = Vec1(Matrix::filled(1, 1, 0.0));
        let g = Vec1(Matrix::filled(1, 1, 1.0));
        let mut s = RAdamState::new(&p, 0.01);
        for _ in 0..4 {
            s.step(&mut p, &g).unwrap();
        }
        let before = p.0.get(0, 0);
        s.step(&mut p, &g).unwrap();
        // constant gradient: m_hat = v_hat = 1
        let expected = 0.01 * rectifier(0.999, 5) / (1.0 + 1e-8);
        assert!(((before - p.0.get(0, 0)) - expected).abs() < 1e-15);
    }
}
