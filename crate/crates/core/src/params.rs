//! Uniform access to the tensors of a parameter structure.
//!
//! Optimisers, weight averaging, clipping, checkpointing and the gradient
//! oracle all operate on the ordered tensor list exposed here, so a parameter
//! structure and its gradient share one type.

use crate::numerics::Matrix;

pub trait Parameters {
    /// Tensors in a fixed, documented order.
    fn tensors(&self) -> Vec<&Matrix>;

    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero_(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// Copies every entry into one flat vector.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every entry from a flat vector produced by [`Parameters::flatten`].
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length");
    }

    fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_sq()).sum::<f64>().sqrt()
    }

    fn scale_(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    /// `self += alpha * other`.
    fn axpy_(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.first_non_finite().is_none())
    }
}

/// Rescales `grads` so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale_(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Pair(Matrix, Matrix);

    impl Parameters for Pair {
        fn tensors(&self) -> Vec<&Matrix> {
            vec![&self.0, &self.1]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
            vec![&mut self.0, &mut self.1]
        }
    }

    #[test]
    fn flatten_round_trip() {
        let p = Pair(Matrix::filled(2, 2, 1.5), Matrix::row_vector(vec![3.0, 4.0]));
        let flat = p.flatten();
        let mut q = Pair(Matrix::zeros(2, 2), Matrix::zeros(1, 2));
        q.assign_flat(&flat);
        assert_eq!(q.flatten(), flat);
    }

    #[test]
    fn clipping_never_increases_norm() {
        let mut g = Pair(Matrix::row_vector(vec![3.0]), Matrix::row_vector(vec![4.0]));
        let before = clip_global_norm(&mut g, 10.0);
        assert_eq!(before, 5.0);
        assert_eq!(g.flatten(), vec![3.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        assert!((g.flatten()[0] - 0.6).abs() < 1e-15);
    }
}
