use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the sigmoid expressed through its output `s = sigmoid(x)`.
#[inline]
pub fn sigmoid_grad_from_output(s: f64) -> f64 {
    s * (1.0 - s)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

/// Derivative of tanh expressed through its output `t = tanh(x)`.
#[inline]
pub fn tanh_grad_from_output(t: f64) -> f64 {
    1.0 - t * t
}

/// Numerically stable `ln(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("log_sum_exp of an empty slice".into()));
    }
    Ok(log_sum_exp_unchecked(xs))
}

pub(crate) fn log_sum_exp_unchecked(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let mut out = log_softmax(logits, temperature)?;
    for v in &mut out {
        *v = v.exp();
    }
    Ok(out)
}

/// Log-softmax of `logits / temperature`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("softmax temperature must be positive, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    let mut out = logits.to_vec();
    log_softmax_inplace(&mut out, temperature);
    Ok(out)
}

/// In-place log-softmax of `row / temperature`. Caller guarantees a positive temperature.
pub(crate) fn log_softmax_inplace(row: &mut [f64], temperature: f64) {
    if temperature != 1.0 {
        for v in row.iter_mut() {
            *v /= temperature;
        }
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v -= max;
        s += v.exp();
    }
    let ls = s.ln();
    for v in row.iter_mut() {
        *v -= ls;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        let s = sigmoid(0.3);
        assert_eq!(sigmoid_grad_from_output(s), s * (1.0 - s));
    }

    #[test]
    fn tanh_values() {
        assert_eq!(tanh(0.0), 0.0);
        let t = tanh(0.7);
        assert_eq!(tanh_grad_from_output(t), 1.0 - t * t);
    }

    #[test]
    fn lse_cases() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[-3.25]).unwrap(), -3.25);
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0; 4], 1.0).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let p = softmax(&[1f64.ln(), 3f64.ln()], 1.0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -1.0).is_err());
    }

    fn entropy(p: &[f64]) -> f64 {
        -p.iter().map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 }).sum::<f64>()
    }

    #[test]
    fn temperature_raises_entropy_towards_uniform() {
        let mut rng = Rng::new(5);
        let logits: Vec<f64> = (0..10).map(|_| rng.uniform_range(-4.0, 4.0)).collect();
        let h: Vec<f64> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&t| entropy(&softmax(&logits, t).unwrap()))
            .collect();
        assert!(h[0] < h[1] && h[1] < h[2]);
        assert!((h[2] - 10f64.ln()).abs() < 1e-2);
    }

    #[test]
    fn softmax_normalised_and_shift_invariant() {
        let mut rng = Rng::new(6);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..17).map(|_| rng.uniform_range(-30.0, 30.0)).collect();
            let shifted: Vec<f64> = logits.iter().map(|v| v + 123.5).collect();
            let p = softmax(&logits, 1.0).unwrap();
            let q = softmax(&shifted, 1.0).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
