use crate::cells::CellState;
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp_unchecked, Rng};

use super::{sample_masks, MaskSet, Model, ModelParams, WindowBatch};

/// Loss and gradients of one window.
#[derive(Clone, Debug)]
pub struct WindowLoss {
    /// Mean negative log-likelihood in nats per token.
    pub loss: f64,
    pub grads: ModelParams,
    /// States to carry into the next window (taken from the first sample).
    pub final_states: Vec<CellState>,
    /// Per-token log-likelihood under the sample average, indexed `t * B + b`.
    pub token_log_probs: Vec<f64>,
    /// Per-sample token log-likelihoods, `[d][t * B + b]`.
    pub sample_log_probs: Vec<Vec<f64>>,
}

impl Model {
    /// Multi-sample dropout objective: per token, the log of the probability
    /// averaged over `samples` independent mask draws. Every sample starts from
    /// the same carried states.
    pub fn loss_multisample(
        &self,
        params: &ModelParams,
        batch: &WindowBatch,
        states: &[CellState],
        rng: &mut Rng,
        samples: usize,
    ) -> Result<WindowLoss> {
        if samples < 1 {
            return Err(Error::InvalidArgument("at least one dropout sample is required".into()));
        }
        let masks = (0..samples)
            .map(|_| sample_masks(rng, self.config(), batch.batch, batch.steps))
            .collect::<Result<Vec<_>>>()?;
        self.loss_with_masks(params, batch, states, &masks)
    }

    /// The multi-sample objective with explicitly supplied masks, one set per sample.
    pub fn loss_with_masks(
        &self,
        params: &ModelParams,
        batch: &WindowBatch,
        states: &[CellState],
        masks: &[MaskSet],
    ) -> Result<WindowLoss> {
        if masks.is_empty() {
            return Err(Error::InvalidArgument("at least one dropout sample is required".into()));
        }
        let forwards = masks
            .iter()
            .map(|m| self.forward_window(params, batch, states, m))
            .collect::<Result<Vec<_>>>()?;
        let count = batch.num_tokens();
        let d = forwards.len();
        let ln_d = (d as f64).ln();

        let mut sample_log_probs = vec![vec![0.0; count]; d];
        for (s, fwd) in forwards.iter().enumerate() {
            for t in 0..batch.steps {
                for b in 0..batch.batch {
                    sample_log_probs[s][t * batch.batch + b] = fwd.target_log_prob(batch, b, t);
                }
            }
        }
        let mut token_log_probs = vec![0.0; count];
        let mut weights = vec![vec![0.0; count]; d];
        let mut column = vec![0.0; d];
        for k in 0..count {
            for s in 0..d {
                column[s] = sample_log_probs[s][k];
            }
            let lse = log_sum_exp_unchecked(&column);
            // the mean of probabilities lies between the extremes; rounding
            // in `lse - ln d` can step one ulp outside them
            let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            token_log_probs[k] = (lse - ln_d).clamp(lo, hi);
            for s in 0..d {
                weights[s][k] = -(column[s] - lse).exp() / count as f64;
            }
        }
        let mut total = 0.0;
        for b in 0..batch.batch {
            for t in 0..batch.steps {
                total += token_log_probs[t * batch.batch + b];
            }
        }
        let loss = -total / count as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite training loss {loss}")));
        }

        let mut grads = params.zeros_like();
        for (fwd, w) in forwards.iter().zip(&weights) {
            self.backward_window_targets(params, fwd, batch, w, &mut grads)?;
        }
        let final_states = forwards.into_iter().next().expect("one sample").final_states;
        Ok(WindowLoss { loss, grads, final_states, token_log_probs, sample_log_probs })
    }
}
