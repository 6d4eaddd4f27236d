use crate::error::{Error, Result};
use crate::params::Parameters;

/// Running mean of every iterate since `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tail<P> {
    pub mean: P,
    pub start: u64,
    pub count: u64,
}

impl<P: Parameters + Clone> Tail<P> {
    fn empty(like: &P, start: u64) -> Self {
        let mut mean = like.clone();
        mean.zero_();
        Self { mean, start, count: 0 }
    }

    fn push(&mut self, params: &P) {
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        for (m, p) in self.mean.tensors_mut().into_iter().zip(params.tensors()) {
            for (mi, &pi) in m.data_mut().iter_mut().zip(p.data()) {
                *mi += (pi - *mi) * inv;
            }
        }
    }
}

/// Two-tailed averaging: a long and a short running mean of the iterates.
#[derive(Clone, Debug, PartialEq)]
pub struct TtaState<P> {
    pub long: Tail<P>,
    pub short: Tail<P>,
}

impl<P: Parameters + Clone> TtaState<P> {
    /// Both tails empty and starting at `step`.
    pub fn new(like: &P, step: u64) -> Self {
        Self { long: Tail::empty(like, step), short: Tail::empty(like, step) }
    }

    /// Adds the current iterate to both tails.
    pub fn update(&mut self, params: &P) {
        self.long.push(params);
        self.short.push(params);
    }

    /// Scores both tail means; returns the better one with its loss. When the
    /// short tail is at least as good it becomes the long tail and a fresh
    /// short tail starts at `step`.
    pub fn evaluate_and_swap<F>(&mut self, step: u64, mut loss: F) -> Result<(P, f64)>
    where
        F: FnMut(&P) -> Result<f64>,
    {
        if self.long.count == 0 || self.short.count == 0 {
            return Err(Error::InvalidArgument("both averaging tails must hold at least one iterate".into()));
        }
        let long_loss = loss(&self.long.mean)?;
        let short_loss = loss(&self.short.mean)?;
        if short_loss <= long_loss {
            let fresh = Tail::empty(&self.short.mean, step);
            self.long = std::mem::replace(&mut self.short, fresh);
            Ok((self.long.mean.clone(), short_loss))
        } else {
            Ok((self.long.mean.clone(), long_loss))
        }
    }
}

pub fn tta_update<P: Parameters + Clone>(state: &mut TtaState<P>, params: &P) {
    state.update(params)
}

pub fn tta_evaluate_and_swap<P, F>(state: &mut TtaState<P>, step: u64, loss: F) -> Result<(P, f64)>
where
    P: Parameters + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    state.evaluate_and_swap(step, loss)
}
