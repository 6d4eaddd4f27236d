use std::fmt;

use crate::data::{batchify, TokenStream};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_static, evaluate_static_batched};
use crate::model::{Model, ModelParams};
use crate::numerics::Rng;
use crate::params::clip_global_norm;

use super::{Checkpoint, RAdamState, TtaState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// BPTT window length.
    pub window: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Optimizer steps between validations; `None` means once per epoch.
    pub valid_every: Option<usize>,
    /// Rows used to score the validation stream. 1 gives exact left-to-right scoring.
    pub valid_batch: usize,
    /// Validations without improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub max_restarts: usize,
    /// A batch loss above this multiple of the best validation loss counts as divergence.
    pub divergence_factor: f64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Replace the loss of this window (1-based, counted over all attempts) with NaN.
    pub inject_nan_at: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            window: 128,
            epochs: 1,
            lr: 3e-3,
            beta1: RAdamState::BETA1,
            beta2: RAdamState::BETA2,
            eps: RAdamState::EPS,
            clip_norm: Some(10.0),
            valid_every: None,
            valid_batch: 1,
            patience: 0,
            max_restarts: 20,
            divergence_factor: 3.0,
            max_steps: None,
            inject_nan_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size < 1 || self.window < 1 || self.valid_batch < 1 {
            return bad("batch size, window and validation batch must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm must be positive".into());
        }
        if self.valid_every == Some(0) {
            return bad("validation interval must be positive".into());
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence factor must exceed 1".into());
        }
        Ok(())
    }
}

/// One validation event.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    /// Mean training loss since the previous record, nats per token.
    pub train_nats: f64,
    pub valid_nats: f64,
    pub tta_valid_nats: f64,
    pub lr: f64,
    pub restarts: u64,
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} train_nats={} valid_nats={} tta_valid_nats={} lr={} restarts={}",
            self.step, self.epoch, self.train_nats, self.valid_nats, self.tta_valid_nats, self.lr, self.restarts
        )
    }
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "step,epoch,train_nats,valid_nats,tta_valid_nats,lr,restarts";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.train_nats, self.valid_nats, self.tta_valid_nats, self.lr, self.restarts
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Hooks for progress reporting and external stopping rules.
pub trait TrainObserver {
    fn on_step(&mut self, _info: &StepInfo) -> Control {
        Control::Continue
    }

    fn on_validation(&mut self, _record: &MetricsRecord) -> Control {
        Control::Continue
    }

    /// Called after a divergence with the best checkpoint and the state
    /// training resumes from (restored weights, cut learning rate).
    fn on_restart(&mut self, _best: &Checkpoint, _resumed: &Checkpoint) {}
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Training state at the best validation event.
    pub best: Checkpoint,
    /// The weight average that achieved the best validation loss.
    pub averaged: ModelParams,
    /// Training state when the loop ended.
    pub last: Checkpoint,
    pub log: Vec<MetricsRecord>,
}

struct Run<'a> {
    model: &'a Model,
    cfg: &'a TrainConfig,
    valid: &'a TokenStream,
    params: ModelParams,
    radam: RAdamState,
    tta: TtaState<ModelParams>,
    rng: Rng,
    epoch: u64,
    restarts: u64,
    best: Checkpoint,
    averaged: ModelParams,
    stale: usize,
    log: Vec<MetricsRecord>,
    train_sum: f64,
    train_count: u64,
}

impl Run<'_> {
    fn snapshot(&self, best_valid: f64) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            params: self.params.clone(),
            radam: self.radam.clone(),
            tta: self.tta.clone(),
            rng: self.rng.state(),
            best_valid,
            epoch: self.epoch,
            restarts: self.restarts,
        }
    }

    fn valid_loss(&self, params: &ModelParams) -> Result<f64> {
        let r = if self.cfg.valid_batch == 1 {
            evaluate_static(self.model, params, self.valid, 1.0)?
        } else {
            evaluate_static_batched(self.model, params, self.valid, self.cfg.valid_batch, 1.0)?
        };
        Ok(r.nats_per_token)
    }

    fn step(&mut self, batch: &crate::model::WindowBatch, states: &[crate::cells::CellState], attempt: u64) -> Result<crate::model::WindowLoss> {
        let mut out = self.model.loss_multisample(
            &self.params,
            batch,
            states,
            &mut self.rng,
            self.model.config().dropout_samples,
        )?;
        if self.cfg.inject_nan_at == Some(attempt) {
            out.loss = f64::NAN;
        }
        if !out.loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite training loss at window {attempt}")));
        }
        let limit = self.cfg.divergence_factor * self.best.best_valid;
        if out.loss > limit {
            return Err(Error::Divergence(format!("training loss {} exceeds {limit}", out.loss)));
        }
        if let Some(c) = self.cfg.clip_norm {
            clip_global_norm(&mut out.grads, c);
        }
        self.radam.step(&mut self.params, &out.grads)?;
        self.tta.update(&self.params);
        Ok(out)
    }

    fn restart(&mut self, reason: &str) -> Result<()> {
        if self.restarts >= self.cfg.max_restarts as u64 {
            return Err(Error::Divergence(format!(
                "training diverged after {} restarts (limit {}): {reason}",
                self.restarts, self.cfg.max_restarts
            )));
        }
        let lr = self.radam.lr * 0.9;
        let ck = &self.best;
        self.params = ck.params.clone();
        self.radam = ck.radam.clone();
        self.radam.lr = lr;
        self.tta = ck.tta.clone();
        self.rng = Rng::from_state(&ck.rng);
        self.restarts += 1;
        Ok(())
    }

    fn validate(&mut self) -> Result<MetricsRecord> {
        let valid_nats = self.valid_loss(&self.params)?;
        let step = self.radam.step;
        let (avg, tta_valid_nats) = {
            let mut tta = std::mem::replace(&mut self.tta, TtaState::new(&self.params, 0));
            let r = tta.evaluate_and_swap(step, |p| self.valid_loss(p));
            self.tta = tta;
            r?
        };
        let record = MetricsRecord {
            step,
            epoch: self.epoch,
            train_nats: if self.train_count > 0 { self.train_sum / self.train_count as f64 } else { f64::NAN },
            valid_nats,
            tta_valid_nats,
            lr: self.radam.lr,
            restarts: self.restarts,
        };
        self.train_sum = 0.0;
        self.train_count = 0;
        if tta_valid_nats < self.best.best_valid {
            self.best = self.snapshot(tta_valid_nats);
            self.averaged = avg;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.log.push(record.clone());
        Ok(record)
    }
}

/// Runs the epoch loop over `train`, validating on `valid`.
///
/// Each window continues from the states of the previous one. On divergence
/// the best checkpoint (weights, optimizer, averages and generator) is
/// restored, the learning rate is multiplied by 0.9 and the carried states are
/// reset; the data position is not rewound.
pub fn train<O: TrainObserver + ?Sized>(
    model: &Model,
    cfg: &TrainConfig,
    train: &TokenStream,
    valid: &TokenStream,
    seed: u64,
    observer: &mut O,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if valid.len() < cfg.valid_batch.max(1) + 1 {
        return Err(Error::Data("validation stream is too short".into()));
    }
    let batched = batchify(train, cfg.batch_size)?;
    let per_epoch = batched.windows(cfg.window)?.len();
    if per_epoch == 0 {
        return Err(Error::Data("training stream too short for a single window".into()));
    }
    let valid_every = cfg.valid_every.map_or(per_epoch as u64, |v| v as u64);

    let mut rng = Rng::new(seed);
    let params = model.init_params(&mut rng)?;
    let mut radam = RAdamState::new(&params, cfg.lr);
    radam.beta1 = cfg.beta1;
    radam.beta2 = cfg.beta2;
    radam.eps = cfg.eps;
    let tta = TtaState::new(&params, 0);
    let mut run = Run {
        model,
        cfg,
        valid,
        averaged: params.clone(),
        best: Checkpoint {
            config: model.config().clone(),
            params: params.clone(),
            radam: radam.clone(),
            tta: tta.clone(),
            rng: rng.state(),
            best_valid: f64::INFINITY,
            epoch: 0,
            restarts: 0,
        },
        params,
        radam,
        tta,
        rng,
        epoch: 0,
        restarts: 0,
        stale: 0,
        log: Vec::new(),
        train_sum: 0.0,
        train_count: 0,
    };

    let mut attempt = 0u64;
    let mut last_validated = 0u64;
    'epochs: for epoch in 0..cfg.epochs as u64 {
        run.epoch = epoch;
        let mut states = model.initial_states(cfg.batch_size);
        for window in batched.windows(cfg.window)? {
            attempt += 1;
            match run.step(&window, &states, attempt) {
                Ok(out) => {
                    states = out.final_states;
                    run.train_sum += out.loss;
                    run.train_count += 1;
                }
                Err(Error::Divergence(reason)) => {
                    run.restart(&reason)?;
                    states = model.initial_states(cfg.batch_size);
                    observer.on_restart(&run.best, &run.snapshot(run.best.best_valid));
                    continue;
                }
                Err(e) => return Err(e),
            }
            let step = run.radam.step;
            let info = StepInfo { step, epoch, loss: run.train_sum / run.train_count as f64, lr: run.radam.lr };
            let mut stop = observer.on_step(&info) == Control::Stop;
            if step.is_multiple_of(valid_every) {
                let record = run.validate()?;
                last_validated = step;
                stop |= observer.on_validation(&record) == Control::Stop;
                stop |= cfg.patience > 0 && run.stale >= cfg.patience;
            }
            stop |= cfg.max_steps.is_some_and(|m| step >= m);
            if stop {
                break 'epochs;
            }
        }
    }
    if run.radam.step > 0 && run.radam.step != last_validated {
        let record = run.validate()?;
        observer.on_validation(&record);
    }
    let last = run.snapshot(run.best.best_valid);
    Ok(TrainOutcome { best: run.best, averaged: run.averaged, last, log: run.log })
}
