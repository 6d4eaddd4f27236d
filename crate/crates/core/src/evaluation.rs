//! Deterministic evaluation, temperature tuning and dynamic evaluation.

use std::fmt;
use std::f64::consts::LN_2;

use crate::cells::CellState;
use crate::data::{batchify, TokenStream};
use crate::error::{Error, Result};
use crate::model::{MaskSet, Model, ModelParams, WindowBatch};
use crate::params::{clip_global_norm, Parameters};

/// Tokens per forward call when scoring a single long stream.
const CHUNK: usize = 512;

/// `(perplexity, bits per token)` from nats per token.
pub fn convert_metrics(nats_per_token: f64) -> (f64, f64) {
    (nats_per_token.exp(), nats_per_token / LN_2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradNorm {
    None,
    /// Clip the segment gradient to this global norm.
    Clip(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynevalConfig {
    /// Tokens scored between updates.
    pub segment: usize,
    pub lr: f64,
    /// Pull toward the original weights, in `[0, 1)`.
    pub decay: f64,
    pub norm: GradNorm,
}

impl DynevalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment < 1 {
            return Err(Error::InvalidArgument("dynamic evaluation segment must be at least 1 token".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("dynamic evaluation rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::InvalidArgument(format!("dynamic evaluation decay must lie in [0, 1), got {}", self.decay)));
        }
        if let GradNorm::Clip(c) = self.norm {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("gradient clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub total_nats: f64,
    pub tokens: usize,
    pub nats_per_token: f64,
    pub perplexity: f64,
    pub bpc: f64,
    pub temperature: f64,
    pub dyneval: Option<DynevalConfig>,
}

impl EvalReport {
    pub fn new(total_nats: f64, tokens: usize, temperature: f64, dyneval: Option<DynevalConfig>) -> Self {
        let nats_per_token = total_nats / tokens as f64;
        let (perplexity, bpc) = convert_metrics(nats_per_token);
        Self { total_nats, tokens, nats_per_token, perplexity, bpc, temperature, dyneval }
    }
}

impl fmt::Display for EvalReport {
    /// One self-describing `key=value` record.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total_nats={} tokens={} nats_per_token={} perplexity={} bpc={} temperature={}",
            self.total_nats, self.tokens, self.nats_per_token, self.perplexity, self.bpc, self.temperature
        )?;
        if let Some(d) = &self.dyneval {
            write!(f, " dyneval_segment={} dyneval_lr={} dyneval_decay={}", d.segment, d.lr, d.decay)?;
            match d.norm {
                GradNorm::None => write!(f, " dyneval_norm=none")?,
                GradNorm::Clip(c) => write!(f, " dyneval_norm={c}")?,
            }
        }
        Ok(())
    }
}

fn check_stream(stream: &TokenStream) -> Result<()> {
    if stream.len() < 2 {
        return Err(Error::Data("evaluation needs a stream of at least two tokens".into()));
    }
    Ok(())
}

/// Scores every target of `stream` left to right with batch size 1, carrying
/// state across the whole stream. Nats are summed in token order.
pub fn evaluate_static(model: &Model, params: &ModelParams, stream: &TokenStream, temperature: f64) -> Result<EvalReport> {
    check_stream(stream)?;
    let ids = &stream.ids;
    let mut states = model.initial_states(1);
    let mut total = 0.0;
    let mut pos = 0;
    while pos + 1 < ids.len() {
        let end = (pos + CHUNK).min(ids.len() - 1);
        let (lp, next) = model.predict_chunk(params, &ids[pos..end], &states, temperature)?;
        for (k, &target) in ids[pos + 1..=end].iter().enumerate() {
            total -= lp.get(k, target);
        }
        states = next;
        pos = end;
    }
    Ok(EvalReport::new(total, ids.len() - 1, temperature, None))
}

/// Static evaluation over `rows` contiguous substreams scored in parallel.
/// Faster than [`evaluate_static`] but drops the remainder of the stream and
/// restarts state at each row boundary, so its numbers differ slightly.
pub fn evaluate_static_batched(
    model: &Model,
    params: &ModelParams,
    stream: &TokenStream,
    rows: usize,
    temperature: f64,
) -> Result<EvalReport> {
    check_stream(stream)?;
    let batched = batchify(stream, rows)?;
    if batched.num_targets() == 0 {
        return Err(Error::Data(format!("stream too short for {rows} evaluation rows")));
    }
    let mut states = model.initial_states(rows);
    let mut total = 0.0;
    for w in batched.windows(CHUNK / rows.clamp(1, CHUNK))? {
        let masks = MaskSet::ones(w.steps, model.config().layers);
        let fwd = model.forward_impl(params, &w, &states, &masks, temperature, false)?;
        for b in 0..w.batch {
            for t in 0..w.steps {
                total -= fwd.target_log_prob(&w, b, t);
            }
        }
        states = fwd.final_states;
    }
    Ok(EvalReport::new(total, batched.num_targets(), temperature, None))
}

/// `0.70, 0.72, ..., 1.30`.
pub fn default_temperature_grid() -> Vec<f64> {
    (0..=30).map(|k| (70 + 2 * k) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureChoice {
    pub temperature: f64,
    pub nats_per_token: f64,
    /// `(temperature, nats per token)` for every grid point, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Picks the grid temperature with the highest validation likelihood. Ties go
/// to the value closest to 1, then to the smaller value.
pub fn tune_temperature(model: &Model, params: &ModelParams, stream: &TokenStream, grid: &[f64]) -> Result<TemperatureChoice> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("temperature grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|&&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {bad}")));
    }
    let scores = grid
        .iter()
        .map(|&t| Ok((t, evaluate_static(model, params, stream, t)?.nats_per_token)))
        .collect::<Result<Vec<_>>>()?;
    let &(temperature, nats_per_token) = scores
        .iter()
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then((a.0 - 1.0).abs().total_cmp(&(b.0 - 1.0).abs()))
                .then(a.0.total_cmp(&b.0))
        })
        .expect("non-empty grid");
    Ok(TemperatureChoice { temperature, nats_per_token, scores })
}

/// Ordering of work inside [`evaluate_dynamic_with_hook`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DynevalEvent {
    Scored { segment: usize, nats: f64 },
    Updated { segment: usize },
}

pub fn evaluate_dynamic(
    model: &Model,
    params: &ModelParams,
    stream: &TokenStream,
    dcfg: &DynevalConfig,
    temperature: f64,
) -> Result<EvalReport> {
    evaluate_dynamic_with_hook(model, params, stream, dcfg, temperature, |_| {})
}

/// Dynamic evaluation with batch size 1. Each segment is scored with the
/// current fast weights, then its mean loss gradient updates them:
/// `theta <- theta - lr * g + decay * (theta0 - theta)`.
pub fn evaluate_dynamic_with_hook<F: FnMut(DynevalEvent)>(
    model: &Model,
    params: &ModelParams,
    stream: &TokenStream,
    dcfg: &DynevalConfig,
    temperature: f64,
    mut hook: F,
) -> Result<EvalReport> {
    dcfg.validate()?;
    check_stream(stream)?;
    let ids = &stream.ids;
    let mut fast = params.clone();
    let mut states: Vec<CellState> = model.initial_states(1);
    let mut total = 0.0;
    let mut scored = 0;
    let mut pos = 0;
    let mut segment = 0;
    while pos + 1 < ids.len() {
        let end = (pos + dcfg.segment).min(ids.len() - 1);
        let batch = WindowBatch::new(1, end - pos, ids[pos..end].to_vec(), ids[pos + 1..=end].to_vec())?;
        let fwd = model.forward_deterministic(&fast, &batch, &states, temperature)?;
        let mut nats = 0.0;
        for t in 0..batch.steps {
            let lp = fwd.target_log_prob(&batch, 0, t);
            total -= lp;
            nats -= lp;
        }
        scored += batch.steps;
        hook(DynevalEvent::Scored { segment, nats });

        if dcfg.lr > 0.0 {
            let mut grads = fast.zeros_like();
            let w = vec![-1.0 / batch.steps as f64; batch.steps];
            model.backward_window_targets(&fast, &fwd, &batch, &w, &mut grads)?;
            if let GradNorm::Clip(c) = dcfg.norm {
                clip_global_norm(&mut grads, c);
            }
            fast.axpy_(-dcfg.lr, &grads);
            if dcfg.decay > 0.0 {
                for (f, p0) in fast.tensors_mut().into_iter().zip(params.tensors()) {
                    for (fi, &pi) in f.data_mut().iter_mut().zip(p0.data()) {
                        *fi += dcfg.decay * (pi - *fi);
                    }
                }
            }
            if !fast.all_finite() {
                return Err(Error::Divergence(format!(
                    "fast weights diverged after segment {segment}; partial report: {}",
                    EvalReport::new(total, scored, temperature, Some(*dcfg))
                )));
            }
            hook(DynevalEvent::Updated { segment });
        }
        states = fwd.final_states;
        pos = end;
        segment += 1;
    }
    Ok(EvalReport::new(total, scored, temperature, Some(*dcfg)))
}

/// Best configuration on `stream` by nats per token; ties keep the earlier
/// grid entry.
pub fn tune_dynamic(
    model: &Model,
    params: &ModelParams,
    stream: &TokenStream,
    grid: &[DynevalConfig],
    temperature: f64,
) -> Result<(DynevalConfig, EvalReport)> {
    let mut best: Option<(DynevalConfig, EvalReport)> = None;
    for cfg in grid {
        let report = match evaluate_dynamic(model, params, stream, cfg, temperature) {
            Ok(r) => r,
            // a diverging setting is simply a bad grid point
            Err(Error::Divergence(_)) => continue,
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|(_, b)| report.nats_per_token < b.nats_per_token) {
            best = Some((*cfg, report));
        }
    }
    best.ok_or_else(|| Error::Divergence("every dynamic evaluation setting diverged".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellRegistry;
    use crate::model::ModelConfig;
    use crate::numerics::Rng;

    fn small() -> (Model, ModelParams) {
        let cfg = ModelConfig { layers: 2, state_size: 6, vocab_size: 5, mogrifier_rounds: 2, ..ModelConfig::default() };
        let model = Model::new(cfg, &CellRegistry::default()).unwrap();
        let params = model.init_params(&mut Rng::new(3)).unwrap();
        (model, params)
    }

    fn stream(n: usize, seed: u64) -> TokenStream {
        let mut rng = Rng::new(seed);
        TokenStream::new((0..n).map(|_| rng.below(5)).collect())
    }

    #[test]
    fn conversions() {
        let (p, b) = convert_metrics(LN_2);
        assert!((p - 2.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        assert_eq!(convert_metrics(0.0), (1.0, 0.0));
        assert!((convert_metrics(3.80708).0 - 45.02).abs() < 0.01);
    }

    #[test]
    fn uniform_model_exact() {
        let cfg = ModelConfig { layers: 1, state_size: 3, vocab_size: 4, ..ModelConfig::default() };
        let model = Model::new(cfg, &CellRegistry::default()).unwrap();
        let params = model.zero_params();
        let r = evaluate_static(&model, &params, &TokenStream::new(vec![0, 1, 2, 3, 2, 1]), 1.0).unwrap();
        assert_eq!(r.bpc, 2.0);
        assert_eq!(r.perplexity, 4.0);
    }

    #[test]
    fn chunking_does_not_matter() {
        let (model, params) = small();
        let s = stream(CHUNK * 2 + 7, 1);
        let r = evaluate_static(&model, &params, &s, 1.0).unwrap();
        let lp = model.predict_deterministic(&params, &s.ids[..s.len() - 1], 1.0).unwrap();
        let total: f64 = (0..s.len() - 1).map(|t| -lp.get(t, s.ids[t + 1])).sum();
        assert_eq!(r.total_nats, total);
    }

    #[test]
    fn empty_stream_rejected() {
        let (model, params) = small();
        assert!(evaluate_static(&model, &params, &TokenStream::new(vec![]), 1.0).is_err());
        assert!(evaluate_static(&model, &params, &TokenStream::new(vec![1]), 1.0).is_err());
    }

    #[test]
    fn zero_rate_dyneval_equals_static() {
        let (model, params) = small();
        let s = stream(300, 2);
        let st = evaluate_static(&model, &params, &s, 1.1).unwrap();
        for segment in [1, 7, 50, 1000] {
            let d = DynevalConfig { segment, lr: 0.0, decay: 0.5, norm: GradNorm::None };
            let dy = evaluate_dynamic(&model, &params, &s, &d, 1.1).unwrap();
            assert_eq!(dy.total_nats, st.total_nats);
            assert_eq!(dy.tokens, st.tokens);
        }
    }

    #[test]
    fn dyneval_scores_before_update() {
        let (model, params) = small();
        let s = stream(100, 4);
        let d = DynevalConfig { segment: 10, lr: 0.1, decay: 0.01, norm: GradNorm::Clip(1.0) };
        let mut events = Vec::new();
        evaluate_dynamic_with_hook(&model, &params, &s, &d, 1.0, |e| events.push(e)).unwrap();
        let expect_segments = (s.len() - 1).div_ceil(10);
        assert_eq!(events.len(), 2 * expect_segments);
        for (k, pair) in events.chunks(2).enumerate() {
            assert!(matches!(pair[0], DynevalEvent::Scored { segment, .. } if segment == k));
            assert_eq!(pair[1], DynevalEvent::Updated { segment: k });
        }
    }

    #[test]
    fn first_segment_uses_slow_weights() {
        let (model, params) = small();
        let s = stream(40, 5);
        let d = DynevalConfig { segment: 10, lr: 0.5, decay: 0.0, norm: GradNorm::None };
        let mut first = None;
        evaluate_dynamic_with_hook(&model, &params, &s, &d, 1.0, |e| {
            if let (None, DynevalEvent::Scored { nats, .. }) = (first, e) {
                first = Some(nats);
            }
        })
        .unwrap();
        let head = TokenStream::new(s.ids[..11].to_vec());
        assert_eq!(first.unwrap(), evaluate_static(&model, &params, &head, 1.0).unwrap().total_nats);
    }

    #[test]
    fn temperature_argmax_and_ties() {
        let (model, params) = small();
        let s = stream(120, 6);
        let one = tune_temperature(&model, &params, &s, &[1.0]).unwrap();
        assert_eq!(one.temperature, 1.0);
        let choice = tune_temperature(&model, &params, &s, &default_temperature_grid()).unwrap();
        let at_one = evaluate_static(&model, &params, &s, 1.0).unwrap().nats_per_token;
        assert!(choice.nats_per_token <= at_one);
        for &(t, nll) in &choice.scores {
            assert!(choice.nats_per_token <= nll, "{t}");
        }
        // a zero model is indifferent to temperature
        let zero = model.zero_params();
        assert_eq!(tune_temperature(&model, &zero, &s, &[0.8, 1.2, 0.9, 1.1]).unwrap().temperature, 0.9);
    }

    #[test]
    fn default_grid_contains_one() {
        let g = default_temperature_grid();
        assert_eq!(g.len(), 31);
        assert_eq!(g[0], 0.7);
        assert_eq!(g[30], 1.3);
        assert!(g.contains(&1.0));
    }
}
