use rewired_core::cells::CellRegistry;
use rewired_core::data::TokenStream;
use rewired_core::model::{Model, ModelConfig};
use rewired_core::params::Parameters;
use rewired_core::training::{train, Checkpoint, MetricsRecord, StepInfo, TrainConfig, TrainObserver};
use rewired_core::Error;

fn stream(len: usize, seed: usize) -> TokenStream {
    // the cycle 0..7 with every fifth token scrambled
    TokenStream::new((0..len).map(|i| if i % 5 == 4 { (i * i + seed) % 7 } else { i % 7 }).collect())
}

fn small_model() -> Model {
    let cfg = ModelConfig { layers: 2, state_size: 8, vocab_size: 7, mogrifier_rounds: 2, keep_state: 0.8, ..ModelConfig::default() };
    Model::new(cfg, &CellRegistry::default()).unwrap()
}

fn bits(p: &impl Parameters) -> Vec<u64> {
    p.flatten().into_iter().map(f64::to_bits).collect()
}

#[derive(Default)]
struct RestartProbe {
    lr_before: f64,
    seen: Vec<(Checkpoint, Checkpoint, f64)>,
}

impl TrainObserver for RestartProbe {
    fn on_step(&mut self, info: &StepInfo) -> rewired_core::training::Control {
        self.lr_before = info.lr;
        rewired_core::training::Control::Continue
    }

    fn on_restart(&mut self, best: &Checkpoint, resumed: &Checkpoint) {
        self.seen.push((best.clone(), resumed.clone(), self.lr_before));
    }
}

#[test]
fn injected_nan_restores_best_checkpoint() {
    let model = small_model();
    let cfg = TrainConfig { batch_size: 2, window: 6, epochs: 2, valid_every: Some(5), inject_nan_at: Some(13), ..TrainConfig::default() };
    let mut probe = RestartProbe::default();
    let out = train(&model, &cfg, &stream(400, 0), &stream(60, 1), 9, &mut probe).unwrap();
    assert_eq!(probe.seen.len(), 1);
    let (best, resumed, lr_before) = &probe.seen[0];
    assert!(best.radam.step > 0 && best.best_valid.is_finite());
    assert_eq!(bits(&resumed.params), bits(&best.params));
    assert_eq!(bits(&ParamsOf(&resumed.radam.m)), bits(&ParamsOf(&best.radam.m)));
    assert_eq!(bits(&ParamsOf(&resumed.radam.v)), bits(&ParamsOf(&best.radam.v)));
    assert_eq!(resumed.radam.step, best.radam.step);
    assert_eq!(resumed.rng, best.rng);
    assert_eq!(resumed.tta, best.tta);
    assert_eq!(resumed.learning_rate().to_bits(), (lr_before * 0.9).to_bits());
    assert_eq!(out.last.restarts, 1);
    assert!(out.log.iter().all(|r| r.valid_nats.is_finite()));
}

struct ParamsOf<'a>(&'a Vec<rewired_core::numerics::Matrix>);

impl Parameters for ParamsOf<'_> {
    fn tensors(&self) -> Vec<&rewired_core::numerics::Matrix> {
        self.0.iter().collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut rewired_core::numerics::Matrix> {
        unreachable!("read-only view")
    }
}

#[test]
fn repeated_divergence_gives_up_after_limit() {
    let model = small_model();
    let cfg = TrainConfig { batch_size: 2, window: 6, valid_every: Some(5), max_restarts: 0, inject_nan_at: Some(3), ..TrainConfig::default() };
    let err = train(&model, &cfg, &stream(200, 0), &stream(60, 1), 9, &mut ()).unwrap_err();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
}

#[test]
fn training_is_bitwise_reproducible() {
    let model = small_model();
    let cfg = TrainConfig { batch_size: 3, window: 5, epochs: 2, valid_every: Some(4), ..TrainConfig::default() };
    let run = || train(&model, &cfg, &stream(300, 2), &stream(50, 3), 4, &mut ()).unwrap();
    let (a, b) = (run(), run());
    let text = |log: &[MetricsRecord]| log.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("\n");
    assert_eq!(text(&a.log), text(&b.log));
    assert_eq!(a.best.to_bytes(), b.best.to_bytes());
    assert_eq!(bits(&a.averaged), bits(&b.averaged));

    let bytes = a.best.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, &CellRegistry::default()).unwrap();
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn training_beats_uniform_baseline() {
    let model = small_model();
    let cfg = TrainConfig { batch_size: 4, window: 10, epochs: 3, lr: 1e-2, ..TrainConfig::default() };
    let out = train(&model, &cfg, &stream(2000, 0), &stream(200, 1), 1, &mut ()).unwrap();
    assert!(out.best.best_valid < 7f64.ln(), "{}", out.best.best_valid);
}
