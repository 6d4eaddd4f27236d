use proptest::prelude::*;

use rewired_core::cells::{Cell, CellRegistry, CellState, LstmCell, RlstmCell};
use rewired_core::data::{batchify, TokenStream};
use rewired_core::model::{sample_masks, Model, ModelConfig, WindowBatch};
use rewired_core::numerics::{Matrix, Rng};
use rewired_core::params::Parameters;
use rewired_core::training::{branch_at, rectifier, RAdamBranch, RAdamState, TtaState};

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-scale, scale))
}

/// Runs `steps` random steps and returns the largest `|c|` seen.
fn max_cell_magnitude(cell: &dyn Cell, rng: &mut Rng, steps: usize) -> f64 {
    let (m, n, b) = (5, 6, 3);
    let mut p = cell.zeros(m, n);
    let scale = rng.uniform_range(0.1, 10.0);
    for t in p.tensors_mut() {
        let (r, c) = t.shape();
        *t = random_matrix(rng, r, c, scale);
    }
    let mut s = CellState { c: random_matrix(rng, b, n, 1.0), h: random_matrix(rng, b, n, 1.0) };
    let mask = Matrix::from_fn(b, n, |_, _| if rng.bernoulli(0.5) { 2.0 } else { 0.0 });
    let mut worst = s.c.max_abs();
    for _ in 0..steps {
        let x = random_matrix(rng, b, m, 5.0);
        s = cell.forward(&p, &s, &x, Some(&mask)).unwrap().0;
        worst = worst.max(s.c.max_abs());
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bounded_cells_keep_state_in_unit_box(seed in any::<u64>(), rlstm in any::<bool>()) {
        let cell: Box<dyn Cell> = if rlstm { Box::new(RlstmCell) } else { Box::new(LstmCell { capped: true }) };
        prop_assert!(cell.bounded_state());
        let worst = max_cell_magnitude(cell.as_ref(), &mut Rng::new(seed), 300);
        prop_assert!(worst <= 1.0, "{} reached |c| = {worst}", cell.name());
    }

    #[test]
    fn multisample_lies_between_samples(seed in any::<u64>(), d_exp in 1u32..4) {
        let d = 1usize << d_exp;
        let cfg = ModelConfig {
            layers: 2,
            state_size: 6,
            vocab_size: 7,
            mogrifier_rounds: 2,
            keep_input: 0.7,
            keep_cell: 0.6,
            keep_state: 0.5,
            keep_output: 0.5,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, &CellRegistry::default()).unwrap();
        let mut rng = Rng::new(seed);
        let params = model.init_params(&mut rng).unwrap();
        let (b, t) = (2, 5);
        let inputs = (0..b * t).map(|_| rng.below(7)).collect();
        let targets = (0..b * t).map(|_| rng.below(7)).collect();
        let batch = WindowBatch::new(b, t, inputs, targets).unwrap();
        let out = model.loss_multisample(&params, &batch, &model.initial_states(b), &mut rng, d).unwrap();
        for (k, &lp) in out.token_log_probs.iter().enumerate() {
            let lo = out.sample_log_probs.iter().map(|s| s[k]).fold(f64::INFINITY, f64::min);
            let hi = out.sample_log_probs.iter().map(|s| s[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= lp && lp <= hi, "token {k}: {lo} <= {lp} <= {hi}");
        }
    }

    #[test]
    fn batchify_rows_reassemble_stream(ids in prop::collection::vec(0usize..50, 1..300), rows in 1usize..9) {
        prop_assume!(ids.len() >= rows);
        let stream = TokenStream::new(ids.clone());
        let b = batchify(&stream, rows).unwrap();
        let joined: Vec<usize> = (0..rows).flat_map(|r| b.row(r).to_vec()).collect();
        let keep = rows * (ids.len() / rows);
        prop_assert_eq!(&joined[..], &ids[..keep]);
    }
}

#[test]
fn uncapped_lstm_escapes_unit_box() {
    // the property test would be vacuous if no cell could ever violate it
    let cell = LstmCell { capped: false };
    assert!(!cell.bounded_state());
    let mut p = cell.zeros(1, 1);
    for t in p.tensors_mut() {
        t.fill(5.0);
    }
    let mut s = CellState::zeros(1, 1);
    for _ in 0..3 {
        s = cell.forward(&p, &s, &Matrix::ones(1, 1), None).unwrap().0;
    }
    assert!(s.c.max_abs() > 1.0);
}

#[test]
fn single_sample_equals_plain_nll() {
    let cfg = ModelConfig { layers: 2, state_size: 5, vocab_size: 6, keep_state: 0.5, keep_output: 0.6, ..ModelConfig::default() };
    let model = Model::new(cfg.clone(), &CellRegistry::default()).unwrap();
    let mut rng = Rng::new(8);
    let params = model.init_params(&mut rng).unwrap();
    let batch = WindowBatch::new(2, 4, vec![0, 1, 2, 3, 4, 5, 0, 1], vec![1, 2, 3, 4, 5, 0, 1, 2]).unwrap();
    let states = model.initial_states(2);
    let mut a = rng.clone();
    let masks = sample_masks(&mut a, &cfg, 2, 4).unwrap();
    let fwd = model.forward_window(&params, &batch, &states, &masks).unwrap();
    let nll = -fwd.total_target_log_prob(&batch) / 8.0;
    let out = model.loss_multisample(&params, &batch, &states, &mut rng, 1).unwrap();
    assert_eq!(out.loss.to_bits(), nll.to_bits());
}

#[test]
fn two_samples_average_probabilities() {
    // per-token ln p is the log of the mean probability
    let lse = |a: f64, b: f64| (a.exp() + b.exp()).ln() - 2f64.ln();
    assert!((lse(0.2f64.ln(), 0.8f64.ln()) - 0.5f64.ln()).abs() < 1e-15);
}

#[derive(Clone, Debug, PartialEq)]
struct Point(Matrix);

impl Parameters for Point {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.0]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.0]
    }
}

fn brute_mean(iterates: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; iterates[0].len()];
    for it in iterates {
        for (a, x) in acc.iter_mut().zip(it) {
            *a += x;
        }
    }
    acc.iter().map(|a| a / iterates.len() as f64).collect()
}

#[test]
fn tta_tails_match_stored_iterates() {
    let mut rng = Rng::new(77);
    let dim = 4;
    let mut tta = TtaState::new(&Point(Matrix::zeros(1, dim)), 0);
    let mut history: Vec<Vec<f64>> = Vec::new();
    let (mut long_start, mut short_start) = (0, 0);
    let mut swaps = 0;
    for step in 1..=1000u64 {
        let x: Vec<f64> = (0..dim).map(|_| rng.uniform_range(-3.0, 3.0) + step as f64 * 1e-3).collect();
        tta.update(&Point(Matrix::row_vector(x.clone())));
        history.push(x);
        for (tail, start) in [(&tta.long, long_start), (&tta.short, short_start)] {
            let want = brute_mean(&history[start..]);
            for (a, b) in tail.mean.0.data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12, "step {step}: {a} vs {b}");
            }
            assert_eq!(tail.count as usize, history.len() - start);
        }
        if step % 7 == 0 {
            let (l, s) = (rng.uniform(), rng.uniform());
            let mut scores = [l, s].into_iter();
            tta.evaluate_and_swap(step, |_| Ok(scores.next().unwrap())).unwrap();
            if s <= l {
                long_start = short_start;
                short_start = history.len();
                swaps += 1;
            }
        }
    }
    assert!(swaps > 10);
}

/// SGD on `f(x) = x^2 / 2` with Gaussian gradient noise of decaying scale;
/// returns `(f(average), f(raw))` at step 500.
fn noisy_quadratic(seed: u64) -> (f64, f64) {
    let f = |x: f64| 0.5 * x * x;
    let mut rng = Rng::new(seed);
    let mut x = 5.0;
    let mut tta = TtaState::new(&Point(Matrix::zeros(1, 1)), 0);
    let mut result = (0.0, 0.0);
    for step in 1..=500u64 {
        let sigma = 2.0 / (1.0 + step as f64 / 200.0);
        x -= 0.5 * (x + sigma * rng.normal());
        tta.update(&Point(Matrix::filled(1, 1, x)));
        if step % 10 == 0 {
            let (avg, loss) = tta.evaluate_and_swap(step, |p| Ok(f(p.0.get(0, 0)))).unwrap();
            assert_eq!(loss, f(avg.0.get(0, 0)));
            result = (loss, f(x));
        }
    }
    result
}

#[test]
fn tta_beats_raw_iterate_on_noisy_quadratic() {
    // a single raw iterate can land near the optimum by luck, so judge the
    // comparison over many independent runs
    let runs: Vec<_> = (0..200).map(noisy_quadratic).collect();
    let wins = runs.iter().filter(|(avg, raw)| avg <= raw).count();
    assert!(wins >= 170, "average won {wins} of 200 runs");
    let mean = |k: fn(&(f64, f64)) -> f64| runs.iter().map(k).sum::<f64>() / runs.len() as f64;
    assert!(mean(|r| r.0) * 10.0 < mean(|r| r.1));
}

/// Rectification holds at `beta2 = 0.999` iff
/// `1995 * (1000^t - 999^t) > 2 t 999^t`, evaluated in integers.
fn rectified_exact(t: u32) -> bool {
    let big = 1000u128.pow(t);
    let small = 999u128.pow(t);
    1995 * (big - small) > 2 * t as u128 * small
}

#[test]
fn radam_branch_matches_integer_oracle() {
    for t in 1..=12u32 {
        let want = if rectified_exact(t) { RAdamBranch::Rectified } else { RAdamBranch::Momentum };
        assert_eq!(branch_at(0.999, t as u64), want, "step {t}");
    }
    assert!(!rectified_exact(4) && rectified_exact(5));

    let mut params = Point(Matrix::row_vector(vec![0.3, -0.2]));
    let mut radam = RAdamState::new(&params, 1e-3);
    let grads = Point(Matrix::row_vector(vec![0.5, -1.5]));
    let mut seen = Vec::new();
    for _ in 0..6 {
        seen.push(radam.step(&mut params, &grads).unwrap());
    }
    use RAdamBranch::*;
    assert_eq!(seen, [Momentum, Momentum, Momentum, Momentum, Rectified, Rectified]);
}

#[test]
fn rectifier_matches_independent_formula() {
    let beta: f64 = 0.999;
    for t in 5..200u64 {
        let bt = beta.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - beta) - 1.0;
        let rho = rho_inf - 2.0 * t as f64 * bt / (1.0 - bt);
        let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
        // rho_t - 4 cancels near the switch, so allow a little rounding
        assert!((rectifier(beta, t) - r).abs() <= 1e-10 * r, "t {t}");
    }
}

#[test]
fn split_windows_with_carried_state_match_one_window() {
    let cfg = ModelConfig { layers: 2, state_size: 8, vocab_size: 9, mogrifier_rounds: 3, ..ModelConfig::default() };
    for cell in ["rlstm", "lstm"] {
        let model = Model::new(ModelConfig { cell: cell.into(), ..cfg.clone() }, &CellRegistry::default()).unwrap();
        let mut rng = Rng::new(5);
        let params = model.init_params(&mut rng).unwrap();
        let t = 6;
        let ids: Vec<usize> = (0..2 * t + 1).map(|_| rng.below(9)).collect();
        let whole = WindowBatch::from_stream(&ids).unwrap();
        let one = model.forward_deterministic(&params, &whole, &model.initial_states(1), 1.0).unwrap();
        let first = WindowBatch::from_stream(&ids[..=t]).unwrap();
        let second = WindowBatch::from_stream(&ids[t..]).unwrap();
        let a = model.forward_deterministic(&params, &first, &model.initial_states(1), 1.0).unwrap();
        let b = model.forward_deterministic(&params, &second, &a.final_states, 1.0).unwrap();
        let split = a.total_target_log_prob(&first) + b.total_target_log_prob(&second);
        assert!((split - one.total_target_log_prob(&whole)).abs() < 1e-10, "{cell}");
    }
}

#[test]
fn tied_output_embedding_shares_storage() {
    let cfg = ModelConfig { layers: 1, state_size: 4, vocab_size: 5, tie_embeddings: true, ..ModelConfig::default() };
    let model = Model::new(cfg, &CellRegistry::default()).unwrap();
    let mut params = model.init_params(&mut Rng::new(1)).unwrap();
    assert!(params.is_tied() && params.embed_out.is_none());
    let before = model.predict_deterministic(&params, &[0, 1, 2], 1.0).unwrap();
    params.embed_in.set(3, 2, 7.5);
    assert_eq!(params.output_embedding().get(2, 3), 7.5);
    // token 3 never appears as input, so only the output side can move its score
    let after = model.predict_deterministic(&params, &[0, 1, 2], 1.0).unwrap();
    assert_ne!(before.get(2, 3), after.get(2, 3));
}

#[test]
fn predictions_are_normalised() {
    let cfg = ModelConfig { layers: 2, state_size: 6, vocab_size: 11, ..ModelConfig::default() };
    let model = Model::new(cfg, &CellRegistry::default()).unwrap();
    let params = model.init_params(&mut Rng::new(2)).unwrap();
    let lp = model.predict_deterministic(&params, &[1, 4, 9, 0, 3], 1.3).unwrap();
    for t in 0..lp.rows() {
        let total: f64 = lp.row(t).iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

