//! Finite-difference verification of every hand-written backward pass.
//!
//! Each check is a named strategy returning the maximum relative error
//! between analytic and central-difference gradients over its trials.

use std::sync::Arc;

use crate::cells::{uniform_fill, Cell, CellRegistry, CellState};
use crate::error::Result;
use crate::mogrifier::{mogrify_backward, mogrify_forward, MogrifierParams};
use crate::model::{sample_masks, Model, ModelConfig, ModelParams, WindowBatch};
use crate::numerics::{finite_difference_gradient, max_relative_error, Matrix, Rng};
use crate::params::Parameters;

/// Central-difference step for cell and mogrifier checks.
pub const FD_STEP: f64 = 1e-5;

/// Step for whole-model checks. The window loss is an average over many
/// terms, so at `1e-5` rounding in the loss swamps gradients near `1e-8`.
pub const MODEL_FD_STEP: f64 = 1e-4;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;

pub trait GradCheck: Send + Sync {
    fn name(&self) -> String;

    /// Maximum relative error over all checked entries and trials.
    fn run(&self, rng: &mut Rng) -> Result<f64>;
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    uniform_fill(rng, &mut m, bound);
    m
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn split<'a>(flat: &'a [f64], sizes: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for &s in sizes {
        out.push(&flat[offset..offset + s]);
        offset += s;
    }
    out
}

/// One cell step under a random linear loss `sum(a * h) + sum(b * c)`,
/// differentiated w.r.t. parameters, input and both carried states.
pub struct CellCheck {
    pub cell: Arc<dyn Cell>,
    pub input: usize,
    pub state: usize,
    pub batch: usize,
    pub trials: usize,
    pub with_state_mask: bool,
}

impl CellCheck {
    fn trial(&self, rng: &mut Rng) -> Result<f64> {
        let (m, n, b) = (self.input, self.state, self.batch);
        let mut p = self.cell.zeros(m, n);
        for t in p.tensors_mut() {
            uniform_fill(rng, t, 1.0);
        }
        let x = random_matrix(rng, b, m, 1.0);
        let s = CellState { c: random_matrix(rng, b, n, 1.0), h: random_matrix(rng, b, n, 1.0) };
        let mask = self.with_state_mask.then(|| Matrix::from_fn(b, n, |_, _| if rng.bernoulli(0.5) { 2.0 } else { 0.0 }));
        let wh = random_matrix(rng, b, n, 1.0);
        let wc = random_matrix(rng, b, n, 1.0);

        let (_, cache) = self.cell.forward(&p, &s, &x, mask.as_ref())?;
        let mut grads = self.cell.zeros(m, n);
        let cg = self.cell.backward(&p, &cache, &wc, &wh, &mut grads)?;
        let mut analytic = grads.flatten();
        analytic.extend_from_slice(cg.x.data());
        analytic.extend_from_slice(cg.h_prev.data());
        analytic.extend_from_slice(cg.c_prev.data());

        let mut theta = p.flatten();
        theta.extend_from_slice(x.data());
        theta.extend_from_slice(s.h.data());
        theta.extend_from_slice(s.c.data());
        let sizes = [p.num_params(), b * m, b * n, b * n];
        let mut probe = p.clone();
        let numeric = finite_difference_gradient(
            |flat| {
                let parts = split(flat, &sizes);
                probe.assign_flat(parts[0]);
                let x = Matrix::from_vec(b, m, parts[1].to_vec()).unwrap();
                let st = CellState {
                    h: Matrix::from_vec(b, n, parts[2].to_vec()).unwrap(),
                    c: Matrix::from_vec(b, n, parts[3].to_vec()).unwrap(),
                };
                match self.cell.forward(&probe, &st, &x, mask.as_ref()) {
                    Ok((out, _)) => dot(&wh, &out.h) + dot(&wc, &out.c),
                    Err(_) => f64::NAN,
                }
            },
            &theta,
            FD_STEP,
        )?;
        Ok(max_relative_error(&analytic, &numeric))
    }
}

impl GradCheck for CellCheck {
    fn name(&self) -> String {
        let mask = if self.with_state_mask { "+mask" } else { "" };
        format!("cell/{}{mask} m={} n={}", self.cell.name(), self.input, self.state)
    }

    fn run(&self, rng: &mut Rng) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..self.trials {
            worst = worst.max(self.trial(rng)?);
        }
        Ok(worst)
    }
}

/// Mogrification under a random linear loss on both outputs.
pub struct MogrifyCheck {
    pub rounds: usize,
    pub rank: Option<usize>,
    pub size: usize,
    pub trials: usize,
}

impl MogrifyCheck {
    fn trial(&self, rng: &mut Rng) -> Result<f64> {
        let n = self.size;
        let b = 2;
        let mut p = MogrifierParams::zeros(self.rounds, n, n, self.rank);
        for t in p.tensors_mut() {
            uniform_fill(rng, t, 1.0);
        }
        let h = random_matrix(rng, b, n, 1.0);
        let x = random_matrix(rng, b, n, 1.0);
        let wh = random_matrix(rng, b, n, 1.0);
        let wx = random_matrix(rng, b, n, 1.0);
        let (_, _, cache) = mogrify_forward(&p, &h, &x)?;
        let mut grads = p.zeros_like();
        let (gh, gx) = mogrify_backward(&p, &cache, &wh, &wx, &mut grads);
        let mut analytic = grads.flatten();
        analytic.extend_from_slice(gh.data());
        analytic.extend_from_slice(gx.data());

        let mut theta = p.flatten();
        theta.extend_from_slice(h.data());
        theta.extend_from_slice(x.data());
        let sizes = [p.num_params(), b * n, b * n];
        let mut probe = p.clone();
        let numeric = finite_difference_gradient(
            |flat| {
                let parts = split(flat, &sizes);
                probe.assign_flat(parts[0]);
                let h = Matrix::from_vec(b, n, parts[1].to_vec()).unwrap();
                let x = Matrix::from_vec(b, n, parts[2].to_vec()).unwrap();
                match mogrify_forward(&probe, &h, &x) {
                    Ok((ho, xo, _)) => dot(&wh, &ho) + dot(&wx, &xo),
                    Err(_) => f64::NAN,
                }
            },
            &theta,
            FD_STEP,
        )?;
        Ok(max_relative_error(&analytic, &numeric))
    }
}

impl GradCheck for MogrifyCheck {
    fn name(&self) -> String {
        match self.rank {
            None => format!("mogrify r={} full n={}", self.rounds, self.size),
            Some(k) => format!("mogrify r={} rank={k} n={}", self.rounds, self.size),
        }
    }

    fn run(&self, rng: &mut Rng) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..self.trials {
            worst = worst.max(self.trial(rng)?);
        }
        Ok(worst)
    }
}

/// Whole-model gradient of the (multi-sample) window loss with masks held
/// fixed across the analytic pass and every finite-difference evaluation.
pub struct ModelCheck {
    pub config: ModelConfig,
    pub batch: usize,
    pub steps: usize,
    pub samples: usize,
    pub registry: CellRegistry,
}

impl ModelCheck {
    /// `B=1, T=4, V=6, n=8, L=2, r=2` with the given cell and keep probability.
    pub fn standard(cell: &str, keep: f64, tied: bool, samples: usize) -> Self {
        Self {
            config: ModelConfig {
                layers: 2,
                state_size: 8,
                vocab_size: 6,
                cell: cell.into(),
                mogrifier_rounds: 2,
                keep_input: keep,
                keep_cell: keep,
                keep_state: keep,
                keep_output: keep,
                tie_embeddings: tied,
                dropout_samples: samples,
                ..ModelConfig::default()
            },
            batch: 1,
            steps: 4,
            samples,
            registry: CellRegistry::default(),
        }
    }
}

impl GradCheck for ModelCheck {
    fn name(&self) -> String {
        let c = &self.config;
        format!(
            "model/{} L={} n={} V={} r={}{} keep={} D={}{}",
            c.cell,
            c.layers,
            c.state_size,
            c.vocab_size,
            c.mogrifier_rounds,
            c.mogrifier_rank.map(|k| format!(" rank={k}")).unwrap_or_default(),
            c.keep_state,
            self.samples,
            if c.tie_embeddings { " tied" } else { "" },
        )
    }

    fn run(&self, rng: &mut Rng) -> Result<f64> {
        let model = Model::new(self.config.clone(), &self.registry)?;
        let mut params = model.init_params(rng)?;
        // move embeddings and biases away from their small init so every path carries signal
        uniform_fill(rng, &mut params.embed_in, 1.0);
        uniform_fill(rng, &mut params.b_out, 0.5);
        let (b, t, v) = (self.batch, self.steps, self.config.vocab_size);
        let stream: Vec<usize> = (0..b * (t + 1)).map(|_| rng.below(v)).collect();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for row in 0..b {
            let s = &stream[row * (t + 1)..(row + 1) * (t + 1)];
            inputs.extend_from_slice(&s[..t]);
            targets.extend_from_slice(&s[1..]);
        }
        let batch = WindowBatch::new(b, t, inputs, targets)?;
        let states: Vec<CellState> = (0..self.config.layers)
            .map(|_| CellState {
                c: random_matrix(rng, b, self.config.state_size, 0.5),
                h: random_matrix(rng, b, self.config.state_size, 0.5),
            })
            .collect();
        let masks = (0..self.samples)
            .map(|_| sample_masks(rng, &self.config, b, t))
            .collect::<Result<Vec<_>>>()?;

        let out = model.loss_with_masks(&params, &batch, &states, &masks)?;
        let analytic = out.grads.flatten();
        let mut probe: ModelParams = params.clone();
        let numeric = finite_difference_gradient(
            |flat| {
                probe.assign_flat(flat);
                model.loss_with_masks(&probe, &batch, &states, &masks).map_or(f64::NAN, |o| o.loss)
            },
            &params.flatten(),
            MODEL_FD_STEP,
        )?;
        Ok(max_relative_error(&analytic, &numeric))
    }
}

/// Result of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

/// Ordered collection of gradient checks.
#[derive(Default)]
pub struct GradCheckRegistry {
    checks: Vec<Box<dyn GradCheck>>,
}

impl GradCheckRegistry {
    pub fn register(&mut self, check: Box<dyn GradCheck>) {
        self.checks.push(check);
    }

    pub fn names(&self) -> Vec<String> {
        self.checks.iter().map(|c| c.name()).collect()
    }

    pub fn len(&self) -> usize {
        self.checks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checks.is_empty()
    }

    /// The full suite: every cell kind at `n, m` in `{4, 8}`, mogrification
    /// with `r` in `{1, 2, 5}` at full and low rank, and the two-layer model
    /// for both cell kinds with and without dropout masks.
    pub fn standard(trials: usize) -> Self {
        let cells = CellRegistry::default();
        let mut r = Self::default();
        for name in ["lstm", "lstm-uncapped", "rlstm"] {
            let cell = cells.get(name).expect("built-in cell");
            for &(m, n) in &[(4, 4), (4, 8), (8, 4), (8, 8)] {
                r.register(Box::new(CellCheck {
                    cell: cell.clone(),
                    input: m,
                    state: n,
                    batch: 2,
                    trials,
                    with_state_mask: false,
                }));
            }
        }
        r.register(Box::new(CellCheck {
            cell: cells.get("rlstm").expect("built-in cell"),
            input: 8,
            state: 8,
            batch: 2,
            trials,
            with_state_mask: true,
        }));
        for rounds in [1, 2, 5] {
            for rank in [None, Some(2)] {
                r.register(Box::new(MogrifyCheck { rounds, rank, size: 6, trials }));
            }
        }
        r.register(Box::new(MogrifyCheck { rounds: 4, rank: None, size: 6, trials }));
        for cell in ["rlstm", "lstm"] {
            for keep in [1.0, 0.5] {
                r.register(Box::new(ModelCheck::standard(cell, keep, false, 1)));
            }
            r.register(Box::new(ModelCheck::standard(cell, 0.5, true, 2)));
        }
        let mut no_mog = ModelCheck::standard("rlstm", 0.5, false, 1);
        no_mog.config.mogrifier_rounds = 0;
        r.register(Box::new(no_mog));
        let mut low_rank = ModelCheck::standard("rlstm", 0.5, true, 1);
        low_rank.config.mogrifier_rank = Some(2);
        low_rank.config.residual_includes_embedding = true;
        r.register(Box::new(low_rank));
        r
    }

    /// Runs every check in order with a generator seeded from `seed`.
    pub fn run(&self, seed: u64) -> Result<Vec<CheckResult>> {
        let mut rng = Rng::new(seed);
        self.checks
            .iter()
            .map(|c| {
                let mut sub = rng.fork();
                Ok(CheckResult { name: c.name(), max_relative_error: c.run(&mut sub)? })
            })
            .collect()
    }
}
