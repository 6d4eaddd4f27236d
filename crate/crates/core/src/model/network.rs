use std::sync::Arc;

use crate::cells::{Cell, CellCache, CellRegistry, CellState};
use crate::error::{Error, Result};
use crate::mogrifier::{mogrify_backward, mogrify_forward, MogrifyCache};
use crate::numerics::{log_softmax_inplace, matmul_acc, matmul_nt_acc, matmul_tn_acc, Matrix, Rng};

use super::{MaskSet, ModelConfig, ModelParams};

/// Inputs and next-token targets of one `batch x steps` window, row-major by batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub batch: usize,
    pub steps: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl WindowBatch {
    pub fn new(batch: usize, steps: usize, inputs: Vec<usize>, targets: Vec<usize>) -> Result<Self> {
        if inputs.len() != batch * steps || targets.len() != batch * steps {
            return Err(Error::InvalidArgument(format!(
                "window of {batch}x{steps} needs {} ids, got {} inputs and {} targets",
                batch * steps,
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self { batch, steps, inputs, targets })
    }

    /// Single-row window over a contiguous stream: inputs `stream[..n-1]`, targets `stream[1..]`.
    pub fn from_stream(stream: &[usize]) -> Result<Self> {
        if stream.len() < 2 {
            return Err(Error::InvalidArgument("a window needs at least two tokens".into()));
        }
        let n = stream.len() - 1;
        Self::new(1, n, stream[..n].to_vec(), stream[1..].to_vec())
    }

    #[inline]
    pub fn input(&self, b: usize, t: usize) -> usize {
        self.inputs[b * self.steps + t]
    }

    #[inline]
    pub fn target(&self, b: usize, t: usize) -> usize {
        self.targets[b * self.steps + t]
    }

    fn input_column(&self, t: usize) -> Vec<usize> {
        (0..self.batch).map(|b| self.input(b, t)).collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.batch * self.steps
    }
}

#[derive(Clone, Debug)]
struct LayerStep {
    mogrify: MogrifyCache,
    cell: CellCache,
}

#[derive(Clone, Debug)]
struct StepCache {
    tokens: Vec<usize>,
    layers: Vec<LayerStep>,
    /// Masked residual sum fed to the output projection.
    out_in: Matrix,
}

/// Intermediate values of a window, consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct WindowCache {
    steps: Vec<StepCache>,
    masks: MaskSet,
    /// Dense `n x V` output projection used by the forward pass.
    e_out: Matrix,
    temperature: f64,
}

/// Result of [`Model::forward_window`].
#[derive(Clone, Debug)]
pub struct WindowForward {
    /// Per step, a `B x V` matrix of next-token log-probabilities.
    pub log_probs: Vec<Matrix>,
    pub final_states: Vec<CellState>,
    pub cache: WindowCache,
}

impl WindowForward {
    /// Log-probability of the window's target at `(b, t)`.
    pub fn target_log_prob(&self, batch: &WindowBatch, b: usize, t: usize) -> f64 {
        self.log_probs[t].get(b, batch.target(b, t))
    }

    /// Sum of target log-probabilities, accumulated in stream order per row.
    pub fn total_target_log_prob(&self, batch: &WindowBatch) -> f64 {
        let mut total = 0.0;
        for b in 0..batch.batch {
            for t in 0..batch.steps {
                total += self.target_log_prob(batch, b, t);
            }
        }
        total
    }
}

/// The residual mogrified recurrent language model: a configuration plus its
/// cell strategy. Parameters live outside so optimisers can own them.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    cell: Arc<dyn Cell>,
}

impl Model {
    pub fn new(config: ModelConfig, registry: &CellRegistry) -> Result<Self> {
        config.validate()?;
        let cell = registry.get(&config.cell)?;
        Ok(Self { config, cell })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn cell(&self) -> &Arc<dyn Cell> {
        &self.cell
    }

    pub fn init_params(&self, rng: &mut Rng) -> Result<ModelParams> {
        ModelParams::init(rng, &self.config, self.cell.as_ref())
    }

    pub fn zero_params(&self) -> ModelParams {
        ModelParams::zeros(&self.config, self.cell.as_ref())
    }

    pub fn initial_states(&self, batch: usize) -> Vec<CellState> {
        (0..self.config.layers).map(|_| CellState::zeros(batch, self.config.state_size)).collect()
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        let c = &self.config;
        if params.embed_in.shape() != (c.vocab_size, c.state_size)
            || params.layers.len() != c.layers
            || params.is_tied() != c.tie_embeddings
        {
            return Err(Error::DimensionMismatch {
                op: "model",
                detail: "parameters do not match the model configuration".into(),
            });
        }
        Ok(())
    }

    fn dense_output(&self, params: &ModelParams) -> Matrix {
        match &params.embed_out {
            Some(e) => e.clone(),
            None => params.embed_in.transpose(),
        }
    }

    /// Forward pass over one window with the given masks and carried states.
    pub fn forward_window(
        &self,
        params: &ModelParams,
        batch: &WindowBatch,
        states: &[CellState],
        masks: &MaskSet,
    ) -> Result<WindowForward> {
        self.forward_impl(params, batch, states, masks, 1.0, true)
    }

    pub(crate) fn forward_impl(
        &self,
        params: &ModelParams,
        batch: &WindowBatch,
        states: &[CellState],
        masks: &MaskSet,
        temperature: f64,
        keep_cache: bool,
    ) -> Result<WindowForward> {
        self.check_params(params)?;
        let cfg = &self.config;
        if states.len() != cfg.layers {
            return Err(Error::InvalidArgument(format!("{} carried states for {} layers", states.len(), cfg.layers)));
        }
        if masks.steps() < batch.steps {
            return Err(Error::InvalidArgument("mask set shorter than window".into()));
        }
        if let Some(&bad) = batch.inputs.iter().chain(&batch.targets).find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
        }
        let e_out = self.dense_output(params);
        let mut state: Vec<CellState> = states.to_vec();
        let mut steps = Vec::with_capacity(if keep_cache { batch.steps } else { 0 });
        let mut log_probs = Vec::with_capacity(batch.steps);

        for t in 0..batch.steps {
            let tokens = batch.input_column(t);
            let mut x0 = params.embed_in.gather_rows(&tokens);
            if let Some(m) = &masks.input[t] {
                x0.hadamard_inplace(m);
            }
            let mut running = if cfg.residual_includes_embedding {
                x0.clone()
            } else {
                Matrix::zeros(batch.batch, cfg.state_size)
            };
            let mut layer_caches = Vec::with_capacity(cfg.layers);
            for (l, layer) in params.layers.iter().enumerate() {
                let state_mask = masks.state_at(l, t);
                let mut h_hat = state[l].h.clone();
                if let Some(m) = state_mask {
                    h_hat.hadamard_inplace(m);
                }
                let input = if l == 0 { &x0 } else { &running };
                let (h_mog, x_mog, mog_cache) = mogrify_forward(&layer.mogrifier, &h_hat, input)?;
                let carried = CellState { c: std::mem::replace(&mut state[l].c, Matrix::zeros(0, 0)), h: h_mog };
                let (next, cell_cache) = self.cell.forward(&layer.cell, &carried, &x_mog, state_mask)?;
                let mut x_hat = next.h.clone();
                if let Some(m) = &masks.cell[t][l] {
                    x_hat.hadamard_inplace(m);
                }
                running.add_assign(&x_hat);
                state[l] = next;
                if keep_cache {
                    layer_caches.push(LayerStep { mogrify: mog_cache, cell: cell_cache });
                }
            }
            let mut out_in = running;
            if let Some(m) = &masks.output[t] {
                out_in.hadamard_inplace(m);
            }
            let mut logits = Matrix::zeros(batch.batch, cfg.vocab_size);
            logits.add_row_broadcast(&params.b_out);
            matmul_acc(&mut logits, &out_in, &e_out);
            if let Some(idx) = logits.first_non_finite() {
                return Err(Error::Divergence(format!("non-finite logit at step {t}, index {idx}")));
            }
            for b in 0..batch.batch {
                log_softmax_inplace(logits.row_mut(b), temperature);
            }
            log_probs.push(logits);
            if keep_cache {
                steps.push(StepCache { tokens, layers: layer_caches, out_in });
            }
        }
        Ok(WindowForward {
            log_probs,
            final_states: state,
            cache: WindowCache { steps, masks: masks.clone(), e_out, temperature },
        })
    }

    /// Parameter gradients given a dense gradient on every log-probability.
    pub fn backward_window(
        &self,
        params: &ModelParams,
        fwd: &WindowForward,
        grad_log_probs: &[Matrix],
        grads: &mut ModelParams,
    ) -> Result<()> {
        if grad_log_probs.len() != fwd.log_probs.len() {
            return Err(Error::InvalidArgument("one gradient matrix per step required".into()));
        }
        self.backward_impl(params, fwd, grads, |t| {
            let lp = &fwd.log_probs[t];
            let g = &grad_log_probs[t];
            let mut d = Matrix::zeros(lp.rows(), lp.cols());
            for b in 0..lp.rows() {
                let gs: f64 = g.row(b).iter().sum();
                for (v, out) in d.row_mut(b).iter_mut().enumerate() {
                    *out = g.get(b, v) - lp.get(b, v).exp() * gs;
                }
            }
            d
        })
    }

    /// Parameter gradients when the only upstream gradient is `weights[t * B + b]`
    /// on each target log-probability.
    pub fn backward_window_targets(
        &self,
        params: &ModelParams,
        fwd: &WindowForward,
        batch: &WindowBatch,
        weights: &[f64],
        grads: &mut ModelParams,
    ) -> Result<()> {
        if weights.len() != batch.num_tokens() {
            return Err(Error::InvalidArgument("one weight per target required".into()));
        }
        self.backward_impl(params, fwd, grads, |t| {
            let lp = &fwd.log_probs[t];
            let mut d = Matrix::zeros(lp.rows(), lp.cols());
            for b in 0..lp.rows() {
                let w = weights[t * batch.batch + b];
                if w == 0.0 {
                    continue;
                }
                for (v, out) in d.row_mut(b).iter_mut().enumerate() {
                    *out = -w * lp.get(b, v).exp();
                }
                let y = batch.target(b, t);
                d.set(b, y, d.get(b, y) + w);
            }
            d
        })
    }

    /// `d_scaled_logits(t)` returns the gradient w.r.t. the temperature-scaled
    /// logits of step `t`.
    fn backward_impl(
        &self,
        params: &ModelParams,
        fwd: &WindowForward,
        grads: &mut ModelParams,
        mut d_scaled_logits: impl FnMut(usize) -> Matrix,
    ) -> Result<()> {
        self.check_params(params)?;
        self.check_params(grads)?;
        let cfg = &self.config;
        let cache = &fwd.cache;
        if cache.steps.len() != fwd.log_probs.len() {
            return Err(Error::InvalidArgument("forward pass was run without a cache".into()));
        }
        let rows = fwd.log_probs.first().map_or(0, |m| m.rows());
        let n = cfg.state_size;
        let mut dc: Vec<Matrix> = (0..cfg.layers).map(|_| Matrix::zeros(rows, n)).collect();
        let mut dh: Vec<Matrix> = dc.clone();

        for t in (0..cache.steps.len()).rev() {
            let step = &cache.steps[t];
            let mut d_logits = d_scaled_logits(t);
            if cache.temperature != 1.0 {
                d_logits.scale(1.0 / cache.temperature);
            }
            d_logits.col_sum_into(&mut grads.b_out);
            let mut d_out_in = Matrix::zeros(rows, n);
            match &mut grads.embed_out {
                Some(g_out) => {
                    matmul_tn_acc(g_out, &step.out_in, &d_logits);
                    matmul_nt_acc(&mut d_out_in, &d_logits, &cache.e_out);
                }
                None => {
                    matmul_tn_acc(&mut grads.embed_in, &d_logits, &step.out_in);
                    matmul_acc(&mut d_out_in, &d_logits, &params.embed_in);
                }
            }
            if let Some(m) = &cache.masks.output[t] {
                d_out_in.hadamard_inplace(m);
            }

            // d_running is the gradient w.r.t. the residual sum after layer l
            let mut d_running = d_out_in;
            let mut d_x0 = Matrix::zeros(rows, n);
            for l in (0..cfg.layers).rev() {
                let layer = &params.layers[l];
                let lc = &step.layers[l];
                let mut d_h = d_running.clone();
                if let Some(m) = &cache.masks.cell[t][l] {
                    d_h.hadamard_inplace(m);
                }
                d_h.add_assign(&dh[l]);
                let g_layer = &mut grads.layers[l];
                let cg = self.cell.backward(&layer.cell, &lc.cell, &dc[l], &d_h, &mut g_layer.cell)?;
                let (mut d_h_hat, d_input) =
                    mogrify_backward(&layer.mogrifier, &lc.mogrify, &cg.h_prev, &cg.x, &mut g_layer.mogrifier);
                if let Some(m) = cache.masks.state_at(l, t) {
                    d_h_hat.hadamard_inplace(m);
                }
                dh[l] = d_h_hat;
                dc[l] = cg.c_prev;
                if l > 0 {
                    d_running.add_assign(&d_input);
                } else {
                    d_x0 = d_input;
                    if cfg.residual_includes_embedding {
                        d_x0.add_assign(&d_running);
                    }
                }
            }
            if let Some(m) = &cache.masks.input[t] {
                d_x0.hadamard_inplace(m);
            }
            for (b, &tok) in step.tokens.iter().enumerate() {
                for (g, &d) in grads.embed_in.row_mut(tok).iter_mut().zip(d_x0.row(b)) {
                    *g += d;
                }
            }
        }
        Ok(())
    }

    /// Next-token log-probabilities over a single stream with every dropout
    /// mask at its expectation. Row `t` predicts `tokens[t + 1]`.
    pub fn predict_deterministic(&self, params: &ModelParams, tokens: &[usize], temperature: f64) -> Result<Matrix> {
        let states = self.initial_states(1);
        let (lp, _) = self.predict_chunk(params, tokens, &states, temperature)?;
        Ok(lp)
    }

    /// Deterministic forward over `tokens` from carried states; returns the
    /// `len x V` log-probabilities and the final states.
    pub(crate) fn predict_chunk(
        &self,
        params: &ModelParams,
        tokens: &[usize],
        states: &[CellState],
        temperature: f64,
    ) -> Result<(Matrix, Vec<CellState>)> {
        let batch = WindowBatch::new(1, tokens.len(), tokens.to_vec(), tokens.to_vec())?;
        let masks = MaskSet::ones(tokens.len(), self.config.layers);
        let fwd = self.forward_impl(params, &batch, states, &masks, temperature, false)?;
        let mut out = Matrix::zeros(tokens.len(), self.config.vocab_size);
        for (t, lp) in fwd.log_probs.iter().enumerate() {
            out.row_mut(t).copy_from_slice(lp.row(0));
        }
        Ok((out, fwd.final_states))
    }

    /// Forward pass with deterministic masks at a given temperature, keeping
    /// the cache for a subsequent backward pass.
    pub fn forward_deterministic(
        &self,
        params: &ModelParams,
        batch: &WindowBatch,
        states: &[CellState],
        temperature: f64,
    ) -> Result<WindowForward> {
        let masks = MaskSet::ones(batch.steps, self.config.layers);
        self.forward_impl(params, batch, states, &masks, temperature, true)
    }
}
