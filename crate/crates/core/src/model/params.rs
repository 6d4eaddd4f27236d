use crate::cells::{init_cell_params, uniform_fill, Cell, CellParams};
use crate::error::Result;
use crate::mogrifier::MogrifierParams;
use crate::numerics::{Matrix, Rng};
use crate::params::Parameters;

use super::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub mogrifier: MogrifierParams,
    pub cell: CellParams,
}

/// All trainable weights of the language model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `V x n` input embedding.
    pub embed_in: Matrix,
    /// `n x V` output embedding; absent when tied to `embed_in`.
    pub embed_out: Option<Matrix>,
    /// `1 x V`
    pub b_out: Matrix,
    pub layers: Vec<LayerParams>,
}

/// Read-only view of the output projection.
#[derive(Clone, Copy, Debug)]
pub enum OutputEmbedding<'a> {
    /// Transpose of the input embedding, sharing its storage.
    Tied(&'a Matrix),
    Untied(&'a Matrix),
}

impl OutputEmbedding<'_> {
    /// Entry `(k, v)` of the `n x V` output matrix.
    pub fn get(&self, k: usize, v: usize) -> f64 {
        match self {
            OutputEmbedding::Tied(e) => e.get(v, k),
            OutputEmbedding::Untied(e) => e.get(k, v),
        }
    }
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig, cell: &dyn Cell) -> Self {
        let n = config.state_size;
        let v = config.vocab_size;
        Self {
            embed_in: Matrix::zeros(v, n),
            embed_out: (!config.tie_embeddings).then(|| Matrix::zeros(n, v)),
            b_out: Matrix::zeros(1, v),
            layers: (0..config.layers)
                .map(|_| LayerParams {
                    mogrifier: MogrifierParams::zeros(config.mogrifier_rounds, n, n, config.mogrifier_rank),
                    cell: cell.zeros(n, n),
                })
                .collect(),
        }
    }

    /// Random init: embeddings `U(-1/sqrt(n), 1/sqrt(n))`, zero output bias,
    /// cells and mogrifiers per their own init.
    pub fn init(rng: &mut Rng, config: &ModelConfig, cell: &dyn Cell) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config, cell);
        let n = config.state_size;
        let bound = 1.0 / (n as f64).sqrt();
        uniform_fill(rng, &mut p.embed_in, bound);
        if let Some(e) = &mut p.embed_out {
            uniform_fill(rng, e, bound);
        }
        for layer in &mut p.layers {
            layer.mogrifier = MogrifierParams::init(rng, config.mogrifier_rounds, n, n, config.mogrifier_rank)?;
            layer.cell = init_cell_params(rng, cell, n, n, config.chrono_t_max)?;
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    pub fn output_embedding(&self) -> OutputEmbedding<'_> {
        match &self.embed_out {
            Some(e) => OutputEmbedding::Untied(e),
            None => OutputEmbedding::Tied(&self.embed_in),
        }
    }

    pub fn is_tied(&self) -> bool {
        self.embed_out.is_none()
    }
}

impl Parameters for ModelParams {
    /// Order: `embed_in`, `embed_out` (untied only), `b_out`, then per layer
    /// the mogrifier tensors followed by the cell tensors.
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embed_in];
        if let Some(e) = &self.embed_out {
            out.push(e);
        }
        out.push(&self.b_out);
        for l in &self.layers {
            out.extend(l.mogrifier.tensors());
            out.extend(l.cell.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed_in];
        if let Some(e) = &mut self.embed_out {
            out.push(e);
        }
        out.push(&mut self.b_out);
        for l in &mut self.layers {
            out.extend(l.mogrifier.tensors_mut());
            out.extend(l.cell.tensors_mut());
        }
        out
    }
}
