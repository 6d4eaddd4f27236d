use crate::error::Result;
use crate::numerics::{bernoulli_mask, Matrix, Rng};

use super::ModelConfig;

/// One draw of every dropout mask used over a window.
///
/// `None` stands for an all-ones mask. The state masks carry no time index:
/// a single mask per layer is reused at every step of the window.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    /// `[t]`, each `B x n`.
    pub input: Vec<Option<Matrix>>,
    /// `[t][layer]`
    pub cell: Vec<Vec<Option<Matrix>>>,
    /// `[layer]`
    pub state: Vec<Option<Matrix>>,
    /// `[t]`
    pub output: Vec<Option<Matrix>>,
}

impl MaskSet {
    /// All-ones masks, the expectation of inverted dropout.
    pub fn ones(steps: usize, layers: usize) -> Self {
        Self {
            input: vec![None; steps],
            cell: vec![vec![None; layers]; steps],
            state: vec![None; layers],
            output: vec![None; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.input.len()
    }

    /// The state mask of `layer` as seen at step `t` (identical for every `t`).
    pub fn state_at(&self, layer: usize, _t: usize) -> Option<&Matrix> {
        self.state[layer].as_ref()
    }
}

fn draw(rng: &mut Rng, rows: usize, cols: usize, keep: f64) -> Result<Option<Matrix>> {
    if keep == 1.0 {
        Ok(None)
    } else {
        bernoulli_mask(rng, rows, cols, keep).map(Some)
    }
}

/// Samples fresh masks for a `batch x steps` window.
///
/// Draw order: for each step the input mask, the cell masks of every layer
/// and the output mask; then one state mask per layer.
pub fn sample_masks(rng: &mut Rng, config: &ModelConfig, batch: usize, steps: usize) -> Result<MaskSet> {
    config.validate()?;
    let n = config.state_size;
    let mut set = MaskSet::ones(steps, config.layers);
    for t in 0..steps {
        set.input[t] = if config.input_mask_rows && config.keep_input < 1.0 {
            let keep = config.keep_input;
            let rows = bernoulli_mask(rng, batch, 1, keep)?;
            Some(Matrix::from_fn(batch, n, |b, _| rows.get(b, 0)))
        } else {
            draw(rng, batch, n, config.keep_input)?
        };
        for l in 0..config.layers {
            set.cell[t][l] = draw(rng, batch, n, config.keep_cell)?;
        }
        set.output[t] = draw(rng, batch, n, config.keep_output)?;
    }
    for l in 0..config.layers {
        set.state[l] = draw(rng, batch, n, config.keep_state)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(keep: f64) -> ModelConfig {
        ModelConfig {
            layers: 2,
            state_size: 64,
            vocab_size: 5,
            keep_input: keep,
            keep_cell: keep,
            keep_state: keep,
            keep_output: keep,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn keep_one_gives_all_ones() {
        let m = sample_masks(&mut Rng::new(0), &config(1.0), 3, 4).unwrap();
        assert_eq!(m, MaskSet::ones(4, 2));
    }

    #[test]
    fn state_mask_constant_over_window() {
        let m = sample_masks(&mut Rng::new(1), &config(0.5), 3, 6).unwrap();
        for l in 0..2 {
            assert!(m.state_at(l, 0).is_some());
            assert_eq!(m.state_at(l, 0), m.state_at(l, 5));
        }
    }

    #[test]
    fn cell_masks_fresh_per_step() {
        let m = sample_masks(&mut Rng::new(2), &config(0.5), 1, 2).unwrap();
        assert_ne!(m.cell[0][0], m.cell[1][0]);
        assert_ne!(m.input[0], m.input[1]);
    }

    #[test]
    fn row_mode_drops_whole_rows() {
        let cfg = ModelConfig { input_mask_rows: true, ..config(0.5) };
        let m = sample_masks(&mut Rng::new(3), &cfg, 8, 3).unwrap();
        for t in 0..3 {
            let mask = m.input[t].as_ref().unwrap();
            for b in 0..8 {
                let row = mask.row(b);
                assert!(row.iter().all(|&v| v == row[0]));
            }
        }
    }
}
