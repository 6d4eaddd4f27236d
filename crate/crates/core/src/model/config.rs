use crate::error::{Error, Result};
use crate::mogrifier::DEFAULT_ROUNDS;
use crate::numerics::check_keep_prob;

/// Architecture and dropout settings of the residual mogrified language model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    /// Cell state size `n`; the cell input size equals it.
    pub state_size: usize,
    pub vocab_size: usize,
    /// Registered cell name, e.g. `rlstm` or `lstm`.
    pub cell: String,
    pub mogrifier_rounds: usize,
    /// Low-rank factor size for mogrifier gates; `None` means full rank.
    pub mogrifier_rank: Option<usize>,
    pub keep_input: f64,
    pub keep_cell: f64,
    pub keep_state: f64,
    pub keep_output: f64,
    /// Drop whole embedding rows per token instead of individual elements.
    pub input_mask_rows: bool,
    pub tie_embeddings: bool,
    /// Number of dropout samples averaged by the training objective.
    pub dropout_samples: usize,
    /// Also feed the embedded input into the residual sums for layers > 1
    /// and the output sum.
    pub residual_includes_embedding: bool,
    /// Top of the Chrono init range for forget-gate biases.
    pub chrono_t_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            state_size: 128,
            vocab_size: 256,
            cell: "rlstm".into(),
            mogrifier_rounds: DEFAULT_ROUNDS,
            mogrifier_rank: None,
            keep_input: 1.0,
            keep_cell: 1.0,
            keep_state: 1.0,
            keep_output: 1.0,
            input_mask_rows: false,
            tie_embeddings: false,
            dropout_samples: 1,
            residual_includes_embedding: false,
            chrono_t_max: 3f64.exp(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.layers < 1 {
            return bad("model needs at least one layer".into());
        }
        if self.state_size < 1 || self.vocab_size < 1 {
            return bad("state size and vocabulary size must be positive".into());
        }
        if self.dropout_samples < 1 {
            return bad("dropout samples must be at least 1".into());
        }
        if self.mogrifier_rank == Some(0) {
            return bad("mogrifier rank must be at least 1".into());
        }
        for (name, p) in [
            ("keep_input", self.keep_input),
            ("keep_cell", self.keep_cell),
            ("keep_state", self.keep_state),
            ("keep_output", self.keep_output),
        ] {
            check_keep_prob(p).map_err(|e| Error::InvalidArgument(format!("{name}: {e}")))?;
        }
        if !(self.chrono_t_max > 2.0) {
            return bad(format!("chrono_t_max must exceed 2, got {}", self.chrono_t_max));
        }
        Ok(())
    }

    /// Copy with every keep probability set to one.
    pub fn deterministic(&self) -> Self {
        Self { keep_input: 1.0, keep_cell: 1.0, keep_state: 1.0, keep_output: 1.0, ..self.clone() }
    }
}
