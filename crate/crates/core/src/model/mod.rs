//! Residual language model built from mogrified recurrent cells.
//!
//! Per step, the token embedding (input-masked) feeds layer 1; layer `l > 1`
//! consumes the sum of the cell-masked outputs of the layers below it. Each
//! layer mogrifies its state-masked previous output with its input before the
//! cell update. The output distribution is the softmax of the output-masked
//! sum of all layer outputs times the output embedding, plus a bias.

mod config;
mod masks;
mod network;
mod objective;
mod params;

pub use config::ModelConfig;
pub use masks::{sample_masks, MaskSet};
pub use network::{Model, WindowBatch, WindowCache, WindowForward};
pub use objective::WindowLoss;
pub use params::{LayerParams, ModelParams, OutputEmbedding};
