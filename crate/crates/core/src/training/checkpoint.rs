//! Versioned binary checkpoint.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "RWLMCKPT"
//! version    u32
//! config     cell name (u32 length + UTF-8), layers, state size, vocab size,
//!            mogrifier rounds, mogrifier rank (0 = full), dropout samples: u64;
//!            flags u8 (bit 0 tied, bit 1 residual includes embedding,
//!            bit 2 row-mode input mask); keep input/cell/state/output,
//!            chrono t_max: f64
//! params     tensor list
//! radam      step u64; beta1, beta2, eps, lr f64; m tensor list; v tensor list
//! tta        long (start u64, count u64, tensor list); short (same)
//! rng        56 bytes
//! progress   best validation loss f64; epoch u64; restarts u64
//! ```
//!
//! A tensor list is a u64 count followed by `rows u64, cols u64, rows*cols f64`
//! per tensor.

use std::path::Path;

use crate::cells::CellRegistry;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{Matrix, RngState};
use crate::params::Parameters;

use super::{RAdamState, Tail, TtaState};

pub const MAGIC: &[u8; 8] = b"RWLMCKPT";
pub const VERSION: u32 = 1;

/// Complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Optimizer moments, step count and current learning rate.
    pub radam: RAdamState,
    pub tta: TtaState<ModelParams>,
    pub rng: RngState,
    pub best_valid: f64,
    pub epoch: u64,
    pub restarts: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensors<'a>(&mut self, ts: impl ExactSizeIterator<Item = &'a Matrix>) {
        self.usize(ts.len());
        for t in ts {
            self.usize(t.rows());
            self.usize(t.cols());
            for &x in t.data() {
                self.f64(x);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size does not fit in memory".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("cell name is not UTF-8".into()))
    }
    /// Reads a tensor list into matrices whose shapes must match `into`.
    fn tensors_into(&mut self, what: &str, into: Vec<&mut Matrix>) -> Result<()> {
        let count = self.usize()?;
        if count != into.len() {
            return Err(Error::Checkpoint(format!("{what}: expected {} tensors, found {count}", into.len())));
        }
        for (k, t) in into.into_iter().enumerate() {
            let (r, c) = (self.usize()?, self.usize()?);
            if (r, c) != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{what}: tensor {k} is {r}x{c}, expected {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
            for x in t.data_mut() {
                *x = self.f64()?;
            }
        }
        Ok(())
    }
}

fn write_config(w: &mut Writer, c: &ModelConfig) {
    w.str(&c.cell);
    w.usize(c.layers);
    w.usize(c.state_size);
    w.usize(c.vocab_size);
    w.usize(c.mogrifier_rounds);
    w.usize(c.mogrifier_rank.unwrap_or(0));
    w.usize(c.dropout_samples);
    w.u8(c.tie_embeddings as u8 | (c.residual_includes_embedding as u8) << 1 | (c.input_mask_rows as u8) << 2);
    for x in [c.keep_input, c.keep_cell, c.keep_state, c.keep_output, c.chrono_t_max] {
        w.f64(x);
    }
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    let cell = r.str()?;
    let layers = r.usize()?;
    let state_size = r.usize()?;
    let vocab_size = r.usize()?;
    let mogrifier_rounds = r.usize()?;
    let mogrifier_rank = Some(r.usize()?).filter(|&k| k > 0);
    let dropout_samples = r.usize()?;
    let flags = r.u8()?;
    if flags > 0b111 {
        return Err(Error::Checkpoint(format!("unknown config flags {flags:#b}")));
    }
    let config = ModelConfig {
        cell,
        layers,
        state_size,
        vocab_size,
        mogrifier_rounds,
        mogrifier_rank,
        dropout_samples,
        tie_embeddings: flags & 1 != 0,
        residual_includes_embedding: flags & 2 != 0,
        input_mask_rows: flags & 4 != 0,
        keep_input: r.f64()?,
        keep_cell: r.f64()?,
        keep_state: r.f64()?,
        keep_output: r.f64()?,
        chrono_t_max: r.f64()?,
    };
    config.validate().map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;
    Ok(config)
}

impl Checkpoint {
    pub fn learning_rate(&self) -> f64 {
        self.radam.lr
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        write_config(&mut w, &self.config);
        w.tensors(self.params.tensors().into_iter());
        let o = &self.radam;
        w.u64(o.step);
        for x in [o.beta1, o.beta2, o.eps, o.lr] {
            w.f64(x);
        }
        w.tensors(o.m.iter());
        w.tensors(o.v.iter());
        for tail in [&self.tta.long, &self.tta.short] {
            w.u64(tail.start);
            w.u64(tail.count);
            w.tensors(tail.mean.tensors().into_iter());
        }
        w.0.extend_from_slice(&self.rng.to_bytes());
        w.f64(self.best_valid);
        w.u64(self.epoch);
        w.u64(self.restarts);
        w.0
    }

    /// Parses a checkpoint; the registry supplies the cell named in the header.
    pub fn from_bytes(bytes: &[u8], registry: &CellRegistry) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch { found: version, expected: VERSION });
        }
        let config = read_config(&mut r)?;
        let cell = registry.get(&config.cell)?;
        let template = ModelParams::zeros(&config, cell.as_ref());

        let mut params = template.clone();
        r.tensors_into("parameters", params.tensors_mut())?;

        let step = r.u64()?;
        let (beta1, beta2, eps, lr) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let mut radam = RAdamState::new(&template, lr);
        radam.step = step;
        radam.beta1 = beta1;
        radam.beta2 = beta2;
        radam.eps = eps;
        r.tensors_into("first moments", radam.m.iter_mut().collect())?;
        r.tensors_into("second moments", radam.v.iter_mut().collect())?;

        let mut tails = Vec::with_capacity(2);
        for what in ["long tail", "short tail"] {
            let start = r.u64()?;
            let count = r.u64()?;
            let mut mean = template.clone();
            r.tensors_into(what, mean.tensors_mut())?;
            tails.push(Tail { mean, start, count });
        }
        let short = tails.pop().expect("two tails");
        let long = tails.pop().expect("two tails");

        let rng = RngState::from_bytes(r.take(RngState::ENCODED_LEN)?)?;
        let best_valid = r.f64()?;
        let epoch = r.u64()?;
        let restarts = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, params, radam, tta: TtaState { long, short }, rng, best_valid, epoch, restarts })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, registry: &CellRegistry) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes, registry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::numerics::Rng;

    fn sample(tied: bool) -> Checkpoint {
        let config = ModelConfig {
            layers: 2,
            state_size: 6,
            vocab_size: 5,
            mogrifier_rounds: 3,
            mogrifier_rank: Some(2),
            tie_embeddings: tied,
            keep_state: 0.75,
            ..ModelConfig::default()
        };
        let model = Model::new(config.clone(), &CellRegistry::default()).unwrap();
        let mut rng = Rng::new(5);
        let params = model.init_params(&mut rng).unwrap();
        let mut radam = RAdamState::new(&params, 0.003);
        let mut p = params.clone();
        let grads = model.init_params(&mut rng).unwrap();
        let mut tta = TtaState::new(&p, 0);
        for _ in 0..3 {
            radam.step(&mut p, &grads).unwrap();
            tta.update(&p);
        }
        Checkpoint { config, params: p, radam, tta, rng: rng.state(), best_valid: 1.25, epoch: 2, restarts: 1 }
    }

    #[test]
    fn round_trip_is_lossless() {
        for tied in [false, true] {
            let ck = sample(tied);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, &CellRegistry::default()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn version_mismatch_names_both() {
        let mut bytes = sample(false).to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes, &CellRegistry::default()).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 7, expected: VERSION }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains(&VERSION.to_string()), "{msg}");
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample(false).to_bytes();
        let reg = CellRegistry::default();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], &reg).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!", &reg).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, &reg).is_err());
    }
}
