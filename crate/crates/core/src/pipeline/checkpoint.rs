use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::finetune::FinetuneMeta;
use super::pretrain::PretrainConfig;
use crate::binio::{ByteReader, ByteWriter};
use crate::dictionary::{Dictionary, DictionaryKind};
use crate::error::{Error, Result};
use crate::head::GateConfig;
use crate::params::Params;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPRC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub pretrain: PretrainConfig,
    pub dictionary: DictionaryKind,
    pub num_taps: usize,
    /// Factor applied to every raw link before encoding.
    pub input_scale: f64,
    pub step: u64,
    pub rng: RngState,
    pub finetune: Option<FinetuneMeta>,
}

/// Model parameters (encoder `enc.*`, head `head.*`, dictionary `dict`,
/// finetune head `ft.*`) plus the metadata needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Params,
}

impl Checkpoint {
    pub fn dictionary(&self) -> Result<Dictionary> {
        Dictionary::from_tensor(self.params.get("dict")?.clone(), self.meta.dictionary)
    }

    pub fn gate_config(&self) -> GateConfig {
        self.meta.pretrain.gate_config()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u32(meta.len() as u32);
        w.bytes(&meta);
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            w.u8(t.ndim() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for &v in t.data() {
                w.f64(v);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("checkpoint", bytes);
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::format("checkpoint", format!("bad metadata: {e}")))?;
        let count = r.u32()?;
        let mut params = Params::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.insert(name, Tensor::new(shape, data)?);
        }
        r.finish()?;
        if !params.contains("dict") {
            return Err(Error::format("checkpoint", "no dictionary tensor"));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
