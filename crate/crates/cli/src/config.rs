//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! or repeated keys are rejected.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use spartran::channel::SceneConfig;
use spartran::head::{AuxGate, SparsityGradient};
use spartran::pipeline::{DictMode, FinetuneConfig, PretrainConfig, Task};
use spartran::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    None,
    Position,
    Beam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub positions: usize,
    pub labels: LabelKind,
    pub codebook_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub fraction: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub n_blocks_head: usize,
    pub base_channels: usize,
}

impl FinetuneSettings {
    pub fn to_config(&self, task: Task, seed: u64) -> FinetuneConfig {
        let mut cfg = FinetuneConfig::new(task);
        cfg.head.n_blocks_head = self.n_blocks_head;
        cfg.head.base_channels = self.base_channels;
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.learning_rate = self.learning_rate;
        cfg.fraction = self.fraction;
        cfg.patience = self.patience;
        cfg.validation_fraction = self.validation_fraction;
        cfg.seed = seed;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub data: DataSettings,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ft = FinetuneConfig::new(Task::Localization);
        RunConfig {
            seed: 0,
            scene: SceneConfig::default(),
            data: DataSettings {
                positions: 1000,
                labels: LabelKind::Position,
                codebook_size: 16,
            },
            pretrain: PretrainConfig::default(),
            finetune: FinetuneSettings {
                epochs: ft.epochs,
                batch_size: ft.batch_size,
                learning_rate: ft.learning_rate,
                fraction: ft.fraction,
                patience: ft.patience,
                validation_fraction: ft.validation_fraction,
                n_blocks_head: ft.head.n_blocks_head,
                base_channels: ft.head.base_channels,
            },
        }
    }
}

fn typed<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

fn anchors(value: &str) -> Result<Vec<[f64; 2]>> {
    value
        .split(';')
        .map(|pair| {
            let xy: Vec<&str> = pair.split(',').map(str::trim).collect();
            match xy[..] {
                [x, y] => Ok([typed("scene.anchors", x)?, typed("scene.anchors", y)?]),
                _ => Err(Error::Config(format!("anchor {pair:?} is not `x,y`"))),
            }
        })
        .collect()
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        cfg.pretrain.seed = cfg.seed;
        cfg.scene.seed = cfg.seed;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.scene;
        let p = &mut self.pretrain;
        let f = &mut self.finetune;
        match key {
            "seed" => self.seed = typed(key, v)?,
            "scene.width" => s.width = typed(key, v)?,
            "scene.height" => s.height = typed(key, v)?,
            "scene.anchors" => s.anchors = anchors(v)?,
            "scene.paths_per_link" => s.paths_per_link = typed(key, v)?,
            "scene.reflectors" => s.reflectors = typed(key, v)?,
            "scene.wall_margin" => s.wall_margin = typed(key, v)?,
            "scene.reflection_coeff" => s.reflection_coeff = typed(key, v)?,
            "scene.noise_sigma" => s.noise_sigma = typed(key, v)?,
            "scene.num_taps" => s.num_taps = typed(key, v)?,
            "scene.bandwidth_hz" => s.bandwidth_hz = typed(key, v)?,
            "data.positions" => self.data.positions = typed(key, v)?,
            "data.labels" => {
                self.data.labels = match v {
                    "none" => LabelKind::None,
                    "position" => LabelKind::Position,
                    "beam" => LabelKind::Beam,
                    _ => return Err(Error::Config(format!("data.labels must be none|position|beam, got {v:?}"))),
                }
            }
            "data.codebook_size" => self.data.codebook_size = typed(key, v)?,
            "pretrain.lambda" => p.lambda = typed(key, v)?,
            "pretrain.dict_mode" => {
                p.dict_mode = match v {
                    "fixed" => DictMode::Fixed,
                    "learned" => DictMode::Learned,
                    _ => return Err(Error::Config(format!("pretrain.dict_mode must be fixed|learned, got {v:?}"))),
                }
            }
            "pretrain.n_atoms" => p.n_atoms = typed(key, v)?,
            "pretrain.epochs" => p.epochs = typed(key, v)?,
            "pretrain.batch_size" => p.batch_size = typed(key, v)?,
            "pretrain.learning_rate" => p.learning_rate = typed(key, v)?,
            "pretrain.tau_max" => p.tau_max = Some(typed(key, v)?),
            "pretrain.leaky_slope" => p.leaky_slope = typed(key, v)?,
            "pretrain.sparsity_warmup_epochs" => p.sparsity_warmup_epochs = typed(key, v)?,
            "pretrain.sparsity_gradient" => {
                p.sparsity_gradient = match v {
                    "none" => SparsityGradient::None,
                    "gate_positive_part" => SparsityGradient::GatePositivePart,
                    _ => {
                        return Err(Error::Config(format!(
                            "pretrain.sparsity_gradient must be none|gate_positive_part, got {v:?}"
                        )))
                    }
                }
            }
            "pretrain.aux_gate" => {
                p.aux_gate = match v {
                    "leaky" => AuxGate::Leaky,
                    "open_only" => AuxGate::OpenOnly,
                    _ => return Err(Error::Config(format!("pretrain.aux_gate must be leaky|open_only, got {v:?}"))),
                }
            }
            "encoder.n_latent" => p.encoder.n_latent = typed(key, v)?,
            "encoder.n_heads" => p.encoder.n_heads = typed(key, v)?,
            "encoder.n_blocks" => p.encoder.n_blocks = typed(key, v)?,
            "encoder.n_hidden" => p.encoder.n_hidden = typed(key, v)?,
            "encoder.max_tokens" => p.encoder.max_tokens = typed(key, v)?,
            "encoder.leaky_slope" => p.encoder.leaky_slope = typed(key, v)?,
            "finetune.epochs" => f.epochs = typed(key, v)?,
            "finetune.batch_size" => f.batch_size = typed(key, v)?,
            "finetune.learning_rate" => f.learning_rate = typed(key, v)?,
            "finetune.fraction" => f.fraction = typed(key, v)?,
            "finetune.patience" => f.patience = typed(key, v)?,
            "finetune.validation_fraction" => f.validation_fraction = typed(key, v)?,
            "finetune.n_blocks_head" => f.n_blocks_head = typed(key, v)?,
            "finetune.base_channels" => f.base_channels = typed(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Override the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.scene.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn typed_values_land_in_place() {
        let cfg = RunConfig::parse(
            "seed = 7\nscene.anchors = 0,0; 5, 5\npretrain.lambda = 0.1 # strong\ndata.labels = beam\nencoder.n_latent=32",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pretrain.seed, 7);
        assert_eq!(cfg.scene.anchors, vec![[0.0, 0.0], [5.0, 5.0]]);
        assert_eq!(cfg.pretrain.lambda, 0.1);
        assert_eq!(cfg.data.labels, LabelKind::Beam);
        assert_eq!(cfg.pretrain.encoder.n_latent, 32);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        for bad in ["pretrain.lamda = 1", "seed = 1\nseed = 2", "seed 4", "seed = -1", "scene.anchors = 1,2,3"] {
            let err = RunConfig::parse(bad).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad}: {err}");
        }
    }

    #[test]
    fn error_names_the_line() {
        let err = RunConfig::parse("seed = 1\n\nbogus = 2").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
