use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, RngState};
use super::optim::Adam;
use crate::channel::{ChannelSample, LinkDataset};
use crate::dictionary::{build_sinc_dictionary, default_tau_max, init_learned_dictionary, Dictionary};
use crate::encoder::{encoder_graph, init_encoder_params, tokenize, EncoderConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::head::{
    count_active, dictionary_leaf, head_graph, init_head_params, loss_graph, stacked_targets, GateConfig, HeadNodes,
    AuxGate, LossBreakdown, LossNodes, Reconstruction, SparseCode, SparsityGradient,
};
use crate::params::{Binder, Params};
use crate::tensor::{Gradients, Graph};

/// Links per graph when running inference.
const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictMode {
    Fixed,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lambda: f64,
    pub dict_mode: DictMode,
    pub n_atoms: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    /// Delay span of the fixed dictionary; `None` means `M / W`.
    pub tau_max: Option<f64>,
    pub leaky_slope: f64,
    pub sparsity_gradient: SparsityGradient,
    pub aux_gate: AuxGate,
    /// Epochs over which the sparsity gradient ramps linearly up to full
    /// strength.
    #[serde(default)]
    pub sparsity_warmup_epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lambda: 0.01,
            dict_mode: DictMode::Fixed,
            n_atoms: 64,
            epochs: 30,
            batch_size: 16,
            learning_rate: 3e-4,
            seed: 0,
            encoder: EncoderConfig::default(),
            tau_max: None,
            leaky_slope: 0.01,
            sparsity_gradient: SparsityGradient::default(),
            aux_gate: AuxGate::default(),
            sparsity_warmup_epochs: 10,
        }
    }
}

impl PretrainConfig {
    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            n_atoms: self.n_atoms,
            lambda: self.lambda,
            leaky_slope: self.leaky_slope,
            sparsity_gradient: self.sparsity_gradient,
            aux_gate: self.aux_gate,
            surrogate_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gate_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if let Some(t) = self.tau_max {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid("tau_max must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-sample means over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub reconstruction: f64,
    pub sparsity: f64,
    pub auxiliary: f64,
    pub total: f64,
    pub mean_active: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    /// The loss or a gradient went non-finite; the checkpoint holds the last
    /// parameters that produced a finite loss.
    Aborted { epoch: usize, step: u64, reason: String },
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochTrace>,
    pub status: RunStatus,
}

pub fn trace_csv(trace: &[EpochTrace]) -> String {
    let mut s = String::from("epoch,reconstruction,sparsity,auxiliary,total,mean_active\n");
    for t in trace {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.epoch, t.reconstruction, t.sparsity, t.auxiliary, t.total, t.mean_active
        ));
    }
    s
}

/// State visible to a per-step observer, after the update.
pub struct StepView<'a> {
    pub epoch: usize,
    pub step: u64,
    pub batch_loss: LossBreakdown,
    /// Global L2 norm of the step's gradient.
    pub grad_norm: f64,
    pub params: &'a Params,
}

/// Model graph over a batch of links: encoder, head and loss.
pub struct ModelGraph {
    pub graph: Graph,
    pub head: HeadNodes,
    pub loss: LossNodes,
}

pub fn build_model_graph(
    params: &Params,
    dict: &Dictionary,
    tokens: &[&TokenSequence],
    samples: &[&ChannelSample],
    encoder: &EncoderConfig,
    gate: &GateConfig,
) -> Result<ModelGraph> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let z = encoder_graph(&mut g, &mut b, tokens, encoder)?;
    let head = head_graph(&mut g, &mut b, z, gate)?;
    let d = dictionary_leaf(&mut g, dict)?;
    let target = g.input("target", stacked_targets(samples)?)?;
    let loss = loss_graph(&mut g, &head, d, target, gate)?;
    g.set_output("total", loss.total);
    g.set_output("reconstruction", loss.reconstruction);
    g.set_output("sparsity", loss.sparsity);
    g.set_output("auxiliary", loss.auxiliary);
    Ok(ModelGraph { graph: g, head, loss })
}

fn scalar(g: &Graph, id: crate::tensor::NodeId) -> f64 {
    g.value(id).data()[0]
}

fn initial_dictionary(cfg: &PretrainConfig, m: usize, bandwidth_hz: f64, rng: &mut ChaCha8Rng) -> Result<Dictionary> {
    match cfg.dict_mode {
        DictMode::Learned => init_learned_dictionary(m, cfg.n_atoms, rng),
        DictMode::Fixed => {
            if !(bandwidth_hz > 0.0) {
                return Err(Error::invalid("fixed dictionary needs the signal bandwidth"));
            }
            let tau_max = cfg.tau_max.unwrap_or_else(|| default_tau_max(m, bandwidth_hz));
            build_sinc_dictionary(m, cfg.n_atoms, bandwidth_hz, tau_max)
        }
    }
}

/// Freshly initialized model for links of `num_taps` taps.
pub fn init_checkpoint(cfg: &PretrainConfig, num_taps: usize, bandwidth_hz: f64, input_scale: f64) -> Result<(Checkpoint, ChaCha8Rng)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_encoder_params(&cfg.encoder, &mut rng)?;
    params.extend(init_head_params(cfg.encoder.n_latent, &cfg.gate_config(), &mut rng)?);
    let dict = initial_dictionary(cfg, num_taps, bandwidth_hz, &mut rng)?;
    params.insert("dict", dict.atoms().clone());
    let meta = CheckpointMeta {
        pretrain: cfg.clone(),
        dictionary: dict.kind(),
        num_taps,
        input_scale,
        step: 0,
        rng: RngState::capture(&rng),
        finetune: None,
    };
    Ok((Checkpoint { meta, params }, rng))
}

fn all_finite(grads: &Gradients) -> bool {
    grads.iter().all(|(_, t)| t.all_finite())
}

pub fn pretrain(dataset: &LinkDataset, cfg: &PretrainConfig) -> Result<PretrainRun> {
    pretrain_observed(dataset, cfg, &mut |_| {})
}

/// Pretraining with a callback after every optimizer step.
pub fn pretrain_observed(
    dataset: &LinkDataset,
    cfg: &PretrainConfig,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<PretrainRun> {
    if dataset.is_empty() {
        return Err(Error::invalid("pretraining dataset is empty"));
    }
    let input_scale = dataset.global_scale_factor()?;
    let links: Vec<ChannelSample> = dataset.samples.iter().map(|s| s.scaled(input_scale)).collect();
    let (mut ckpt, mut rng) = init_checkpoint(cfg, dataset.num_taps(), dataset.bandwidth_hz(), input_scale)?;
    let tokens: Vec<TokenSequence> = links.iter().map(tokenize).collect();
    let mut gate = cfg.gate_config();
    let steps_per_epoch = links.len().div_ceil(cfg.batch_size);
    let warmup_steps = (cfg.sparsity_warmup_epochs * steps_per_epoch) as f64;
    let learned = cfg.dict_mode == DictMode::Learned;
    let kind = ckpt.meta.dictionary;
    let mut trainable: Vec<String> = ckpt.params.iter().map(|(k, _)| k.clone()).collect();
    if !learned {
        trainable.retain(|k| k != "dict");
    }
    let mut opt = Adam::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..links.len()).collect();
    let mut step: u64 = 0;
    let mut last_good = ckpt.params.clone();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut active = 0usize;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            gate.surrogate_weight = if warmup_steps > 0.0 { (step as f64 / warmup_steps).min(1.0) } else { 1.0 };
            let dict = Dictionary::from_tensor(ckpt.params.get("dict")?.clone(), kind)?;
            let toks: Vec<&TokenSequence> = batch.iter().map(|&i| &tokens[i]).collect();
            let samples: Vec<&ChannelSample> = batch.iter().map(|&i| &links[i]).collect();
            let model = build_model_graph(&ckpt.params, &dict, &toks, &samples, &cfg.encoder, &gate)?;
            let g = &model.graph;
            let loss = LossBreakdown {
                reconstruction: scalar(g, model.loss.reconstruction),
                sparsity: scalar(g, model.loss.sparsity),
                auxiliary: scalar(g, model.loss.auxiliary),
                total: scalar(g, model.loss.total),
            };
            let grads = g.backward_from(model.loss.total)?;
            if !loss.total.is_finite() || !all_finite(&grads) {
                ckpt.params = last_good;
                ckpt.meta.step = step.saturating_sub(1);
                ckpt.meta.rng = RngState::capture(&rng);
                return Ok(PretrainRun {
                    checkpoint: ckpt,
                    trace,
                    status: RunStatus::Aborted {
                        epoch,
                        step,
                        reason: format!("non-finite loss or gradient (total = {})", loss.total),
                    },
                });
            }
            if bi == 0 {
                let aux = g.backward_from(model.loss.auxiliary)?;
                if aux.get("dict").is_some_and(|t| t.data().iter().any(|&v| v != 0.0)) {
                    return Err(Error::Numeric("auxiliary loss leaked gradient into the dictionary".into()));
                }
            }
            let b = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([loss.reconstruction, loss.sparsity, loss.auxiliary, loss.total]) {
                *s += v * b;
            }
            active += g.value(model.head.bits).data().iter().filter(|&&v| v > 0.0).count();

            let grad_norm = grads.iter().map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            last_good.clone_from(&ckpt.params);
            opt.step(&mut ckpt.params, &grads, &trainable);
            if learned {
                let renorm = Dictionary::from_tensor(ckpt.params.get("dict")?.clone(), kind)?.renormalize_atoms()?;
                ckpt.params.insert("dict", renorm.atoms().clone());
            }
            step += 1;
            observer(&StepView {
                epoch,
                step,
                batch_loss: loss,
                grad_norm,
                params: &ckpt.params,
            });
        }
        let n = links.len() as f64;
        trace.push(EpochTrace {
            epoch,
            reconstruction: sums[0] / n,
            sparsity: sums[1] / n,
            auxiliary: sums[2] / n,
            total: sums[3] / n,
            mean_active: active as f64 / n,
        });
    }
    ckpt.meta.step = step;
    ckpt.meta.rng = RngState::capture(&rng);
    Ok(PretrainRun {
        checkpoint: ckpt,
        trace,
        status: RunStatus::Completed,
    })
}

/// Sparse codes and reconstructions for raw (unscaled) links. Returned
/// reconstructions are in the scaled domain the model was trained on.
pub fn decompose_links(ckpt: &Checkpoint, samples: &[ChannelSample]) -> Result<Vec<(SparseCode, Reconstruction)>> {
    let dict = ckpt.dictionary()?;
    let gate = ckpt.gate_config();
    let enc = &ckpt.meta.pretrain.encoder;
    let n = gate.n_atoms;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFERENCE_CHUNK) {
        let toks: Vec<TokenSequence> = chunk.iter().map(|s| tokenize(&s.scaled(ckpt.meta.input_scale))).collect();
        let refs: Vec<&TokenSequence> = toks.iter().collect();
        let mut g = Graph::new();
        let mut b = Binder::new(&ckpt.params);
        let z = encoder_graph(&mut g, &mut b, &refs, enc)?;
        let h = head_graph(&mut g, &mut b, z, &gate)?;
        let rows = |id| -> Vec<Vec<f64>> { g.value(id).data().chunks(n).map(<[f64]>::to_vec).collect() };
        let (xs, rhos, phs, ares, aims) = (rows(h.x_hat), rows(h.rho), rows(h.phase), rows(h.a_re), rows(h.a_im));
        for i in 0..chunk.len() {
            let code = SparseCode {
                x_hat: xs[i].clone(),
                gate_bits: rhos[i].iter().map(|&r| r > 0.0).collect(),
                rho_gate: rhos[i].clone(),
                phases: phs[i].clone(),
                a_re: ares[i].clone(),
                a_im: aims[i].clone(),
            };
            let recon = crate::head::decode(&code, &dict)?;
            out.push((code, recon));
        }
    }
    Ok(out)
}

/// Reconstruction NMSE in dB over a set of raw links, measured in the scaled
/// domain. The zero predictor scores exactly 0 dB.
pub fn reconstruction_nmse_db(ckpt: &Checkpoint, samples: &[ChannelSample]) -> Result<f64> {
    let decomp = decompose_links(ckpt, samples)?;
    let mut err = 0.0;
    let mut power = 0.0;
    for (s, (_, r)) in samples.iter().zip(&decomp) {
        let target = s.scaled(ckpt.meta.input_scale).stacked();
        let rec = r.stacked();
        err += target.iter().zip(&rec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        power += target.iter().map(|a| a * a).sum::<f64>();
    }
    if !(power > 0.0) {
        return Err(Error::Numeric("NMSE of an all-zero signal set".into()));
    }
    Ok(10.0 * (err / power).log10())
}

/// Gate-open counts per atom over every link of `data`.
pub fn activation_histogram(ckpt: &Checkpoint, data: &LinkDataset) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; ckpt.meta.pretrain.n_atoms];
    for (code, _) in decompose_links(ckpt, &data.samples)? {
        for (c, &b) in counts.iter_mut().zip(&code.gate_bits) {
            *c += u64::from(b);
        }
    }
    Ok(counts)
}

/// Mean number of open gates per link.
pub fn mean_active(ckpt: &Checkpoint, data: &LinkDataset) -> Result<f64> {
    let codes = decompose_links(ckpt, &data.samples)?;
    if codes.is_empty() {
        return Err(Error::invalid("no links"));
    }
    Ok(codes.iter().map(|(c, _)| count_active(c) as f64).sum::<f64>() / codes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{random_positions, sample_scene, SceneConfig};
    use crate::dictionary::DictionaryKind;
    use crate::tensor::Tensor;

    pub(crate) fn tiny_cfg() -> PretrainConfig {
        PretrainConfig {
            n_atoms: 16,
            epochs: 2,
            batch_size: 8,
            encoder: EncoderConfig {
                n_latent: 16,
                n_heads: 2,
                n_blocks: 1,
                n_hidden: 32,
                max_tokens: 8,
                leaky_slope: 0.01,
            },
            ..PretrainConfig::default()
        }
    }

    fn toy_links(n: usize) -> LinkDataset {
        let scene = SceneConfig {
            num_taps: 12,
            ..SceneConfig::default()
        };
        sample_scene(&scene, &random_positions(&scene, n, 5)).unwrap().links()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = PretrainConfig { epochs: 0, ..tiny_cfg() };
        let data = toy_links(8);
        let run = pretrain(&data, &cfg).unwrap();
        assert!(run.trace.is_empty());
        assert_eq!(run.status, RunStatus::Completed);
        let (init, _) = init_checkpoint(&cfg, 12, 1e8, data.global_scale_factor().unwrap()).unwrap();
        assert_eq!(run.checkpoint.params, init.params);
    }

    #[test]
    fn runs_are_deterministic() {
        let data = toy_links(10);
        let a = pretrain(&data, &tiny_cfg()).unwrap();
        let b = pretrain(&data, &tiny_cfg()).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 2);
    }

    #[test]
    fn learned_dictionary_stays_unit_norm() {
        let cfg = PretrainConfig {
            dict_mode: DictMode::Learned,
            ..tiny_cfg()
        };
        let mut worst: f64 = 0.0;
        pretrain_observed(&toy_links(10), &cfg, &mut |v| {
            let d = Dictionary::from_tensor(v.params.get("dict").unwrap().clone(), DictionaryKind::Learned).unwrap();
            for n in d.atom_norms() {
                worst = worst.max((n - 1.0).abs());
            }
        })
        .unwrap();
        assert!(worst < 1e-9);
    }

    #[test]
    fn nan_aborts_with_last_good_parameters() {
        let cfg = PretrainConfig {
            learning_rate: 1e300,
            epochs: 3,
            ..tiny_cfg()
        };
        let run = pretrain(&toy_links(16), &cfg).unwrap();
        assert!(matches!(run.status, RunStatus::Aborted { .. }), "{:?}", run.status);
        assert!(run.checkpoint.params.all_finite());
    }

    #[test]
    fn zero_predictor_is_zero_db() {
        let cfg = PretrainConfig { epochs: 0, ..tiny_cfg() };
        let data = toy_links(6);
        let mut run = pretrain(&data, &cfg).unwrap();
        let b = run.checkpoint.params.get_mut("head.gate.b").unwrap();
        *b = Tensor::full(&[16], -100.0);
        let nmse = reconstruction_nmse_db(&run.checkpoint, &data.samples).unwrap();
        assert!(nmse.abs() < 1e-12, "{nmse}");
        let hist = activation_histogram(&run.checkpoint, &data).unwrap();
        assert_eq!(hist, vec![0; 16]);
    }
}
