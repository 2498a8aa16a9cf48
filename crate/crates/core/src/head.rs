//! Gated sparse reconstruction head and its three-term loss.
//!
//! From a latent `z` three affine maps produce coefficient magnitudes, gate
//! pre-activations and phases. A Heaviside gate decides which atoms are
//! active; the complex coefficients decode through the dictionary. The
//! auxiliary term reconstructs from the raw gate values through a
//! gradient-frozen dictionary so the gate path receives a training signal.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelSample;
use crate::dictionary::Dictionary;
use crate::encoder::LatentRep;
use crate::error::{Error, Result};
use crate::params::{xavier, Binder, Params};
use crate::tensor::{Graph, NodeId, Tensor};

/// How the active-atom penalty reaches the gate parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SparsityGradient {
    /// The count is piecewise constant, so the penalty has no gradient.
    None,
    /// Same value, but differentiated as `λ·Σ relu(ρ)`, which pushes open
    /// gates toward zero.
    #[default]
    GatePositivePart,
}

/// Which gate values the auxiliary reconstruction sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AuxGate {
    /// The leaky gate output itself, including the small negative values of
    /// closed gates.
    Leaky,
    /// Only open gates contribute to the value; closed gates still receive
    /// the leaky gradient.
    #[default]
    OpenOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub n_atoms: usize,
    pub lambda: f64,
    pub leaky_slope: f64,
    #[serde(default)]
    pub sparsity_gradient: SparsityGradient,
    #[serde(default)]
    pub aux_gate: AuxGate,
    /// Multiplier on the surrogate sparsity gradient; the loss value is
    /// unaffected.
    #[serde(skip, default = "unit")]
    pub surrogate_weight: f64,
}

fn unit() -> f64 {
    1.0
}

impl GateConfig {
    pub fn new(n_atoms: usize, lambda: f64) -> Self {
        GateConfig {
            n_atoms,
            lambda,
            leaky_slope: 0.01,
            sparsity_gradient: SparsityGradient::default(),
            aux_gate: AuxGate::default(),
            surrogate_weight: 1.0,
        }
    }

    /// The head exactly as formulated: leaky gates in the auxiliary term and a
    /// gradient-free count penalty.
    pub fn literal(n_atoms: usize, lambda: f64) -> Self {
        GateConfig {
            sparsity_gradient: SparsityGradient::None,
            aux_gate: AuxGate::Leaky,
            ..GateConfig::new(n_atoms, lambda)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_atoms == 0 {
            return Err(Error::invalid("n_atoms must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub x_hat: Vec<f64>,
    pub rho_gate: Vec<f64>,
    pub gate_bits: Vec<bool>,
    pub phases: Vec<f64>,
    pub a_re: Vec<f64>,
    pub a_im: Vec<f64>,
}

impl SparseCode {
    /// Assemble a code from coefficient magnitudes, gate values and phases.
    pub fn from_parts(coeff: &[f64], rho_gate: Vec<f64>, phases: Vec<f64>) -> Result<Self> {
        let n = coeff.len();
        if rho_gate.len() != n || phases.len() != n {
            return Err(Error::invalid("coefficient, gate and phase lengths differ"));
        }
        let gate_bits: Vec<bool> = rho_gate.iter().map(|&r| r > 0.0).collect();
        let x_hat: Vec<f64> = coeff
            .iter()
            .zip(&gate_bits)
            .map(|(&c, &b)| if b { c } else { 0.0 })
            .collect();
        let a_re = x_hat.iter().zip(&phases).map(|(x, p)| x * p.cos()).collect();
        let a_im = x_hat.iter().zip(&phases).map(|(x, p)| -(x * p.sin())).collect();
        Ok(SparseCode {
            x_hat,
            rho_gate,
            gate_bits,
            phases,
            a_re,
            a_im,
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.x_hat.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub sparsity: f64,
    pub auxiliary: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Reconstruction {
    pub fn stacked(&self) -> Vec<f64> {
        self.re.iter().chain(&self.im).copied().collect()
    }
}

// Channels are normalized to unit peak, so unscaled Xavier outputs open
// dozens of oversized atoms at once; the auxiliary term then shuts every
// gate before the phase path has learned anything.
const COEFF_INIT_SCALE: f64 = 0.3;
const GATE_INIT_SCALE: f64 = 0.1;
const GATE_INIT_BIAS: f64 = 0.1;

pub fn init_head_params<R: Rng + ?Sized>(n_latent: usize, cfg: &GateConfig, rng: &mut R) -> Result<Params> {
    cfg.validate()?;
    let n = cfg.n_atoms;
    let mut p = Params::new();
    for path in ["coeff", "gate", "phase"] {
        let mut w = xavier(rng, &[n_latent, n], n_latent, n);
        let (scale, bias) = match path {
            "coeff" => (COEFF_INIT_SCALE, 0.0),
            "gate" => (GATE_INIT_SCALE, GATE_INIT_BIAS),
            _ => (1.0, 0.0),
        };
        w.data_mut().iter_mut().for_each(|v| *v *= scale);
        p.insert(format!("head.{path}.w"), w);
        let b = bias;
        p.insert(format!("head.{path}.b"), Tensor::full(&[n], b));
    }
    Ok(p)
}

/// Graph nodes of the head for a `[B, D]` latent batch; all are `[B, N]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub coeff: NodeId,
    pub rho: NodeId,
    pub phase: NodeId,
    pub bits: NodeId,
    pub x_hat: NodeId,
    pub a_re: NodeId,
    pub a_im: NodeId,
    pub cos: NodeId,
    pub sin: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub reconstruction: NodeId,
    pub sparsity: NodeId,
    pub auxiliary: NodeId,
    pub total: NodeId,
}

fn affine(g: &mut Graph, b: &mut Binder, z: NodeId, path: &str) -> Result<NodeId> {
    let w = b.get(g, &format!("head.{path}.w"))?;
    let bias = b.get(g, &format!("head.{path}.b"))?;
    let y = g.matmul(z, w)?;
    g.add(y, bias)
}

pub fn head_graph(g: &mut Graph, b: &mut Binder, z: NodeId, cfg: &GateConfig) -> Result<HeadNodes> {
    cfg.validate()?;
    let c = affine(g, b, z, "coeff")?;
    let coeff = g.leaky_relu(c, cfg.leaky_slope)?;
    let r = affine(g, b, z, "gate")?;
    let rho = g.leaky_relu(r, cfg.leaky_slope)?;
    let p = affine(g, b, z, "phase")?;
    let t = g.tanh(p)?;
    let phase = g.scale(t, PI)?;
    let bits = g.heaviside(rho)?;
    let x_hat = g.mul(coeff, bits)?;
    let cos = g.cos(phase)?;
    let sin = g.sin(phase)?;
    let a_re = g.mul(x_hat, cos)?;
    let xs = g.mul(x_hat, sin)?;
    let a_im = g.scale(xs, -1.0)?;
    Ok(HeadNodes {
        coeff,
        rho,
        phase,
        bits,
        x_hat,
        a_re,
        a_im,
        cos,
        sin,
    })
}

/// Dictionary as a graph leaf named `dict`; trainable only in learned mode.
pub fn dictionary_leaf(g: &mut Graph, dict: &Dictionary) -> Result<NodeId> {
    if dict.is_learned() {
        g.param("dict", dict.atoms().clone())
    } else {
        g.input("dict", dict.atoms().clone())
    }
}

/// Record the three loss terms, averaged over the batch.
///
/// `target` is `[2B, M]`: the real parts of all samples followed by the
/// imaginary parts.
pub fn loss_graph(g: &mut Graph, head: &HeadNodes, dict: NodeId, target: NodeId, cfg: &GateConfig) -> Result<LossNodes> {
    let shape = g.value(head.rho).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.n_atoms {
        return Err(Error::invalid(format!("head output shape {shape:?} does not match N={}", cfg.n_atoms)));
    }
    let dshape = g.value(dict).shape().to_vec();
    if dshape.len() != 2 || dshape[1] != cfg.n_atoms {
        return Err(Error::invalid(format!(
            "dictionary shape {dshape:?} does not have N={} columns",
            cfg.n_atoms
        )));
    }
    let inv_b = 1.0 / shape[0] as f64;
    let psi_t = g.transpose(dict)?;

    let a = g.concat(&[head.a_re, head.a_im], 0)?;
    let recon = g.matmul(a, psi_t)?;
    let resid = g.sub(target, recon)?;
    let sq = g.sq_l2_norm(resid)?;
    let reconstruction = g.scale(sq, inv_b)?;

    let rho = match cfg.aux_gate {
        AuxGate::Leaky => head.rho,
        AuxGate::OpenOnly => {
            // value ρ·1(ρ), gradient of ρ
            let open = g.mul(head.rho, head.bits)?;
            let closed = g.sub(head.rho, open)?;
            let frozen = g.scale(closed, 1.0)?;
            g.stop_edge(frozen, 0)?;
            g.sub(head.rho, frozen)?
        }
    };
    let rp_re = g.mul(rho, head.cos)?;
    let rs = g.mul(rho, head.sin)?;
    let rp_im = g.scale(rs, -1.0)?;
    let rp = g.concat(&[rp_re, rp_im], 0)?;
    let aux_recon = g.matmul(rp, psi_t)?;
    g.stop_edge(aux_recon, 1)?;
    let aux_resid = g.sub(target, aux_recon)?;
    let aux_sq = g.sq_l2_norm(aux_resid)?;
    let auxiliary = g.scale(aux_sq, inv_b)?;

    let count = g.sum(head.bits)?;
    let mut sparsity = g.scale(count, cfg.lambda * inv_b)?;
    if cfg.sparsity_gradient == SparsityGradient::GatePositivePart {
        let open = g.mul(head.rho, head.bits)?;
        let s = g.sum(open)?;
        let s = g.scale(s, cfg.lambda * cfg.surrogate_weight * inv_b)?;
        let frozen = g.scale(s, 1.0)?;
        g.stop_edge(frozen, 0)?;
        let zero = g.sub(s, frozen)?;
        sparsity = g.add(sparsity, zero)?;
    }

    let t = g.add(reconstruction, sparsity)?;
    let total = g.add(t, auxiliary)?;
    Ok(LossNodes {
        reconstruction,
        sparsity,
        auxiliary,
        total,
    })
}

/// `[2B, M]` stacked target for a batch of samples.
pub fn stacked_targets(samples: &[&ChannelSample]) -> Result<Tensor> {
    let m = samples.first().map(|s| s.num_taps()).unwrap_or(0);
    if samples.iter().any(|s| s.num_taps() != m) {
        return Err(Error::invalid("batch samples differ in tap count"));
    }
    let mut data = Vec::with_capacity(2 * samples.len() * m);
    for s in samples {
        data.extend_from_slice(&s.re);
    }
    for s in samples {
        data.extend_from_slice(&s.im);
    }
    Tensor::new(vec![2 * samples.len(), m], data)
}

fn read_row(g: &Graph, id: NodeId) -> Vec<f64> {
    g.value(id).data().to_vec()
}

pub fn head_forward(z: &LatentRep, params: &Params, cfg: &GateConfig) -> Result<SparseCode> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let zn = g.constant(Tensor::new(vec![1, z.z.len()], z.z.clone())?);
    let h = head_graph(&mut g, &mut b, zn, cfg)?;
    Ok(SparseCode {
        x_hat: read_row(&g, h.x_hat),
        rho_gate: read_row(&g, h.rho),
        gate_bits: g.value(h.bits).data().iter().map(|&v| v > 0.0).collect(),
        phases: read_row(&g, h.phase),
        a_re: read_row(&g, h.a_re),
        a_im: read_row(&g, h.a_im),
    })
}

pub fn decode(code: &SparseCode, dict: &Dictionary) -> Result<Reconstruction> {
    if code.num_atoms() != dict.num_atoms() {
        return Err(Error::invalid(format!(
            "code has {} atoms, dictionary has {}",
            code.num_atoms(),
            dict.num_atoms()
        )));
    }
    Ok(Reconstruction {
        re: dict.apply(&code.a_re),
        im: dict.apply(&code.a_im),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn loss(sample: &ChannelSample, code: &SparseCode, dict: &Dictionary, cfg: &GateConfig) -> Result<LossBreakdown> {
    if sample.num_taps() != dict.num_taps() {
        return Err(Error::invalid(format!(
            "sample has {} taps, dictionary has {}",
            sample.num_taps(),
            dict.num_taps()
        )));
    }
    let target = sample.stacked();
    let reconstruction = sq_dist(&target, &decode(code, dict)?.stacked());
    let rho: Vec<f64> = match cfg.aux_gate {
        AuxGate::Leaky => code.rho_gate.clone(),
        AuxGate::OpenOnly => code
            .rho_gate
            .iter()
            .zip(&code.gate_bits)
            .map(|(&r, &b)| if b { r } else { 0.0 })
            .collect(),
    };
    let rp_re: Vec<f64> = rho.iter().zip(&code.phases).map(|(r, p)| r * p.cos()).collect();
    let rp_im: Vec<f64> = rho.iter().zip(&code.phases).map(|(r, p)| -(r * p.sin())).collect();
    let aux: Vec<f64> = dict.apply(&rp_re).into_iter().chain(dict.apply(&rp_im)).collect();
    let auxiliary = sq_dist(&target, &aux);
    let sparsity = cfg.lambda * count_active(code) as f64;
    Ok(LossBreakdown {
        reconstruction,
        sparsity,
        auxiliary,
        total: reconstruction + sparsity + auxiliary,
    })
}

pub fn count_active(code: &SparseCode) -> usize {
    code.gate_bits.iter().filter(|&&b| b).count()
}
