//! Single-link tokenizer and the transformer encoder producing `z`.
//!
//! A channel of `M` taps becomes `ceil(M/3)` tokens; each token concatenates
//! `[re, im, |h|]` for three consecutive taps. Tokens are projected to the
//! latent width, offset by a learned per-slot embedding, passed through
//! pre-norm transformer blocks, and mean-pooled into one latent vector.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelSample;
use crate::error::{Error, Result};
use crate::params::{xavier, Binder, Params};
use crate::tensor::{Graph, NodeId, Tensor};

pub const TOKEN_WINDOW: usize = 3;
pub const FEATURES_PER_STEP: usize = 3;
pub const TOKEN_DIM: usize = TOKEN_WINDOW * FEATURES_PER_STEP;

/// Additive attention bias for keys that hold no measured tap.
const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_latent: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub n_hidden: usize,
    /// Number of learned positional slots; bounds the token count.
    pub max_tokens: usize,
    pub leaky_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_latent: 512,
            n_heads: 8,
            n_blocks: 1,
            n_hidden: 1024,
            max_tokens: 64,
            leaky_slope: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_latent == 0 || self.n_heads == 0 || self.n_hidden == 0 || self.max_tokens == 0 {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        if self.n_latent % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "n_latent {} not divisible by n_heads {}",
                self.n_latent, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.n_latent / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// Row-major `T × 9`.
    pub tokens: Vec<f64>,
    /// True for tokens that contain zero-filled padding steps.
    pub pad_mask: Vec<bool>,
    /// Number of measured taps `M`; steps at or beyond it are padding.
    pub num_steps: usize,
}

impl TokenSequence {
    pub fn num_tokens(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn token(&self, t: usize) -> &[f64] {
        &self.tokens[t * TOKEN_DIM..(t + 1) * TOKEN_DIM]
    }

    fn step_valid(&self, t: usize, w: usize) -> bool {
        t * TOKEN_WINDOW + w < self.num_steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRep {
    pub z: Vec<f64>,
}

pub fn tokenize(sample: &ChannelSample) -> TokenSequence {
    let m = sample.num_taps();
    let t = m.div_ceil(TOKEN_WINDOW);
    let mut tokens = vec![0.0; t * TOKEN_DIM];
    for j in 0..m {
        let base = (j / TOKEN_WINDOW) * TOKEN_DIM + (j % TOKEN_WINDOW) * FEATURES_PER_STEP;
        tokens[base] = sample.re[j];
        tokens[base + 1] = sample.im[j];
        tokens[base + 2] = sample.magnitude(j);
    }
    let pad_mask = (0..t).map(|k| (k + 1) * TOKEN_WINDOW > m).collect();
    TokenSequence {
        tokens,
        pad_mask,
        num_steps: m,
    }
}

pub fn init_encoder_params<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Params> {
    cfg.validate()?;
    let d = cfg.n_latent;
    let h = cfg.n_hidden;
    let mut p = Params::new();
    p.insert("enc.proj.w", xavier(rng, &[TOKEN_DIM, d], TOKEN_DIM, d));
    p.insert("enc.proj.b", Tensor::zeros(&[d]));
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let pos: Vec<f64> = (0..cfg.max_tokens * d).map(|_| normal.sample(rng)).collect();
    p.insert("enc.pos", Tensor::new(vec![cfg.max_tokens, d], pos)?);
    for l in 0..cfg.n_blocks {
        let k = |s: &str| format!("enc.{l}.{s}");
        p.insert(k("ln1.g"), Tensor::full(&[d], 1.0));
        p.insert(k("ln1.b"), Tensor::zeros(&[d]));
        p.insert(k("attn.wq"), xavier(rng, &[d, d], d, d));
        p.insert(k("attn.bq"), Tensor::zeros(&[d]));
        p.insert(k("attn.wk"), xavier(rng, &[d, d], d, d));
        p.insert(k("attn.wv"), xavier(rng, &[d, d], d, d));
        p.insert(k("attn.bv"), Tensor::zeros(&[d]));
        p.insert(k("attn.wo"), xavier(rng, &[d, d], d, d));
        p.insert(k("attn.bo"), Tensor::zeros(&[d]));
        p.insert(k("ln2.g"), Tensor::full(&[d], 1.0));
        p.insert(k("ln2.b"), Tensor::zeros(&[d]));
        p.insert(k("ff.w1"), xavier(rng, &[d, h], d, h));
        p.insert(k("ff.b1"), Tensor::zeros(&[h]));
        p.insert(k("ff.w2"), xavier(rng, &[h, d], h, d));
        p.insert(k("ff.b2"), Tensor::zeros(&[d]));
    }
    Ok(p)
}

fn affine_norm(g: &mut Graph, b: &mut Binder, x: NodeId, prefix: &str) -> Result<NodeId> {
    let n = g.layer_norm(x)?;
    let gain = b.get(g, &format!("{prefix}.g"))?;
    let shift = b.get(g, &format!("{prefix}.b"))?;
    let y = g.mul(n, gain)?;
    g.add(y, shift)
}

fn linear(g: &mut Graph, b: &mut Binder, x: NodeId, w: &str, bias: Option<&str>) -> Result<NodeId> {
    let wn = b.get(g, w)?;
    let y = g.matmul(x, wn)?;
    match bias {
        Some(name) => {
            let bn = b.get(g, name)?;
            g.add(y, bn)
        }
        None => Ok(y),
    }
}

/// `[B, T, D] → [B·H, T, D/H]`
fn split_heads(g: &mut Graph, x: NodeId, bsz: usize, t: usize, cfg: &EncoderConfig) -> Result<NodeId> {
    let (h, dh) = (cfg.n_heads, cfg.head_dim());
    let r = g.reshape(x, &[bsz, t, h, dh])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[bsz * h, t, dh])
}

fn merge_heads(g: &mut Graph, x: NodeId, bsz: usize, t: usize, cfg: &EncoderConfig) -> Result<NodeId> {
    let (h, dh) = (cfg.n_heads, cfg.head_dim());
    let r = g.reshape(x, &[bsz, h, t, dh])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[bsz, t, h * dh])
}

/// Record the encoder over a batch of token sequences; returns `z` as `[B, D]`.
///
/// Sequences shorter than the longest in the batch are padded with whole
/// tokens that are excluded from attention keys and from pooling. Inside a
/// token, padded steps are zeroed before projection, so their stored values
/// never reach `z`.
pub fn encoder_graph(g: &mut Graph, b: &mut Binder, batch: &[&TokenSequence], cfg: &EncoderConfig) -> Result<NodeId> {
    cfg.validate()?;
    let bsz = batch.len();
    if bsz == 0 {
        return Err(Error::invalid("empty encoder batch"));
    }
    let t = batch.iter().map(|s| s.num_tokens()).max().unwrap_or(0);
    if t == 0 || t > cfg.max_tokens {
        return Err(Error::invalid(format!(
            "token count {t} outside 1..={} positional slots",
            cfg.max_tokens
        )));
    }
    let d = cfg.n_latent;

    let mut tokens = vec![0.0; bsz * t * TOKEN_DIM];
    let mut step_mask = vec![0.0; bsz * t * TOKEN_DIM];
    let mut token_valid = vec![false; bsz * t];
    for (i, s) in batch.iter().enumerate() {
        for k in 0..s.num_tokens() {
            let base = (i * t + k) * TOKEN_DIM;
            tokens[base..base + TOKEN_DIM].copy_from_slice(s.token(k));
            for w in 0..TOKEN_WINDOW {
                if s.step_valid(k, w) {
                    token_valid[i * t + k] = true;
                    for f in 0..FEATURES_PER_STEP {
                        step_mask[base + w * FEATURES_PER_STEP + f] = 1.0;
                    }
                }
            }
        }
    }
    let x = g.constant(Tensor::new(vec![bsz, t, TOKEN_DIM], tokens)?);
    let mask = g.constant(Tensor::new(vec![bsz, t, TOKEN_DIM], step_mask)?);
    let x = g.mul(x, mask)?;
    let mut h = linear(g, b, x, "enc.proj.w", Some("enc.proj.b"))?;
    let pos = b.get(g, "enc.pos")?;
    let pos = g.slice(pos, 0, 0, t)?;
    h = g.add(h, pos)?;

    let attn_bias = if token_valid.iter().all(|&v| v) {
        None
    } else {
        let mut bias = vec![0.0; bsz * cfg.n_heads * t * t];
        for i in 0..bsz {
            for hd in 0..cfg.n_heads {
                for q in 0..t {
                    for k in 0..t {
                        if !token_valid[i * t + k] {
                            bias[((i * cfg.n_heads + hd) * t + q) * t + k] = MASKED_SCORE;
                        }
                    }
                }
            }
        }
        Some(g.constant(Tensor::new(vec![bsz * cfg.n_heads, t, t], bias)?))
    };

    let inv_sqrt = 1.0 / (cfg.head_dim() as f64).sqrt();
    for l in 0..cfg.n_blocks {
        let k = |s: &str| format!("enc.{l}.{s}");
        let hn = affine_norm(g, b, h, &format!("enc.{l}.ln1"))?;
        let q = linear(g, b, hn, &k("attn.wq"), Some(&k("attn.bq")))?;
        let kk = linear(g, b, hn, &k("attn.wk"), None)?;
        let v = linear(g, b, hn, &k("attn.wv"), Some(&k("attn.bv")))?;
        let q = split_heads(g, q, bsz, t, cfg)?;
        let kk = split_heads(g, kk, bsz, t, cfg)?;
        let v = split_heads(g, v, bsz, t, cfg)?;
        let kt = g.transpose(kk)?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, inv_sqrt)?;
        if let Some(bias) = attn_bias {
            scores = g.add(scores, bias)?;
        }
        let weights = g.softmax(scores)?;
        let att = g.matmul(weights, v)?;
        let att = merge_heads(g, att, bsz, t, cfg)?;
        let o = linear(g, b, att, &k("attn.wo"), Some(&k("attn.bo")))?;
        h = g.add(h, o)?;

        let hn = affine_norm(g, b, h, &format!("enc.{l}.ln2"))?;
        let f = linear(g, b, hn, &k("ff.w1"), Some(&k("ff.b1")))?;
        let f = g.leaky_relu(f, cfg.leaky_slope)?;
        let f = linear(g, b, f, &k("ff.w2"), Some(&k("ff.b2")))?;
        h = g.add(h, f)?;
    }

    let mut pool = vec![0.0; bsz * t];
    for i in 0..bsz {
        let n = (0..t).filter(|&k| token_valid[i * t + k]).count();
        for k in 0..t {
            if token_valid[i * t + k] {
                pool[i * t + k] = 1.0 / n as f64;
            }
        }
    }
    let pool = g.constant(Tensor::new(vec![bsz, 1, t], pool)?);
    let z = g.matmul(pool, h)?;
    g.reshape(z, &[bsz, d])
}

/// Forward-only encoding of a batch.
pub fn encode_batch(batch: &[&TokenSequence], params: &Params, cfg: &EncoderConfig) -> Result<Vec<LatentRep>> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let z = encoder_graph(&mut g, &mut b, batch, cfg)?;
    Ok(g
        .value(z)
        .data()
        .chunks(cfg.n_latent)
        .map(|c| LatentRep { z: c.to_vec() })
        .collect())
}

pub fn encode(tokens: &TokenSequence, params: &Params, cfg: &EncoderConfig) -> Result<LatentRep> {
    Ok(encode_batch(&[tokens], params, cfg)?.remove(0))
}
