use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::metrics::{ce90, euclidean_errors, mae, top1, MetricsReport};
use super::optim::Adam;
use crate::channel::{Labels, LinkDataset};
use crate::encoder::{encoder_graph, tokenize, EncoderConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::params::{xavier, Binder, Params};
use crate::tensor::{Graph, NodeId, Tensor};

/// Cells per axis of the grid that stratifies position labels.
const POSITION_STRATA: usize = 4;
const INFERENCE_GROUPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Localization,
    Beam { codebook_size: usize },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Localization => "localization",
            Task::Beam { .. } => "beam",
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Task::Localization => 2,
            Task::Beam { codebook_size } => *codebook_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHeadConfig {
    pub n_blocks_head: usize,
    pub base_channels: usize,
    pub task: Task,
    pub leaky_slope: f64,
}

impl FinetuneHeadConfig {
    pub fn new(task: Task) -> Self {
        FinetuneHeadConfig {
            n_blocks_head: 4,
            base_channels: 16,
            task,
            leaky_slope: 0.01,
        }
    }

    /// Output channels of block `i` (0-based): `base · 2^i`.
    pub fn block_channels(&self) -> Vec<usize> {
        (0..self.n_blocks_head).map(|i| self.base_channels << i).collect()
    }

    /// Kernel of block `i` (0-based): `5 + 2i`.
    pub fn block_kernels(&self) -> Vec<usize> {
        (0..self.n_blocks_head).map(|i| 5 + 2 * i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks_head == 0 || self.base_channels == 0 {
            return Err(Error::invalid("finetune head needs at least one block and one channel"));
        }
        if let Task::Beam { codebook_size } = self.task {
            if codebook_size < 2 {
                return Err(Error::invalid("beam codebook needs at least 2 entries"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub head: FinetuneHeadConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Share of the training labels used, in `(0, 1]`.
    pub fraction: f64,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub validation_fraction: f64,
}

impl FinetuneConfig {
    pub fn new(task: Task) -> Self {
        FinetuneConfig {
            head: FinetuneHeadConfig::new(task),
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            fraction: 1.0,
            patience: 20,
            validation_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction must be in (0, 1], got {}", self.fraction)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must be in [0, 1)"));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("batch_size and learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMeta {
    pub config: FinetuneConfig,
    pub links_per_group: usize,
    /// Position normalization from the training labels.
    pub target_mean: [f64; 2],
    pub target_std: [f64; 2],
    pub train_groups: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub checkpoint: Checkpoint,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

pub fn init_finetune_params<R: Rng + ?Sized>(n_latent: usize, cfg: &FinetuneHeadConfig, rng: &mut R) -> Result<Params> {
    cfg.validate()?;
    let mut p = Params::new();
    let base = cfg.base_channels;
    p.insert("ft.stem.w", xavier(rng, &[base, n_latent, 1], n_latent, base));
    let mut c_in = base;
    for (i, (&c, &k)) in cfg.block_channels().iter().zip(&cfg.block_kernels()).enumerate() {
        p.insert(format!("ft.{i}.conv1.w"), xavier(rng, &[c, c_in, k], c_in * k, c * k));
        p.insert(format!("ft.{i}.conv2.w"), xavier(rng, &[c, c, k], c * k, c * k));
        if c != c_in {
            p.insert(format!("ft.{i}.proj.w"), xavier(rng, &[c, c_in, 1], c_in, c));
        }
        c_in = c;
    }
    let out = cfg.task.output_dim();
    p.insert("ft.fc.w", xavier(rng, &[c_in, out], c_in, out));
    p.insert("ft.fc.b", Tensor::zeros(&[out]));
    Ok(p)
}

/// Encode every link, arrange the latents as an `n_latent × N_r` feature map
/// per snapshot and run the residual head; returns `[B, out]`.
pub fn finetune_graph(
    g: &mut Graph,
    b: &mut Binder,
    tokens: &[&TokenSequence],
    links_per_group: usize,
    encoder: &EncoderConfig,
    head: &FinetuneHeadConfig,
) -> Result<NodeId> {
    if links_per_group == 0 || tokens.len() % links_per_group != 0 {
        return Err(Error::invalid("links do not form whole groups"));
    }
    let groups = tokens.len() / links_per_group;
    let z = encoder_graph(g, b, tokens, encoder)?;
    let z = g.reshape(z, &[groups, links_per_group, encoder.n_latent])?;
    let x = g.permute(z, &[0, 2, 1])?;
    let w = b.get(g, "ft.stem.w")?;
    let x = g.conv1d(x, w, 0)?;
    let mut x = g.leaky_relu(x, head.leaky_slope)?;
    let mut c_in = head.base_channels;
    for (i, (&c, &k)) in head.block_channels().iter().zip(&head.block_kernels()).enumerate() {
        let pad = (k - 1) / 2;
        let w1 = b.get(g, &format!("ft.{i}.conv1.w"))?;
        let y = g.conv1d(x, w1, pad)?;
        let y = g.leaky_relu(y, head.leaky_slope)?;
        let w2 = b.get(g, &format!("ft.{i}.conv2.w"))?;
        let y = g.conv1d(y, w2, pad)?;
        let skip = if c != c_in {
            let wp = b.get(g, &format!("ft.{i}.proj.w"))?;
            g.conv1d(x, wp, 0)?
        } else {
            x
        };
        let y = g.add(y, skip)?;
        x = g.leaky_relu(y, head.leaky_slope)?;
        c_in = c;
    }
    let pooled = g.global_avg_pool(x)?;
    let w = b.get(g, "ft.fc.w")?;
    let bias = b.get(g, "ft.fc.b")?;
    let y = g.matmul(pooled, w)?;
    g.add(y, bias)
}

/// Per-group regression or classification targets.
enum Targets {
    Position(Vec<[f64; 2]>),
    Beam(Vec<u32>),
}

fn task_loss(g: &mut Graph, out: NodeId, targets: &Targets, groups: &[usize], task: Task) -> Result<NodeId> {
    let b = groups.len();
    let inv_b = 1.0 / b as f64;
    match targets {
        Targets::Position(p) => {
            let data = groups.iter().flat_map(|&i| p[i]).collect();
            let t = g.constant(Tensor::new(vec![b, 2], data)?);
            let d = g.sub(out, t)?;
            let s = g.sq_l2_norm(d)?;
            g.scale(s, inv_b)
        }
        Targets::Beam(l) => {
            let c = task.output_dim();
            let mut onehot = vec![0.0; b * c];
            for (r, &i) in groups.iter().enumerate() {
                onehot[r * c + l[i] as usize] = 1.0;
            }
            let t = g.constant(Tensor::new(vec![b, c], onehot)?);
            let lp = g.log_softmax(out)?;
            let picked = g.mul(lp, t)?;
            let s = g.sum(picked)?;
            g.scale(s, -inv_b)
        }
    }
}

fn check_labels(data: &LinkDataset, task: Task) -> Result<()> {
    match (&data.labels, task) {
        (Labels::Position(_), Task::Localization) => Ok(()),
        (Labels::Beam { codebook_size, .. }, Task::Beam { codebook_size: c }) if *codebook_size == c => Ok(()),
        (Labels::None, _) => Err(Error::invalid("finetuning needs a labeled, grouped dataset")),
        _ => Err(Error::invalid(format!("dataset labels do not match the {} task", task.name()))),
    }
}

/// Deterministic stratified subsample of `groups`: beam labels stratify by
/// class, positions by a coarse grid cell.
pub fn stratified_subsample(labels: &Labels, groups: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if fraction >= 1.0 {
        return groups.to_vec();
    }
    let (lo, hi) = match labels {
        Labels::Position(p) => groups.iter().fold(([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]), |(lo, hi), &i| {
            (
                [lo[0].min(p[i][0]), lo[1].min(p[i][1])],
                [hi[0].max(p[i][0]), hi[1].max(p[i][1])],
            )
        }),
        _ => ([0.0; 2], [0.0; 2]),
    };
    let cell = |v: f64, a: f64, b: f64| {
        let span = (b - a).max(f64::MIN_POSITIVE);
        (((v - a) / span * POSITION_STRATA as f64) as usize).min(POSITION_STRATA - 1)
    };
    let key = |g: usize| -> usize {
        match labels {
            Labels::Beam { indices, .. } => indices[g] as usize,
            Labels::Position(p) => cell(p[g][0], lo[0], hi[0]) * POSITION_STRATA + cell(p[g][1], lo[1], hi[1]),
            Labels::None => 0,
        }
    };
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &g in groups {
        strata.entry(key(g)).or_default().push(g);
    }
    let mut out = Vec::new();
    for members in strata.values_mut() {
        members.shuffle(rng);
        let take = (members.len() as f64 * fraction).round() as usize;
        out.extend_from_slice(&members[..take.min(members.len())]);
    }
    if out.is_empty() {
        out.push(groups[rng.random_range(0..groups.len())]);
    }
    out.sort_unstable();
    out
}

fn normalized_targets(data: &LinkDataset, mean: [f64; 2], std: [f64; 2]) -> Targets {
    match &data.labels {
        Labels::Position(p) => Targets::Position(
            p.iter()
                .map(|q| [(q[0] - mean[0]) / std[0], (q[1] - mean[1]) / std[1]])
                .collect(),
        ),
        Labels::Beam { indices, .. } => Targets::Beam(indices.clone()),
        Labels::None => Targets::Beam(Vec::new()),
    }
}

fn position_stats(data: &LinkDataset, groups: &[usize]) -> ([f64; 2], [f64; 2]) {
    let Labels::Position(p) = &data.labels else {
        return ([0.0; 2], [1.0; 2]);
    };
    let n = groups.len() as f64;
    let mut mean = [0.0; 2];
    for &g in groups {
        mean[0] += p[g][0] / n;
        mean[1] += p[g][1] / n;
    }
    let mut var = [0.0; 2];
    for &g in groups {
        var[0] += (p[g][0] - mean[0]).powi(2) / n;
        var[1] += (p[g][1] - mean[1]).powi(2) / n;
    }
    let std = [var[0].sqrt().max(1e-9), var[1].sqrt().max(1e-9)];
    (mean, std)
}

struct Prepared<'a> {
    tokens: Vec<TokenSequence>,
    n_r: usize,
    encoder: &'a EncoderConfig,
    head: &'a FinetuneHeadConfig,
}

impl Prepared<'_> {
    fn group_tokens(&self, groups: &[usize]) -> Vec<&TokenSequence> {
        groups
            .iter()
            .flat_map(|&g| self.tokens[g * self.n_r..(g + 1) * self.n_r].iter())
            .collect()
    }

    fn mean_loss(&self, params: &Params, targets: &Targets, groups: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in groups.chunks(INFERENCE_GROUPS) {
            let mut g = Graph::new();
            let mut b = Binder::new(params);
            let out = finetune_graph(&mut g, &mut b, &self.group_tokens(chunk), self.n_r, self.encoder, self.head)?;
            let l = task_loss(&mut g, out, targets, chunk, self.head.task)?;
            total += g.value(l).data()[0] * chunk.len() as f64;
        }
        Ok(total / groups.len() as f64)
    }
}

fn tokenize_scaled(ckpt: &Checkpoint, data: &LinkDataset) -> Vec<TokenSequence> {
    data.samples
        .iter()
        .map(|s| tokenize(&s.scaled(ckpt.meta.input_scale)))
        .collect()
}

/// Train the residual head jointly with the pretrained encoder.
pub fn finetune(pretrained: &Checkpoint, labeled: &LinkDataset, cfg: &FinetuneConfig) -> Result<FinetuneRun> {
    cfg.validate()?;
    check_labels(labeled, cfg.head.task)?;
    if labeled.num_taps() != pretrained.meta.num_taps {
        return Err(Error::invalid(format!(
            "dataset has {} taps, model was pretrained on {}",
            labeled.num_taps(),
            pretrained.meta.num_taps
        )));
    }
    let n_groups = labeled.num_groups();
    if n_groups == 0 {
        return Err(Error::invalid("no labeled groups"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = &pretrained.meta.pretrain.encoder;
    let mut params = pretrained.params.clone();
    params.extend(init_finetune_params(encoder.n_latent, &cfg.head, &mut rng)?);

    let mut all: Vec<usize> = (0..n_groups).collect();
    all.shuffle(&mut rng);
    let n_val = if n_groups >= 2 {
        ((n_groups as f64 * cfg.validation_fraction).round() as usize).min(n_groups - 1)
    } else {
        0
    };
    let mut val: Vec<usize> = all[..n_val].to_vec();
    val.sort_unstable();
    let mut pool: Vec<usize> = all[n_val..].to_vec();
    pool.sort_unstable();
    let train = stratified_subsample(&labeled.labels, &pool, cfg.fraction, &mut rng);

    let (mean, std) = position_stats(labeled, &train);
    let targets = normalized_targets(labeled, mean, std);
    let prep = Prepared {
        tokens: tokenize_scaled(pretrained, labeled),
        n_r: labeled.links_per_group,
        encoder,
        head: &cfg.head,
    };
    let trainable: Vec<String> = params
        .iter()
        .map(|(k, _)| k.clone())
        .filter(|k| k != "dict" && !k.starts_with("head."))
        .collect();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut train_loss = Vec::new();
    let mut val_loss = Vec::new();
    let mut order = train.clone();
    let mut steps = 0u64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let mut b = Binder::new(&params);
            let out = finetune_graph(&mut g, &mut b, &prep.group_tokens(batch), prep.n_r, encoder, &cfg.head)?;
            let l = task_loss(&mut g, out, &targets, batch, cfg.head.task)?;
            let v = g.value(l).data()[0];
            if !v.is_finite() {
                return Err(Error::Numeric(format!("finetune loss became {v} in epoch {epoch}")));
            }
            sum += v * batch.len() as f64;
            let grads = g.backward_from(l)?;
            opt.step(&mut params, &grads, &trainable);
            steps += 1;
        }
        train_loss.push(sum / order.len() as f64);
        let monitor = if val.is_empty() {
            *train_loss.last().unwrap_or(&f64::INFINITY)
        } else {
            prep.mean_loss(&params, &targets, &val)?
        };
        val_loss.push(monitor);
        if monitor < best.0 {
            best = (monitor, epoch, params.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }

    let mut ckpt = pretrained.clone();
    ckpt.params = best.2;
    ckpt.meta.step += steps;
    ckpt.meta.rng = RngState::capture(&rng);
    ckpt.meta.finetune = Some(FinetuneMeta {
        config: cfg.clone(),
        links_per_group: labeled.links_per_group,
        target_mean: mean,
        target_std: std,
        train_groups: train.len(),
        epochs_run: train_loss.len(),
        best_epoch: best.1,
        best_val_loss: best.0,
    });
    Ok(FinetuneRun {
        checkpoint: ckpt,
        train_loss,
        val_loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Positions(Vec<[f64; 2]>),
    Beams(Vec<u32>),
}

pub fn predict(ckpt: &Checkpoint, data: &LinkDataset) -> Result<Predictions> {
    let meta = ckpt
        .meta
        .finetune
        .as_ref()
        .ok_or_else(|| Error::invalid("checkpoint has no finetuned head"))?;
    if data.links_per_group != meta.links_per_group {
        return Err(Error::invalid(format!(
            "dataset groups {} links, model expects {}",
            data.links_per_group, meta.links_per_group
        )));
    }
    let prep = Prepared {
        tokens: tokenize_scaled(ckpt, data),
        n_r: data.links_per_group,
        encoder: &ckpt.meta.pretrain.encoder,
        head: &meta.config.head,
    };
    let groups: Vec<usize> = (0..data.num_groups()).collect();
    let out_dim = meta.config.head.task.output_dim();
    let mut rows = Vec::with_capacity(groups.len() * out_dim);
    for chunk in groups.chunks(INFERENCE_GROUPS) {
        let mut g = Graph::new();
        let mut b = Binder::new(&ckpt.params);
        let out = finetune_graph(&mut g, &mut b, &prep.group_tokens(chunk), prep.n_r, prep.encoder, prep.head)?;
        rows.extend_from_slice(g.value(out).data());
    }
    Ok(match meta.config.head.task {
        Task::Localization => Predictions::Positions(
            rows.chunks(2)
                .map(|r| {
                    [
                        r[0] * meta.target_std[0] + meta.target_mean[0],
                        r[1] * meta.target_std[1] + meta.target_mean[1],
                    ]
                })
                .collect(),
        ),
        Task::Beam { .. } => Predictions::Beams(
            rows.chunks(out_dim)
                .map(|r| {
                    let mut best = 0;
                    for (i, &v) in r.iter().enumerate() {
                        if v > r[best] {
                            best = i;
                        }
                    }
                    best as u32
                })
                .collect(),
        ),
    })
}

pub fn evaluate(ckpt: &Checkpoint, test: &LinkDataset) -> Result<MetricsReport> {
    if test.num_groups() == 0 {
        return Err(Error::invalid("empty test set"));
    }
    let task = ckpt
        .meta
        .finetune
        .as_ref()
        .ok_or_else(|| Error::invalid("checkpoint has no finetuned head"))?
        .config
        .head
        .task;
    check_labels(test, task)?;
    match (predict(ckpt, test)?, &test.labels) {
        (Predictions::Positions(p), Labels::Position(truth)) => {
            let errors = euclidean_errors(&p, truth);
            Ok(MetricsReport {
                task: task.name().into(),
                num_samples: errors.len(),
                mae_m: Some(mae(&errors)?),
                ce90_m: Some(ce90(&errors)?),
                top1_pct: None,
                per_sample_errors: errors,
            })
        }
        (Predictions::Beams(p), Labels::Beam { indices, .. }) => Ok(MetricsReport {
            task: task.name().into(),
            num_samples: p.len(),
            mae_m: None,
            ce90_m: None,
            top1_pct: Some(top1(&p, indices)?),
            per_sample_errors: p.iter().zip(indices).map(|(a, b)| f64::from(u8::from(a != b))).collect(),
        }),
        _ => Err(Error::invalid("prediction kind does not match labels")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_blocks_grow_width_and_kernel() {
        let h = FinetuneHeadConfig::new(Task::Localization);
        assert_eq!(h.block_channels(), vec![16, 32, 64, 128]);
        assert_eq!(h.block_kernels(), vec![5, 7, 9, 11]);
    }

    #[test]
    fn head_output_shape_and_residual_projection() {
        let enc = EncoderConfig {
            n_latent: 8,
            n_heads: 2,
            n_blocks: 1,
            n_hidden: 8,
            max_tokens: 4,
            leaky_slope: 0.01,
        };
        let head = FinetuneHeadConfig::new(Task::Beam { codebook_size: 5 });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = crate::encoder::init_encoder_params(&enc, &mut rng).unwrap();
        p.extend(init_finetune_params(8, &head, &mut rng).unwrap());
        assert!(!p.contains("ft.0.proj.w"));
        assert!(p.contains("ft.1.proj.w"));
        let sample = crate::channel::ChannelSample::new(vec![0.5; 9], vec![-0.2; 9], 1e8).unwrap();
        let toks: Vec<TokenSequence> = (0..6).map(|_| tokenize(&sample)).collect();
        let refs: Vec<&TokenSequence> = toks.iter().collect();
        let mut g = Graph::new();
        let mut b = Binder::new(&p);
        let out = finetune_graph(&mut g, &mut b, &refs, 3, &enc, &head).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 5]);
    }

    #[test]
    fn full_fraction_keeps_every_group_once() {
        let labels = Labels::Beam {
            codebook_size: 3,
            indices: vec![0, 1, 2, 0, 1, 2, 0],
        };
        let groups: Vec<usize> = (0..7).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(stratified_subsample(&labels, &groups, 1.0, &mut rng), groups);
    }

    #[test]
    fn stratified_fraction_covers_every_class() {
        let indices: Vec<u32> = (0..100).map(|i| (i % 4) as u32).collect();
        let labels = Labels::Beam { codebook_size: 4, indices };
        let groups: Vec<usize> = (0..100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = stratified_subsample(&labels, &groups, 0.2, &mut rng);
        assert_eq!(s.len(), 20);
        for c in 0..4 {
            assert_eq!(s.iter().filter(|&&g| g % 4 == c).count(), 5);
        }
        let mut again = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(stratified_subsample(&labels, &groups, 0.2, &mut again), s);
    }

    #[test]
    fn position_strata_cover_the_area() {
        let p: Vec<[f64; 2]> = (0..400).map(|i| [(i % 20) as f64, (i / 20) as f64]).collect();
        let labels = Labels::Position(p.clone());
        let groups: Vec<usize> = (0..400).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = stratified_subsample(&labels, &groups, 0.25, &mut rng);
        let cell = |v: f64| ((v * 4.0 / 19.0) as usize).min(3);
        let mut total = BTreeMap::new();
        let mut kept = BTreeMap::new();
        for g in 0..400 {
            *total.entry((cell(p[g][0]), cell(p[g][1]))).or_insert(0usize) += 1;
        }
        for &g in &s {
            *kept.entry((cell(p[g][0]), cell(p[g][1]))).or_insert(0usize) += 1;
        }
        assert_eq!(total.len(), 16);
        for (k, n) in total {
            assert_eq!(kept[&k], (n as f64 * 0.25).round() as usize, "cell {k:?}");
        }
    }
}
