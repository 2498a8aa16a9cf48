use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ChannelSample;
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::stats::nearest_rank;

pub const DATASET_MAGIC: &[u8; 4] = b"SPRT";
pub const DATASET_VERSION: u16 = 1;

const LABEL_NONE: u8 = 0;
const LABEL_POSITION: u8 = 1;
const LABEL_BEAM: u8 = 2;

/// Per-group labels. A group is `links_per_group` consecutive links
/// measured for one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    None,
    Position(Vec<[f64; 2]>),
    Beam { codebook_size: usize, indices: Vec<u32> },
}

impl Labels {
    pub fn len(&self) -> Option<usize> {
        match self {
            Labels::None => None,
            Labels::Position(p) => Some(p.len()),
            Labels::Beam { indices, .. } => Some(indices.len()),
        }
    }

    pub fn is_labeled(&self) -> bool {
        !matches!(self, Labels::None)
    }

    fn select(&self, groups: &[usize]) -> Labels {
        match self {
            Labels::None => Labels::None,
            Labels::Position(p) => Labels::Position(groups.iter().map(|&g| p[g]).collect()),
            Labels::Beam { codebook_size, indices } => Labels::Beam {
                codebook_size: *codebook_size,
                indices: groups.iter().map(|&g| indices[g]).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDataset {
    pub samples: Vec<ChannelSample>,
    pub links_per_group: usize,
    pub labels: Labels,
}

impl LinkDataset {
    pub fn new(samples: Vec<ChannelSample>, links_per_group: usize, labels: Labels) -> Result<Self> {
        if links_per_group == 0 {
            return Err(Error::invalid("links_per_group must be ≥ 1"));
        }
        if let Some(first) = samples.first() {
            let bad = samples
                .iter()
                .any(|s| s.num_taps() != first.num_taps() || s.bandwidth_hz != first.bandwidth_hz);
            if bad {
                return Err(Error::invalid("all links must share tap count and bandwidth"));
            }
        }
        if let Some(n) = labels.len() {
            if samples.len() != n * links_per_group {
                return Err(Error::invalid(format!(
                    "{} links do not form {n} groups of {links_per_group}",
                    samples.len()
                )));
            }
        }
        if let Labels::Beam { codebook_size, indices } = &labels {
            if indices.iter().any(|&i| i as usize >= *codebook_size) {
                return Err(Error::invalid("beam label outside the codebook"));
            }
        }
        Ok(LinkDataset {
            samples,
            links_per_group,
            labels,
        })
    }

    pub fn unlabeled(samples: Vec<ChannelSample>) -> Result<Self> {
        Self::new(samples, 1, Labels::None)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_taps(&self) -> usize {
        self.samples.first().map_or(0, ChannelSample::num_taps)
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.samples.first().map_or(0.0, |s| s.bandwidth_hz)
    }

    pub fn num_groups(&self) -> usize {
        self.samples.len() / self.links_per_group
    }

    pub fn group(&self, g: usize) -> &[ChannelSample] {
        &self.samples[g * self.links_per_group..(g + 1) * self.links_per_group]
    }

    /// A dataset holding only the listed groups, in the given order.
    pub fn select_groups(&self, groups: &[usize]) -> LinkDataset {
        let samples = groups.iter().flat_map(|&g| self.group(g).iter().cloned()).collect();
        LinkDataset {
            samples,
            links_per_group: self.links_per_group,
            labels: self.labels.select(groups),
        }
    }

    /// Split off the first `n` groups.
    pub fn split_groups(&self, n: usize) -> (LinkDataset, LinkDataset) {
        let n = n.min(self.num_groups());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.num_groups()).collect();
        (self.select_groups(&head), self.select_groups(&tail))
    }

    /// Every link as its own unlabeled sample, as used for pretraining.
    pub fn links(&self) -> LinkDataset {
        LinkDataset {
            samples: self.samples.clone(),
            links_per_group: 1,
            labels: Labels::None,
        }
    }

    /// `1 / p99(per-link peak magnitude)`, nearest-rank.
    pub fn global_scale_factor(&self) -> Result<f64> {
        let peaks: Vec<f64> = self.samples.iter().map(ChannelSample::peak_magnitude).collect();
        let p99 = nearest_rank(&peaks, 0.99).ok_or_else(|| Error::invalid("cannot normalize an empty dataset"))?;
        if !(p99 > 0.0) {
            return Err(Error::Numeric("dataset is all zeros; no normalization factor".into()));
        }
        Ok(1.0 / p99)
    }

    /// Scale every link by one shared factor so the 99th-percentile peak is 1.
    pub fn normalize_global(&self) -> Result<LinkDataset> {
        let f = self.global_scale_factor()?;
        Ok(self.scaled(f))
    }

    pub fn scaled(&self, factor: f64) -> LinkDataset {
        LinkDataset {
            samples: self.samples.iter().map(|s| s.scaled(factor)).collect(),
            links_per_group: self.links_per_group,
            labels: self.labels.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(DATASET_MAGIC);
        w.u16(DATASET_VERSION);
        w.u32(self.num_taps() as u32);
        w.u32(self.links_per_group as u32);
        w.u64(self.samples.len() as u64);
        for s in &self.samples {
            for (re, im) in s.re.iter().zip(&s.im) {
                w.f64(*re);
                w.f64(*im);
            }
        }
        match &self.labels {
            Labels::None => w.u8(LABEL_NONE),
            Labels::Position(ps) => {
                w.u8(LABEL_POSITION);
                for p in ps {
                    w.f64(p[0]);
                    w.f64(p[1]);
                }
            }
            Labels::Beam { codebook_size, indices } => {
                w.u8(LABEL_BEAM);
                w.u32(*codebook_size as u32);
                for &i in indices {
                    w.u32(i);
                }
            }
        }
        w.f64(self.bandwidth_hz());
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("dataset", bytes);
        r.header(DATASET_MAGIC, DATASET_VERSION)?;
        let m = r.u32()? as usize;
        let links = r.u32()? as usize;
        let count = r.u64()? as usize;
        if links == 0 || (count > 0 && m == 0) {
            return Err(Error::format("dataset", "zero taps or zero links per group"));
        }
        if count.saturating_mul(m).saturating_mul(16) > bytes.len() {
            return Err(Error::format("dataset", "sample block larger than file"));
        }
        let mut raw = Vec::with_capacity(count);
        for _ in 0..count {
            let mut re = Vec::with_capacity(m);
            let mut im = Vec::with_capacity(m);
            for _ in 0..m {
                re.push(r.f64()?);
                im.push(r.f64()?);
            }
            raw.push((re, im));
        }
        if count % links != 0 {
            return Err(Error::format("dataset", format!("{count} links not divisible by {links}")));
        }
        let groups = count / links;
        let labels = match r.u8()? {
            LABEL_NONE => Labels::None,
            LABEL_POSITION => {
                let mut ps = Vec::with_capacity(groups);
                for _ in 0..groups {
                    ps.push([r.f64()?, r.f64()?]);
                }
                Labels::Position(ps)
            }
            LABEL_BEAM => {
                let codebook_size = r.u32()? as usize;
                let mut indices = Vec::with_capacity(groups);
                for _ in 0..groups {
                    indices.push(r.u32()?);
                }
                Labels::Beam { codebook_size, indices }
            }
            k => return Err(Error::format("dataset", format!("unknown label kind {k}"))),
        };
        let bandwidth_hz = r.f64()?;
        r.finish()?;
        let samples = raw
            .into_iter()
            .map(|(re, im)| ChannelSample { re, im, bandwidth_hz })
            .collect();
        LinkDataset::new(samples, links, labels).map_err(|e| Error::format("dataset", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
