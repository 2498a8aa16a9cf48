//! Synthetic multipath channels: continuous paths sampled through an ideal
//! band-limited receiver, scene geometry, and labeled link datasets.

mod dataset;
mod scene;

pub use dataset::{Labels, LinkDataset, DATASET_MAGIC, DATASET_VERSION};
pub use scene::{
    arrival_angle, beam_angles, best_beam, make_beam_dataset, point_at_angle, random_positions, sample_scene,
    steering_labels, SceneConfig, CARRIER_HZ,
    SPEED_OF_LIGHT,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Taps past the observation window a delay may fall before it is rejected.
pub const DELAY_GUARD_TAPS: f64 = 8.0;

/// One propagation path: delay `tau` (s), magnitude, and phase (rad).
/// Its complex coefficient is `magnitude · e^{−i·phase}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub tau: f64,
    pub magnitude: f64,
    pub phase: f64,
}

impl PathSpec {
    pub fn coefficient(&self) -> (f64, f64) {
        (
            self.magnitude * self.phase.cos(),
            -self.magnitude * self.phase.sin(),
        )
    }
}

/// One discrete link measurement. Storage is 0-based: `re[j]` holds tap
/// `m = j + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSample {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub bandwidth_hz: f64,
}

impl ChannelSample {
    pub fn new(re: Vec<f64>, im: Vec<f64>, bandwidth_hz: f64) -> Result<Self> {
        if re.len() != im.len() || re.is_empty() {
            return Err(Error::invalid(format!(
                "channel needs equal, non-empty re/im lengths (got {} and {})",
                re.len(),
                im.len()
            )));
        }
        Ok(ChannelSample {
            re,
            im,
            bandwidth_hz,
        })
    }

    pub fn zeros(num_taps: usize, bandwidth_hz: f64) -> Self {
        ChannelSample {
            re: vec![0.0; num_taps],
            im: vec![0.0; num_taps],
            bandwidth_hz,
        }
    }

    pub fn num_taps(&self) -> usize {
        self.re.len()
    }

    /// Tap `m` in 1-based indexing.
    pub fn tap(&self, m: usize) -> (f64, f64) {
        (self.re[m - 1], self.im[m - 1])
    }

    pub fn magnitude(&self, j: usize) -> f64 {
        self.re[j].hypot(self.im[j])
    }

    pub fn peak_magnitude(&self) -> f64 {
        (0..self.num_taps()).fold(0.0, |m, j| m.max(self.magnitude(j)))
    }

    pub fn energy(&self) -> f64 {
        self.re.iter().chain(&self.im).map(|v| v * v).sum()
    }

    /// `[re..., im...]`
    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.re.clone();
        v.extend_from_slice(&self.im);
        v
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ChannelSample {
            re: self.re.iter().map(|v| v * factor).collect(),
            im: self.im.iter().map(|v| v * factor).collect(),
            bandwidth_hz: self.bandwidth_hz,
        }
    }
}

/// Normalized sinc, `sin(πx)/(πx)` with `sinc(0) = 1`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Sample `h[m] = Σ_k a_k·sinc(m − τ_k·W) + w_m` for `m = 1..=M`.
///
/// Noise is circular complex Gaussian with per-component standard deviation
/// `noise_sigma/√2`; nothing is drawn from `rng` when `noise_sigma == 0`.
pub fn synth_cir<R: Rng + ?Sized>(
    paths: &[PathSpec],
    num_taps: usize,
    bandwidth_hz: f64,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<ChannelSample> {
    if num_taps == 0 {
        return Err(Error::invalid("channel needs at least one tap"));
    }
    if !(bandwidth_hz > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth_hz}")));
    }
    if noise_sigma < 0.0 {
        return Err(Error::invalid(format!("noise_sigma must be ≥ 0, got {noise_sigma}")));
    }
    let mut out = ChannelSample::zeros(num_taps, bandwidth_hz);
    for p in paths {
        if p.tau < 0.0 || p.magnitude < 0.0 {
            return Err(Error::invalid(format!("invalid path {p:?}")));
        }
        let shift = p.tau * bandwidth_hz;
        if shift > num_taps as f64 + DELAY_GUARD_TAPS {
            return Err(Error::invalid(format!(
                "path delay {} taps lies beyond the {num_taps}-tap window plus guard",
                shift
            )));
        }
        let (ar, ai) = p.coefficient();
        for j in 0..num_taps {
            let s = sinc((j + 1) as f64 - shift);
            out.re[j] += ar * s;
            out.im[j] += ai * s;
        }
    }
    if noise_sigma > 0.0 {
        let std = noise_sigma / std::f64::consts::SQRT_2;
        for j in 0..num_taps {
            let nr: f64 = rng.sample(StandardNormal);
            let ni: f64 = rng.sample(StandardNormal);
            out.re[j] += std * nr;
            out.im[j] += std * ni;
        }
    }
    Ok(out)
}
