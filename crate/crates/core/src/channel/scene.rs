use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{synth_cir, ChannelSample, Labels, LinkDataset, PathSpec};
use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Carrier used to derive path phases from delays.
pub const CARRIER_HZ: f64 = 3.5e9;
/// Distances are clamped to this before computing delays and magnitudes.
pub const MIN_DISTANCE_M: f64 = 0.1;

/// A rectangular area `[0, width] × [0, height]` observed by fixed anchors.
///
/// Reflectors are walls parallel to the area edges, `wall_margin` meters
/// outside it, taken in the order top, right, left, bottom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: f64,
    pub height: f64,
    pub anchors: Vec<[f64; 2]>,
    pub paths_per_link: usize,
    pub reflectors: usize,
    pub wall_margin: f64,
    pub reflection_coeff: f64,
    pub noise_sigma: f64,
    pub num_taps: usize,
    pub bandwidth_hz: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 20.0,
            height: 20.0,
            anchors: vec![[10.0, -1.0], [21.0, 10.0], [10.0, 21.0], [-1.0, 10.0]],
            paths_per_link: 3,
            reflectors: 2,
            wall_margin: 3.0,
            reflection_coeff: 0.5,
            noise_sigma: 0.002,
            num_taps: 32,
            bandwidth_hz: 100e6,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(Error::invalid("scene needs at least one anchor"));
        }
        if self.paths_per_link == 0 {
            return Err(Error::invalid("paths_per_link must be ≥ 1"));
        }
        if self.reflectors > 4 {
            return Err(Error::invalid(format!("at most 4 reflectors, got {}", self.reflectors)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be ≥ 0"));
        }
        if !(self.width > 0.0 && self.height > 0.0 && self.bandwidth_hz > 0.0) || self.num_taps == 0 {
            return Err(Error::invalid("scene extents, bandwidth and num_taps must be positive"));
        }
        Ok(())
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        (0.0..=self.width).contains(&p[0]) && (0.0..=self.height).contains(&p[1])
    }

    /// Mirror image of `a` across each active wall.
    fn mirrors(&self, a: [f64; 2]) -> Vec<[f64; 2]> {
        let m = self.wall_margin;
        let top = self.height + m;
        let right = self.width + m;
        let walls: [[f64; 2]; 4] = [
            [a[0], 2.0 * top - a[1]],
            [2.0 * right - a[0], a[1]],
            [-2.0 * m - a[0], a[1]],
            [a[0], -2.0 * m - a[1]],
        ];
        walls[..self.reflectors].to_vec()
    }

    /// Geometric paths from `anchor` to `pos`, shortest first, truncated to
    /// `paths_per_link`.
    pub fn link_paths(&self, anchor: [f64; 2], pos: [f64; 2]) -> Vec<PathSpec> {
        let mut paths = vec![geometric_path(dist(anchor, pos), 1.0)];
        for img in self.mirrors(anchor) {
            paths.push(geometric_path(dist(img, pos), self.reflection_coeff));
        }
        paths.sort_by(|a, b| a.tau.total_cmp(&b.tau));
        paths.truncate(self.paths_per_link);
        paths
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1]).max(MIN_DISTANCE_M)
}

/// Wrap into `(−π, π]`.
pub(crate) fn wrap_phase(x: f64) -> f64 {
    let mut r = x.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

fn geometric_path(length: f64, gain: f64) -> PathSpec {
    let tau = length / SPEED_OF_LIGHT;
    PathSpec {
        tau,
        magnitude: gain / length,
        phase: wrap_phase(-2.0 * PI * CARRIER_HZ * tau),
    }
}

/// Uniform positions inside the scene area.
pub fn random_positions(scene: &SceneConfig, n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            [
                rng.random::<f64>() * scene.width,
                rng.random::<f64>() * scene.height,
            ]
        })
        .collect()
}

/// One link per anchor for every position, labeled with the position.
///
/// Position `i` draws its noise from stream `i` of a generator keyed by the
/// scene seed, so results do not depend on evaluation order.
pub fn sample_scene(scene: &SceneConfig, positions: &[[f64; 2]]) -> Result<LinkDataset> {
    scene.validate()?;
    if positions.is_empty() {
        return Err(Error::invalid("no positions given"));
    }
    if let Some(p) = positions.iter().find(|p| !scene.contains(**p)) {
        return Err(Error::invalid(format!("position {p:?} outside the scene area")));
    }
    let groups: Vec<Vec<ChannelSample>> = positions
        .par_iter()
        .enumerate()
        .map(|(i, &pos)| {
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
            rng.set_stream(i as u64);
            scene
                .anchors
                .iter()
                .map(|&a| {
                    synth_cir(
                        &scene.link_paths(a, pos),
                        scene.num_taps,
                        scene.bandwidth_hz,
                        scene.noise_sigma,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    LinkDataset::new(
        groups.into_iter().flatten().collect(),
        scene.num_anchors(),
        Labels::Position(positions.to_vec()),
    )
}

/// Codebook steering angles, uniform over `(−π/2, π/2)`.
pub fn beam_angles(codebook_size: usize) -> Vec<f64> {
    (0..codebook_size)
        .map(|b| -PI / 2.0 + PI * (b as f64 + 0.5) / codebook_size as f64)
        .collect()
}

/// Array gain of a half-wavelength ULA with `codebook_size` elements steered
/// at `steer` toward a source at `angle`.
fn array_gain(angle: f64, steer: f64, n: usize) -> f64 {
    let d = PI * (angle.sin() - steer.sin());
    let (mut re, mut im) = (0.0, 0.0);
    for k in 0..n {
        re += (k as f64 * d).cos();
        im += (k as f64 * d).sin();
    }
    re.hypot(im)
}

/// Index of the best codebook beam for a direct path arriving at `angle`.
pub fn best_beam(angle: f64, codebook_size: usize) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (b, s) in beam_angles(codebook_size).into_iter().enumerate() {
        let g = array_gain(angle, s, codebook_size);
        if g > best.1 {
            best = (b, g);
        }
    }
    best.0
}

/// Broadside of the beam array at anchor 0: toward the area center.
fn broadside(scene: &SceneConfig) -> [f64; 2] {
    let a = scene.anchors[0];
    let c = [scene.width / 2.0, scene.height / 2.0];
    let (dx, dy) = (c[0] - a[0], c[1] - a[1]);
    let n = dx.hypot(dy);
    if n == 0.0 {
        [0.0, 1.0]
    } else {
        [dx / n, dy / n]
    }
}

/// Signed angle of `pos` seen from anchor 0, relative to the array broadside.
pub fn arrival_angle(scene: &SceneConfig, pos: [f64; 2]) -> f64 {
    let a = scene.anchors[0];
    let u = broadside(scene);
    let d = [pos[0] - a[0], pos[1] - a[1]];
    let cross = u[0] * d[1] - u[1] * d[0];
    let dot = u[0] * d[0] + u[1] * d[1];
    cross.atan2(dot)
}

/// Point at `range` meters from anchor 0 along `angle` off broadside.
pub fn point_at_angle(scene: &SceneConfig, angle: f64, range: f64) -> [f64; 2] {
    let a = scene.anchors[0];
    let u = broadside(scene);
    let (s, c) = angle.sin_cos();
    // rotate u by +angle
    let v = [u[0] * c - u[1] * s, u[0] * s + u[1] * c];
    [a[0] + range * v[0], a[1] + range * v[1]]
}

pub fn steering_labels(scene: &SceneConfig, positions: &[[f64; 2]], codebook_size: usize) -> Vec<u32> {
    positions
        .iter()
        .map(|&p| best_beam(arrival_angle(scene, p), codebook_size) as u32)
        .collect()
}

/// Same links as [`sample_scene`], labeled with the best beam of anchor 0.
pub fn make_beam_dataset(scene: &SceneConfig, codebook_size: usize, positions: &[[f64; 2]]) -> Result<LinkDataset> {
    if codebook_size < 2 {
        return Err(Error::invalid(format!("codebook size must be ≥ 2, got {codebook_size}")));
    }
    let base = sample_scene(scene, positions)?;
    let labels = Labels::Beam {
        codebook_size,
        indices: steering_labels(scene, positions, codebook_size),
    };
    LinkDataset::new(base.samples, base.links_per_group, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_anchor(reflectors: usize) -> SceneConfig {
        SceneConfig {
            anchors: vec![[5.0, 0.0]],
            reflectors,
            paths_per_link: 1 + reflectors,
            noise_sigma: 0.0,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn coincident_position_is_clamped() {
        let s = single_anchor(0);
        let paths = s.link_paths([5.0, 0.0], [5.0, 0.0]);
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].tau, 0.1 / SPEED_OF_LIGHT);
        assert_eq!(paths[0].magnitude, 1.0 / 0.1);
    }

    #[test]
    fn single_reflector_geometry() {
        let s = single_anchor(1);
        let (a, p) = ([5.0, 0.0], [8.0, 4.0]);
        let paths = s.link_paths(a, p);
        assert_eq!(paths.len(), 2);
        // Direct: 3-4-5 triangle. Top wall at y = 23, image at (5, 46).
        let direct = 5.0;
        let reflected = (3.0f64 * 3.0 + 42.0 * 42.0).sqrt();
        assert!((paths[0].tau - direct / SPEED_OF_LIGHT).abs() < 1e-20);
        assert!((paths[1].tau - reflected / SPEED_OF_LIGHT).abs() < 1e-20);
        assert!((paths[1].magnitude - 0.5 / reflected).abs() < 1e-15);
        let want_phase = wrap_phase(-2.0 * PI * CARRIER_HZ * direct / SPEED_OF_LIGHT);
        assert!((paths[0].phase - want_phase).abs() < 1e-12);
    }

    #[test]
    fn identical_positions_identical_channels() {
        let s = SceneConfig {
            noise_sigma: 0.0,
            ..SceneConfig::default()
        };
        let ds = sample_scene(&s, &[[3.0, 4.0], [3.0, 4.0]]).unwrap();
        let n = s.num_anchors();
        assert_eq!(ds.samples[..n], ds.samples[n..]);
    }

    #[test]
    fn seeded_scene_is_reproducible() {
        let s = SceneConfig::default();
        let pos = random_positions(&s, 16, 3);
        let a = sample_scene(&s, &pos).unwrap();
        let b = sample_scene(&s, &pos).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_and_outside_positions_rejected() {
        let s = SceneConfig::default();
        assert!(sample_scene(&s, &[]).is_err());
        assert!(sample_scene(&s, &[[-1.0, 2.0]]).is_err());
    }

    #[test]
    fn on_steering_angle_picks_that_beam() {
        let s = SceneConfig::default();
        for (b, angle) in beam_angles(16).into_iter().enumerate() {
            assert_eq!(best_beam(angle, 16), b);
        }
        let angle = beam_angles(16)[9];
        let p = point_at_angle(&s, angle, 6.0);
        assert!((arrival_angle(&s, p) - angle).abs() < 1e-12);
        assert_eq!(steering_labels(&s, &[p], 16), vec![9]);
    }

    #[test]
    fn beam_labels_in_range() {
        let s = SceneConfig::default();
        let pos = random_positions(&s, 200, 9);
        let ds = make_beam_dataset(&s, 16, &pos).unwrap();
        match &ds.labels {
            Labels::Beam { codebook_size, indices } => {
                assert_eq!(*codebook_size, 16);
                assert!(indices.iter().all(|&l| l < 16));
            }
            other => panic!("unexpected labels {other:?}"),
        }
        assert!(make_beam_dataset(&s, 1, &pos).is_err());
    }

    #[test]
    fn every_beam_occurs_over_uniform_positions() {
        let s = SceneConfig::default();
        let pos = random_positions(&s, 10_000, 21);
        let mut counts = [0usize; 16];
        for l in steering_labels(&s, &pos, 16) {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }
}
