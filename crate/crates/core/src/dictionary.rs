//! Atom dictionaries: the closed-form shifted-sinc basis and learned
//! unit-norm bases, with Gram-matrix diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::channel::sinc;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DICTIONARY_MAGIC: &[u8; 4] = b"SPRD";
pub const DICTIONARY_VERSION: u16 = 1;

/// Atoms with a norm below this are treated as degenerate by the coherence
/// statistics (e.g. a sinc centered just outside the window).
pub const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DictionaryKind {
    Fixed { tau_max: f64, bandwidth_hz: f64 },
    Learned,
}

/// An `M × N` real matrix whose columns are atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Tensor,
    kind: DictionaryKind,
}

impl Dictionary {
    pub fn from_tensor(atoms: Tensor, kind: DictionaryKind) -> Result<Self> {
        if atoms.ndim() != 2 || atoms.is_empty() {
            return Err(Error::invalid(format!("dictionary must be a non-empty M×N matrix, got {:?}", atoms.shape())));
        }
        Ok(Dictionary { atoms, kind })
    }

    pub fn atoms(&self) -> &Tensor {
        &self.atoms
    }

    pub fn kind(&self) -> DictionaryKind {
        self.kind
    }

    pub fn is_learned(&self) -> bool {
        matches!(self.kind, DictionaryKind::Learned)
    }

    pub fn num_taps(&self) -> usize {
        self.atoms.shape()[0]
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.shape()[1]
    }

    #[inline]
    pub fn entry(&self, row: usize, atom: usize) -> f64 {
        self.atoms.data()[row * self.num_atoms() + atom]
    }

    pub fn atom(&self, i: usize) -> Vec<f64> {
        (0..self.num_taps()).map(|r| self.entry(r, i)).collect()
    }

    pub fn atom_norms(&self) -> Vec<f64> {
        (0..self.num_atoms())
            .map(|i| (0..self.num_taps()).map(|r| self.entry(r, i).powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    /// `ΨᵀΨ`, row-major `N × N`.
    pub fn gram(&self) -> Vec<f64> {
        let (m, n) = (self.num_taps(), self.num_atoms());
        let d = self.atoms.data();
        let mut g = vec![0.0; n * n];
        for r in 0..m {
            let row = &d[r * n..(r + 1) * n];
            for i in 0..n {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    g[i * n + j] += a * row[j];
                }
            }
        }
        g
    }

    /// `Ψ·x` for a length-N real vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.num_atoms();
        self.atoms
            .data()
            .chunks(n)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Rescale every column to unit L2 norm. Only learned dictionaries carry
    /// this invariant; a zero column is reported rather than reinitialized.
    pub fn renormalize_atoms(&self) -> Result<Dictionary> {
        if !self.is_learned() {
            return Err(Error::invalid("only learned dictionaries are renormalized"));
        }
        let norms = self.atom_norms();
        if let Some(i) = norms.iter().position(|&v| v == 0.0 || !v.is_finite()) {
            return Err(Error::Numeric(format!("atom {i} has norm {}; cannot renormalize", norms[i])));
        }
        let n = self.num_atoms();
        let mut atoms = self.atoms.clone();
        for (k, v) in atoms.data_mut().iter_mut().enumerate() {
            *v /= norms[k % n];
        }
        Ok(Dictionary { atoms, kind: self.kind })
    }

    pub fn coherence_report(&self) -> Result<CoherenceReport> {
        let n = self.num_atoms();
        if n < 2 {
            return Err(Error::invalid("coherence needs at least two atoms"));
        }
        let norms = self.atom_norms();
        let scale = norms.iter().cloned().fold(0.0, f64::max);
        let degenerate: Vec<usize> = (0..n).filter(|&i| norms[i] <= DEGENERATE_NORM * scale.max(1.0)).collect();
        let g = self.gram();
        let mut gram_max: f64 = 0.0;
        let mut coherence: f64 = 0.0;
        let mut per_atom = vec![0.0f64; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let v = g[i * n + j].abs();
                gram_max = gram_max.max(v);
                if degenerate.contains(&i) || degenerate.contains(&j) {
                    continue;
                }
                let c = (v / (norms[i] * norms[j])).min(1.0);
                per_atom[i] = per_atom[i].max(c);
                coherence = coherence.max(c);
            }
        }
        Ok(CoherenceReport {
            mutual_coherence: coherence,
            gram_offdiag_max: gram_max,
            atom_norms: norms,
            atom_coherence: per_atom,
            degenerate_atoms: degenerate,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(DICTIONARY_MAGIC);
        w.u16(DICTIONARY_VERSION);
        let (kind, tau, bw) = match self.kind {
            DictionaryKind::Fixed { tau_max, bandwidth_hz } => (0, tau_max, bandwidth_hz),
            DictionaryKind::Learned => (1, 0.0, 0.0),
        };
        w.u8(kind);
        w.u32(self.num_taps() as u32);
        w.u32(self.num_atoms() as u32);
        w.f64(tau);
        w.f64(bw);
        for &v in self.atoms.data() {
            w.f64(v);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("dictionary", bytes);
        r.header(DICTIONARY_MAGIC, DICTIONARY_VERSION)?;
        let kind = r.u8()?;
        let m = r.u32()? as usize;
        let n = r.u32()? as usize;
        let tau_max = r.f64()?;
        let bandwidth_hz = r.f64()?;
        let kind = match kind {
            0 => DictionaryKind::Fixed { tau_max, bandwidth_hz },
            1 => DictionaryKind::Learned,
            k => return Err(Error::format("dictionary", format!("unknown kind {k}"))),
        };
        if m.saturating_mul(n).saturating_mul(8) > bytes.len() {
            return Err(Error::format("dictionary", "atom block larger than file"));
        }
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m * n {
            data.push(r.f64()?);
        }
        r.finish()?;
        Dictionary::from_tensor(Tensor::new(vec![m, n], data)?, kind).map_err(|e| Error::format("dictionary", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// `Ψ[m, i] = sinc(m − i·τ_max·W/N)` for `m = 1..=M`, `i = 0..N`.
pub fn build_sinc_dictionary(m: usize, n: usize, bandwidth_hz: f64, tau_max: f64) -> Result<Dictionary> {
    if m == 0 || n == 0 {
        return Err(Error::invalid(format!("dictionary dimensions must be positive, got {m}×{n}")));
    }
    if !(bandwidth_hz > 0.0) || !(tau_max > 0.0) {
        return Err(Error::invalid(format!(
            "bandwidth ({bandwidth_hz}) and tau_max ({tau_max}) must be positive"
        )));
    }
    let step = tau_max * bandwidth_hz / n as f64;
    let mut data = Vec::with_capacity(m * n);
    for row in 0..m {
        let t = (row + 1) as f64;
        for i in 0..n {
            data.push(sinc(t - i as f64 * step));
        }
    }
    Dictionary::from_tensor(
        Tensor::new(vec![m, n], data)?,
        DictionaryKind::Fixed { tau_max, bandwidth_hz },
    )
}

/// Default delay span: the whole observation window, `M / W`.
pub fn default_tau_max(m: usize, bandwidth_hz: f64) -> f64 {
    m as f64 / bandwidth_hz
}

/// i.i.d. standard normal entries, then unit-norm columns.
pub fn init_learned_dictionary<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<Dictionary> {
    if m == 0 || n == 0 {
        return Err(Error::invalid(format!("dictionary dimensions must be positive, got {m}×{n}")));
    }
    let data: Vec<f64> = (0..m * n).map(|_| rng.sample(StandardNormal)).collect();
    Dictionary::from_tensor(Tensor::new(vec![m, n], data)?, DictionaryKind::Learned)?.renormalize_atoms()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    /// `max_{i≠j} |⟨ψ_i,ψ_j⟩| / (‖ψ_i‖‖ψ_j‖)` over non-degenerate atoms.
    pub mutual_coherence: f64,
    /// `max_{i≠j} |⟨ψ_i,ψ_j⟩|` without normalization.
    pub gram_offdiag_max: f64,
    pub atom_norms: Vec<f64>,
    /// Per atom, its largest normalized inner product with any other atom.
    pub atom_coherence: Vec<f64>,
    pub degenerate_atoms: Vec<usize>,
}

impl CoherenceReport {
    /// One row per atom: `atom,norm,max_coherence,degenerate`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("atom,norm,max_coherence,degenerate\n");
        for (i, (n, c)) in self.atom_norms.iter().zip(&self.atom_coherence).enumerate() {
            let _ = writeln!(s, "{i},{n:e},{c:e},{}", u8::from(self.degenerate_atoms.contains(&i)));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const W: f64 = 100e6;

    #[test]
    fn on_grid_entry_is_one() {
        let d = build_sinc_dictionary(16, 32, W, default_tau_max(16, W)).unwrap();
        // atom i sits at m = i/2; atom 6 peaks at m = 3 (row 2)
        assert_eq!(d.entry(2, 6), 1.0);
    }

    #[test]
    fn integer_shift_dictionary_is_orthonormal_inside() {
        let m = 24;
        let d = build_sinc_dictionary(m, m, W, default_tau_max(m, W)).unwrap();
        let g = d.gram();
        for i in 1..m - 1 {
            for j in 1..m - 1 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[i * m + j] - want).abs() < 1e-10, "G[{i},{j}] = {}", g[i * m + j]);
            }
        }
    }

    #[test]
    fn half_sample_grid_gram_peak_is_two_over_pi() {
        let m = 32;
        let d = build_sinc_dictionary(m, 2 * m, W, default_tau_max(m, W)).unwrap();
        let r = d.coherence_report().unwrap();
        assert!((r.gram_offdiag_max - 2.0 / std::f64::consts::PI).abs() < 1e-3);
        // Atom 0 is centered at m = 0, outside the window.
        assert_eq!(r.degenerate_atoms, vec![0]);
    }

    #[test]
    fn non_positive_sizes_rejected() {
        assert!(build_sinc_dictionary(0, 4, W, 1e-7).is_err());
        assert!(build_sinc_dictionary(4, 0, W, 1e-7).is_err());
        assert!(build_sinc_dictionary(4, 4, 0.0, 1e-7).is_err());
        assert!(build_sinc_dictionary(4, 4, W, -1.0).is_err());
    }

    #[test]
    fn learned_columns_unit_norm_and_seeded() {
        let a = init_learned_dictionary(12, 40, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = init_learned_dictionary(12, 40, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        for n in a.atom_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn renormalize_restores_direction() {
        let base = init_learned_dictionary(6, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut t = base.atoms().clone();
        for r in 0..6 {
            t.data_mut()[r * 3 + 1] *= 7.0;
        }
        let scaled = Dictionary::from_tensor(t, DictionaryKind::Learned).unwrap();
        let back = scaled.renormalize_atoms().unwrap();
        for (x, y) in back.atoms().data().iter().zip(base.atoms().data()) {
            assert!((x - y).abs() < 1e-15);
        }
        let again = back.renormalize_atoms().unwrap();
        for (x, y) in again.atoms().data().iter().zip(back.atoms().data()) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_atom_is_an_error() {
        let t = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let d = Dictionary::from_tensor(t, DictionaryKind::Learned).unwrap();
        assert!(matches!(d.renormalize_atoms(), Err(Error::Numeric(_))));
        let fixed = build_sinc_dictionary(4, 4, W, 4.0 / W).unwrap();
        assert!(fixed.renormalize_atoms().is_err());
    }

    #[test]
    fn coherence_of_identity_and_duplicate() {
        let eye = Dictionary::from_tensor(
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            DictionaryKind::Learned,
        )
        .unwrap();
        assert_eq!(eye.coherence_report().unwrap().mutual_coherence, 0.0);
        let dup = Dictionary::from_tensor(
            Tensor::matrix(2, 3, vec![0.6, 0.6, 1.0, 0.8, 0.8, 0.0]).unwrap(),
            DictionaryKind::Learned,
        )
        .unwrap();
        assert!((dup.coherence_report().unwrap().mutual_coherence - 1.0).abs() < 1e-15);
        let one = Dictionary::from_tensor(Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(), DictionaryKind::Learned).unwrap();
        assert!(one.coherence_report().is_err());
    }

    #[test]
    fn file_round_trip() {
        let d = build_sinc_dictionary(8, 16, W, default_tau_max(8, W)).unwrap();
        let back = Dictionary::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back, d);
        let mut bytes = d.to_bytes();
        bytes[3] = b'X';
        assert!(Dictionary::from_bytes(&bytes).is_err());
    }
}
