//! Classical sparse recovery (greedy and exhaustive) and the
//! preconditioning norm arithmetic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelSample;
use crate::dictionary::{Dictionary, DEGENERATE_NORM};
use crate::error::{Error, Result};

pub const ORACLE_MAX_SUPPORTS: u128 = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSolution {
    /// Sorted atom indices.
    pub support: Vec<usize>,
    pub coeffs_re: Vec<f64>,
    pub coeffs_im: Vec<f64>,
    pub residual_norm: f64,
}

impl SparseSolution {
    /// Dense length-`N` coefficient vectors.
    pub fn dense(&self, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        for (k, &i) in self.support.iter().enumerate() {
            re[i] = self.coeffs_re[k];
            im[i] = self.coeffs_im[k];
        }
        (re, im)
    }
}

/// Noise-matched residual target `1.1·σ·√(2M)`.
pub fn default_epsilon(noise_sigma: f64, num_taps: usize) -> f64 {
    1.1 * noise_sigma * (2.0 * num_taps as f64).sqrt()
}

fn check_shapes(h: &ChannelSample, dict: &Dictionary) -> Result<()> {
    if h.num_taps() != dict.num_taps() {
        return Err(Error::invalid(format!(
            "channel has {} taps, dictionary has {}",
            h.num_taps(),
            dict.num_taps()
        )));
    }
    Ok(())
}

/// Least squares `min ‖A x − b‖` for the real and imaginary right-hand sides
/// via Householder QR. Columns that are numerically dependent on earlier
/// ones get a zero coefficient.
fn least_squares(dict: &Dictionary, support: &[usize], re: &[f64], im: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = dict.num_taps();
    let s = support.len();
    let mut a: Vec<f64> = Vec::with_capacity(m * s);
    for &i in support {
        a.extend(dict.atom(i));
    }
    // column-major: column j is a[j*m..(j+1)*m]
    let mut b = [re.to_vec(), im.to_vec()];
    let mut diag = vec![0.0; s];
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for j in 0..s.min(m) {
        let col = &mut a[j * m..(j + 1) * m];
        let norm = col[j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            diag[j] = 0.0;
            continue;
        }
        let alpha = if col[j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = col[j..].to_vec();
        v[0] -= alpha;
        let vnorm_sq: f64 = v.iter().map(|x| x * x).sum();
        diag[j] = alpha;
        if vnorm_sq == 0.0 {
            continue;
        }
        let reflect = |x: &mut [f64]| {
            let dot: f64 = v.iter().zip(&x[j..]).map(|(p, q)| p * q).sum();
            let f = 2.0 * dot / vnorm_sq;
            for (xi, vi) in x[j..].iter_mut().zip(&v) {
                *xi -= f * vi;
            }
        };
        for k in j + 1..s {
            reflect(&mut a[k * m..(k + 1) * m]);
        }
        for rhs in b.iter_mut() {
            reflect(rhs);
        }
    }
    let solve = |rhs: &[f64]| {
        let mut x = vec![0.0; s];
        for j in (0..s.min(m)).rev() {
            if diag[j] == 0.0 {
                continue;
            }
            let mut acc = rhs[j];
            for k in j + 1..s {
                acc -= a[k * m + j] * x[k];
            }
            x[j] = acc / diag[j];
        }
        x
    };
    (solve(&b[0]), solve(&b[1]))
}

fn residual_norm(dict: &Dictionary, support: &[usize], cre: &[f64], cim: &[f64], h: &ChannelSample) -> f64 {
    let mut acc = 0.0;
    for j in 0..dict.num_taps() {
        let mut re = 0.0;
        let mut im = 0.0;
        for (k, &i) in support.iter().enumerate() {
            let psi = dict.entry(j, i);
            re += psi * cre[k];
            im += psi * cim[k];
        }
        acc += (re - h.re[j]).powi(2) + (im - h.im[j]).powi(2);
    }
    acc.sqrt()
}

fn fit(dict: &Dictionary, support: Vec<usize>, h: &ChannelSample) -> SparseSolution {
    let (coeffs_re, coeffs_im) = least_squares(dict, &support, &h.re, &h.im);
    let residual_norm = residual_norm(dict, &support, &coeffs_re, &coeffs_im, h);
    SparseSolution {
        support,
        coeffs_re,
        coeffs_im,
        residual_norm,
    }
}

/// Orthogonal matching pursuit with real atoms and complex coefficients.
///
/// Atoms are ranked by `|⟨ψ_i, r⟩| / ‖ψ_i‖`; ties go to the lower index.
/// Stops once the residual norm is at most `eps` or `max_k` atoms are chosen.
pub fn omp_solve(h: &ChannelSample, dict: &Dictionary, max_k: usize, eps: f64) -> Result<SparseSolution> {
    check_shapes(h, dict)?;
    let (m, n) = (dict.num_taps(), dict.num_atoms());
    if max_k > m.min(n) {
        return Err(Error::invalid(format!("max_k {max_k} exceeds min(M, N) = {}", m.min(n))));
    }
    if !(eps >= 0.0) {
        return Err(Error::invalid(format!("eps must be >= 0, got {eps}")));
    }
    let norms = dict.atom_norms();
    let mut sol = fit(dict, Vec::new(), h);
    let mut chosen: Vec<usize> = Vec::new();
    let mut res_re = h.re.clone();
    let mut res_im = h.im.clone();
    while sol.residual_norm > eps && chosen.len() < max_k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if norms[i] < DEGENERATE_NORM || chosen.contains(&i) {
                continue;
            }
            let mut cr = 0.0;
            let mut ci = 0.0;
            for j in 0..m {
                let psi = dict.entry(j, i);
                cr += psi * res_re[j];
                ci += psi * res_im[j];
            }
            let score = (cr * cr + ci * ci).sqrt() / norms[i];
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        let Some((pick, score)) = best else { break };
        if score == 0.0 {
            break;
        }
        chosen.push(pick);
        let mut support = chosen.clone();
        support.sort_unstable();
        sol = fit(dict, support, h);
        let (dre, dim) = sol.dense(n);
        res_re = h.re.clone();
        res_im = h.im.clone();
        for j in 0..m {
            for &i in &sol.support {
                res_re[j] -= dict.entry(j, i) * dre[i];
                res_im[j] -= dict.entry(j, i) * dim[i];
            }
        }
    }
    Ok(sol)
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

fn combinations(n: usize, k: usize, out: &mut Vec<Vec<usize>>) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Globally optimal least-squares fit over every support of size at most `k`.
/// Among equal residuals the lexicographically smallest support wins.
pub fn exhaustive_sparse_oracle(h: &ChannelSample, dict: &Dictionary, k: usize) -> Result<SparseSolution> {
    check_shapes(h, dict)?;
    let n = dict.num_atoms();
    let count = binomial(n, k);
    if count > ORACLE_MAX_SUPPORTS {
        return Err(Error::invalid(format!(
            "C({n}, {k}) = {count} supports exceeds the oracle limit {ORACLE_MAX_SUPPORTS}"
        )));
    }
    let mut supports = Vec::new();
    for s in 0..=k.min(n) {
        combinations(n, s, &mut supports);
    }
    supports.sort();
    let fits: Vec<SparseSolution> = supports.into_par_iter().map(|s| fit(dict, s, h)).collect();
    let mut best = fits[0].clone();
    for f in fits.into_iter().skip(1) {
        if f.residual_norm < best.residual_norm {
            best = f;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct TheoremCheckReport {
    pub R: f64,
    pub R_S: f64,
    pub B: f64,
    pub c: f64,
    pub preconditioned_norm: f64,
    pub improved: bool,
}

/// Evaluate the weighted-norm bound for a split of atoms into `support` (weight
/// `c`) and the rest (weight 1).
#[allow(non_snake_case)]
pub fn theorem2_check(coefficient_sets: &[Vec<f64>], support: &[usize], c: f64) -> Result<TheoremCheckReport> {
    let n = coefficient_sets
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("no coefficient sets"))?;
    if coefficient_sets.iter().any(|a| a.len() != n) {
        return Err(Error::invalid("coefficient sets differ in length"));
    }
    if coefficient_sets.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("coefficients must be finite"));
    }
    if support.is_empty() {
        return Err(Error::invalid("S must be nonempty"));
    }
    if let Some(&bad) = support.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("S index {bad} outside 0..{n}")));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::invalid(format!("c must be finite and positive, got {c}")));
    }
    let mut in_s = vec![false; n];
    for &i in support {
        in_s[i] = true;
    }
    let (mut R, mut R_S, mut B) = (0.0f64, 0.0f64, 0.0f64);
    for a in coefficient_sets {
        let (mut total, mut s_part, mut rest) = (0.0, 0.0, 0.0);
        for (j, v) in a.iter().enumerate() {
            total += v.abs();
            if in_s[j] {
                s_part += v.abs();
            } else {
                rest += v.abs();
            }
        }
        R = R.max(total);
        R_S = R_S.max(s_part);
        B = B.max(rest);
    }
    if B >= R_S {
        return Err(Error::Hypothesis(format!("B < R_S violated: B = {B}, R_S = {R_S}")));
    }
    if B >= R {
        return Err(Error::Hypothesis(format!("B < R violated: B = {B}, R = {R}")));
    }
    let bound = R_S / (R - B);
    if c <= bound {
        return Err(Error::Hypothesis(format!("c > R_S/(R - B) violated: c = {c}, R_S/(R - B) = {bound}")));
    }
    let preconditioned_norm = B + R_S / c;
    Ok(TheoremCheckReport {
        R,
        R_S,
        B,
        c,
        preconditioned_norm,
        improved: preconditioned_norm < R,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dictionary::build_sinc_dictionary;

    fn planted(dict: &Dictionary, atoms: &[(usize, f64, f64)]) -> ChannelSample {
        let n = dict.num_atoms();
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        for &(i, r, c) in atoms {
            re[i] = r;
            im[i] = c;
        }
        ChannelSample::new(dict.apply(&re), dict.apply(&im), 1e8).unwrap()
    }

    #[test]
    fn single_on_grid_path_recovered() {
        let dict = build_sinc_dictionary(16, 16, 1e8, 16e-8).unwrap();
        let h = planted(&dict, &[(7, 0.6, -0.3)]);
        let s = omp_solve(&h, &dict, 4, 1e-9).unwrap();
        assert_eq!(s.support, vec![7]);
        assert!(s.residual_norm < 1e-10);
        assert!((s.coeffs_re[0] - 0.6).abs() < 1e-12);
        assert!((s.coeffs_im[0] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_channel_has_empty_support() {
        let dict = build_sinc_dictionary(8, 16, 1e8, 8e-8).unwrap();
        let h = ChannelSample::zeros(8, 1e8);
        assert!(omp_solve(&h, &dict, 4, 0.0).unwrap().support.is_empty());
        let o = exhaustive_sparse_oracle(&h, &dict, 2).unwrap();
        assert!(o.support.is_empty());
    }

    #[test]
    fn three_separated_paths_match_oracle_support() {
        let dict = build_sinc_dictionary(32, 64, 1e8, 32e-8).unwrap();
        let h = planted(&dict, &[(6, 1.0, 0.2), (30, -0.4, 0.5), (50, 0.3, -0.6)]);
        let s = omp_solve(&h, &dict, 3, 1e-12).unwrap();
        assert_eq!(s.support, vec![6, 30, 50]);
        let o = exhaustive_sparse_oracle(&h, &dict, 3).unwrap();
        assert_eq!(o.support, s.support);
        assert!(o.residual_norm <= s.residual_norm);
    }

    #[test]
    fn oracle_trivial_cases() {
        let dict = build_sinc_dictionary(8, 12, 1e8, 8e-8).unwrap();
        let h = planted(&dict, &[(4, 0.9, 0.1)]);
        let zero = exhaustive_sparse_oracle(&h, &dict, 0).unwrap();
        let norm = h.energy().sqrt();
        assert!((zero.residual_norm - norm).abs() < 1e-15);
        let one = exhaustive_sparse_oracle(&h, &dict, 1).unwrap();
        assert_eq!(one.support, vec![4]);
        assert!(one.residual_norm < 1e-12);
    }

    #[test]
    fn oracle_guard() {
        let dict = build_sinc_dictionary(32, 64, 1e8, 32e-8).unwrap();
        let h = ChannelSample::zeros(32, 1e8);
        // C(64, 4) = 635 376
        assert!(exhaustive_sparse_oracle(&h, &dict, 4).is_err());
    }

    #[test]
    fn omp_residual_non_increasing_in_k() {
        let dict = build_sinc_dictionary(12, 24, 1e8, 12e-8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let re: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let im: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = ChannelSample::new(re, im, 1e8).unwrap();
            let mut last = f64::INFINITY;
            for k in 0..=12 {
                let r = omp_solve(&h, &dict, k, 0.0).unwrap().residual_norm;
                assert!(r <= last + 1e-12, "k={k}: {r} > {last}");
                last = r;
            }
        }
    }

    #[test]
    fn omp_rejects_oversized_k() {
        let dict = build_sinc_dictionary(8, 16, 1e8, 8e-8).unwrap();
        let h = ChannelSample::zeros(8, 1e8);
        assert!(omp_solve(&h, &dict, 9, 0.0).is_err());
        assert!(omp_solve(&ChannelSample::zeros(9, 1e8), &dict, 2, 0.0).is_err());
    }

    #[test]
    fn epsilon_default() {
        assert!((default_epsilon(0.5, 8) - 1.1 * 0.5 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn combinations_enumerate_binomial() {
        let mut v = Vec::new();
        combinations(6, 3, &mut v);
        assert_eq!(v.len() as u128, binomial(6, 3));
        assert_eq!(v[0], vec![0, 1, 2]);
        assert_eq!(v[19], vec![3, 4, 5]);
        let mut e = Vec::new();
        combinations(5, 0, &mut e);
        assert_eq!(e, vec![Vec::<usize>::new()]);
    }

    #[test]
    fn worked_example() {
        let r = theorem2_check(&[vec![5.0, 0.1, 0.1]], &[0], 2.0).unwrap();
        assert!((r.R - 5.2).abs() < 1e-12);
        assert_eq!(r.R_S, 5.0);
        assert!((r.B - 0.2).abs() < 1e-12);
        assert!((r.preconditioned_norm - 2.7).abs() < 1e-12);
        assert!(r.improved);
    }

    #[test]
    fn full_support_divides_by_c() {
        let r = theorem2_check(&[vec![1.0, 2.0], vec![0.5, 0.5]], &[0, 1], 1.5).unwrap();
        assert_eq!(r.B, 0.0);
        assert!((r.preconditioned_norm - 3.0 / 1.5).abs() < 1e-15);
        assert!(r.improved);
    }

    #[test]
    fn hypothesis_violations_are_named() {
        let e = theorem2_check(&[vec![0.1, 5.0]], &[0], 2.0).unwrap_err();
        assert!(e.to_string().contains("B < R_S"), "{e}");
        let e = theorem2_check(&[vec![5.0, 0.1]], &[0], 0.5).unwrap_err();
        assert!(e.to_string().contains("c > R_S/(R - B)"), "{e}");
        assert!(theorem2_check(&[vec![5.0, 0.1]], &[], 2.0).is_err());
        assert!(theorem2_check(&[vec![5.0, 0.1]], &[2], 2.0).is_err());
    }
}
