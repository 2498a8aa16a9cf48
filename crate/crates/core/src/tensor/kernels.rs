//! Plain loops behind the graph ops. Row-parallel where the work is large;
//! every output element is produced by exactly one task, so results do not
//! depend on the thread count.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 16;

/// `c[n×m] = a[n×k] · b[k×m]`
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    let row = |(i, out): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * m..(p + 1) * m];
            for (o, &bv) in out.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    };
    if m == 0 {
        return c;
    }
    if n * k * m >= PAR_THRESHOLD {
        c.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        c.chunks_mut(m).enumerate().for_each(row);
    }
    c
}

/// `c[n×m] = a[n×k] · b[m×k]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    let row = |(i, out): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *o = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    };
    if m == 0 {
        return c;
    }
    if n * k * m >= PAR_THRESHOLD {
        c.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        c.chunks_mut(m).enumerate().for_each(row);
    }
    c
}

/// `c[n×m] = a[k×n]ᵀ · b[k×m]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    let row = |(i, out): (usize, &mut [f64])| {
        for p in 0..k {
            let av = a[p * n + i];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * m..(p + 1) * m];
            for (o, &bv) in out.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    };
    if m == 0 {
        return c;
    }
    if n * k * m >= PAR_THRESHOLD {
        c.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        c.chunks_mut(m).enumerate().for_each(row);
    }
    c
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub pad: usize,
    pub out_len: usize,
}

impl ConvDims {
    /// Input position read by output `t` through tap `j`, if inside the signal.
    #[inline]
    fn src(&self, t: usize, j: usize) -> Option<usize> {
        let s = (t + j) as isize - self.pad as isize;
        (s >= 0 && (s as usize) < self.len).then_some(s as usize)
    }
}

pub(crate) fn conv1d(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut y = vec![0.0; d.batch * d.c_out * d.out_len];
    y.par_chunks_mut(d.c_out * d.out_len)
        .enumerate()
        .for_each(|(b, yb)| {
            let xb = &x[b * d.c_in * d.len..(b + 1) * d.c_in * d.len];
            for o in 0..d.c_out {
                for t in 0..d.out_len {
                    let mut acc = 0.0;
                    for j in 0..d.kernel {
                        let Some(s) = d.src(t, j) else { continue };
                        for c in 0..d.c_in {
                            acc += w[(o * d.c_in + c) * d.kernel + j] * xb[c * d.len + s];
                        }
                    }
                    yb[o * d.out_len + t] = acc;
                }
            }
        });
    y
}

pub(crate) fn conv1d_grad_input(dy: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut dx = vec![0.0; d.batch * d.c_in * d.len];
    dx.par_chunks_mut(d.c_in * d.len)
        .enumerate()
        .for_each(|(b, dxb)| {
            let dyb = &dy[b * d.c_out * d.out_len..(b + 1) * d.c_out * d.out_len];
            for o in 0..d.c_out {
                for t in 0..d.out_len {
                    let g = dyb[o * d.out_len + t];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..d.kernel {
                        let Some(s) = d.src(t, j) else { continue };
                        for c in 0..d.c_in {
                            dxb[c * d.len + s] += w[(o * d.c_in + c) * d.kernel + j] * g;
                        }
                    }
                }
            }
        });
    dx
}

pub(crate) fn conv1d_grad_weight(dy: &[f64], x: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut dw = vec![0.0; d.c_out * d.c_in * d.kernel];
    // Parallel over output channels; the batch sum runs in index order.
    dw.par_chunks_mut(d.c_in * d.kernel)
        .enumerate()
        .for_each(|(o, dwo)| {
            for b in 0..d.batch {
                let xb = &x[b * d.c_in * d.len..(b + 1) * d.c_in * d.len];
                let dyb = &dy[(b * d.c_out + o) * d.out_len..(b * d.c_out + o + 1) * d.out_len];
                for (t, &g) in dyb.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..d.kernel {
                        let Some(s) = d.src(t, j) else { continue };
                        for c in 0..d.c_in {
                            dwo[c * d.kernel + j] += g * xb[c * d.len + s];
                        }
                    }
                }
            }
        });
    dw
}
