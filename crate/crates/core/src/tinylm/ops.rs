//! Dense kernels over row-major slices.
//!
//! Every routine here runs its reductions in a fixed order so results are
//! bit-reproducible across runs and thread counts.

use super::Real;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == F::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `dw[k×n] += aᵀ · g` with `a[m×k]`, `g[m×n]`.
pub fn matmul_at_acc<F: Real>(a: &[F], g: &[F], dw: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(dw.len(), k * n);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == F::zero() {
                continue;
            }
            let drow = &mut dw[kk * n..(kk + 1) * n];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d += aik * gv;
            }
        }
    }
}

/// `out[m×k] = g[m×n] · wᵀ` with `w[k×n]`.
pub fn matmul_bt<F: Real>(g: &[F], w: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(w.len(), k * n);
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            out[i * k + kk] = dot(grow, &w[kk * n..(kk + 1) * n]);
        }
    }
    out
}

/// Dot product with eight interleaved accumulators (vectorises without
/// reassociating across runs).
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub const RMS_EPS: f64 = 1e-5;

/// Row-wise RMS normalisation. Returns the normalised rows and the per-row
/// inverse RMS needed by the backward pass.
pub fn rmsnorm<F: Real>(x: &[F], gain: &[F], rows: usize, d: usize) -> (Vec<F>, Vec<F>) {
    let mut y = vec![F::zero(); rows * d];
    let mut inv = vec![F::zero(); rows];
    let eps = F::from(RMS_EPS).unwrap();
    let dn = F::from(d).unwrap();
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = dot(xr, xr) / dn;
        let ir = F::one() / (ms + eps).sqrt();
        inv[r] = ir;
        for ((o, &xv), &g) in y[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = xv * ir * g;
        }
    }
    (y, inv)
}

/// Backward of [`rmsnorm`]: accumulates into `dgain` and returns `dx`.
pub fn rmsnorm_backward<F: Real>(
    dy: &[F],
    x: &[F],
    gain: &[F],
    inv: &[F],
    dgain: &mut [F],
    rows: usize,
    d: usize,
) -> Vec<F> {
    let mut dx = vec![F::zero(); rows * d];
    let dn = F::from(d).unwrap();
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let ir = inv[r];
        let mut s = F::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j] * ir;
            s += dyr[j] * gain[j] * xr[j];
        }
        let coef = ir * ir * ir * s / dn;
        for j in 0..d {
            dx[r * d + j] = ir * gain[j] * dyr[j] - xr[j] * coef;
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<F: Real>(u: F) -> F {
    let c = F::from(GELU_C).unwrap();
    let a = F::from(GELU_A).unwrap();
    let half = F::from(0.5).unwrap();
    half * u * (F::one() + (c * (u + a * u * u * u)).tanh())
}

#[inline]
pub fn gelu_grad<F: Real>(u: F) -> F {
    let c = F::from(GELU_C).unwrap();
    let a = F::from(GELU_A).unwrap();
    let half = F::from(0.5).unwrap();
    let three = F::from(3.0).unwrap();
    let t = (c * (u + a * u * u * u)).tanh();
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + three * a * u * u)
}

/// Log-softmax of one row, accumulated in f64.
pub fn log_softmax_row<F: Real>(logits: &[F]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v.to_f64().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .map(|v| (v.to_f64().unwrap() - max).exp())
        .sum();
    let lse = max + sum.ln();
    logits.iter().map(|v| v.to_f64().unwrap() - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        // [2×3]·[3×2]
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        // g·bᵀ where b is [3×2]
        let g = [1.0f64, 2.0];
        assert_eq!(matmul_bt(&g, &b, 1, 3, 2), vec![1.0, 2.0, 3.0]);
        let mut dw = vec![0.0f64; 3];
        matmul_at_acc(&a, &[1.0, 1.0], &mut dw, 2, 3, 1);
        assert_eq!(dw, vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn log_softmax_normalises() {
        let row = [0.5f32, -2.0, 3.0, 1.0];
        let lp = log_softmax_row(&row);
        let s: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
