//! Shared numeric kernels. The tape ops and the plain (non-taped) code
//! paths call into the same functions so that forward values are
//! bit-identical regardless of whether gradients are being recorded.

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

/// C[r x c] = A[r x k] * B[k x c], row-major.
pub fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), k * c);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * c..(kk + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// dA[r x k] += dC[r x c] * B^T, i.e. dA[i,kk] = dot(dC[i,:], B[kk,:]).
pub fn matmul_grad_a(dc: &[f64], b: &[f64], r: usize, k: usize, c: usize, da: &mut [f64]) {
    for i in 0..r {
        let drow = &dc[i * c..(i + 1) * c];
        let arow = &mut da[i * k..(i + 1) * k];
        for (kk, acc) in arow.iter_mut().enumerate() {
            let brow = &b[kk * c..(kk + 1) * c];
            let mut s = 0.0;
            for (dv, bv) in drow.iter().zip(brow) {
                s += dv * bv;
            }
            *acc += s;
        }
    }
}

/// dB[k x c] += A^T * dC[r x c].
pub fn matmul_grad_b(a: &[f64], dc: &[f64], r: usize, k: usize, c: usize, db: &mut [f64]) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &dc[i * c..(i + 1) * c];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &mut db[kk * c..(kk + 1) * c];
            for (o, &dv) in brow.iter_mut().zip(drow) {
                *o += av * dv;
            }
        }
    }
}

const GELU_COEF: f64 = 0.044715;

/// GELU with the tanh approximation; smooth, so finite-difference
/// gradient checks are clean everywhere.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Stable masked softmax of one row. Masked entries (or `-inf` inputs)
/// map to exactly 0. Also writes the log-softmax when `logp` is given,
/// sharing the same max/denominator so `exp(logp)` agrees with `p`.
///
/// Returns `Err` when every entry is masked out.
pub fn row_softmax_masked(
    logits: &[f64],
    mask: Option<&[bool]>,
    row: usize,
    probs: &mut [f64],
    mut logp: Option<&mut [f64]>,
) -> Result<()> {
    let masked = |j: usize| mask.map_or(false, |m| m[j]) || logits[j] == f64::NEG_INFINITY;
    let mut maxv = f64::NEG_INFINITY;
    for (j, &z) in logits.iter().enumerate() {
        if !masked(j) && z > maxv {
            maxv = z;
        }
    }
    if maxv == f64::NEG_INFINITY {
        return Err(Error::FullyMaskedRow { row });
    }
    let mut denom = 0.0;
    for (j, &z) in logits.iter().enumerate() {
        let e = if masked(j) { 0.0 } else { (z - maxv).exp() };
        probs[j] = e;
        denom += e;
    }
    let log_denom = denom.ln();
    for (j, &z) in logits.iter().enumerate() {
        if masked(j) {
            probs[j] = 0.0;
            if let Some(lp) = logp.as_deref_mut() {
                lp[j] = f64::NEG_INFINITY;
            }
        } else {
            probs[j] /= denom;
            if let Some(lp) = logp.as_deref_mut() {
                lp[j] = (z - maxv) - log_denom;
            }
        }
    }
    Ok(())
}

/// Row-wise numerically stabilized softmax over a [rows x cols] tensor.
/// Negative-infinity entries act as a mask and map to exactly 0.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.rows_cols();
    assert!(cols >= 1, "softmax_rows needs at least one column");
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        row_softmax_masked(
            &x.data[r * cols..(r + 1) * cols],
            None,
            r,
            &mut out[r * cols..(r + 1) * cols],
            None,
        )?;
    }
    Ok(Tensor::new(x.shape.clone(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let x = Tensor::new(vec![1, 8], vec![0.0; 8]);
        let p = softmax_rows(&x).unwrap();
        for &v in &p.data {
            assert!(close(v, 0.125, 1e-15));
        }
    }

    #[test]
    fn softmax_masked_entries_are_zero() {
        let x = Tensor::new(vec![1, 4], vec![f64::NEG_INFINITY, 0.0, 0.0, f64::NEG_INFINITY]);
        let p = softmax_rows(&x).unwrap();
        assert_eq!(p.data[0], 0.0);
        assert_eq!(p.data[3], 0.0);
        assert!(close(p.data[1], 0.5, 1e-15));
        assert!(close(p.data[2], 0.5, 1e-15));
    }

    #[test]
    fn softmax_reference_values() {
        // Independent high-precision evaluation of e^x / sum(e^x).
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        let p = softmax_rows(&x).unwrap();
        assert!(close(p.data[0], 0.26894, 1e-5));
        assert!(close(p.data[1], 0.73106, 1e-5));
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let x = Tensor::new(vec![1, 3], vec![f64::NEG_INFINITY; 3]);
        match softmax_rows(&x) {
            Err(Error::FullyMaskedRow { row: 0 }) => {}
            other => panic!("expected fully masked row error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64) * 0.37 - 2.0).collect());
        let p = softmax_rows(&x).unwrap();
        for r in 0..3 {
            let s: f64 = p.data[r * 5..(r + 1) * 5].iter().sum();
            assert!(close(s, 1.0, 1e-9));
        }
    }

    #[test]
    fn matmul_small_reference() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(close(gelu_grad(x), num, 1e-8), "x={x}");
        }
    }
}
