//! Small dense linear-algebra helpers: matrix exponential and inversion.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{HjError, Result};

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
///
/// The matrix is scaled by `2^-s` so that its 1-norm is at most 1/2, the
/// series is summed until terms drop below machine precision relative to the
/// partial sum (at most 30 terms), and the result is squared `s` times.
pub fn expm(a: ArrayView2<f64>) -> Array2<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    let norm = one_norm(a);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scaled = a.mapv(|v| v / 2f64.powi(squarings as i32));

    let mut sum = Array2::<f64>::eye(n);
    let mut term = Array2::<f64>::eye(n);
    for k in 1..=30 {
        term = term.dot(&scaled) / k as f64;
        sum += &term;
        if one_norm(term.view()) <= f64::EPSILON * one_norm(sum.view()) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum.dot(&sum);
    }
    sum
}

/// Maximum absolute column sum.
pub fn one_norm(a: ArrayView2<f64>) -> f64 {
    a.columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn invert(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(HjError::DimensionMismatch {
            expected: n,
            got: a.ncols(),
        });
    }
    let mut m = a.to_owned();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
            .unwrap();
        if m[[pivot, col]].abs() < 1e-300 {
            return Err(HjError::InvalidParam("singular matrix".into()));
        }
        if pivot != col {
            for j in 0..n {
                m.swap([pivot, j], [col, j]);
                inv.swap([pivot, j], [col, j]);
            }
        }
        let d = m[[col, col]];
        for j in 0..n {
            m[[col, j]] /= d;
            inv[[col, j]] /= d;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m[[i, col]];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[[i, j]] -= f * m[[col, j]];
                inv[[i, j]] -= f * inv[[col, j]];
            }
        }
    }
    Ok(inv)
}

pub fn matvec(a: ArrayView2<f64>, v: &[f64]) -> Vec<f64> {
    a.dot(&ArrayView1::from(v)).to_vec()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn expm_of_zero_is_identity() {
        let z = Array2::<f64>::zeros((3, 3));
        assert_eq!(expm(z.view()), Array2::<f64>::eye(3));
    }

    #[test]
    fn expm_rotation_generator() {
        let t = std::f64::consts::FRAC_PI_2;
        let a = array![[0.0, t], [-t, 0.0]];
        let e = expm(a.view());
        let expected = array![[0.0, 1.0], [-1.0, 0.0]];
        for (x, y) in e.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-14, "{e:?}");
        }
    }

    #[test]
    fn expm_diagonal_large_norm() {
        let a = array![[3.0, 0.0], [0.0, -7.5]];
        let e = expm(a.view());
        assert!((e[[0, 0]] / 3f64.exp() - 1.0).abs() < 1e-13);
        assert!((e[[1, 1]] / (-7.5f64).exp() - 1.0).abs() < 1e-12);
        assert_eq!(e[[0, 1]], 0.0);
    }

    #[test]
    fn invert_roundtrip() {
        let a = array![[4.0, 1.0, 0.5], [1.0, 3.0, -1.0], [0.0, 2.0, 5.0]];
        let inv = invert(a.view()).unwrap();
        let id = a.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[[i, j]] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn invert_singular_fails() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(invert(a.view()).is_err());
    }
}
