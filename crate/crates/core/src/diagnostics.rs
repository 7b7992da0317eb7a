//! Residuals, errors against oracles, per-node loss statistics, energy
//! curves, and CSV output.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HjError, Result};
use crate::field_net::{ScalarField, CHUNK};
use crate::hamiltonians::Hamiltonian;
use crate::linalg;
use crate::trajectory::TrajectoryBundle;

/// Exact gradient of a reference solution, `(x, t) ↦ ∇u(x, t)`.
pub type GradOracle<'a> = &'a (dyn Fn(&[f64], f64) -> Result<Vec<f64>> + Sync);

/// `|∂_t∇ψ + ∇²ψ·∂_pH(x,∇ψ) + ∂_xH(x,∇ψ)|`, the norm of the spatial gradient
/// of `∂_tψ + H(x, ∇ψ)`.
pub fn residual(field: &dyn ScalarField, model: &dyn Hamiltonian, x: &[f64], t: f64) -> Result<f64> {
    let d = x.len();
    let g = field.grad_x(x, t)?;
    let (dt, hess) = field.second_derivatives(x, t)?;
    let mut gp = vec![0.0; d];
    let mut gx = vec![0.0; d];
    model.grad_p(x, &g, &mut gp)?;
    model.grad_x(x, &g, &mut gx)?;
    let hv = linalg::matvec(hess.view(), &gp);
    let v: Vec<f64> = (0..d).map(|i| dt[i] + hv[i] + gx[i]).collect();
    Ok(linalg::norm(&v))
}

/// `|∇ψ(x,t) − ∇u(x,t)|`.
pub fn error_field(field: &dyn ScalarField, oracle: GradOracle, x: &[f64], t: f64) -> Result<f64> {
    let g = field.grad_x(x, t)?;
    let u = oracle(x, t)?;
    Ok(g.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Applies `f` to every index in `0..n` in fixed chunks and returns the
/// results in index order.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<Result<Vec<T>>> = starts
        .par_iter()
        .map(|&s| ((s..(s + CHUNK).min(n)).map(&f)).collect())
        .collect();
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-node training-error statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub t: f64,
    /// `ε_i = (1/N)Σ|e_i^k|`
    pub eps: f64,
    /// `δ_i = (1/N)Σ|e_{i+1}^k − e_i^k|/h`; the last node uses the backward
    /// difference.
    pub delta: f64,
    /// `(1/N)Σ|e_i^k|²`
    pub mse: f64,
}

/// `e_i^k = ∇ψ(x_i^k, t_i) − p_i^k` for every node, flattened `[node][particle][coord]`.
pub fn node_errors(field: &dyn ScalarField, bundle: &TrajectoryBundle) -> Result<Vec<f64>> {
    check_dim(field, bundle)?;
    let d = bundle.d;
    let mut out = Vec::with_capacity((bundle.m + 1) * bundle.n * d);
    for i in 0..=bundle.m {
        let xs: Vec<f64> = (0..bundle.n).flat_map(|k| bundle.x(i, k).iter().copied()).collect();
        let g = field.grad_x_batch(&xs, bundle.time(i))?;
        for k in 0..bundle.n {
            let p = bundle.p(i, k);
            out.extend((0..d).map(|j| g[k * d + j] - p[j]));
        }
    }
    Ok(out)
}

fn check_dim(field: &dyn ScalarField, bundle: &TrajectoryBundle) -> Result<()> {
    if field.dim() != bundle.d {
        return Err(HjError::DimensionMismatch {
            expected: bundle.d,
            got: field.dim(),
        });
    }
    Ok(())
}

/// `ε_i`, `δ_i` and the mean-squared error at every node.
pub fn loss_curves(field: &dyn ScalarField, bundle: &TrajectoryBundle) -> Result<Vec<NodeStats>> {
    let e = node_errors(field, bundle)?;
    let (n, d, m) = (bundle.n, bundle.d, bundle.m);
    let w = n * d;
    let node = |i: usize| &e[i * w..(i + 1) * w];
    let mut out = Vec::with_capacity(m + 1);
    for i in 0..=m {
        let ei = node(i);
        let (mut eps, mut mse) = (0.0, 0.0);
        for k in 0..n {
            let s: f64 = ei[k * d..(k + 1) * d].iter().map(|v| v * v).sum();
            eps += s.sqrt();
            mse += s;
        }
        let (a, b) = if m == 0 {
            (0, 0)
        } else if i < m {
            (i, i + 1)
        } else {
            (m - 1, m)
        };
        let mut delta = 0.0;
        if a != b {
            let (ea, eb) = (node(a), node(b));
            for k in 0..n {
                let s: f64 = (0..d).map(|j| (eb[k * d + j] - ea[k * d + j]).powi(2)).sum();
                delta += s.sqrt();
            }
            delta /= n as f64 * bundle.h;
        }
        out.push(NodeStats {
            t: bundle.time(i),
            eps: eps / n as f64,
            delta,
            mse: mse / n as f64,
        });
    }
    Ok(out)
}

/// Residuals at every particle of node `i`.
pub fn node_residuals(
    field: &dyn ScalarField,
    model: &dyn Hamiltonian,
    bundle: &TrajectoryBundle,
    i: usize,
) -> Result<Vec<f64>> {
    check_dim(field, bundle)?;
    let t = bundle.time(i);
    par_map(bundle.n, |k| residual(field, model, bundle.x(i, k), t))
}

/// Particle mean of the residual at node `i`, estimating
/// `∫|∇(∂_tψ + H)| ρ̃_{t_i} dx`.
pub fn weighted_l1_residual(
    field: &dyn ScalarField,
    model: &dyn Hamiltonian,
    bundle: &TrajectoryBundle,
    i: usize,
) -> Result<f64> {
    Ok(mean(&node_residuals(field, model, bundle, i)?))
}

/// Mean `H(x̃, p̃)` per node.
pub fn energy_curve_bundle(model: &dyn Hamiltonian, bundle: &TrajectoryBundle) -> Result<Vec<f64>> {
    (0..=bundle.m)
        .map(|i| {
            let h = par_map(bundle.n, |k| model.energy(bundle.x(i, k), bundle.p(i, k)))?;
            Ok(mean(&h))
        })
        .collect()
}

/// Mean `H(x̃, ∇ψ(x̃, t))` per node.
pub fn energy_curve_field(
    field: &dyn ScalarField,
    model: &dyn Hamiltonian,
    bundle: &TrajectoryBundle,
) -> Result<Vec<f64>> {
    check_dim(field, bundle)?;
    let d = bundle.d;
    (0..=bundle.m)
        .map(|i| {
            let xs: Vec<f64> = (0..bundle.n).flat_map(|k| bundle.x(i, k).iter().copied()).collect();
            let g = field.grad_x_batch(&xs, bundle.time(i))?;
            let h = par_map(bundle.n, |k| model.energy(bundle.x(i, k), &g[k * d..(k + 1) * d]))?;
            Ok(mean(&h))
        })
        .collect()
}

/// `max_i |E_i − E_0|`.
pub fn max_drift(curve: &[f64]) -> f64 {
    curve.iter().map(|e| (e - curve[0]).abs()).fold(0.0, f64::max)
}

/// Mean of `|∇ψ − ∇u|²` over the rows of `xs` (row-major `n × d`).
pub fn mean_squared_error(field: &dyn ScalarField, oracle: GradOracle, xs: &[f64], t: f64) -> Result<f64> {
    let d = field.dim();
    let n = xs.len() / d;
    let g = field.grad_x_batch(xs, t)?;
    let per = par_map(n, |k| {
        let u = oracle(&xs[k * d..(k + 1) * d], t)?;
        Ok((0..d).map(|j| (g[k * d + j] - u[j]).powi(2)).sum::<f64>())
    })?;
    Ok(mean(&per))
}

/// A uniform grid on a coordinate plane; remaining coordinates are frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Zero-based coordinates spanning the plane.
    #[serde(default = "default_plane")]
    pub plane: [usize; 2],
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub n: [usize; 2],
    pub times: Vec<f64>,
}

fn default_plane() -> [usize; 2] {
    [0, 1]
}

impl GridSpec {
    pub fn validate(&self, d: usize, path: &str) -> Result<()> {
        if self.plane[0] >= d || self.plane[1] >= d || (d > 1 && self.plane[0] == self.plane[1]) {
            return Err(HjError::config(format!("{path}.plane"), format!("coordinates must be distinct and below {d}")));
        }
        if self.n.iter().any(|&k| k < 2) {
            return Err(HjError::config(format!("{path}.n"), "needs at least 2 points per axis"));
        }
        if self.lo.iter().zip(&self.hi).any(|(a, b)| !(a < b)) {
            return Err(HjError::config(format!("{path}.lo"), "lo must be below hi"));
        }
        Ok(())
    }

    /// Points of the grid at one time, with other coordinates taken from `base`.
    pub fn points(&self, base: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n[0] * self.n[1]);
        for a in 0..self.n[0] {
            for b in 0..self.n[1] {
                let mut x = base.to_vec();
                x[self.plane[0]] = self.lo[0] + (self.hi[0] - self.lo[0]) * a as f64 / (self.n[0] - 1) as f64;
                if x.len() > 1 {
                    x[self.plane[1]] = self.lo[1] + (self.hi[1] - self.lo[1]) * b as f64 / (self.n[1] - 1) as f64;
                }
                out.push(x);
            }
        }
        out
    }
}

/// One row of a grid table. `value` is `None` where the oracle has a pole.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub x1: f64,
    pub x2: f64,
    pub t: f64,
    pub value: Option<f64>,
}

/// Mean particle position at the node closest to `t`.
pub fn cloud_mean(bundle: &TrajectoryBundle, t: f64) -> Vec<f64> {
    let i = (((t - bundle.t0) / bundle.h).round().max(0.0) as usize).min(bundle.m);
    let mut m = vec![0.0; bundle.d];
    for k in 0..bundle.n {
        for (a, b) in m.iter_mut().zip(bundle.x(i, k)) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= bundle.n as f64);
    m
}

fn grid_table(
    spec: &GridSpec,
    bundle: &TrajectoryBundle,
    f: impl Fn(&[f64], f64) -> Result<Option<f64>> + Sync,
) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &t in &spec.times {
        let base = cloud_mean(bundle, t);
        let pts = spec.points(&base);
        let vals = par_map(pts.len(), |k| f(&pts[k], t))?;
        for (x, v) in pts.iter().zip(vals) {
            rows.push(GridRow {
                x1: x[spec.plane[0]],
                x2: if x.len() > 1 { x[spec.plane[1]] } else { 0.0 },
                t,
                value: v,
            });
        }
    }
    Ok(rows)
}

/// Residual heat-map table.
pub fn residual_grid(
    field: &dyn ScalarField,
    model: &dyn Hamiltonian,
    spec: &GridSpec,
    bundle: &TrajectoryBundle,
) -> Result<Vec<GridRow>> {
    grid_table(spec, bundle, |x, t| residual(field, model, x, t).map(Some))
}

/// Error heat-map table; oracle poles give `None`.
pub fn error_grid(
    field: &dyn ScalarField,
    oracle: GradOracle,
    spec: &GridSpec,
    bundle: &TrajectoryBundle,
) -> Result<Vec<GridRow>> {
    grid_table(spec, bundle, |x, t| match error_field(field, oracle, x, t) {
        Ok(v) => Ok(Some(v)),
        Err(HjError::Pole(_)) => Ok(None),
        Err(e) => Err(e),
    })
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a CSV file: comma separated, header row, LF line endings.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(std::fs::File::create(path).map_err(HjError::io_at(path))?);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a grid table with the given value column name.
pub fn write_grid_csv(path: &Path, value_name: &str, rows: &[GridRow]) -> Result<()> {
    write_csv(
        path,
        &["x1", "x2", "t", value_name],
        rows.iter().map(|r| {
            vec![
                fmt_f64(r.x1),
                fmt_f64(r.x2),
                fmt_f64(r.t),
                r.value.map(fmt_f64).unwrap_or_else(|| "pole".into()),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_net::{Activation, FieldNetwork};
    use crate::hamiltonians::Harmonic;
    use crate::reference::{harmonic_exact_grad, HarmonicSolutionField};

    #[test]
    fn exact_solution_has_zero_residual() {
        let f = HarmonicSolutionField { d: 2 };
        let m = Harmonic { dim: 2 };
        for &t in &[0.0, 0.4, 1.7, 2.9] {
            for &x in &[[1.0, -2.0], [4.0, 3.0], [0.0, 0.1]] {
                assert!(residual(&f, &m, &x, t).unwrap() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_field_residual_is_norm_of_x() {
        let f = FieldNetwork::zeros(2, 3, 4, 0.5, Activation::Tanh).unwrap();
        let m = Harmonic { dim: 2 };
        let r = residual(&f, &m, &[3.0, 4.0], 0.7).unwrap();
        assert!((r - 5.0).abs() < 1e-15);
        let oracle = |x: &[f64], t: f64| harmonic_exact_grad(x, t);
        let e = error_field(&f, &oracle, &[3.0, 4.0], 0.0).unwrap();
        assert!((e - 5.0).abs() < 1e-12);
        assert_eq!(error_field(&HarmonicSolutionField { d: 2 }, &oracle, &[3.0, 4.0], 0.3).unwrap(), 0.0);
    }

    #[test]
    fn fmt_has_17_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
    }
}
