//! Oracles: the harmonic closed form, the weighted-momentum weak solution of
//! the one-dimensional caustic problem, a particle-histogram estimate of the
//! same quantity, and the exact linear flow of the LQC problem.

use std::f64::consts::{FRAC_PI_4, PI};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HjError, Result};
use crate::field_net::ScalarField;
use crate::hamiltonians::{InitialCondition, LqcHamiltonian};
use crate::integrators::Integrator;
use crate::sampling;
use crate::trajectory::{integrate_ensemble, TrajectoryBundle};

/// `|sin(t + π/4)|` below this counts as the pole of the harmonic solution.
pub const HARMONIC_POLE_TOL: f64 = 1e-12;

/// Threshold on `|φ_t'|` for flagging a degenerate (fold) preimage.
pub const DEGENERATE_JACOBIAN: f64 = 1e-10;

/// Grid points used to bracket preimages.
pub const ROOT_GRID: usize = 4096;

/// `∇u = cot(t + π/4)·x` for `H = ½|p|² + ½|x|²`, `g = ½|x|²`.
pub fn harmonic_exact_grad(x: &[f64], t: f64) -> Result<Vec<f64>> {
    let c = harmonic_cot(t)?;
    Ok(x.iter().map(|v| c * v).collect())
}

fn harmonic_cot(t: f64) -> Result<f64> {
    let (s, c) = (t + FRAC_PI_4).sin_cos();
    if s.abs() < HARMONIC_POLE_TOL {
        return Err(HjError::Pole(t));
    }
    Ok(c / s)
}

/// The closed-form harmonic solution `u = ½cot(t + π/4)|x|²` as a field.
#[derive(Debug, Clone, Copy)]
pub struct HarmonicSolutionField {
    pub d: usize,
}

impl ScalarField for HarmonicSolutionField {
    fn dim(&self) -> usize {
        self.d
    }

    fn value(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok(0.5 * harmonic_cot(t)? * x.iter().map(|v| v * v).sum::<f64>())
    }

    fn grad_xt(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
        let c = harmonic_cot(t)?;
        let csc2 = 1.0 + c * c;
        let r2: f64 = x.iter().map(|v| v * v).sum();
        Ok((x.iter().map(|v| c * v).collect(), -0.5 * csc2 * r2))
    }

    fn second_derivatives(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, Array2<f64>)> {
        let c = harmonic_cot(t)?;
        let csc2 = 1.0 + c * c;
        Ok((x.iter().map(|v| -csc2 * v).collect(), Array2::eye(self.d) * c))
    }
}

/// Maps `ξ ↦ φ_t(ξ)` of the one-dimensional diagonal reductions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhiVariant {
    /// `φ_t(ξ) = ξ − t sin ξ` (free motion from `g = cos z`).
    CosInitial,
    /// `φ_t(ξ) = ξ + t(τ − √3 sin(√3 ξ))`.
    SinusoidalKinetic { tau: f64 },
}

impl PhiVariant {
    pub fn phi(&self, t: f64, xi: f64) -> f64 {
        match self {
            PhiVariant::CosInitial => xi - t * xi.sin(),
            PhiVariant::SinusoidalKinetic { tau } => {
                let r3 = 3f64.sqrt();
                xi + t * (tau - r3 * (r3 * xi).sin())
            }
        }
    }

    pub fn dphi(&self, t: f64, xi: f64) -> f64 {
        match self {
            PhiVariant::CosInitial => 1.0 - t * xi.cos(),
            PhiVariant::SinusoidalKinetic { .. } => 1.0 - 3.0 * t * (3f64.sqrt() * xi).cos(),
        }
    }

    /// Momentum carried by the characteristic starting at `ξ`.
    pub fn momentum(&self, xi: f64) -> f64 {
        match self {
            PhiVariant::CosInitial => -xi.sin(),
            PhiVariant::SinusoidalKinetic { .. } => {
                let r3 = 3f64.sqrt();
                -r3 * (r3 * xi).sin()
            }
        }
    }

    /// First caustic time.
    pub fn t_star(&self) -> f64 {
        match self {
            PhiVariant::CosInitial => 1.0,
            PhiVariant::SinusoidalKinetic { .. } => 1.0 / 3.0,
        }
    }

    /// Search window for preimages of `z`.
    fn window(&self, t: f64, z: f64) -> (f64, f64) {
        match self {
            PhiVariant::CosInitial => {
                let r = PI * (1.0 + t);
                (-r.max(z.abs() + t + 1.0), r.max(z.abs() + t + 1.0))
            }
            PhiVariant::SinusoidalKinetic { tau } => {
                // |φ_t(ξ) − ξ − tτ| ≤ √3 t
                let r = 3f64.sqrt() * t + 1.0;
                (z - t * tau - r, z - t * tau + r)
            }
        }
    }
}

/// Preimages of `z` under `φ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSet {
    pub z: f64,
    pub t: f64,
    /// Strictly increasing.
    pub roots: Vec<f64>,
    /// `|φ_t'(ξ)|` per root.
    pub jacobians: Vec<f64>,
    pub degenerate: Vec<bool>,
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let mut flo = f(lo);
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// All preimages of `z` under `φ_t` in the variant's search window.
///
/// The window is cut at the critical points of `φ_t` (sign changes of `φ_t'`
/// on a [`ROOT_GRID`]-point grid, refined by bisection); on each monotone
/// piece a sign change of `φ_t − z` is refined by bisection. A critical point
/// whose value equals `z` to 1e−10 is reported as one degenerate root.
pub fn invert_phi(t: f64, z: f64, variant: PhiVariant) -> BranchSet {
    let (lo, hi) = variant.window(t, z);
    let f = |xi: f64| variant.phi(t, xi) - z;
    let df = |xi: f64| variant.dphi(t, xi);
    let step = (hi - lo) / (ROOT_GRID - 1) as f64;
    let grid: Vec<f64> = (0..ROOT_GRID).map(|k| lo + k as f64 * step).collect();

    let mut crit = Vec::new();
    for w in grid.windows(2) {
        let (a, b) = (df(w[0]), df(w[1]));
        if a == 0.0 {
            crit.push(w[0]);
        } else if (a < 0.0) != (b < 0.0) && b != 0.0 {
            crit.push(bisect(df, w[0], w[1], 60));
        }
    }

    let mut cuts = vec![lo];
    cuts.extend(crit.iter().copied());
    cuts.push(hi);
    let mut roots: Vec<(f64, bool)> = Vec::new();
    for &c in &crit {
        if f(c).abs() <= 1e-10 {
            roots.push((c, true));
        }
    }
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (fa, fb) = (f(a), f(b));
        let r = if fa == 0.0 {
            Some(a)
        } else if (fa < 0.0) != (fb < 0.0) && fb != 0.0 {
            Some(bisect(f, a, b, 60))
        } else {
            None
        };
        if let Some(r) = r {
            let near_fold = roots.iter().any(|&(c, deg)| deg && (c - r).abs() < 1e-6);
            let dup = roots.iter().any(|&(c, _)| (c - r).abs() < 1e-12);
            if !near_fold && !dup {
                roots.push((r, false));
            }
        }
    }
    roots.sort_by(|a, b| a.0.total_cmp(&b.0));
    let jacobians: Vec<f64> = roots.iter().map(|&(r, _)| df(r).abs()).collect();
    let degenerate = roots
        .iter()
        .zip(&jacobians)
        .map(|(&(_, deg), &j)| deg || j < DEGENERATE_JACOBIAN)
        .collect();
    BranchSet {
        z,
        t,
        roots: roots.into_iter().map(|r| r.0).collect(),
        jacobians,
        degenerate,
    }
}

/// `±z_t* = ±(√(t²−1) − arccos(1/t))`, the fold points of `ξ − t sin ξ`.
pub fn caustic_fold(t: f64) -> Option<f64> {
    (t > 1.0).then(|| (t * t - 1.0).sqrt() - (1.0 / t).acos())
}

/// Weighted-momentum weak solution `∂_z f̂(z, t)` of the caustic problem with
/// initial density uniform on `[−π, π]`.
///
/// At a fold, where `|φ_t'| = 0`, the value is the momentum of the fold
/// branch, `±√(t²−1)/t`.
pub fn weighted_momentum(t: f64, z: f64) -> Result<f64> {
    if !(0.0..=3.0).contains(&t) || !(-PI..=PI).contains(&z) {
        return Err(HjError::InvalidParam(format!(
            "weighted momentum is defined for t ∈ [0, 3], z ∈ [−π, π]; got t = {t}, z = {z}"
        )));
    }
    let v = PhiVariant::CosInitial;
    let set = invert_phi(t, z, v);
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&xi, &jac), &deg) in set.roots.iter().zip(&set.jacobians).zip(&set.degenerate) {
        if !(-PI..=PI).contains(&xi) {
            continue;
        }
        if deg {
            return Ok(v.momentum(xi));
        }
        num += v.momentum(xi) / jac;
        den += 1.0 / jac;
    }
    if den == 0.0 {
        return Err(HjError::InvalidParam(format!("no characteristic reaches z = {z} at t = {t}")));
    }
    Ok(num / den)
}

/// Density of the diagonal coordinate `ξ` at time 0 for the histogram oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiagonalDensity {
    /// Uniform on `[−π, π]`.
    Uniform,
    /// Piecewise constant on `[−π, π]`, total mass `weight_neg` on `ξ < 0`.
    Halves { weight_neg: f64 },
}

/// Particle-histogram estimate of the conditional mean momentum.
///
/// Draws `n` values `ξ`, moves them to `φ_t(ξ)`, and averages the momenta of
/// particles within `bin/2` of each grid point. Grid points with an empty
/// bin yield NaN.
pub fn particle_histogram_momentum(
    t: f64,
    z_grid: &[f64],
    n: usize,
    bin: f64,
    density: DiagonalDensity,
    seed: u64,
) -> Vec<f64> {
    let v = PhiVariant::CosInitial;
    let mut pts: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = sampling::stream_rng(seed, k as u64);
            let u = sampling::unit_closed_open(&mut rng);
            let xi = match density {
                DiagonalDensity::Uniform => -PI + 2.0 * PI * u,
                DiagonalDensity::Halves { weight_neg } => {
                    if u < weight_neg {
                        -PI + PI * (u / weight_neg)
                    } else {
                        PI * (u - weight_neg) / (1.0 - weight_neg)
                    }
                }
            };
            (v.phi(t, xi), v.momentum(xi))
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    z_grid
        .iter()
        .map(|&z| {
            let a = pts.partition_point(|p| p.0 < z - 0.5 * bin);
            let b = pts.partition_point(|p| p.0 <= z + 0.5 * bin);
            if b > a {
                pts[a..b].iter().map(|p| p.1).sum::<f64>() / (b - a) as f64
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// Optimal-control reference for the LQC problem.
///
/// With the time-reversal `q_t = x_{T−t}`, `p_t = −λ_{T−t}`, the Pontryagin
/// system becomes the characteristic flow of the LQC Hamiltonian with
/// `p₀ = P₁q₀`, so its exact linear flow from each row of `q0` is the optimal
/// state path read backwards in time. The control along it is
/// `v = R⁻¹Bᵀp`.
pub fn lqc_optimal_reference(
    model: &LqcHamiltonian,
    q0: &Array2<f64>,
    t_final: f64,
    steps: usize,
) -> Result<TrajectoryBundle> {
    if steps == 0 || !(t_final > 0.0) {
        return Err(HjError::InvalidParam("reference needs steps ≥ 1 and T > 0".into()));
    }
    let h = t_final / steps as f64;
    let ic = InitialCondition::QuadraticForm(model.system().p1.clone());
    let states = integrate_ensemble(model, &ic, Integrator::LinearFlow, q0, steps, h)?;
    Ok(TrajectoryBundle {
        d: q0.ncols(),
        n: q0.nrows(),
        m: steps,
        h,
        t0: 0.0,
        model_id: "lqc_pendulum".into(),
        integrator_id: Integrator::LinearFlow.to_string(),
        seed: 0,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_grad_examples() {
        let g = harmonic_exact_grad(&[1.5, -2.0], 0.0).unwrap();
        assert!((g[0] - 1.5).abs() < 1e-15 && (g[1] + 2.0).abs() < 1e-15);
        let g = harmonic_exact_grad(&[1.0, 3.0], FRAC_PI_4).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        let g = harmonic_exact_grad(&[2.0, 0.0], 0.5).unwrap();
        assert!((g[0] - 2.0 / (0.5 + FRAC_PI_4).tan()).abs() < 1e-15);
        assert!((g[0] - 0.586815986052046775).abs() < 1e-15);
        assert!(matches!(harmonic_exact_grad(&[1.0], 3.0 * FRAC_PI_4), Err(HjError::Pole(_))));
    }

    #[test]
    fn harmonic_field_satisfies_hj() {
        let f = HarmonicSolutionField { d: 2 };
        for &t in &[0.0, 0.3, 1.1, 2.0] {
            for &x in &[[0.5, -1.0], [2.0, 3.0]] {
                let h = 1e-6;
                let ut = (f.value(&x, t + h).unwrap() - f.value(&x, t - h).unwrap()) / (2.0 * h);
                let g = f.grad_x(&x, t).unwrap();
                let r = ut + 0.5 * (g[0] * g[0] + g[1] * g[1]) + 0.5 * (x[0] * x[0] + x[1] * x[1]);
                assert!(r.abs() <= 1e-8 * (1.0 + ut.abs()), "t={t}: {r}");
                let (_, gt) = f.grad_xt(&x, t).unwrap();
                assert!((gt - ut).abs() <= 1e-6 * (1.0 + ut.abs()));
            }
        }
    }

    #[test]
    fn preimage_examples() {
        let s = invert_phi(0.5, 0.0, PhiVariant::CosInitial);
        assert_eq!(s.roots.len(), 1);
        assert!(s.roots[0].abs() < 1e-12);

        let s = invert_phi(1.5, 0.0, PhiVariant::CosInitial);
        assert_eq!(s.roots.len(), 3, "{:?}", s.roots);
        let star = s.roots[2];
        assert!((star - 1.5 * star.sin()).abs() < 1e-12);
        assert!((star - 1.4957).abs() < 1e-3);
        assert!((s.roots[0] + star).abs() < 1e-10);

        for k in 0..50 {
            let z = -PI + 2.0 * PI * k as f64 / 49.0;
            assert_eq!(invert_phi(0.9, z, PhiVariant::CosInitial).roots.len(), 1);
        }
    }

    #[test]
    fn fold_endpoints_take_branch_momentum() {
        let t = 1.5;
        let zs = caustic_fold(t).unwrap();
        let expected = (t * t - 1.0f64).sqrt() / t;
        assert!((weighted_momentum(t, zs).unwrap() - expected).abs() < 1e-8);
        assert!((weighted_momentum(t, -zs).unwrap() + expected).abs() < 1e-8);
    }

    #[test]
    fn pre_caustic_equals_classical() {
        for k in 0..41 {
            let z = -PI + 2.0 * PI * k as f64 / 40.0;
            let t = 0.999;
            let s = invert_phi(t, z, PhiVariant::CosInitial);
            let classical = -s.roots[0].sin();
            assert!((weighted_momentum(t, z).unwrap() - classical).abs() <= 1e-8);
        }
    }

    #[test]
    fn sinusoidal_variant_injective_before_t_star() {
        let v = PhiVariant::SinusoidalKinetic { tau: 3.0 };
        for k in 0..20 {
            let s = invert_phi(0.3, -4.0 + 0.4 * k as f64, v);
            assert_eq!(s.roots.len(), 1);
            assert!((v.phi(0.3, s.roots[0]) - s.z).abs() < 1e-10);
        }
        assert!(invert_phi(1.0, 3.0, v).roots.len() > 1);
    }
}
