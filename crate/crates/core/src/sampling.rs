//! Seeded samplers for the initial densities `ρ₀`.
//!
//! Every particle `k` draws from its own ChaCha8 stream: the generator is
//! seeded from the run seed and the stream id is set to `k`. Output is
//! therefore independent of how particles are split across threads.
//! Gaussians use Box–Muller on 53-bit uniforms.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HjError, Result};

/// Covariance of a Gaussian component: `s·I` or `diag(v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovScale {
    Isotropic(f64),
    Diagonal(Vec<f64>),
}

impl CovScale {
    fn std(&self, i: usize) -> f64 {
        match self {
            CovScale::Isotropic(s) => s.sqrt(),
            CovScale::Diagonal(v) => v[i].sqrt(),
        }
    }

    fn validate(&self, d: usize, path: &str) -> Result<()> {
        let ok = match self {
            CovScale::Isotropic(s) => *s > 0.0,
            CovScale::Diagonal(v) => v.len() == d && v.iter().all(|s| *s > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(HjError::config(path, "covariance must be positive with matching length"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov_scale: CovScale,
}

/// One-dimensional factor of a product density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Marginal {
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

/// Initial density `ρ₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerSpec {
    Gaussian {
        mean: Vec<f64>,
        cov_scale: CovScale,
    },
    UniformBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    GaussianMixture {
        components: Vec<MixtureComponent>,
    },
    /// Box split by the hyperplane `n·x = 0`; mass `weight_neg` on `n·x < 0`
    /// and `weight_pos` on the rest, uniform within each half.
    PiecewiseUniformHalves {
        lo: Vec<f64>,
        hi: Vec<f64>,
        normal: Vec<f64>,
        weight_neg: f64,
        weight_pos: f64,
    },
    /// Independent coordinates.
    Product {
        marginals: Vec<Marginal>,
    },
    Delta {
        point: Vec<f64>,
    },
}

impl SamplerSpec {
    pub fn dim(&self) -> usize {
        match self {
            SamplerSpec::Gaussian { mean, .. } => mean.len(),
            SamplerSpec::UniformBox { lo, .. } | SamplerSpec::PiecewiseUniformHalves { lo, .. } => lo.len(),
            SamplerSpec::GaussianMixture { components } => components.first().map_or(0, |c| c.mean.len()),
            SamplerSpec::Product { marginals } => marginals.len(),
            SamplerSpec::Delta { point } => point.len(),
        }
    }

    /// Checks the invariants; `path` prefixes error messages.
    pub fn validate(&self, path: &str) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(HjError::config(path, "sampler dimension must be positive"));
        }
        let check_box = |lo: &[f64], hi: &[f64]| -> Result<()> {
            if lo.len() != hi.len() || lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                return Err(HjError::config(path, "box needs lo < hi componentwise"));
            }
            Ok(())
        };
        match self {
            SamplerSpec::Gaussian { cov_scale, .. } => cov_scale.validate(d, &format!("{path}.cov_scale"))?,
            SamplerSpec::UniformBox { lo, hi } => check_box(lo, hi)?,
            SamplerSpec::GaussianMixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-12 || components.iter().any(|c| c.weight < 0.0) {
                    return Err(HjError::config(
                        format!("{path}.components"),
                        format!("weights must be nonnegative and sum to 1, got {total}"),
                    ));
                }
                for (i, c) in components.iter().enumerate() {
                    if c.mean.len() != d {
                        return Err(HjError::config(format!("{path}.components[{i}].mean"), "dimension mismatch"));
                    }
                    c.cov_scale.validate(d, &format!("{path}.components[{i}].cov_scale"))?;
                }
            }
            SamplerSpec::PiecewiseUniformHalves {
                lo,
                hi,
                normal,
                weight_neg,
                weight_pos,
            } => {
                check_box(lo, hi)?;
                if normal.len() != d || normal.iter().all(|v| *v == 0.0) {
                    return Err(HjError::config(format!("{path}.normal"), "needs a nonzero vector of length d"));
                }
                if (weight_neg + weight_pos - 1.0).abs() > 1e-12 || *weight_neg < 0.0 || *weight_pos < 0.0 {
                    return Err(HjError::config(path, "half weights must be nonnegative and sum to 1"));
                }
            }
            SamplerSpec::Product { marginals } => {
                for (i, m) in marginals.iter().enumerate() {
                    let ok = match m {
                        Marginal::Normal { std, .. } => *std > 0.0,
                        Marginal::Uniform { lo, hi } => lo < hi,
                    };
                    if !ok {
                        return Err(HjError::config(format!("{path}.marginals[{i}]"), "invalid marginal"));
                    }
                }
            }
            SamplerSpec::Delta { .. } => {}
        }
        Ok(())
    }

    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            SamplerSpec::Gaussian { mean, cov_scale } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = mean[i] + cov_scale.std(i) * normal(rng);
                }
            }
            SamplerSpec::UniformBox { lo, hi } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = uniform_in(rng, lo[i], hi[i]);
                }
            }
            SamplerSpec::GaussianMixture { components } => {
                let u = unit_open_closed(rng);
                let mut acc = 0.0;
                let mut chosen = components.last().unwrap();
                for c in components {
                    acc += c.weight;
                    if u <= acc {
                        chosen = c;
                        break;
                    }
                }
                for (i, o) in out.iter_mut().enumerate() {
                    *o = chosen.mean[i] + chosen.cov_scale.std(i) * normal(rng);
                }
            }
            SamplerSpec::PiecewiseUniformHalves {
                lo,
                hi,
                normal: n,
                weight_neg,
                ..
            } => {
                let want_neg = unit_open_closed(rng) <= *weight_neg;
                loop {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = uniform_in(rng, lo[i], hi[i]);
                    }
                    let side: f64 = out.iter().zip(n).map(|(a, b)| a * b).sum();
                    if (side < 0.0) == want_neg {
                        break;
                    }
                }
            }
            SamplerSpec::Product { marginals } => {
                for (o, m) in out.iter_mut().zip(marginals) {
                    *o = match m {
                        Marginal::Normal { mean, std } => mean + std * normal(rng),
                        Marginal::Uniform { lo, hi } => uniform_in(rng, *lo, *hi),
                    };
                }
            }
            SamplerSpec::Delta { point } => out.copy_from_slice(point),
        }
    }
}

/// Uniform on `[0, 1)` with 53 random bits.
pub fn unit_closed_open(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform on `(0, 1]` with 53 random bits.
pub fn unit_open_closed(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn uniform_in(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    // clamp guards the last ulp of lo + (hi - lo) * u
    (lo + (hi - lo) * unit_closed_open(rng)).clamp(lo, hi)
}

/// Standard normal deviate by Box–Muller (cosine branch only).
pub fn normal(rng: &mut impl RngCore) -> f64 {
    let u1 = unit_open_closed(rng);
    let u2 = unit_closed_open(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// The generator for stream `stream` of run `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `n` samples (rows) from `spec`; deterministic in `(spec, n, seed)`.
pub fn draw(spec: &SamplerSpec, n: usize, seed: u64) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(HjError::InvalidParam("sample count must be at least 1".into()));
    }
    spec.validate("rho0")?;
    let d = spec.dim();
    let mut out = Array2::<f64>::zeros((n, d));
    out.as_slice_mut()
        .unwrap()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(k, row)| {
            let mut rng = stream_rng(seed, k as u64);
            spec.sample_into(&mut rng, row);
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss33() -> SamplerSpec {
        SamplerSpec::Gaussian {
            mean: vec![3.0, 3.0],
            cov_scale: CovScale::Isotropic(1.0),
        }
    }

    #[test]
    fn delta_copies_point() {
        let s = SamplerSpec::Delta { point: vec![1.5, -2.0] };
        let x = draw(&s, 3, 9).unwrap();
        for row in x.rows() {
            assert_eq!(row.to_vec(), vec![1.5, -2.0]);
        }
    }

    #[test]
    fn zero_count_rejected() {
        assert!(draw(&gauss33(), 0, 1).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let n = 100_000;
        let x = draw(&gauss33(), n, 42).unwrap();
        let mean: Vec<f64> = (0..2).map(|j| x.column(j).sum() / n as f64).collect();
        for m in &mean {
            assert!((m - 3.0).abs() < 0.02, "{mean:?}");
        }
        for a in 0..2 {
            for b in 0..2 {
                let c: f64 = x
                    .rows()
                    .into_iter()
                    .map(|r| (r[a] - mean[a]) * (r[b] - mean[b]))
                    .sum::<f64>()
                    / (n - 1) as f64;
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((c - expected).abs() < 0.03, "cov[{a}][{b}] = {c}");
            }
        }
    }

    #[test]
    fn piecewise_halves_mass() {
        let e = PI / 2f64.sqrt();
        let s = SamplerSpec::PiecewiseUniformHalves {
            lo: vec![-e, -e],
            hi: vec![e, e],
            normal: vec![1.0, 1.0],
            weight_neg: 1.0 / 11.0,
            weight_pos: 10.0 / 11.0,
        };
        let n = 100_000;
        let x = draw(&s, n, 5).unwrap();
        let neg = x.rows().into_iter().filter(|r| r[0] + r[1] < 0.0).count();
        let frac = neg as f64 / n as f64;
        assert!((frac - 1.0 / 11.0).abs() < 0.005, "{frac}");
    }

    #[test]
    fn determinism_and_disjoint_streams() {
        let s = SamplerSpec::GaussianMixture {
            components: vec![
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![-1.0, 0.0, 2.0],
                    cov_scale: CovScale::Isotropic(1.0),
                },
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![1.0, 0.0, -2.0],
                    cov_scale: CovScale::Diagonal(vec![1.0, 2.0, 0.5]),
                },
            ],
        };
        let a = draw(&s, 1000, 17).unwrap();
        let b = draw(&s, 1000, 17).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = draw(&s, 1000, 18).unwrap();
        let differ = a.iter().zip(c.iter()).filter(|(x, y)| x != y).count();
        assert!(differ as f64 >= 0.99 * a.len() as f64);
    }

    #[test]
    fn uniform_box_support() {
        let s = SamplerSpec::UniformBox {
            lo: vec![-4.5, 0.0],
            hi: vec![4.5, 1e-3],
        };
        let x = draw(&s, 20_000, 3).unwrap();
        for r in x.rows() {
            assert!((-4.5..=4.5).contains(&r[0]));
            assert!((0.0..=1e-3).contains(&r[1]));
        }
    }

    #[test]
    fn invalid_specs() {
        let bad_weights = SamplerSpec::GaussianMixture {
            components: vec![MixtureComponent {
                weight: 0.7,
                mean: vec![0.0],
                cov_scale: CovScale::Isotropic(1.0),
            }],
        };
        assert!(draw(&bad_weights, 3, 0).is_err());
        let bad_box = SamplerSpec::UniformBox {
            lo: vec![0.0, 1.0],
            hi: vec![1.0, 1.0],
        };
        assert!(draw(&bad_box, 3, 0).is_err());
    }

    #[test]
    fn serde_shape() {
        let json = r#"{"kind":"gaussian","mean":[-3,-3],"cov_scale":0.25}"#;
        let s: SamplerSpec = serde_json::from_str(json).unwrap();
        assert_eq!(
            s,
            SamplerSpec::Gaussian {
                mean: vec![-3.0, -3.0],
                cov_scale: CovScale::Isotropic(0.25)
            }
        );
    }
}
