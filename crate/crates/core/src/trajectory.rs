//! Particle ensembles along characteristics and the HJT1 binary format.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HjError, Result};
use crate::hamiltonians::{Hamiltonian, InitialCondition, Structure};
use crate::integrators::{self, Integrator, TaoState};
use crate::linalg;
use crate::sampling::{self, SamplerSpec};

pub const HJT1_MAGIC: &[u8; 8] = b"HJTRAJB1";

/// States of `N` particles at `M + 1` uniform time nodes.
///
/// `states` is laid out `[time][particle][x₀…x_{d−1}, p₀…p_{d−1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub h: f64,
    pub t0: f64,
    pub model_id: String,
    pub integrator_id: String,
    pub seed: u64,
    pub states: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    d: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "M")]
    m: usize,
    h: f64,
    t0: f64,
    model_id: String,
    integrator_id: String,
    seed: u64,
}

impl TrajectoryBundle {
    /// Time of node `i`, always derived as `t0 + i·h`.
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.h
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.m)
    }

    /// All particle states at node `i`.
    pub fn node(&self, i: usize) -> &[f64] {
        let w = self.n * 2 * self.d;
        &self.states[i * w..(i + 1) * w]
    }

    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let s = 2 * self.d;
        let off = (i * self.n + k) * s;
        &self.states[off..off + s]
    }

    pub fn x(&self, i: usize, k: usize) -> &[f64] {
        &self.state(i, k)[..self.d]
    }

    pub fn p(&self, i: usize, k: usize) -> &[f64] {
        &self.state(i, k)[self.d..]
    }

    pub fn byte_len(&self) -> usize {
        self.states.len() * 8
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            d: self.d,
            n: self.n,
            m: self.m,
            h: self.h,
            t0: self.t0,
            model_id: self.model_id.clone(),
            integrator_id: self.integrator_id.clone(),
            seed: self.seed,
        })?;
        w.write_all(HJT1_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(8 * 4096);
        for chunk in self.states.chunks(4096) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(HjError::io_at(path))?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != HJT1_MAGIC {
            return Err(HjError::Format("missing HJTRAJB1 magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| HjError::Format("truncated header".into()))?;
        let hd: Header = serde_json::from_slice(body)
            .map_err(|e| HjError::Format(format!("bad trajectory header: {e}")))?;
        let count = (hd.m + 1) * hd.n * 2 * hd.d;
        let data = &bytes[12 + hlen..];
        if data.len() != count * 8 {
            return Err(HjError::Format(format!(
                "expected {} data bytes, found {}",
                count * 8,
                data.len()
            )));
        }
        let states: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = states.iter().position(|v| !v.is_finite()) {
            let per_node = hd.n * 2 * hd.d;
            return Err(HjError::NonFiniteState {
                node: pos / per_node,
                particle: (pos % per_node) / (2 * hd.d),
            });
        }
        Ok(TrajectoryBundle {
            d: hd.d,
            n: hd.n,
            m: hd.m,
            h: hd.h,
            t0: hd.t0,
            model_id: hd.model_id,
            integrator_id: hd.integrator_id,
            seed: hd.seed,
            states,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(HjError::io_at(path))?;
        Self::from_bytes(&bytes)
    }
}

enum Aux {
    None,
    Tao(Vec<TaoState>),
    Flow(Array2<f64>),
}

/// Integrates every row of `x0` (with `p₀ = ∇g(x₀)`) for `m` steps of size `h`.
///
/// Each step is applied to all particles in parallel; particles never
/// interact, so the result does not depend on the worker count. Tao's
/// extended state is carried across steps per particle.
pub fn integrate_ensemble(
    model: &dyn Hamiltonian,
    ic: &InitialCondition,
    integrator: Integrator,
    x0: &Array2<f64>,
    m: usize,
    h: f64,
) -> Result<Vec<f64>> {
    integrator.check_compatible(model)?;
    let (n, d) = x0.dim();
    if d != model.dim() {
        return Err(HjError::DimensionMismatch {
            expected: model.dim(),
            got: d,
        });
    }
    let s = 2 * d;
    let w = n * s;
    let mut states = vec![0.0; (m + 1) * w];
    for k in 0..n {
        let row = &mut states[k * s..(k + 1) * s];
        for j in 0..d {
            row[j] = x0[[k, j]];
        }
        let (xs, ps) = row.split_at_mut(d);
        ic.grad(xs, ps);
    }
    check_node(&states[..w], 0, s)?;

    let mut aux = match integrator {
        Integrator::Tao { .. } => Aux::Tao(
            states[..w]
                .chunks(s)
                .map(|z| TaoState::new(&z[..d], &z[d..]))
                .collect(),
        ),
        Integrator::LinearFlow => match model.structure() {
            Structure::LinearSymplectic(a) => Aux::Flow(linalg::expm(a.mapv(|v| v * h).view())),
            _ => unreachable!("checked by check_compatible"),
        },
        _ => Aux::None,
    };

    for i in 0..m {
        let (done, rest) = states.split_at_mut((i + 1) * w);
        let prev = &done[i * w..];
        let next = &mut rest[..w];
        next.copy_from_slice(prev);
        let results: Vec<Result<()>> = match &mut aux {
            Aux::Tao(ext) => {
                let Integrator::Tao { omega } = integrator else { unreachable!() };
                next.par_chunks_mut(s)
                    .zip(ext.par_iter_mut())
                    .map(|(z, e)| {
                        integrators::tao_extended_step(model, e, h, omega)?;
                        z[..d].copy_from_slice(&e.q);
                        z[d..].copy_from_slice(&e.p);
                        Ok(())
                    })
                    .collect()
            }
            Aux::Flow(phi) => next
                .par_chunks_mut(s)
                .map(|z| {
                    let out = linalg::matvec(phi.view(), z);
                    z.copy_from_slice(&out);
                    Ok(())
                })
                .collect(),
            Aux::None => next
                .par_chunks_mut(s)
                .map(|z| {
                    let (x, p) = z.split_at_mut(d);
                    match integrator {
                        Integrator::StormerVerlet => integrators::stormer_verlet_step(model, x, p, h),
                        Integrator::Euler => integrators::euler_step(model, x, p, h),
                        Integrator::Rk4 => integrators::rk4_step(model, x, p, h),
                        _ => unreachable!(),
                    }
                })
                .collect(),
        };
        if let Some(e) = results.into_iter().find_map(|r| r.err()) {
            return Err(e);
        }
        check_node(next, i + 1, s)?;
    }
    Ok(states)
}

fn check_node(node: &[f64], i: usize, s: usize) -> Result<()> {
    match node.chunks(s).position(|z| z.iter().any(|v| !v.is_finite())) {
        Some(k) => Err(HjError::NonFiniteState { node: i, particle: k }),
        None => Ok(()),
    }
}

/// Samples `x₀ ~ ρ₀`, sets `p₀ = ∇g(x₀)`, and integrates to `T` in `m` steps.
#[allow(clippy::too_many_arguments)]
pub fn generate_trajectories(
    model: &dyn Hamiltonian,
    ic: &InitialCondition,
    rho0: &SamplerSpec,
    integrator: Integrator,
    n: usize,
    m: usize,
    t_final: f64,
    seed: u64,
) -> Result<TrajectoryBundle> {
    if n == 0 || m == 0 {
        return Err(HjError::InvalidParam("N and M must be at least 1".into()));
    }
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(HjError::InvalidParam(format!("T must be positive, got {t_final}")));
    }
    integrator.check_compatible(model)?;
    if rho0.dim() != model.dim() {
        return Err(HjError::DimensionMismatch {
            expected: model.dim(),
            got: rho0.dim(),
        });
    }
    let x0 = sampling::draw(rho0, n, seed)?;
    let h = t_final / m as f64;
    let states = integrate_ensemble(model, ic, integrator, &x0, m, h)?;
    Ok(TrajectoryBundle {
        d: model.dim(),
        n,
        m,
        h,
        t0: 0.0,
        model_id: model.id().to_string(),
        integrator_id: integrator.to_string(),
        seed,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonians::{Harmonic, ModelSpec};

    fn small_bundle() -> TrajectoryBundle {
        let (model, ic) = ModelSpec::Harmonic { d: 2 }.build().unwrap();
        let rho0 = SamplerSpec::Gaussian {
            mean: vec![0.5, -1.0],
            cov_scale: sampling::CovScale::Isotropic(1.0),
        };
        generate_trajectories(model.as_ref(), &ic, &rho0, Integrator::StormerVerlet, 7, 5, 0.5, 3).unwrap()
    }

    #[test]
    fn single_verlet_step_matches_hand_values() {
        let x0 = Array2::from_elem((1, 1), 1.0);
        let s = integrate_ensemble(
            &Harmonic { dim: 1 },
            &InitialCondition::Zero,
            Integrator::StormerVerlet,
            &x0,
            1,
            0.1,
        )
        .unwrap();
        assert_eq!(s[..2], [1.0, 0.0]);
        assert!((s[2] - 0.995).abs() < 1e-15);
        assert!((s[3] + 0.09975).abs() < 1e-15);
    }

    #[test]
    fn initial_momenta_are_gradients() {
        let b = small_bundle();
        for k in 0..b.n {
            assert_eq!(b.x(0, k), b.p(0, k));
        }
        assert_eq!(b.time(5), 0.5);
    }

    #[test]
    fn zero_steps_rejected() {
        let (model, ic) = ModelSpec::Harmonic { d: 1 }.build().unwrap();
        let rho0 = SamplerSpec::Delta { point: vec![1.0] };
        let r = generate_trajectories(model.as_ref(), &ic, &rho0, Integrator::Rk4, 1, 0, 1.0, 0);
        assert!(r.is_err());
    }

    #[test]
    fn hjt1_roundtrip_is_bitwise() {
        let b = small_bundle();
        let mut bytes = Vec::new();
        b.write_to(&mut bytes).unwrap();
        let back = TrajectoryBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 12 + hlen + 8 * 6 * 7 * 4);
    }

    #[test]
    fn hjt1_rejects_garbage() {
        assert!(TrajectoryBundle::from_bytes(b"NOTATRAJ\0\0\0\0").is_err());
        let b = small_bundle();
        let mut bytes = Vec::new();
        b.write_to(&mut bytes).unwrap();
        bytes.pop();
        assert!(TrajectoryBundle::from_bytes(&bytes).is_err());
    }

    #[test]
    fn nan_reports_offending_node() {
        // Explicit Euler on the quartic model blows up from a large state.
        let (model, ic) = ModelSpec::NonseparableQuartic { d: 1 }.build().unwrap();
        let x0 = Array2::from_shape_vec((2, 1), vec![0.0, 1e3]).unwrap();
        let r = integrate_ensemble(model.as_ref(), &ic, Integrator::Euler, &x0, 50, 1.0);
        match r {
            Err(HjError::NonFiniteState { node, particle }) => {
                assert!(node > 0);
                assert_eq!(particle, 1);
            }
            other => panic!("expected NonFiniteState, got {other:?}"),
        }
    }
}
