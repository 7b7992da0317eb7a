//! One-step maps for the characteristic system `ẋ = ∂_pH`, `ṗ = −∂_xH`.
//!
//! Störmer–Verlet needs a separable model. Tao's scheme handles any model by
//! doubling phase space to `(q, p, x, y)` and binding the copies with a
//! rotation of strength `ω`. Linear models can be advanced exactly with the
//! matrix exponential of their generator.

use std::fmt;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{HjError, Result};
use crate::hamiltonians::{Hamiltonian, Structure};
use crate::linalg;

/// Integrator choice as named in configs and trajectory headers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorKind {
    StormerVerlet,
    Tao,
    LinearFlow,
    Euler,
    Rk4,
}

/// A configured integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Integrator {
    StormerVerlet,
    Tao { omega: f64 },
    LinearFlow,
    Euler,
    Rk4,
}

/// Binding strength used when a config asks for Tao without giving `omega`.
pub const DEFAULT_TAO_OMEGA: f64 = 10.0;

impl Integrator {
    pub fn from_kind(kind: IntegratorKind, omega: Option<f64>) -> Result<Self> {
        Ok(match kind {
            IntegratorKind::StormerVerlet => Integrator::StormerVerlet,
            IntegratorKind::Tao => {
                let omega = omega.unwrap_or(DEFAULT_TAO_OMEGA);
                if !(omega > 0.0 && omega.is_finite()) {
                    return Err(HjError::InvalidParam(format!("tao omega must be positive, got {omega}")));
                }
                Integrator::Tao { omega }
            }
            IntegratorKind::LinearFlow => Integrator::LinearFlow,
            IntegratorKind::Euler => Integrator::Euler,
            IntegratorKind::Rk4 => Integrator::Rk4,
        })
    }

    pub fn kind(&self) -> IntegratorKind {
        match self {
            Integrator::StormerVerlet => IntegratorKind::StormerVerlet,
            Integrator::Tao { .. } => IntegratorKind::Tao,
            Integrator::LinearFlow => IntegratorKind::LinearFlow,
            Integrator::Euler => IntegratorKind::Euler,
            Integrator::Rk4 => IntegratorKind::Rk4,
        }
    }

    /// Rejects integrator/model pairs whose structure requirement is unmet.
    pub fn check_compatible(&self, model: &dyn Hamiltonian) -> Result<()> {
        let reason = match (self, model.structure()) {
            (Integrator::StormerVerlet, Structure::Separable) => None,
            (Integrator::StormerVerlet, _) => Some("Störmer–Verlet needs a separable Hamiltonian"),
            (Integrator::LinearFlow, Structure::LinearSymplectic(_)) => None,
            (Integrator::LinearFlow, _) => Some("exact linear flow needs a linear Hamiltonian system"),
            _ => None,
        };
        match reason {
            None => Ok(()),
            Some(r) => Err(HjError::IncompatibleIntegrator {
                integrator: self.to_string(),
                model: model.id().to_string(),
                reason: r.to_string(),
            }),
        }
    }
}

impl fmt::Display for Integrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Integrator::StormerVerlet => write!(f, "stormer_verlet"),
            Integrator::Tao { omega } => write!(f, "tao(omega={omega})"),
            Integrator::LinearFlow => write!(f, "linear_flow"),
            Integrator::Euler => write!(f, "euler"),
            Integrator::Rk4 => write!(f, "rk4"),
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Störmer–Verlet (kick–drift–kick) step for a separable model.
pub fn stormer_verlet_step(model: &dyn Hamiltonian, x: &mut [f64], p: &mut [f64], h: f64) -> Result<()> {
    Integrator::StormerVerlet.check_compatible(model)?;
    let mut g = vec![0.0; x.len()];
    model.grad_x(x, p, &mut g)?;
    axpy(p, -0.5 * h, &g);
    model.grad_p(x, p, &mut g)?;
    axpy(x, h, &g);
    model.grad_x(x, p, &mut g)?;
    axpy(p, -0.5 * h, &g);
    Ok(())
}

/// Extended phase-space state of Tao's scheme. `(q, p)` and `(x, y)` are
/// two copies of the physical state.
#[derive(Debug, Clone, PartialEq)]
pub struct TaoState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl TaoState {
    pub fn new(x: &[f64], p: &[f64]) -> Self {
        TaoState {
            q: x.to_vec(),
            p: p.to_vec(),
            x: x.to_vec(),
            y: p.to_vec(),
        }
    }
}

fn tao_flow_a(model: &dyn Hamiltonian, s: &mut TaoState, delta: f64, g: &mut [f64]) -> Result<()> {
    model.grad_x(&s.q, &s.y, g)?;
    axpy(&mut s.p, -delta, g);
    model.grad_p(&s.q, &s.y, g)?;
    axpy(&mut s.x, delta, g);
    Ok(())
}

fn tao_flow_b(model: &dyn Hamiltonian, s: &mut TaoState, delta: f64, g: &mut [f64]) -> Result<()> {
    model.grad_p(&s.x, &s.p, g)?;
    axpy(&mut s.q, delta, g);
    model.grad_x(&s.x, &s.p, g)?;
    axpy(&mut s.y, -delta, g);
    Ok(())
}

fn tao_flow_c(s: &mut TaoState, delta: f64, omega: f64) {
    let (sin, cos) = (2.0 * omega * delta).sin_cos();
    for i in 0..s.q.len() {
        let (sum_q, sum_p) = (s.q[i] + s.x[i], s.p[i] + s.y[i]);
        let (u, v) = (s.q[i] - s.x[i], s.p[i] - s.y[i]);
        let u2 = u * cos + v * sin;
        let v2 = -u * sin + v * cos;
        s.q[i] = 0.5 * (sum_q + u2);
        s.x[i] = 0.5 * (sum_q - u2);
        s.p[i] = 0.5 * (sum_p + v2);
        s.y[i] = 0.5 * (sum_p - v2);
    }
}

/// Second-order Strang composition `A(h/2) B(h/2) C(h) B(h/2) A(h/2)` on the
/// extended state.
pub fn tao_extended_step(model: &dyn Hamiltonian, s: &mut TaoState, h: f64, omega: f64) -> Result<()> {
    let mut g = vec![0.0; s.q.len()];
    tao_flow_a(model, s, 0.5 * h, &mut g)?;
    tao_flow_b(model, s, 0.5 * h, &mut g)?;
    tao_flow_c(s, h, omega);
    tao_flow_b(model, s, 0.5 * h, &mut g)?;
    tao_flow_a(model, s, 0.5 * h, &mut g)?;
    Ok(())
}

/// One Tao step from a physical state: the extended state starts with both
/// copies equal and the `(q, p)` copy is returned.
pub fn tao_step(model: &dyn Hamiltonian, x: &mut [f64], p: &mut [f64], h: f64, omega: f64) -> Result<()> {
    let mut s = TaoState::new(x, p);
    tao_extended_step(model, &mut s, h, omega)?;
    x.copy_from_slice(&s.q);
    p.copy_from_slice(&s.p);
    Ok(())
}

/// `exp(h·A)·z`.
pub fn linear_flow_step(a_sys: ArrayView2<f64>, z: &[f64], h: f64) -> Vec<f64> {
    let phi = linalg::expm(a_sys.mapv(|v| v * h).view());
    linalg::matvec(phi.view(), z)
}

fn vector_field(model: &dyn Hamiltonian, x: &[f64], p: &[f64], dx: &mut [f64], dp: &mut [f64]) -> Result<()> {
    model.grad_p(x, p, dx)?;
    model.grad_x(x, p, dp)?;
    for v in dp.iter_mut() {
        *v = -*v;
    }
    Ok(())
}

/// Explicit Euler step.
pub fn euler_step(model: &dyn Hamiltonian, x: &mut [f64], p: &mut [f64], h: f64) -> Result<()> {
    let d = x.len();
    let (mut dx, mut dp) = (vec![0.0; d], vec![0.0; d]);
    vector_field(model, x, p, &mut dx, &mut dp)?;
    axpy(x, h, &dx);
    axpy(p, h, &dp);
    Ok(())
}

/// Classic fourth-order Runge–Kutta step.
pub fn rk4_step(model: &dyn Hamiltonian, x: &mut [f64], p: &mut [f64], h: f64) -> Result<()> {
    let d = x.len();
    let mut k = [(); 4].map(|_| (vec![0.0; d], vec![0.0; d]));
    let (mut xs, mut ps) = (x.to_vec(), p.to_vec());
    for stage in 0..4 {
        if stage > 0 {
            let c = if stage == 3 { h } else { 0.5 * h };
            for i in 0..d {
                xs[i] = x[i] + c * k[stage - 1].0[i];
                ps[i] = p[i] + c * k[stage - 1].1[i];
            }
        }
        let (dx, dp) = &mut k[stage];
        vector_field(model, &xs, &ps, dx, dp)?;
    }
    for i in 0..d {
        x[i] += h / 6.0 * (k[0].0[i] + 2.0 * k[1].0[i] + 2.0 * k[2].0[i] + k[3].0[i]);
        p[i] += h / 6.0 * (k[0].1[i] + 2.0 * k[1].1[i] + 2.0 * k[2].1[i] + k[3].1[i]);
    }
    Ok(())
}

/// RK4 for a linear system `ż = A z`, used as a reference for the exact flow.
pub fn rk4_linear(a_sys: ArrayView2<f64>, z: &[f64], h: f64, substeps: usize) -> Vec<f64> {
    let mut z = z.to_vec();
    let dt = h / substeps as f64;
    let f = |v: &[f64]| linalg::matvec(a_sys, v);
    for _ in 0..substeps {
        let k1 = f(&z);
        let z2: Vec<f64> = z.iter().zip(&k1).map(|(a, b)| a + 0.5 * dt * b).collect();
        let k2 = f(&z2);
        let z3: Vec<f64> = z.iter().zip(&k2).map(|(a, b)| a + 0.5 * dt * b).collect();
        let k3 = f(&z3);
        let z4: Vec<f64> = z.iter().zip(&k3).map(|(a, b)| a + dt * b).collect();
        let k4 = f(&z4);
        for i in 0..z.len() {
            z[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    z
}
