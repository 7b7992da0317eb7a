//! Hamiltonian models, initial data, and the Bregman divergence induced by `H`.
//!
//! Every model supplies exact partial derivatives. Models are immutable after
//! construction and can be evaluated from any number of threads.

use std::fmt;
use std::sync::Arc;

use ndarray::{array, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{HjError, Result};
use crate::linalg;

/// Below this radius the Kepler model refuses to evaluate.
pub const KEPLER_SINGULAR_RADIUS: f64 = 1e-8;

/// Structural tag used by integrators to check compatibility.
#[derive(Debug, Clone, PartialEq)]
pub enum Structure {
    /// `H(x, p) = K(p) + V(x)`.
    Separable,
    /// Linear Hamiltonian vector field `ż = A z` with the given `2d × 2d` matrix.
    LinearSymplectic(Array2<f64>),
    General,
}

/// A Hamiltonian `H(x, p)` on `ℝ^d × ℝ^d` with exact partials.
pub trait Hamiltonian: Send + Sync + fmt::Debug {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn energy(&self, x: &[f64], p: &[f64]) -> Result<f64>;
    /// Writes `∂H/∂x` into `out`.
    fn grad_x(&self, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()>;
    /// Writes `∂H/∂p` into `out`.
    fn grad_p(&self, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()>;
    fn structure(&self) -> Structure;
    /// Kinetic/potential split for separable models.
    fn as_separable(&self) -> Option<&dyn Separable> {
        None
    }
}

/// Separable models expose both halves of the energy.
pub trait Separable {
    fn kinetic(&self, p: &[f64]) -> f64;
    fn potential(&self, x: &[f64]) -> Result<f64>;
}

pub type Model = Arc<dyn Hamiltonian>;

fn half_sq(v: &[f64]) -> f64 {
    0.5 * linalg::dot(v, v)
}

/// `H = ½|p|² + ½|x|²`.
#[derive(Debug, Clone)]
pub struct Harmonic {
    pub dim: usize,
}

impl Hamiltonian for Harmonic {
    fn id(&self) -> &str {
        "harmonic"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn energy(&self, x: &[f64], p: &[f64]) -> Result<f64> {
        Ok(half_sq(p) + half_sq(x))
    }
    fn grad_x(&self, x: &[f64], _p: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(x);
        Ok(())
    }
    fn grad_p(&self, _x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(p);
        Ok(())
    }
    fn structure(&self) -> Structure {
        Structure::Separable
    }
    fn as_separable(&self) -> Option<&dyn Separable> {
        Some(self)
    }
}

impl Separable for Harmonic {
    fn kinetic(&self, p: &[f64]) -> f64 {
        half_sq(p)
    }
    fn potential(&self, x: &[f64]) -> Result<f64> {
        Ok(half_sq(x))
    }
}

/// `H = ½|p|²`, no potential.
#[derive(Debug, Clone)]
pub struct FreeParticle {
    pub dim: usize,
}

impl Hamiltonian for FreeParticle {
    fn id(&self) -> &str {
        "free_particle"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn energy(&self, _x: &[f64], p: &[f64]) -> Result<f64> {
        Ok(half_sq(p))
    }
    fn grad_x(&self, _x: &[f64], _p: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
    fn grad_p(&self, _x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(p);
        Ok(())
    }
    fn structure(&self) -> Structure {
        Structure::Separable
    }
    fn as_separable(&self) -> Option<&dyn Separable> {
        Some(self)
    }
}

impl Separable for FreeParticle {
    fn kinetic(&self, p: &[f64]) -> f64 {
        half_sq(p)
    }
    fn potential(&self, _x: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

/// Degenerate kinetic energy `½ pᵀΣp + τ ηᵀp` with `Σ = ηηᵀ`, `η = 𝟏/√d`.
#[derive(Debug, Clone)]
pub struct DegenerateKinetic {
    pub dim: usize,
    pub tau: f64,
}

impl DegenerateKinetic {
    fn eta_dot(&self, p: &[f64]) -> f64 {
        p.iter().sum::<f64>() / (self.dim as f64).sqrt()
    }
}

impl Hamiltonian for DegenerateKinetic {
    fn id(&self) -> &str {
        "degenerate_kinetic"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn energy(&self, _x: &[f64], p: &[f64]) -> Result<f64> {
        Ok(self.kinetic(p))
    }
    fn grad_x(&self, _x: &[f64], _p: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
    fn grad_p(&self, _x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        let s = (self.eta_dot(p) + self.tau) / (self.dim as f64).sqrt();
        out.fill(s);
        Ok(())
    }
    fn structure(&self) -> Structure {
        Structure::Separable
    }
    fn as_separable(&self) -> Option<&dyn Separable> {
        Some(self)
    }
}

impl Separable for DegenerateKinetic {
    fn kinetic(&self, p: &[f64]) -> f64 {
        let z = self.eta_dot(p);
        0.5 * z * z + self.tau * z
    }
    fn potential(&self, _x: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

/// `H = ½|p|² + cos(2x_{i₁}+0.4) + cos(2x_{i₂}+0.4)` (zero-based indices here).
#[derive(Debug, Clone)]
pub struct SinusoidalPotential {
    pub dim: usize,
    pub i1: usize,
    pub i2: usize,
}

const SINUSOIDAL_PHASE: f64 = 0.4;

impl Hamiltonian for SinusoidalPotential {
    fn id(&self) -> &str {
        "sinusoidal_potential"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn energy(&self, x: &[f64], p: &[f64]) -> Result<f64> {
        Ok(self.kinetic(p) + self.potential(x)?)
    }
    fn grad_x(&self, x: &[f64], _p: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        for &i in &[self.i1, self.i2] {
            out[i] += -2.0 * (2.0 * x[i] + SINUSOIDAL_PHASE).sin();
        }
        Ok(())
    }
    fn grad_p(&self, _x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(p);
        Ok(())
    }
    fn structure(&self) -> Structure {
        Structure::Separable
    }
    fn as_separable(&self) -> Option<&dyn Separable> {
        Some(self)
    }
}

impl Separable for SinusoidalPotential {
    fn kinetic(&self, p: &[f64]) -> f64 {
        half_sq(p)
    }
    fn potential(&self, x: &[f64]) -> Result<f64> {
        Ok((2.0 * x[self.i1] + SINUSOIDAL_PHASE).cos() + (2.0 * x[self.i2] + SINUSOIDAL_PHASE).cos())
    }
}

/// Non-separable `H = ½(|x|²+1)(|p|²+1)`.
#[derive(Debug, Clone)]
pub struct NonseparableQuartic {
    pub dim: usize,
}

impl Hamiltonian for NonseparableQuartic {
    fn id(&self) -> &str {
        "nonseparable_quartic"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn energy(&self, x: &[f64], p: &[f64]) -> Result<f64> {
        Ok(0.5 * (linalg::dot(x, x) + 1.0) * (linalg::dot(p, p) + 1.0))
    }
    fn grad_x(&self, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        let s = linalg::dot(p, p) + 1.0;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi * s;
        }
        Ok(())
    }
    fn grad_p(&self, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        let s = linalg::dot(x, x) + 1.0;
        for (o, pi) in out.iter_mut().zip(p) {
            *o = pi * s;
        }
        Ok(())
    }
    fn structure(&self) -> Structure {
        Structure::General
    }
}

/// Planar Kepler problem `H = ½|p|² − 1/|x|`.
#[derive(Debug, Clone)]
pub struct Kepler;

impl Kepler {
    fn radius(x: &[f64]) -> Result<f64> {
        let r = linalg::norm(x);
        if r < KEPLER_SINGULAR_RADIUS {
            return Err(HjError::SingularState {
                norm: r,
                threshold: KEPLER_SINGULAR_RADIUS,
            });
        }
        Ok(r)
    }
}

impl Hamiltonian for Kepler {
    fn id(&self) -> &str {
        "kepler"
    }
    fn dim(&self) -> usize {
        2
    }
    fn energy(&self, x: &[f64], p: &[f64]) -> Result<f64> {
        Ok(self.kinetic(p) + self.potential(x)?)
    }
    fn grad_x(&self, x: &[f64], _p: &[f64], out: &mut [f64]) -> Result<()> {
        let r = Self::radius(x)?;
        let r3 = r * r * r;
        out[0] = x[0] / r3;
        out[1] = x[1] / r3;
        Ok(())
    }
    fn grad_p(&self, _x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(p);
        Ok(())
    }
    fn structure(&self) -> Structure {
        Structure::Separable
    }
    fn as_separable(&self) -> Option<&dyn Separable> {
        Some(self)
    }
}

impl Separable for Kepler {
    fn kinetic(&self, p: &[f64]) -> f64 {
        half_sq(p)
    }
    fn potential(&self, x: &[f64]) -> Result<f64> {
        Ok(-1.0 / Self::radius(x)?)
    }
}

/// Linear-quadratic control data `ẋ = Ax + Bv`, running cost `½xᵀQx + ½vᵀRv`,
/// terminal cost `½xᵀP₁x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqcSystem {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub q: Array2<f64>,
    pub p1: Array2<f64>,
    pub r: Array2<f64>,
}

/// Physical constants of the cart-pole linearisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    #[serde(default = "PendulumParams::default_cart_mass")]
    pub cart_mass: f64,
    #[serde(default = "PendulumParams::default_bob_mass")]
    pub bob_mass: f64,
    #[serde(default = "PendulumParams::default_length")]
    pub length: f64,
    #[serde(default = "PendulumParams::default_gravity")]
    pub gravity: f64,
    #[serde(default = "PendulumParams::default_r")]
    pub r: f64,
}

impl PendulumParams {
    fn default_cart_mass() -> f64 {
        1.0
    }
    fn default_bob_mass() -> f64 {
        0.1
    }
    fn default_length() -> f64 {
        1.0
    }
    fn default_gravity() -> f64 {
        9.8
    }
    fn default_r() -> f64 {
        1.0
    }
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            cart_mass: 1.0,
            bob_mass: 0.1,
            length: 1.0,
            gravity: 9.8,
            r: 1.0,
        }
    }
}

impl LqcSystem {
    /// Cart-pole linearised at the upright equilibrium, state `(x, ẋ, ζ, ζ̇)`,
    /// with `Q = P₁ = diag(1, 0, 1, 0)`.
    pub fn pendulum(params: &PendulumParams) -> Result<Self> {
        let PendulumParams {
            cart_mass: m_cart,
            bob_mass: m,
            length: l,
            gravity: g,
            r,
        } = *params;
        if !(m_cart > 0.0 && m >= 0.0 && l > 0.0 && r > 0.0) {
            return Err(HjError::InvalidParam(
                "pendulum masses, length and R must be positive".into(),
            ));
        }
        let a = array![
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, m * g / m_cart, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, (m_cart + m) * g / (m_cart * l), 0.0],
        ];
        let b = array![[0.0], [1.0 / m_cart], [0.0], [1.0 / (m_cart * l)]];
        let weights = Array2::from_diag(&array![1.0, 0.0, 1.0, 0.0]);
        Ok(LqcSystem {
            a,
            b,
            q: weights.clone(),
            p1: weights,
            r: array![[r]],
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let k = self.b.ncols();
        let ok = self.a.ncols() == d
            && self.b.nrows() == d
            && self.q.dim() == (d, d)
            && self.p1.dim() == (d, d)
            && self.r.dim() == (k, k);
        if !ok {
            return Err(HjError::InvalidParam("inconsistent LQC matrix shapes".into()));
        }
        Ok(())
    }

    /// `B R⁻¹ Bᵀ`.
    pub fn control_matrix(&self) -> Result<Array2<f64>> {
        let r_inv = linalg::invert(self.r.view())?;
        Ok(self.b.dot(&r_inv).dot(&self.b.t()))
    }

    /// Generator `[[−A, BR⁻¹Bᵀ], [Q, Aᵀ]]` of the characteristic flow.
    pub fn hamiltonian_matrix(&self) -> Result<Array2<f64>> {
        let d = self.dim();
        let g = self.control_matrix()?;
        let mut m = Array2::<f64>::zeros((2 * d, 2 * d));
        for i in 0..d {
            for j in 0..d {
                m[[i, j]] = -self.a[[i, j]];
                m[[i, d + j]] = g[[i, j]];
                m[[d + i, j]] = self.q[[i, j]];
                m[[d + i, d + j]] = self.a[[j, i]];
            }
        }
        Ok(m)
    }
}

/// Time-reversed LQC Hamiltonian `½(Bᵀp)ᵀR⁻¹(Bᵀp) − pᵀAx − ½xᵀQx`.
#[derive(Debug, Clone)]
pub struct LqcHamiltonian {
    system: LqcSystem,
    control: Array2<f64>,
    generator: Array2<f64>,
}

impl LqcHamiltonian {
    pub fn new(system: LqcSystem) -> Result<Self> {
        system.validate()?;
        let control = system.control_matrix()?;
        let generator = system.hamiltonian_matrix()?;
        Ok(LqcHamiltonian {
            system,
            control,
            generator,
        })
    }

    pub fn system(&self) -> &LqcSystem {
        &self.system
    }
}

impl Hamiltonian for LqcHamiltonian {
    fn id(&self) -> &str {
        "lqc_pendulum"
    }
    fn dim(&self) -> usize {
        self.system.dim()
    }
    fn energy(&self, x: &[f64], p: &[f64]) -> Result<f64> {
        let pv = ArrayView1::from(p);
        let xv = ArrayView1::from(x);
        let kinetic = 0.5 * pv.dot(&self.control.dot(&pv));
        let drift = pv.dot(&self.system.a.dot(&xv));
        let running = 0.5 * xv.dot(&self.system.q.dot(&xv));
        Ok(kinetic - drift - running)
    }
    fn grad_x(&self, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        let pv = ArrayView1::from(p);
        let xv = ArrayView1::from(x);
        let v = -(self.system.a.t().dot(&pv)) - self.system.q.dot(&xv);
        out.copy_from_slice(v.as_slice().unwrap());
        Ok(())
    }
    fn grad_p(&self, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        let pv = ArrayView1::from(p);
        let xv = ArrayView1::from(x);
        let v = self.control.dot(&pv) - self.system.a.dot(&xv);
        out.copy_from_slice(v.as_slice().unwrap());
        Ok(())
    }
    fn structure(&self) -> Structure {
        Structure::LinearSymplectic(self.generator.clone())
    }
}

/// Initial value `g` of the HJ problem together with its exact gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// `½|x|²`
    HalfSquaredNorm,
    /// `vᵀx`
    Linear(Vec<f64>),
    /// `a cos(ω ηᵀx)` with `η = 𝟏/√d`
    CosineRidge { amplitude: f64, freq: f64 },
    /// `Σ_i sin(x_i + shift)` over the listed (zero-based) coordinates
    SineSum { indices: Vec<usize>, shift: f64 },
    /// `½xᵀPx` for symmetric `P`
    QuadraticForm(Array2<f64>),
    Zero,
}

impl InitialCondition {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            InitialCondition::HalfSquaredNorm => half_sq(x),
            InitialCondition::Linear(v) => linalg::dot(v, x),
            InitialCondition::CosineRidge { amplitude, freq } => {
                let z = x.iter().sum::<f64>() / (x.len() as f64).sqrt();
                amplitude * (freq * z).cos()
            }
            InitialCondition::SineSum { indices, shift } => {
                indices.iter().map(|&i| (x[i] + shift).sin()).sum()
            }
            InitialCondition::QuadraticForm(p) => {
                let xv = ArrayView1::from(x);
                0.5 * xv.dot(&p.dot(&xv))
            }
            InitialCondition::Zero => 0.0,
        }
    }

    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        match self {
            InitialCondition::HalfSquaredNorm => out.copy_from_slice(x),
            InitialCondition::Linear(v) => out.copy_from_slice(v),
            InitialCondition::CosineRidge { amplitude, freq } => {
                let sd = (x.len() as f64).sqrt();
                let z = x.iter().sum::<f64>() / sd;
                out.fill(-amplitude * freq * (freq * z).sin() / sd);
            }
            InitialCondition::SineSum { indices, shift } => {
                out.fill(0.0);
                for &i in indices {
                    out[i] += (x[i] + shift).cos();
                }
            }
            InitialCondition::QuadraticForm(p) => {
                let xv = ArrayView1::from(x);
                let sym: Array1<f64> = (p.dot(&xv) + p.t().dot(&xv)) * 0.5;
                out.copy_from_slice(sym.as_slice().unwrap());
            }
            InitialCondition::Zero => out.fill(0.0),
        }
    }

    pub fn grad_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.grad(x, &mut out);
        out
    }
}

/// Builtin model selection as it appears in experiment configs:
/// `{"name": "...", "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum ModelSpec {
    Harmonic {
        d: usize,
    },
    FreeParticle {
        d: usize,
        velocity: Vec<f64>,
    },
    DegenerateKinetic {
        d: usize,
        #[serde(default = "default_tau")]
        tau: f64,
        #[serde(default = "default_freq")]
        freq: f64,
        #[serde(default = "default_one")]
        amplitude: f64,
    },
    SinusoidalPotential {
        d: usize,
        /// One-based coordinate index.
        #[serde(default = "default_i1")]
        i1: usize,
        /// One-based coordinate index.
        #[serde(default = "default_i2")]
        i2: usize,
    },
    NonseparableQuartic {
        d: usize,
    },
    Kepler {
        #[serde(default = "default_kepler_velocity")]
        velocity: [f64; 2],
    },
    LqcPendulum(#[serde(default)] PendulumParams),
}

fn default_tau() -> f64 {
    3.0
}
fn default_freq() -> f64 {
    3f64.sqrt()
}
fn default_one() -> f64 {
    1.0
}
fn default_i1() -> usize {
    10
}
fn default_i2() -> usize {
    20
}
fn default_kepler_velocity() -> [f64; 2] {
    [0.5, 0.0]
}

pub const BUILTIN_NAMES: &[&str] = &[
    "harmonic",
    "free_particle",
    "degenerate_kinetic",
    "sinusoidal_potential",
    "nonseparable_quartic",
    "kepler",
    "lqc_pendulum",
];

fn positive_dim(d: usize) -> Result<usize> {
    if d == 0 {
        return Err(HjError::InvalidParam("dimension must be positive".into()));
    }
    Ok(d)
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Harmonic { .. } => "harmonic",
            ModelSpec::FreeParticle { .. } => "free_particle",
            ModelSpec::DegenerateKinetic { .. } => "degenerate_kinetic",
            ModelSpec::SinusoidalPotential { .. } => "sinusoidal_potential",
            ModelSpec::NonseparableQuartic { .. } => "nonseparable_quartic",
            ModelSpec::Kepler { .. } => "kepler",
            ModelSpec::LqcPendulum(_) => "lqc_pendulum",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Harmonic { d }
            | ModelSpec::FreeParticle { d, .. }
            | ModelSpec::DegenerateKinetic { d, .. }
            | ModelSpec::SinusoidalPotential { d, .. }
            | ModelSpec::NonseparableQuartic { d } => *d,
            ModelSpec::Kepler { .. } => 2,
            ModelSpec::LqcPendulum(_) => 4,
        }
    }

    /// Builds the model and its initial data.
    pub fn build(&self) -> Result<(Model, InitialCondition)> {
        Ok(match self {
            ModelSpec::Harmonic { d } => (
                Arc::new(Harmonic {
                    dim: positive_dim(*d)?,
                }),
                InitialCondition::HalfSquaredNorm,
            ),
            ModelSpec::FreeParticle { d, velocity } => {
                if velocity.len() != positive_dim(*d)? {
                    return Err(HjError::InvalidParam(format!(
                        "free_particle velocity has length {}, expected {d}",
                        velocity.len()
                    )));
                }
                (
                    Arc::new(FreeParticle { dim: *d }),
                    InitialCondition::Linear(velocity.clone()),
                )
            }
            ModelSpec::DegenerateKinetic {
                d,
                tau,
                freq,
                amplitude,
            } => (
                Arc::new(DegenerateKinetic {
                    dim: positive_dim(*d)?,
                    tau: *tau,
                }),
                InitialCondition::CosineRidge {
                    amplitude: *amplitude,
                    freq: *freq,
                },
            ),
            ModelSpec::SinusoidalPotential { d, i1, i2 } => {
                let d = positive_dim(*d)?;
                if *i1 == 0 || *i2 == 0 || *i1 > d || *i2 > d || i1 == i2 {
                    return Err(HjError::InvalidParam(format!(
                        "sinusoidal_potential needs distinct one-based indices in 1..={d}, got {i1}, {i2}"
                    )));
                }
                (
                    Arc::new(SinusoidalPotential {
                        dim: d,
                        i1: i1 - 1,
                        i2: i2 - 1,
                    }),
                    InitialCondition::SineSum {
                        indices: vec![i1 - 1, i2 - 1],
                        shift: 0.15,
                    },
                )
            }
            ModelSpec::NonseparableQuartic { d } => (
                Arc::new(NonseparableQuartic {
                    dim: positive_dim(*d)?,
                }),
                InitialCondition::Zero,
            ),
            ModelSpec::Kepler { velocity } => {
                (Arc::new(Kepler), InitialCondition::Linear(velocity.to_vec()))
            }
            ModelSpec::LqcPendulum(params) => {
                let system = LqcSystem::pendulum(params)?;
                let ic = InitialCondition::QuadraticForm(system.p1.clone());
                (Arc::new(LqcHamiltonian::new(system)?), ic)
            }
        })
    }
}

/// Builds a builtin model from its name and a JSON parameter record.
pub fn make_builtin_model(
    name: &str,
    params: &serde_json::Value,
) -> Result<(Model, InitialCondition)> {
    if !BUILTIN_NAMES.contains(&name) {
        return Err(HjError::UnknownModel(name.to_string()));
    }
    let params = if params.is_null() {
        serde_json::json!({})
    } else {
        params.clone()
    };
    let spec: ModelSpec = serde_json::from_value(serde_json::json!({
        "name": name,
        "params": params,
    }))
    .map_err(|e| HjError::InvalidParam(format!("{name}: {e}")))?;
    spec.build()
}

/// `D_{H,x}(q₁ : q₂) = H(x,q₁) − H(x,q₂) − ∂_pH(x,q₂)·(q₁−q₂)`.
pub fn bregman_divergence(model: &dyn Hamiltonian, x: &[f64], q1: &[f64], q2: &[f64]) -> Result<f64> {
    let mut g = vec![0.0; q2.len()];
    model.grad_p(x, q2, &mut g)?;
    let lin: f64 = g.iter().zip(q1.iter().zip(q2)).map(|(gi, (a, b))| gi * (a - b)).sum();
    Ok(model.energy(x, q1)? - model.energy(x, q2)? - lin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn builtins() -> Vec<(Model, InitialCondition)> {
        [
            ModelSpec::Harmonic { d: 3 },
            ModelSpec::FreeParticle {
                d: 2,
                velocity: vec![1.0, -0.5],
            },
            ModelSpec::DegenerateKinetic {
                d: 4,
                tau: 3.0,
                freq: 3f64.sqrt(),
                amplitude: 1.0,
            },
            ModelSpec::SinusoidalPotential { d: 5, i1: 2, i2: 4 },
            ModelSpec::NonseparableQuartic { d: 3 },
            ModelSpec::Kepler { velocity: [0.5, 0.0] },
            ModelSpec::LqcPendulum(PendulumParams::default()),
        ]
        .iter()
        .map(|s| s.build().unwrap())
        .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn harmonic_example() {
        let m = Harmonic { dim: 2 };
        let (x, p) = ([1.0, 0.0], [0.0, 1.0]);
        assert_eq!(m.energy(&x, &p).unwrap(), 1.0);
        let mut g = [0.0; 2];
        m.grad_x(&x, &p, &mut g).unwrap();
        assert_eq!(g, [1.0, 0.0]);
        m.grad_p(&x, &p, &mut g).unwrap();
        assert_eq!(g, [0.0, 1.0]);
    }

    #[test]
    fn quartic_at_origin() {
        let m = NonseparableQuartic { dim: 3 };
        let z = [0.0; 3];
        assert_eq!(m.energy(&z, &z).unwrap(), 0.5);
        let mut g = [1.0; 3];
        m.grad_x(&z, &z, &mut g).unwrap();
        assert_eq!(g, [0.0; 3]);
        m.grad_p(&z, &z, &mut g).unwrap();
        assert_eq!(g, [0.0; 3]);
    }

    #[test]
    fn kepler_example_and_singularity() {
        let h = Kepler.energy(&[-3.0, -3.0], &[0.5, 0.0]).unwrap();
        assert!((h - (0.125 - 1.0 / (3.0 * 2f64.sqrt()))).abs() < 1e-15);
        assert!((h + 0.110_702_2).abs() < 1e-7);
        assert!(matches!(
            Kepler.energy(&[0.0, 0.0], &[1.0, 0.0]),
            Err(HjError::SingularState { .. })
        ));
        let mut g = [0.0; 2];
        assert!(Kepler.grad_x(&[1e-9, 0.0], &[0.0, 0.0], &mut g).is_err());
    }

    #[test]
    fn builtin_errors() {
        assert!(matches!(
            make_builtin_model("vortex", &serde_json::Value::Null),
            Err(HjError::UnknownModel(_))
        ));
        assert!(make_builtin_model("harmonic", &serde_json::json!({"d": 0})).is_err());
        assert!(make_builtin_model("harmonic", &serde_json::json!({"d": -1})).is_err());
        assert!(make_builtin_model("sinusoidal_potential", &serde_json::json!({"d": 5})).is_err());
        let (m, _) = make_builtin_model("lqc_pendulum", &serde_json::Value::Null).unwrap();
        assert_eq!(m.dim(), 4);
        let (m, g) = make_builtin_model("kepler", &serde_json::json!({})).unwrap();
        assert_eq!(m.dim(), 2);
        assert_eq!(g.grad_vec(&[-3.0, -3.0]), vec![0.5, 0.0]);
    }

    #[test]
    fn bregman_examples() {
        let h = Harmonic { dim: 2 };
        assert_eq!(bregman_divergence(&h, &[0.3, 7.0], &[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        let q = NonseparableQuartic { dim: 2 };
        let d = bregman_divergence(&q, &[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        for (m, _) in builtins() {
            let dim = m.dim();
            let x: Vec<f64> = (0..dim).map(|i| 0.3 + i as f64).collect();
            let p: Vec<f64> = (0..dim).map(|i| -0.7 * i as f64).collect();
            assert_eq!(bregman_divergence(m.as_ref(), &x, &p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn bregman_nonnegative_and_quadratic_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let convex: Vec<Model> = vec![
            Arc::new(Harmonic { dim: 3 }),
            Arc::new(FreeParticle { dim: 2 }),
            Arc::new(DegenerateKinetic { dim: 4, tau: 3.0 }),
            Arc::new(SinusoidalPotential { dim: 4, i1: 0, i2: 2 }),
            Arc::new(NonseparableQuartic { dim: 3 }),
        ];
        for m in &convex {
            let d = m.dim();
            for _ in 0..1000 {
                let mut v = || (0..d).map(|_| rng.random_range(-10.0..10.0)).collect::<Vec<f64>>();
                let (x, q1, q2) = (v(), v(), v());
                let div = bregman_divergence(m.as_ref(), &x, &q1, &q2).unwrap();
                assert!(div >= -1e-12, "{} gave {div}", m.id());
                if matches!(m.id(), "harmonic" | "free_particle" | "sinusoidal_potential") {
                    let half: f64 = q1.iter().zip(&q2).map(|(a, b)| 0.5 * (a - b).powi(2)).sum();
                    assert!((div - half).abs() <= 1e-12 * half.max(1.0), "{div} vs {half}");
                }
            }
        }
    }

    #[test]
    fn legendre_consistency_quadratic() {
        // f = f* = ½|·|²: D_f(q : p) = f(q) + f*(p) − q·p, with p = ∇f(p).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = FreeParticle { dim: 3 };
        for _ in 0..200 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let lhs = bregman_divergence(&h, &[0.0; 3], &q, &p).unwrap();
            let rhs = half_sq(&q) + half_sq(&p) - linalg::dot(&q, &p);
            assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn separable_split_is_exact() {
        for (m, _) in builtins() {
            if let Some(s) = m.as_separable() {
                let d = m.dim();
                let x: Vec<f64> = (0..d).map(|i| 1.1 + 0.5 * i as f64).collect();
                let p: Vec<f64> = (0..d).map(|i| 0.4 - 0.3 * i as f64).collect();
                assert_eq!(m.energy(&x, &p).unwrap(), s.kinetic(&p) + s.potential(&x).unwrap());
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, ic) in builtins() {
            let d = m.dim();
            let mut checked = 0;
            while checked < 100 {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
                let p: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
                if m.id() == "kepler" && linalg::norm(&x) < 0.5 {
                    continue;
                }
                checked += 1;
                let mut gx = vec![0.0; d];
                let mut gp = vec![0.0; d];
                m.grad_x(&x, &p, &mut gx).unwrap();
                m.grad_p(&x, &p, &mut gp).unwrap();
                let gg = ic.grad_vec(&x);
                for j in 0..d {
                    let step = 1e-6 * x[j].abs().max(1.0);
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[j] += step;
                    xm[j] -= step;
                    let fd = (m.energy(&xp, &p).unwrap() - m.energy(&xm, &p).unwrap()) / (2.0 * step);
                    assert!(rel_err(gx[j], fd) <= 1e-7, "{} grad_x[{j}] {} vs {fd}", m.id(), gx[j]);
                    let fd_g = (ic.value(&xp) - ic.value(&xm)) / (2.0 * step);
                    assert!(rel_err(gg[j], fd_g) <= 1e-7, "{} grad_g[{j}] {} vs {fd_g}", m.id(), gg[j]);

                    let step = 1e-6 * p[j].abs().max(1.0);
                    let (mut pp, mut pm) = (p.clone(), p.clone());
                    pp[j] += step;
                    pm[j] -= step;
                    let fd = (m.energy(&x, &pp).unwrap() - m.energy(&x, &pm).unwrap()) / (2.0 * step);
                    assert!(rel_err(gp[j], fd) <= 1e-7, "{} grad_p[{j}] {} vs {fd}", m.id(), gp[j]);
                }
            }
        }
    }

    #[test]
    fn lqc_generator_matches_partials() {
        let h = LqcHamiltonian::new(LqcSystem::pendulum(&PendulumParams::default()).unwrap()).unwrap();
        let Structure::LinearSymplectic(gen) = h.structure() else {
            panic!("expected linear structure")
        };
        let x = [0.3, -0.2, 0.05, 0.7];
        let p = [1.0, 0.4, -0.6, 0.2];
        let mut gx = [0.0; 4];
        let mut gp = [0.0; 4];
        h.grad_x(&x, &p, &mut gx).unwrap();
        h.grad_p(&x, &p, &mut gp).unwrap();
        let z: Vec<f64> = x.iter().chain(&p).copied().collect();
        let zdot = linalg::matvec(gen.view(), &z);
        for i in 0..4 {
            assert!((zdot[i] - gp[i]).abs() < 1e-14);
            assert!((zdot[4 + i] + gx[i]).abs() < 1e-14);
        }
    }
}
