//! Adam over the gradient-regression loss, one network per time subinterval.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{HjError, Result};
use crate::field_net::{Activation, FieldNetwork, LossKind, PiecewiseField};
use crate::hamiltonians::Hamiltonian;
use crate::sampling;
use crate::trajectory::TrajectoryBundle;

/// Optimizer and scheduling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub lr: f64,
    pub n_iter: usize,
    pub batch: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps_adam: f64,
    #[serde(rename = "M_T", default = "default_mt")]
    pub m_t: usize,
    #[serde(default = "default_loss")]
    pub loss_kind: LossKind,
    #[serde(default)]
    pub seed: u64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_mt() -> usize {
    1
}
fn default_loss() -> LossKind {
    LossKind::Quadratic
}

impl TrainPlan {
    pub fn new(lr: f64, n_iter: usize, batch: usize, m_t: usize, seed: u64) -> Self {
        TrainPlan {
            lr,
            n_iter,
            batch,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps_adam: default_eps(),
            m_t,
            loss_kind: LossKind::Quadratic,
            seed,
        }
    }

    /// Checks the plan against a bundle with `n` particles and `m` steps.
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HjError::config("train.lr", "must be positive"));
        }
        if self.batch == 0 || self.batch > n {
            return Err(HjError::config(
                "train.batch",
                format!("must lie in 1..={n}, got {}", self.batch),
            ));
        }
        if self.m_t == 0 || m % self.m_t != 0 {
            return Err(HjError::config(
                "train.M_T",
                format!("must divide M = {m}, got {}", self.m_t),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps_adam <= 0.0 {
            return Err(HjError::config("train", "Adam needs 0 ≤ β < 1 and ε > 0"));
        }
        Ok(())
    }
}

/// Topology shared by every subinterval network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetTemplate {
    #[serde(rename = "L")]
    pub depth: usize,
    pub width: usize,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_kappa() -> f64 {
    0.5
}
fn default_activation() -> Activation {
    Activation::Tanh
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], plan: &TrainPlan) {
    state.step += 1;
    let (b1, b2) = (plan.beta1, plan.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= plan.lr * mhat / (vhat.sqrt() + plan.eps_adam);
    }
}

/// One recorded loss value. `iter` counts within the subinterval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub interval: usize,
    pub iter: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub field: PiecewiseField,
    pub history: Vec<LossRecord>,
}

/// Time nodes used to train subinterval `j` of `m_t` over `m` steps.
///
/// Node `i` belongs to subinterval `min(i / ℓ, m_t − 1)` with `ℓ = m / m_t`.
/// Node 0 is left out of the loss unless it is the only node available.
pub fn interval_nodes(j: usize, m: usize, m_t: usize) -> Vec<usize> {
    let l = m / m_t;
    let hi = if j + 1 == m_t { m } else { (j + 1) * l - 1 };
    let nodes: Vec<usize> = (j * l..=hi).filter(|&i| i > 0).collect();
    if nodes.is_empty() {
        vec![0]
    } else {
        nodes
    }
}

/// Seed of the network initialization for subinterval `j`.
pub fn init_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(j as u64)
}

const BATCH_STREAM_BASE: u64 = 1 << 32;

/// Draws `k` distinct indices from `0..n` (partial Fisher–Yates).
pub fn sample_without_replacement(rng: &mut impl RngCore, n: usize, k: usize, pool: &mut Vec<usize>) -> Vec<usize> {
    pool.clear();
    pool.extend(0..n);
    for i in 0..k {
        let span = (n - i) as u64;
        // rejection-free bounded draw: multiply-shift on 64 random bits
        let r = ((rng.next_u64() as u128 * span as u128) >> 64) as usize;
        pool.swap(i, i + r);
    }
    pool[..k].to_vec()
}

/// Trains one network per subinterval on the bundle's particles.
///
/// Every iteration draws a fresh particle batch (without replacement) and
/// uses the same particles at every time node of the subinterval.
pub fn train(
    bundle: &TrajectoryBundle,
    template: &NetTemplate,
    plan: &TrainPlan,
    model: Option<&dyn Hamiltonian>,
) -> Result<TrainOutput> {
    plan.validate(bundle.n, bundle.m)?;
    if plan.loss_kind == LossKind::Bregman && model.is_none() {
        return Err(HjError::InvalidParam("Bregman loss needs the Hamiltonian".into()));
    }
    let d = bundle.d;
    let l = bundle.m / plan.m_t;
    let mut nets = Vec::with_capacity(plan.m_t);
    let mut bounds = Vec::with_capacity(plan.m_t + 1);
    let mut history = Vec::with_capacity(plan.m_t * plan.n_iter);
    for j in 0..plan.m_t {
        bounds.push(bundle.time(j * l));
        let mut net = FieldNetwork::init_he(
            d,
            template.depth,
            template.width,
            template.kappa,
            template.activation,
            init_seed(plan.seed, j),
        )?;
        let nodes = interval_nodes(j, bundle.m, plan.m_t);
        let mut params = net.params_flat();
        let mut adam = AdamState::new(params.len());
        let mut rng = sampling::stream_rng(plan.seed, BATCH_STREAM_BASE + j as u64);
        let mut pool = Vec::with_capacity(bundle.n);
        let b = plan.batch;
        for it in 0..plan.n_iter {
            let idx = sample_without_replacement(&mut rng, bundle.n, b, &mut pool);
            let (loss, grad) = net.loss_and_grad_with(
                nodes.len() * b,
                |c, y, p| {
                    let i = nodes[c / b];
                    let z = bundle.state(i, idx[c % b]);
                    y[..d].copy_from_slice(&z[..d]);
                    y[d] = bundle.time(i);
                    p.copy_from_slice(&z[d..]);
                },
                plan.loss_kind,
                model,
            )?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(HjError::NonFiniteLoss {
                    iteration: it,
                    interval: j,
                });
            }
            history.push(LossRecord {
                interval: j,
                iter: it,
                loss,
            });
            adam_step(&mut adam, &mut params, &grad, plan);
            net.set_params_flat(&params)?;
        }
        nets.push(net);
    }
    bounds.push(bundle.t_end());
    Ok(TrainOutput {
        field: PiecewiseField::new(bounds, nets)?,
        history,
    })
}
