//! The scalar field `ψ_θ(x, t)` as a residual network, its exact input
//! derivatives, and the exact parameter gradient of the gradient-regression
//! loss.
//!
//! Samples are stored as columns. For a batch `Y ∈ ℝ^{(d+1)×B}` the forward
//! pass is
//!
//! ```text
//! a₁ = A₁Y + b₁,               H₁ = σ(a₁)
//! a_k = H_{k−1} + κ(A_k H_{k−1} + b_k),   H_k = σ(a_k)   (2 ≤ k ≤ L−1)
//! ψ = A_L H_{L−1}
//! ```
//!
//! and `∇_yψ = A₁ᵀΔ₁` with `G_{L−1} = A_Lᵀ`, `Δ_k = G_k ⊙ σ'(a_k)`,
//! `G_{k−1} = Δ_k + κA_kᵀΔ_k`. The loss depends on `θ` only through this
//! backward recurrence, so its parameter gradient is obtained by running the
//! adjoint of the backward pass and then the adjoint of the forward pass.

use std::fmt;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{HjError, Result};
use crate::hamiltonians::Hamiltonian;
use crate::sampling;

/// Columns per parallel work item. Fixed so that reductions do not depend
/// on the number of workers.
pub const CHUNK: usize = 512;

pub const MODEL_SCHEMA: &str = "hjdc-net-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sin,
    Relu,
    Softplus,
}

impl Activation {
    /// `(σ(z), σ'(z), σ''(z))`. ReLU uses `σ'(0) = 0` and `σ'' = 0`.
    #[inline]
    pub fn eval3(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            Activation::Sin => {
                let (s, c) = z.sin_cos();
                (s, c, -s)
            }
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Activation::Softplus => {
                let v = z.max(0.0) + (-z.abs()).exp().ln_1p();
                let s = if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                };
                (v, s, s * (1.0 - s))
            }
        }
    }

    pub fn is_twice_differentiable(self) -> bool {
        self != Activation::Relu
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sin => "sin",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss between `∇_xψ` and the particle momentum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `|∇_xψ − p|²`
    Quadratic,
    /// `D_{H,x}(∇_xψ : p)`
    Bregman,
}

/// Anything with a spatial gradient field that diagnostics can probe.
pub trait ScalarField: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64], t: f64) -> Result<f64>;
    /// `(∇_xψ, ∂_tψ)`.
    fn grad_xt(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, f64)>;
    /// `(∂_t∇_xψ, ∇²_xψ)`.
    fn second_derivatives(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, Array2<f64>)>;

    fn grad_x(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.grad_xt(x, t)?.0)
    }

    /// `∇_xψ` for `n` points (row-major `n × d`) at a common time.
    fn grad_x_batch(&self, xs: &[f64], t: f64) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(xs.len());
        for x in xs.chunks(d) {
            out.extend(self.grad_x(x, t)?);
        }
        Ok(out)
    }
}

/// Residual network `ψ_θ : ℝ^{d+1} → ℝ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldNetwork {
    pub d: usize,
    pub depth: usize,
    pub width: usize,
    pub kappa: f64,
    pub activation: Activation,
    /// `A₁ … A_L`; `A_L` is `1 × width`.
    pub weights: Vec<Array2<f64>>,
    /// `b₁ … b_{L−1}`.
    pub biases: Vec<Array1<f64>>,
}

/// Hidden-layer quantities of one batched forward pass.
struct Forward {
    h: Vec<Array2<f64>>,
    ds: Vec<Array2<f64>>,
    dds: Vec<Array2<f64>>,
}

/// Result of the backward (input-gradient) recurrence.
struct Backward {
    g: Vec<Array2<f64>>,
    delta: Vec<Array2<f64>>,
    grad_y: Array2<f64>,
}

impl FieldNetwork {
    /// `(L−2)·w² + w·(d+2) + (L−1)·w`.
    pub fn param_count_for(d: usize, depth: usize, width: usize) -> usize {
        (depth - 2) * width * width + width * (d + 2) + (depth - 1) * width
    }

    pub fn param_count(&self) -> usize {
        Self::param_count_for(self.d, self.depth, self.width)
    }

    fn check_shape(d: usize, depth: usize, width: usize) -> Result<()> {
        if d == 0 {
            return Err(HjError::InvalidParam("network input dimension must be positive".into()));
        }
        if depth < 3 {
            return Err(HjError::InvalidParam(format!("network depth must be at least 3, got {depth}")));
        }
        if width == 0 {
            return Err(HjError::InvalidParam("network width must be positive".into()));
        }
        Ok(())
    }

    /// All-zero parameters.
    pub fn zeros(d: usize, depth: usize, width: usize, kappa: f64, activation: Activation) -> Result<Self> {
        Self::check_shape(d, depth, width)?;
        let mut weights = vec![Array2::zeros((width, d + 1))];
        for _ in 2..depth {
            weights.push(Array2::zeros((width, width)));
        }
        weights.push(Array2::zeros((1, width)));
        Ok(FieldNetwork {
            d,
            depth,
            width,
            kappa,
            activation,
            weights,
            biases: vec![Array1::zeros(width); depth - 1],
        })
    }

    /// He initialization: weights `N(0, 2/fan_in)`, biases zero.
    pub fn init_he(
        d: usize,
        depth: usize,
        width: usize,
        kappa: f64,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut net = Self::zeros(d, depth, width, kappa, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in net.weights.iter_mut() {
            let std = (2.0 / a.ncols() as f64).sqrt();
            a.mapv_inplace(|_| std * sampling::normal(&mut rng));
        }
        Ok(net)
    }

    /// Parameters in the order `A₁, b₁, A₂, b₂, …, A_{L−1}, b_{L−1}, A_L`,
    /// matrices row-major.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for k in 0..self.depth {
            out.extend(self.weights[k].iter());
            if k < self.depth - 1 {
                out.extend(self.biases[k].iter());
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(HjError::DimensionMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter();
        for k in 0..self.depth {
            for v in self.weights[k].iter_mut() {
                *v = *it.next().unwrap();
            }
            if k < self.depth - 1 {
                for v in self.biases[k].iter_mut() {
                    *v = *it.next().unwrap();
                }
            }
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.depth - 1
    }

    fn forward(&self, y: ArrayView2<f64>, want_second: bool) -> Forward {
        let nh = self.hidden();
        let act = self.activation;
        let mut h: Vec<Array2<f64>> = Vec::with_capacity(nh);
        let mut ds = Vec::with_capacity(nh);
        let mut dds = Vec::with_capacity(nh);
        for k in 0..nh {
            let mut a = self.weights[k].dot(&if k == 0 { y } else { h[k - 1].view() });
            a += &self.biases[k].view().insert_axis(Axis(1));
            if k > 0 {
                a *= self.kappa;
                a += &h[k - 1];
            }
            let mut hk = Array2::zeros(a.raw_dim());
            let mut dk = Array2::zeros(a.raw_dim());
            let mut ddk = if want_second {
                Array2::zeros(a.raw_dim())
            } else {
                Array2::zeros((0, 0))
            };
            if want_second {
                Zip::from(&a).and(&mut hk).and(&mut dk).and(&mut ddk).for_each(|&z, v, d1, d2| {
                    (*v, *d1, *d2) = act.eval3(z);
                });
            } else {
                Zip::from(&a).and(&mut hk).and(&mut dk).for_each(|&z, v, d1| {
                    let e = act.eval3(z);
                    (*v, *d1) = (e.0, e.1);
                });
            }
            h.push(hk);
            ds.push(dk);
            dds.push(ddk);
        }
        Forward { h, ds, dds }
    }

    fn backward(&self, f: &Forward) -> Backward {
        let nh = self.hidden();
        let b = f.h[0].ncols();
        let mut g: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); nh];
        let mut delta: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); nh];
        let al = self.weights[nh].row(0);
        g[nh - 1] = al.insert_axis(Axis(1)).broadcast((self.width, b)).unwrap().to_owned();
        for k in (0..nh).rev() {
            delta[k] = &g[k] * &f.ds[k];
            if k > 0 {
                let mut next = self.weights[k].t().dot(&delta[k]);
                next *= self.kappa;
                next += &delta[k];
                g[k - 1] = next;
            }
        }
        let grad_y = self.weights[0].t().dot(&delta[0]);
        Backward { g, delta, grad_y }
    }

    /// `ψ` for the columns of `y`.
    pub fn eval_batch(&self, y: ArrayView2<f64>) -> Array1<f64> {
        let f = self.forward(y, false);
        self.weights[self.hidden()].dot(&f.h[self.hidden() - 1]).row(0).to_owned()
    }

    /// `∇_yψ` (`(d+1) × B`) for the columns of `y`.
    pub fn input_grad_batch(&self, y: ArrayView2<f64>) -> Array2<f64> {
        let f = self.forward(y, false);
        self.backward(&f).grad_y
    }

    fn column(&self, x: &[f64], t: f64) -> Result<Array2<f64>> {
        if x.len() != self.d {
            return Err(HjError::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        let mut y = Array2::zeros((self.d + 1, 1));
        for (j, v) in x.iter().enumerate() {
            y[[j, 0]] = *v;
        }
        y[[self.d, 0]] = t;
        Ok(y)
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<f64> {
        let y = self.column(x, t)?;
        Ok(self.eval_batch(y.view())[0])
    }

    /// Sum over the columns of the per-sample loss and its parameter gradient
    /// in flat order. `y` is `(d+1) × B`, `targets` is `d × B`.
    fn chunk_loss_grad(
        &self,
        y: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        kind: LossKind,
        model: Option<&dyn Hamiltonian>,
    ) -> Result<(f64, Vec<f64>)> {
        let d = self.d;
        let nh = self.hidden();
        let kappa = self.kappa;
        let f = self.forward(y, true);
        let bw = self.backward(&f);
        let b = y.ncols();

        // R̄ = ∂(loss sum)/∂(∇_yψ); the time row stays zero.
        let mut rbar = Array2::<f64>::zeros((d + 1, b));
        let mut total = 0.0;
        match kind {
            LossKind::Quadratic => {
                for s in 0..b {
                    for j in 0..d {
                        let e = bw.grad_y[[j, s]] - targets[[j, s]];
                        total += e * e;
                        rbar[[j, s]] = 2.0 * e;
                    }
                }
            }
            LossKind::Bregman => {
                let model = model.ok_or_else(|| {
                    HjError::InvalidParam("Bregman loss needs the Hamiltonian".into())
                })?;
                let (mut x, mut q, mut p) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
                let (mut gq, mut gp) = (vec![0.0; d], vec![0.0; d]);
                for s in 0..b {
                    for j in 0..d {
                        x[j] = y[[j, s]];
                        q[j] = bw.grad_y[[j, s]];
                        p[j] = targets[[j, s]];
                    }
                    model.grad_p(&x, &q, &mut gq)?;
                    model.grad_p(&x, &p, &mut gp)?;
                    let lin: f64 = (0..d).map(|j| gp[j] * (q[j] - p[j])).sum();
                    total += model.energy(&x, &q)? - model.energy(&x, &p)? - lin;
                    for j in 0..d {
                        rbar[[j, s]] = gq[j] - gp[j];
                    }
                }
            }
        }

        let mut ga: Vec<Array2<f64>> = self.weights.iter().map(|a| Array2::zeros(a.raw_dim())).collect();
        let mut gb: Vec<Array1<f64>> = self.biases.iter().map(|v| Array1::zeros(v.raw_dim())).collect();

        // Adjoint of the backward recurrence.
        ga[0] += &bw.delta[0].dot(&rbar.t());
        let dbar = self.weights[0].dot(&rbar);
        let mut abp: Vec<Array2<f64>> = Vec::with_capacity(nh);
        let mut gbar = &dbar * &f.ds[0];
        abp.push(&(&dbar * &bw.g[0]) * &f.dds[0]);
        for k in 1..nh {
            let mut dbar = self.weights[k].dot(&gbar);
            dbar *= kappa;
            dbar += &gbar;
            ga[k].scaled_add(kappa, &bw.delta[k].dot(&gbar.t()));
            abp.push(&(&dbar * &bw.g[k]) * &f.dds[k]);
            gbar = &dbar * &f.ds[k];
        }
        ga[nh].row_mut(0).assign(&gbar.sum_axis(Axis(1)));

        // Adjoint of the forward pass, driven by the backward-pass sensitivities.
        let mut hbar = Array2::<f64>::zeros((self.width, b));
        for k in (1..nh).rev() {
            let abar = &abp[k] + &(&hbar * &f.ds[k]);
            gb[k].scaled_add(kappa, &abar.sum_axis(Axis(1)));
            ga[k].scaled_add(kappa, &abar.dot(&f.h[k - 1].t()));
            let mut next = self.weights[k].t().dot(&abar);
            next *= kappa;
            next += &abar;
            hbar = next;
        }
        let abar = &abp[0] + &(&hbar * &f.ds[0]);
        gb[0] += &abar.sum_axis(Axis(1));
        ga[0] += &abar.dot(&y.t());

        let mut flat = Vec::with_capacity(self.param_count());
        for k in 0..self.depth {
            flat.extend(ga[k].iter());
            if k < nh {
                flat.extend(gb[k].iter());
            }
        }
        Ok((total, flat))
    }

    /// Mean loss over `n` samples and its exact parameter gradient.
    ///
    /// `fill(c, y, p)` writes sample `c`'s input `(x, t)` and target momentum.
    /// Samples are processed in fixed chunks of [`CHUNK`] whose partial sums
    /// are added in chunk order, so the result does not depend on the number
    /// of workers.
    pub fn loss_and_grad_with<F>(
        &self,
        n: usize,
        fill: F,
        kind: LossKind,
        model: Option<&dyn Hamiltonian>,
    ) -> Result<(f64, Vec<f64>)>
    where
        F: Fn(usize, &mut [f64], &mut [f64]) + Sync,
    {
        if n == 0 {
            return Err(HjError::EmptyBatch);
        }
        let d = self.d;
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        let parts: Vec<Result<(f64, Vec<f64>)>> = starts
            .par_iter()
            .map(|&s| {
                let e = (s + CHUNK).min(n);
                let mut y = Array2::zeros((e - s, d + 1));
                let mut p = Array2::zeros((e - s, d));
                for c in s..e {
                    let r = c - s;
                    fill(
                        c,
                        y.row_mut(r).into_slice().unwrap(),
                        p.row_mut(r).into_slice().unwrap(),
                    );
                }
                self.chunk_loss_grad(y.t(), p.t(), kind, model)
            })
            .collect();
        reduce_parts(parts, n, self.param_count())
    }

    /// Mean loss over the columns of `y` (`(d+1) × n`) against `targets`
    /// (`d × n`) and its exact parameter gradient.
    pub fn loss_and_grad_columns(
        &self,
        y: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        kind: LossKind,
        model: Option<&dyn Hamiltonian>,
    ) -> Result<(f64, Vec<f64>)> {
        let n = y.ncols();
        if y.nrows() != self.d + 1 || targets.nrows() != self.d || targets.ncols() != n {
            return Err(HjError::DimensionMismatch {
                expected: self.d,
                got: targets.nrows(),
            });
        }
        let d = self.d;
        self.loss_and_grad_with(
            n,
            |c, yc, pc| {
                for j in 0..=d {
                    yc[j] = y[[j, c]];
                }
                for j in 0..d {
                    pc[j] = targets[[j, c]];
                }
            },
            kind,
            model,
        )
    }

    /// Loss over a list of `(x, t, p)` samples.
    pub fn loss_value_and_param_grad(
        &self,
        batch: &[(Vec<f64>, f64, Vec<f64>)],
        kind: LossKind,
        model: Option<&dyn Hamiltonian>,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(HjError::EmptyBatch);
        }
        let d = self.d;
        let mut y = Array2::zeros((d + 1, batch.len()));
        let mut p = Array2::zeros((d, batch.len()));
        for (s, (x, t, target)) in batch.iter().enumerate() {
            if x.len() != d || target.len() != d {
                return Err(HjError::DimensionMismatch {
                    expected: d,
                    got: x.len().max(target.len()),
                });
            }
            for j in 0..d {
                y[[j, s]] = x[j];
                p[[j, s]] = target[j];
            }
            y[[d, s]] = *t;
        }
        self.loss_and_grad_columns(y.view(), p.view(), kind, model)
    }

    fn params_json(&self) -> Value {
        let mut m = Map::new();
        for k in 0..self.depth {
            let rows: Vec<Vec<f64>> = self.weights[k].rows().into_iter().map(|r| r.to_vec()).collect();
            m.insert(format!("A{}", k + 1), json!(rows));
            if k < self.hidden() {
                m.insert(format!("b{}", k + 1), json!(self.biases[k].to_vec()));
            }
        }
        Value::Object(m)
    }

    fn load_params_json(&mut self, v: &Value) -> Result<()> {
        let obj = v
            .as_object()
            .ok_or_else(|| HjError::Format("params must be an object".into()))?;
        let depth = self.depth;
        for k in 0..depth {
            let key = format!("A{}", k + 1);
            let rows: Vec<Vec<f64>> = serde_json::from_value(
                obj.get(&key)
                    .cloned()
                    .ok_or_else(|| HjError::Format(format!("missing {key}")))?,
            )?;
            let a = &mut self.weights[k];
            if rows.len() != a.nrows() || rows.iter().any(|r| r.len() != a.ncols()) {
                return Err(HjError::Format(format!("{key} has the wrong shape")));
            }
            for (i, r) in rows.iter().enumerate() {
                for (j, v) in r.iter().enumerate() {
                    a[[i, j]] = *v;
                }
            }
            if k < depth - 1 {
                let key = format!("b{}", k + 1);
                let b: Vec<f64> = serde_json::from_value(
                    obj.get(&key)
                        .cloned()
                        .ok_or_else(|| HjError::Format(format!("missing {key}")))?,
                )?;
                if b.len() != self.width {
                    return Err(HjError::Format(format!("{key} has the wrong length")));
                }
                self.biases[k] = Array1::from(b);
            }
        }
        Ok(())
    }

    /// Full Hessian of `ψ` in `y = (x, t)` at one point, by a tangent
    /// (forward-mode) sweep through the forward and backward recurrences
    /// along each unit direction.
    fn hessian_y(&self, x: &[f64], t: f64) -> Result<Array2<f64>> {
        if !self.activation.is_twice_differentiable() {
            return Err(HjError::NotTwiceDifferentiable(self.activation.to_string()));
        }
        let n = self.d + 1;
        let nh = self.hidden();
        let base = self.column(x, t)?;
        let f = self.forward(base.view(), true);
        let bw = self.backward(&f);
        let col = |m: &Array2<f64>| m.column(0).to_owned().insert_axis(Axis(1));
        let ds: Vec<Array2<f64>> = f.ds.iter().map(col).collect();
        let gdd: Vec<Array2<f64>> = (0..nh).map(|k| &col(&bw.g[k]) * &col(&f.dds[k])).collect();

        let mut adot: Vec<Array2<f64>> = Vec::with_capacity(nh);
        let mut hdot = Array2::<f64>::zeros((0, 0));
        for k in 0..nh {
            let a = if k == 0 {
                self.weights[0].to_owned()
            } else {
                let mut a = self.weights[k].dot(&hdot);
                a *= self.kappa;
                a += &hdot;
                a
            };
            hdot = &a * &ds[k];
            adot.push(a);
        }
        let mut gdot = Array2::<f64>::zeros((self.width, n));
        let mut ddot = Array2::<f64>::zeros((0, 0));
        for k in (0..nh).rev() {
            ddot = &(&gdot * &ds[k]) + &(&gdd[k] * &adot[k]);
            if k > 0 {
                let mut g = self.weights[k].t().dot(&ddot);
                g *= self.kappa;
                g += &ddot;
                gdot = g;
            }
        }
        let hess = self.weights[0].t().dot(&ddot);
        Ok((&hess + &hess.t()) * 0.5)
    }
}

fn reduce_parts(parts: Vec<Result<(f64, Vec<f64>)>>, n: usize, np: usize) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut grad = vec![0.0; np];
    for part in parts {
        let (v, g) = part?;
        total += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}

impl ScalarField for FieldNetwork {
    fn dim(&self) -> usize {
        self.d
    }

    fn value(&self, x: &[f64], t: f64) -> Result<f64> {
        self.eval(x, t)
    }

    fn grad_xt(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
        let y = self.column(x, t)?;
        let g = self.input_grad_batch(y.view());
        let col = g.column(0);
        Ok((col.slice(s![..self.d]).to_vec(), col[self.d]))
    }

    fn second_derivatives(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, Array2<f64>)> {
        let h = self.hessian_y(x, t)?;
        let d = self.d;
        Ok((h.slice(s![..d, d]).to_vec(), h.slice(s![..d, ..d]).to_owned()))
    }

    fn grad_x_batch(&self, xs: &[f64], t: f64) -> Result<Vec<f64>> {
        let d = self.d;
        if xs.len() % d != 0 {
            return Err(HjError::DimensionMismatch {
                expected: d,
                got: xs.len() % d,
            });
        }
        let n = xs.len() / d;
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        let parts: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&s| {
                let e = (s + CHUNK).min(n);
                let mut y = Array2::zeros((d + 1, e - s));
                for c in 0..e - s {
                    for j in 0..d {
                        y[[j, c]] = xs[(s + c) * d + j];
                    }
                    y[[d, c]] = t;
                }
                let g = self.input_grad_batch(y.view());
                let mut out = Vec::with_capacity((e - s) * d);
                for c in 0..e - s {
                    for j in 0..d {
                        out.push(g[[j, c]]);
                    }
                }
                out
            })
            .collect();
        Ok(parts.concat())
    }
}

/// One network per subinterval of `[t0, t_end]`.
///
/// Interval `j` is `[bounds[j], bounds[j+1])`; the last one is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseField {
    pub bounds: Vec<f64>,
    pub nets: Vec<FieldNetwork>,
}

impl PiecewiseField {
    pub fn new(bounds: Vec<f64>, nets: Vec<FieldNetwork>) -> Result<Self> {
        if nets.is_empty() || bounds.len() != nets.len() + 1 {
            return Err(HjError::InvalidParam(format!(
                "{} networks need {} bounds, got {}",
                nets.len(),
                nets.len() + 1,
                bounds.len()
            )));
        }
        if bounds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(HjError::InvalidParam("subinterval bounds must increase".into()));
        }
        let head = &nets[0];
        if nets.iter().any(|n| {
            n.d != head.d || n.depth != head.depth || n.width != head.width || n.activation != head.activation
        }) {
            return Err(HjError::InvalidParam("subinterval networks must share one topology".into()));
        }
        Ok(PiecewiseField { bounds, nets })
    }

    pub fn single(net: FieldNetwork, t0: f64, t_end: f64) -> Result<Self> {
        Self::new(vec![t0, t_end], vec![net])
    }

    pub fn intervals(&self) -> usize {
        self.nets.len()
    }

    /// Index of the interval containing `t` (left-closed; the last interval is
    /// closed and also receives times beyond its end).
    pub fn interval_of(&self, t: f64) -> usize {
        let m = self.nets.len();
        (1..m).take_while(|&j| self.bounds[j] <= t).last().unwrap_or(0)
    }

    pub fn net_at(&self, t: f64) -> &FieldNetwork {
        &self.nets[self.interval_of(t)]
    }

    pub fn to_json(&self) -> Value {
        let head = &self.nets[0];
        let intervals: Vec<Value> = self
            .nets
            .iter()
            .enumerate()
            .map(|(j, n)| {
                json!({
                    "t_lo": self.bounds[j],
                    "t_hi": self.bounds[j + 1],
                    "params": n.params_json(),
                })
            })
            .collect();
        json!({
            "schema": MODEL_SCHEMA,
            "d": head.d,
            "L": head.depth,
            "width": head.width,
            "kappa": head.kappa,
            "activation": head.activation,
            "intervals": intervals,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Interval {
            t_lo: f64,
            t_hi: f64,
            params: Value,
        }
        #[derive(Deserialize)]
        struct Doc {
            schema: String,
            d: usize,
            #[serde(rename = "L")]
            depth: usize,
            width: usize,
            kappa: f64,
            activation: Activation,
            intervals: Vec<Interval>,
        }
        let doc: Doc = serde_json::from_value(v.clone()).map_err(|e| HjError::Format(format!("model file: {e}")))?;
        if doc.schema != MODEL_SCHEMA {
            return Err(HjError::Format(format!("unsupported model schema `{}`", doc.schema)));
        }
        if doc.intervals.is_empty() {
            return Err(HjError::Format("model file has no intervals".into()));
        }
        let mut bounds = vec![doc.intervals[0].t_lo];
        let mut nets = Vec::new();
        for (j, iv) in doc.intervals.iter().enumerate() {
            if j > 0 && iv.t_lo != bounds[j] {
                return Err(HjError::Format(format!("interval {j} does not start where {} ends", j - 1)));
            }
            bounds.push(iv.t_hi);
            let mut net = FieldNetwork::zeros(doc.d, doc.depth, doc.width, doc.kappa, doc.activation)?;
            net.load_params_json(&iv.params)?;
            nets.push(net);
        }
        Self::new(bounds, nets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(path, text + "\n").map_err(HjError::io_at(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HjError::io_at(path))?;
        let v: Value = serde_json::from_str(&text)?;
        Self::from_json(&v)
    }
}

impl ScalarField for PiecewiseField {
    fn dim(&self) -> usize {
        self.nets[0].d
    }
    fn value(&self, x: &[f64], t: f64) -> Result<f64> {
        self.net_at(t).eval(x, t)
    }
    fn grad_xt(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
        self.net_at(t).grad_xt(x, t)
    }
    fn second_derivatives(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, Array2<f64>)> {
        self.net_at(t).second_derivatives(x, t)
    }
    fn grad_x_batch(&self, xs: &[f64], t: f64) -> Result<Vec<f64>> {
        self.net_at(t).grad_x_batch(xs, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn hand_net() -> FieldNetwork {
        let mut n = FieldNetwork::zeros(1, 3, 1, 0.5, Activation::Tanh).unwrap();
        n.weights[0] = array![[1.0, 0.0]];
        n.weights[1] = array![[1.0]];
        n.weights[2] = array![[1.0]];
        n
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(FieldNetwork::param_count_for(2, 3, 4), 40);
        let n = FieldNetwork::init_he(3, 6, 7, 0.5, Activation::Sin, 1).unwrap();
        assert_eq!(n.params_flat().len(), n.param_count());
    }

    #[test]
    fn init_is_seeded() {
        let a = FieldNetwork::init_he(2, 4, 8, 0.5, Activation::Tanh, 5).unwrap();
        let b = FieldNetwork::init_he(2, 4, 8, 0.5, Activation::Tanh, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn he_std_first_layer() {
        let mut draws = Vec::new();
        for seed in 0..67 {
            let n = FieldNetwork::init_he(2, 3, 50, 0.5, Activation::Tanh, seed).unwrap();
            draws.extend(n.weights[0].iter().copied());
        }
        assert!(draws.len() >= 10_000);
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (draws.len() - 1) as f64;
        let expected = (2.0f64 / 3.0).sqrt();
        assert!((var.sqrt() / expected - 1.0).abs() < 0.05, "{}", var.sqrt());
    }

    #[test]
    fn zero_params_give_zero() {
        let n = FieldNetwork::zeros(3, 4, 5, 0.5, Activation::Tanh).unwrap();
        assert_eq!(n.eval(&[1.0, 2.0, 3.0], 0.4).unwrap(), 0.0);
        let (g, gt) = n.grad_xt(&[1.0, 2.0, 3.0], 0.4).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        assert_eq!(gt, 0.0);
        let (dt, h) = n.second_derivatives(&[1.0, 2.0, 3.0], 0.4).unwrap();
        assert!(dt.iter().all(|v| *v == 0.0));
        assert!(h.iter().all(|v| *v == 0.0));
        let batch = vec![(vec![0.5, 0.1, -0.2], 0.3, vec![0.0; 3])];
        let (l, grad) = n.loss_value_and_param_grad(&batch, LossKind::Quadratic, None).unwrap();
        assert_eq!(l, 0.0);
        assert!(grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_built_values() {
        let n = hand_net();
        let out = n.eval(&[0.5], 0.0).unwrap();
        assert!((out - 0.600018275098128527).abs() < 1e-15, "{out}");
        let (g, _) = n.grad_xt(&[0.5], 0.0).unwrap();
        let h1 = 0.5f64.tanh();
        let h2 = (1.5 * h1).tanh();
        let expected = (1.0 - h2 * h2) * 1.5 * (1.0 - h1 * h1);
        assert!((g[0] - expected).abs() < 1e-15);
        assert!((g[0] - 0.754963952916217284).abs() < 1e-15);
    }

    #[test]
    fn hand_built_hessian() {
        // ψ(x) = tanh(1.5 tanh x); ψ'' by the chain rule.
        let n = hand_net();
        let x = 0.5f64;
        let h1 = x.tanh();
        let s1 = 1.0 - h1 * h1;
        let h2 = (1.5 * h1).tanh();
        let s2 = 1.0 - h2 * h2;
        let second = -2.0 * h2 * s2 * (1.5 * s1).powi(2) + s2 * 1.5 * (-2.0 * h1 * s1);
        let (dt, hess) = n.second_derivatives(&[x], 0.0).unwrap();
        assert!((hess[[0, 0]] - second).abs() < 1e-12, "{} vs {second}", hess[[0, 0]]);
        assert!((second + 1.766527584099613107).abs() < 1e-14);
        assert!(dt[0].abs() < 1e-12);
    }

    #[test]
    fn relu_rejected_for_second_derivatives() {
        let n = FieldNetwork::init_he(2, 3, 4, 0.5, Activation::Relu, 1).unwrap();
        assert!(matches!(
            n.second_derivatives(&[0.1, 0.2], 0.0),
            Err(HjError::NotTwiceDifferentiable(_))
        ));
    }

    #[test]
    fn self_targets_give_zero_loss() {
        let n = FieldNetwork::init_he(2, 4, 6, 0.5, Activation::Tanh, 3).unwrap();
        let x = vec![0.3, -0.7];
        let g = n.grad_x(&x, 0.2).unwrap();
        let (l, grad) = n
            .loss_value_and_param_grad(&[(x, 0.2, g)], LossKind::Quadratic, None)
            .unwrap();
        assert_eq!(l, 0.0);
        assert!(grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn interval_dispatch() {
        let nets: Vec<_> = (0..3)
            .map(|s| FieldNetwork::init_he(1, 3, 2, 0.5, Activation::Tanh, s).unwrap())
            .collect();
        let f = PiecewiseField::new(vec![0.0, 1.0, 2.0, 3.0], nets).unwrap();
        assert_eq!(f.interval_of(0.0), 0);
        assert_eq!(f.interval_of(0.999), 0);
        assert_eq!(f.interval_of(1.0), 1);
        assert_eq!(f.interval_of(2.0), 2);
        assert_eq!(f.interval_of(3.0), 2);
        assert_eq!(f.interval_of(-1.0), 0);
    }

    #[test]
    fn json_roundtrip_is_bitwise() {
        let nets: Vec<_> = (0..2)
            .map(|s| FieldNetwork::init_he(2, 4, 3, 0.5, Activation::Softplus, s).unwrap())
            .collect();
        let f = PiecewiseField::new(vec![0.0, 0.1 + 0.2, 1.0], nets).unwrap();
        let text = serde_json::to_string(&f.to_json()).unwrap();
        let back = PiecewiseField::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [Activation::Tanh, Activation::Sin, Activation::Softplus] {
            for z in [-3.0, -0.4, 0.0, 0.7, 25.0, -40.0] {
                let h = 1e-6;
                let (_, d1, d2) = act.eval3(z);
                let fd1 = (act.eval3(z + h).0 - act.eval3(z - h).0) / (2.0 * h);
                let fd2 = (act.eval3(z + h).1 - act.eval3(z - h).1) / (2.0 * h);
                assert!((d1 - fd1).abs() < 1e-8, "{act} {z}");
                assert!((d2 - fd2).abs() < 1e-8, "{act} {z}");
            }
        }
        assert_eq!(Activation::Relu.eval3(0.0), (0.0, 0.0, 0.0));
    }
}
