//! End-to-end runs behind the command-line tool: generate, train, evaluate,
//! control rollouts, error-versus-N studies and reports.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, OracleKind};
use crate::diagnostics::{self, fmt_f64, write_csv, GradOracle};
use crate::error::{HjError, Result};
use crate::field_net::{PiecewiseField, ScalarField};
use crate::hamiltonians::{Hamiltonian, LqcHamiltonian, LqcSystem, ModelSpec};
use crate::reference::{self, caustic_fold, harmonic_exact_grad};
use crate::sampling;
use crate::training::{self, LossRecord, TrainOutput};
use crate::trajectory::{generate_trajectories, integrate_ensemble, TrajectoryBundle};

/// Samples `ρ₀` and integrates the characteristics described by `cfg`.
pub fn generate(cfg: &ExperimentConfig, seed: Option<u64>) -> Result<TrajectoryBundle> {
    let (model, ic) = cfg.model()?;
    let tr = &cfg.trajectory;
    generate_trajectories(
        model.as_ref(),
        &ic,
        &cfg.rho0,
        tr.integrator()?,
        tr.n,
        tr.m,
        tr.t_final,
        seed.unwrap_or(tr.seed),
    )
}

/// JSON line printed after generation.
pub fn generate_summary(b: &TrajectoryBundle) -> Value {
    json!({"N": b.n, "M": b.m, "h": b.h, "model_id": b.model_id})
}

/// Rejects a trajectory file that does not belong to `cfg`.
pub fn check_bundle(cfg: &ExperimentConfig, b: &TrajectoryBundle) -> Result<()> {
    let (model, _) = cfg.model()?;
    let tr = &cfg.trajectory;
    let mismatch = |field: &str, want: String, got: String| {
        Err(HjError::config(
            format!("trajectory.{field}"),
            format!("trajectory file has {got}, config expects {want}"),
        ))
    };
    if b.d != model.dim() {
        return mismatch("d", model.dim().to_string(), b.d.to_string());
    }
    if b.model_id != model.id() {
        return mismatch("model_id", model.id().into(), b.model_id.clone());
    }
    if b.m != tr.m {
        return mismatch("M", tr.m.to_string(), b.m.to_string());
    }
    if (b.t_end() - tr.t_final).abs() > 1e-12 * tr.t_final.max(1.0) {
        return mismatch("T", tr.t_final.to_string(), b.t_end().to_string());
    }
    if cfg.train.batch > b.n {
        return mismatch("N", format!("at least {} particles", cfg.train.batch), b.n.to_string());
    }
    Ok(())
}

/// Trains the configured network family on `bundle`.
pub fn train(cfg: &ExperimentConfig, bundle: &TrajectoryBundle) -> Result<TrainOutput> {
    check_bundle(cfg, bundle)?;
    let (model, _) = cfg.model()?;
    training::train(bundle, &cfg.network, &cfg.train, Some(model.as_ref()))
}

/// Loss history CSV: global iteration index, loss, subinterval.
pub fn write_loss_csv(path: &Path, history: &[LossRecord], n_iter: usize) -> Result<()> {
    write_csv(
        path,
        &["iter", "loss", "interval"],
        history.iter().map(|r| {
            vec![
                (r.interval * n_iter + r.iter).to_string(),
                fmt_f64(r.loss),
                r.interval.to_string(),
            ]
        }),
    )
}

fn caustic_grad(x: &[f64], t: f64) -> Result<Vec<f64>> {
    let s = 1.0 / (x.len() as f64).sqrt();
    let z = x.iter().sum::<f64>() * s;
    let m = reference::weighted_momentum(t, z)?;
    Ok(vec![m * s; x.len()])
}

/// The gradient oracle for `kind`, if it has one.
pub fn gradient_oracle(kind: OracleKind) -> Option<GradOracle<'static>> {
    match kind {
        OracleKind::Harmonic => Some(&harmonic_exact_grad),
        OracleKind::Caustic => Some(&caustic_grad),
        OracleKind::None | OracleKind::Lqc => None,
    }
}

/// Node closest to `t`.
pub fn nearest_node(b: &TrajectoryBundle, t: f64) -> usize {
    (((t - b.t0) / b.h).round().max(0.0) as usize).min(b.m)
}

fn node_positions(b: &TrajectoryBundle, i: usize) -> Vec<f64> {
    (0..b.n).flat_map(|k| b.x(i, k).iter().copied()).collect()
}

/// Residual inside versus outside the particle cloud at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualContrast {
    pub t: f64,
    /// Mean residual over the particles at the node nearest `t`.
    pub inside: f64,
    /// Mean residual over grid points outside the cloud's mean ± 2σ box.
    pub outside: f64,
    pub ratio: f64,
}

/// Mean residual over `grid` points outside the cloud box at `t`.
fn residual_contrast(
    field: &dyn ScalarField,
    model: &dyn Hamiltonian,
    grid: &diagnostics::GridSpec,
    b: &TrajectoryBundle,
    t: f64,
) -> Result<ResidualContrast> {
    let i = nearest_node(b, t);
    let inside = diagnostics::weighted_l1_residual(field, model, b, i)?;
    let mean = diagnostics::cloud_mean(b, t);
    let mut var = vec![0.0; b.d];
    for k in 0..b.n {
        for (j, v) in var.iter_mut().enumerate() {
            *v += (b.x(i, k)[j] - mean[j]).powi(2);
        }
    }
    let half: Vec<f64> = var.iter().map(|v| 2.0 * (v / b.n as f64).sqrt()).collect();
    let outside_pts: Vec<Vec<f64>> = grid
        .points(&mean)
        .into_iter()
        .filter(|x| grid.plane.iter().any(|&j| (x[j] - mean[j]).abs() > half[j]))
        .collect();
    let mut sum = 0.0;
    for x in &outside_pts {
        sum += diagnostics::residual(field, model, x, t)?;
    }
    let outside = sum / outside_pts.len().max(1) as f64;
    Ok(ResidualContrast {
        t,
        inside,
        outside,
        ratio: outside / inside,
    })
}

/// Headline numbers written by [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_name: String,
    pub config_hash: String,
    pub trajectory_seed: u64,
    pub train_seed: u64,
    pub model_id: String,
    pub integrator_id: String,
    /// Mean over nodes `i ≥ 1` of the full-sample mean-squared loss.
    pub train_loss: f64,
    /// Largest mean-squared loss of any single subinterval.
    pub max_interval_loss: f64,
    /// Time of the largest per-node mean-squared loss.
    pub argmax_mse_t: f64,
    pub energy_drift_bundle: f64,
    pub energy_drift_bundle_rel: f64,
    pub energy_drift_field: f64,
    /// `(t, mean |∇ψ − ∇u|)` over the particle cloud.
    pub cloud_err: Vec<(f64, f64)>,
    pub residual_contrast: Vec<ResidualContrast>,
    /// `(t, mean |ηᵀ∇ψ − ∂_z f̂|)` on the diagonal, away from the discontinuities.
    pub line_err: Vec<(f64, f64)>,
}

/// Number of points of the diagonal-line tables.
pub const LINE_POINTS: usize = 200;
/// Half-width of the neighborhoods of the discontinuities left out of `line_err`.
pub const LINE_EXCLUSION: f64 = 0.2;

/// Points `z_j = −π + 2πj/(n−1)`.
pub fn line_grid(n: usize) -> Vec<f64> {
    (0..n).map(|j| -PI + 2.0 * PI * j as f64 / (n - 1) as f64).collect()
}

/// `(z, ηᵀ∇ψ(zη, t), ∂_z f̂(z, t))` along the diagonal of a two-dimensional field.
pub fn diagonal_line(field: &dyn ScalarField, t: f64, n: usize) -> Result<Vec<(f64, f64, f64)>> {
    let s = 1.0 / 2f64.sqrt();
    line_grid(n)
        .into_iter()
        .map(|z| {
            let g = field.grad_x(&[z * s, z * s], t)?;
            Ok((z, (g[0] + g[1]) * s, reference::weighted_momentum(t, z)?))
        })
        .collect()
}

/// Mean `|net − oracle|` on the line, skipping points within
/// [`LINE_EXCLUSION`] of `±z_t*`.
pub fn line_discrepancy(rows: &[(f64, f64, f64)], t: f64) -> f64 {
    let fold = caustic_fold(t);
    let kept: Vec<f64> = rows
        .iter()
        .filter(|(z, _, _)| fold.is_none_or(|f| (z.abs() - f).abs() > LINE_EXCLUSION))
        .map(|(_, a, b)| (a - b).abs())
        .collect();
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Writes every diagnostics table to `outdir` and returns the summary.
pub fn evaluate(cfg: &ExperimentConfig, field: &PiecewiseField, bundle: &TrajectoryBundle, outdir: &Path) -> Result<EvalSummary> {
    check_bundle(cfg, bundle)?;
    if field.dim() != bundle.d {
        return Err(HjError::config(
            "model",
            format!("model has d = {}, trajectories have d = {}", field.dim(), bundle.d),
        ));
    }
    fs::create_dir_all(outdir).map_err(HjError::io_at(outdir))?;
    let (model, _) = cfg.model()?;
    let model = model.as_ref();
    let smooth = field.second_derivatives(&vec![0.0; bundle.d], bundle.t0).is_ok();

    let stats = diagnostics::loss_curves(field, bundle)?;
    let e_bundle = diagnostics::energy_curve_bundle(model, bundle)?;
    let e_field = diagnostics::energy_curve_field(field, model, bundle)?;
    let l1res: Vec<f64> = if smooth {
        (0..=bundle.m)
            .map(|i| diagnostics::weighted_l1_residual(field, model, bundle, i))
            .collect::<Result<_>>()?
    } else {
        vec![f64::NAN; bundle.m + 1]
    };
    write_csv(
        &outdir.join("curves.csv"),
        &["t", "eps", "delta", "mse", "l1res", "energy", "energy_bundle"],
        stats.iter().enumerate().map(|(i, s)| {
            vec![
                fmt_f64(s.t),
                fmt_f64(s.eps),
                fmt_f64(s.delta),
                fmt_f64(s.mse),
                fmt_f64(l1res[i]),
                fmt_f64(e_field[i]),
                fmt_f64(e_bundle[i]),
            ]
        }),
    )?;

    let m_t = cfg.train.m_t;
    let mut interval_loss = vec![(0.0, 0usize); m_t];
    for (j, acc) in interval_loss.iter_mut().enumerate() {
        for i in training::interval_nodes(j, bundle.m, m_t) {
            acc.0 += stats[i].mse;
            acc.1 += 1;
        }
    }
    let train_loss = stats[1..].iter().map(|s| s.mse).sum::<f64>() / bundle.m.max(1) as f64;
    let max_interval_loss = interval_loss.iter().map(|(s, c)| s / *c as f64).fold(0.0, f64::max);
    let argmax = (1..=bundle.m)
        .max_by(|&a, &b| stats[a].mse.total_cmp(&stats[b].mse))
        .unwrap_or(0);

    let oracle = gradient_oracle(cfg.eval.oracle);
    let mut residual_rows = Vec::new();
    let mut error_rows = Vec::new();
    let mut contrast = Vec::new();
    for grid in &cfg.eval.grids {
        if smooth {
            residual_rows.extend(diagnostics::residual_grid(field, model, grid, bundle)?);
            for &t in &grid.times {
                contrast.push(residual_contrast(field, model, grid, bundle, t)?);
            }
        }
        if let (Some(o), OracleKind::Harmonic) = (oracle, cfg.eval.oracle) {
            error_rows.extend(diagnostics::error_grid(field, o, grid, bundle)?);
        }
    }
    if !residual_rows.is_empty() {
        diagnostics::write_grid_csv(&outdir.join("residual_grid.csv"), "res", &residual_rows)?;
    }
    if !error_rows.is_empty() {
        diagnostics::write_grid_csv(&outdir.join("error_grid.csv"), "err", &error_rows)?;
    }

    let mut cloud_err = Vec::new();
    if let Some(o) = oracle {
        for &t in &cfg.eval.err_times {
            let i = nearest_node(bundle, t);
            let ti = bundle.time(i);
            let xs = node_positions(bundle, i);
            let errs = (0..bundle.n)
                .map(|k| diagnostics::error_field(field, o, &xs[k * bundle.d..(k + 1) * bundle.d], ti))
                .collect::<Result<Vec<f64>>>()?;
            cloud_err.push((ti, errs.iter().sum::<f64>() / bundle.n as f64));
        }
    }

    let mut line_err = Vec::new();
    if !cfg.eval.line_times.is_empty() {
        let mut rows = Vec::new();
        for &t in &cfg.eval.line_times {
            let line = diagonal_line(field, t, LINE_POINTS)?;
            line_err.push((t, line_discrepancy(&line, t)));
            rows.extend(line.into_iter().map(|(z, a, b)| vec![fmt_f64(t), fmt_f64(z), fmt_f64(a), fmt_f64(b)]));
        }
        write_csv(&outdir.join("caustic_line.csv"), &["t", "z", "net", "oracle"], rows)?;
    }

    let drift_b = diagnostics::max_drift(&e_bundle);
    let summary = EvalSummary {
        config_name: cfg.name.clone(),
        config_hash: cfg.hash(),
        trajectory_seed: bundle.seed,
        train_seed: cfg.train.seed,
        model_id: bundle.model_id.clone(),
        integrator_id: bundle.integrator_id.clone(),
        train_loss,
        max_interval_loss,
        argmax_mse_t: stats[argmax].t,
        energy_drift_bundle: drift_b,
        energy_drift_bundle_rel: drift_b / e_bundle[0].abs().max(f64::MIN_POSITIVE),
        energy_drift_field: diagnostics::max_drift(&e_field),
        cloud_err,
        residual_contrast: contrast,
        line_err,
    };
    write_summary(&outdir.join("eval_summary.json"), cfg, &summary)?;
    Ok(summary)
}

fn write_summary(path: &Path, cfg: &ExperimentConfig, body: &impl Serialize) -> Result<()> {
    let mut v = serde_json::to_value(body)?;
    v["config"] = serde_json::to_value(cfg)?;
    v["config_hash"] = json!(cfg.hash());
    fs::write(path, serde_json::to_string_pretty(&v)? + "\n").map_err(HjError::io_at(path))?;
    Ok(())
}

fn lqc_model(cfg: &ExperimentConfig) -> Result<LqcHamiltonian> {
    match &cfg.hamiltonian {
        ModelSpec::LqcPendulum(p) => LqcHamiltonian::new(LqcSystem::pendulum(p)?),
        _ => Err(HjError::config("hamiltonian", "control rollouts need the lqc_pendulum model")),
    }
}

/// `q̇ = ∂_pH(q, ∇ψ(q, t))` integrated with classical RK4.
pub fn field_rollout(
    field: &dyn ScalarField,
    model: &dyn Hamiltonian,
    q0: &[f64],
    t_final: f64,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let d = q0.len();
    let h = t_final / steps as f64;
    let f = |q: &[f64], t: f64| -> Result<Vec<f64>> {
        let g = field.grad_x(q, t)?;
        let mut out = vec![0.0; d];
        model.grad_p(q, &g, &mut out)?;
        Ok(out)
    };
    let axpy = |q: &[f64], k: &[f64], a: f64| -> Vec<f64> { q.iter().zip(k).map(|(x, y)| x + a * y).collect() };
    let mut path = vec![q0.to_vec()];
    for s in 0..steps {
        let t = s as f64 * h;
        let q = path.last().expect("nonempty");
        let k1 = f(q, t)?;
        let k2 = f(&axpy(q, &k1, 0.5 * h), t + 0.5 * h)?;
        let k3 = f(&axpy(q, &k2, 0.5 * h), t + 0.5 * h)?;
        let k4 = f(&axpy(q, &k3, h), t + h)?;
        let next: Vec<f64> = (0..d)
            .map(|j| q[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(HjError::NonFiniteState { node: s + 1, particle: 0 });
        }
        path.push(next);
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub n_rollouts: usize,
    pub steps: usize,
    pub seed: u64,
    /// Mean over rollouts and time nodes of `|q̂_t − q_t|²`.
    pub mean_sq_deviation: f64,
    /// Mean over rollouts of `|q̂_T − q_T|²`.
    pub terminal_gap: f64,
}

/// Rolls out the learned control from fresh `ρ₀` samples and compares with
/// the Pontryagin-optimal paths.
pub fn control(cfg: &ExperimentConfig, field: &PiecewiseField, outdir: &Path) -> Result<ControlSummary> {
    let spec = cfg
        .eval
        .control
        .as_ref()
        .ok_or_else(|| HjError::config("eval.control", "missing control block"))?;
    let model = lqc_model(cfg)?;
    let d = model.dim();
    if field.dim() != d {
        return Err(HjError::config("model", format!("model has d = {}, expected {d}", field.dim())));
    }
    fs::create_dir_all(outdir).map_err(HjError::io_at(outdir))?;
    let t_final = cfg.trajectory.t_final;
    let q0 = sampling::draw(&cfg.rho0, spec.n_rollouts, spec.seed)?;
    let reference = reference::lqc_optimal_reference(&model, &q0, t_final, spec.steps)?;
    let mut rows = Vec::new();
    let (mut msd, mut terminal) = (0.0, 0.0);
    for k in 0..spec.n_rollouts {
        let learned = field_rollout(field, &model, q0.row(k).as_slice().expect("contiguous"), t_final, spec.steps)?;
        for (i, q) in learned.iter().enumerate() {
            let opt = reference.x(i, k);
            let gap: f64 = q.iter().zip(opt).map(|(a, b)| (a - b).powi(2)).sum();
            msd += gap;
            if i == spec.steps {
                terminal += gap;
            }
            let mut row = vec![k.to_string(), fmt_f64(reference.time(i))];
            row.extend(q.iter().map(|v| fmt_f64(*v)));
            row.extend(opt.iter().map(|v| fmt_f64(*v)));
            rows.push(row);
        }
    }
    let mut header = vec!["rollout".to_string(), "t".to_string()];
    header.extend((1..=d).map(|j| format!("learned_{j}")));
    header.extend((1..=d).map(|j| format!("optimal_{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&outdir.join("control.csv"), &header, rows)?;
    let summary = ControlSummary {
        n_rollouts: spec.n_rollouts,
        steps: spec.steps,
        seed: spec.seed,
        mean_sq_deviation: msd / (spec.n_rollouts * (spec.steps + 1)) as f64,
        terminal_gap: terminal / spec.n_rollouts as f64,
    };
    write_summary(&outdir.join("control_summary.json"), cfg, &summary)?;
    Ok(summary)
}

/// One trained-and-evaluated study cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub n: usize,
    pub seed: u64,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyBand {
    pub n: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `‖∇ψ − ∇u‖²_{L²(ρ_t)}` estimated on fresh samples pushed to the node nearest `t`.
pub fn l2_error_at(cfg: &ExperimentConfig, field: &dyn ScalarField, oracle: GradOracle, t: f64, samples: usize, seed: u64) -> Result<f64> {
    let (model, ic) = cfg.model()?;
    let tr = &cfg.trajectory;
    let h = tr.h();
    let k = ((t / h).round() as usize).min(tr.m);
    let x0 = sampling::draw(&cfg.rho0, samples, seed)?;
    let states = integrate_ensemble(model.as_ref(), &ic, tr.integrator()?, &x0, k, h)?;
    let d = model.dim();
    let w = samples * 2 * d;
    let xs: Vec<f64> = states[k * w..(k + 1) * w].chunks(2 * d).flat_map(|z| z[..d].iter().copied()).collect();
    diagnostics::mean_squared_error(field, oracle, &xs, k as f64 * h)
}

/// Stream offset separating evaluation samples from training samples.
const EVAL_SEED_OFFSET: u64 = 0x5EED_0000_0000;

/// Trains at every `(N, seed)` of the study block and measures the L² error.
pub fn study(cfg: &ExperimentConfig, outdir: &Path) -> Result<(Vec<StudyRow>, Vec<StudyBand>)> {
    let spec = cfg
        .eval
        .study
        .as_ref()
        .ok_or_else(|| HjError::config("eval.study", "missing study block"))?;
    let oracle = gradient_oracle(cfg.eval.oracle).ok_or_else(|| HjError::config("eval.oracle", "study needs a gradient oracle"))?;
    fs::create_dir_all(outdir).map_err(HjError::io_at(outdir))?;
    let mut rows = Vec::new();
    for &n in &spec.n_list {
        for &seed in &spec.seeds {
            let mut c = cfg.clone();
            c.trajectory.n = n;
            c.trajectory.seed = seed;
            c.train.seed = seed;
            c.train.batch = c.train.batch.min(n);
            let bundle = generate(&c, None)?;
            let out = train(&c, &bundle)?;
            let error = l2_error_at(&c, &out.field, oracle, spec.t_eval, spec.eval_samples, seed.wrapping_add(EVAL_SEED_OFFSET))?;
            rows.push(StudyRow { n, seed, error });
        }
    }
    write_csv(
        &outdir.join("study.csv"),
        &["N", "seed", "error"],
        rows.iter().map(|r| vec![r.n.to_string(), r.seed.to_string(), fmt_f64(r.error)]),
    )?;
    let bands: Vec<StudyBand> = spec
        .n_list
        .iter()
        .map(|&n| {
            let mut e: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.error).collect();
            e.sort_by(f64::total_cmp);
            StudyBand {
                n,
                median: quantile(&e, 0.5),
                q25: quantile(&e, 0.25),
                q75: quantile(&e, 0.75),
            }
        })
        .collect();
    write_summary(&outdir.join("study_summary.json"), cfg, &json!({"rows": rows, "bands": bands}))?;
    Ok((rows, bands))
}

/// One threshold comparison in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn read_json(path: &Path) -> Result<Option<Value>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path).map_err(HjError::io_at(path))?)?))
}

/// Collates the summaries in `outdir` into `report.json` and checks the
/// thresholds of the config they were produced with.
pub fn report(outdir: &Path) -> Result<(Value, Vec<Check>)> {
    let eval = read_json(&outdir.join("eval_summary.json"))?;
    let control = read_json(&outdir.join("control_summary.json"))?;
    let study = read_json(&outdir.join("study_summary.json"))?;
    let cfg_value = [&eval, &control, &study]
        .into_iter()
        .flatten()
        .map(|v| v["config"].clone())
        .next()
        .ok_or_else(|| HjError::Format(format!("no summary files in {}", outdir.display())))?;
    let cfg: ExperimentConfig = serde_json::from_value(cfg_value)?;
    let th = &cfg.eval.thresholds;
    let mut checks = Vec::new();
    let mut check = |name: &str, value: Option<f64>, limit: Option<f64>| {
        if let (Some(v), Some(l)) = (value, limit) {
            checks.push(Check {
                name: name.into(),
                value: v,
                threshold: l,
                pass: v < l,
            });
        }
    };
    if let Some(e) = &eval {
        check("final_loss", e["train_loss"].as_f64(), th.final_loss);
        let worst = e["cloud_err"]
            .as_array()
            .and_then(|a| a.iter().filter_map(|p| p[1].as_f64()).reduce(f64::max));
        check("mean_err", worst, th.mean_err);
        check("energy_drift", e["energy_drift_bundle_rel"].as_f64(), th.energy_drift);
    }
    if let Some(c) = &control {
        check("control_msd", c["mean_sq_deviation"].as_f64(), th.control_msd);
    }
    let all = checks.iter().all(|c| c.pass);
    let report = json!({
        "config_name": cfg.name,
        "config_hash": cfg.hash(),
        "eval": eval,
        "control": control,
        "study": study,
        "checks": checks,
        "pass": all,
    });
    let path = outdir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(HjError::io_at(&path))?;
    Ok((report, checks))
}

/// Writes the trained field and its loss history.
pub fn save_training(out: &TrainOutput, n_iter: usize, model_path: &Path) -> Result<std::path::PathBuf> {
    out.field.save(model_path)?;
    let loss_path = model_path.with_extension("loss.csv");
    write_loss_csv(&loss_path, &out.history, n_iter)?;
    Ok(loss_path)
}

/// Initial positions as an `n × d` array.
pub fn positions(b: &TrajectoryBundle, i: usize) -> Array2<f64> {
    Array2::from_shape_vec((b.n, b.d), node_positions(b, i)).expect("shape")
}
