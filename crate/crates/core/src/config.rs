//! Experiment configuration: parsing, validation, bundled presets and the
//! reproducibility hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::GridSpec;
use crate::error::{HjError, Result};
use crate::hamiltonians::{Model, ModelSpec};
use crate::integrators::{Integrator, IntegratorKind};
use crate::sampling::SamplerSpec;
use crate::training::{NetTemplate, TrainPlan};

pub const SCHEMA: &str = "hjdc-config-1";

/// Trajectory generation block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub integrator: IntegratorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl TrajectorySpec {
    pub fn integrator(&self) -> Result<Integrator> {
        Integrator::from_kind(self.integrator, self.omega).map_err(|e| HjError::config("trajectory.omega", e.to_string()))
    }

    pub fn h(&self) -> f64 {
        self.t_final / self.m as f64
    }
}

/// Reference solution available for evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    #[default]
    None,
    /// `∇u = cot(t + π/4)x` for the harmonic model.
    Harmonic,
    /// Weighted momentum along the diagonal for the two-dimensional caustic problem.
    Caustic,
    /// Pontryagin-optimal rollouts for the LQC problem.
    Lqc,
}

/// Error-versus-sample-size study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub n_list: Vec<usize>,
    pub seeds: Vec<u64>,
    pub eval_samples: usize,
    pub t_eval: f64,
}

/// Learned-control rollouts against the optimal reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub n_rollouts: usize,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Pass/fail limits checked by `report`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Upper bound on the final training loss of every subinterval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    /// Upper bound on the mean oracle error over the particle cloud.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_err: Option<f64>,
    /// Upper bound on the mean squared learned-vs-optimal state gap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_msd: Option<f64>,
    /// Upper bound on `max|H̄ − H̄₀|` in bundle mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_drift: Option<f64>,
}

impl Thresholds {
    fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

/// Evaluation block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default)]
    pub oracle: OracleKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grids: Vec<GridSpec>,
    /// Times at which oracle errors are averaged over the particle cloud.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub err_times: Vec<f64>,
    /// Times of the diagonal-line tables for the caustic oracle.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub line_times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlSpec>,
    #[serde(default, skip_serializing_if = "Thresholds::is_empty")]
    pub thresholds: Thresholds,
}

/// A complete experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub hamiltonian: ModelSpec,
    pub rho0: SamplerSpec,
    pub trajectory: TrajectorySpec,
    pub network: NetTemplate,
    pub train: TrainPlan,
    #[serde(default)]
    pub eval: EvalSpec,
}

/// Bundled presets, one per experiment, with desk-scale `_small` variants.
pub const PRESETS: &[(&str, &str)] = &[
    ("harmonic_2d", include_str!("../presets/harmonic_2d.json")),
    ("harmonic_2d_small", include_str!("../presets/harmonic_2d_small.json")),
    ("harmonic_2d_study", include_str!("../presets/harmonic_2d_study.json")),
    ("harmonic_2d_study_small", include_str!("../presets/harmonic_2d_study_small.json")),
    ("harmonic_d30", include_str!("../presets/harmonic_d30.json")),
    ("harmonic_d30_small", include_str!("../presets/harmonic_d30_small.json")),
    ("caustic_2d", include_str!("../presets/caustic_2d.json")),
    ("caustic_2d_small", include_str!("../presets/caustic_2d_small.json")),
    ("caustic_2d_halves", include_str!("../presets/caustic_2d_halves.json")),
    ("caustic_2d_halves_small", include_str!("../presets/caustic_2d_halves_small.json")),
    ("degenerate_kinetic_d20", include_str!("../presets/degenerate_kinetic_d20.json")),
    ("degenerate_kinetic_d20_small", include_str!("../presets/degenerate_kinetic_d20_small.json")),
    ("sinusoidal_potential_d30", include_str!("../presets/sinusoidal_potential_d30.json")),
    ("sinusoidal_potential_d30_small", include_str!("../presets/sinusoidal_potential_d30_small.json")),
    ("nonseparable_quartic_d10", include_str!("../presets/nonseparable_quartic_d10.json")),
    ("nonseparable_quartic_d10_small", include_str!("../presets/nonseparable_quartic_d10_small.json")),
    ("lqc_pendulum", include_str!("../presets/lqc_pendulum.json")),
    ("lqc_pendulum_small", include_str!("../presets/lqc_pendulum_small.json")),
    ("kepler", include_str!("../presets/kepler.json")),
    ("kepler_small", include_str!("../presets/kepler_small.json")),
];

/// Byte offset of a 1-based line/column position in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    start + column.saturating_sub(1)
}

impl ExperimentConfig {
    /// Parses and validates; `origin` names the source in error messages.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| {
            HjError::config(
                origin,
                format!(
                    "malformed JSON at byte offset {} (line {}, column {}): {e}",
                    byte_offset(text, e.line(), e.column()),
                    e.line(),
                    e.column()
                ),
            )
        })?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            HjError::config(if path == "." { origin.to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `preset:NAME` or a file path.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(name) = spec.strip_prefix("preset:") {
            return Self::preset(name);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(HjError::io_at(path))?;
        Self::from_json(&text, spec)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            HjError::config("preset", format!("unknown preset {name:?}; available: {}", names.join(", ")))
        })?;
        Self::from_json(text, &format!("preset:{name}"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact serialization, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Builds the model, mapping failures to config errors.
    pub fn model(&self) -> Result<(Model, crate::hamiltonians::InitialCondition)> {
        self.hamiltonian
            .build()
            .map_err(|e| HjError::config("hamiltonian.params", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(HjError::config("schema", format!("expected {SCHEMA:?}, got {:?}", self.schema)));
        }
        let (model, _) = self.model()?;
        let d = model.dim();
        self.rho0.validate("rho0")?;
        if self.rho0.dim() != d {
            return Err(HjError::config(
                "rho0",
                format!("dimension {} does not match the model dimension {d}", self.rho0.dim()),
            ));
        }
        let tr = &self.trajectory;
        if tr.n == 0 {
            return Err(HjError::config("trajectory.N", "must be positive"));
        }
        if tr.m == 0 {
            return Err(HjError::config("trajectory.M", "must be positive"));
        }
        if !(tr.t_final > 0.0 && tr.t_final.is_finite()) {
            return Err(HjError::config("trajectory.T", "must be positive and finite"));
        }
        tr.integrator()?
            .check_compatible(model.as_ref())
            .map_err(|e| HjError::config("trajectory.integrator", e.to_string()))?;
        let net = &self.network;
        if net.depth < 2 {
            return Err(HjError::config("network.L", "depth must be at least 2"));
        }
        if net.width == 0 {
            return Err(HjError::config("network.width", "must be positive"));
        }
        if !(net.kappa > 0.0 && net.kappa.is_finite()) {
            return Err(HjError::config("network.kappa", "must be positive"));
        }
        self.train.validate(tr.n, tr.m)?;
        self.validate_eval(d)
    }

    fn validate_eval(&self, d: usize) -> Result<()> {
        let ev = &self.eval;
        let t_final = self.trajectory.t_final;
        match ev.oracle {
            OracleKind::None => {}
            OracleKind::Harmonic => {
                if !matches!(self.hamiltonian, ModelSpec::Harmonic { .. }) {
                    return Err(HjError::config("eval.oracle", "the harmonic oracle needs the harmonic model"));
                }
            }
            OracleKind::Caustic => {
                let ok = matches!(
                    self.hamiltonian,
                    ModelSpec::DegenerateKinetic { d: 2, tau, freq, amplitude }
                        if tau == 0.0 && freq == 1.0 && amplitude == 1.0
                );
                if !ok {
                    return Err(HjError::config(
                        "eval.oracle",
                        "the caustic oracle needs degenerate_kinetic with d = 2, tau = 0, freq = 1, amplitude = 1",
                    ));
                }
                if t_final > 3.0 {
                    return Err(HjError::config("trajectory.T", "the caustic oracle is defined for T ≤ 3"));
                }
            }
            OracleKind::Lqc => {
                if !matches!(self.hamiltonian, ModelSpec::LqcPendulum(_)) {
                    return Err(HjError::config("eval.oracle", "the lqc oracle needs the lqc_pendulum model"));
                }
            }
        }
        for (i, g) in ev.grids.iter().enumerate() {
            g.validate(d, &format!("eval.grids[{i}]"))?;
        }
        let in_range = |t: &f64| (0.0..=t_final).contains(t);
        if !ev.err_times.iter().all(in_range) {
            return Err(HjError::config("eval.err_times", format!("times must lie in [0, {t_final}]")));
        }
        if !ev.err_times.is_empty() && !matches!(ev.oracle, OracleKind::Harmonic | OracleKind::Caustic) {
            return Err(HjError::config("eval.err_times", "needs a gradient oracle"));
        }
        if ev.oracle == OracleKind::Caustic && ev.err_times.iter().any(|&t| t >= 1.0) {
            return Err(HjError::config(
                "eval.err_times",
                "off the diagonal the caustic oracle holds only before the caustic time 1",
            ));
        }
        if !ev.line_times.is_empty() {
            if ev.oracle != OracleKind::Caustic {
                return Err(HjError::config("eval.line_times", "needs the caustic oracle"));
            }
            if !ev.line_times.iter().all(in_range) {
                return Err(HjError::config("eval.line_times", format!("times must lie in [0, {t_final}]")));
            }
        }
        if let Some(s) = &ev.study {
            if ev.oracle != OracleKind::Harmonic {
                return Err(HjError::config("eval.study", "needs the harmonic oracle"));
            }
            if s.n_list.is_empty() || s.n_list.contains(&0) {
                return Err(HjError::config("eval.study.n_list", "needs positive sample sizes"));
            }
            if s.seeds.is_empty() {
                return Err(HjError::config("eval.study.seeds", "needs at least one seed"));
            }
            if s.eval_samples == 0 {
                return Err(HjError::config("eval.study.eval_samples", "must be positive"));
            }
            if !in_range(&s.t_eval) {
                return Err(HjError::config("eval.study.t_eval", format!("must lie in [0, {t_final}]")));
            }
        }
        if let Some(c) = &ev.control {
            if ev.oracle != OracleKind::Lqc {
                return Err(HjError::config("eval.control", "needs the lqc oracle"));
            }
            if c.n_rollouts == 0 || c.steps == 0 {
                return Err(HjError::config("eval.control", "n_rollouts and steps must be positive"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses_and_round_trips() {
        for (name, _) in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            let again = ExperimentConfig::from_json(&cfg.to_json(), name).unwrap();
            assert_eq!(cfg, again, "{name}");
            assert_eq!(cfg.hash(), again.hash());
        }
    }

    #[test]
    fn malformed_json_names_byte_offset() {
        let err = ExperimentConfig::from_json("{\n  \"schema\": ,\n}", "cfg.json").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("byte offset 14"), "{err}");
    }

    #[test]
    fn field_errors_carry_paths() {
        let mut v: serde_json::Value = serde_json::from_str(PRESETS[0].1).unwrap();
        v["train"]["batch"] = serde_json::json!("many");
        let err = ExperimentConfig::from_json(&v.to_string(), "x").unwrap_err();
        assert!(err.to_string().contains("train.batch"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(PRESETS[0].1).unwrap();
        v["train"]["M_T"] = serde_json::json!(7);
        let err = ExperimentConfig::from_json(&v.to_string(), "x").unwrap_err();
        assert!(err.to_string().contains("train.M_T"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(PRESETS[0].1).unwrap();
        v["schema"] = serde_json::json!("hjdc-config-0");
        let err = ExperimentConfig::from_json(&v.to_string(), "x").unwrap_err();
        assert!(err.to_string().contains("schema"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(PRESETS[0].1).unwrap();
        v["eval"]["oracle"] = serde_json::json!("lqc");
        v["eval"]["err_times"] = serde_json::json!([]);
        let err = ExperimentConfig::from_json(&v.to_string(), "x").unwrap_err();
        assert!(err.to_string().contains("eval.oracle"), "{err}");
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        let err = ExperimentConfig::load("preset:nope").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
