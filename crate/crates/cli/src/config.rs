//! Run configuration: TOML on disk, resolved into solver objects.

use std::fmt;
use std::path::{Path, PathBuf};

use contact_hj::grid::{default_kink_threshold, PeriodicGrid};
use contact_hj::model::{
    builtin_model, builtin_perturbation, theta_proxy, ContactSystem, ModelParams,
    PerturbationParams, LEGENDRE_TOL, MODEL_NAMES, PERTURBATION_NAMES,
};
use contact_hj::semigroup::{default_v_max, SchemeParams, IMPLICIT_MAX_ITER, IMPLICIT_TOL};
use contact_hj::stationary::STATIONARY_TOL;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Solve,
    Evolve,
    Perturb,
    Sweep,
    Stability,
    Audit,
    Verify,
    Oracle,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).map_err(|_| fmt::Error)?;
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(default)]
    pub params: ModelParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSection {
    pub name: String,
    #[serde(default)]
    pub params: PerturbationParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub nodes: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { nodes: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeSection {
    pub dt: f64,
    /// Derived from the potential bound and `dt` when absent.
    pub v_max: Option<f64>,
    pub v_count: usize,
    pub implicit_tol: f64,
    pub implicit_max_iter: usize,
}

impl Default for SchemeSection {
    fn default() -> Self {
        Self {
            dt: 0.02,
            v_max: None,
            v_count: 21,
            implicit_tol: IMPLICIT_TOL,
            implicit_max_iter: IMPLICIT_MAX_ITER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub stationary_tol: f64,
    /// Time budget for every fixed-point iteration.
    pub t_max: f64,
    pub legendre_tol: f64,
    /// Kink screen threshold; grid default when absent.
    pub kink_threshold: Option<f64>,
    pub hypothesis_margin: f64,
    /// Random samples for the perturbation threshold estimate and gap checks.
    pub samples: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            stationary_tol: STATIONARY_TOL,
            t_max: 60.0,
            legendre_tol: LEGENDRE_TOL,
            kink_threshold: None,
            hypothesis_margin: 0.0,
            samples: 400,
        }
    }
}

/// Experiment knobs. Each experiment reads only the fields it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Initial field `a cos(2 pi x_1)` for solve, evolve and verify.
    pub initial_amplitude: f64,
    pub t_final: f64,
    pub snapshot_stride: usize,
    /// Bracket half-width for perturb; `3 eps / lambda` when absent.
    pub delta: Option<f64>,
    /// Sweep bracket `delta = delta_factor * eps / lambda`.
    pub delta_factor: f64,
    pub delta0: Option<f64>,
    pub probes: usize,
    pub probe_delta: f64,
    pub horizon: f64,
    pub record_stride: usize,
    /// Audit start point (first coordinate); snapped to the nearest node.
    pub audit_x: f64,
    pub t_back: f64,
    pub dt_ode: f64,
    pub audit_tol: f64,
    pub oracle_steps: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            initial_amplitude: 0.5,
            t_final: 1.0,
            snapshot_stride: 10,
            delta: None,
            delta_factor: 3.0,
            delta0: None,
            probes: 4,
            probe_delta: 0.05,
            horizon: 10.0,
            record_stride: 5,
            audit_x: 0.25,
            t_back: 0.25,
            dt_ode: 1e-3,
            audit_tol: 0.2,
            oracle_steps: 3,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub experiment: Option<Experiment>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelSection,
    #[serde(default)]
    pub perturbation: Option<PerturbationSection>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Amplitudes for the sweep, strictly decreasing.
    #[serde(default)]
    pub epsilons: Option<Vec<f64>>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub scheme: SchemeSection,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

impl RunConfig {
    /// Reads a TOML config, or the `config` object of a JSON run manifest.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let mut v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
            let cfg = v
                .get_mut("config")
                .map(serde_json::Value::take)
                .ok_or_else(|| bad(format!("{}: no \"config\" object", path.display())))?;
            serde_json::from_value(cfg).map_err(|e| bad(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| bad(e.to_string()))
    }

    /// Amplitude used by every experiment except the sweep.
    pub fn primary_epsilon(&self) -> f64 {
        self.epsilon
            .or_else(|| self.epsilons.as_ref().and_then(|l| l.first().copied()))
            .unwrap_or(0.0)
    }

    pub fn epsilon_list(&self) -> Vec<f64> {
        match (&self.epsilons, self.epsilon) {
            (Some(l), _) => l.clone(),
            (None, Some(e)) => vec![e],
            (None, None) => vec![0.0],
        }
    }
}

/// A validated configuration with the solver objects built from it.
#[derive(Clone, Debug)]
pub struct Resolved {
    /// The input config with every derived default filled in.
    pub config: RunConfig,
    pub system: ContactSystem,
    pub params: SchemeParams,
    pub grid: PeriodicGrid,
    pub kink_threshold: f64,
    /// Perturbation threshold estimate; `None` when unbounded.
    pub theta_hat: Option<f64>,
}

impl Resolved {
    pub fn new(mut config: RunConfig) -> Result<Self, ConfigError> {
        if !MODEL_NAMES.contains(&config.model.name.as_str()) {
            return Err(bad(format!(
                "unknown model \"{}\"; expected one of {MODEL_NAMES:?}",
                config.model.name
            )));
        }
        let model = builtin_model(&config.model.name, &config.model.params)
            .map_err(|e| bad(format!("model: {e}")))?;
        let lambda = model.lambda();
        let dt = config.scheme.dt;
        if !(lambda * dt < 1.0) {
            return Err(bad(format!(
                "constraint lambda*dt < 1 violated: lambda = {lambda}, dt = {dt}, lambda*dt = {}",
                lambda * dt
            )));
        }
        let pert = match &config.perturbation {
            Some(p) => {
                if !PERTURBATION_NAMES.contains(&p.name.as_str()) {
                    return Err(bad(format!(
                        "unknown perturbation \"{}\"; expected one of {PERTURBATION_NAMES:?}",
                        p.name
                    )));
                }
                Some(builtin_perturbation(&p.name, &p.params).map_err(|e| bad(format!("perturbation: {e}")))?)
            }
            None => None,
        };
        let epsilons = config.epsilon_list();
        let all: Vec<f64> = epsilons.iter().chain(config.epsilon.iter()).copied().collect();
        if let Some(e) = all.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
            return Err(bad(format!("epsilon must be finite and >= 0, got {e}")));
        }
        if epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(bad(format!("epsilons must be strictly decreasing, got {epsilons:?}")));
        }
        let eps_max = all.iter().copied().fold(0.0, f64::max);
        if eps_max > 0.0 && pert.is_none() {
            return Err(bad(format!("epsilon = {eps_max} > 0 requires a [perturbation] section")));
        }
        let theta_hat = pert
            .as_ref()
            .map(|p| theta_proxy(&model, p, config.tolerances.samples, config.seed))
            .filter(|t| t.is_finite());
        if let Some(theta) = theta_hat {
            if eps_max > theta {
                return Err(bad(format!(
                    "constraint epsilon <= theta_hat violated: epsilon = {eps_max}, theta_hat = {theta}"
                )));
            }
        }

        let grid = PeriodicGrid::new(model.dim(), config.grid.nodes).map_err(|e| bad(format!("grid: {e}")))?;
        let potential_bound: f64 = config.model.params.potential.iter().map(|t| t.amplitude.abs()).sum();
        let v_max = config
            .scheme
            .v_max
            .unwrap_or_else(|| default_v_max(potential_bound, lambda, dt));
        config.scheme.v_max = Some(v_max);
        let params = SchemeParams {
            implicit_tol: config.scheme.implicit_tol,
            implicit_max_iter: config.scheme.implicit_max_iter,
            ..SchemeParams::new(dt, v_max, config.scheme.v_count)
        };
        params.validate(lambda).map_err(|e| bad(format!("scheme: {e}")))?;

        let system = ContactSystem::new(model, pert, config.primary_epsilon())
            .map_err(|e| bad(format!("system: {e}")))?
            .with_legendre_tol(config.tolerances.legendre_tol);
        let kink_threshold = config
            .tolerances
            .kink_threshold
            .unwrap_or_else(|| default_kink_threshold(&grid));
        config.tolerances.kink_threshold = Some(kink_threshold);
        if config.epsilons.is_none() && config.epsilon.is_none() {
            config.epsilon = Some(0.0);
        }
        let t = &config.tolerances;
        if !(t.stationary_tol > 0.0 && t.t_max > 0.0) {
            return Err(bad("stationary_tol and t_max must be positive"));
        }
        Ok(Self {
            config,
            system,
            params,
            grid,
            kink_threshold,
            theta_hat,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nname = \"discounted_quadratic\"\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.experiment, None);
        assert_eq!(cfg.grid.nodes, 32);
        let r = Resolved::new(cfg).unwrap();
        assert_eq!(r.config.epsilon, Some(0.0));
        // flat potential, lambda = 1: 2 (0 + 1 + 1)
        assert_eq!(r.params.v_max, 4.0);
        assert_eq!(r.config.scheme.v_max, Some(4.0));
        assert!(r.theta_hat.is_none());
    }

    #[test]
    fn step_constraint_is_named() {
        let cfg = RunConfig::from_toml(&format!("{MINIMAL}[scheme]\ndt = 1.5\n")).unwrap();
        let e = Resolved::new(cfg).unwrap_err();
        assert!(e.0.contains("lambda*dt < 1"), "{e}");
        assert!(e.0.contains("1.5"));
    }

    #[test]
    fn unknown_names_and_fields_are_rejected() {
        let e = Resolved::new(RunConfig::from_toml("[model]\nname = \"nope\"\n").unwrap()).unwrap_err();
        assert!(e.0.contains("unknown model"));
        let text = format!("epsilon = 0.1\n{MINIMAL}[perturbation]\nname = \"bogus\"\n");
        let e = Resolved::new(RunConfig::from_toml(&text).unwrap()).unwrap_err();
        assert!(e.0.contains("unknown perturbation"));
        assert!(RunConfig::from_toml(&format!("{MINIMAL}colour = 1\n")).is_err());
    }

    #[test]
    fn epsilon_needs_perturbation_and_threshold() {
        let e = Resolved::new(RunConfig::from_toml(&format!("epsilon = 0.1\n{MINIMAL}")).unwrap()).unwrap_err();
        assert!(e.0.contains("requires a [perturbation]"));
        let text = format!("epsilon = 50.0\n{MINIMAL}[perturbation]\nname = \"bump_xpu\"\n");
        let e = Resolved::new(RunConfig::from_toml(&text).unwrap()).unwrap_err();
        assert!(e.0.contains("epsilon <= theta_hat"), "{e}");
    }

    #[test]
    fn epsilon_list_precedence() {
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.epsilon_list(), vec![0.0]);
        cfg.epsilons = Some(vec![0.1, 0.05]);
        assert_eq!(cfg.primary_epsilon(), 0.1);
        cfg.epsilon = Some(0.02);
        assert_eq!(cfg.primary_epsilon(), 0.02);
        assert_eq!(cfg.epsilon_list(), vec![0.1, 0.05]);
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in [Experiment::Solve, Experiment::Verify, Experiment::Oracle] {
            let cfg = RunConfig::from_toml(&format!("experiment = \"{e}\"\n{MINIMAL}")).unwrap();
            assert_eq!(cfg.experiment, Some(e));
        }
    }
}
