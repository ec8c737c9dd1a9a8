//! Experiment orchestration and artifact output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use contact_hj::grid::GridFunction;
use contact_hj::semigroup::{deviation_checks, evolve, evolve_steps, oracle_enumerate, SchemeError};
use contact_hj::stability::{
    calibrated_curve_audit, check_positivity_hypothesis, lambda_proximity, lyapunov_probe,
    sample_lambda, Classification, StabilityError,
};
use contact_hj::stationary::{
    epsilon_sweep, perturbed_from_unperturbed, solve_stationary, sweep_is_decreasing,
    write_sweep_csv, FixedPointReport, PerturbedOptions, PerturbedReport, StationaryError,
    StationaryOptions, MIN_WINDOW,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConfigError, Experiment, Resolved, RunConfig};
use crate::verify::{initial_field, verify_suite};

/// Flag values that may override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub experiment: Option<Experiment>,
}

/// Per-purpose seeds derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub run: u64,
    /// Perturbation threshold estimate and Legendre gap samples.
    pub samples: u64,
    /// Random comparison fields in the verify suite.
    pub fields: u64,
    pub probes: u64,
}

impl Seeds {
    pub fn new(run: u64) -> Self {
        Self {
            run,
            samples: run,
            fields: run.wrapping_add(1),
            probes: run.wrapping_add(2),
        }
    }
}

/// Applies flag overrides and resolves the experiment. A flag experiment
/// that disagrees with the config is ignored with a warning.
pub fn prepare(mut config: RunConfig, o: &Overrides) -> Result<(Resolved, Experiment, Vec<String>), ConfigError> {
    let mut warnings = Vec::new();
    if let Some(out) = &o.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    let experiment = match (config.experiment, o.experiment) {
        (Some(c), Some(f)) if c != f => {
            warnings.push(format!(
                "--experiment {f} conflicts with config experiment \"{c}\"; using \"{c}\""
            ));
            c
        }
        (Some(c), _) => c,
        (None, Some(f)) => f,
        (None, None) => {
            return Err(ConfigError(
                "no experiment selected: set `experiment` in the config or pass --experiment".into(),
            ))
        }
    };
    config.experiment = Some(experiment);
    Ok((Resolved::new(config)?, experiment, warnings))
}

pub fn stationary_options(r: &Resolved) -> StationaryOptions {
    StationaryOptions {
        tol: r.config.tolerances.stationary_tol,
        ..StationaryOptions::new(r.config.tolerances.t_max)
    }
}

pub fn perturbed_options(r: &Resolved) -> PerturbedOptions {
    PerturbedOptions {
        stationary: stationary_options(r),
        delta0: r.config.run.delta0,
        enforce_threshold: true,
    }
}

/// Single writer for everything a run produces.
struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn grid(&mut self, name: &str, f: &GridFunction) -> Result<()> {
        let p = self.path(name);
        f.write_csv(fs::File::create(&p)?)?;
        Ok(())
    }

    fn json(&mut self, name: &str, v: &impl Serialize) -> Result<()> {
        let p = self.path(name);
        fs::write(p, serde_json::to_string_pretty(v)? + "\n")?;
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Measured quantities that go into the manifest.
#[derive(Default)]
struct Measured {
    barrier: Option<f64>,
    /// `(delta, t_delta, eps_delta)` per bracket used.
    thresholds: Vec<(f64, Option<f64>, Option<f64>)>,
    falsified: Vec<String>,
    warnings: Vec<String>,
    extra: Value,
}

impl Measured {
    fn perturbed(&mut self, r: &PerturbedReport) {
        self.thresholds.push((r.delta, r.t_delta, r.epsilon_delta));
        for v in &r.violations {
            self.falsified.push(format!(
                "sandwich: {} violated at node {} (step {}, t = {}): {} > {}",
                v.inequality, v.node, v.step, v.t, v.lhs, v.rhs
            ));
        }
        if !r.within_delta {
            self.falsified.push(format!(
                "perturbed: sup |u_eps - u_-| <= delta violated: {} > {} (eps = {})",
                r.deviation, r.delta, r.epsilon
            ));
        }
        if !r.converged() {
            self.falsified.push(format!(
                "perturbed: fixed point not reached within t_max (eps = {}, delta = {})",
                r.epsilon, r.delta
            ));
        }
    }

    fn fixed_point(&mut self, what: &str, r: &FixedPointReport, tol: f64) {
        if !r.converged {
            self.falsified.push(format!(
                "{what}: sup |T_dt u - u| <= {tol} not reached after {} steps (last residual {})",
                r.iterations,
                r.last_residual()
            ));
        }
    }
}

fn fixed_point_summary(r: &FixedPointReport) -> Value {
    json!({
        "iterations": r.iterations,
        "converged": r.converged,
        "last_residual": r.last_residual(),
        "window": r.window,
        "divergence_guard": r.divergence_guard,
    })
}

fn perturbed_summary(r: &PerturbedReport) -> Value {
    json!({
        "epsilon": r.epsilon,
        "delta": r.delta,
        "delta0": r.delta0,
        "t_delta": r.t_delta,
        "epsilon_delta": r.epsilon_delta,
        "deviation": r.deviation,
        "slack": r.slack,
        "within_delta": r.within_delta,
        "bracket_checks": r.bracket_checks,
        "violations": r.violations,
        "fixed_point": r.fixed_point.as_ref().map(fixed_point_summary),
    })
}

/// Outcome of a completed run.
#[derive(Debug)]
pub struct RunSummary {
    pub experiment: Experiment,
    pub output_dir: PathBuf,
    pub files: Vec<String>,
    pub falsified: Vec<String>,
    pub warnings: Vec<String>,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.falsified.is_empty() {
            0
        } else {
            2
        }
    }
}

/// Errors after validation. Configuration problems discovered while running
/// (such as an amplitude above the measured threshold) are reported as
/// configuration errors.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

fn classify(e: anyhow::Error) -> RunError {
    let config_like = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<StationaryError>(),
            Some(StationaryError::EpsilonAboveThreshold { .. } | StationaryError::InvalidArgument(_))
        ) || matches!(
            c.downcast_ref::<SchemeError>(),
            Some(
                SchemeError::OracleTooLarge(_)
                    | SchemeError::NotMultiple { .. }
                    | SchemeError::InvalidParameter(_)
            )
        ) || matches!(c.downcast_ref::<StabilityError>(), Some(StabilityError::InvalidArgument(_)))
    });
    if config_like {
        RunError::Config(format!("{e:#}"))
    } else {
        RunError::Other(e)
    }
}

pub fn execute(r: &Resolved, experiment: Experiment, warnings: Vec<String>) -> Result<RunSummary, RunError> {
    let dir = r.config.output_dir.clone();
    let created = !dir.exists();
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
        .map_err(classify)?;
    let mut art = Artifacts {
        dir: dir.clone(),
        files: Vec::new(),
    };
    let seeds = Seeds::new(r.config.seed);
    let mut m = Measured {
        warnings,
        ..Measured::default()
    };
    let result = match experiment {
        Experiment::Solve => solve(r, &mut art, &mut m),
        Experiment::Evolve => evolve_run(r, &mut art, &mut m),
        Experiment::Perturb => perturb(r, &mut art, &mut m),
        Experiment::Sweep => sweep(r, &mut art, &mut m),
        Experiment::Stability => stability(r, &seeds, &mut art, &mut m),
        Experiment::Audit => audit(r, &mut art, &mut m),
        Experiment::Verify => verify(r, &seeds, &mut art, &mut m),
        Experiment::Oracle => oracle(r, &mut art, &mut m),
    };
    result.map_err(classify)?;
    write_manifest(r, experiment, &seeds, created, &mut art, &m).map_err(classify)?;
    Ok(RunSummary {
        experiment,
        output_dir: dir,
        files: art.files,
        falsified: m.falsified,
        warnings: m.warnings,
    })
}

fn write_manifest(
    r: &Resolved,
    experiment: Experiment,
    seeds: &Seeds,
    created: bool,
    art: &mut Artifacts,
    m: &Measured,
) -> Result<()> {
    let t = &r.config.tolerances;
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": experiment,
        "config": r.config,
        "tolerances": {
            "stationary_tol": t.stationary_tol,
            "stationary_window_min": MIN_WINDOW,
            "implicit_tol": r.params.implicit_tol,
            "implicit_max_iter": r.params.implicit_max_iter,
            "legendre_tol": t.legendre_tol,
            "kink_threshold": r.kink_threshold,
            "hypothesis_margin": t.hypothesis_margin,
            "t_max": t.t_max,
        },
        "theta_hat": r.theta_hat,
        "barrier": m.barrier,
        "thresholds": m.thresholds.iter().map(|(d, td, ed)| json!({
            "delta": d, "t_delta": td, "epsilon_delta": ed,
        })).collect::<Vec<_>>(),
        "seeds": seeds,
        "output_dir_created": created,
        "outputs": art.files,
        "results": m.extra,
        "falsified": m.falsified,
        "warnings": m.warnings,
    });
    art.json("manifest.json", &manifest)
}

fn solve(r: &Resolved, art: &mut Artifacts, m: &mut Measured) -> Result<()> {
    let phi = initial_field(r)?;
    let (u, rep) = solve_stationary(&phi, &r.system, &r.params, &stationary_options(r))?;
    art.grid("solution.csv", &u)?;
    art.csv(
        "residuals.csv",
        &["step", "residual"],
        rep.residual_history
            .iter()
            .enumerate()
            .map(|(k, v)| vec![(k + 1).to_string(), contact_hj::grid::fmt_real(*v)]),
    )?;
    m.fixed_point("solve", &rep, r.config.tolerances.stationary_tol);
    m.extra = fixed_point_summary(&rep);
    Ok(())
}

fn evolve_run(r: &Resolved, art: &mut Artifacts, m: &mut Measured) -> Result<()> {
    let phi = initial_field(r)?;
    let run = &r.config.run;
    let trace = evolve(&phi, run.t_final, &r.system, &r.params, run.snapshot_stride)?;
    let label = r.system.model().label().to_string();
    for p in trace.export(&art.dir.join("trace"), &r.params, &label, r.system.epsilon())? {
        art.files.push(format!("trace/{}", p.file_name().unwrap().to_string_lossy()));
    }
    let times: Vec<f64> = trace.times[1..].to_vec();
    let devs = if r.system.is_perturbed() {
        deviation_checks(&phi, &times, &r.system, &r.params)?
    } else {
        Vec::new()
    };
    for d in devs.iter().filter(|d| !d.holds()) {
        m.falsified.push(format!(
            "evolve: sup |T^eps_t phi - T_t phi| <= (eps/lambda)(e^(lambda t) - 1) violated at t = {}: {} > {} + {}",
            d.t, d.measured, d.bound, d.slack
        ));
    }
    art.csv(
        "deviation.csv",
        &["t", "measured", "bound", "holds"],
        devs.iter().map(|d| {
            vec![
                contact_hj::grid::fmt_real(d.t),
                contact_hj::grid::fmt_real(d.measured),
                contact_hj::grid::fmt_real(d.bound),
                d.holds().to_string(),
            ]
        }),
    )?;
    m.extra = json!({
        "snapshots": trace.snapshots.len(),
        "implicit_iterations": trace.implicit_iterations.iter().sum::<usize>(),
    });
    Ok(())
}

fn unperturbed_fixed_point(r: &Resolved, m: &mut Measured) -> Result<(GridFunction, FixedPointReport)> {
    let phi = initial_field(r)?;
    let base = r.system.without_perturbation();
    let (u, rep) = solve_stationary(&phi, &base, &r.params, &stationary_options(r))?;
    m.fixed_point("unperturbed solve", &rep, r.config.tolerances.stationary_tol);
    Ok((u, rep))
}

fn default_delta(r: &Resolved) -> f64 {
    let eps = r.system.epsilon();
    r.config.run.delta.unwrap_or(if eps > 0.0 {
        3.0 * eps / r.system.lambda()
    } else {
        r.config.run.probe_delta
    })
}

fn perturb(r: &Resolved, art: &mut Artifacts, m: &mut Measured) -> Result<()> {
    let (u_minus, fp) = unperturbed_fixed_point(r, m)?;
    let delta = default_delta(r);
    let (u_eps, rep) = perturbed_from_unperturbed(&u_minus, &r.system, delta, &r.params, &perturbed_options(r))?;
    art.grid("u_minus.csv", &u_minus)?;
    art.grid("u_eps.csv", &u_eps)?;
    m.perturbed(&rep);
    m.extra = json!({
        "unperturbed": fixed_point_summary(&fp),
        "perturbed": perturbed_summary(&rep),
    });
    Ok(())
}

fn sweep(r: &Resolved, art: &mut Artifacts, m: &mut Measured) -> Result<()> {
    let (u_minus, _) = unperturbed_fixed_point(r, m)?;
    let eps = r.config.epsilon_list();
    let rows = epsilon_sweep(
        &u_minus,
        &r.system,
        &eps,
        r.config.run.delta_factor,
        &r.params,
        &perturbed_options(r),
    )?;
    let p = art.path("sweep.csv");
    write_sweep_csv(&rows, fs::File::create(p)?)?;
    for row in &rows {
        m.thresholds.push((row.delta, row.t_delta, row.epsilon_delta));
        if !row.sandwich_holds {
            m.falsified.push(format!("sweep: bracket ordering violated at eps = {}", row.epsilon));
        }
        if !row.converged {
            m.falsified.push(format!("sweep: fixed point not reached at eps = {}", row.epsilon));
        }
    }
    if !sweep_is_decreasing(&rows) {
        let devs: Vec<String> = rows.iter().map(|w| format!("{}:{}", w.epsilon, w.deviation_sup)).collect();
        m.falsified.push(format!(
            "sweep: deviation_sup strictly decreasing in eps violated (eps:deviation = {})",
            devs.join(", ")
        ));
    }
    m.extra = json!({ "rows": rows });
    Ok(())
}

fn stability(r: &Resolved, seeds: &Seeds, art: &mut Artifacts, m: &mut Measured) -> Result<()> {
    let (u_minus, _) = unperturbed_fixed_point(r, m)?;
    let run = &r.config.run;
    let (u_eps, pert) = if r.system.is_perturbed() {
        let (u, rep) =
            perturbed_from_unperturbed(&u_minus, &r.system, default_delta(r), &r.params, &perturbed_options(r))?;
        m.perturbed(&rep);
        (u, Some(rep))
    } else {
        (u_minus.clone(), None)
    };
    let sample = sample_lambda(&u_eps, &r.system, r.kink_threshold);
    let hyp = check_positivity_hypothesis(&sample, r.config.tolerances.hypothesis_margin)?;
    let probe = lyapunov_probe(
        &u_eps,
        &r.system,
        run.probe_delta,
        run.probes,
        run.horizon,
        &r.params,
        seeds.probes,
        run.record_stride,
    )?;
    let p = art.path("decay.csv");
    probe.write_decay_csv(fs::File::create(p)?)?;
    art.grid("u_eps.csv", &u_eps)?;
    let proximity = if pert.is_some() {
        let zero = sample_lambda(&u_minus, &r.system.without_perturbation(), r.kink_threshold);
        Some(lambda_proximity(&sample, &zero)?)
    } else {
        None
    };
    match probe.classification {
        Classification::EscapeDetected if hyp.holds => m.falsified.push(format!(
            "stability: min H_u = {} > margin {} on sampled jets, yet a probe left the 2 delta ball (delta = {})",
            sample.min_hu, r.config.tolerances.hypothesis_margin, run.probe_delta
        )),
        Classification::AsymptoticallyStableWithinHorizon => {}
        c => m.warnings.push(format!("stability: classification {c:?} at horizon {}", run.horizon)),
    }
    if sample.degenerate {
        m.warnings.push("stability: fewer than 10% of nodes passed the kink screen".into());
    }
    m.extra = json!({
        "hypothesis": hyp,
        "min_hu": sample.min_hu,
        "sampled_jets": sample.entries.len(),
        "nodes": sample.nodes_total,
        "degenerate": sample.degenerate,
        "classification": probe.classification,
        "final_distances": probe.final_distances,
        "final_spread": probe.final_spread,
        "radii": probe.radii,
        "lambda_proximity": proximity,
        "perturbed": pert.as_ref().map(perturbed_summary),
    });
    Ok(())
}

fn audit(r: &Resolved, art: &mut Artifacts, m: &mut Measured) -> Result<()> {
    let phi = initial_field(r)?;
    let (u, fp) = solve_stationary(&phi, &r.system, &r.params, &stationary_options(r))?;
    m.fixed_point("solve", &fp, r.config.tolerances.stationary_tol);
    let run = &r.config.run;
    let node = r.grid.nearest_node(&[run.audit_x, 0.0]);
    let rep = calibrated_curve_audit(&u, node, run.t_back, &r.system, run.dt_ode, r.kink_threshold)?;
    if rep.max_defect() > run.audit_tol {
        m.falsified.push(format!(
            "audit: calibration defect <= audit_tol violated from node {node}: {} > {} \
             (hamiltonian {}, domination {}, value {})",
            rep.max_defect(),
            run.audit_tol,
            rep.hamiltonian_defect,
            rep.domination_defect,
            rep.value_defect
        ));
    }
    art.grid("solution.csv", &u)?;
    art.json("audit.json", &rep)?;
    m.extra = json!({ "audit": rep, "max_defect": rep.max_defect(), "fixed_point": fixed_point_summary(&fp) });
    Ok(())
}

fn verify(r: &Resolved, seeds: &Seeds, art: &mut Artifacts, m: &mut Measured) -> Result<()> {
    let table = verify_suite(r, seeds)?;
    let p = art.path("verify.csv");
    table.write_csv(fs::File::create(p)?)?;
    art.json("verify.json", &table)?;
    m.barrier = Some(table.barrier);
    m.thresholds.push((table.delta, table.t_delta, table.epsilon_delta));
    m.falsified.extend(table.failures().iter().map(|c| c.describe()));
    m.extra = json!({
        "passed": table.checks.iter().filter(|c| c.pass).count(),
        "total": table.checks.len(),
    });
    Ok(())
}

fn oracle(r: &Resolved, art: &mut Artifacts, m: &mut Measured) -> Result<()> {
    let phi = initial_field(r)?;
    let steps = r.config.run.oracle_steps;
    let dp = evolve_steps(&phi, steps, &r.system, &r.params)?;
    let brute = oracle_enumerate(&phi, steps, &r.system, &r.params)?;
    let diff = dp.sup_distance(&brute)?;
    let bound = steps as f64 * r.params.implicit_tol;
    if diff > bound {
        m.falsified.push(format!(
            "oracle: sup |scheme - path enumeration| <= steps implicit_tol violated: {diff} > {bound} ({steps} steps)"
        ));
    }
    art.grid("scheme.csv", &dp)?;
    art.grid("oracle.csv", &brute)?;
    m.extra = json!({ "steps": steps, "sup_difference": diff, "bound": bound });
    Ok(())
}

/// Loads, validates and runs a config file.
pub fn run(config: &Path, o: &Overrides) -> Result<RunSummary, RunError> {
    let cfg = RunConfig::load(config).map_err(|e| RunError::Config(e.0))?;
    let (resolved, experiment, warnings) = prepare(cfg, o).map_err(|e| RunError::Config(e.0))?;
    execute(&resolved, experiment, warnings)
}
