//! Long-time fixed points of the discrete semigroups, the perturbed
//! solutions obtained by relaxing an unperturbed one, epsilon sweeps, and
//! one-sided admissibility certificates.

use std::collections::VecDeque;
use std::f64::consts::TAU;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{fmt_real, GridError, GridFunction, PeriodicGrid, Point};
use crate::model::ContactSystem;
use crate::semigroup::{lax_oleinik_step, SchemeError, SchemeParams};

pub const STATIONARY_TOL: f64 = 1e-8;
pub const MIN_WINDOW: usize = 50;

#[derive(Debug, Error)]
pub enum StationaryError {
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("divergence at t={t}: sup |u| = {value} exceeds guard {guard}")]
    Diverged { t: f64, value: f64, guard: f64 },
    #[error("epsilon {epsilon} exceeds the admissible threshold {epsilon_delta} for delta {delta}")]
    EpsilonAboveThreshold {
        epsilon: f64,
        epsilon_delta: f64,
        delta: f64,
    },
    #[error("unperturbed relaxation to within {target} not observed before t={t_max}")]
    RelaxationNotObserved { target: f64, t_max: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StationaryOptions {
    pub tol: f64,
    pub t_max: f64,
    /// Fixed window length in snapshots; `None` uses the last 20% of
    /// iterations with at least `MIN_WINDOW` snapshots.
    pub window: Option<usize>,
}

impl StationaryOptions {
    pub fn new(t_max: f64) -> Self {
        Self {
            tol: STATIONARY_TOL,
            t_max,
            window: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub iterations: usize,
    /// `sup |T_dt u - u|` after each step.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub window: usize,
    pub final_state: GridFunction,
    pub liminf_envelope: GridFunction,
    pub divergence_guard: f64,
}

impl FixedPointReport {
    pub fn last_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(0.0)
    }
}

/// Sliding window of recent iterates with the convergence rule shared by
/// every fixed-point loop in this module.
struct WindowTracker {
    tol: f64,
    fixed_window: Option<usize>,
    snapshots: VecDeque<GridFunction>,
    residuals: Vec<f64>,
}

impl WindowTracker {
    fn new(initial: GridFunction, tol: f64, fixed_window: Option<usize>) -> Self {
        let mut snapshots = VecDeque::new();
        snapshots.push_back(initial);
        Self {
            tol,
            fixed_window,
            snapshots,
            residuals: Vec::new(),
        }
    }

    fn current(&self) -> &GridFunction {
        self.snapshots.back().unwrap()
    }

    fn capacity(&self) -> usize {
        let k = self.residuals.len();
        self.fixed_window
            .unwrap_or_else(|| MIN_WINDOW.max((0.2 * k as f64).ceil() as usize))
            .max(1)
    }

    fn push(&mut self, next: GridFunction) -> Result<f64, GridError> {
        let r = next.sup_distance(self.current())?;
        self.residuals.push(r);
        self.snapshots.push_back(next);
        while self.snapshots.len() > self.capacity() {
            self.snapshots.pop_front();
        }
        Ok(r)
    }

    fn oscillation(&self) -> f64 {
        let n = self.current().len();
        (0..n)
            .map(|i| {
                let (lo, hi) = self.snapshots.iter().fold(
                    (f64::INFINITY, f64::NEG_INFINITY),
                    |(lo, hi), s| (lo.min(s.value(i)), hi.max(s.value(i))),
                );
                hi - lo
            })
            .fold(0.0, f64::max)
    }

    fn converged(&self) -> bool {
        match self.residuals.last() {
            Some(&r) => r <= 0.25 * self.tol && self.oscillation() <= 0.25 * self.tol,
            None => false,
        }
    }

    fn envelope(&self) -> Result<GridFunction, GridError> {
        let cur = self.current();
        let values = (0..cur.len())
            .map(|i| {
                self.snapshots
                    .iter()
                    .map(|s| s.value(i))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        cur.with_values(values)
    }

    fn into_report(self, guard: f64) -> Result<FixedPointReport, GridError> {
        let converged = self.converged();
        let liminf_envelope = self.envelope()?;
        Ok(FixedPointReport {
            iterations: self.residuals.len(),
            converged,
            window: self.snapshots.len(),
            final_state: self.current().clone(),
            liminf_envelope,
            residual_history: self.residuals,
            divergence_guard: guard,
        })
    }
}

/// Divergence guard `10 (1 + sup|phi0| + (eps/lambda) e^{lambda t_max})`.
pub fn divergence_guard(initial_sup: f64, epsilon: f64, lambda: f64, t_max: f64) -> f64 {
    10.0 * (1.0 + initial_sup + epsilon / lambda * (lambda * t_max).exp())
}

/// Iterates the step from `phi0` until the per-step residual and the
/// oscillation over the trailing window both fall below `tol / 4`, or until
/// `t_max`. Returns the nodewise minimum over the window.
pub fn solve_stationary(
    phi0: &GridFunction,
    system: &ContactSystem,
    params: &SchemeParams,
    opts: &StationaryOptions,
) -> Result<(GridFunction, FixedPointReport), StationaryError> {
    params.validate(system.lambda())?;
    if !(opts.tol > 0.0) {
        return Err(StationaryError::InvalidArgument("tol must be positive".into()));
    }
    let max_steps = params.steps_for(opts.t_max)?;
    let guard = divergence_guard(phi0.max_abs(), system.epsilon(), system.lambda(), opts.t_max);
    let mut tracker = WindowTracker::new(phi0.clone(), opts.tol, opts.window);
    for k in 1..=max_steps {
        let next = lax_oleinik_step(tracker.current(), system, params)?;
        let sup = next.max_abs();
        if !(sup <= guard) {
            return Err(StationaryError::Diverged {
                t: k as f64 * params.dt,
                value: sup,
                guard,
            });
        }
        tracker.push(next)?;
        if tracker.converged() {
            break;
        }
    }
    let report = tracker.into_report(guard)?;
    Ok((report.liminf_envelope.clone(), report))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SandwichViolation {
    pub step: usize,
    pub t: f64,
    pub inequality: String,
    pub node: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbedOptions {
    pub stationary: StationaryOptions,
    /// Stability basin radius if known; `None` treats it as unbounded.
    pub delta0: Option<f64>,
    /// Reject `eps > eps_delta` instead of only reporting it.
    pub enforce_threshold: bool,
}

impl PerturbedOptions {
    pub fn new(t_max: f64) -> Self {
        Self {
            stationary: StationaryOptions::new(t_max),
            delta0: None,
            enforce_threshold: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbedReport {
    pub epsilon: f64,
    pub delta: f64,
    pub delta0: Option<f64>,
    /// Measured unperturbed relaxation time.
    pub t_delta: Option<f64>,
    /// `lambda min(delta, delta0) / (2 (e^{lambda t_delta} - 1))`.
    pub epsilon_delta: Option<f64>,
    pub fixed_point: Option<FixedPointReport>,
    pub deviation: f64,
    pub slack: f64,
    pub within_delta: bool,
    pub bracket_checks: usize,
    pub violations: Vec<SandwichViolation>,
}

impl PerturbedReport {
    pub fn converged(&self) -> bool {
        self.fixed_point.as_ref().is_none_or(|r| r.converged)
    }

    pub fn sandwich_holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Smallest multiple of `dt` with `sup |T_t(u_- +- m) - u_-| <= m / 2`
/// under the unperturbed semigroup.
pub fn relaxation_time(
    u_minus: &GridFunction,
    system: &ContactSystem,
    m: f64,
    params: &SchemeParams,
    t_max: f64,
) -> Result<f64, StationaryError> {
    let base = system.without_perturbation();
    let max_steps = params.steps_for(t_max)?;
    let mut up = u_minus.map(|u| u + m)?;
    let mut down = u_minus.map(|u| u - m)?;
    for k in 1..=max_steps {
        up = lax_oleinik_step(&up, &base, params)?;
        down = lax_oleinik_step(&down, &base, params)?;
        if up.sup_distance(u_minus)? <= 0.5 * m && down.sup_distance(u_minus)? <= 0.5 * m {
            return Ok(k as f64 * params.dt);
        }
    }
    Err(StationaryError::RelaxationNotObserved {
        target: 0.5 * m,
        t_max,
    })
}

pub fn epsilon_delta(lambda: f64, m: f64, t_delta: f64) -> f64 {
    lambda * m / (2.0 * (lambda * t_delta).exp_m1())
}

fn record_order(
    violations: &mut Vec<SandwichViolation>,
    step: usize,
    dt: f64,
    inequality: &str,
    lower: &GridFunction,
    upper: &GridFunction,
    slack: f64,
) {
    for i in 0..lower.len() {
        if lower.value(i) > upper.value(i) + slack {
            violations.push(SandwichViolation {
                step,
                t: step as f64 * dt,
                inequality: inequality.to_string(),
                node: i,
                lhs: lower.value(i),
                rhs: upper.value(i),
            });
            return;
        }
    }
}

/// Relaxes the unperturbed solution `u_minus` under the perturbed semigroup
/// while monitoring the bracket `u_- - delta <= T^eps_t u_- <= u_- + delta`
/// and the ordered chain between the evolved brackets.
pub fn perturbed_from_unperturbed(
    u_minus: &GridFunction,
    system: &ContactSystem,
    delta: f64,
    params: &SchemeParams,
    opts: &PerturbedOptions,
) -> Result<(GridFunction, PerturbedReport), StationaryError> {
    params.validate(system.lambda())?;
    if !(delta > 0.0) {
        return Err(StationaryError::InvalidArgument("delta must be positive".into()));
    }
    let lambda = system.lambda();
    let eps = system.epsilon();
    if !system.is_perturbed() {
        let report = PerturbedReport {
            epsilon: eps,
            delta,
            delta0: opts.delta0,
            t_delta: None,
            epsilon_delta: None,
            fixed_point: None,
            deviation: 0.0,
            slack: 0.0,
            within_delta: true,
            bracket_checks: 0,
            violations: Vec::new(),
        };
        return Ok((u_minus.clone(), report));
    }

    let m = opts.delta0.map_or(delta, |d0| d0.min(delta));
    let t_delta = relaxation_time(u_minus, system, m, params, opts.stationary.t_max)?;
    let eps_delta = epsilon_delta(lambda, m, t_delta);
    if opts.enforce_threshold && eps > eps_delta {
        return Err(StationaryError::EpsilonAboveThreshold {
            epsilon: eps,
            epsilon_delta: eps_delta,
            delta,
        });
    }
    let k_delta = params.steps_for(t_delta)?;
    let max_steps = params.steps_for(opts.stationary.t_max)?;
    let per_step = params.implicit_tol;

    let upper0 = u_minus.map(|u| u + delta)?;
    let lower0 = u_minus.map(|u| u - delta)?;
    let guard = divergence_guard(
        upper0.max_abs().max(lower0.max_abs()),
        eps,
        lambda,
        opts.stationary.t_max,
    );
    let mut tracker = WindowTracker::new(u_minus.clone(), opts.stationary.tol, opts.stationary.window);
    let mut upper = upper0.clone();
    let mut lower = lower0.clone();
    let mut prev_upper = upper0.clone();
    let mut prev_lower = lower0.clone();
    let mut violations = Vec::new();
    let mut bracket_checks = 0;
    let mut steps_done = 0;

    for k in 1..=max_steps {
        let (center, (up, low)) = rayon::join(
            || lax_oleinik_step(tracker.current(), system, params),
            || {
                rayon::join(
                    || lax_oleinik_step(&upper, system, params),
                    || lax_oleinik_step(&lower, system, params),
                )
            },
        );
        let center = center?;
        upper = up?;
        lower = low?;
        steps_done = k;
        let sup = center.max_abs();
        if !(sup <= guard) {
            return Err(StationaryError::Diverged {
                t: k as f64 * params.dt,
                value: sup,
                guard,
            });
        }
        let slack = per_step * k as f64;
        record_order(&mut violations, k, params.dt, "T u_- <= u_- + delta", &center, &upper0, slack);
        record_order(&mut violations, k, params.dt, "u_- - delta <= T u_-", &lower0, &center, slack);
        if k % k_delta == 0 {
            bracket_checks += 1;
            let dt = params.dt;
            record_order(&mut violations, k, dt, "T u^delta <= u^delta", &upper, &upper0, slack);
            record_order(&mut violations, k, dt, "T u_delta <= T u^delta", &lower, &upper, slack);
            record_order(&mut violations, k, dt, "u_delta <= T u_delta", &lower0, &lower, slack);
            let step_slack = per_step * k_delta as f64;
            record_order(&mut violations, k, dt, "T u^delta nonincreasing", &upper, &prev_upper, step_slack);
            record_order(&mut violations, k, dt, "T u_delta nondecreasing", &prev_lower, &lower, step_slack);
            prev_upper = upper.clone();
            prev_lower = lower.clone();
        }
        tracker.push(center)?;
        if tracker.converged() && bracket_checks > 0 {
            break;
        }
    }

    let fixed_point = tracker.into_report(guard)?;
    let solution = fixed_point.liminf_envelope.clone();
    let deviation = solution.sup_distance(u_minus)?;
    let slack = per_step * steps_done as f64 + opts.stationary.tol;
    let report = PerturbedReport {
        epsilon: eps,
        delta,
        delta0: opts.delta0,
        t_delta: Some(t_delta),
        epsilon_delta: Some(eps_delta),
        within_delta: deviation <= delta + slack,
        fixed_point: Some(fixed_point),
        deviation,
        slack,
        bracket_checks,
        violations,
    };
    Ok((solution, report))
}

/// Largest amplitude `a` in `[lo, hi]`, found by bisection, for which the
/// constant and first-mode probes `u +- a`, `u +- a sin(2 pi x_1)` all
/// return to within `1e-3 a` of `u` by `horizon`. `None` if `lo` fails.
pub fn probe_basin_radius(
    u: &GridFunction,
    system: &ContactSystem,
    params: &SchemeParams,
    lo: f64,
    hi: f64,
    horizon: f64,
    bisections: usize,
) -> Result<Option<f64>, StationaryError> {
    let steps = params.steps_for(horizon)?;
    let returns = |a: f64| -> Result<bool, StationaryError> {
        let shapes: [&(dyn Fn(&Point) -> f64 + Sync); 4] = [
            &|_| 1.0,
            &|_| -1.0,
            &|x| (TAU * x[0]).sin(),
            &|x| -(TAU * x[0]).sin(),
        ];
        for shape in shapes {
            let grid = *u.grid();
            let mut phi = u.zip_with(&GridFunction::from_fn(grid, |x| a * shape(x))?, |p, q| p + q)?;
            for _ in 0..steps {
                phi = lax_oleinik_step(&phi, system, params)?;
            }
            if phi.sup_distance(u)? > 1e-3 * a {
                return Ok(false);
            }
        }
        Ok(true)
    };
    if !returns(lo)? {
        return Ok(None);
    }
    if returns(hi)? {
        return Ok(Some(hi));
    }
    let (mut good, mut bad) = (lo, hi);
    for _ in 0..bisections {
        let mid = 0.5 * (good + bad);
        if returns(mid)? {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Ok(Some(good))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub delta: f64,
    pub deviation_sup: f64,
    pub steps: usize,
    pub converged: bool,
    pub t_delta: Option<f64>,
    pub epsilon_delta: Option<f64>,
    pub sandwich_holds: bool,
}

/// Perturbed solutions for each `eps`, with `delta = delta_factor * eps / lambda`.
/// Rows are independent and run concurrently.
pub fn epsilon_sweep(
    u_minus: &GridFunction,
    system: &ContactSystem,
    epsilons: &[f64],
    delta_factor: f64,
    params: &SchemeParams,
    opts: &PerturbedOptions,
) -> Result<Vec<SweepRow>, StationaryError> {
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(StationaryError::InvalidArgument(
            "epsilon list must be strictly decreasing".into(),
        ));
    }
    epsilons
        .par_iter()
        .map(|&eps| {
            let sys = system.with_epsilon(eps).map_err(SchemeError::from)?;
            let delta = if eps > 0.0 {
                delta_factor * eps / system.lambda()
            } else {
                1.0
            };
            let (_, r) = perturbed_from_unperturbed(u_minus, &sys, delta, params, opts)?;
            Ok(SweepRow {
                epsilon: eps,
                delta,
                deviation_sup: r.deviation,
                steps: r.fixed_point.as_ref().map_or(0, |f| f.iterations),
                converged: r.converged(),
                t_delta: r.t_delta,
                epsilon_delta: r.epsilon_delta,
                sandwich_holds: r.sandwich_holds(),
            })
        })
        .collect()
}

/// Whether the deviation column strictly decreases down the table.
pub fn sweep_is_decreasing(rows: &[SweepRow]) -> bool {
    rows.windows(2).all(|w| w[1].deviation_sup < w[0].deviation_sup)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<(), StationaryError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epsilon", "deviation_sup", "steps", "converged"])?;
    for r in rows {
        w.write_record([
            fmt_real(r.epsilon),
            fmt_real(r.deviation_sup),
            r.steps.to_string(),
            r.converged.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Truncated Fourier function `a0 + sum_k a_k cos(2 pi k.x) + b_k sin(2 pi k.x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierWitness {
    pub dim: usize,
    pub degree: usize,
    pub constant: f64,
    pub wavevectors: Vec<[i32; 2]>,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl FourierWitness {
    /// Zero function on the family of the given degree. In 2-D the
    /// wavevectors cover a half-plane of `[-d, d]^2`.
    pub fn zero(dim: usize, degree: usize) -> Self {
        let d = degree as i32;
        let mut wavevectors = Vec::new();
        match dim {
            1 => wavevectors.extend((1..=d).map(|k| [k, 0])),
            _ => {
                for k1 in 0..=d {
                    for k2 in -d..=d {
                        if k1 > 0 || k2 > 0 {
                            wavevectors.push([k1, k2]);
                        }
                    }
                }
            }
        }
        let n = wavevectors.len();
        Self {
            dim,
            degree,
            constant: 0.0,
            wavevectors,
            cos: vec![0.0; n],
            sin: vec![0.0; n],
        }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self {
            constant: c,
            ..Self::zero(dim, 0)
        }
    }

    fn coefficient_count(&self) -> usize {
        1 + 2 * self.wavevectors.len()
    }

    fn coefficient(&self, i: usize) -> f64 {
        let n = self.wavevectors.len();
        match i {
            0 => self.constant,
            i if i <= n => self.cos[i - 1],
            i => self.sin[i - 1 - n],
        }
    }

    fn set_coefficient(&mut self, i: usize, value: f64) {
        let n = self.wavevectors.len();
        match i {
            0 => self.constant = value,
            i if i <= n => self.cos[i - 1] = value,
            i => self.sin[i - 1 - n] = value,
        }
    }

    /// Embeds `self` into the family of a higher degree.
    pub fn lift(&self, degree: usize) -> Self {
        let mut out = Self::zero(self.dim, degree.max(self.degree));
        out.constant = self.constant;
        for (j, k) in self.wavevectors.iter().enumerate() {
            if let Some(pos) = out.wavevectors.iter().position(|w| w == k) {
                out.cos[pos] = self.cos[j];
                out.sin[pos] = self.sin[j];
            }
        }
        out
    }

    /// Value and gradient at `x`.
    pub fn eval(&self, x: &Point) -> (f64, Point) {
        let mut value = self.constant;
        let mut grad = [0.0; 2];
        for (j, k) in self.wavevectors.iter().enumerate() {
            let kx = k[0] as f64 * x[0] + k[1] as f64 * x[1];
            let (s, c) = (TAU * kx).sin_cos();
            value += self.cos[j] * c + self.sin[j] * s;
            let slope = TAU * (self.sin[j] * c - self.cos[j] * s);
            grad[0] += slope * k[0] as f64;
            grad[1] += slope * k[1] as f64;
        }
        (value, grad)
    }

    /// `(sup, inf)` over grid nodes of `H(x, Dw(x), w(x))`.
    pub fn hamiltonian_range(&self, system: &ContactSystem, grid: &PeriodicGrid) -> (f64, f64) {
        (0..grid.len())
            .map(|i| {
                let x = grid.point(i);
                let (w, p) = self.eval(&x);
                system.hamiltonian(&x, &p, w)
            })
            .fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), h| {
                (hi.max(h), lo.min(h))
            })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdmissibilityCertificate {
    /// `sup_x H(x, Dw1, w1)`: an upper bound on the inf-sup value.
    pub cl_upper: f64,
    /// `inf_x H(x, Dw2, w2)`: a lower bound on the sup-inf value.
    pub cr_lower: f64,
    pub cl_witness: FourierWitness,
    pub cr_witness: FourierWitness,
    pub degree: usize,
    pub evaluations: usize,
    pub grid: PeriodicGrid,
}

impl AdmissibilityCertificate {
    /// Zero lies between the certified bounds.
    pub fn zero_admissible(&self) -> bool {
        self.cl_upper <= 0.0 && 0.0 <= self.cr_lower
    }

    /// Re-evaluates both witnesses.
    pub fn recompute(&self, system: &ContactSystem) -> (f64, f64) {
        (
            self.cl_witness.hamiltonian_range(system, &self.grid).0,
            self.cr_witness.hamiltonian_range(system, &self.grid).1,
        )
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CertificateSearch {
    /// Evaluations per degree and per side.
    pub budget: usize,
    pub coefficient_bound: f64,
    pub initial_step: f64,
    pub min_step: f64,
}

impl Default for CertificateSearch {
    fn default() -> Self {
        Self {
            budget: 2000,
            coefficient_bound: 10.0,
            initial_step: 1.0,
            min_step: 1e-6,
        }
    }
}

/// Compass search minimizing `objective` over clamped coefficients.
fn compass_search(
    start: FourierWitness,
    objective: &dyn Fn(&FourierWitness) -> f64,
    search: &CertificateSearch,
    evaluations: &mut usize,
) -> (FourierWitness, f64) {
    let mut best = start;
    let mut best_val = objective(&best);
    *evaluations += 1;
    let mut used = 1;
    let mut step = search.initial_step;
    let bound = search.coefficient_bound;
    while step >= search.min_step && used < search.budget {
        let mut improved = false;
        'coords: for i in 0..best.coefficient_count() {
            for sign in [1.0, -1.0] {
                if used >= search.budget {
                    break 'coords;
                }
                let current = best.coefficient(i);
                let trial_value = (current + sign * step).clamp(-bound, bound);
                if trial_value == current {
                    continue;
                }
                let mut trial = best.clone();
                trial.set_coefficient(i, trial_value);
                let val = objective(&trial);
                used += 1;
                *evaluations += 1;
                if val < best_val {
                    best = trial;
                    best_val = val;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (best, best_val)
}

/// One-sided certificates from derivative-free searches over Fourier
/// families of degree `0..=degree`, each degree warm-started from the
/// previous optimum so the bounds improve weakly with degree.
pub fn admissibility_certificates(
    system: &ContactSystem,
    grid: &PeriodicGrid,
    degree: usize,
    search: &CertificateSearch,
) -> AdmissibilityCertificate {
    let dim = grid.dim();
    let sup_h = |w: &FourierWitness| w.hamiltonian_range(system, grid).0;
    let neg_inf_h = |w: &FourierWitness| -w.hamiltonian_range(system, grid).1;
    let mut evaluations = 0;
    let mut cl = FourierWitness::zero(dim, 0);
    let mut cr = FourierWitness::zero(dim, 0);
    for d in 0..=degree {
        cl = compass_search(cl.lift(d), &sup_h, search, &mut evaluations).0;
        cr = compass_search(cr.lift(d), &neg_inf_h, search, &mut evaluations).0;
    }
    AdmissibilityCertificate {
        cl_upper: cl.hamiltonian_range(system, grid).0,
        cr_lower: cr.hamiltonian_range(system, grid).1,
        cl_witness: cl,
        cr_witness: cr,
        degree,
        evaluations,
        grid: *grid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, builtin_perturbation, ModelParams, PerturbationParams};

    fn flat() -> ContactSystem {
        ContactSystem::unperturbed(
            builtin_model("discounted_quadratic", &ModelParams::default()).unwrap(),
        )
    }

    fn wide() -> PerturbationParams {
        PerturbationParams {
            p_plateau: 20.0,
            p_support: 25.0,
            u_plateau: 5.0,
            u_support: 6.0,
            ..PerturbationParams::default()
        }
    }

    fn perturbed(name: &str, eps: f64) -> ContactSystem {
        let p = builtin_perturbation(name, &wide()).unwrap();
        ContactSystem::new(flat().model().clone(), Some(p), eps).unwrap()
    }

    #[test]
    fn decays_to_zero_with_geometric_residuals() {
        let g = PeriodicGrid::new(1, 16).unwrap();
        let params = SchemeParams::new(0.1, 2.0, 9);
        let phi = GridFunction::constant(g, 0.7).unwrap();
        let (u, report) = solve_stationary(&phi, &flat(), &params, &StationaryOptions::new(60.0)).unwrap();
        assert!(report.converged);
        assert!(report.last_residual() <= STATIONARY_TOL);
        assert!(u.max_abs() <= STATIONARY_TOL);
        for w in report.residual_history.windows(2).take(20) {
            assert!((w[1] / w[0] - 1.0 / 1.1).abs() < 1e-9);
        }
        let snaps = report.window;
        assert!(snaps >= MIN_WINDOW);
        // persists under further steps
        let mut v = u.clone();
        for _ in 0..10 {
            let next = lax_oleinik_step(&v, &flat(), &params).unwrap();
            assert!(next.sup_distance(&v).unwrap() <= STATIONARY_TOL);
            v = next;
        }
    }

    #[test]
    fn nonconvergence_is_reported() {
        let g = PeriodicGrid::new(1, 16).unwrap();
        let params = SchemeParams::new(0.1, 2.0, 9);
        let phi = GridFunction::constant(g, 0.7).unwrap();
        let (_, report) = solve_stationary(&phi, &flat(), &params, &StationaryOptions::new(1.0)).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 10);
    }

    #[test]
    fn cosine_bump_stays_in_envelope() {
        let g = PeriodicGrid::new(1, 32).unwrap();
        let params = SchemeParams::new(0.02, 4.0, 17);
        let sys = perturbed("bump_x", 0.1);
        let phi = GridFunction::constant(g, 0.0).unwrap();
        let (u, report) = solve_stationary(&phi, &sys, &params, &StationaryOptions::new(60.0)).unwrap();
        assert!(report.converged);
        assert!(u.max_abs() <= 0.1 + 1e-8, "{}", u.max_abs());
        assert!(u.max_abs() > 0.05);
    }

    #[test]
    fn perturbed_examples() {
        let g = PeriodicGrid::new(1, 16).unwrap();
        let params = SchemeParams::new(0.05, 4.0, 9);
        let zero = GridFunction::constant(g, 0.0).unwrap();
        let opts = PerturbedOptions::new(40.0);
        let (u, r) = perturbed_from_unperturbed(&zero, &flat(), 0.1, &params, &opts).unwrap();
        assert_eq!(u, zero);
        assert_eq!(r.deviation, 0.0);

        let (_, r) =
            perturbed_from_unperturbed(&zero, &perturbed("bump_x", 0.05), 0.15, &params, &opts).unwrap();
        assert!(r.converged());
        assert!(r.sandwich_holds(), "{:?}", r.violations);
        assert!(r.deviation <= 0.05 + 1e-8);
        let t = r.t_delta.unwrap();
        assert!((t - 0.7).abs() < 0.1, "{t}");
        assert!(r.bracket_checks > 0);

        let err = perturbed_from_unperturbed(&zero, &perturbed("bump_x", 0.1), 0.1, &params, &opts);
        assert!(matches!(err, Err(StationaryError::EpsilonAboveThreshold { .. })));
    }

    #[test]
    fn unit_window_sweep_scales_linearly() {
        let g = PeriodicGrid::new(1, 8).unwrap();
        let params = SchemeParams::new(0.05, 4.0, 9);
        let zero = GridFunction::constant(g, 0.0).unwrap();
        let sys = perturbed("unit_window", 0.1);
        let rows = epsilon_sweep(&zero, &sys, &[0.1, 0.05], 3.0, &params, &PerturbedOptions::new(60.0))
            .unwrap();
        assert!((rows[0].deviation_sup - 0.1).abs() < 1e-8);
        assert!((rows[1].deviation_sup - 0.05).abs() < 1e-8);
        assert!((rows[0].deviation_sup / rows[1].deviation_sup - 2.0).abs() < 1e-6);
        assert!(sweep_is_decreasing(&rows));

        let rows = epsilon_sweep(&zero, &sys, &[0.0], 3.0, &params, &PerturbedOptions::new(60.0)).unwrap();
        assert_eq!(rows[0].deviation_sup, 0.0);

        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epsilon,deviation_sup,steps,converged\n"));
        assert_eq!(text.lines().count(), 2);
        assert!(epsilon_sweep(&zero, &sys, &[0.05, 0.1], 3.0, &params, &PerturbedOptions::new(60.0)).is_err());
    }

    #[test]
    fn witness_evaluation_examples() {
        let g = PeriodicGrid::new(1, 64).unwrap();
        let (hi, lo) = FourierWitness::zero(1, 0).hamiltonian_range(&flat(), &g);
        assert_eq!((hi, lo), (0.0, 0.0));

        let cos = ContactSystem::unperturbed(
            builtin_model("discounted_quadratic", &ModelParams::cosine(1.0, 1.0)).unwrap(),
        );
        let (_, lo) = FourierWitness::constant(1, 1.0).hamiltonian_range(&cos, &g);
        assert!(lo.abs() < 1e-15);
        let (hi, _) = FourierWitness::constant(1, -1.0).hamiltonian_range(&cos, &g);
        assert!(hi.abs() < 1e-15);

        let w = FourierWitness {
            cos: vec![0.0, 0.3],
            sin: vec![0.2, 0.0],
            ..FourierWitness::zero(1, 2)
        };
        let x = [0.3, 0.0];
        let (v, p) = w.eval(&x);
        let h = 1e-6;
        let fd = (w.eval(&[x[0] + h, 0.0]).0 - w.eval(&[x[0] - h, 0.0]).0) / (2.0 * h);
        assert!((p[0] - fd).abs() < 1e-6);
        assert!((v - (0.2 * (TAU * 0.3).sin() + 0.3 * (TAU * 0.6).cos())).abs() < 1e-15);
    }

    #[test]
    fn certificates_improve_with_degree_and_recompute_exactly() {
        let g = PeriodicGrid::new(1, 32).unwrap();
        let sine = ContactSystem::unperturbed(
            builtin_model("nonmonotone_sine", &ModelParams::cosine(0.5, 1.0)).unwrap(),
        );
        let search = CertificateSearch {
            budget: 300,
            ..CertificateSearch::default()
        };
        let c0 = admissibility_certificates(&sine, &g, 0, &search);
        let c2 = admissibility_certificates(&sine, &g, 2, &search);
        assert!(c2.cl_upper <= c0.cl_upper);
        assert!(c2.cr_lower >= c0.cr_lower);
        let (a, b) = c2.recompute(&sine);
        assert_eq!(a.to_bits(), c2.cl_upper.to_bits());
        assert_eq!(b.to_bits(), c2.cr_lower.to_bits());
        assert!(c2.zero_admissible());

        let c = admissibility_certificates(&flat(), &g, 0, &search);
        assert!(c.zero_admissible());
    }
}
