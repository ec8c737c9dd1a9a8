//! Sampling of differentiability 1-jets of a solution, the positivity
//! check of `H_u` on them, Lyapunov probes of fixed points, and the contact
//! characteristic flow with calibrated-curve audits.

use std::f64::consts::TAU;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{fmt_real, GridError, GridFunction, PeriodicGrid, Point};
use crate::model::{ContactSystem, ModelError};
use crate::semigroup::{lax_oleinik_step, SchemeError, SchemeParams};
use crate::stationary::STATIONARY_TOL;

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty sample")]
    EmptySample,
    #[error("non-finite state at t={t}; partial trajectory has {} states", .partial.states.len())]
    NonFinite { t: f64, partial: Box<ContactTrajectory> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JetEntry {
    pub x: Point,
    pub p: Point,
    pub u: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaSample {
    pub entries: Vec<JetEntry>,
    /// Minimum of `H_u` over the entries (`+inf` when empty).
    pub min_hu: f64,
    pub kappa: f64,
    pub nodes_total: usize,
    /// Fewer than 10% of nodes passed the screen.
    pub degenerate: bool,
}

/// Jets `(x, Du(x), u(x))` at the nodes passing the kink screen.
pub fn sample_lambda(u: &GridFunction, system: &ContactSystem, kappa: f64) -> LambdaSample {
    let mask = u.differentiability_screen(kappa);
    let grid = u.grid();
    let entries: Vec<JetEntry> = (0..u.len())
        .filter(|&i| mask[i])
        .map(|i| JetEntry {
            x: grid.point(i),
            p: u.central_gradient(i),
            u: u.value(i),
        })
        .collect();
    let min_hu = entries
        .iter()
        .map(|e| system.du(&e.x, &e.p, e.u))
        .fold(f64::INFINITY, f64::min);
    LambdaSample {
        degenerate: 10 * entries.len() < u.len(),
        entries,
        min_hu,
        kappa,
        nodes_total: u.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub holds: bool,
    /// `min H_u - hypothesis_margin`.
    pub margin: f64,
}

pub fn check_positivity_hypothesis(
    sample: &LambdaSample,
    hypothesis_margin: f64,
) -> Result<HypothesisCheck, StabilityError> {
    if sample.entries.is_empty() {
        return Err(StabilityError::EmptySample);
    }
    Ok(HypothesisCheck {
        holds: sample.min_hu > hypothesis_margin,
        margin: sample.min_hu - hypothesis_margin,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    AsymptoticallyStableWithinHorizon,
    Inconclusive,
    EscapeDetected,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityReport {
    pub probes: usize,
    pub delta: f64,
    pub horizon: f64,
    pub seed: Option<u64>,
    /// Initial sup distances `delta * r`.
    pub radii: Vec<f64>,
    pub times: Vec<f64>,
    /// Sup distance to the fixed point per probe and recorded time.
    pub decay: Vec<Vec<f64>>,
    pub final_distances: Vec<f64>,
    /// Largest sup distance between two final probe states.
    pub final_spread: f64,
    pub classification: Classification,
}

impl StabilityReport {
    pub fn write_decay_csv<W: Write>(&self, writer: W) -> Result<(), StabilityError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["probe", "t", "distance"])?;
        for (k, curve) in self.decay.iter().enumerate() {
            for (t, d) in self.times.iter().zip(curve) {
                w.write_record([k.to_string(), fmt_real(*t), fmt_real(*d)])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Highest Fourier mode in random probe fields.
pub const PROBE_MODES: i32 = 3;

/// Random band-limited field with sup over nodes equal to `amplitude`.
pub fn band_limited_field(grid: &PeriodicGrid, amplitude: f64, rng: &mut ChaCha8Rng) -> GridFunction {
    let mut terms = Vec::new();
    let m = PROBE_MODES;
    let k2_range = if grid.dim() == 1 { 0..=0 } else { -m..=m };
    for k1 in 0..=m {
        for k2 in k2_range.clone() {
            if k1 == 0 && k2 < 0 {
                continue;
            }
            let (a, b) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            terms.push(([k1 as f64, k2 as f64], a, b));
        }
    }
    let raw: Vec<f64> = (0..grid.len())
        .map(|i| {
            let x = grid.point(i);
            terms
                .iter()
                .map(|(k, a, b)| {
                    let (s, c) = (TAU * (k[0] * x[0] + k[1] * x[1])).sin_cos();
                    a * c + b * s
                })
                .sum()
        })
        .collect();
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    let values = raw
        .iter()
        .map(|v| if v.abs() == peak { amplitude.copysign(*v) } else { v * scale })
        .collect();
    GridFunction::new(*grid, values).expect("finite probe field")
}

/// Random probes `u_fixed + field` with `sup |field| = delta r`, `r` uniform
/// in `(0, 1]`. Probe `k` draws from its own ChaCha8 stream.
pub fn random_probes(
    u_fixed: &GridFunction,
    delta: f64,
    n_probes: usize,
    seed: u64,
) -> Result<(Vec<GridFunction>, Vec<f64>), StabilityError> {
    let (probes, radii) = (0..n_probes)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let r = 1.0 - rng.gen::<f64>();
            let field = band_limited_field(u_fixed.grid(), delta * r, &mut rng);
            Ok((u_fixed.zip_with(&field, |a, b| a + b)?, delta * r))
        })
        .collect::<Result<Vec<_>, GridError>>()?
        .into_iter()
        .unzip();
    Ok((probes, radii))
}

/// Evolves random probes in the `delta`-ball around `u_fixed` and
/// classifies the outcome.
#[allow(clippy::too_many_arguments)]
pub fn lyapunov_probe(
    u_fixed: &GridFunction,
    system: &ContactSystem,
    delta: f64,
    n_probes: usize,
    horizon: f64,
    params: &SchemeParams,
    seed: u64,
    record_stride: usize,
) -> Result<StabilityReport, StabilityError> {
    if !(delta > 0.0) || n_probes == 0 {
        return Err(StabilityError::InvalidArgument(
            "delta must be positive and at least one probe is required".into(),
        ));
    }
    let (probes, radii) = random_probes(u_fixed, delta, n_probes, seed)?;
    let mut report = evolve_probes(u_fixed, &probes, system, delta, horizon, params, record_stride)?;
    report.seed = Some(seed);
    report.radii = radii;
    Ok(report)
}

/// Evolves the given probes and classifies their decay toward `u_fixed`.
pub fn evolve_probes(
    u_fixed: &GridFunction,
    probes: &[GridFunction],
    system: &ContactSystem,
    delta: f64,
    horizon: f64,
    params: &SchemeParams,
    record_stride: usize,
) -> Result<StabilityReport, StabilityError> {
    params.validate(system.lambda())?;
    let steps = params.steps_for(horizon)?;
    let stride = record_stride.max(1);
    let mut times = vec![0.0];
    times.extend((1..=steps).filter(|k| k % stride == 0 || *k == steps).map(|k| k as f64 * params.dt));

    let runs: Vec<(Vec<f64>, GridFunction, f64)> = probes
        .par_iter()
        .map(|probe| {
            let mut phi = probe.clone();
            let mut curve = vec![phi.sup_distance(u_fixed)?];
            let mut peak = curve[0];
            for k in 1..=steps {
                phi = lax_oleinik_step(&phi, system, params)?;
                let d = phi.sup_distance(u_fixed)?;
                peak = peak.max(d);
                if k % stride == 0 || k == steps {
                    curve.push(d);
                }
            }
            Ok((curve, phi, peak))
        })
        .collect::<Result<_, StabilityError>>()?;

    let final_distances: Vec<f64> = runs.iter().map(|r| *r.0.last().unwrap()).collect();
    let mut final_spread: f64 = 0.0;
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            final_spread = final_spread.max(runs[i].1.sup_distance(&runs[j].1)?);
        }
    }
    let escaped = runs.iter().any(|r| r.2 > 2.0 * delta);
    let tail_ok = runs.iter().all(|r| {
        let curve = &r.0;
        let start = curve.len() - (curve.len() / 5).max(2).min(curve.len());
        curve[start..].windows(2).all(|w| w[1] <= w[0] + STATIONARY_TOL)
    });
    let close = final_distances.iter().all(|&d| d <= 1e-3 * delta);
    let classification = if escaped {
        Classification::EscapeDetected
    } else if close && tail_ok {
        Classification::AsymptoticallyStableWithinHorizon
    } else {
        Classification::Inconclusive
    };
    Ok(StabilityReport {
        probes: probes.len(),
        delta,
        horizon,
        seed: None,
        radii: probes
            .iter()
            .map(|p| p.sup_distance(u_fixed))
            .collect::<Result<_, _>>()?,
        times,
        decay: runs.into_iter().map(|r| r.0).collect(),
        final_distances,
        final_spread,
        classification,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactState {
    pub x: Point,
    pub p: Point,
    pub u: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContactTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<ContactState>,
    pub dt_ode: f64,
}

type Flow = [f64; 6];

/// Right-hand side of the characteristic system, augmented with
/// `E' = -H_u E` in the last slot.
fn contact_rhs(system: &ContactSystem, s: &Flow, dim: usize) -> Flow {
    let x = [s[0], s[1]];
    let p = [s[2], s[3]];
    let u = s[4];
    let hp = system.grad_p(&x, &p, u);
    let hx = system.grad_x(&x, &p, u);
    let hu = system.du(&x, &p, u);
    let h = system.hamiltonian(&x, &p, u);
    let mut d = [0.0; 6];
    for k in 0..dim {
        d[k] = hp[k];
        d[2 + k] = -hx[k] - hu * p[k];
    }
    d[4] = hp[0] * p[0] + hp[1] * p[1] - h;
    d[5] = -hu * s[5];
    d
}

fn rk4_step(system: &ContactSystem, s: &Flow, h: f64, dim: usize) -> Flow {
    let add = |a: &Flow, b: &Flow, c: f64| -> Flow {
        let mut out = *a;
        for i in 0..6 {
            out[i] += c * b[i];
        }
        out
    };
    let k1 = contact_rhs(system, s, dim);
    let k2 = contact_rhs(system, &add(s, &k1, 0.5 * h), dim);
    let k3 = contact_rhs(system, &add(s, &k2, 0.5 * h), dim);
    let k4 = contact_rhs(system, &add(s, &k3, h), dim);
    let mut out = *s;
    for i in 0..6 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

fn ode_steps(t_span: f64, dt_ode: f64) -> Result<usize, StabilityError> {
    if !(dt_ode > 0.0) || !t_span.is_finite() {
        return Err(StabilityError::InvalidArgument(format!(
            "dt_ode = {dt_ode}, t_span = {t_span}"
        )));
    }
    let n = (t_span.abs() / dt_ode).round();
    if (n * dt_ode - t_span.abs()).abs() > 1e-9 * t_span.abs().max(1.0) {
        return Err(StabilityError::InvalidArgument(format!(
            "dt_ode = {dt_ode} does not divide t_span = {t_span}"
        )));
    }
    Ok(n as usize)
}

fn integrate_augmented(
    start: &ContactState,
    t_span: f64,
    dt_ode: f64,
    system: &ContactSystem,
) -> Result<(ContactTrajectory, Vec<f64>), StabilityError> {
    let n = ode_steps(t_span, dt_ode)?;
    let h = dt_ode.copysign(t_span);
    let dim = system.dim();
    let e0 = system.hamiltonian(&start.x, &start.p, start.u);
    let mut s: Flow = [start.x[0], start.x[1], start.p[0], start.p[1], start.u, e0];
    let mut traj = ContactTrajectory {
        times: vec![0.0],
        states: vec![*start],
        dt_ode,
    };
    let mut energy = vec![e0];
    for k in 1..=n {
        s = rk4_step(system, &s, h, dim);
        let t = k as f64 * h;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(StabilityError::NonFinite {
                t,
                partial: Box::new(traj),
            });
        }
        traj.times.push(t);
        traj.states.push(ContactState {
            x: [s[0], s[1]],
            p: [s[2], s[3]],
            u: s[4],
        });
        energy.push(s[5]);
    }
    Ok((traj, energy))
}

/// Classical RK4 integration of `x' = H_p, p' = -H_x - H_u p,
/// u' = <H_p, p> - H` over `t_span` (negative for backward time). The `x`
/// component is left unwrapped.
pub fn integrate_contact_flow(
    start: &ContactState,
    t_span: f64,
    dt_ode: f64,
    system: &ContactSystem,
) -> Result<ContactTrajectory, StabilityError> {
    integrate_augmented(start, t_span, dt_ode, system).map(|r| r.0)
}

/// Largest gap between `H` along the trajectory and the solution of
/// `E' = -H_u E`, `E(0) = H(start)`, integrated alongside.
pub fn flow_energy_defect(
    start: &ContactState,
    t_span: f64,
    dt_ode: f64,
    system: &ContactSystem,
) -> Result<f64, StabilityError> {
    let (traj, energy) = integrate_augmented(start, t_span, dt_ode, system)?;
    Ok(traj
        .states
        .iter()
        .zip(&energy)
        .map(|(s, e)| (system.hamiltonian(&s.x, &s.p, s.u) - e).abs())
        .fold(0.0, f64::max))
}

fn wrap(x: &Point) -> Point {
    [x[0].rem_euclid(1.0), x[1].rem_euclid(1.0)]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub start_node: usize,
    /// `sup |H(gamma, p, u)|` along the curve.
    pub hamiltonian_defect: f64,
    /// `|u(gamma(0)) - u(gamma(-T)) - int L(gamma, gamma', u(gamma))|`.
    pub domination_defect: f64,
    /// `sup |u_flow - u(gamma)|`.
    pub value_defect: f64,
    pub audited_time: f64,
    pub truncated: bool,
}

impl AuditReport {
    pub fn max_defect(&self) -> f64 {
        self.hamiltonian_defect
            .max(self.domination_defect)
            .max(self.value_defect)
    }
}

/// Integrates the characteristics backward from the jet of `u` at
/// `start_node` and measures how far the curve is from being calibrated.
/// The curve is cut where it enters a node failing the kink screen.
pub fn calibrated_curve_audit(
    u: &GridFunction,
    start_node: usize,
    t_back: f64,
    system: &ContactSystem,
    dt_ode: f64,
    kappa: f64,
) -> Result<AuditReport, StabilityError> {
    if !(t_back > 0.0) {
        return Err(StabilityError::InvalidArgument("t_back must be positive".into()));
    }
    let mask = u.differentiability_screen(kappa);
    if !mask[start_node] {
        return Err(StabilityError::InvalidArgument(format!(
            "start node {start_node} fails the kink screen"
        )));
    }
    let grid = u.grid();
    let start = ContactState {
        x: grid.point(start_node),
        p: u.central_gradient(start_node),
        u: u.value(start_node),
    };
    let traj = integrate_contact_flow(&start, -t_back, dt_ode, system)?;
    let mut kept = traj.states.len();
    for (k, s) in traj.states.iter().enumerate() {
        if !mask[grid.nearest_node(&wrap(&s.x))] {
            kept = k;
            break;
        }
    }
    let states = &traj.states[..kept];
    let truncated = kept < traj.states.len();

    let mut h_defect: f64 = 0.0;
    let mut v_defect: f64 = 0.0;
    let mut integrand = Vec::with_capacity(states.len());
    for s in states {
        let y = wrap(&s.x);
        let u_interp = u.interpolate(&y);
        h_defect = h_defect.max(system.hamiltonian(&s.x, &s.p, s.u).abs());
        v_defect = v_defect.max((s.u - u_interp).abs());
        let v = system.grad_p(&s.x, &s.p, s.u);
        integrand.push(system.lagrangian(&y, &v, u_interp)?);
    }
    let action: f64 = integrand
        .windows(2)
        .map(|w| 0.5 * dt_ode * (w[0] + w[1]))
        .sum();
    let domination = match states.last() {
        Some(last) if states.len() > 1 => {
            (u.interpolate(&wrap(&states[0].x)) - u.interpolate(&wrap(&last.x)) - action).abs()
        }
        _ => 0.0,
    };
    Ok(AuditReport {
        start_node,
        hamiltonian_defect: h_defect,
        domination_defect: domination,
        value_defect: v_defect,
        audited_time: states.len().saturating_sub(1) as f64 * dt_ode,
        truncated,
    })
}

/// One-sided Hausdorff distance from `sample_eps` to `sample_0` under the
/// metric `|x - x'|_torus + |p - p'| + |u - u'|`.
pub fn lambda_proximity(
    sample_eps: &LambdaSample,
    sample_0: &LambdaSample,
) -> Result<f64, StabilityError> {
    if sample_eps.entries.is_empty() || sample_0.entries.is_empty() {
        return Err(StabilityError::EmptySample);
    }
    let dist = |a: &JetEntry, b: &JetEntry| {
        let dx = (0..2)
            .map(|k| PeriodicGrid::axis_delta(a.x[k], b.x[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        let dp = ((a.p[0] - b.p[0]).powi(2) + (a.p[1] - b.p[1]).powi(2)).sqrt();
        dx + dp + (a.u - b.u).abs()
    };
    Ok(sample_eps
        .entries
        .par_iter()
        .map(|a| {
            sample_0
                .entries
                .iter()
                .map(|b| dist(a, b))
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| 0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::default_kink_threshold;
    use crate::model::{builtin_model, ModelParams};

    fn flat() -> ContactSystem {
        ContactSystem::unperturbed(
            builtin_model("discounted_quadratic", &ModelParams::default()).unwrap(),
        )
    }

    #[test]
    fn zero_solution_sample() {
        let g = PeriodicGrid::new(1, 32).unwrap();
        let u = GridFunction::constant(g, 0.0).unwrap();
        let s = sample_lambda(&u, &flat(), default_kink_threshold(&g));
        assert_eq!(s.entries.len(), 32);
        assert!(s.entries.iter().all(|e| e.p == [0.0, 0.0] && e.u == 0.0));
        assert_eq!(s.min_hu, 1.0);
        assert!(!s.degenerate);
        let c = check_positivity_hypothesis(&s, 0.0).unwrap();
        assert!(c.holds);
        assert_eq!(c.margin, 1.0);
    }

    #[test]
    fn hypothesis_boundary_and_empty() {
        let s = LambdaSample {
            entries: vec![JetEntry { x: [0.0; 2], p: [0.0; 2], u: 0.0 }],
            min_hu: 0.0,
            kappa: 1.0,
            nodes_total: 1,
            degenerate: false,
        };
        assert!(!check_positivity_hypothesis(&s, 0.0).unwrap().holds);
        let empty = LambdaSample { entries: vec![], min_hu: f64::INFINITY, ..s };
        assert!(matches!(
            check_positivity_hypothesis(&empty, 0.0),
            Err(StabilityError::EmptySample)
        ));
    }

    #[test]
    fn kink_is_excluded() {
        let g = PeriodicGrid::new(1, 64).unwrap();
        let tent = GridFunction::from_fn(g, |x| g.torus_distance(x, &[0.0, 0.0])).unwrap();
        // second difference at the peak is -2/h = -128
        let s = sample_lambda(&tent, &flat(), 50.0);
        assert_eq!(s.entries.len(), 63);
        assert!(s.entries.iter().all(|e| e.x[0] != 0.5));
    }

    #[test]
    fn probes_are_reproducible_and_sized() {
        let g = PeriodicGrid::new(1, 32).unwrap();
        let u = GridFunction::constant(g, 0.0).unwrap();
        let (a, ra) = random_probes(&u, 0.3, 4, 7).unwrap();
        let (b, _) = random_probes(&u, 0.3, 4, 7).unwrap();
        assert_eq!(a, b);
        for (p, r) in a.iter().zip(&ra) {
            assert!(*r > 0.0 && *r <= 0.3);
            assert_eq!(p.max_abs(), *r);
        }
        let (c, _) = random_probes(&u, 0.3, 4, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn flat_probes_decay_geometrically() {
        let g = PeriodicGrid::new(1, 16).unwrap();
        let u = GridFunction::constant(g, 0.0).unwrap();
        let params = SchemeParams::new(0.05, 4.0, 9);
        let r = lyapunov_probe(&u, &flat(), 0.3, 5, 20.0, &params, 3, 1).unwrap();
        assert_eq!(r.classification, Classification::AsymptoticallyStableWithinHorizon);
        for (curve, r0) in r.decay.iter().zip(&r.radii) {
            for (k, d) in curve.iter().enumerate() {
                assert!(*d <= r0 * 1.05f64.powi(-(k as i32)) * (1.0 + 1e-12));
            }
        }
        let fixed = evolve_probes(&u, std::slice::from_ref(&u), &flat(), 0.3, 2.0, &params, 1).unwrap();
        assert!(fixed.decay[0].iter().all(|&d| d <= STATIONARY_TOL));
    }

    #[test]
    fn reflected_constant_probes_classify_alike() {
        let g = PeriodicGrid::new(1, 16).unwrap();
        let u = GridFunction::constant(g, 0.0).unwrap();
        let params = SchemeParams::new(0.05, 4.0, 9);
        let probes: Vec<_> = [0.1, 0.2, 0.3]
            .iter()
            .map(|&c| GridFunction::constant(g, c).unwrap())
            .collect();
        let reflected: Vec<_> = probes.iter().map(|p| p.map(|v| -v).unwrap()).collect();
        let a = evolve_probes(&u, &probes, &flat(), 0.3, 15.0, &params, 10).unwrap();
        let b = evolve_probes(&u, &reflected, &flat(), 0.3, 15.0, &params, 10).unwrap();
        assert_eq!(a.classification, b.classification);
        assert_eq!(a.decay, b.decay);
    }

    #[test]
    fn flow_equilibrium_and_closed_form() {
        let sys = flat();
        let eq = ContactState { x: [0.0; 2], p: [0.0; 2], u: 0.0 };
        let t = integrate_contact_flow(&eq, 1.0, 0.1, &sys).unwrap();
        assert!(t.states.iter().all(|s| *s == eq));

        let start = ContactState { x: [0.0; 2], p: [1.0, 0.0], u: 0.0 };
        let err = |h: f64| {
            let tr = integrate_contact_flow(&start, 1.0, h, &sys).unwrap();
            let s = tr.states.last().unwrap();
            let e = (-1.0f64).exp();
            let exact_u = 0.5 * e - 0.5 * e * e;
            (s.p[0] - e).abs().max((s.x[0] - (1.0 - e)).abs()).max((s.u - exact_u).abs())
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 16.0).abs() < 2.0, "{ratio}");
        assert!(integrate_contact_flow(&start, 1.0, 0.3, &sys).is_err());
    }

    #[test]
    fn energy_identity_and_level_set() {
        let cos = ContactSystem::unperturbed(
            builtin_model("nonmonotone_sine", &ModelParams::cosine(0.5, 1.0)).unwrap(),
        );
        let start = ContactState { x: [0.1, 0.0], p: [0.7, 0.0], u: 0.3 };
        let d1 = flow_energy_defect(&start, 1.0, 0.02, &cos).unwrap();
        let d2 = flow_energy_defect(&start, 1.0, 0.01, &cos).unwrap();
        assert!(d1 < 1e-6 && d2 < d1 / 8.0, "{d1} {d2}");

        let on_level = ContactState { x: [0.3, 0.0], p: [0.8, 0.0], u: -0.32 };
        let tr = integrate_contact_flow(&on_level, -1.0, 0.01, &flat()).unwrap();
        for s in &tr.states {
            let h = flat().hamiltonian(&s.x, &s.p, s.u).abs();
            assert!(h < 1e-9, "{h}");
        }
    }

    #[test]
    fn audit_of_trivial_and_corrupted_solutions() {
        let g = PeriodicGrid::new(1, 32).unwrap();
        let zero = GridFunction::constant(g, 0.0).unwrap();
        let k = default_kink_threshold(&g);
        let r = calibrated_curve_audit(&zero, 5, 0.5, &flat(), 0.01, k).unwrap();
        assert_eq!(r.max_defect(), 0.0);
        assert!(!r.truncated);

        let bad = GridFunction::from_fn(g, |x| 0.1 * (TAU * x[0]).sin()).unwrap();
        let r = calibrated_curve_audit(&bad, 0, 0.25, &flat(), 0.01, k).unwrap();
        assert!(r.hamiltonian_defect >= 0.05, "{}", r.hamiltonian_defect);
    }

    #[test]
    fn proximity_is_permutation_invariant() {
        let g = PeriodicGrid::new(1, 16).unwrap();
        let u = GridFunction::from_fn(g, |x| 0.2 * (TAU * x[0]).cos()).unwrap();
        let s = sample_lambda(&u, &flat(), default_kink_threshold(&g));
        assert_eq!(lambda_proximity(&s, &s).unwrap(), 0.0);
        let mut r = s.clone();
        r.entries.reverse();
        assert_eq!(lambda_proximity(&r, &s).unwrap(), 0.0);
        let shifted = sample_lambda(&u.map(|v| v + 0.01).unwrap(), &flat(), 1e3);
        assert!((lambda_proximity(&shifted, &s).unwrap() - 0.01).abs() < 1e-12);
    }
}
