//! The invariant battery behind the `verify` experiment.

use std::f64::consts::TAU;
use std::io::Write;

use anyhow::Result;
use contact_hj::grid::{fmt_real, GridFunction};
use contact_hj::model::{legendre_gap_check, SampleBox};
use contact_hj::semigroup::{
    barrier_floor, deviation_check, SchemeParams, evolve_steps, implicit_action, step_is_order_independent,
};
use contact_hj::stability::{check_positivity_hypothesis, lyapunov_probe, sample_lambda, Classification};
use contact_hj::stationary::{perturbed_from_unperturbed, solve_stationary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Resolved;
use crate::run::{perturbed_options, stationary_options, Seeds};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// The inequality under test, in plain text.
    pub inequality: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    fn le(name: &str, inequality: &str, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            inequality: inequality.into(),
            measured,
            bound,
            pass: measured <= bound,
        }
    }

    fn lt(name: &str, inequality: &str, measured: f64, bound: f64) -> Self {
        Self {
            pass: measured < bound,
            ..Self::le(name, inequality, measured, bound)
        }
    }

    fn gt(name: &str, inequality: &str, measured: f64, bound: f64) -> Self {
        Self {
            pass: measured > bound,
            ..Self::le(name, inequality, measured, bound)
        }
    }

    /// One-line falsification message.
    pub fn describe(&self) -> String {
        format!(
            "{}: {} violated (measured {}, bound {})",
            self.name, self.inequality, self.measured, self.bound
        )
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct VerifyTable {
    pub checks: Vec<Check>,
    /// Barrier constant used by the point-source checks.
    pub barrier: f64,
    pub t_delta: Option<f64>,
    pub epsilon_delta: Option<f64>,
    pub delta: f64,
    /// Node-aligned scheme used by the point-source checks.
    pub action_dt: f64,
    pub action_v_count: usize,
}

impl VerifyTable {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["check", "measured", "bound", "pass"])?;
        for c in &self.checks {
            w.write_record([c.name.clone(), fmt_real(c.measured), fmt_real(c.bound), c.pass.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Initial field `a cos(2 pi x_1)` from the run section.
pub fn initial_field(r: &Resolved) -> Result<GridFunction> {
    let a = r.config.run.initial_amplitude;
    Ok(GridFunction::from_fn(r.grid, |x| a * (TAU * x[0]).cos())?)
}

/// Concave tent `-h sum_k min(i_k, n - i_k)` peaked at the origin, built
/// from integer node coordinates so mirrored nodes hold identical values.
fn tent_field(r: &Resolved) -> Result<GridFunction> {
    let g = r.grid;
    let n = g.nodes_per_axis();
    let values = (0..g.len())
        .map(|i| {
            let c = g.coords(i);
            let steps: usize = (0..g.dim()).map(|k| c[k].min(n - c[k])).sum();
            -(steps as f64) * g.spacing()
        })
        .collect();
    Ok(GridFunction::new(g, values)?)
}

/// Same `v_max`, with `dt` and the velocity count chosen so every foot
/// point is a node. Point sources then reach nodes without interpolating
/// against the barrier.
fn node_aligned(params: &SchemeParams, n: usize) -> SchemeParams {
    let m = (params.v_count - 1).min(n) & !1;
    SchemeParams {
        dt: m as f64 / (2.0 * params.v_max * n as f64),
        v_count: m + 1,
        ..params.clone()
    }
}

/// Runs every check; failures are reported in the table, never as errors.
pub fn verify_suite(r: &Resolved, seeds: &Seeds) -> Result<VerifyTable> {
    let sys = &r.system;
    let base = sys.without_perturbation();
    let params = &r.params;
    let run = &r.config.run;
    let tol = &r.config.tolerances;
    let eps = sys.epsilon();
    let lambda = sys.lambda();
    let phi = initial_field(r)?;
    let steps = params.steps_for(run.t_final)?;
    let t = steps as f64 * params.dt;
    let mut table = VerifyTable::default();

    let gap = legendre_gap_check(
        sys,
        tol.samples,
        &SampleBox {
            v_max: params.v_max,
            ..SampleBox::default()
        },
        seeds.samples,
    )?;
    table.checks.push(Check::le(
        "legendre_gap",
        "sup |L^eps - L| <= eps + 2 legendre_tol",
        gap,
        eps + 2.0 * tol.legendre_tol,
    ));

    let dev = deviation_check(&phi, t, sys, params)?;
    table.checks.push(Check::le(
        "gronwall_deviation",
        "sup |T^eps_t phi - T_t phi| <= (eps/lambda)(e^(lambda t) - 1) + steps implicit_tol",
        dev.measured,
        dev.bound + dev.slack,
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(seeds.fields);
    let below = phi.with_values(phi.values().iter().map(|v| v - rng.gen_range(0.0..0.5)).collect())?;
    let noisy = phi.with_values(phi.values().iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect())?;
    let t_phi = evolve_steps(&phi, steps, sys, params)?;
    let t_below = evolve_steps(&below, steps, sys, params)?;
    table.checks.push(Check::le(
        "monotonicity",
        "psi <= phi implies T_t psi <= T_t phi (max of T_t psi - T_t phi)",
        t_below.max_excess(&t_phi)?,
        0.0,
    ));
    let d0 = noisy.sup_distance(&phi)?;
    let dt_growth = evolve_steps(&noisy, steps, sys, params)?.sup_distance(&t_phi)? / d0;
    table.checks.push(Check::le(
        "lipschitz_growth",
        "sup |T_t phi - T_t psi| / sup |phi - psi| <= (1 - lambda dt)^(-steps)",
        dt_growth,
        (1.0 - lambda * params.dt).powi(-(steps as i32)),
    ));

    let aligned = node_aligned(params, r.grid.nodes_per_axis());
    let t_action = (t / aligned.dt).ceil() * aligned.dt;
    let barrier = barrier_floor(0.5, lambda, t_action);
    table.barrier = barrier;
    table.action_dt = aligned.dt;
    table.action_v_count = aligned.v_count;
    let h0 = implicit_action(0, 0.0, t_action, sys, &aligned, r.grid, barrier)?;
    let h1 = implicit_action(0, 0.5, t_action, sys, &aligned, r.grid, barrier)?;
    table.checks.push(Check::le(
        "minimizer_attained",
        "nodes not reached from the source by time t <= 0",
        (h0.unreached_count() + h1.unreached_count()) as f64,
        0.0,
    ));
    table.checks.push(Check::lt(
        "action_monotone_in_u0",
        "u1 < u2 implies h_(x0,u1)(x,t) < h_(x0,u2)(x,t) (max of h_0 - h_0.5)",
        h0.values.max_excess(&h1.values)?,
        0.0,
    ));

    let (u_minus, fp) = solve_stationary(&phi, &base, params, &stationary_options(r))?;
    table.checks.push(Check::le(
        "stationary_residual",
        "sup |T_dt u - u| <= stationary_tol",
        fp.last_residual(),
        tol.stationary_tol,
    ));

    let delta = run.delta.unwrap_or(if eps > 0.0 { 3.0 * eps / lambda } else { run.probe_delta });
    table.delta = delta;
    let (u_eps, pr) = perturbed_from_unperturbed(&u_minus, sys, delta, params, &perturbed_options(r))?;
    table.t_delta = pr.t_delta;
    table.epsilon_delta = pr.epsilon_delta;
    table.checks.push(Check::le(
        "sandwich",
        "T_t(u_- - delta) <= T^eps_t u_- <= T_t(u_- + delta) (violations)",
        pr.violations.len() as f64,
        0.0,
    ));
    table.checks.push(Check::le(
        "perturbed_within_delta",
        "sup |u_eps - u_-| <= delta",
        pr.deviation,
        delta + pr.slack,
    ));

    let sample = sample_lambda(&u_eps, sys, r.kink_threshold);
    let hyp = check_positivity_hypothesis(&sample, tol.hypothesis_margin)?;
    table.checks.push(Check::gt(
        "hypothesis_min_hu",
        "min H_u over sampled jets > hypothesis_margin",
        sample.min_hu,
        tol.hypothesis_margin,
    ));
    let probe = lyapunov_probe(
        &u_eps,
        sys,
        run.probe_delta,
        run.probes,
        run.horizon,
        params,
        seeds.probes,
        run.record_stride,
    )?;
    let worst = probe.final_distances.iter().copied().fold(0.0, f64::max);
    let mut c = Check::le(
        "probe_decay",
        "every probe returns to within 1e-3 delta with nonincreasing tail",
        worst,
        1e-3 * run.probe_delta,
    );
    c.pass &= hyp.holds && probe.classification == Classification::AsymptoticallyStableWithinHorizon;
    table.checks.push(c);

    // On node-aligned feet the tent produces exact ties between mirrored
    // velocities whenever L is symmetric there.
    let disagreements = [(&phi, params), (&tent_field(r)?, &aligned)]
        .into_iter()
        .map(|(f, p)| step_is_order_independent(f, sys, p).map(|same| !same as usize))
        .sum::<Result<usize, _>>()?;
    table.checks.push(Check::le(
        "bitwise_reproducibility",
        "forward and reversed candidate order give bitwise equal steps (disagreements)",
        disagreements as f64,
        0.0,
    ));
    Ok(table)
}
