//! Contact Hamiltonians `H(x, p, u)`, compactly supported perturbations
//! `P(x, p, u)`, and the numerical Legendre transform that produces the
//! Lagrangian `L(x, v, u) = sup_p { <v, p> - H(x, p, u) }`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Point;

/// Default tolerance on `|H_p(x, p*, u) - v|` for the Legendre maximizer.
pub const LEGENDRE_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 200;
const MAX_ROOT_ITER: usize = 200;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown built-in `{0}`")]
    UnknownName(String),
    #[error("epsilon = {0} is positive but no perturbation is attached")]
    MissingPerturbation(f64),
    #[error("epsilon must be finite and nonnegative, got {0}")]
    InvalidEpsilon(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(
        "Legendre maximizer reached the search box |p| <= {radius} at x={x:?}, v={v:?}, u={u}; \
         the Hamiltonian is not superlinear enough for this box"
    )]
    BoxTooSmall {
        x: Point,
        v: Point,
        u: f64,
        radius: f64,
    },
    #[error("non-finite Hamiltonian value at x={x:?}, p={p:?}, u={u}")]
    NonFinite { x: Point, p: Point, u: f64 },
}

/// A contact Hamiltonian with analytic first partials.
pub trait Hamiltonian: Send + Sync + fmt::Debug {
    fn value(&self, x: &Point, p: &Point, u: f64) -> f64;
    fn grad_p(&self, x: &Point, p: &Point, u: f64) -> Point;
    fn grad_x(&self, x: &Point, p: &Point, u: f64) -> Point;
    fn du(&self, x: &Point, p: &Point, u: f64) -> f64;

    /// Closed-form Lagrangian, when the Hamiltonian admits one.
    fn lagrangian(&self, _x: &Point, _v: &Point, _u: f64) -> Option<f64> {
        None
    }

    /// `Some((L(x, v, 0), slope))` when `u -> L(x, v, u)` is affine.
    fn lagrangian_affine_in_u(&self, _x: &Point, _v: &Point) -> Option<(f64, f64)> {
        None
    }
}

/// A perturbation `P` with analytic first partials.
pub trait Perturbation: Send + Sync + fmt::Debug {
    fn value(&self, x: &Point, p: &Point, u: f64) -> f64;
    fn grad_p(&self, x: &Point, p: &Point, u: f64) -> Point;
    fn grad_x(&self, x: &Point, p: &Point, u: f64) -> Point;
    fn du(&self, x: &Point, p: &Point, u: f64) -> f64;
}

#[derive(Clone)]
pub struct ContactModel {
    dim: usize,
    hamiltonian: Arc<dyn Hamiltonian>,
    lambda: f64,
    p_search_radius: Option<f64>,
    label: String,
}

impl fmt::Debug for ContactModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContactModel")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("lambda", &self.lambda)
            .field("p_search_radius", &self.p_search_radius)
            .finish()
    }
}

impl ContactModel {
    pub fn new(
        dim: usize,
        hamiltonian: Arc<dyn Hamiltonian>,
        lambda: f64,
        label: impl Into<String>,
    ) -> Result<Self, ModelError> {
        if !(1..=2).contains(&dim) {
            return Err(ModelError::InvalidParameter(format!("dim = {dim}")));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        Ok(Self {
            dim,
            hamiltonian,
            lambda,
            p_search_radius: None,
            label: label.into(),
        })
    }

    /// Fixes the Legendre search box. Without this the box radius is
    /// `10 + 2|v|` for each query.
    pub fn with_p_search_radius(mut self, radius: f64) -> Self {
        self.p_search_radius = Some(radius);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn hamiltonian(&self) -> &dyn Hamiltonian {
        self.hamiltonian.as_ref()
    }

    pub fn p_search_radius(&self, v: &Point) -> f64 {
        self.p_search_radius
            .unwrap_or_else(|| 10.0 + 2.0 * norm(v))
    }
}

#[derive(Clone)]
pub struct PerturbationSpec {
    perturbation: Arc<dyn Perturbation>,
    p_support: f64,
    u_support: f64,
    label: String,
}

impl fmt::Debug for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PerturbationSpec")
            .field("label", &self.label)
            .field("p_support", &self.p_support)
            .field("u_support", &self.u_support)
            .finish()
    }
}

impl PerturbationSpec {
    /// `p_support` and `u_support` bound the region outside which `P`
    /// vanishes identically.
    pub fn new(
        perturbation: Arc<dyn Perturbation>,
        p_support: f64,
        u_support: f64,
        label: impl Into<String>,
    ) -> Self {
        Self {
            perturbation,
            p_support,
            u_support,
            label: label.into(),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn perturbation(&self) -> &dyn Perturbation {
        self.perturbation.as_ref()
    }

    pub fn p_support(&self) -> f64 {
        self.p_support
    }

    pub fn u_support(&self) -> f64 {
        self.u_support
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegendreResult {
    pub value: f64,
    pub argmax_p: Point,
    pub iterations: usize,
    pub residual: f64,
}

/// A model together with an optional perturbation and its amplitude: the
/// Hamiltonian `H + eps * P`.
#[derive(Clone, Debug)]
pub struct ContactSystem {
    model: ContactModel,
    perturbation: Option<PerturbationSpec>,
    epsilon: f64,
    legendre_tol: f64,
}

impl ContactSystem {
    pub fn new(
        model: ContactModel,
        perturbation: Option<PerturbationSpec>,
        epsilon: f64,
    ) -> Result<Self, ModelError> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(ModelError::InvalidEpsilon(epsilon));
        }
        if epsilon > 0.0 && perturbation.is_none() {
            return Err(ModelError::MissingPerturbation(epsilon));
        }
        Ok(Self {
            model,
            perturbation,
            epsilon,
            legendre_tol: LEGENDRE_TOL,
        })
    }

    pub fn unperturbed(model: ContactModel) -> Self {
        Self {
            model,
            perturbation: None,
            epsilon: 0.0,
            legendre_tol: LEGENDRE_TOL,
        }
    }

    pub fn with_legendre_tol(mut self, tol: f64) -> Self {
        self.legendre_tol = tol;
        self
    }

    /// Same model and perturbation with a different amplitude.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, ModelError> {
        let mut s = Self::new(self.model.clone(), self.perturbation.clone(), epsilon)?;
        s.legendre_tol = self.legendre_tol;
        Ok(s)
    }

    /// The `eps = 0` system with the perturbation dropped.
    pub fn without_perturbation(&self) -> Self {
        let mut s = Self::unperturbed(self.model.clone());
        s.legendre_tol = self.legendre_tol;
        s
    }

    pub fn model(&self) -> &ContactModel {
        &self.model
    }

    pub fn perturbation(&self) -> Option<&PerturbationSpec> {
        self.perturbation.as_ref()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn lambda(&self) -> f64 {
        self.model.lambda
    }

    pub fn dim(&self) -> usize {
        self.model.dim
    }

    pub fn legendre_tol(&self) -> f64 {
        self.legendre_tol
    }

    fn active_perturbation(&self) -> Option<&dyn Perturbation> {
        if self.epsilon > 0.0 {
            self.perturbation.as_ref().map(|p| p.perturbation.as_ref())
        } else {
            None
        }
    }

    pub fn is_perturbed(&self) -> bool {
        self.active_perturbation().is_some()
    }

    /// `H(x, p, u) + eps * P(x, p, u)`.
    pub fn hamiltonian(&self, x: &Point, p: &Point, u: f64) -> f64 {
        let h = self.model.hamiltonian.value(x, p, u);
        match self.active_perturbation() {
            Some(pert) => h + self.epsilon * pert.value(x, p, u),
            None => h,
        }
    }

    pub fn grad_p(&self, x: &Point, p: &Point, u: f64) -> Point {
        let g = self.model.hamiltonian.grad_p(x, p, u);
        match self.active_perturbation() {
            Some(pert) => axpy(self.epsilon, &pert.grad_p(x, p, u), &g),
            None => g,
        }
    }

    pub fn grad_x(&self, x: &Point, p: &Point, u: f64) -> Point {
        let g = self.model.hamiltonian.grad_x(x, p, u);
        match self.active_perturbation() {
            Some(pert) => axpy(self.epsilon, &pert.grad_x(x, p, u), &g),
            None => g,
        }
    }

    pub fn du(&self, x: &Point, p: &Point, u: f64) -> f64 {
        let d = self.model.hamiltonian.du(x, p, u);
        match self.active_perturbation() {
            Some(pert) => d + self.epsilon * pert.du(x, p, u),
            None => d,
        }
    }

    /// Numerical Legendre transform of `H + eps * P` in `p`.
    ///
    /// The maximizer solves `H_p(x, p, u) = v`. Each axis is solved by a
    /// bracketed Brent iteration started from `p = v`, sweeping the axes
    /// cyclically in 2-D. Golden-section search on the bracket is the
    /// fallback if the root iteration stalls.
    pub fn legendre(&self, x: &Point, v: &Point, u: f64) -> Result<LegendreResult, ModelError> {
        let dim = self.model.dim;
        let radius = self.model.p_search_radius(v);
        let tol = self.legendre_tol;
        let mut p = [0.0; 2];
        for k in 0..dim {
            p[k] = v[k].clamp(-radius, radius);
        }
        let mut evals = 0usize;
        let mut residual = f64::INFINITY;
        for _ in 0..MAX_SWEEPS {
            for axis in 0..dim {
                let mut g = |s: f64| {
                    let mut q = p;
                    q[axis] = s;
                    self.grad_p(x, &q, u)[axis] - v[axis]
                };
                let (root, n) = solve_axis(&mut g, p[axis], radius, tol).ok_or(
                    ModelError::BoxTooSmall {
                        x: *x,
                        v: *v,
                        u,
                        radius,
                    },
                )?;
                evals += n;
                if root.residual > tol {
                    let mut objective = |s: f64| {
                        let mut q = p;
                        q[axis] = s;
                        v[axis] * s - self.hamiltonian(x, &q, u)
                    };
                    let (s, n) = golden_section_max(&mut objective, root.lo, root.hi, 1e-14);
                    evals += n;
                    p[axis] = s;
                } else {
                    p[axis] = root.point;
                }
            }
            let gp = self.grad_p(x, &p, u);
            evals += 1;
            residual = (0..dim).map(|k| (gp[k] - v[k]).abs()).fold(0.0, f64::max);
            if residual <= tol {
                break;
            }
        }
        let h = self.hamiltonian(x, &p, u);
        if !h.is_finite() {
            return Err(ModelError::NonFinite { x: *x, p, u });
        }
        let value = dot(v, &p) - h;
        Ok(LegendreResult {
            value,
            argmax_p: p,
            iterations: evals,
            residual,
        })
    }

    /// `L(x, v, u)`. Uses the model's closed form when the system is
    /// unperturbed and one exists, otherwise [`ContactSystem::legendre`].
    pub fn lagrangian(&self, x: &Point, v: &Point, u: f64) -> Result<f64, ModelError> {
        if !self.is_perturbed() {
            if let Some(l) = self.model.hamiltonian.lagrangian(x, v, u) {
                return Ok(l);
            }
        }
        self.legendre(x, v, u).map(|r| r.value)
    }

    /// `Some((L(x, v, 0), dL/du))` when the Lagrangian is affine in `u`.
    pub fn lagrangian_affine_in_u(&self, x: &Point, v: &Point) -> Option<(f64, f64)> {
        if self.is_perturbed() {
            None
        } else {
            self.model.hamiltonian.lagrangian_affine_in_u(x, v)
        }
    }
}

struct AxisRoot {
    point: f64,
    residual: f64,
    lo: f64,
    hi: f64,
}

/// Finds the root of an increasing function inside `[-radius, radius]`.
/// Returns `None` when the root lies outside the box.
fn solve_axis(
    g: &mut impl FnMut(f64) -> f64,
    guess: f64,
    radius: f64,
    tol: f64,
) -> Option<(AxisRoot, usize)> {
    let mut evals = 1;
    let g0 = g(guess);
    if g0.abs() <= 0.25 * tol {
        return Some((
            AxisRoot {
                point: guess,
                residual: g0.abs(),
                lo: guess,
                hi: guess,
            },
            evals,
        ));
    }
    // expand a bracket away from the guess in the direction of the root
    let dir = if g0 < 0.0 { 1.0 } else { -1.0 };
    let mut step = 1.0;
    let (mut a, mut fa) = (guess, g0);
    let (b, fb) = loop {
        let b = (guess + dir * step).clamp(-radius, radius);
        let fb = g(b);
        evals += 1;
        if fb.signum() != g0.signum() || fb == 0.0 {
            break (b, fb);
        }
        if b.abs() >= radius {
            return None;
        }
        a = b;
        fa = fb;
        step *= 2.0;
    };
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let (point, n) = brent(g, a, fa, b, fb, 0.25 * tol);
    evals += n;
    let residual = g(point).abs();
    evals += 1;
    Some((
        AxisRoot {
            point,
            residual,
            lo,
            hi,
        },
        evals,
    ))
}

/// Brent's root finder on a sign-changing bracket `[a, b]`.
fn brent(
    f: &mut impl FnMut(f64) -> f64,
    mut a: f64,
    mut fa: f64,
    mut b: f64,
    mut fb: f64,
    ftol: f64,
) -> (f64, usize) {
    let mut evals = 0;
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..MAX_ROOT_ITER {
        if fb.abs() <= ftol {
            break;
        }
        if (fb > 0.0) == (fc > 0.0) {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 1e-300;
        let m = 0.5 * (c - b);
        if m.abs() <= tol1 {
            break;
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol1 * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(m) };
        fb = f(b);
        evals += 1;
    }
    (b, evals)
}

fn golden_section_max(f: &mut impl FnMut(f64) -> f64, mut a: f64, mut b: f64, xtol: f64) -> (f64, usize) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut evals = 2;
    while (b - a).abs() > xtol * (1.0 + a.abs().max(b.abs())) && evals < 400 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        evals += 1;
    }
    (0.5 * (a + b), evals)
}

pub(crate) fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub(crate) fn norm(a: &Point) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &Point, y: &Point) -> Point {
    [y[0] + alpha * x[0], y[1] + alpha * x[1]]
}

// ---------------------------------------------------------------------------
// Built-in library
// ---------------------------------------------------------------------------

/// One term `amplitude * cos(2 pi <k, x> + phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierTerm {
    pub amplitude: f64,
    pub wavevector: [i32; 2],
    #[serde(default)]
    pub phase: f64,
}

impl FourierTerm {
    pub fn cosine(amplitude: f64) -> Self {
        Self {
            amplitude,
            wavevector: [1, 0],
            phase: 0.0,
        }
    }

    fn angle(&self, x: &Point) -> f64 {
        2.0 * PI * (self.wavevector[0] as f64 * x[0] + self.wavevector[1] as f64 * x[1])
            + self.phase
    }
}

/// A trigonometric polynomial potential `V(x)` on the torus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrigPotential {
    pub terms: Vec<FourierTerm>,
}

impl TrigPotential {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn cosine(amplitude: f64) -> Self {
        Self {
            terms: vec![FourierTerm::cosine(amplitude)],
        }
    }

    pub fn value(&self, x: &Point) -> f64 {
        self.terms
            .iter()
            .map(|t| t.amplitude * t.angle(x).cos())
            .sum()
    }

    pub fn gradient(&self, x: &Point) -> Point {
        let mut g = [0.0; 2];
        for t in &self.terms {
            let s = -t.amplitude * 2.0 * PI * t.angle(x).sin();
            g[0] += s * t.wavevector[0] as f64;
            g[1] += s * t.wavevector[1] as f64;
        }
        g
    }

    /// `sup |V| <= sum |amplitude|`.
    pub fn bound(&self) -> f64 {
        self.terms.iter().map(|t| t.amplitude.abs()).sum()
    }
}

/// `H = |p|^2 / 2 + V(x) + lambda * u`.
#[derive(Debug, Clone)]
pub struct DiscountedQuadratic {
    pub potential: TrigPotential,
    pub lambda: f64,
}

impl Hamiltonian for DiscountedQuadratic {
    fn value(&self, x: &Point, p: &Point, u: f64) -> f64 {
        0.5 * dot(p, p) + self.potential.value(x) + self.lambda * u
    }

    fn grad_p(&self, _x: &Point, p: &Point, _u: f64) -> Point {
        *p
    }

    fn grad_x(&self, x: &Point, _p: &Point, _u: f64) -> Point {
        self.potential.gradient(x)
    }

    fn du(&self, _x: &Point, _p: &Point, _u: f64) -> f64 {
        self.lambda
    }

    fn lagrangian(&self, x: &Point, v: &Point, u: f64) -> Option<f64> {
        Some(0.5 * dot(v, v) - self.potential.value(x) - self.lambda * u)
    }

    fn lagrangian_affine_in_u(&self, x: &Point, v: &Point) -> Option<(f64, f64)> {
        Some((0.5 * dot(v, v) - self.potential.value(x), -self.lambda))
    }
}

/// `H = |p|^2 / 2 + V(x) + lambda * sin(u)`; `H_u` changes sign.
#[derive(Debug, Clone)]
pub struct NonmonotoneSine {
    pub potential: TrigPotential,
    pub lambda: f64,
}

impl Hamiltonian for NonmonotoneSine {
    fn value(&self, x: &Point, p: &Point, u: f64) -> f64 {
        0.5 * dot(p, p) + self.potential.value(x) + self.lambda * u.sin()
    }

    fn grad_p(&self, _x: &Point, p: &Point, _u: f64) -> Point {
        *p
    }

    fn grad_x(&self, x: &Point, _p: &Point, _u: f64) -> Point {
        self.potential.gradient(x)
    }

    fn du(&self, _x: &Point, _p: &Point, u: f64) -> f64 {
        self.lambda * u.cos()
    }

    fn lagrangian(&self, x: &Point, v: &Point, u: f64) -> Option<f64> {
        Some(0.5 * dot(v, v) - self.potential.value(x) - self.lambda * u.sin())
    }
}

/// Radial cutoff equal to 1 on `[0, plateau]`, 0 beyond `support`, with the
/// degree-7 smoothstep in between (three continuous derivatives at both ends).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub plateau: f64,
    pub support: f64,
}

impl Cutoff {
    pub fn new(plateau: f64, support: f64) -> Result<Self, ModelError> {
        if !(plateau >= 0.0 && support > plateau) {
            return Err(ModelError::InvalidParameter(format!(
                "cutoff needs 0 <= plateau < support, got {plateau}, {support}"
            )));
        }
        Ok(Self { plateau, support })
    }

    pub fn value(&self, r: f64) -> f64 {
        let r = r.abs();
        if r <= self.plateau {
            1.0
        } else if r >= self.support {
            0.0
        } else {
            let s = (r - self.plateau) / (self.support - self.plateau);
            let s4 = s * s * s * s;
            (1.0 - s4 * (35.0 - 84.0 * s + 70.0 * s * s - 20.0 * s * s * s)).clamp(0.0, 1.0)
        }
    }

    /// Derivative with respect to `r` (odd in `r`).
    pub fn derivative(&self, r: f64) -> f64 {
        let a = r.abs();
        if a <= self.plateau || a >= self.support {
            0.0
        } else {
            let w = self.support - self.plateau;
            let s = (a - self.plateau) / w;
            let t = s * (1.0 - s);
            -140.0 * t * t * t / w * r.signum()
        }
    }
}

/// `P = c_p(|p|) c_u(u) cos(2 pi <k, x> + alpha * sum(p) + beta * u)`.
///
/// `bump_x` has `alpha = beta = 0`; `bump_xpu` couples `p` and `u` into the
/// phase; `unit_window` drops the cosine entirely so `P = 1` on the plateau.
#[derive(Debug, Clone)]
pub struct WindowedCosine {
    pub p_cutoff: Cutoff,
    pub u_cutoff: Cutoff,
    pub wavevector: [i32; 2],
    pub p_coupling: f64,
    pub u_coupling: f64,
    pub oscillating: bool,
}

impl WindowedCosine {
    fn phase(&self, x: &Point, p: &Point, u: f64) -> f64 {
        2.0 * PI * (self.wavevector[0] as f64 * x[0] + self.wavevector[1] as f64 * x[1])
            + self.p_coupling * (p[0] + p[1])
            + self.u_coupling * u
    }

    fn carrier(&self, x: &Point, p: &Point, u: f64) -> (f64, f64) {
        if self.oscillating {
            let th = self.phase(x, p, u);
            (th.cos(), -th.sin())
        } else {
            (1.0, 0.0)
        }
    }
}

impl Perturbation for WindowedCosine {
    fn value(&self, x: &Point, p: &Point, u: f64) -> f64 {
        let cp = self.p_cutoff.value(norm(p));
        if cp == 0.0 {
            return 0.0;
        }
        let cu = self.u_cutoff.value(u);
        if cu == 0.0 {
            return 0.0;
        }
        (cp * cu * self.carrier(x, p, u).0).clamp(-1.0, 1.0)
    }

    fn grad_p(&self, x: &Point, p: &Point, u: f64) -> Point {
        let r = norm(p);
        let cp = self.p_cutoff.value(r);
        let cu = self.u_cutoff.value(u);
        if cu == 0.0 || r >= self.p_cutoff.support {
            return [0.0; 2];
        }
        let (c, dc) = self.carrier(x, p, u);
        let dcp = self.p_cutoff.derivative(r);
        let mut g = [0.0; 2];
        for k in 0..2 {
            let radial = if r > 0.0 { dcp * p[k] / r } else { 0.0 };
            g[k] = cu * (radial * c + cp * dc * self.p_coupling);
        }
        g
    }

    fn grad_x(&self, x: &Point, p: &Point, u: f64) -> Point {
        if !self.oscillating {
            return [0.0; 2];
        }
        let amp = self.p_cutoff.value(norm(p)) * self.u_cutoff.value(u);
        let dc = self.carrier(x, p, u).1;
        [
            amp * dc * 2.0 * PI * self.wavevector[0] as f64,
            amp * dc * 2.0 * PI * self.wavevector[1] as f64,
        ]
    }

    fn du(&self, x: &Point, p: &Point, u: f64) -> f64 {
        let cp = self.p_cutoff.value(norm(p));
        if cp == 0.0 {
            return 0.0;
        }
        let cu = self.u_cutoff.value(u);
        let dcu = self.u_cutoff.derivative(u);
        let (c, dc) = self.carrier(x, p, u);
        cp * (dcu * c + cu * dc * self.u_coupling)
    }
}

pub const MODEL_NAMES: [&str; 2] = ["discounted_quadratic", "nonmonotone_sine"];
pub const PERTURBATION_NAMES: [&str; 3] = ["bump_x", "bump_xpu", "unit_window"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub potential: Vec<FourierTerm>,
    #[serde(default)]
    pub p_search_radius: Option<f64>,
}

fn default_dim() -> usize {
    1
}

fn default_lambda() -> f64 {
    1.0
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            dim: 1,
            lambda: 1.0,
            potential: Vec::new(),
            p_search_radius: None,
        }
    }
}

impl ModelParams {
    pub fn cosine(amplitude: f64, lambda: f64) -> Self {
        Self {
            lambda,
            potential: vec![FourierTerm::cosine(amplitude)],
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationParams {
    pub p_plateau: f64,
    pub p_support: f64,
    pub u_plateau: f64,
    pub u_support: f64,
    pub wavevector: [i32; 2],
    pub p_coupling: f64,
    pub u_coupling: f64,
}

impl Default for PerturbationParams {
    fn default() -> Self {
        Self {
            p_plateau: 2.0,
            p_support: 4.0,
            u_plateau: 1.5,
            u_support: 3.0,
            wavevector: [1, 0],
            p_coupling: 0.5,
            u_coupling: 0.5,
        }
    }
}

pub fn builtin_model(name: &str, params: &ModelParams) -> Result<ContactModel, ModelError> {
    let potential = TrigPotential {
        terms: params.potential.clone(),
    };
    if params.dim == 1 && potential.terms.iter().any(|t| t.wavevector[1] != 0) {
        return Err(ModelError::InvalidParameter(
            "1-D potential terms must have a zero second wavevector component".into(),
        ));
    }
    let lambda = params.lambda;
    let h: Arc<dyn Hamiltonian> = match name {
        "discounted_quadratic" => Arc::new(DiscountedQuadratic { potential, lambda }),
        "nonmonotone_sine" => Arc::new(NonmonotoneSine { potential, lambda }),
        other => return Err(ModelError::UnknownName(other.to_string())),
    };
    let mut model = ContactModel::new(params.dim, h, lambda, name)?;
    if let Some(r) = params.p_search_radius {
        if !(r > 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "p_search_radius must be positive, got {r}"
            )));
        }
        model = model.with_p_search_radius(r);
    }
    Ok(model)
}

pub fn builtin_perturbation(
    name: &str,
    params: &PerturbationParams,
) -> Result<PerturbationSpec, ModelError> {
    let p_cutoff = Cutoff::new(params.p_plateau, params.p_support)?;
    let u_cutoff = Cutoff::new(params.u_plateau, params.u_support)?;
    let base = WindowedCosine {
        p_cutoff,
        u_cutoff,
        wavevector: params.wavevector,
        p_coupling: 0.0,
        u_coupling: 0.0,
        oscillating: true,
    };
    let pert = match name {
        "bump_x" => base,
        "bump_xpu" => WindowedCosine {
            p_coupling: params.p_coupling,
            u_coupling: params.u_coupling,
            ..base
        },
        "unit_window" => WindowedCosine {
            oscillating: false,
            ..base
        },
        other => return Err(ModelError::UnknownName(other.to_string())),
    };
    Ok(PerturbationSpec::new(
        Arc::new(pert),
        params.p_support,
        params.u_support,
        name,
    ))
}

// ---------------------------------------------------------------------------
// Sampled checks
// ---------------------------------------------------------------------------

/// Ranges for random `(x, v, u)` samples.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SampleBox {
    pub v_max: f64,
    pub u_max: f64,
}

impl Default for SampleBox {
    fn default() -> Self {
        Self {
            v_max: 4.0,
            u_max: 2.5,
        }
    }
}

fn sample_xvu(rng: &mut ChaCha8Rng, dim: usize, b: &SampleBox) -> (Point, Point, f64) {
    let mut x = [0.0; 2];
    let mut v = [0.0; 2];
    for k in 0..dim {
        x[k] = rng.gen_range(0.0..1.0);
        v[k] = rng.gen_range(-b.v_max..=b.v_max);
    }
    (x, v, rng.gen_range(-b.u_max..=b.u_max))
}

/// `max |L^eps - L|` over `samples` random points.
pub fn legendre_gap_check(
    system: &ContactSystem,
    samples: usize,
    sample_box: &SampleBox,
    seed: u64,
) -> Result<f64, ModelError> {
    let base = system.without_perturbation();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gap: f64 = 0.0;
    for _ in 0..samples {
        let (x, v, u) = sample_xvu(&mut rng, system.dim(), sample_box);
        let le = system.legendre(&x, &v, u)?.value;
        let l0 = base.legendre(&x, &v, u)?.value;
        gap = gap.max((le - l0).abs());
    }
    Ok(gap)
}

/// `max |argmax_p(eps) - argmax_p(0)|`, i.e. the sup gap of `dL/dv`.
pub fn dldv_gap_check(
    system: &ContactSystem,
    samples: usize,
    sample_box: &SampleBox,
    seed: u64,
) -> Result<f64, ModelError> {
    let base = system.without_perturbation();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gap: f64 = 0.0;
    for _ in 0..samples {
        let (x, v, u) = sample_xvu(&mut rng, system.dim(), sample_box);
        let pe = system.legendre(&x, &v, u)?.argmax_p;
        let p0 = base.legendre(&x, &v, u)?.argmax_p;
        gap = gap.max(norm(&[pe[0] - p0[0], pe[1] - p0[1]]));
    }
    Ok(gap)
}

/// Symmetric 2x2 Hessian in `p` by central differences of a gradient.
fn hessian_p(grad: impl Fn(&Point) -> Point, p: &Point, dim: usize) -> [[f64; 2]; 2] {
    let h = 1e-5;
    let mut m = [[0.0; 2]; 2];
    for j in 0..dim {
        let mut a = *p;
        let mut b = *p;
        a[j] += h;
        b[j] -= h;
        let (ga, gb) = (grad(&a), grad(&b));
        for i in 0..dim {
            m[i][j] = (ga[i] - gb[i]) / (2.0 * h);
        }
    }
    if dim == 2 {
        let s = 0.5 * (m[0][1] + m[1][0]);
        m[0][1] = s;
        m[1][0] = s;
    }
    m
}

fn eigenvalues(m: &[[f64; 2]; 2], dim: usize) -> (f64, f64) {
    if dim == 1 {
        return (m[0][0], m[0][0]);
    }
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    (0.5 * tr - disc, 0.5 * tr + disc)
}

/// Sampled proxies for the standing assumptions on a model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionReport {
    /// `max |H_u| / lambda` over samples; must not exceed 1.
    pub hu_ratio: f64,
    /// Smallest eigenvalue of `H_pp` over samples; must be positive.
    pub min_hpp_eigenvalue: f64,
    /// `min (H - 2|p|)` over the boundary of the sampled `p`-box.
    pub superlinearity_offset: f64,
    pub samples: usize,
}

impl ConditionReport {
    pub fn holds(&self) -> bool {
        self.hu_ratio <= 1.0 + 1e-12 && self.min_hpp_eigenvalue > 0.0
    }
}

pub fn check_model_conditions(
    system: &ContactSystem,
    samples: usize,
    p_box: f64,
    u_max: f64,
    seed: u64,
) -> ConditionReport {
    let dim = system.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hu_ratio: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    let mut superlinear = f64::INFINITY;
    for _ in 0..samples {
        let mut x = [0.0; 2];
        let mut p = [0.0; 2];
        for k in 0..dim {
            x[k] = rng.gen_range(0.0..1.0);
            p[k] = rng.gen_range(-p_box..=p_box);
        }
        let u = rng.gen_range(-u_max..=u_max);
        hu_ratio = hu_ratio.max(system.du(&x, &p, u).abs() / system.lambda());
        let hess = hessian_p(|q| system.grad_p(&x, q, u), &p, dim);
        min_eig = min_eig.min(eigenvalues(&hess, dim).0);
        // push p radially to the box boundary
        let r = norm(&p).max(1e-12);
        let edge = [p[0] / r * p_box, p[1] / r * p_box];
        superlinear = superlinear.min(system.hamiltonian(&x, &edge, u) - 2.0 * norm(&edge));
    }
    ConditionReport {
        hu_ratio,
        min_hpp_eigenvalue: min_eig,
        superlinearity_offset: superlinear,
        samples,
    }
}

/// Computable stand-in for the admissible perturbation range:
/// `0.5 * min eig(H_pp) / max |P_pp|` over random samples inside the
/// perturbation's support. Infinite when `P` has no curvature in `p`.
pub fn theta_proxy(
    model: &ContactModel,
    perturbation: &PerturbationSpec,
    samples: usize,
    seed: u64,
) -> f64 {
    let dim = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = model.hamiltonian();
    let pert = perturbation.perturbation();
    let mut min_h = f64::INFINITY;
    let mut max_p: f64 = 0.0;
    let pb = perturbation.p_support();
    let ub = perturbation.u_support();
    for _ in 0..samples {
        let mut x = [0.0; 2];
        let mut p = [0.0; 2];
        for k in 0..dim {
            x[k] = rng.gen_range(0.0..1.0);
            p[k] = rng.gen_range(-pb..=pb);
        }
        let u = rng.gen_range(-ub..=ub);
        let hh = hessian_p(|q| h.grad_p(&x, q, u), &p, dim);
        min_h = min_h.min(eigenvalues(&hh, dim).0);
        let hp = hessian_p(|q| pert.grad_p(&x, q, u), &p, dim);
        let (lo, hi) = eigenvalues(&hp, dim);
        max_p = max_p.max(lo.abs().max(hi.abs()));
    }
    if max_p == 0.0 {
        f64::INFINITY
    } else {
        0.5 * min_h / max_p
    }
}
