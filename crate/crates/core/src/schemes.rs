//! One-step kernels of the `(theta, eta)` double implicit Milstein family
//!
//! ```text
//! Y+ = Y + theta f(Y+) h + (1 - theta) f(Y) h + g(Y) dW
//!        + sum_{j1,j2} L^{j1} g_{j2}(Y) I[j1][j2]
//!        + (eta/2) h sum_j L^j g_j(Y) - (eta/2) h sum_j L^j g_j(Y+)
//! ```
//!
//! together with its reductions (theta-Milstein at `eta = 0`, the scalar
//! form), the Euler-Maruyama and backward Euler baselines, and the solvers for
//! the implicit equation `y - theta h f(y) + (eta/2) h sum_j L^j g_j(y) = E`.

use nalgebra::DMatrix;

use crate::error::{Result, SdeError};
use crate::models::{AitSahaliaParams, Heston32Params};
use crate::noise::{iterated_integrals_commutative, IteratedIntegrals};
use crate::sde::{
    ensure_in_domain, finite_difference_jacobian, levy_coefficient_eval, levy_diagonal_sum,
    ModelDynamics, SchemeParams, StateVector,
};

/// Hard cap on geometric bracket expansions in [`solve_scalar_monotone`].
pub const MAX_BRACKET_EXPANSIONS: usize = 200;

const MAX_BISECTIONS: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    /// No implicit part (`theta = eta = 0`).
    Explicit,
    ClosedForm,
    Newton,
    Bisection,
    NewtonThenBisection,
    FixedPoint,
}

impl SolveMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveMethod::Explicit => "explicit",
            SolveMethod::ClosedForm => "closed_form",
            SolveMethod::Newton => "newton",
            SolveMethod::Bisection => "bisection",
            SolveMethod::NewtonThenBisection => "newton_then_bisection",
            SolveMethod::FixedPoint => "fixed_point",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImplicitSolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub method: SolveMethod,
    pub bracket: Option<(f64, f64)>,
}

impl ImplicitSolveReport {
    fn explicit() -> Self {
        ImplicitSolveReport {
            iterations: 0,
            final_residual: 0.0,
            method: SolveMethod::Explicit,
            bracket: None,
        }
    }
}

/// Which route solves the implicit equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    /// Model closed form if offered, else the scalar monotone solver for
    /// `d = 1`, else the generic multi-dimensional solver.
    #[default]
    Auto,
    ClosedForm,
    ScalarMonotone,
    Newton,
}

/// Everything one step of the scheme consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct StepContext {
    pub x: StateVector,
    pub h: f64,
    pub dw: Vec<f64>,
    pub integrals: IteratedIntegrals,
}

impl StepContext {
    pub fn new(x: StateVector, h: f64, dw: Vec<f64>, integrals: IteratedIntegrals) -> Self {
        StepContext { x, h, dw, integrals }
    }

    /// Context with iterated integrals assembled from `dw` alone.
    pub fn commutative(x: StateVector, h: f64, dw: Vec<f64>) -> Self {
        let integrals = iterated_integrals_commutative(&dw, h);
        StepContext { x, h, dw, integrals }
    }

    pub fn scalar(x: f64, h: f64, dw: f64) -> Self {
        Self::commutative(StateVector::from_element(1, x), h, vec![dw])
    }

    fn check(&self, model: &dyn ModelDynamics) -> Result<()> {
        let (d, m) = (model.state_dim(), model.noise_dim());
        if self.x.len() != d || self.dw.len() != m || self.integrals.noise_dim() != m {
            return Err(SdeError::argument(format!(
                "step context shape (x: {}, dW: {}, I: {}) does not match model (d = {d}, m = {m})",
                self.x.len(),
                self.dw.len(),
                self.integrals.noise_dim()
            )));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(SdeError::argument(format!("step size h = {} must be positive", self.h)));
        }
        ensure_in_domain(model, &self.x)
    }
}

fn diffusion_times_dw(model: &dyn ModelDynamics, x: &StateVector, dw: &[f64]) -> StateVector {
    let mut acc = StateVector::zeros(model.state_dim());
    for (j, w) in dw.iter().enumerate() {
        acc += model.diffusion_column(x, j) * *w;
    }
    acc
}

fn levy_times_integrals(model: &dyn ModelDynamics, x: &StateVector, integrals: &IteratedIntegrals) -> Result<StateVector> {
    let m = model.noise_dim();
    let mut acc = StateVector::zeros(model.state_dim());
    for j1 in 0..m {
        for j2 in 0..m {
            let i = integrals.get(j1, j2);
            if i != 0.0 {
                acc += levy_coefficient_eval(model, x, j1, j2)? * i;
            }
        }
    }
    Ok(acc)
}

/// All terms of the scheme that do not involve `Y_{n+1}`:
/// `Y + (1-theta) f(Y) h + g(Y) dW + sum L^{j1} g_{j2}(Y) I[j1][j2] + (eta/2) h sum_j L^j g_j(Y)`.
pub fn assemble_explicit_part(
    model: &dyn ModelDynamics,
    params: &SchemeParams,
    ctx: &StepContext,
) -> Result<StateVector> {
    ctx.check(model)?;
    let x = &ctx.x;
    let h = ctx.h;
    let mut out = x.clone();
    if params.theta != 1.0 {
        out += model.drift(x) * ((1.0 - params.theta) * h);
    }
    out += diffusion_times_dw(model, x, &ctx.dw);
    out += levy_times_integrals(model, x, &ctx.integrals)?;
    if params.eta != 0.0 {
        out += levy_diagonal_sum(model, x)? * (0.5 * params.eta * h);
    }
    Ok(out)
}

/// The explicit Milstein step from the same context; used as the Newton
/// predictor.
fn explicit_milstein(model: &dyn ModelDynamics, ctx: &StepContext) -> Result<StateVector> {
    let x = &ctx.x;
    let mut out = x.clone();
    out += model.drift(x) * ctx.h;
    out += diffusion_times_dw(model, x, &ctx.dw);
    out += levy_times_integrals(model, x, &ctx.integrals)?;
    Ok(out)
}

/// Residual `y - theta h f(y) + (eta/2) h sum_j L^j g_j(y) - explicit`.
pub fn implicit_residual(
    model: &dyn ModelDynamics,
    theta: f64,
    eta: f64,
    h: f64,
    y: &StateVector,
    explicit: &StateVector,
) -> Result<StateVector> {
    ensure_in_domain(model, y)?;
    let mut r = y - explicit;
    if theta != 0.0 {
        r -= model.drift(y) * (theta * h);
    }
    if eta != 0.0 {
        r += levy_diagonal_sum(model, y)? * (0.5 * eta * h);
    }
    Ok(r)
}

fn escaped(state: &StateVector, report: ImplicitSolveReport) -> SdeError {
    SdeError::DomainEscape {
        state: state.iter().copied().collect(),
        report,
    }
}

/// Solves `y - theta h f(y) + (eta/2) h L(y) = explicit` by the chosen route.
fn solve_implicit_equation(
    model: &dyn ModelDynamics,
    params: &SchemeParams,
    h: f64,
    explicit: &StateVector,
    predictor: &StateVector,
    fallback_start: &StateVector,
    solver: Solver,
) -> Result<(StateVector, ImplicitSolveReport)> {
    if params.is_explicit() {
        let report = ImplicitSolveReport::explicit();
        if !model.in_domain(explicit) {
            return Err(escaped(explicit, report));
        }
        return Ok((explicit.clone(), report));
    }
    let route = match solver {
        Solver::Auto => {
            if let Some(result) = model.closed_form_solve(params, explicit, h) {
                return result;
            }
            if model.state_dim() == 1 {
                Solver::ScalarMonotone
            } else {
                Solver::Newton
            }
        }
        other => other,
    };
    match route {
        Solver::ClosedForm => model.closed_form_solve(params, explicit, h).unwrap_or_else(|| {
            Err(SdeError::Capability(
                "model offers no closed-form implicit solve for these parameters".into(),
            ))
        }),
        Solver::ScalarMonotone => {
            if model.state_dim() != 1 {
                return Err(SdeError::argument("scalar monotone solver needs d = 1"));
            }
            let lower = model.domain().lower_bound();
            let start = if model.in_domain(predictor) {
                predictor[0]
            } else if model.in_domain(explicit) {
                explicit[0]
            } else {
                fallback_start[0]
            };
            let e = explicit.clone();
            let residual = |y: f64| {
                let yv = StateVector::from_element(1, y);
                match implicit_residual(model, params.theta, params.eta, h, &yv, &e) {
                    Ok(r) => r[0],
                    Err(_) => f64::NAN,
                }
            };
            let (root, report) = solve_scalar_monotone(residual, start, params, lower)?;
            Ok((StateVector::from_element(1, root), report))
        }
        Solver::Newton | Solver::Auto => newton_system(model, params, h, explicit, predictor, fallback_start),
    }
}

/// Multi-dimensional solve: Newton when the model has a drift Jacobian
/// (the Levy-diagonal part differentiated numerically), else a damped
/// fixed-point iteration.
fn newton_system(
    model: &dyn ModelDynamics,
    params: &SchemeParams,
    h: f64,
    explicit: &StateVector,
    predictor: &StateVector,
    fallback_start: &StateVector,
) -> Result<(StateVector, ImplicitSolveReport)> {
    let (theta, eta, tol) = (params.theta, params.eta, params.solver_tol);
    let d = model.state_dim();
    let mut y = if model.in_domain(predictor) {
        predictor.clone()
    } else {
        fallback_start.clone()
    };
    let mut report = ImplicitSolveReport {
        iterations: 0,
        final_residual: f64::INFINITY,
        method: SolveMethod::Newton,
        bracket: None,
    };
    let accept = |r: &StateVector, y: &StateVector| r.norm() <= tol * (1.0 + y.norm());

    if model.drift_jacobian(&y).is_some() {
        for _ in 0..params.max_newton_iters {
            let r = implicit_residual(model, theta, eta, h, &y, explicit)
                .map_err(|_| escaped(&y, report))?;
            report.final_residual = r.norm();
            let jf = model.drift_jacobian(&y).ok_or_else(|| {
                SdeError::Capability("drift Jacobian vanished during Newton solve".into())
            })?;
            let mut jac = DMatrix::<f64>::identity(d, d) - jf * (theta * h);
            if eta != 0.0 {
                let jl = finite_difference_jacobian(
                    |z| levy_diagonal_sum(model, z).unwrap_or_else(|_| StateVector::from_element(d, f64::NAN)),
                    &y,
                    model.domain(),
                )?;
                jac += jl * (0.5 * eta * h);
            }
            let step = jac.lu().solve(&r).ok_or_else(|| SdeError::Solve {
                message: "singular Newton matrix".into(),
                report,
            })?;
            y -= &step;
            report.iterations += 1;
            if !model.in_domain(&y) {
                return Err(escaped(&y, report));
            }
            if step.norm() <= 4.0 * f64::EPSILON * (1.0 + y.norm()) {
                break;
            }
        }
    } else {
        report.method = SolveMethod::FixedPoint;
        let max_iters = params.max_newton_iters * 20;
        for _ in 0..max_iters {
            let r = implicit_residual(model, theta, eta, h, &y, explicit)
                .map_err(|_| escaped(&y, report))?;
            report.final_residual = r.norm();
            if accept(&r, &y) && r.norm() <= 4.0 * f64::EPSILON * (1.0 + y.norm()) {
                break;
            }
            // y <- y - r/2, i.e. halfway towards E + theta h f(y) - (eta/2) h L(y).
            y -= r * 0.5;
            report.iterations += 1;
            if !model.in_domain(&y) {
                return Err(escaped(&y, report));
            }
        }
    }
    let r = implicit_residual(model, theta, eta, h, &y, explicit).map_err(|_| escaped(&y, report))?;
    report.final_residual = r.norm();
    if accept(&r, &y) {
        Ok((y, report))
    } else {
        Err(SdeError::Solve {
            message: format!(
                "{} did not reach residual {:e} (got {:e})",
                report.method.as_str(),
                tol * (1.0 + y.norm()),
                report.final_residual
            ),
            report,
        })
    }
}

/// One step of the double implicit Milstein family.
pub fn implicit_step(
    model: &dyn ModelDynamics,
    params: &SchemeParams,
    ctx: &StepContext,
    solver: Solver,
) -> Result<(StateVector, ImplicitSolveReport)> {
    params.validate()?;
    let explicit = assemble_explicit_part(model, params, ctx)?;
    if params.is_explicit() {
        return solve_implicit_equation(model, params, ctx.h, &explicit, &explicit, &ctx.x, solver);
    }
    let predictor = explicit_milstein(model, ctx)?;
    solve_implicit_equation(model, params, ctx.h, &explicit, &predictor, &ctx.x, solver)
}

/// The classical theta-Milstein method: [`implicit_step`] with `eta = 0`.
pub fn step_theta_milstein(
    model: &dyn ModelDynamics,
    params: &SchemeParams,
    ctx: &StepContext,
) -> Result<StateVector> {
    implicit_step(model, &params.with_eta(0.0), ctx, Solver::Auto).map(|(y, _)| y)
}

/// The family written out for `d = m = 1`:
///
/// ```text
/// Y+ = Y + theta f(Y+) h + (1-theta) f(Y) h + g(Y) dW + (1/2) g'g(Y) dW^2
///        - ((1-eta)/2) g'g(Y) h - (eta/2) g'g(Y+) h
/// ```
///
/// Always solved with the scalar monotone solver, never a model closed form.
pub fn step_scalar_ddim(model: &dyn ModelDynamics, params: &SchemeParams, ctx: &StepContext) -> Result<f64> {
    params.validate()?;
    if model.state_dim() != 1 || model.noise_dim() != 1 {
        return Err(SdeError::argument("scalar kernel needs d = m = 1"));
    }
    ctx.check(model)?;
    let (theta, eta, h) = (params.theta, params.eta, ctx.h);
    let x = ctx.x[0];
    let dw = ctx.dw[0];
    let xv = &ctx.x;
    let f = model.drift(xv)[0];
    let g = model.diffusion_column(xv, 0)[0];
    let gg = levy_coefficient_eval(model, xv, 0, 0)?[0];

    let explicit = x + (1.0 - theta) * f * h + g * dw + 0.5 * gg * dw * dw - 0.5 * (1.0 - eta) * gg * h;
    if params.is_explicit() {
        let y = StateVector::from_element(1, explicit);
        if !model.in_domain(&y) {
            return Err(escaped(&y, ImplicitSolveReport::explicit()));
        }
        return Ok(explicit);
    }
    let predictor = x + f * h + g * dw + 0.5 * gg * (dw * dw - h);
    let lower = model.domain().lower_bound();
    let admissible = |v: f64| v.is_finite() && lower.is_none_or(|l| v > l);
    let start = if admissible(predictor) {
        predictor
    } else if admissible(explicit) {
        explicit
    } else {
        x
    };
    let residual = |y: f64| {
        let yv = StateVector::from_element(1, y);
        if !model.in_domain(&yv) {
            return f64::NAN;
        }
        let fy = model.drift(&yv)[0];
        let ggy = match levy_coefficient_eval(model, &yv, 0, 0) {
            Ok(v) => v[0],
            Err(_) => return f64::NAN,
        };
        y - theta * h * fy + 0.5 * eta * h * ggy - explicit
    };
    solve_scalar_monotone(residual, start, params, lower).map(|(y, _)| y)
}

/// `Y + f(Y) h + sum_j g_j(Y) dW_j`.
pub fn step_euler_maruyama(model: &dyn ModelDynamics, ctx: &StepContext) -> Result<StateVector> {
    ctx.check(model)?;
    let y = &ctx.x + model.drift(&ctx.x) * ctx.h + diffusion_times_dw(model, &ctx.x, &ctx.dw);
    if !model.in_domain(&y) {
        return Err(escaped(&y, ImplicitSolveReport::explicit()));
    }
    Ok(y)
}

/// `Y+ = Y + f(Y+) h + sum_j g_j(Y) dW_j`, solved with the same machinery as
/// the Milstein family.
pub fn step_backward_euler(
    model: &dyn ModelDynamics,
    params: &SchemeParams,
    ctx: &StepContext,
) -> Result<(StateVector, ImplicitSolveReport)> {
    params.validate()?;
    ctx.check(model)?;
    let implicit = SchemeParams {
        theta: 1.0,
        eta: 0.0,
        ..*params
    };
    let explicit = &ctx.x + diffusion_times_dw(model, &ctx.x, &ctx.dw);
    let predictor = &explicit + model.drift(&ctx.x) * ctx.h;
    solve_implicit_equation(model, &implicit, ctx.h, &explicit, &predictor, &ctx.x, Solver::Auto)
}

/// Newton from `predictor` with a finite-difference slope; on divergence,
/// domain escape or stagnation, geometric bracket expansion from the last
/// admissible point followed by bisection.
///
/// `residual` must be strictly increasing on `(lower, inf)` (or the whole
/// line when `lower` is `None`) and change sign there. It may return NaN
/// outside its domain. The returned root satisfies
/// `|residual(root)| <= solver_tol (1 + |root|)`.
pub fn solve_scalar_monotone<F>(
    residual: F,
    predictor: f64,
    params: &SchemeParams,
    lower: Option<f64>,
) -> Result<(f64, ImplicitSolveReport)>
where
    F: Fn(f64) -> f64,
{
    let tol = params.solver_tol;
    let admissible = |v: f64| v.is_finite() && lower.is_none_or(|l| v > l);
    let within_tol = |r: f64, y: f64| r.abs() <= tol * (1.0 + y.abs());
    let mut report = ImplicitSolveReport {
        iterations: 0,
        final_residual: f64::INFINITY,
        method: SolveMethod::Newton,
        bracket: None,
    };

    let slope_at = |y: f64| {
        let delta = 1e-7 * y.abs().max(1.0);
        let (lo, hi) = match lower {
            Some(l) if y - delta <= l => (y, y + delta),
            _ => (y - delta, y + delta),
        };
        (residual(hi) - residual(lo)) / (hi - lo)
    };

    // Newton phase.
    let mut y = predictor;
    let mut last_good = if admissible(predictor) { Some(predictor) } else { None };
    if admissible(y) {
        for _ in 0..params.max_newton_iters {
            let r = residual(y);
            if !r.is_finite() {
                break;
            }
            last_good = Some(y);
            if r == 0.0 {
                break;
            }
            let slope = slope_at(y);
            if !(slope.is_finite() && slope > 0.0) {
                break;
            }
            let next = y - r / slope;
            report.iterations += 1;
            if !admissible(next) {
                break;
            }
            let moved = (next - y).abs();
            y = next;
            if moved <= 1e-15 * (1.0 + y.abs()) {
                break;
            }
        }
        if admissible(y) {
            let r = residual(y);
            if r.is_finite() && within_tol(r, y) {
                report.final_residual = r.abs();
                return Ok((y, report));
            }
        }
    }

    // Bracketing phase.
    report.method = if report.iterations > 0 {
        SolveMethod::NewtonThenBisection
    } else {
        SolveMethod::Bisection
    };
    let start = match last_good {
        Some(v) => v,
        None => match lower {
            Some(l) => l + 1.0,
            None => 0.0,
        },
    };
    let r0 = residual(start);
    if r0 == 0.0 {
        report.final_residual = 0.0;
        report.bracket = Some((start, start));
        return Ok((start, report));
    }
    if !r0.is_finite() {
        return Err(SdeError::Solve {
            message: format!("residual is not finite at bracket start {start}"),
            report,
        });
    }
    let factor = params.bracket_expansion;
    let width = 1e-3 * start.abs().max(1.0);
    // Point k steps away from `start` in direction `dir` (+1 up, -1 down).
    let probe = |k: i32, dir: f64| -> f64 {
        match lower {
            Some(l) => {
                let gap = start - l;
                if dir > 0.0 {
                    l + gap * factor.powi(k)
                } else {
                    l + gap / factor.powi(k)
                }
            }
            None => start + dir * width * factor.powi(k),
        }
    };
    let dir = if r0 > 0.0 { -1.0 } else { 1.0 };
    let mut far = None;
    let mut near = start;
    for k in 1..=MAX_BRACKET_EXPANSIONS as i32 {
        let p = probe(k, dir);
        let rp = residual(p);
        if rp.is_finite() && (rp > 0.0) != (r0 > 0.0) || rp == 0.0 {
            far = Some(p);
            break;
        }
        if rp.is_finite() {
            near = p;
        }
    }
    let Some(far) = far else {
        return Err(SdeError::Solve {
            message: format!("no sign change within {MAX_BRACKET_EXPANSIONS} bracket expansions"),
            report,
        });
    };
    let (mut lo, mut hi) = if dir > 0.0 { (near, far) } else { (far, near) };
    report.bracket = Some((lo, hi));
    let mut r_lo = residual(lo);
    let mut r_hi = residual(hi);
    for _ in 0..MAX_BISECTIONS {
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        let rm = residual(mid);
        report.iterations += 1;
        if rm == 0.0 {
            lo = mid;
            hi = mid;
            r_lo = 0.0;
            r_hi = 0.0;
            break;
        }
        if rm < 0.0 {
            lo = mid;
            r_lo = rm;
        } else {
            hi = mid;
            r_hi = rm;
        }
    }
    let (root, r) = if r_lo.abs() <= r_hi.abs() { (lo, r_lo) } else { (hi, r_hi) };
    report.final_residual = r.abs();
    // A flat residual means the sign change came from rounding alone.
    if !(slope_at(root) > 0.0) {
        return Err(SdeError::Solve {
            message: format!("residual is flat at {root}; the implicit equation is singular"),
            report,
        });
    }
    if within_tol(r, root) {
        Ok((root, report))
    } else {
        Err(SdeError::Solve {
            message: format!(
                "bisection stalled at {root} with residual {:e} above tolerance",
                r.abs()
            ),
            report,
        })
    }
}

/// Positive root of `a y^2 + b y = rhs` for `a >= 0`, `rhs >= 0`, written to
/// avoid cancellation: `2 rhs / (b + sqrt(b^2 + 4 a rhs))` when `b > 0`,
/// `(sqrt(b^2 + 4 a rhs) - b) / (2a)` otherwise.
pub fn positive_quadratic_root(a: f64, b: f64, rhs: f64) -> f64 {
    if a == 0.0 {
        return rhs / b;
    }
    let disc = (b * b + 4.0 * a * rhs).sqrt();
    if b > 0.0 {
        2.0 * rhs / (b + disc)
    } else {
        (disc - b) / (2.0 * a)
    }
}

/// Closed-form step of the `theta = eta = 1` scheme for the Heston 3/2 model:
/// the positive root of `(alpha + 3/4 beta^2) h Y^2 + (1 - mu h) Y - B = 0`
/// with `B = Y_n + beta Y_n^{3/2} dW + 3/4 beta^2 Y_n^2 dW^2`.
///
/// `B` is positive for every `dW` (its discriminant in `dW` is
/// `-2 beta^2 Y_n^3`), so the result is positive for every `h > 0`.
pub fn heston32_closed_form_step(p: &Heston32Params, ctx: &StepContext) -> Result<(f64, ImplicitSolveReport)> {
    let y = ctx.x[0];
    if !(y > 0.0 && y.is_finite()) {
        return Err(SdeError::Domain { state: vec![y] });
    }
    if !(ctx.h > 0.0) {
        return Err(SdeError::argument(format!("step size h = {} must be positive", ctx.h)));
    }
    let (h, dw) = (ctx.h, ctx.dw[0]);
    let b2 = p.beta * p.beta;
    let rhs = y + p.beta * y * y.sqrt() * dw + 0.75 * b2 * y * y * dw * dw;
    let a = (p.alpha + 0.75 * b2) * h;
    let b = 1.0 - p.mu * h;
    let root = positive_quadratic_root(a, b, rhs);
    let residual = heston32_scheme_residual(p, y, h, dw, root);
    let report = ImplicitSolveReport {
        iterations: 0,
        final_residual: residual.abs(),
        method: SolveMethod::ClosedForm,
        bracket: None,
    };
    if !(root > 0.0 && root.is_finite()) {
        return Err(escaped(&StateVector::from_element(1, root), report));
    }
    Ok((root, report))
}

/// `Y+ - [Y + Y+(mu - alpha Y+) h + beta Y^{3/2} dW + 3/4 beta^2 Y^2 dW^2 - 3/4 beta^2 Y+^2 h]`.
pub fn heston32_scheme_residual(p: &Heston32Params, y: f64, h: f64, dw: f64, next: f64) -> f64 {
    let b2 = p.beta * p.beta;
    next - (y + next * (p.mu - p.alpha * next) * h + p.beta * y.powf(1.5) * dw
        + 0.75 * b2 * y * y * dw * dw
        - 0.75 * b2 * next * next * h)
}

/// Right-hand side `Y + sigma Y^rho dW + rho sigma^2 Y^{2 rho - 1} (dW^2 - h) / 2`
/// of the semi-implicit Milstein step for the Ait-Sahalia model.
pub fn ait_sahalia_rhs(p: &AitSahaliaParams, y: f64, h: f64, dw: f64) -> f64 {
    let s2 = p.sigma * p.sigma;
    y + p.sigma * y.powf(p.rho) * dw + 0.5 * p.rho * s2 * y.powf(2.0 * p.rho - 1.0) * (dw * dw - h)
}

/// `y - h (alpha_m1 / y - alpha_0 + alpha_1 y - alpha_2 y^kappa) - rhs`,
/// strictly increasing on `(0, inf)` when `h <= 1/alpha_1`.
pub fn ait_sahalia_residual(p: &AitSahaliaParams, h: f64, rhs: f64, y: f64) -> f64 {
    y - h * (p.alpha_m1 / y - p.alpha_0 + p.alpha_1 * y - p.alpha_2 * y.powf(p.kappa)) - rhs
}

/// Semi-implicit (`theta = 1, eta = 0`) Milstein step for the Ait-Sahalia
/// model. The residual runs from `-inf` at `0+` to `+inf`, so a unique
/// positive root exists for any sign of the right-hand side.
pub fn ait_sahalia_implicit_step(
    p: &AitSahaliaParams,
    settings: &SchemeParams,
    ctx: &StepContext,
) -> Result<(f64, ImplicitSolveReport)> {
    let y = ctx.x[0];
    let (h, dw) = (ctx.h, ctx.dw[0]);
    if !(y > 0.0 && y.is_finite()) {
        return Err(SdeError::argument(format!("Ait-Sahalia state {y} must be positive")));
    }
    if !(h > 0.0 && h <= 1.0 / p.alpha_1) {
        return Err(SdeError::argument(format!(
            "Ait-Sahalia step needs h in (0, 1/alpha_1 = {}], got {h}",
            1.0 / p.alpha_1
        )));
    }
    let rhs = ait_sahalia_rhs(p, y, h, dw);
    let drift = p.alpha_m1 / y - p.alpha_0 + p.alpha_1 * y - p.alpha_2 * y.powf(p.kappa);
    let predictor = rhs + h * drift;
    let start = if predictor > 0.0 && predictor.is_finite() {
        predictor
    } else if rhs > 0.0 {
        rhs
    } else {
        y
    };
    let residual = |v: f64| {
        if v > 0.0 {
            ait_sahalia_residual(p, h, rhs, v)
        } else {
            f64::NAN
        }
    };
    solve_scalar_monotone(residual, start, settings, Some(0.0))
}

/// Scheme selector used by the experiment harness and the CLI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Milstein(SchemeParams),
    EulerMaruyama,
    BackwardEuler(SchemeParams),
}

impl Scheme {
    pub fn step(&self, model: &dyn ModelDynamics, ctx: &StepContext) -> Result<(StateVector, ImplicitSolveReport)> {
        match self {
            Scheme::Milstein(p) => implicit_step(model, p, ctx, Solver::Auto),
            Scheme::EulerMaruyama => step_euler_maruyama(model, ctx).map(|y| (y, ImplicitSolveReport::explicit())),
            Scheme::BackwardEuler(p) => step_backward_euler(model, p, ctx),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Milstein(_) => "milstein",
            Scheme::EulerMaruyama => "euler-maruyama",
            Scheme::BackwardEuler(_) => "backward-euler",
        }
    }

    /// Whether steps consume iterated integrals.
    pub fn uses_iterated_integrals(&self) -> bool {
        matches!(self, Scheme::Milstein(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ait_sahalia_dynamics, gbm_dynamics, heston32_dynamics, FnModel};

    fn linear(lambda: f64) -> FnModel {
        FnModel::builder(1, 1)
            .drift(move |x| x * lambda)
            .diffusion(|_, _| StateVector::zeros(1))
            .commutative(true)
            .build()
    }

    fn params(theta: f64, eta: f64) -> SchemeParams {
        SchemeParams::new(theta, eta).unwrap()
    }

    /// Plain bisection on [lo, hi] down to the width floor.
    fn bisect_oracle(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        assert!(f(lo) < 0.0 && f(hi) > 0.0);
        while hi - lo > 1e-15 * hi.abs().max(1.0) {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn zero_coefficients_give_identity() {
        let model = FnModel::builder(1, 1)
            .drift(|x| StateVector::zeros(x.len()))
            .diffusion(|_, _| StateVector::zeros(1))
            .commutative(true)
            .build();
        let ctx = StepContext::scalar(1.7, 0.1, 0.3);
        let e = assemble_explicit_part(&model, &params(0.3, 0.6), &ctx).unwrap();
        assert_eq!(e[0], 1.7);
    }

    #[test]
    fn explicit_part_scalar_expansion() {
        // theta = 1, eta = 0: explicit part is Y + g dW + g'g (dW^2 - h)/2.
        let (mu, sigma) = (0.8, 0.6);
        let model = gbm_dynamics(mu, sigma, 1.0);
        let (x, h, dw) = (1.3, 0.05, -0.21);
        let ctx = StepContext::scalar(x, h, dw);
        let e = assemble_explicit_part(&model, &params(1.0, 0.0), &ctx).unwrap()[0];
        let oracle = x + sigma * x * dw + 0.5 * sigma * sigma * x * (dw * dw - h);
        assert!((e - oracle).abs() <= 1e-15 * oracle.abs());
    }

    #[test]
    fn explicit_part_gbm_plug_in() {
        let (mu, sigma, x, h) = (0.5, 0.4, 2.0, 0.1);
        let model = gbm_dynamics(mu, sigma, 1.0);
        let ctx = StepContext::scalar(x, h, 0.0);
        assert_eq!(ctx.integrals.get(0, 0), -h / 2.0);
        let e = assemble_explicit_part(&model, &params(0.0, 0.0), &ctx).unwrap()[0];
        let oracle = x * (1.0 + mu * h - sigma * sigma * h / 2.0);
        assert!((e - oracle).abs() <= 1e-15 * oracle);
    }

    #[test]
    fn explicit_scheme_needs_no_solver() {
        let model = gbm_dynamics(0.5, 0.4, 1.0);
        let ctx = StepContext::scalar(1.0, 0.1, 0.2);
        let (y, report) = implicit_step(&model, &params(0.0, 0.0), &ctx, Solver::Auto).unwrap();
        let e = assemble_explicit_part(&model, &params(0.0, 0.0), &ctx).unwrap();
        assert_eq!(y, e);
        assert_eq!(report.iterations, 0);
        assert_eq!(report.method, SolveMethod::Explicit);
    }

    #[test]
    fn linear_theta_method() {
        let lambda = -3.0;
        let model = linear(lambda);
        let (x, h) = (1.5, 0.1);
        for &theta in &[0.25, 0.5, 1.0] {
            let ctx = StepContext::scalar(x, h, 0.0);
            let (y, report) = implicit_step(&model, &params(theta, 0.0), &ctx, Solver::Auto).unwrap();
            let oracle = x * (1.0 + (1.0 - theta) * lambda * h) / (1.0 - theta * lambda * h);
            assert!((y[0] - oracle).abs() <= 1e-13 * oracle.abs(), "theta {theta}");
            assert!(report.final_residual <= 1e-12 * (1.0 + y[0].abs()));
        }
    }

    #[test]
    fn theta_milstein_is_eta_zero() {
        let model = heston32_dynamics(Heston32Params::new(2.0, 2.5, 1.0, 1.0).unwrap());
        let ctx = StepContext::scalar(0.9, 1.0 / 16.0, 0.13);
        let p = params(0.7, 0.9);
        let a = step_theta_milstein(&model, &p, &ctx).unwrap();
        let b = implicit_step(&model, &p.with_eta(0.0), &ctx, Solver::Auto).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn theta_milstein_matches_ait_sahalia_kernel() {
        let p = AitSahaliaParams::case_one();
        let model = ait_sahalia_dynamics(p);
        let settings = params(1.0, 0.0);
        for &(x, dw) in &[(1.0, 0.0), (0.6, -0.4), (1.8, 0.3), (0.2, -1.2)] {
            let ctx = StepContext::scalar(x, 1.0 / 16.0, dw);
            let a = step_theta_milstein(&model, &settings, &ctx).unwrap()[0];
            let (b, _) = ait_sahalia_implicit_step(&p, &settings, &ctx).unwrap();
            assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn trapezoidal_update() {
        let lambda = 2.0;
        let model = linear(lambda);
        let (x, h) = (0.4, 0.05);
        let y = step_theta_milstein(&model, &params(0.5, 0.0), &StepContext::scalar(x, h, 0.0)).unwrap()[0];
        let oracle = x * (1.0 + 0.5 * lambda * h) / (1.0 - 0.5 * lambda * h);
        assert!((y - oracle).abs() <= 1e-14 * oracle);
    }

    #[test]
    fn scalar_kernel_without_noise_is_theta_method() {
        let model = linear(-1.0);
        let y = step_scalar_ddim(&model, &params(0.5, 0.3), &StepContext::scalar(2.0, 0.2, 0.0)).unwrap();
        let oracle = 2.0 * (1.0 - 0.1) / (1.0 + 0.1);
        assert!((y - oracle).abs() < 1e-14);
    }

    #[test]
    fn scalar_kernel_reproduces_heston_scheme() {
        let hp = Heston32Params::new(2.0, 2.5, 1.0, 1.0).unwrap();
        let model = heston32_dynamics(hp);
        for &(x, dw) in &[(1.0, 0.0), (0.5, 0.2), (2.0, -0.3)] {
            let h = 1.0 / 16.0;
            let y = step_scalar_ddim(&model, &params(1.0, 1.0), &StepContext::scalar(x, h, dw)).unwrap();
            assert!(heston32_scheme_residual(&hp, x, h, dw, y).abs() <= 1e-12 * (1.0 + y));
        }
    }

    #[test]
    fn euler_maruyama_plug_in() {
        let model = gbm_dynamics(0.3, 0.2, 1.0);
        let y = step_euler_maruyama(&model, &StepContext::scalar(1.5, 0.1, 0.05)).unwrap()[0];
        let oracle = 1.5 * (1.0 + 0.3 * 0.1 + 0.2 * 0.05);
        assert!((y - oracle).abs() < 1e-15);
        let lin = linear(-2.0);
        let y = step_euler_maruyama(&lin, &StepContext::scalar(1.0, 0.1, 0.7)).unwrap()[0];
        assert!((y - 0.8).abs() < 1e-15);
    }

    #[test]
    fn backward_euler_is_theta_milstein_without_levy_terms() {
        // Additive noise: every L^{j1} g_{j2} vanishes.
        let model = FnModel::builder(1, 1)
            .drift(|x| x.map(|v| -v * v * v))
            .diffusion(|_, _| StateVector::from_element(1, 0.5))
            .commutative(true)
            .build();
        let ctx = StepContext::scalar(1.2, 0.1, -0.3);
        let (a, _) = step_backward_euler(&model, &params(1.0, 0.0), &ctx).unwrap();
        let b = step_theta_milstein(&model, &params(1.0, 0.0), &ctx).unwrap();
        assert!((a[0] - b[0]).abs() <= 1e-15);
    }

    #[test]
    fn monotone_solver_trivial_root() {
        let (root, report) = solve_scalar_monotone(|y| y - 2.0, 0.0, &params(1.0, 0.0), None).unwrap();
        assert_eq!(root, 2.0);
        assert!(report.final_residual == 0.0);
    }

    #[test]
    fn monotone_solver_positive_domain_root() {
        let h = 0.1;
        let phi = |y: f64| if y > 0.0 { y - h * (1.0 / y - y.powi(3)) - 1.0 } else { f64::NAN };
        let (root, report) = solve_scalar_monotone(phi, 1.0, &params(1.0, 0.0), Some(0.0)).unwrap();
        let oracle = bisect_oracle(phi, 0.5, 2.0);
        assert!((root - oracle).abs() <= 1e-14);
        assert!(phi(root).abs() <= 1e-12);
        assert!(report.final_residual <= 1e-12 * (1.0 + root));
    }

    #[test]
    fn monotone_solver_far_predictor_brackets() {
        let h = 0.1;
        let phi = |y: f64| if y > 0.0 { y - h * (1.0 / y - y.powi(3)) - 1.0 } else { f64::NAN };
        let (root, report) = solve_scalar_monotone(phi, 1e6, &params(1.0, 0.0), Some(0.0)).unwrap();
        assert!(phi(root).abs() <= 1e-12 * (1.0 + root));
        assert!(matches!(
            report.method,
            SolveMethod::Newton | SolveMethod::NewtonThenBisection
        ));
        // Invalid predictor goes straight to bracketing.
        let (root2, report2) = solve_scalar_monotone(phi, -5.0, &params(1.0, 0.0), Some(0.0)).unwrap();
        assert_eq!(report2.method, SolveMethod::Bisection);
        assert!((root - root2).abs() <= 1e-12);
    }

    #[test]
    fn monotone_solver_reports_missing_sign_change() {
        let err = solve_scalar_monotone(|_| 1.0, 0.5, &params(1.0, 0.0), None).unwrap_err();
        assert!(matches!(err, SdeError::Solve { .. }));
    }

    #[test]
    fn monotone_solver_rejects_rounding_roots() {
        // (y - 1) - y is -1 in exact arithmetic but rounds to 0 for y >= 2^53.
        let r = |y: f64| (y - 1.0) - y;
        let err = solve_scalar_monotone(r, 1.0, &params(1.0, 0.0), Some(0.0)).unwrap_err();
        assert!(matches!(err, SdeError::Solve { .. }), "{err:?}");
    }

    #[test]
    fn quadratic_root_examples() {
        // Limit case B = 0 gives the zero root.
        assert_eq!(positive_quadratic_root(0.5, 1.0, 0.0), 0.0);
        // Y + 0.01 Y^2 = 1.
        let y = positive_quadratic_root(0.01, 1.0, 1.0);
        let oracle = bisect_oracle(|v| 0.01 * v * v + v - 1.0, 0.0, 1.0);
        assert!((y - oracle).abs() <= 1e-15);
        // Negative linear coefficient uses the direct form.
        let y = positive_quadratic_root(2.0, -3.0, 1.0);
        assert!((2.0 * y * y - 3.0 * y - 1.0).abs() < 1e-14);
        assert!(y > 0.0);
    }

    #[test]
    fn heston_closed_form_paper_parameters() {
        let hp = Heston32Params::new(2.0, 2.5, 1.0, 1.0).unwrap();
        let h = 1.0 / 16.0;
        let (y, report) = heston32_closed_form_step(&hp, &StepContext::scalar(1.0, h, 0.0)).unwrap();
        assert!(heston32_scheme_residual(&hp, 1.0, h, 0.0, y).abs() <= 1e-12);
        assert!(report.final_residual <= 1e-12 * (1.0 + y));
        assert_eq!(report.method, SolveMethod::ClosedForm);
        let zero = StepContext::scalar(0.0, h, 0.0);
        assert!(matches!(heston32_closed_form_step(&hp, &zero), Err(SdeError::Domain { .. })));
    }

    #[test]
    fn heston_closed_form_agrees_with_general_kernel() {
        let hp = Heston32Params::new(2.0, 2.5, 1.0, 1.0).unwrap();
        let model = heston32_dynamics(hp);
        let ctx = StepContext::scalar(1.4, 1.0 / 32.0, -0.25);
        let (a, _) = heston32_closed_form_step(&hp, &ctx).unwrap();
        let (b, report) = implicit_step(&model, &params(1.0, 1.0), &ctx, Solver::Auto).unwrap();
        assert_eq!(report.method, SolveMethod::ClosedForm);
        assert!((a - b[0]).abs() <= 1e-14 * a);
        let (c, report) = implicit_step(&model, &params(1.0, 1.0), &ctx, Solver::ScalarMonotone).unwrap();
        assert_ne!(report.method, SolveMethod::ClosedForm);
        assert!((a - c[0]).abs() <= 1e-13 * a);
    }

    #[test]
    fn ait_sahalia_case_one_step() {
        let p = AitSahaliaParams::case_one();
        let h = 1.0 / 16.0;
        let (y, report) = ait_sahalia_implicit_step(&p, &params(1.0, 0.0), &StepContext::scalar(1.0, h, 0.0)).unwrap();
        let rhs = ait_sahalia_rhs(&p, 1.0, h, 0.0);
        let oracle = bisect_oracle(|v| ait_sahalia_residual(&p, h, rhs, v), 1e-3, 10.0);
        assert!((y - oracle).abs() <= 1e-13);
        assert!(ait_sahalia_residual(&p, h, rhs, y).abs() <= 1e-12 * (1.0 + y));
        assert!(report.final_residual <= 1e-12 * (1.0 + y));
    }

    #[test]
    fn ait_sahalia_small_step_limit() {
        let p = AitSahaliaParams::case_one();
        let h = 1e-10;
        let ctx = StepContext::scalar(1.0, h, 0.05);
        let (y, _) = ait_sahalia_implicit_step(&p, &params(1.0, 0.0), &ctx).unwrap();
        let rhs = ait_sahalia_rhs(&p, 1.0, h, 0.05);
        assert!((y - rhs).abs() < 1e-8);
    }

    #[test]
    fn ait_sahalia_preconditions() {
        let p = AitSahaliaParams::case_one();
        let s = params(1.0, 0.0);
        assert!(matches!(
            ait_sahalia_implicit_step(&p, &s, &StepContext::scalar(-1.0, 0.1, 0.0)),
            Err(SdeError::Argument(_))
        ));
        assert!(matches!(
            ait_sahalia_implicit_step(&p, &s, &StepContext::scalar(1.0, 1.5, 0.0)),
            Err(SdeError::Argument(_))
        ));
    }

    #[test]
    fn context_shape_mismatch() {
        let model = gbm_dynamics(0.1, 0.1, 1.0);
        let ctx = StepContext::commutative(StateVector::from_element(2, 1.0), 0.1, vec![0.0, 0.0]);
        assert!(matches!(
            assemble_explicit_part(&model, &params(1.0, 0.0), &ctx),
            Err(SdeError::Argument(_))
        ));
    }

    #[test]
    fn multidimensional_newton_and_fixed_point() {
        // Diagonal linear drift with and without an analytic Jacobian.
        let lam = [-2.0, -0.5];
        let base = || {
            FnModel::builder(2, 2)
                .drift(move |x| StateVector::from_vec(vec![lam[0] * x[0], lam[1] * x[1]]))
                .diffusion(|x, j| {
                    let mut v = StateVector::zeros(2);
                    v[j] = 0.3 * x[j];
                    v
                })
                .commutative(true)
        };
        let with_jac = base()
            .drift_jacobian(move |_| DMatrix::from_diagonal(&StateVector::from_vec(lam.to_vec())))
            .build();
        let without = base().build();
        let x = StateVector::from_vec(vec![1.0, -0.5]);
        let ctx = StepContext::commutative(x, 0.1, vec![0.1, -0.2]);
        let p = params(1.0, 0.5);
        let (a, ra) = implicit_step(&with_jac, &p, &ctx, Solver::Auto).unwrap();
        let (b, rb) = implicit_step(&without, &p, &ctx, Solver::Auto).unwrap();
        assert_eq!(ra.method, SolveMethod::Newton);
        assert_eq!(rb.method, SolveMethod::FixedPoint);
        assert!((&a - &b).norm() <= 1e-11);
        // Closed form per coordinate: y (1 - lam h + eta/2 h s^2) = E.
        let e = assemble_explicit_part(&with_jac, &p, &ctx).unwrap();
        for k in 0..2 {
            let oracle = e[k] / (1.0 - lam[k] * 0.1 + 0.25 * 0.1 * 0.09);
            assert!((a[k] - oracle).abs() <= 1e-12);
        }
    }
}
