//! Core abstractions: the SDE capability trait, scheme parameters, the
//! derivative operator `L^{j1} g_{j2}`, and step-size validation.
//!
//! An SDE in `R^d` driven by `m` independent Brownian motions is written
//!
//! ```text
//! dX_t = f(X_t) dt + sum_j g_j(X_t) dW^j_t
//! ```
//!
//! and every numerical kernel in this crate sees it only through
//! [`ModelDynamics`]. Noise and state indices are zero-based.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SdeError};
use crate::schemes::ImplicitSolveReport;

pub type StateVector = DVector<f64>;

/// Relative step of the central finite-difference fallback.
pub const FD_RELATIVE_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// All of `R^d`.
    Whole,
    /// Every coordinate strictly positive.
    PositiveOrthant,
}

impl Domain {
    pub fn contains(&self, x: &StateVector) -> bool {
        let finite = x.iter().all(|v| v.is_finite());
        match self {
            Domain::Whole => finite,
            Domain::PositiveOrthant => finite && x.iter().all(|&v| v > 0.0),
        }
    }

    /// Open lower bound shared by every coordinate, if any.
    pub fn lower_bound(&self) -> Option<f64> {
        match self {
            Domain::Whole => None,
            Domain::PositiveOrthant => Some(0.0),
        }
    }
}

/// A named upper bound on the step size contributed by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBound {
    pub name: String,
    pub limit: f64,
    /// `h < limit` when strict, `h <= limit` otherwise.
    pub strict: bool,
}

impl StepBound {
    pub fn new(name: impl Into<String>, limit: f64, strict: bool) -> Self {
        StepBound {
            name: name.into(),
            limit,
            strict,
        }
    }

    pub fn admits(&self, h: f64) -> bool {
        if self.strict {
            h < self.limit
        } else {
            h <= self.limit
        }
    }
}

/// One SDE `dX = f(X)dt + g(X)dW`.
///
/// Implementations must be pure: every evaluation is a deterministic function
/// of its arguments, so a model can be shared across worker threads.
pub trait ModelDynamics: Send + Sync {
    fn state_dim(&self) -> usize;

    fn noise_dim(&self) -> usize;

    fn drift(&self, x: &StateVector) -> StateVector;

    /// Column `j` of the diffusion matrix, `g_j(x)`.
    fn diffusion_column(&self, x: &StateVector, j: usize) -> StateVector;

    /// Analytic `L^{j1} g_{j2}(x) = (dg_{j2}/dx)(x) g_{j1}(x)`, when known.
    fn levy_coefficient(&self, _x: &StateVector, _j1: usize, _j2: usize) -> Option<StateVector> {
        None
    }

    fn drift_jacobian(&self, _x: &StateVector) -> Option<DMatrix<f64>> {
        None
    }

    fn diffusion_jacobian(&self, _x: &StateVector, _j: usize) -> Option<DMatrix<f64>> {
        None
    }

    fn domain(&self) -> Domain {
        Domain::Whole
    }

    /// Asserts `L^{j1} g_{j2} = L^{j2} g_{j1}` for all column pairs.
    fn is_commutative(&self) -> bool;

    /// Model-specific step-size bounds reported by [`validate_step_size_with`].
    fn step_bounds(&self) -> Vec<StepBound> {
        Vec::new()
    }

    /// Model-provided solver for the implicit equation
    ///
    /// ```text
    /// y - theta h f(y) + (eta/2) h sum_j L^j g_j(y) = explicit
    /// ```
    ///
    /// Returns `None` when the model has no specialised route for `params`.
    fn closed_form_solve(
        &self,
        _params: &SchemeParams,
        _explicit: &StateVector,
        _h: f64,
    ) -> Option<Result<(StateVector, ImplicitSolveReport)>> {
        None
    }

    fn in_domain(&self, x: &StateVector) -> bool {
        x.len() == self.state_dim() && self.domain().contains(x)
    }
}

pub(crate) fn ensure_in_domain(model: &dyn ModelDynamics, x: &StateVector) -> Result<()> {
    if model.in_domain(x) {
        Ok(())
    } else {
        Err(SdeError::Domain {
            state: x.iter().copied().collect(),
        })
    }
}

/// Central finite-difference Jacobian of `map` at `x`, with per-coordinate
/// step `FD_RELATIVE_STEP * max(1, |x_k|)`.
///
/// Fails with a capability error when a stencil point leaves `domain`.
pub fn finite_difference_jacobian<F>(map: F, x: &StateVector, domain: Domain) -> Result<DMatrix<f64>>
where
    F: Fn(&StateVector) -> StateVector,
{
    let d = x.len();
    let mut columns: Vec<StateVector> = Vec::with_capacity(d);
    for k in 0..d {
        let step = FD_RELATIVE_STEP * x[k].abs().max(1.0);
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[k] += step;
        minus[k] -= step;
        if !domain.contains(&plus) || !domain.contains(&minus) {
            return Err(SdeError::Capability(format!(
                "finite-difference stencil around coordinate {k} leaves the domain"
            )));
        }
        // Use the actually represented spacing.
        let spacing = plus[k] - minus[k];
        columns.push((map(&plus) - map(&minus)) / spacing);
    }
    let rows = columns.first().map_or(d, |c| c.len());
    Ok(DMatrix::from_fn(rows, d, |i, k| columns[k][i]))
}

/// `L^{j1} g_{j2}(x)`: analytic when the model supplies it, else the
/// diffusion Jacobian times `g_{j1}`, else central finite differences.
pub fn levy_coefficient_eval(
    model: &dyn ModelDynamics,
    x: &StateVector,
    j1: usize,
    j2: usize,
) -> Result<StateVector> {
    let m = model.noise_dim();
    if j1 >= m || j2 >= m {
        return Err(SdeError::argument(format!(
            "noise indices ({j1}, {j2}) out of range for m = {m}"
        )));
    }
    ensure_in_domain(model, x)?;
    if let Some(v) = model.levy_coefficient(x, j1, j2) {
        return Ok(v);
    }
    let g1 = model.diffusion_column(x, j1);
    if let Some(jac) = model.diffusion_jacobian(x, j2) {
        return Ok(jac * g1);
    }
    let jac = finite_difference_jacobian(|y| model.diffusion_column(y, j2), x, model.domain())?;
    Ok(jac * g1)
}

/// `sum_j L^j g_j(x)`, the term weighted by `eta` in the scheme family.
pub fn levy_diagonal_sum(model: &dyn ModelDynamics, x: &StateVector) -> Result<StateVector> {
    let mut acc = StateVector::zeros(model.state_dim());
    for j in 0..model.noise_dim() {
        acc += levy_coefficient_eval(model, x, j, j)?;
    }
    Ok(acc)
}

/// Spot-checks the commutativity condition on `points`: true iff
/// `|L^{j1} g_{j2}(x) - L^{j2} g_{j1}(x)| <= tol (1 + |x|)` for every point
/// and column pair.
pub fn commutativity_check(
    model: &dyn ModelDynamics,
    points: &[StateVector],
    tol: f64,
) -> Result<bool> {
    if points.is_empty() {
        return Err(SdeError::argument("commutativity check needs at least one point"));
    }
    let m = model.noise_dim();
    for x in points {
        let bound = tol * (1.0 + x.norm());
        for j1 in 0..m {
            for j2 in (j1 + 1)..m {
                let a = levy_coefficient_eval(model, x, j1, j2)?;
                let b = levy_coefficient_eval(model, x, j2, j1)?;
                if (a - b).norm() > bound {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// The method parameters `(theta, eta)` plus implicit-solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeParams {
    pub theta: f64,
    pub eta: f64,
    /// Residual tolerance, relative to `1 + |y|`.
    pub solver_tol: f64,
    pub max_newton_iters: usize,
    pub bracket_expansion: f64,
}

impl SchemeParams {
    pub const DEFAULT_SOLVER_TOL: f64 = 1e-12;
    pub const DEFAULT_MAX_NEWTON_ITERS: usize = 50;
    pub const DEFAULT_BRACKET_EXPANSION: f64 = 2.0;

    pub fn new(theta: f64, eta: f64) -> Result<Self> {
        let params = SchemeParams {
            theta,
            eta,
            solver_tol: Self::DEFAULT_SOLVER_TOL,
            max_newton_iters: Self::DEFAULT_MAX_NEWTON_ITERS,
            bracket_expansion: Self::DEFAULT_BRACKET_EXPANSION,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(SdeError::argument(format!(
                "theta = {} must lie in [0, 1]",
                self.theta
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(SdeError::argument(format!(
                "eta = {} must lie in [0, 1]",
                self.eta
            )));
        }
        if !(self.solver_tol > 0.0) {
            return Err(SdeError::argument("solver_tol must be positive"));
        }
        if self.max_newton_iters == 0 {
            return Err(SdeError::argument("max_newton_iters must be positive"));
        }
        if !(self.bracket_expansion > 1.0) {
            return Err(SdeError::argument("bracket_expansion must exceed 1"));
        }
        Ok(())
    }

    /// True when neither the drift nor the Levy diagonal is taken implicitly.
    pub fn is_explicit(&self) -> bool {
        self.theta == 0.0 && self.eta == 0.0
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }
}

/// Structural constants of the monotonicity and polynomial-growth
/// conditions. These are user-supplied documentation of a model's regime;
/// they gate step sizes but are never consumed by the step kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssumptionConstants {
    pub q: f64,
    pub varrho: f64,
    pub nu: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub l5: f64,
    pub l6: f64,
    pub h0: f64,
    pub gamma: f64,
    pub p_star: f64,
}

impl Default for AssumptionConstants {
    fn default() -> Self {
        AssumptionConstants {
            q: 3.0,
            varrho: 2.0,
            nu: 0.5,
            l1: 0.0,
            l2: 0.0,
            l3: 0.0,
            l4: 0.0,
            l5: 0.0,
            l6: 0.0,
            h0: 1.0,
            gamma: 1.0,
            p_star: 2.0,
        }
    }
}

impl AssumptionConstants {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.q > 2.0) {
            bad.push("q > 2");
        }
        if !(self.varrho > 1.0) {
            bad.push("varrho > 1");
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            bad.push("nu in (0, 1)");
        }
        let ls = [self.l1, self.l2, self.l3, self.l4, self.l5, self.l6];
        if ls.iter().any(|l| !(*l >= 0.0)) {
            bad.push("L1..L6 >= 0");
        }
        if !(self.h0 > 0.0) {
            bad.push("h0 > 0");
        }
        if !(self.gamma >= 1.0) {
            bad.push("gamma >= 1");
        }
        if !(self.p_star >= 6.0 * self.gamma - 4.0) {
            bad.push("p_star >= 6 gamma - 4");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(SdeError::argument(format!(
                "assumption constants violate: {}",
                bad.join(", ")
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<ConstraintCheck>,
}

impl ValidationReport {
    pub fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(ConstraintCheck {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn violations(&self) -> impl Iterator<Item = &ConstraintCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&ConstraintCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.checks.extend(other.checks);
    }
}

/// Checks the error-bound hypotheses on `h`: `theta in [1/2, 1]`,
/// `2 L2 h <= nu` and `h <= h0`.
pub fn validate_step_size(params: &SchemeParams, constants: &AssumptionConstants, h: f64) -> ValidationReport {
    validate_step_size_with(params, constants, h, &[])
}

/// [`validate_step_size`] plus model-registered bounds.
pub fn validate_step_size_with(
    params: &SchemeParams,
    constants: &AssumptionConstants,
    h: f64,
    bounds: &[StepBound],
) -> ValidationReport {
    let mut report = ValidationReport::default();
    match constants.validate() {
        Ok(()) => report.push("constants-well-formed", true, "ok"),
        Err(e) => report.push("constants-well-formed", false, e.to_string()),
    }
    report.push(
        "step-positive",
        h > 0.0 && h.is_finite(),
        format!("h = {h}"),
    );
    report.push(
        "theta-in-[1/2,1]",
        (0.5..=1.0).contains(&params.theta),
        format!("theta = {}", params.theta),
    );
    let lhs = 2.0 * constants.l2 * h;
    report.push(
        "2*L2*h<=nu",
        lhs <= constants.nu,
        format!("2*L2*h = {lhs}, nu = {}", constants.nu),
    );
    report.push(
        "h<=h0",
        h <= constants.h0,
        format!("h = {h}, h0 = {}", constants.h0),
    );
    for b in bounds {
        let op = if b.strict { "<" } else { "<=" };
        report.push(
            b.name.clone(),
            b.admits(h),
            format!("h = {h} {op} {}", b.limit),
        );
    }
    report
}

/// Uniform mesh on `[0, t_end]` with `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(SdeError::argument(format!("t_end = {t_end} must be positive")));
        }
        if steps == 0 {
            return Err(SdeError::argument("time grid needs at least one step"));
        }
        Ok(TimeGrid { t_end, steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    pub fn node(&self, n: usize) -> f64 {
        self.t_end * n as f64 / self.steps as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |n| self.node(n))
    }
}
