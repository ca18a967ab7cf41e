//! Concrete models: the Heston 3/2-volatility model, the Ait-Sahalia interest
//! rate model, geometric Brownian motion (closed-form oracle), a
//! superlinear polynomial stress model, and a closure-backed [`FnModel`] for
//! ad hoc systems.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Result, SdeError};
use crate::schemes::{positive_quadratic_root, implicit_residual, ImplicitSolveReport, SolveMethod};
use crate::sde::{Domain, ModelDynamics, SchemeParams, StateVector, StepBound, ValidationReport};

fn scalar(v: f64) -> StateVector {
    StateVector::from_element(1, v)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(SdeError::argument(format!("{name} = {v} must be positive")))
    }
}

// ---------------------------------------------------------------------------
// Heston 3/2

/// `dX = X (mu - alpha X) dt + beta X^{3/2} dW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Heston32Params {
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub x0: f64,
}

impl Heston32Params {
    pub fn new(mu: f64, alpha: f64, beta: f64, x0: f64) -> Result<Self> {
        positive("mu", mu)?;
        positive("alpha", alpha)?;
        positive("beta", beta)?;
        positive("x0", x0)?;
        Ok(Heston32Params { mu, alpha, beta, x0 })
    }

    /// `(mu, alpha, beta) = (2, 5/2, 1)`, `x0 = 1`.
    pub fn reference() -> Self {
        Heston32Params {
            mu: 2.0,
            alpha: 2.5,
            beta: 1.0,
            x0: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Heston32 {
    pub params: Heston32Params,
}

pub fn heston32_dynamics(params: Heston32Params) -> Heston32 {
    Heston32 { params }
}

impl ModelDynamics for Heston32 {
    fn state_dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &StateVector) -> StateVector {
        let p = &self.params;
        scalar(x[0] * (p.mu - p.alpha * x[0]))
    }

    fn diffusion_column(&self, x: &StateVector, _j: usize) -> StateVector {
        scalar(self.params.beta * x[0] * x[0].sqrt())
    }

    fn levy_coefficient(&self, x: &StateVector, _j1: usize, _j2: usize) -> Option<StateVector> {
        let b = self.params.beta;
        Some(scalar(1.5 * b * b * x[0] * x[0]))
    }

    fn drift_jacobian(&self, x: &StateVector) -> Option<DMatrix<f64>> {
        let p = &self.params;
        Some(DMatrix::from_element(1, 1, p.mu - 2.0 * p.alpha * x[0]))
    }

    fn diffusion_jacobian(&self, x: &StateVector, _j: usize) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, 1.5 * self.params.beta * x[0].sqrt()))
    }

    fn domain(&self) -> Domain {
        Domain::PositiveOrthant
    }

    fn is_commutative(&self) -> bool {
        true
    }

    fn step_bounds(&self) -> Vec<StepBound> {
        vec![StepBound::new("h<1/(2mu)", 1.0 / (2.0 * self.params.mu), true)]
    }

    /// The implicit equation is the quadratic
    /// `(theta alpha + 3/4 eta beta^2) h y^2 + (1 - theta mu h) y = E`,
    /// which has a unique positive root whenever `E > 0`.
    fn closed_form_solve(
        &self,
        params: &SchemeParams,
        explicit: &StateVector,
        h: f64,
    ) -> Option<Result<(StateVector, ImplicitSolveReport)>> {
        let p = &self.params;
        let a = (params.theta * p.alpha + 0.75 * params.eta * p.beta * p.beta) * h;
        if a == 0.0 {
            return None;
        }
        let b = 1.0 - params.theta * p.mu * h;
        let rhs = explicit[0];
        let mut report = ImplicitSolveReport {
            iterations: 0,
            final_residual: f64::INFINITY,
            method: SolveMethod::ClosedForm,
            bracket: None,
        };
        if !(rhs > 0.0 && rhs.is_finite()) {
            return Some(Err(SdeError::Solve {
                message: format!("quadratic right-hand side {rhs} admits no unique positive root"),
                report,
            }));
        }
        let mut y = positive_quadratic_root(a, b, rhs);
        let residual = |y: f64| {
            implicit_residual(self, params.theta, params.eta, h, &scalar(y), explicit).map(|r| r[0].abs())
        };
        let mut r = match residual(y) {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        let tol = params.solver_tol * (1.0 + y.abs());
        if r > tol {
            // One Newton polish on the quadratic.
            let polished = y - (a * y * y + b * y - rhs) / (2.0 * a * y + b);
            if let Ok(rp) = residual(polished) {
                if rp < r {
                    y = polished;
                    r = rp;
                    report.iterations = 1;
                }
            }
        }
        report.final_residual = r;
        if r <= params.solver_tol * (1.0 + y.abs()) {
            Some(Ok((scalar(y), report)))
        } else {
            Some(Err(SdeError::Solve {
                message: format!("closed-form root {y} has residual {r:e}"),
                report,
            }))
        }
    }
}

/// Gates for the 3/2 model: the monotonicity assumption `alpha > 3/2 beta^2`,
/// the rate theorem's moment condition `alpha >= 5/2 beta^2`, and
/// `h < 1/(2 mu)`. Reported separately.
pub fn heston32_validate(params: &Heston32Params, h: f64) -> ValidationReport {
    let b2 = params.beta * params.beta;
    let mut r = ValidationReport::default();
    r.push(
        "alpha>1.5*beta^2",
        params.alpha > 1.5 * b2,
        format!("alpha = {}, 1.5 beta^2 = {}", params.alpha, 1.5 * b2),
    );
    r.push(
        "alpha>=2.5*beta^2",
        params.alpha >= 2.5 * b2,
        format!("alpha = {}, 2.5 beta^2 = {}", params.alpha, 2.5 * b2),
    );
    let limit = 1.0 / (2.0 * params.mu);
    r.push("h<1/(2mu)", h < limit, format!("h = {h}, 1/(2mu) = {limit}"));
    r
}

// ---------------------------------------------------------------------------
// Ait-Sahalia

/// `dX = (a_{-1}/X - a_0 + a_1 X - a_2 X^kappa) dt + sigma X^rho dW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AitSahaliaParams {
    pub alpha_m1: f64,
    pub alpha_0: f64,
    pub alpha_1: f64,
    pub alpha_2: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub rho: f64,
    pub x0: f64,
}

impl AitSahaliaParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        alpha_m1: f64,
        alpha_0: f64,
        alpha_1: f64,
        alpha_2: f64,
        sigma: f64,
        kappa: f64,
        rho: f64,
        x0: f64,
    ) -> Result<Self> {
        positive("alpha_m1", alpha_m1)?;
        positive("alpha_0", alpha_0)?;
        positive("alpha_1", alpha_1)?;
        positive("alpha_2", alpha_2)?;
        positive("sigma", sigma)?;
        positive("x0", x0)?;
        if !(kappa > 1.0 && kappa.is_finite()) {
            return Err(SdeError::argument(format!("kappa = {kappa} must exceed 1")));
        }
        if !(rho > 1.0 && rho.is_finite()) {
            return Err(SdeError::argument(format!("rho = {rho} must exceed 1")));
        }
        Ok(AitSahaliaParams {
            alpha_m1,
            alpha_0,
            alpha_1,
            alpha_2,
            sigma,
            kappa,
            rho,
            x0,
        })
    }

    /// Standard-regime parameter set: `kappa = 4, rho = 2`,
    /// `alpha = (3/2, 2, 1, 1)`, `sigma = 1`.
    pub fn case_one() -> Self {
        AitSahaliaParams {
            alpha_m1: 1.5,
            alpha_0: 2.0,
            alpha_1: 1.0,
            alpha_2: 1.0,
            sigma: 1.0,
            kappa: 4.0,
            rho: 2.0,
            x0: 1.0,
        }
    }

    /// Critical-regime parameter set: `kappa = 3, rho = 2`, `alpha_2 = 9/2`.
    pub fn case_two() -> Self {
        AitSahaliaParams {
            kappa: 3.0,
            alpha_2: 4.5,
            ..Self::case_one()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AitSahalia {
    pub params: AitSahaliaParams,
}

pub fn ait_sahalia_dynamics(params: AitSahaliaParams) -> AitSahalia {
    AitSahalia { params }
}

impl ModelDynamics for AitSahalia {
    fn state_dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &StateVector) -> StateVector {
        let p = &self.params;
        let v = x[0];
        scalar(p.alpha_m1 / v - p.alpha_0 + p.alpha_1 * v - p.alpha_2 * v.powf(p.kappa))
    }

    fn diffusion_column(&self, x: &StateVector, _j: usize) -> StateVector {
        scalar(self.params.sigma * x[0].powf(self.params.rho))
    }

    fn levy_coefficient(&self, x: &StateVector, _j1: usize, _j2: usize) -> Option<StateVector> {
        let p = &self.params;
        Some(scalar(p.rho * p.sigma * p.sigma * x[0].powf(2.0 * p.rho - 1.0)))
    }

    fn drift_jacobian(&self, x: &StateVector) -> Option<DMatrix<f64>> {
        let p = &self.params;
        let v = x[0];
        let d = -p.alpha_m1 / (v * v) + p.alpha_1 - p.kappa * p.alpha_2 * v.powf(p.kappa - 1.0);
        Some(DMatrix::from_element(1, 1, d))
    }

    fn diffusion_jacobian(&self, x: &StateVector, _j: usize) -> Option<DMatrix<f64>> {
        let p = &self.params;
        Some(DMatrix::from_element(1, 1, p.rho * p.sigma * x[0].powf(p.rho - 1.0)))
    }

    fn domain(&self) -> Domain {
        Domain::PositiveOrthant
    }

    fn is_commutative(&self) -> bool {
        true
    }

    fn step_bounds(&self) -> Vec<StepBound> {
        let a1 = self.params.alpha_1;
        vec![
            StepBound::new("h<=1/alpha_1", 1.0 / a1, false),
            StepBound::new("h<1/(2alpha_1)", 1.0 / (2.0 * a1), true),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// `kappa + 1 > 2 rho`
    Standard,
    /// `kappa + 1 = 2 rho`
    Critical,
    Unsupported,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeReport {
    pub regime: Regime,
    pub rate_theorem_satisfied: bool,
    pub violated_conditions: Vec<String>,
    pub checks: ValidationReport,
}

/// Classifies the regime from `kappa + 1 - 2 rho` (exact zero means critical)
/// and evaluates the rate-theorem gates, including the step gates
/// `h <= 1/alpha_1` (well-posedness) and `h < 1/(2 alpha_1)`.
pub fn ait_sahalia_regime(params: &AitSahaliaParams, h: f64) -> RegimeReport {
    let gap = (params.kappa + 1.0) - 2.0 * params.rho;
    let regime = if gap > 0.0 {
        Regime::Standard
    } else if gap == 0.0 {
        Regime::Critical
    } else {
        Regime::Unsupported
    };
    let mut checks = ValidationReport::default();
    checks.push(
        "kappa+1>=2rho",
        gap >= 0.0,
        format!("kappa + 1 - 2 rho = {gap}"),
    );
    if regime == Regime::Critical {
        let ratio = params.alpha_2 / (params.sigma * params.sigma);
        let k = params.kappa;
        checks.push(
            "alpha_2/sigma^2>=2kappa-3/2",
            ratio >= 2.0 * k - 1.5,
            format!("alpha_2/sigma^2 = {ratio}, 2 kappa - 3/2 = {}", 2.0 * k - 1.5),
        );
        let bound = (k + 1.0) / (2.0 * std::f64::consts::SQRT_2);
        checks.push(
            "alpha_2/sigma^2>(kappa+1)/(2sqrt2)",
            ratio > bound,
            format!("alpha_2/sigma^2 = {ratio}, (kappa + 1)/(2 sqrt 2) = {bound}"),
        );
    }
    for b in ait_sahalia_dynamics(*params).step_bounds() {
        let op = if b.strict { "<" } else { "<=" };
        checks.push(b.name.clone(), b.admits(h), format!("h = {h} {op} {}", b.limit));
    }
    let violated_conditions: Vec<String> = checks.violations().map(|c| c.name.clone()).collect();
    RegimeReport {
        regime,
        rate_theorem_satisfied: regime != Regime::Unsupported && checks.passed(),
        violated_conditions,
        checks,
    }
}

// ---------------------------------------------------------------------------
// GBM

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GbmParams {
    pub mu: f64,
    pub sigma: f64,
    pub x0: f64,
}

impl GbmParams {
    pub fn new(mu: f64, sigma: f64, x0: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(SdeError::argument(format!("sigma = {sigma} must be nonnegative")));
        }
        if !mu.is_finite() || !x0.is_finite() {
            return Err(SdeError::argument("mu and x0 must be finite"));
        }
        Ok(GbmParams { mu, sigma, x0 })
    }
}

/// `dX = mu X dt + sigma X dW` on the whole line.
#[derive(Debug, Clone, Copy)]
pub struct Gbm {
    pub params: GbmParams,
}

pub fn gbm_dynamics(mu: f64, sigma: f64, x0: f64) -> Gbm {
    Gbm {
        params: GbmParams { mu, sigma, x0 },
    }
}

/// `x0 exp((mu - sigma^2/2) t + sigma W_t)`.
pub fn gbm_exact_terminal(x0: f64, mu: f64, sigma: f64, t: f64, w_t: f64) -> f64 {
    x0 * ((mu - 0.5 * sigma * sigma) * t + sigma * w_t).exp()
}

impl ModelDynamics for Gbm {
    fn state_dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &StateVector) -> StateVector {
        scalar(self.params.mu * x[0])
    }

    fn diffusion_column(&self, x: &StateVector, _j: usize) -> StateVector {
        scalar(self.params.sigma * x[0])
    }

    fn levy_coefficient(&self, x: &StateVector, _j1: usize, _j2: usize) -> Option<StateVector> {
        let s = self.params.sigma;
        Some(scalar(s * s * x[0]))
    }

    fn drift_jacobian(&self, _x: &StateVector) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, self.params.mu))
    }

    fn diffusion_jacobian(&self, _x: &StateVector, _j: usize) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, self.params.sigma))
    }

    fn is_commutative(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Polynomial stress model

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyStressParams {
    pub sigma: f64,
    pub x0: f64,
}

/// `dX = -X^5 dt + sigma X^2 dW`: superlinear drift and diffusion,
/// coercive (`x f(x) = -x^6`), on the whole line.
#[derive(Debug, Clone, Copy)]
pub struct PolyStress {
    pub params: PolyStressParams,
}

pub fn polynomial_stress_dynamics(sigma: f64) -> PolyStress {
    PolyStress {
        params: PolyStressParams { sigma, x0: 1.0 },
    }
}

impl ModelDynamics for PolyStress {
    fn state_dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &StateVector) -> StateVector {
        scalar(-x[0].powi(5))
    }

    fn diffusion_column(&self, x: &StateVector, _j: usize) -> StateVector {
        scalar(self.params.sigma * x[0] * x[0])
    }

    fn levy_coefficient(&self, x: &StateVector, _j1: usize, _j2: usize) -> Option<StateVector> {
        let s = self.params.sigma;
        Some(scalar(2.0 * s * s * x[0].powi(3)))
    }

    fn drift_jacobian(&self, x: &StateVector) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, -5.0 * x[0].powi(4)))
    }

    fn diffusion_jacobian(&self, x: &StateVector, _j: usize) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, 2.0 * self.params.sigma * x[0]))
    }

    fn is_commutative(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Registry

/// A named model with its parameters, as selected by the CLI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelSpec {
    Heston32(Heston32Params),
    AitSahalia(AitSahaliaParams),
    Gbm(GbmParams),
    PolyStress(PolyStressParams),
}

impl ModelSpec {
    pub const NAMES: [&'static str; 4] = ["heston32", "ait-sahalia", "gbm", "poly-stress"];

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Heston32(_) => "heston32",
            ModelSpec::AitSahalia(_) => "ait-sahalia",
            ModelSpec::Gbm(_) => "gbm",
            ModelSpec::PolyStress(_) => "poly-stress",
        }
    }

    pub fn dynamics(&self) -> Arc<dyn ModelDynamics> {
        match *self {
            ModelSpec::Heston32(p) => Arc::new(heston32_dynamics(p)),
            ModelSpec::AitSahalia(p) => Arc::new(ait_sahalia_dynamics(p)),
            ModelSpec::Gbm(p) => Arc::new(Gbm { params: p }),
            ModelSpec::PolyStress(p) => Arc::new(PolyStress { params: p }),
        }
    }

    pub fn x0(&self) -> StateVector {
        scalar(match self {
            ModelSpec::Heston32(p) => p.x0,
            ModelSpec::AitSahalia(p) => p.x0,
            ModelSpec::Gbm(p) => p.x0,
            ModelSpec::PolyStress(p) => p.x0,
        })
    }

    /// Parameter and step gates from the model's convergence theory. Failed
    /// gates are warnings: the theorems are sufficient conditions only.
    pub fn validate(&self, h: f64) -> ValidationReport {
        match self {
            ModelSpec::Heston32(p) => heston32_validate(p, h),
            ModelSpec::AitSahalia(p) => ait_sahalia_regime(p, h).checks,
            ModelSpec::Gbm(_) | ModelSpec::PolyStress(_) => ValidationReport::default(),
        }
    }

    /// Closed-form terminal value given the Brownian path endpoint, when
    /// known.
    pub fn exact_terminal(&self, t: f64, w_t: &[f64]) -> Option<StateVector> {
        match self {
            ModelSpec::Gbm(p) => Some(scalar(gbm_exact_terminal(p.x0, p.mu, p.sigma, t, w_t[0]))),
            _ => None,
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Closure-backed model

type VecMap = Arc<dyn Fn(&StateVector) -> StateVector + Send + Sync>;
type ColumnMap = Arc<dyn Fn(&StateVector, usize) -> StateVector + Send + Sync>;
type LevyMap = Arc<dyn Fn(&StateVector, usize, usize) -> StateVector + Send + Sync>;
type MatMap = Arc<dyn Fn(&StateVector) -> DMatrix<f64> + Send + Sync>;
type ColumnMatMap = Arc<dyn Fn(&StateVector, usize) -> DMatrix<f64> + Send + Sync>;

/// A model assembled from closures. Missing derivative maps fall back to
/// finite differences.
#[derive(Clone)]
pub struct FnModel {
    d: usize,
    m: usize,
    drift: VecMap,
    diffusion: ColumnMap,
    levy: Option<LevyMap>,
    drift_jacobian: Option<MatMap>,
    diffusion_jacobian: Option<ColumnMatMap>,
    domain: Domain,
    commutative: bool,
}

impl fmt::Debug for FnModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnModel")
            .field("d", &self.d)
            .field("m", &self.m)
            .field("domain", &self.domain)
            .field("commutative", &self.commutative)
            .finish_non_exhaustive()
    }
}

pub struct FnModelBuilder {
    model: FnModel,
}

impl FnModel {
    /// Starts from `f = 0`, `g = 0` on the whole space.
    pub fn builder(d: usize, m: usize) -> FnModelBuilder {
        FnModelBuilder {
            model: FnModel {
                d,
                m,
                drift: Arc::new(move |_| StateVector::zeros(d)),
                diffusion: Arc::new(move |_, _| StateVector::zeros(d)),
                levy: None,
                drift_jacobian: None,
                diffusion_jacobian: None,
                domain: Domain::Whole,
                commutative: false,
            },
        }
    }
}

impl FnModelBuilder {
    pub fn drift(mut self, f: impl Fn(&StateVector) -> StateVector + Send + Sync + 'static) -> Self {
        self.model.drift = Arc::new(f);
        self
    }

    pub fn diffusion(mut self, g: impl Fn(&StateVector, usize) -> StateVector + Send + Sync + 'static) -> Self {
        self.model.diffusion = Arc::new(g);
        self
    }

    pub fn levy(mut self, l: impl Fn(&StateVector, usize, usize) -> StateVector + Send + Sync + 'static) -> Self {
        self.model.levy = Some(Arc::new(l));
        self
    }

    pub fn drift_jacobian(mut self, j: impl Fn(&StateVector) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.model.drift_jacobian = Some(Arc::new(j));
        self
    }

    pub fn diffusion_jacobian(
        mut self,
        j: impl Fn(&StateVector, usize) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.model.diffusion_jacobian = Some(Arc::new(j));
        self
    }

    pub fn domain(mut self, domain: Domain) -> Self {
        self.model.domain = domain;
        self
    }

    pub fn commutative(mut self, commutative: bool) -> Self {
        self.model.commutative = commutative;
        self
    }

    pub fn build(self) -> FnModel {
        self.model
    }
}

impl ModelDynamics for FnModel {
    fn state_dim(&self) -> usize {
        self.d
    }

    fn noise_dim(&self) -> usize {
        self.m
    }

    fn drift(&self, x: &StateVector) -> StateVector {
        (self.drift)(x)
    }

    fn diffusion_column(&self, x: &StateVector, j: usize) -> StateVector {
        (self.diffusion)(x, j)
    }

    fn levy_coefficient(&self, x: &StateVector, j1: usize, j2: usize) -> Option<StateVector> {
        self.levy.as_ref().map(|l| l(x, j1, j2))
    }

    fn drift_jacobian(&self, x: &StateVector) -> Option<DMatrix<f64>> {
        self.drift_jacobian.as_ref().map(|j| j(x))
    }

    fn diffusion_jacobian(&self, x: &StateVector, j: usize) -> Option<DMatrix<f64>> {
        self.diffusion_jacobian.as_ref().map(|jac| jac(x, j))
    }

    fn domain(&self) -> Domain {
        self.domain
    }

    fn is_commutative(&self) -> bool {
        self.commutative
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{commutativity_check, finite_difference_jacobian, levy_coefficient_eval};

    /// `g'(x) g(x)` from a central-difference derivative of `g` alone.
    fn fd_levy(model: &dyn ModelDynamics, x: f64) -> f64 {
        let xv = scalar(x);
        let jac = finite_difference_jacobian(|y| model.diffusion_column(y, 0), &xv, model.domain()).unwrap();
        jac[(0, 0)] * model.diffusion_column(&xv, 0)[0]
    }

    #[test]
    fn heston_plug_ins() {
        let m = heston32_dynamics(Heston32Params::new(2.0, 2.5, 1.0, 1.0).unwrap());
        assert_eq!(m.drift(&scalar(1.0))[0], -0.5);
        assert_eq!(m.diffusion_column(&scalar(4.0), 0)[0], 8.0);
        assert!((fd_levy(&m, 2.0) - 6.0).abs() < 1e-6);
        assert_eq!(levy_coefficient_eval(&m, &scalar(2.0), 0, 0).unwrap()[0], 6.0);
        assert!((fd_levy(&m, 1.0) - 1.5).abs() < 1e-6);
        assert_eq!(levy_coefficient_eval(&m, &scalar(1.0), 0, 0).unwrap()[0], 1.5);
    }

    #[test]
    fn heston_gates() {
        let r = heston32_validate(&Heston32Params::reference(), 1.0 / 16.0);
        assert!(r.passed());
        let r = heston32_validate(&Heston32Params::new(2.0, 1.4, 1.0, 1.0).unwrap(), 0.01);
        assert!(!r.check("alpha>1.5*beta^2").unwrap().passed);
        let r = heston32_validate(&Heston32Params::new(2.0, 2.0, 1.0, 1.0).unwrap(), 0.01);
        assert!(r.check("alpha>1.5*beta^2").unwrap().passed);
        assert!(!r.check("alpha>=2.5*beta^2").unwrap().passed);
        let r = heston32_validate(&Heston32Params::reference(), 0.25);
        assert!(!r.check("h<1/(2mu)").unwrap().passed);
    }

    #[test]
    fn ait_sahalia_plug_ins() {
        let m = ait_sahalia_dynamics(AitSahaliaParams::case_one());
        assert_eq!(m.drift(&scalar(1.0))[0], -0.5);
        assert_eq!(m.diffusion_column(&scalar(1.0), 0)[0], 1.0);
        assert!((fd_levy(&m, 1.0) - 2.0).abs() < 1e-6);
        assert_eq!(levy_coefficient_eval(&m, &scalar(1.0), 0, 0).unwrap()[0], 2.0);
    }

    #[test]
    fn regimes() {
        let r = ait_sahalia_regime(&AitSahaliaParams::case_one(), 0.4);
        assert_eq!(r.regime, Regime::Standard);
        assert!(r.rate_theorem_satisfied, "{:?}", r.violated_conditions);
        let r = ait_sahalia_regime(&AitSahaliaParams::case_one(), 0.5);
        assert!(!r.rate_theorem_satisfied);
        assert_eq!(r.violated_conditions, vec!["h<1/(2alpha_1)".to_string()]);

        let r = ait_sahalia_regime(&AitSahaliaParams::case_two(), 1.0 / 16.0);
        assert_eq!(r.regime, Regime::Critical);
        assert!(r.rate_theorem_satisfied, "{:?}", r.violated_conditions);
        assert!(r.checks.check("alpha_2/sigma^2>=2kappa-3/2").unwrap().passed);

        let p = AitSahaliaParams {
            kappa: 2.0,
            ..AitSahaliaParams::case_one()
        };
        let r = ait_sahalia_regime(&p, 0.1);
        assert_eq!(r.regime, Regime::Unsupported);
        assert!(!r.rate_theorem_satisfied);
    }

    #[test]
    fn critical_boundary_is_exact() {
        let base = AitSahaliaParams::case_two();
        for (dk, expected) in [(1e-9, Regime::Standard), (-1e-9, Regime::Unsupported), (0.0, Regime::Critical)] {
            let p = AitSahaliaParams {
                kappa: base.kappa + dk,
                ..base
            };
            assert_eq!(ait_sahalia_regime(&p, 0.1).regime, expected);
        }
    }

    #[test]
    fn critical_ratio_gate_fails() {
        let p = AitSahaliaParams {
            alpha_2: 4.0,
            ..AitSahaliaParams::case_two()
        };
        let r = ait_sahalia_regime(&p, 0.1);
        assert_eq!(r.regime, Regime::Critical);
        assert!(!r.rate_theorem_satisfied);
        assert!(r.violated_conditions.contains(&"alpha_2/sigma^2>=2kappa-3/2".to_string()));
    }

    #[test]
    fn gbm_terminal() {
        let e = gbm_exact_terminal(2.0, 0.3, 0.0, 1.5, 0.7);
        assert!((e - 2.0 * (0.45f64).exp()).abs() < 1e-15);
        let e = gbm_exact_terminal(1.0, 0.5, 0.4, 1.0, 0.0);
        assert!((e - (0.5f64 - 0.08).exp()).abs() < 1e-15);
    }

    #[test]
    fn poly_stress_plug_ins() {
        let m = polynomial_stress_dynamics(1.0);
        assert_eq!(m.drift(&scalar(1.0))[0], -1.0);
        assert_eq!(m.diffusion_column(&scalar(2.0), 0)[0], 4.0);
        assert_eq!(levy_coefficient_eval(&m, &scalar(1.0), 0, 0).unwrap()[0], 2.0);
        for x in [-10.0, 10.0] {
            let inner = x * m.drift(&scalar(x))[0];
            assert!(inner <= 1.0 * (1.0 + x * x));
        }
    }

    #[test]
    fn registry_names_round_trip() {
        let specs = [
            ModelSpec::Heston32(Heston32Params::reference()),
            ModelSpec::AitSahalia(AitSahaliaParams::case_one()),
            ModelSpec::Gbm(GbmParams::new(0.5, 0.5, 1.0).unwrap()),
            ModelSpec::PolyStress(PolyStressParams { sigma: 1.0, x0: 1.0 }),
        ];
        let names: Vec<_> = specs.iter().map(|s| s.name()).collect();
        assert_eq!(names, ModelSpec::NAMES);
        for s in &specs {
            let dynamics = s.dynamics();
            assert!(dynamics.in_domain(&s.x0()));
            let pts = [s.x0(), scalar(0.5), scalar(2.0)];
            assert!(commutativity_check(dynamics.as_ref(), &pts, 1e-8).unwrap());
        }
    }

    #[test]
    fn parameter_validation() {
        assert!(Heston32Params::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(AitSahaliaParams::new(1.5, 2.0, 1.0, 1.0, 1.0, 1.0, 2.0, 1.0).is_err());
        assert!(AitSahaliaParams::new(1.5, 2.0, 1.0, 1.0, 1.0, 4.0, 2.0, 1.0).is_ok());
        assert!(GbmParams::new(0.1, -0.1, 1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn rel(a: f64, b: f64) -> f64 {
            (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
        }

        fn analytic_matches_fd(model: &dyn ModelDynamics, x: f64) -> f64 {
            let analytic = model.levy_coefficient(&scalar(x), 0, 0).unwrap()[0];
            rel(analytic, fd_levy(model, x))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn heston_levy_fd(x in 0.01f64..10.0) {
                let m = heston32_dynamics(Heston32Params::reference());
                prop_assert!(analytic_matches_fd(&m, x) < 1e-5);
            }

            #[test]
            fn ait_sahalia_levy_fd(x in 0.01f64..5.0) {
                prop_assert!(analytic_matches_fd(&ait_sahalia_dynamics(AitSahaliaParams::case_one()), x) < 1e-5);
                prop_assert!(analytic_matches_fd(&ait_sahalia_dynamics(AitSahaliaParams::case_two()), x) < 1e-5);
            }

            #[test]
            fn gbm_levy_fd(x in -10.0f64..10.0, sigma in 0.01f64..2.0) {
                prop_assume!(x.abs() > 1e-3);
                prop_assert!(analytic_matches_fd(&gbm_dynamics(0.1, sigma, 1.0), x) < 1e-5);
            }

            #[test]
            fn poly_levy_fd(x in -5.0f64..5.0) {
                prop_assume!(x.abs() > 1e-3);
                prop_assert!(analytic_matches_fd(&polynomial_stress_dynamics(1.0), x) < 1e-5);
            }
        }
    }
}
