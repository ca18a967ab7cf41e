//! Coupled-path Monte Carlo estimation of mean-square errors, power-law rate
//! fits, positivity audits and the local remainder diagnostic.
//!
//! For every sample one fine Brownian fabric is drawn. The reference terminal
//! state comes from the same scheme on the fine grid (or a closed form when
//! the model has one), and every coarse run consumes aggregated increments of
//! that same fabric, so differences measure discretisation error only.
//!
//! Per-sample results are collected in sample order and reduced with a fixed
//! pairwise summation, so aggregates do not depend on the worker count.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Result, SdeError};
use crate::models::ModelSpec;
use crate::noise::{
    aggregate_increments, iterated_integrals_commutative, iterated_integrals_subsampled, sample_fine_increments,
    IncrementMatrix, IteratedIntegrals, RngStreamKey,
};
use crate::schemes::{Scheme, StepContext};
use crate::sde::{levy_coefficient_eval, ModelDynamics, SchemeParams, StateVector};

/// Fine sub-steps per reference step for non-commutative noise, where the
/// iterated integrals are approximated from a finer path.
const NON_COMMUTATIVE_OVERSAMPLING: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reference {
    /// The study's own scheme on the fine grid.
    #[default]
    FineScheme,
    /// The model's closed-form terminal value.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStudyConfig {
    pub model: ModelSpec,
    pub scheme: Scheme,
    pub t_end: f64,
    pub samples: usize,
    /// Reference step `t_end * 2^-fine_exponent`.
    pub fine_exponent: u32,
    /// Coarse steps `t_end * 2^-i`.
    pub coarse_exponents: Vec<u32>,
    pub seed: u64,
    pub reference: Reference,
}

impl ConvergenceStudyConfig {
    pub const DEFAULT_SAMPLES: usize = 10_000;
    pub const DEFAULT_FINE_EXPONENT: u32 = 12;
    pub const DEFAULT_SEED: u64 = 20_210_301;

    pub fn new(model: ModelSpec, scheme: Scheme) -> Self {
        ConvergenceStudyConfig {
            model,
            scheme,
            t_end: 1.0,
            samples: Self::DEFAULT_SAMPLES,
            fine_exponent: Self::DEFAULT_FINE_EXPONENT,
            coarse_exponents: (4..=9).collect(),
            seed: Self::DEFAULT_SEED,
            reference: Reference::FineScheme,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(SdeError::argument(format!("t_end = {} must be positive", self.t_end)));
        }
        if self.samples < 2 {
            return Err(SdeError::argument(format!("samples = {} must be at least 2", self.samples)));
        }
        if self.coarse_exponents.is_empty() {
            return Err(SdeError::argument("at least one coarse exponent is required"));
        }
        if self.fine_exponent > 30 {
            return Err(SdeError::argument("fine_exponent above 30 is not supported"));
        }
        if let Some(&bad) = self.coarse_exponents.iter().find(|&&e| e >= self.fine_exponent) {
            return Err(SdeError::argument(format!(
                "coarse exponent {bad} must be below fine_exponent {}",
                self.fine_exponent
            )));
        }
        if let Scheme::Milstein(p) | Scheme::BackwardEuler(p) = &self.scheme {
            p.validate()?;
        }
        if self.reference == Reference::Exact && self.model.exact_terminal(self.t_end, &[0.0]).is_none() {
            return Err(SdeError::argument(format!(
                "model {} has no closed-form terminal value",
                self.model
            )));
        }
        Ok(())
    }

    pub fn h_fine(&self) -> f64 {
        self.t_end / (1u64 << self.fine_exponent) as f64
    }

    /// Coarse exponents in ascending order (decreasing `h`), deduplicated.
    fn ladder(&self) -> Vec<u32> {
        let mut e = self.coarse_exponents.clone();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Failed model gates for the reference and every coarse step size.
    pub fn gate_warnings(&self) -> Vec<String> {
        let mut steps: Vec<f64> = self
            .ladder()
            .iter()
            .map(|&e| self.t_end / (1u64 << e) as f64)
            .collect();
        if self.reference == Reference::FineScheme {
            steps.push(self.h_fine());
        }
        let mut out = Vec::new();
        for h in steps {
            for v in self.model.validate(h).violations() {
                out.push(format!("h = {h}: gate {} failed ({})", v.name, v.detail));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRow {
    pub h: f64,
    pub rmse: f64,
    /// Standard error of the mean-square error estimate.
    pub sem: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
}

impl ErrorTable {
    pub const CSV_HEADER: &'static str = "h,rmse,sem,samples";

    /// CSV with 17 significant digits per real, so parsing reproduces every
    /// value exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:.16e},{:.16e},{:.16e},{}\n", r.h, r.rmse, r.sem, r.samples));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == Self::CSV_HEADER => {}
            other => {
                return Err(SdeError::argument(format!("unexpected CSV header {other:?}")));
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(SdeError::argument(format!("CSV row {} has {} fields", i + 1, fields.len())));
            }
            let real = |s: &str| {
                f64::from_str(s).map_err(|e| SdeError::argument(format!("CSV row {}: {s:?}: {e}", i + 1)))
            };
            rows.push(ErrorRow {
                h: real(fields[0])?,
                rmse: real(fields[1])?,
                sem: real(fields[2])?,
                samples: fields[3]
                    .parse()
                    .map_err(|e| SdeError::argument(format!("CSV row {}: {e}", i + 1)))?,
            });
        }
        Ok(ErrorTable { rows })
    }
}

/// Least-squares fit of `ln e = intercept + slope ln h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    /// Euclidean norm of the log-space residuals.
    pub residual_norm: f64,
}

impl fmt::Display for FitResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rate={:.6} residual={:.6}", self.slope, self.residual_norm)
    }
}

/// Ordinary least squares on `(ln h, ln e)` pairs, natural logarithms.
pub fn fit_power_law_points(points: &[(f64, f64)]) -> Result<FitResult> {
    if points.len() < 2 {
        return Err(SdeError::argument("power-law fit needs at least two points"));
    }
    if let Some(&(h, e)) = points
        .iter()
        .find(|&&(h, e)| !(h > 0.0 && e > 0.0 && h.is_finite() && e.is_finite()))
    {
        return Err(SdeError::argument(format!(
            "power-law fit needs positive finite values, got h = {h}, e = {e}"
        )));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    if sxx == 0.0 {
        return Err(SdeError::argument("power-law fit needs at least two distinct step sizes"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let residual_norm = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(FitResult {
        slope,
        intercept,
        residual_norm,
    })
}

pub fn fit_power_law(table: &ErrorTable) -> Result<FitResult> {
    let pts: Vec<(f64, f64)> = table.rows.iter().map(|r| (r.h, r.rmse)).collect();
    fit_power_law_points(&pts)
}

/// Fixed-shape pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        xs.iter().fold(0.0, |a, b| a + b)
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutcome {
    pub table: ErrorTable,
    pub fit: FitResult,
    /// Failed theory gates; the study still ran.
    pub warnings: Vec<String>,
}

fn oversampling(model: &dyn ModelDynamics, scheme: &Scheme) -> usize {
    if model.is_commutative() || !scheme.uses_iterated_integrals() || model.noise_dim() == 1 {
        1
    } else {
        NON_COMMUTATIVE_OVERSAMPLING
    }
}

fn step_integrals(model: &dyn ModelDynamics, fine: &IncrementMatrix, n: usize, ratio: usize, dw: &[f64], h: f64) -> Result<IteratedIntegrals> {
    if model.is_commutative() || model.noise_dim() == 1 {
        Ok(iterated_integrals_commutative(dw, h))
    } else {
        iterated_integrals_subsampled(fine.rows(n * ratio, ratio), model.noise_dim())
    }
}

/// Visits every state of the path driven by `fine` aggregated by `ratio`.
/// `visit(n, state)` sees the state after step `n + 1`. On a failed step the
/// error carries the step index.
fn run_path<V>(
    model: &dyn ModelDynamics,
    scheme: &Scheme,
    x0: &StateVector,
    fine: &IncrementMatrix,
    ratio: usize,
    mut visit: V,
) -> std::result::Result<StateVector, (usize, f64, SdeError)>
where
    V: FnMut(usize, &StateVector),
{
    let h = fine.h() * ratio as f64;
    let coarse = aggregate_increments(fine, ratio).map_err(|e| (0, h, e))?;
    let mut x = x0.clone();
    for n in 0..coarse.steps() {
        let dw = coarse.row(n);
        let integrals = if scheme.uses_iterated_integrals() {
            step_integrals(model, fine, n, ratio, dw, h).map_err(|e| (n, h, e))?
        } else {
            iterated_integrals_commutative(dw, h)
        };
        let ctx = StepContext::new(x, h, dw.to_vec(), integrals);
        let (next, _) = scheme.step(model, &ctx).map_err(|e| (n, h, e))?;
        x = next;
        visit(n, &x);
    }
    Ok(x)
}

fn sample_error(sample: u64, err: (usize, f64, SdeError)) -> SdeError {
    let (step, h, source) = err;
    SdeError::Sample {
        sample,
        step,
        h,
        source: Box::new(source),
    }
}

/// Squared terminal errors of one sample, one per ladder entry.
fn sample_squared_errors(
    cfg: &ConvergenceStudyConfig,
    model: &dyn ModelDynamics,
    ladder: &[u32],
    sample: u64,
) -> Result<Vec<f64>> {
    let over = oversampling(model, &cfg.scheme);
    let n_fine = (1usize << cfg.fine_exponent) * over;
    let fabric = sample_fine_increments(
        RngStreamKey::new(cfg.seed, sample),
        n_fine,
        model.noise_dim(),
        cfg.t_end,
    )?;
    let fine = fabric.increments();
    let x0 = cfg.model.x0();
    let reference = match cfg.reference {
        Reference::Exact => cfg
            .model
            .exact_terminal(cfg.t_end, &fine.column_sums())
            .ok_or_else(|| SdeError::argument("model has no closed-form terminal value"))?,
        Reference::FineScheme => {
            run_path(model, &cfg.scheme, &x0, fine, over, |_, _| {}).map_err(|e| sample_error(sample, e))?
        }
    };
    ladder
        .iter()
        .map(|&e| {
            let ratio = (1usize << (cfg.fine_exponent - e)) * over;
            let y = run_path(model, &cfg.scheme, &x0, fine, ratio, |_, _| {}).map_err(|e| sample_error(sample, e))?;
            Ok((&reference - y).norm_squared())
        })
        .collect()
}

/// Maps `work` over sample ids in order, optionally on a dedicated pool of
/// `workers` threads. Output order never depends on scheduling.
fn map_samples<T, F>(samples: usize, workers: Option<usize>, work: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let run = || -> Vec<Result<T>> { (0..samples as u64).into_par_iter().map(&work).collect() };
    let results = match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| SdeError::argument(format!("cannot build worker pool: {e}")))?;
            pool.install(run)
        }
        None => run(),
    };
    // First failure by sample id, for reproducible reporting.
    results.into_iter().collect()
}

fn mean_and_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn run_convergence_study(cfg: &ConvergenceStudyConfig) -> Result<StudyOutcome> {
    run_convergence_study_with_workers(cfg, None)
}

/// Runs the study on `workers` threads (the global pool when `None`).
pub fn run_convergence_study_with_workers(cfg: &ConvergenceStudyConfig, workers: Option<usize>) -> Result<StudyOutcome> {
    cfg.validate()?;
    let warnings = cfg.gate_warnings();
    let model = cfg.model.dynamics();
    let ladder = cfg.ladder();
    let per_sample = map_samples(cfg.samples, workers, |s| {
        sample_squared_errors(cfg, model.as_ref(), &ladder, s)
    })?;
    let rows = ladder
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let column: Vec<f64> = per_sample.iter().map(|v| v[i]).collect();
            let (mse, sem) = mean_and_sem(&column);
            ErrorRow {
                h: cfg.t_end / (1u64 << e) as f64,
                rmse: mse.sqrt(),
                sem,
                samples: cfg.samples,
            }
        })
        .collect();
    let table = ErrorTable { rows };
    let fit = fit_power_law(&table)?;
    Ok(StudyOutcome { table, fit, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositivityAudit {
    pub positive: u64,
    pub total: u64,
}

impl PositivityAudit {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.positive as f64 / self.total as f64
        }
    }
}

/// Counts the states `Y_1..Y_N` of every coarse run that are strictly
/// positive. A step that fails (domain escape or solver failure) counts
/// itself and every remaining step of that run as non-positive.
pub fn positivity_audit(cfg: &ConvergenceStudyConfig) -> Result<PositivityAudit> {
    positivity_audit_with_workers(cfg, None)
}

pub fn positivity_audit_with_workers(cfg: &ConvergenceStudyConfig, workers: Option<usize>) -> Result<PositivityAudit> {
    cfg.validate()?;
    let model = cfg.model.dynamics();
    if model.domain().lower_bound().is_none() {
        return Err(SdeError::argument(format!(
            "model {} does not have a positive domain",
            cfg.model
        )));
    }
    let ladder = cfg.ladder();
    let counts = map_samples(cfg.samples, workers, |s| {
        let model = model.as_ref();
        let over = oversampling(model, &cfg.scheme);
        let fabric = sample_fine_increments(
            RngStreamKey::new(cfg.seed, s),
            (1usize << cfg.fine_exponent) * over,
            model.noise_dim(),
            cfg.t_end,
        )?;
        let mut positive = 0u64;
        let mut total = 0u64;
        for &e in &ladder {
            let ratio = (1usize << (cfg.fine_exponent - e)) * over;
            let steps = 1u64 << e;
            // A failed run stops visiting; its remaining steps stay uncounted.
            let _ = run_path(model, &cfg.scheme, &cfg.model.x0(), fabric.increments(), ratio, |_, x| {
                if x.iter().all(|&v| v > 0.0) {
                    positive += 1;
                }
            });
            total += steps;
        }
        Ok((positive, total))
    })?;
    let positive = counts.iter().map(|c| c.0).sum();
    let total = counts.iter().map(|c| c.1).sum();
    Ok(PositivityAudit { positive, total })
}

// ---------------------------------------------------------------------------
// Remainder diagnostic

/// The one-step defect `R_i` of a path inserted into the scheme, for every
/// window of `window_h` along a fine path.
///
/// `path[k]` is the state at fine node `k` (`path.len() = fine.steps() + 1`).
/// Time integrals are left-endpoint Riemann sums on the fine grid; the
/// iterated integrals over a window are the matching Ito sums of the fine
/// increments.
pub fn remainder_terms(
    model: &dyn ModelDynamics,
    params: &SchemeParams,
    path: &[StateVector],
    fine: &IncrementMatrix,
    window_h: f64,
) -> Result<Vec<StateVector>> {
    if path.len() != fine.steps() + 1 {
        return Err(SdeError::argument(format!(
            "path has {} states for {} fine steps",
            path.len(),
            fine.steps()
        )));
    }
    let ratio_f = window_h / fine.h();
    let ratio = ratio_f.round() as usize;
    if ratio == 0 || (ratio_f - ratio as f64).abs() > 1e-9 * ratio_f || !fine.steps().is_multiple_of(ratio) {
        return Err(SdeError::argument(format!(
            "window h = {window_h} is not aligned to the fine grid (h_fine = {})",
            fine.h()
        )));
    }
    let (theta, eta) = (params.theta, params.eta);
    let m = model.noise_dim();
    let d = model.state_dim();
    let hf = fine.h();
    let h = hf * ratio as f64;
    let drifts: Vec<StateVector> = path.iter().map(|x| model.drift(x)).collect();
    let windows = fine.steps() / ratio;
    let mut out = Vec::with_capacity(windows);
    for i in 0..windows {
        let a = i * ratio;
        let b = a + ratio;
        let (xa, xb) = (&path[a], &path[b]);
        let ga: Vec<StateVector> = (0..m).map(|j| model.diffusion_column(xa, j)).collect();
        let mut r = StateVector::zeros(d);
        for k in a..b {
            let fk = &drifts[k];
            r += (fk - &drifts[b]) * (theta * hf);
            r += (fk - &drifts[a]) * ((1.0 - theta) * hf);
            let dw = fine.row(k);
            for j in 0..m {
                r += (model.diffusion_column(&path[k], j) - &ga[j]) * dw[j];
            }
        }
        let integrals = if ratio >= 2 {
            iterated_integrals_subsampled(fine.rows(a, ratio), m)?
        } else {
            iterated_integrals_commutative(fine.row(a), h)
        };
        for j1 in 0..m {
            for j2 in 0..m {
                r -= levy_coefficient_eval(model, xa, j1, j2)? * integrals.get(j1, j2);
            }
        }
        if eta != 0.0 {
            for j in 0..m {
                let diff = levy_coefficient_eval(model, xb, j, j)? - levy_coefficient_eval(model, xa, j, j)?;
                r += diff * (0.5 * eta * h);
            }
        }
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemainderStudyConfig {
    pub model: ModelSpec,
    pub params: SchemeParams,
    pub t_end: f64,
    pub samples: usize,
    pub fine_exponent: u32,
    pub window_exponents: Vec<u32>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemainderRow {
    pub h: f64,
    /// `(E |R_i|^2)^{1/2}`, averaged over windows and samples.
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemainderOutcome {
    pub rows: Vec<RemainderRow>,
    pub fit: FitResult,
}

/// Monte Carlo estimate of the remainder size over a ladder of window
/// lengths, using the scheme's fine path as the stand-in for the exact
/// solution.
pub fn remainder_diagnostic(cfg: &RemainderStudyConfig) -> Result<RemainderOutcome> {
    cfg.params.validate()?;
    if cfg.samples < 1 || cfg.window_exponents.len() < 2 {
        return Err(SdeError::argument("remainder study needs samples and at least two windows"));
    }
    if cfg.window_exponents.iter().any(|&e| e > cfg.fine_exponent) {
        return Err(SdeError::argument("window exponents must not exceed the fine exponent"));
    }
    let model = cfg.model.dynamics();
    let scheme = Scheme::Milstein(cfg.params);
    let mut ladder = cfg.window_exponents.clone();
    ladder.sort_unstable();
    ladder.dedup();
    let per_sample = map_samples(cfg.samples, None, |s| {
        let model = model.as_ref();
        let fabric = sample_fine_increments(
            RngStreamKey::new(cfg.seed, s),
            1usize << cfg.fine_exponent,
            model.noise_dim(),
            cfg.t_end,
        )?;
        let fine = fabric.increments();
        let mut path = Vec::with_capacity(fine.steps() + 1);
        path.push(cfg.model.x0());
        run_path(model, &scheme, &cfg.model.x0(), fine, 1, |_, x| path.push(x.clone()))
            .map_err(|e| sample_error(s, e))?;
        ladder
            .iter()
            .map(|&e| {
                let window_h = cfg.t_end / (1u64 << e) as f64;
                let terms = remainder_terms(model, &cfg.params, &path, fine, window_h)?;
                let sq: Vec<f64> = terms.iter().map(|r| r.norm_squared()).collect();
                Ok(pairwise_sum(&sq) / sq.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let rows: Vec<RemainderRow> = ladder
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let column: Vec<f64> = per_sample.iter().map(|v| v[i]).collect();
            RemainderRow {
                h: cfg.t_end / (1u64 << e) as f64,
                rms: (pairwise_sum(&column) / column.len() as f64).sqrt(),
            }
        })
        .collect();
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.h, r.rms)).collect();
    let fit = fit_power_law_points(&pts)?;
    Ok(RemainderOutcome { rows, fit })
}
