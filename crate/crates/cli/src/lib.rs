//! Commands behind the `sdeconv` binary. Each returns the process exit code
//! and writes to the given output and diagnostic streams.

pub mod spec;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sdeconv_core::experiments::{positivity_audit_with_workers, run_convergence_study_with_workers};
use sdeconv_core::noise::{aggregate_increments, iterated_integrals_commutative, sample_fine_increments, RngStreamKey};
use sdeconv_core::schemes::StepContext;
use sdeconv_core::SdeError;

pub use spec::{apply_seed_override, parse_spec, SpecError, StudySpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Exit code for a library error: failures while stepping a path are solver
/// failures, everything else is a validation error.
pub fn exit_code(e: &SdeError) -> i32 {
    match e {
        SdeError::Sample { .. } | SdeError::Solve { .. } | SdeError::DomainEscape { .. } => EXIT_SOLVER,
        _ => EXIT_VALIDATION,
    }
}

/// Reads and parses a spec file, applying the seed override if given.
pub fn load_spec(path: &Path, seed_override: Option<&str>) -> Result<StudySpec, (i32, String)> {
    let text = fs::read_to_string(path).map_err(|e| (EXIT_IO, format!("cannot read {}: {e}", path.display())))?;
    let mut spec = parse_spec(&text).map_err(|e| (EXIT_VALIDATION, format!("{}: {e}", path.display())))?;
    apply_seed_override(&mut spec, seed_override).map_err(|e| (EXIT_VALIDATION, e.0))?;
    Ok(spec)
}

fn warn_gates(spec: &StudySpec, err: &mut dyn Write) {
    for w in spec.config.gate_warnings() {
        let _ = writeln!(err, "warning: {w}");
    }
}

/// Runs the convergence study. The CSV goes to `out_path`, else the spec's
/// output path, else `out`. The fit summary goes to `out` when the CSV is
/// written to a file and to `err` otherwise.
pub fn cmd_convergence(
    spec: &StudySpec,
    workers: Option<usize>,
    out_path: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    warn_gates(spec, err);
    let outcome = match run_convergence_study_with_workers(&spec.config, workers) {
        Ok(o) => o,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return exit_code(&e);
        }
    };
    let csv = outcome.table.to_csv();
    let target: Option<PathBuf> = out_path.map(Path::to_path_buf).or_else(|| spec.output.clone());
    match target {
        Some(path) => {
            if let Err(e) = fs::write(&path, &csv) {
                let _ = writeln!(err, "error: cannot write {}: {e}", path.display());
                return EXIT_IO;
            }
            let _ = writeln!(out, "{}", outcome.fit);
        }
        None => {
            let _ = out.write_all(csv.as_bytes());
            let _ = writeln!(err, "{}", outcome.fit);
        }
    }
    EXIT_OK
}

/// Prints the path of one sample step by step. `exponent` selects
/// `h = t_end 2^-exponent` (the reference step by default) and `steps`
/// limits the number of steps (the whole horizon by default).
pub fn cmd_step_trace(
    spec: &StudySpec,
    exponent: Option<u32>,
    steps: Option<usize>,
    sample: u64,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cfg = &spec.config;
    let e = exponent.unwrap_or(cfg.fine_exponent);
    if e > cfg.fine_exponent {
        let _ = writeln!(err, "error: trace exponent {e} exceeds fine_exponent {}", cfg.fine_exponent);
        return EXIT_VALIDATION;
    }
    let horizon = 1usize << e;
    let steps = steps.unwrap_or(horizon);
    if steps > horizon {
        let _ = writeln!(err, "error: {steps} steps exceed the {horizon} steps of the horizon");
        return EXIT_VALIDATION;
    }
    let model = cfg.model.dynamics();
    let h = cfg.t_end / horizon as f64;
    for v in cfg.model.validate(h).violations() {
        let _ = writeln!(err, "warning: h = {h}: gate {} failed ({})", v.name, v.detail);
    }
    let coarse = sample_fine_increments(
        RngStreamKey::new(cfg.seed, sample),
        1usize << cfg.fine_exponent,
        model.noise_dim(),
        cfg.t_end,
    )
    .and_then(|fabric| aggregate_increments(fabric.increments(), 1usize << (cfg.fine_exponent - e)));
    let coarse = match coarse {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return exit_code(&e);
        }
    };
    let _ = writeln!(
        out,
        "{:>8} {:>24} {:>24} {:>24} {:>20} {:>6} {:>12}",
        "step", "t", "state", "dW", "method", "iters", "residual"
    );
    let mut x = cfg.model.x0();
    for n in 0..steps {
        let dw = coarse.row(n).to_vec();
        let integrals = iterated_integrals_commutative(&dw, h);
        let ctx = StepContext::new(x, h, dw.clone(), integrals);
        let (next, report) = match cfg.scheme.step(model.as_ref(), &ctx) {
            Ok(r) => r,
            Err(e) => {
                let _ = writeln!(err, "error: step {n} (t = {}) failed: {e}", n as f64 * h);
                return EXIT_SOLVER;
            }
        };
        x = next;
        let state: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(
            out,
            "{:>8} {:>24.16e} {:>24} {:>24.16e} {:>20} {:>6} {:>12.4e}",
            n + 1,
            cfg.t_end * (n + 1) as f64 / horizon as f64,
            state.join(" "),
            dw[0],
            report.method.as_str(),
            report.iterations,
            report.final_residual
        );
    }
    EXIT_OK
}

/// Prints the fraction of strictly positive states over all coarse runs.
pub fn cmd_positivity(spec: &StudySpec, workers: Option<usize>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    warn_gates(spec, err);
    match positivity_audit_with_workers(&spec.config, workers) {
        Ok(audit) => {
            let _ = writeln!(out, "positivity={:.6}", audit.fraction());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
