//! Refinable Brownian increments and iterated stochastic integrals.
//!
//! Every increment is addressed by `(seed, sample_id, step, component)`:
//! ChaCha8 keyed by `seed`, stream `sample_id`, and a fixed four-word slot per
//! `(step, component)` pair. Generating a fabric sequentially and seeking to a
//! single entry give the same value, so results never depend on how samples
//! are distributed over workers.
//!
//! Increments are snapped to a dyadic grid (`2^-40` scaled by `sqrt(T)`), fine
//! enough to be invisible statistically but coarse enough that any partial sum
//! of a path is exact in `f64`. Aggregation is therefore associative bit for
//! bit: a coarse increment built in one pass or by repeated refinement is the
//! same number.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Result, SdeError};

const WORDS_PER_DRAW: u128 = 4;
const QUANTUM_BITS: i32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStreamKey {
    pub seed: u64,
    pub sample_id: u64,
}

impl RngStreamKey {
    pub fn new(seed: u64, sample_id: u64) -> Self {
        RngStreamKey { seed, sample_id }
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.sample_id);
        rng
    }
}

/// Uniform on `(0, 1]` from the top 53 bits.
fn open_unit(bits: u64) -> f64 {
    1.0 - (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One standard normal from exactly two words of the stream (Box-Muller,
/// cosine branch only so that each draw owns a fixed slot).
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = open_unit(rng.next_u64());
    let u2 = open_unit(rng.next_u64());
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn quantum(t_end: f64) -> f64 {
    let scale = t_end.sqrt().log2().ceil() as i32;
    2f64.powi(scale - QUANTUM_BITS)
}

fn snap(value: f64, q: f64) -> f64 {
    (value / q).round() * q
}

/// Row-major `steps x m` matrix of Brownian increments on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementMatrix {
    steps: usize,
    m: usize,
    h: f64,
    data: Vec<f64>,
}

impl IncrementMatrix {
    pub fn from_rows(h: f64, m: usize, data: Vec<f64>) -> Result<Self> {
        if m == 0 || !data.len().is_multiple_of(m) {
            return Err(SdeError::argument(format!(
                "{} entries do not form rows of width {m}",
                data.len()
            )));
        }
        Ok(IncrementMatrix {
            steps: data.len() / m,
            m,
            h,
            data,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    /// Step size of one row.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.m..(n + 1) * self.m]
    }

    /// Rows `start..start + len` as one flat slice.
    pub fn rows(&self, start: usize, len: usize) -> &[f64] {
        &self.data[start * self.m..(start + len) * self.m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Left-to-right sum of each column over the whole horizon, i.e. `W_T`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.m];
        for n in 0..self.steps {
            for (a, v) in acc.iter_mut().zip(self.row(n)) {
                *a += v;
            }
        }
        acc
    }
}

/// Per-sample Brownian increments on the finest grid of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianFabric {
    key: RngStreamKey,
    t_end: f64,
    increments: IncrementMatrix,
}

impl BrownianFabric {
    pub fn key(&self) -> RngStreamKey {
        self.key
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn fine_steps(&self) -> usize {
        self.increments.steps
    }

    pub fn noise_dim(&self) -> usize {
        self.increments.m
    }

    pub fn h_fine(&self) -> f64 {
        self.increments.h
    }

    pub fn increments(&self) -> &IncrementMatrix {
        &self.increments
    }
}

/// Draws the `n_fine x m` increment matrix for `key`, entries
/// `N(0, t_end / n_fine)`.
pub fn sample_fine_increments(
    key: RngStreamKey,
    n_fine: usize,
    m: usize,
    t_end: f64,
) -> Result<BrownianFabric> {
    if n_fine == 0 || m == 0 {
        return Err(SdeError::argument(format!(
            "fabric dimensions must be positive (n_fine = {n_fine}, m = {m})"
        )));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(SdeError::argument(format!("t_end = {t_end} must be positive")));
    }
    let h = t_end / n_fine as f64;
    let sd = h.sqrt();
    let q = quantum(t_end);
    let mut rng = key.rng();
    let data = (0..n_fine * m)
        .map(|_| snap(sd * standard_normal(&mut rng), q))
        .collect();
    Ok(BrownianFabric {
        key,
        t_end,
        increments: IncrementMatrix {
            steps: n_fine,
            m,
            h,
            data,
        },
    })
}

/// Random access to a single fabric entry without generating the rest.
pub fn increment_at(
    key: RngStreamKey,
    n_fine: usize,
    m: usize,
    t_end: f64,
    step: usize,
    component: usize,
) -> f64 {
    let mut rng = key.rng();
    let index = (step * m + component) as u128;
    rng.set_word_pos(index * WORDS_PER_DRAW);
    let sd = (t_end / n_fine as f64).sqrt();
    snap(sd * standard_normal(&mut rng), quantum(t_end))
}

/// Sums each block of `ratio` consecutive rows, left to right.
pub fn aggregate_increments(increments: &IncrementMatrix, ratio: usize) -> Result<IncrementMatrix> {
    if ratio == 0 || !increments.steps.is_multiple_of(ratio) {
        return Err(SdeError::argument(format!(
            "ratio {ratio} does not divide {} steps",
            increments.steps
        )));
    }
    let m = increments.m;
    let coarse_steps = increments.steps / ratio;
    let mut data = Vec::with_capacity(coarse_steps * m);
    for c in 0..coarse_steps {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..ratio {
                acc += increments.data[(c * ratio + k) * m + j];
            }
            data.push(acc);
        }
    }
    Ok(IncrementMatrix {
        steps: coarse_steps,
        m,
        h: increments.h * ratio as f64,
        data,
    })
}

/// Iterated integrals `I[j1][j2]` over one step.
#[derive(Debug, Clone, PartialEq)]
pub struct IteratedIntegrals {
    values: DMatrix<f64>,
}

impl IteratedIntegrals {
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(SdeError::argument("iterated integral matrix must be square"));
        }
        Ok(IteratedIntegrals { values })
    }

    pub fn noise_dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, j1: usize, j2: usize) -> f64 {
        self.values[(j1, j2)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// Assembly valid under commutative noise: `(dW_j^2 - h)/2` on the diagonal
/// and the symmetric split `dW_j1 dW_j2 / 2` off it, so that
/// `I[j1][j2] + I[j2][j1] == dW_j1 * dW_j2` exactly.
pub fn iterated_integrals_commutative(dw: &[f64], h: f64) -> IteratedIntegrals {
    let m = dw.len();
    let values = DMatrix::from_fn(m, m, |a, b| {
        if a == b {
            0.5 * (dw[a] * dw[a] - h)
        } else {
            0.5 * (dw[a] * dw[b])
        }
    });
    IteratedIntegrals { values }
}

/// Ito-Riemann approximation from `k >= 2` fine sub-increments (row-major
/// `k x m`): `I[j1][j2] = sum_k (W^{j1}_{s_k} - W^{j1}_{t_n}) dW^{j2}_k`.
pub fn iterated_integrals_subsampled(sub_increments: &[f64], m: usize) -> Result<IteratedIntegrals> {
    if m == 0 || !sub_increments.len().is_multiple_of(m) {
        return Err(SdeError::argument("sub-increments do not form rows of width m"));
    }
    let k = sub_increments.len() / m;
    if k < 2 {
        return Err(SdeError::argument(format!(
            "subsampled iterated integrals need at least 2 sub-increments, got {k}"
        )));
    }
    let mut values = DMatrix::zeros(m, m);
    let mut running = vec![0.0; m];
    for row in sub_increments.chunks_exact(m) {
        for j1 in 0..m {
            for j2 in 0..m {
                values[(j1, j2)] += running[j1] * row[j2];
            }
        }
        for (w, d) in running.iter_mut().zip(row) {
            *w += d;
        }
    }
    Ok(IteratedIntegrals { values })
}
