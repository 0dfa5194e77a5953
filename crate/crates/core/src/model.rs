//! Domain types for the logistic linear mixed model
//!
//! ```text
//! logit P(y_j = 1) = eta_j,   eta = X beta + Z_1 u_1 + ... + Z_m u_m
//! ```
//!
//! and the two objective functions every solver in this crate works with:
//! the complete log-likelihood `h(u | beta, sigma)` and its Laplace
//! approximation `L_LA(beta, sigma)`.
//!
//! Two parameterizations are supported. In [`Formulation::F1`] the random
//! effects carry the variance, `u_i ~ N(0, sigma_i^2 I)`. In
//! [`Formulation::F2`] they are standardized, `u_i ~ N(0, I)`, and the linear
//! predictor is `X beta + sum_i sigma_i Z_i u_i`, which lets `sigma_i` reach
//! zero exactly.
//!
//! All objective values include the constant `-(n/2) ln(2 pi)`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcmmError};
use crate::linalg;

/// Default clamp applied to fitted probabilities before forming weights.
pub const DEFAULT_WEIGHT_CLAMP_EPS: f64 = 1e-10;

/// Response, fixed-effect design and block-structured random-effect designs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemData {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z_blocks: Vec<DMatrix<f64>>,
    /// Column-concatenation of `z_blocks`.
    z: DMatrix<f64>,
    offsets: Vec<usize>,
}

impl ProblemData {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z_blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(VcmmError::domain("response vector is empty"));
        }
        if let Some(j) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(VcmmError::domain(format!(
                "response entry {j} is {}, expected 0 or 1",
                y[j]
            )));
        }
        if x.nrows() != n {
            return Err(VcmmError::domain(format!(
                "X has {} rows but y has {n} entries",
                x.nrows()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(VcmmError::domain("X contains non-finite entries"));
        }
        if z_blocks.is_empty() {
            return Err(VcmmError::domain("at least one random-effect block is required"));
        }
        let mut offsets = Vec::with_capacity(z_blocks.len() + 1);
        offsets.push(0);
        for (i, zi) in z_blocks.iter().enumerate() {
            if zi.nrows() != n {
                return Err(VcmmError::domain(format!(
                    "random-effect block {i} has {} rows but y has {n} entries",
                    zi.nrows()
                )));
            }
            if zi.ncols() == 0 {
                return Err(VcmmError::domain(format!(
                    "random-effect block {i} has no columns"
                )));
            }
            if zi.iter().any(|v| !v.is_finite()) {
                return Err(VcmmError::domain(format!(
                    "random-effect block {i} contains non-finite entries"
                )));
            }
            offsets.push(offsets[i] + zi.ncols());
        }
        let q = offsets[z_blocks.len()];
        let mut z = DMatrix::zeros(n, q);
        for (i, zi) in z_blocks.iter().enumerate() {
            z.columns_mut(offsets[i], zi.ncols()).copy_from(zi);
        }
        Ok(Self {
            y,
            x,
            z_blocks,
            z,
            offsets,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.z_blocks.len()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.z_blocks.iter().map(|b| b.ncols()).collect()
    }

    /// Columns of the concatenated `Z` belonging to block `i`.
    pub fn block_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn z_blocks(&self) -> &[DMatrix<f64>] {
        &self.z_blocks
    }

    /// Per-column scale vector of `D = blkdiag(s_1 I, ..., s_m I)`.
    pub(crate) fn expand_blocks(&self, per_block: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.q());
        for i in 0..self.m() {
            out.rows_mut(self.offsets[i], self.offsets[i + 1] - self.offsets[i])
                .fill(per_block[i]);
        }
        out
    }
}

/// Fixed effects and variance components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: DVector<f64>,
    pub sigma2: DVector<f64>,
}

impl ModelParams {
    pub fn new(beta: DVector<f64>, sigma2: DVector<f64>) -> Result<Self> {
        if let Some(i) = sigma2.iter().position(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(VcmmError::domain(format!(
                "variance component {i} is {}, expected a finite nonnegative value",
                sigma2[i]
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(VcmmError::domain("beta contains non-finite entries"));
        }
        Ok(Self { beta, sigma2 })
    }

    /// Build from standard deviations (the formulation-2 scale).
    pub fn from_sigma(beta: DVector<f64>, sigma: &DVector<f64>) -> Result<Self> {
        Self::new(beta, sigma.map(|s| s * s))
    }

    pub fn sigma(&self) -> DVector<f64> {
        self.sigma2.map(f64::sqrt)
    }

    pub(crate) fn check_dims(&self, data: &ProblemData) -> Result<()> {
        if self.beta.len() != data.p() {
            return Err(VcmmError::domain(format!(
                "beta has length {} but X has {} columns",
                self.beta.len(),
                data.p()
            )));
        }
        if self.sigma2.len() != data.m() {
            return Err(VcmmError::domain(format!(
                "sigma2 has length {} but there are {} random-effect blocks",
                self.sigma2.len(),
                data.m()
            )));
        }
        Ok(())
    }
}

/// Conditional mode of the random effects and the quantities derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceState {
    /// Concatenated `u_1, ..., u_m` on the scale of the active formulation.
    pub u: DVector<f64>,
    pub eta: DVector<f64>,
    pub p: DVector<f64>,
    /// Diagonal of `W`, `w_j = p_j (1 - p_j)`.
    pub w: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Formulation {
    /// `u_i ~ N(0, sigma_i^2 I)`, `eta = X beta + Z u`.
    F1,
    /// `u_i ~ N(0, I)`, `eta = X beta + Z D u`.
    F2,
}

impl Formulation {
    pub fn algorithm_name(self) -> &'static str {
        match self {
            Formulation::F1 => "mmla1",
            Formulation::F2 => "mmla2",
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.algorithm_name())
    }
}

impl FromStr for Formulation {
    type Err = VcmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mmla1" | "f1" | "1" => Ok(Formulation::F1),
            "mmla2" | "f2" | "2" => Ok(Formulation::F2),
            other => Err(VcmmError::domain(format!(
                "unknown formulation {other:?} (expected mmla1 or mmla2)"
            ))),
        }
    }
}

/// Iteration limits, tolerances and starting values for a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    /// Relative objective change `|L' - L| / (1 + |L|)` that stops the outer loop.
    pub outer_tol: f64,
    /// Gradient max-norm that stops the inner mode search.
    pub inner_tol: f64,
    /// `None` starts from zeros.
    pub init_beta: Option<Vec<f64>>,
    /// `None` starts every variance component at 1.
    pub init_sigma2: Option<Vec<f64>>,
    pub weight_clamp_eps: f64,
    pub seed: u64,
    /// Evaluate the sigma-restricted objective before and after every
    /// variance-component step and keep the differences in the diagnostics.
    pub track_sigma_steps: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 500,
            max_inner_iters: 200,
            outer_tol: 1e-8,
            inner_tol: 1e-6,
            init_beta: None,
            init_sigma2: None,
            weight_clamp_eps: DEFAULT_WEIGHT_CLAMP_EPS,
            seed: 0,
            track_sigma_steps: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return Err(VcmmError::domain("iteration caps must be at least 1"));
        }
        for (name, v) in [
            ("outer_tol", self.outer_tol),
            ("inner_tol", self.inner_tol),
            ("weight_clamp_eps", self.weight_clamp_eps),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(VcmmError::domain(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_clamp_eps >= 0.5 {
            return Err(VcmmError::domain("weight_clamp_eps must be below 0.5"));
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid_clamped(x: f64, eps: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(eps, 1.0 - eps)
}

/// Inverse logit, clamped to `[eps, 1 - eps]`.
pub fn logistic(eta: &DVector<f64>, eps: f64) -> Result<DVector<f64>> {
    if let Some(j) = eta.iter().position(|v| !v.is_finite()) {
        return Err(VcmmError::domain(format!(
            "linear predictor entry {j} is not finite ({})",
            eta[j]
        )));
    }
    Ok(eta.map(|v| sigmoid_clamped(v, eps)))
}

/// Bernoulli log-likelihood `sum_j y_j eta_j - ln(1 + e^eta_j)`.
pub(crate) fn bernoulli_loglik(y: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    y.iter()
        .zip(eta.iter())
        .map(|(&yj, &ej)| yj * ej - softplus(ej))
        .sum()
}

pub(crate) fn log_2pi_const(n: usize) -> f64 {
    -0.5 * n as f64 * (2.0 * PI).ln()
}

/// `X beta + Z u` (F1) or `X beta + Z D u` (F2).
pub fn linear_predictor(
    form: Formulation,
    u: &DVector<f64>,
    params: &ModelParams,
    data: &ProblemData,
) -> DVector<f64> {
    let mut eta = data.x() * &params.beta;
    match form {
        Formulation::F1 => eta.gemv(1.0, data.z(), u, 1.0),
        Formulation::F2 => {
            let du = u.component_mul(&data.expand_blocks(&params.sigma()));
            eta.gemv(1.0, data.z(), &du, 1.0);
        }
    }
    eta
}

/// Recompute `eta`, `p` and `w` from a random-effect vector.
pub fn state_from_u(
    form: Formulation,
    u: DVector<f64>,
    params: &ModelParams,
    data: &ProblemData,
    eps: f64,
) -> Result<LaplaceState> {
    let eta = linear_predictor(form, &u, params, data);
    let p = logistic(&eta, eps)?;
    let w = p.map(|pj| pj * (1.0 - pj));
    Ok(LaplaceState { u, eta, p, w })
}

/// Random-effect penalty: `1/2 sum_i ||u_i||^2 / sigma_i^2` (F1) or `1/2 ||u||^2` (F2).
///
/// In F1 a block with `sigma_i^2 = 0` is accepted only when `u_i = 0`; it then
/// contributes nothing, which is the limit along the conditional mode.
pub(crate) fn random_effect_penalty(
    form: Formulation,
    u: &DVector<f64>,
    params: &ModelParams,
    data: &ProblemData,
) -> Result<f64> {
    match form {
        Formulation::F2 => Ok(0.5 * u.norm_squared()),
        Formulation::F1 => {
            let mut total = 0.0;
            for i in 0..data.m() {
                let r = data.block_range(i);
                let ss = u.rows(r.start, r.len()).norm_squared();
                let s2 = params.sigma2[i];
                if s2 > 0.0 {
                    total += ss / s2;
                } else if ss > 0.0 {
                    return Err(VcmmError::SingularParameter { block: i });
                }
            }
            Ok(0.5 * total)
        }
    }
}

fn check_u_len(u: &DVector<f64>, data: &ProblemData) -> Result<()> {
    if u.len() != data.q() {
        return Err(VcmmError::domain(format!(
            "random-effect vector has length {} but q = {}",
            u.len(),
            data.q()
        )));
    }
    Ok(())
}

/// Complete log-likelihood `h(u | beta, sigma)` including `-(n/2) ln 2 pi`.
///
/// F1 also carries `-1/2 sum_i q_i ln sigma_i^2`, so every `sigma_i^2` must be positive.
pub fn complete_loglik(
    form: Formulation,
    u: &DVector<f64>,
    params: &ModelParams,
    data: &ProblemData,
) -> Result<f64> {
    params.check_dims(data)?;
    check_u_len(u, data)?;
    let mut value = log_2pi_const(data.n());
    if form == Formulation::F1 {
        for (i, &s2) in params.sigma2.iter().enumerate() {
            if s2 <= 0.0 {
                return Err(VcmmError::SingularParameter { block: i });
            }
            value -= 0.5 * data.block_range(i).len() as f64 * s2.ln();
        }
    }
    let eta = linear_predictor(form, u, params, data);
    value += bernoulli_loglik(data.y(), &eta);
    value -= random_effect_penalty(form, u, params, data)?;
    Ok(value)
}

/// `ln det(I_q + Z(sigma)^T W Z(sigma))`, using the q x q capacitance matrix
/// when `q <= n` and `ln det(W^-1 + sum sigma_i^2 Z_i Z_i^T) + ln det W` otherwise.
pub fn laplace_logdet(w: &DVector<f64>, sigma: &DVector<f64>, data: &ProblemData) -> Result<f64> {
    if data.q() <= data.n() {
        return Ok(linalg::build_capacitance(w, sigma, data.z_blocks())?.log_det());
    }
    let n = data.n();
    let zs = linalg::scaled_z(sigma, data.z_blocks());
    let mut a = &zs * zs.transpose();
    for j in 0..n {
        a[(j, j)] += 1.0 / w[j];
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| VcmmError::numerical("n x n marginal covariance is not positive definite"))?;
    let ld: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok(ld + w.iter().map(|wj| wj.ln()).sum::<f64>())
}

/// Laplace-approximated log-likelihood at the conditional mode held in `state`:
///
/// ```text
/// sum_j {y_j eta*_j - ln(1 + e^eta*_j)} - penalty(u*) - 1/2 ln det(I + Z(s)^T W* Z(s)) - (n/2) ln 2 pi
/// ```
pub fn laplace_loglik(
    form: Formulation,
    state: &LaplaceState,
    params: &ModelParams,
    data: &ProblemData,
) -> Result<f64> {
    params.check_dims(data)?;
    check_u_len(&state.u, data)?;
    let fit = bernoulli_loglik(data.y(), &state.eta);
    let penalty = random_effect_penalty(form, &state.u, params, data)?;
    let logdet = laplace_logdet(&state.w, &params.sigma(), data)?;
    Ok(fit - penalty - 0.5 * logdet + log_2pi_const(data.n()))
}
