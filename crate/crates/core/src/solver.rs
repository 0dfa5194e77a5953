//! MM fitting of the Laplace-approximated likelihood.
//!
//! One outer iteration follows the PIRLS-style cycle
//!
//! 1. maximize `h(u | beta, sigma)` over `u` with the fixed quadratic bound
//!    `w_j <= 1/4` (one Cholesky per inner solve),
//! 2. take one MM step for `beta` (a logistic regression with offset),
//! 3. refresh `p` and `W*` at the new `beta`,
//! 4. take one MM step for the variance components.
//!
//! Formulation 1 ([`Formulation::F1`], algorithm "MMLA1") updates `sigma^2`
//! through the supporting-hyperplane bound of `-ln det`. Formulation 2
//! ([`Formulation::F2`], "MMLA2") updates `sigma` through a quadratic bound on
//! the Bernoulli term, a Cauchy bound that separates the blocks, and the same
//! log-det bound, followed by projection onto `sigma >= 0`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcmmError};
use crate::model::{
    bernoulli_loglik, laplace_logdet, laplace_loglik, linear_predictor, log_2pi_const,
    state_from_u, FitConfig, Formulation, LaplaceState, ModelParams, ProblemData,
};
use crate::{linalg, penalized};

/// Smallest variance component formulation 1 keeps after an update.
pub const SIGMA_FLOOR: f64 = 1e-10;

/// Consecutive iterations at [`SIGMA_FLOOR`] after which an F1 block is frozen at zero.
pub const FREEZE_AFTER: usize = 5;

/// Relative slack used when counting objective decreases.
pub const ASCENT_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Outer iterations whose objective dropped by more than the ascent slack.
    pub ascent_violations: usize,
    pub max_ascent_drop: f64,
    /// Inner mode searches that stopped at the iteration cap.
    pub inner_failures: usize,
    /// F1 blocks frozen at zero after sitting at the floor.
    pub frozen_blocks: Vec<usize>,
    /// Change of the sigma-restricted objective for every variance step
    /// (filled only with `FitConfig::track_sigma_steps`).
    pub sigma_step_gains: Vec<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub state: LaplaceState,
    /// Objective per outer iteration: `L_LA` or, for penalized fits,
    /// `L_LA - lambda * sum_i sigma_i`.
    pub objective_trace: Vec<f64>,
    /// Unpenalized `L_LA` at the returned parameters.
    pub loglik_la: f64,
    pub lambda: f64,
    pub converged: bool,
    pub outer_iters: usize,
    pub inner_iters_total: usize,
    pub formulation: Formulation,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

/// Starting point for [`fit_from`]; used for warm starts along a path.
#[derive(Debug, Clone)]
pub struct FitStart {
    pub beta: DVector<f64>,
    pub sigma2: DVector<f64>,
    /// Random effects on the scale of the formulation being fitted.
    pub u: Option<DVector<f64>>,
}

/// Quantities shared by the variance-component updates.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaStepTerms {
    /// `t_i = tr{Z_i^T (sum_k sigma_k^2 Z_k Z_k^T + W^-1)^-1 Z_i}`.
    pub traces: DVector<f64>,
    /// `(y - p)^T Z_i u_i`.
    pub cross: DVector<f64>,
    /// `||u_i||^2`.
    pub u_norm2: DVector<f64>,
    /// `S = sum_j sum_i (Z_i u_i)_j^2`.
    pub s_total: f64,
}

pub fn sigma_step_terms(
    params: &ModelParams,
    state: &LaplaceState,
    data: &ProblemData,
) -> Result<SigmaStepTerms> {
    params.check_dims(data)?;
    let factor = linalg::build_capacitance(&state.w, &params.sigma(), data.z_blocks())?;
    let traces = factor.block_traces(data.z_blocks())?;
    let resid = data.y() - &state.p;
    let m = data.m();
    let mut cross = DVector::zeros(m);
    let mut u_norm2 = DVector::zeros(m);
    let mut s_total = 0.0;
    for (i, zi) in data.z_blocks().iter().enumerate() {
        let r = data.block_range(i);
        let ui = state.u.rows(r.start, r.len());
        let zu = zi * ui;
        cross[i] = resid.dot(&zu);
        u_norm2[i] = ui.norm_squared();
        s_total += zu.norm_squared();
    }
    Ok(SigmaStepTerms {
        traces,
        cross,
        u_norm2,
        s_total,
    })
}

/// Precomputed matrices reused across one fit.
pub(crate) struct Workspace {
    ztz: DMatrix<f64>,
    /// Cholesky of `0.25 X^T X`; `None` when there are no fixed effects.
    beta_factor: Option<Cholesky<f64, Dyn>>,
}

impl Workspace {
    pub(crate) fn new(data: &ProblemData) -> Result<Self> {
        check_rank(data.x())?;
        Ok(Self {
            ztz: data.z().tr_mul(data.z()),
            beta_factor: beta_factor(data.x())?,
        })
    }

    fn for_u(data: &ProblemData) -> Self {
        Self {
            ztz: data.z().tr_mul(data.z()),
            beta_factor: None,
        }
    }
}

/// Rank of `X` via column-pivoted QR.
fn check_rank(x: &DMatrix<f64>) -> Result<()> {
    let p = x.ncols();
    if p == 0 {
        return Ok(());
    }
    if x.nrows() < p {
        return Err(VcmmError::RankDeficient {
            rank: x.nrows(),
            cols: p,
        });
    }
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let lead = r[(0, 0)].abs();
    let tol = lead * 1e-10 * x.nrows().max(p) as f64;
    let rank = (0..p).filter(|&k| r[(k, k)].abs() > tol).count();
    if lead == 0.0 || rank < p {
        return Err(VcmmError::RankDeficient {
            rank: if lead == 0.0 { 0 } else { rank },
            cols: p,
        });
    }
    Ok(())
}

fn beta_factor(x: &DMatrix<f64>) -> Result<Option<Cholesky<f64, Dyn>>> {
    if x.ncols() == 0 {
        return Ok(None);
    }
    let xtx = x.tr_mul(x) * 0.25;
    Cholesky::new(xtx)
        .map(Some)
        .ok_or(VcmmError::RankDeficient {
            rank: 0,
            cols: x.ncols(),
        })
}

fn beta_step(
    factor: Option<&Cholesky<f64, Dyn>>,
    beta: &DVector<f64>,
    p: &DVector<f64>,
    data: &ProblemData,
) -> DVector<f64> {
    match factor {
        None => beta.clone(),
        Some(f) => {
            let grad = data.x().tr_mul(&(data.y() - p));
            beta + f.solve(&grad)
        }
    }
}

/// One MM step of the offset logistic regression:
/// `beta + (0.25 X^T X)^{-1} X^T (y - p*)`.
pub fn update_beta(
    params: &ModelParams,
    state: &LaplaceState,
    data: &ProblemData,
) -> Result<DVector<f64>> {
    params.check_dims(data)?;
    check_rank(data.x())?;
    let factor = beta_factor(data.x())?;
    Ok(beta_step(factor.as_ref(), &params.beta, &state.p, data))
}

/// `nabla_u h`: `Z^T(y - p) - Sigma^{-1} u` (F1) or `D Z^T (y - p) - u` (F2).
pub fn gradient_u(
    form: Formulation,
    u: &DVector<f64>,
    params: &ModelParams,
    data: &ProblemData,
    eps: f64,
) -> Result<DVector<f64>> {
    params.check_dims(data)?;
    let active = vec![true; data.m()];
    if form == Formulation::F1 {
        if let Some(i) = params.sigma2.iter().position(|&s| s <= 0.0) {
            return Err(VcmmError::SingularParameter { block: i });
        }
    }
    let state = state_from_u(form, u.clone(), params, data, eps)?;
    Ok(gradient_at(form, &state, params, data, &active))
}

fn gradient_at(
    form: Formulation,
    state: &LaplaceState,
    params: &ModelParams,
    data: &ProblemData,
    active: &[bool],
) -> DVector<f64> {
    let resid = data.y() - &state.p;
    let mut g = data.z().tr_mul(&resid);
    for i in 0..data.m() {
        let r = data.block_range(i);
        match form {
            Formulation::F1 => {
                if active[i] {
                    let inv = 1.0 / params.sigma2[i];
                    for k in r {
                        g[k] -= state.u[k] * inv;
                    }
                } else {
                    g.rows_mut(r.start, r.len()).fill(0.0);
                }
            }
            Formulation::F2 => {
                let s = params.sigma2[i].sqrt();
                for k in r {
                    g[k] = s * g[k] - state.u[k];
                }
            }
        }
    }
    g
}

/// The fixed curvature bound used by the inner MM step:
/// `0.25 Z^T Z + blkdiag(sigma_i^{-2} I)` (F1) or `0.25 D Z^T Z D + I` (F2).
pub fn u_preconditioner(
    form: Formulation,
    params: &ModelParams,
    data: &ProblemData,
) -> Result<DMatrix<f64>> {
    params.check_dims(data)?;
    if form == Formulation::F1 {
        if let Some(i) = params.sigma2.iter().position(|&s| s <= 0.0) {
            return Err(VcmmError::SingularParameter { block: i });
        }
    }
    let ws = Workspace::for_u(data);
    Ok(preconditioner_matrix(form, &ws, params, data, &vec![true; data.m()]))
}

fn preconditioner_matrix(
    form: Formulation,
    ws: &Workspace,
    params: &ModelParams,
    data: &ProblemData,
    active: &[bool],
) -> DMatrix<f64> {
    let q = data.q();
    let mut pm = &ws.ztz * 0.25;
    match form {
        Formulation::F1 => {
            for i in 0..data.m() {
                let r = data.block_range(i);
                if active[i] {
                    let inv = 1.0 / params.sigma2[i];
                    for k in r {
                        pm[(k, k)] += inv;
                    }
                } else {
                    for k in r {
                        pm.row_mut(k).fill(0.0);
                        pm.column_mut(k).fill(0.0);
                        pm[(k, k)] = 1.0;
                    }
                }
            }
        }
        Formulation::F2 => {
            let d = data.expand_blocks(&params.sigma());
            for c in 0..q {
                for r in 0..q {
                    pm[(r, c)] *= d[r] * d[c];
                }
                pm[(c, c)] += 1.0;
            }
        }
    }
    pm
}

pub(crate) struct InnerOutcome {
    pub state: LaplaceState,
    pub iters: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

pub(crate) fn solve_u_with(
    form: Formulation,
    ws: &Workspace,
    params: &ModelParams,
    data: &ProblemData,
    u0: DVector<f64>,
    cfg: &FitConfig,
    active: &[bool],
) -> Result<InnerOutcome> {
    let eps = cfg.weight_clamp_eps;
    let pm = preconditioner_matrix(form, ws, params, data, active);
    let chol = Cholesky::new(pm)
        .ok_or_else(|| VcmmError::numerical("inner preconditioner is not positive definite"))?;
    let mut u = u0;
    if form == Formulation::F1 {
        for (i, &a) in active.iter().enumerate() {
            if !a {
                let r = data.block_range(i);
                u.rows_mut(r.start, r.len()).fill(0.0);
            }
        }
    }
    let mut iters = 0;
    loop {
        let state = state_from_u(form, u, params, data, eps)?;
        let g = gradient_at(form, &state, params, data, active);
        let grad_norm = g.amax();
        if !grad_norm.is_finite() {
            return Err(VcmmError::numerical("non-finite gradient in inner mode search"));
        }
        if grad_norm <= cfg.inner_tol || iters >= cfg.max_inner_iters {
            return Ok(InnerOutcome {
                converged: grad_norm <= cfg.inner_tol,
                state,
                iters,
                grad_norm,
            });
        }
        u = state.u + chol.solve(&g);
        iters += 1;
    }
}

/// Conditional mode `u* = argmax_u h(u | beta, sigma)` by the MM iteration
/// `u <- u + P^{-1} nabla_u h(u)` with the fixed bound `P` from [`u_preconditioner`].
///
/// `u0` defaults to zeros. Hitting `max_inner_iters` returns
/// [`VcmmError::InnerNotConverged`] carrying the last iterate.
pub fn solve_u(
    form: Formulation,
    params: &ModelParams,
    data: &ProblemData,
    u0: Option<&DVector<f64>>,
    cfg: &FitConfig,
) -> Result<LaplaceState> {
    cfg.validate()?;
    params.check_dims(data)?;
    if form == Formulation::F1 {
        if let Some(i) = params.sigma2.iter().position(|&s| s <= 0.0) {
            return Err(VcmmError::SingularParameter { block: i });
        }
    }
    let u0 = match u0 {
        Some(u) if u.len() != data.q() => {
            return Err(VcmmError::domain(format!(
                "initial random effects have length {}, expected {}",
                u.len(),
                data.q()
            )))
        }
        Some(u) => u.clone(),
        None => DVector::zeros(data.q()),
    };
    let ws = Workspace::for_u(data);
    let out = solve_u_with(form, &ws, params, data, u0, cfg, &vec![true; data.m()])?;
    if out.converged {
        Ok(out.state)
    } else {
        Err(VcmmError::InnerNotConverged {
            iters: out.iters,
            grad_norm: out.grad_norm,
            state: Box::new(out.state),
        })
    }
}

fn check_traces(terms: &SigmaStepTerms, skip: impl Fn(usize) -> bool) -> Result<()> {
    for (i, &t) in terms.traces.iter().enumerate() {
        if !skip(i) && !(t > 0.0) {
            return Err(VcmmError::DegenerateBlock { block: i });
        }
    }
    Ok(())
}

fn sigma2_f1_from_terms(terms: &SigmaStepTerms, current: &DVector<f64>, active: &[bool]) -> DVector<f64> {
    DVector::from_fn(current.len(), |i, _| {
        if active[i] {
            (terms.u_norm2[i] / terms.traces[i]).sqrt().max(SIGMA_FLOOR)
        } else {
            0.0
        }
    })
}

/// Formulation-1 variance update `sigma_i^2 <- sqrt(||u*_i||^2 / t_i)`,
/// floored at [`SIGMA_FLOOR`].
pub fn update_sigma2_f1(
    params: &ModelParams,
    state: &LaplaceState,
    data: &ProblemData,
) -> Result<DVector<f64>> {
    if let Some(i) = params.sigma2.iter().position(|&s| s <= 0.0) {
        return Err(VcmmError::SingularParameter { block: i });
    }
    let terms = sigma_step_terms(params, state, data)?;
    check_traces(&terms, |_| false)?;
    Ok(sigma2_f1_from_terms(&terms, &params.sigma2, &vec![true; data.m()]))
}

/// Unprojected minimizer of the separable F2 surrogate together with the
/// shared denominator `t_i + S/4`: returns `(z_i, t_i + S/4)`.
pub(crate) fn f2_centers(terms: &SigmaStepTerms, sigma: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let quarter_s = 0.25 * terms.s_total;
    let m = sigma.len();
    let mut z = DVector::zeros(m);
    let mut denom = DVector::zeros(m);
    for i in 0..m {
        let d = terms.traces[i] + quarter_s;
        if !(d > 0.0) {
            return Err(VcmmError::DegenerateBlock { block: i });
        }
        z[i] = (terms.cross[i] + quarter_s * sigma[i]) / d;
        denom[i] = d;
    }
    Ok((z, denom))
}

/// Formulation-2 update of the standard deviations,
/// `sigma_i <- max(0, [(y-p)^T Z_i u_i + S sigma_i / 4] / [t_i + S / 4])`.
pub fn update_sigma_f2(
    params: &ModelParams,
    state: &LaplaceState,
    data: &ProblemData,
) -> Result<DVector<f64>> {
    let terms = sigma_step_terms(params, state, data)?;
    let (z, _) = f2_centers(&terms, &params.sigma())?;
    Ok(z.map(|v| v.max(0.0)))
}

/// `L_LA` as a function of the variance components with `beta`, `u*` and
/// `W*` held fixed; the function each variance step is guaranteed to increase.
///
/// In F1 the linear predictor does not move with `sigma`; in F2 it is
/// `X beta + Z D(sigma) u*`.
pub fn restricted_objective(
    form: Formulation,
    params: &ModelParams,
    u: &DVector<f64>,
    w: &DVector<f64>,
    data: &ProblemData,
) -> Result<f64> {
    params.check_dims(data)?;
    let eta = linear_predictor(form, u, params, data);
    let fit = bernoulli_loglik(data.y(), &eta);
    let penalty = crate::model::random_effect_penalty(form, u, params, data)?;
    let logdet = laplace_logdet(w, &params.sigma(), data)?;
    Ok(fit - penalty - 0.5 * logdet + log_2pi_const(data.n()))
}

/// Minorizing surrogate of [`restricted_objective`] anchored at the current
/// variance components, built exactly as the update derivation builds it.
#[derive(Debug, Clone)]
pub struct SigmaSurrogate {
    form: Formulation,
    anchor_sigma2: DVector<f64>,
    beta: DVector<f64>,
    u: DVector<f64>,
    terms: SigmaStepTerms,
    /// Bernoulli log-likelihood at the anchor.
    anchor_fit: f64,
    anchor_logdet: f64,
    n: usize,
    block_ranges: Vec<std::ops::Range<usize>>,
}

impl SigmaSurrogate {
    /// `state` must hold `u*`, with `p` and `w` evaluated at `anchor`.
    pub fn new(
        form: Formulation,
        anchor: &ModelParams,
        state: &LaplaceState,
        data: &ProblemData,
    ) -> Result<Self> {
        let terms = sigma_step_terms(anchor, state, data)?;
        let eta = linear_predictor(form, &state.u, anchor, data);
        Ok(Self {
            form,
            anchor_sigma2: anchor.sigma2.clone(),
            beta: anchor.beta.clone(),
            u: state.u.clone(),
            anchor_fit: bernoulli_loglik(data.y(), &eta),
            anchor_logdet: laplace_logdet(&state.w, &anchor.sigma(), data)?,
            terms,
            n: data.n(),
            block_ranges: (0..data.m()).map(|i| data.block_range(i)).collect(),
        })
    }

    pub fn terms(&self) -> &SigmaStepTerms {
        &self.terms
    }

    /// Surrogate value at variance components `sigma2`.
    pub fn eval(&self, sigma2: &DVector<f64>) -> f64 {
        // Supporting hyperplane of -ln det in sigma^2.
        let logdet_bound = self.anchor_logdet
            + sigma2
                .iter()
                .zip(self.anchor_sigma2.iter())
                .zip(self.terms.traces.iter())
                .map(|((s, s0), t)| (s - s0) * t)
                .sum::<f64>();
        let base = log_2pi_const(self.n) - 0.5 * logdet_bound;
        match self.form {
            Formulation::F1 => {
                let penalty: f64 = self
                    .terms
                    .u_norm2
                    .iter()
                    .zip(sigma2.iter())
                    .map(|(&uu, &s)| if uu == 0.0 { 0.0 } else { uu / s })
                    .sum();
                base + self.anchor_fit - 0.5 * penalty
            }
            Formulation::F2 => {
                let mut linear = 0.0;
                let mut dist2 = 0.0;
                for i in 0..sigma2.len() {
                    let d = sigma2[i].sqrt() - self.anchor_sigma2[i].sqrt();
                    linear += d * self.terms.cross[i];
                    dist2 += d * d;
                }
                base + self.anchor_fit + linear - 0.125 * self.terms.s_total * dist2
                    - 0.5 * self.u.norm_squared()
            }
        }
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn block_count(&self) -> usize {
        self.block_ranges.len()
    }
}

/// Quadratic minorizer of `h(. | beta, sigma)` at `anchor`:
/// `h(a) + g(a)^T (u - a) - 1/2 (u - a)^T P (u - a)`.
#[derive(Debug, Clone)]
pub struct USurrogate {
    anchor: DVector<f64>,
    value: f64,
    gradient: DVector<f64>,
    curvature: DMatrix<f64>,
}

impl USurrogate {
    pub fn new(
        form: Formulation,
        params: &ModelParams,
        data: &ProblemData,
        anchor: &DVector<f64>,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            value: crate::model::complete_loglik(form, anchor, params, data)?,
            gradient: gradient_u(form, anchor, params, data, eps)?,
            curvature: u_preconditioner(form, params, data)?,
            anchor: anchor.clone(),
        })
    }

    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        let d = u - &self.anchor;
        self.value + self.gradient.dot(&d) - 0.5 * d.dot(&(&self.curvature * &d))
    }

    pub fn curvature(&self) -> &DMatrix<f64> {
        &self.curvature
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum SigmaRule {
    Mm,
    Lasso(f64),
}

impl SigmaRule {
    fn lambda(self) -> f64 {
        match self {
            SigmaRule::Mm => 0.0,
            SigmaRule::Lasso(l) => l,
        }
    }
}

fn penalty_value(lambda: f64, sigma2: &DVector<f64>) -> f64 {
    if lambda == 0.0 {
        0.0
    } else {
        lambda * sigma2.iter().map(|s| s.sqrt()).sum::<f64>()
    }
}

/// Maximize `L_LA` with MMLA1 (F1) or MMLA2 (F2) from the default start
/// `beta = 0`, `sigma^2 = 1` (or the values in `cfg`).
pub fn fit(form: Formulation, data: &ProblemData, cfg: &FitConfig) -> Result<FitResult> {
    run_fit(form, data, cfg, None, SigmaRule::Mm)
}

/// As [`fit`] but from an explicit starting point.
pub fn fit_from(
    form: Formulation,
    data: &ProblemData,
    cfg: &FitConfig,
    start: FitStart,
) -> Result<FitResult> {
    run_fit(form, data, cfg, Some(start), SigmaRule::Mm)
}

pub(crate) fn initial_point(data: &ProblemData, cfg: &FitConfig) -> Result<(DVector<f64>, DVector<f64>)> {
    let beta = match &cfg.init_beta {
        Some(b) if b.len() != data.p() => {
            return Err(VcmmError::domain(format!(
                "init_beta has length {}, expected {}",
                b.len(),
                data.p()
            )))
        }
        Some(b) => DVector::from_column_slice(b),
        None => DVector::zeros(data.p()),
    };
    let sigma2 = match &cfg.init_sigma2 {
        Some(s) if s.len() != data.m() => {
            return Err(VcmmError::domain(format!(
                "init_sigma2 has length {}, expected {}",
                s.len(),
                data.m()
            )))
        }
        Some(s) => DVector::from_column_slice(s),
        None => DVector::from_element(data.m(), 1.0),
    };
    ModelParams::new(beta.clone(), sigma2.clone())?;
    Ok((beta, sigma2))
}

pub(crate) fn run_fit(
    form: Formulation,
    data: &ProblemData,
    cfg: &FitConfig,
    start: Option<FitStart>,
    rule: SigmaRule,
) -> Result<FitResult> {
    cfg.validate()?;
    if matches!(rule, SigmaRule::Lasso(_)) && form != Formulation::F2 {
        return Err(VcmmError::domain("the lasso update is defined for formulation 2 only"));
    }
    let lambda = rule.lambda();
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(VcmmError::domain(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    let ws = Workspace::new(data)?;
    let eps = cfg.weight_clamp_eps;
    let m = data.m();

    let (mut beta, mut sigma2, mut u) = match start {
        Some(s) => {
            let u = s.u.unwrap_or_else(|| DVector::zeros(data.q()));
            let params = ModelParams::new(s.beta, s.sigma2)?;
            params.check_dims(data)?;
            if u.len() != data.q() {
                return Err(VcmmError::domain("warm-start random effects have the wrong length"));
            }
            (params.beta, params.sigma2, u)
        }
        None => {
            let (b, s) = initial_point(data, cfg)?;
            (b, s, DVector::zeros(data.q()))
        }
    };

    let mut active = vec![true; m];
    if form == Formulation::F1 {
        for i in 0..m {
            if sigma2[i] <= 0.0 {
                active[i] = false;
            }
        }
    }
    let mut floor_runs = vec![0usize; m];
    let mut diag = FitDiagnostics::default();
    let mut trace: Vec<f64> = Vec::new();
    let mut inner_total = 0;
    let mut converged = false;
    let mut last: Option<(ModelParams, LaplaceState, f64)> = None;

    for _ in 0..cfg.max_outer_iters {
        let params = ModelParams {
            beta: beta.clone(),
            sigma2: sigma2.clone(),
        };
        let inner = solve_u_with(form, &ws, &params, data, u, cfg, &active)?;
        inner_total += inner.iters;
        if !inner.converged {
            diag.inner_failures += 1;
        }
        let state = inner.state;
        let ll = laplace_loglik(form, &state, &params, data)?;
        let obj = ll - penalty_value(lambda, &params.sigma2);
        if !obj.is_finite() {
            return Err(VcmmError::numerical("objective became non-finite"));
        }
        let stop = match trace.last() {
            Some(&prev) => {
                let drop = prev - obj;
                if drop > ASCENT_SLACK * (1.0 + prev.abs()) {
                    diag.ascent_violations += 1;
                    diag.max_ascent_drop = diag.max_ascent_drop.max(drop);
                }
                (obj - prev).abs() / (1.0 + prev.abs()) <= cfg.outer_tol
            }
            None => false,
        };
        trace.push(obj);
        last = Some((params.clone(), state.clone(), ll));
        if stop {
            converged = true;
            break;
        }

        // beta step at fixed u*, then refresh p and W* at the new beta.
        let beta_new = beta_step(ws.beta_factor.as_ref(), &beta, &state.p, data);
        let params_b = ModelParams {
            beta: beta_new,
            sigma2: sigma2.clone(),
        };
        let state_b = state_from_u(form, state.u, &params_b, data, eps)?;

        let before = if cfg.track_sigma_steps {
            Some(restricted_objective(form, &params_b, &state_b.u, &state_b.w, data)?
                - penalty_value(lambda, &params_b.sigma2))
        } else {
            None
        };

        let terms = sigma_step_terms(&params_b, &state_b, data)?;
        let sigma2_new = match (form, rule) {
            (Formulation::F1, _) => {
                check_traces(&terms, |i| !active[i])?;
                sigma2_f1_from_terms(&terms, &sigma2, &active)
            }
            (Formulation::F2, SigmaRule::Mm) => {
                let (z, _) = f2_centers(&terms, &params_b.sigma())?;
                z.map(|v| {
                    let s = v.max(0.0);
                    s * s
                })
            }
            (Formulation::F2, SigmaRule::Lasso(l)) => {
                let (z, denom) = f2_centers(&terms, &params_b.sigma())?;
                DVector::from_fn(m, |i, _| {
                    let s = penalized::soft_threshold(z[i], l / denom[i]).max(0.0);
                    s * s
                })
            }
        };

        if let Some(before) = before {
            let params_s = ModelParams {
                beta: params_b.beta.clone(),
                sigma2: sigma2_new.clone(),
            };
            let after = restricted_objective(form, &params_s, &state_b.u, &state_b.w, data)?
                - penalty_value(lambda, &sigma2_new);
            diag.sigma_step_gains.push(after - before);
        }

        u = state_b.u;
        sigma2 = sigma2_new;
        beta = params_b.beta;

        if form == Formulation::F1 {
            for i in 0..m {
                if !active[i] {
                    continue;
                }
                if sigma2[i] <= SIGMA_FLOOR {
                    floor_runs[i] += 1;
                    if floor_runs[i] >= FREEZE_AFTER {
                        active[i] = false;
                        sigma2[i] = 0.0;
                        let r = data.block_range(i);
                        u.rows_mut(r.start, r.len()).fill(0.0);
                        diag.frozen_blocks.push(i);
                        diag.notes.push(format!(
                            "block {i} sat at the variance floor for {FREEZE_AFTER} iterations and was fixed at zero"
                        ));
                    }
                } else {
                    floor_runs[i] = 0;
                }
            }
        }
    }

    let (params, state, ll) = last.expect("max_outer_iters >= 1");
    if diag.ascent_violations > 0 {
        diag.notes.push(format!(
            "objective decreased in {} of {} outer iterations (largest drop {:.3e})",
            diag.ascent_violations,
            trace.len().saturating_sub(1),
            diag.max_ascent_drop
        ));
    }
    Ok(FitResult {
        params,
        state,
        outer_iters: trace.len(),
        objective_trace: trace,
        loglik_la: ll,
        lambda,
        converged,
        inner_iters_total: inner_total,
        formulation: form,
        diagnostics: diag,
    })
}
