//! Lasso-penalized variance-component selection.
//!
//! Maximizes `L_LA(beta, sigma) - lambda * sum_i |sigma_i|` in formulation 2.
//! The separable quadratic surrogate of the MMLA2 variance step turns the
//! penalized update into a soft-thresholding step, so blocks drop out with
//! exact zeros. `lambda` is chosen over a grid by AIC or BIC computed from
//! the unpenalized `L_LA` at the fitted parameters.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcmmError};
use crate::model::{state_from_u, FitConfig, Formulation, LaplaceState, ModelParams, ProblemData};
use crate::solver::{
    self, f2_centers, initial_point, run_fit, sigma_step_terms, FitResult, FitStart, SigmaRule,
    Workspace,
};

/// `sgn(z) (|z| - gamma)_+`, the proximal map of `gamma |.|`.
#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    debug_assert!(gamma >= 0.0);
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Penalized variance step `sigma_i <- max(0, ST(z_i, gamma_i))` with
/// `gamma_i = lambda / (t_i + S/4)`. At `lambda = 0` this is the MMLA2 update.
pub fn update_sigma_lasso(
    params: &ModelParams,
    state: &LaplaceState,
    data: &ProblemData,
    lambda: f64,
) -> Result<DVector<f64>> {
    if !(lambda >= 0.0) {
        return Err(VcmmError::domain(format!("lambda must be nonnegative, got {lambda}")));
    }
    let terms = sigma_step_terms(params, state, data)?;
    let (z, denom) = f2_centers(&terms, &params.sigma())?;
    Ok(DVector::from_fn(z.len(), |i, _| {
        soft_threshold(z[i], lambda / denom[i]).max(0.0)
    }))
}

/// Fit the penalized objective from the default starting point.
pub fn fit_penalized(data: &ProblemData, lambda: f64, cfg: &FitConfig) -> Result<FitResult> {
    run_fit(Formulation::F2, data, cfg, None, SigmaRule::Lasso(lambda))
}

pub fn fit_penalized_from(
    data: &ProblemData,
    lambda: f64,
    cfg: &FitConfig,
    start: FitStart,
) -> Result<FitResult> {
    run_fit(Formulation::F2, data, cfg, Some(start), SigmaRule::Lasso(lambda))
}

/// Smallest `lambda` whose first penalized iteration from the default start
/// sets every `sigma_i` to zero: `max_i |(y - p)^T Z_i u_i + S sigma_i / 4|`.
pub fn lambda_max(data: &ProblemData, cfg: &FitConfig) -> Result<f64> {
    cfg.validate()?;
    let ws = Workspace::new(data)?;
    let (beta, sigma2) = initial_point(data, cfg)?;
    let params = ModelParams::new(beta, sigma2)?;
    let active = vec![true; data.m()];
    let inner = solver::solve_u_with(
        Formulation::F2,
        &ws,
        &params,
        data,
        DVector::zeros(data.q()),
        cfg,
        &active,
    )?;
    let beta_new = solver::update_beta(&params, &inner.state, data)?;
    let params_b = ModelParams::new(beta_new, params.sigma2.clone())?;
    let state_b = state_from_u(Formulation::F2, inner.state.u, &params_b, data, cfg.weight_clamp_eps)?;
    let terms = sigma_step_terms(&params_b, &state_b, data)?;
    let sigma = params_b.sigma();
    let quarter_s = 0.25 * terms.s_total;
    Ok((0..data.m())
        .map(|i| (terms.cross[i] + quarter_s * sigma[i]).abs())
        .fold(0.0, f64::max))
}

/// `points` values log-spaced from `lambda_max` down to `ratio * lambda_max`.
pub fn default_lambda_grid(
    data: &ProblemData,
    cfg: &FitConfig,
    points: usize,
    ratio: f64,
) -> Result<Vec<f64>> {
    if points == 0 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(VcmmError::domain("grid needs at least one point and a ratio in (0, 1)"));
    }
    let top = lambda_max(data, cfg)?;
    if !(top > 0.0) {
        return Ok(vec![1.0]);
    }
    if points == 1 {
        return Ok(vec![top]);
    }
    let step = ratio.ln() / (points - 1) as f64;
    Ok((0..points).map(|k| top * (step * k as f64).exp()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    Bic,
}

#[derive(Debug, Clone)]
pub struct PathOptions {
    /// Start each fit from the previous (larger-lambda) solution.
    pub warm_start: bool,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self { warm_start: true }
    }
}

/// Per-lambda fits with their information criteria.
#[derive(Debug, Clone)]
pub struct RegPath {
    pub lambdas: Vec<f64>,
    pub fits: Vec<FitResult>,
    pub df: Vec<usize>,
    pub aic: Vec<f64>,
    pub bic: Vec<f64>,
    pub selected_aic: usize,
    pub selected_bic: usize,
    pub n: usize,
}

impl RegPath {
    fn assemble(lambdas: Vec<f64>, fits: Vec<FitResult>, n: usize) -> Self {
        let df: Vec<usize> = fits
            .iter()
            .map(|f| f.params.sigma2.iter().filter(|&&s| s > 0.0).count())
            .collect();
        let aic: Vec<f64> = fits
            .iter()
            .zip(&df)
            .map(|(f, &d)| criterion_value(Criterion::Aic, f.loglik_la, d, n))
            .collect();
        let bic: Vec<f64> = fits
            .iter()
            .zip(&df)
            .map(|(f, &d)| criterion_value(Criterion::Bic, f.loglik_la, d, n))
            .collect();
        Self {
            selected_aic: argmin_first(&aic),
            selected_bic: argmin_first(&bic),
            lambdas,
            fits,
            df,
            aic,
            bic,
            n,
        }
    }

    pub fn selected(&self, criterion: Criterion) -> usize {
        match criterion {
            Criterion::Aic => self.selected_aic,
            Criterion::Bic => self.selected_bic,
        }
    }

    /// Indices of blocks with a nonzero fitted variance at the selected lambda.
    pub fn selected_support(&self, criterion: Criterion) -> Vec<usize> {
        support(&self.fits[self.selected(criterion)].params.sigma2)
    }

    pub fn df_nonincreasing_in_lambda(&self) -> bool {
        // lambdas are decreasing, so df must be nondecreasing along the vector.
        self.df.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn loglik_la(&self) -> Vec<f64> {
        self.fits.iter().map(|f| f.loglik_la).collect()
    }
}

pub fn criterion_value(criterion: Criterion, loglik_la: f64, df: usize, n: usize) -> f64 {
    let per_df = match criterion {
        Criterion::Aic => 2.0,
        Criterion::Bic => (n as f64).ln(),
    };
    -2.0 * loglik_la + per_df * df as f64
}

pub fn support(sigma2: &DVector<f64>) -> Vec<usize> {
    sigma2
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// First index of the minimum; on a decreasing grid ties go to the larger lambda.
fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = k;
        }
    }
    best
}

fn validate_grid(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(VcmmError::domain("lambda grid is empty"));
    }
    for (k, &l) in lambdas.iter().enumerate() {
        let last = k + 1 == lambdas.len();
        if !l.is_finite() || l < 0.0 || (l == 0.0 && !last) {
            return Err(VcmmError::domain(format!(
                "lambda grid entry {k} is {l}; entries must be positive, with 0 allowed only as the last point"
            )));
        }
        if k > 0 && l >= lambdas[k - 1] {
            return Err(VcmmError::domain("lambda grid must be strictly decreasing"));
        }
    }
    Ok(())
}

/// Warm start from a previous solution. Blocks that were shrunk to zero are
/// restarted at the configured initial variance: `sigma_i = 0` is a fixed
/// point of the MMLA2 step and would otherwise never re-enter.
fn warm_start(prev: &FitResult, data: &ProblemData, cfg: &FitConfig) -> Result<FitStart> {
    let (_, init_sigma2) = initial_point(data, cfg)?;
    let sigma2 = DVector::from_fn(data.m(), |i, _| {
        let s = prev.params.sigma2[i];
        if s > 0.0 {
            s
        } else {
            init_sigma2[i]
        }
    });
    Ok(FitStart {
        beta: prev.params.beta.clone(),
        sigma2,
        u: Some(prev.state.u.clone()),
    })
}

pub fn compute_path(data: &ProblemData, lambdas: &[f64], cfg: &FitConfig) -> Result<RegPath> {
    compute_path_with(data, lambdas, cfg, &PathOptions::default())
}

/// Fit every lambda on a strictly decreasing grid (optionally ending at 0).
///
/// Non-converged entries are kept and flagged through `FitResult::converged`.
/// Without warm starts the fits are independent and run on the current rayon pool.
pub fn compute_path_with(
    data: &ProblemData,
    lambdas: &[f64],
    cfg: &FitConfig,
    opts: &PathOptions,
) -> Result<RegPath> {
    validate_grid(lambdas)?;
    let fits = if opts.warm_start {
        let mut fits: Vec<FitResult> = Vec::with_capacity(lambdas.len());
        for &lambda in lambdas {
            let fit = match fits.last() {
                None => fit_penalized(data, lambda, cfg)?,
                Some(prev) => fit_penalized_from(data, lambda, cfg, warm_start(prev, data, cfg)?)?,
            };
            fits.push(fit);
        }
        fits
    } else {
        use rayon::prelude::*;
        lambdas
            .par_iter()
            .map(|&lambda| fit_penalized(data, lambda, cfg))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(RegPath::assemble(lambdas.to_vec(), fits, data.n()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-0.7, 0.0), -0.7);
    }

    proptest! {
        #[test]
        fn soft_threshold_is_a_proximal_map(z in -50.0f64..50.0, gamma in 0.0f64..20.0, x in -80.0f64..80.0) {
            let st = soft_threshold(z, gamma);
            let at_st = 0.5 * (st - z).powi(2) + gamma * st.abs();
            let at_x = 0.5 * (x - z).powi(2) + gamma * x.abs();
            prop_assert!(at_st <= at_x + 1e-12);
            prop_assert!(st.abs() <= z.abs());
        }
    }

    fn small_data(seed: u64) -> ProblemData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 60;
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let blocks = (0..3)
            .map(|_| DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let y = DVector::from_fn(n, |_, _| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        ProblemData::new(y, x, blocks).unwrap()
    }

    #[test]
    fn lasso_at_zero_lambda_is_mmla2_step() {
        let data = small_data(1);
        let params = ModelParams::new(DVector::zeros(2), DVector::from_vec(vec![0.5, 1.0, 2.0])).unwrap();
        let state = solver::solve_u(Formulation::F2, &params, &data, None, &FitConfig::default()).unwrap();
        let a = update_sigma_lasso(&params, &state, &data, 0.0).unwrap();
        let b = solver::update_sigma_f2(&params, &state, &data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn huge_lambda_zeroes_everything() {
        let data = small_data(2);
        let params = ModelParams::new(DVector::zeros(2), DVector::from_vec(vec![0.5, 1.0, 2.0])).unwrap();
        let state = solver::solve_u(Formulation::F2, &params, &data, None, &FitConfig::default()).unwrap();
        let terms = sigma_step_terms(&params, &state, &data).unwrap();
        let sigma = params.sigma();
        let bound = (0..3)
            .map(|i| (terms.cross[i] + 0.25 * terms.s_total * sigma[i]).abs())
            .fold(0.0, f64::max);
        let s = update_sigma_lasso(&params, &state, &data, bound).unwrap();
        assert_eq!(s, DVector::zeros(3));
    }

    #[test]
    fn lasso_step_minimizes_penalized_quadratic() {
        // Grid search over sigma_i of the per-coordinate penalized surrogate.
        let data = small_data(3);
        let params = ModelParams::new(DVector::zeros(2), DVector::from_vec(vec![0.8, 0.3, 1.4])).unwrap();
        let state = solver::solve_u(Formulation::F2, &params, &data, None, &FitConfig::default()).unwrap();
        let terms = sigma_step_terms(&params, &state, &data).unwrap();
        let sigma = params.sigma();
        for lambda in [0.0, 0.3, 1.0, 3.0] {
            let s = update_sigma_lasso(&params, &state, &data, lambda).unwrap();
            for i in 0..3 {
                let a = 0.5 * terms.traces[i] + 0.125 * terms.s_total;
                let b = terms.cross[i] + 0.25 * terms.s_total * sigma[i];
                let obj = |x: f64| a * x * x - b * x + lambda * x.abs();
                let mut best = (f64::INFINITY, 0.0);
                for k in 0..=200_000 {
                    let x = k as f64 * 5e-5;
                    let v = obj(x);
                    if v < best.0 {
                        best = (v, x);
                    }
                }
                assert!((s[i] - best.1).abs() < 1e-4, "lambda {lambda} block {i}: {} vs {}", s[i], best.1);
                assert!(obj(s[i]) <= best.0 + 1e-12);
            }
        }
    }

    #[test]
    fn grid_validation() {
        assert!(validate_grid(&[]).is_err());
        assert!(validate_grid(&[1.0, 2.0]).is_err());
        assert!(validate_grid(&[1.0, 0.0, 0.5]).is_err());
        assert!(validate_grid(&[2.0, 1.0, 0.0]).is_ok());
        assert!(validate_grid(&[-1.0]).is_err());
    }

    #[test]
    fn criteria_recompute_exactly() {
        let data = small_data(4);
        let cfg = FitConfig::default();
        let grid = default_lambda_grid(&data, &cfg, 6, 1e-2).unwrap();
        let path = compute_path(&data, &grid, &cfg).unwrap();
        assert_eq!(path.df[0], 0);
        for k in 0..grid.len() {
            let ll = path.fits[k].loglik_la;
            assert_eq!(path.aic[k], -2.0 * ll + 2.0 * path.df[k] as f64);
            assert_eq!(path.bic[k], -2.0 * ll + (data.n() as f64).ln() * path.df[k] as f64);
        }
        assert!(path.aic[path.selected_aic] <= path.aic.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn single_point_path_wraps_one_fit() {
        let data = small_data(5);
        let cfg = FitConfig::default();
        let path = compute_path(&data, &[0.7], &cfg).unwrap();
        let direct = fit_penalized(&data, 0.7, &cfg).unwrap();
        assert_eq!(path.fits.len(), 1);
        assert_eq!(path.fits[0].params, direct.params);
        assert_eq!(path.selected_aic, 0);
        assert_eq!(path.selected_bic, 0);
    }

    #[test]
    fn argmin_prefers_earlier_on_ties() {
        assert_eq!(argmin_first(&[3.0, 1.0, 1.0, 2.0]), 1);
    }
}
