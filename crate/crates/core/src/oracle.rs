//! Brute-force reference computations used to check the solvers.
//!
//! Nothing here calls into `solver` or `linalg`; the likelihood, gradient and
//! Hessian are re-derived from scratch so the checks stay independent.
//!
//! The marginal-likelihood oracles return `ln p(y | beta, sigma^2)` without
//! the `-(n/2) ln 2 pi` constant carried by `L_LA`; use [`to_laplace_scale`]
//! before comparing.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Result, VcmmError};
use crate::model::{Formulation, ModelParams, ProblemData};

fn oracle_err(msg: impl Into<String>) -> VcmmError {
    VcmmError::Numerical(format!("oracle: {}", msg.into()))
}

/// `ln p(y)` shifted onto the scale of `L_LA`.
pub fn to_laplace_scale(log_marginal: f64, n: usize) -> f64 {
    log_marginal - 0.5 * n as f64 * (2.0 * PI).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log1pexp(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Conditional log-likelihood `ln p(y | v)` for standardized effects `v ~ N(0, I)`.
pub trait ConditionalLikelihood {
    fn dim(&self) -> usize;
    fn loglik(&self, v: &DVector<f64>) -> f64;
    /// Gradient and Hessian of [`ConditionalLikelihood::loglik`].
    fn derivatives(&self, v: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
}

/// Bernoulli response with `eta = offset + B v`.
pub struct BernoulliModel {
    pub y: DVector<f64>,
    pub offset: DVector<f64>,
    pub design: DMatrix<f64>,
}

impl ConditionalLikelihood for BernoulliModel {
    fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn loglik(&self, v: &DVector<f64>) -> f64 {
        let mut total = 0.0;
        for j in 0..self.y.len() {
            let mut eta = self.offset[j];
            for k in 0..v.len() {
                eta += self.design[(j, k)] * v[k];
            }
            total += self.y[j] * eta - log1pexp(eta);
        }
        total
    }

    fn derivatives(&self, v: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let d = v.len();
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        for j in 0..self.y.len() {
            let mut eta = self.offset[j];
            for k in 0..d {
                eta += self.design[(j, k)] * v[k];
            }
            let p = sigmoid(eta);
            let w = p * (1.0 - p);
            for a in 0..d {
                let ba = self.design[(j, a)];
                g[a] += ba * (self.y[j] - p);
                for b in 0..d {
                    h[(a, b)] -= w * ba * self.design[(j, b)];
                }
            }
        }
        (g, h)
    }
}

/// Gaussian response `y ~ N(offset + B v, noise_var I)`; its Laplace
/// approximation is exact, which makes it a check on the quadrature itself.
pub struct GaussianModel {
    pub y: DVector<f64>,
    pub offset: DVector<f64>,
    pub design: DMatrix<f64>,
    pub noise_var: f64,
}

impl ConditionalLikelihood for GaussianModel {
    fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn loglik(&self, v: &DVector<f64>) -> f64 {
        let r = &self.y - &self.offset - &self.design * v;
        let n = self.y.len() as f64;
        -0.5 * n * (2.0 * PI * self.noise_var).ln() - 0.5 * r.norm_squared() / self.noise_var
    }

    fn derivatives(&self, v: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let r = &self.y - &self.offset - &self.design * v;
        let g = self.design.transpose() * r / self.noise_var;
        let h = -(self.design.transpose() * &self.design) / self.noise_var;
        (g, h)
    }
}

/// Mode of `loglik(v) - |v|^2 / 2` by damped Newton. Returns the mode and the
/// negative Hessian of the log posterior there.
fn posterior_mode(model: &dyn ConditionalLikelihood) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = model.dim();
    let obj = |v: &DVector<f64>| model.loglik(v) - 0.5 * v.norm_squared();
    let mut v = DVector::zeros(d);
    for _ in 0..200 {
        let (g, h) = model.derivatives(&v);
        let grad = g - &v;
        let neg_h = -h + DMatrix::identity(d, d);
        if grad.amax() <= 1e-11 {
            return Ok((v, neg_h));
        }
        let step = neg_h
            .clone()
            .cholesky()
            .ok_or_else(|| oracle_err("posterior Hessian is not negative definite"))?
            .solve(&grad);
        let f0 = obj(&v);
        let mut t = 1.0;
        loop {
            let cand = &v + &step * t;
            if obj(&cand) >= f0 - 1e-14 * f0.abs().max(1.0) || t < 1e-12 {
                v = cand;
                break;
            }
            t *= 0.5;
        }
    }
    Err(oracle_err("posterior mode search did not converge"))
}

/// Nodes and weights of the `k`-point Gauss-Hermite rule for the standard
/// normal weight, from the eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite_normal(k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::zeros(k, k);
    for i in 1..k {
        let off = (i as f64).sqrt();
        jac[(i - 1, i)] = off;
        jac[(i, i - 1)] = off;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..k)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn adaptive_gh(model: &dyn ConditionalLikelihood, nodes: usize) -> Result<f64> {
    let d = model.dim();
    if d == 0 {
        return Ok(model.loglik(&DVector::zeros(0)));
    }
    let (mode, neg_h) = posterior_mode(model)?;
    // v = mode + L z with L L^T = neg_h^{-1}.
    let cov = neg_h
        .try_inverse()
        .ok_or_else(|| oracle_err("singular posterior curvature"))?;
    let l = cov
        .cholesky()
        .ok_or_else(|| oracle_err("posterior covariance is not positive definite"))?
        .l();
    let log_det_l: f64 = l.diagonal().iter().map(|x| x.ln()).sum();
    let (z, w) = gauss_hermite_normal(nodes);
    let total = nodes.pow(d as u32);
    let mut terms = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    let mut zv = DVector::zeros(d);
    for _ in 0..total {
        let mut log_w = 0.0;
        for a in 0..d {
            zv[a] = z[idx[a]];
            log_w += w[idx[a]].ln();
        }
        let v = &mode + &l * &zv;
        // f(z) = exp(loglik(v)) phi(v) / phi(z) * |L|
        let log_f = model.loglik(&v) - 0.5 * v.norm_squared() + 0.5 * zv.norm_squared() + log_det_l;
        terms.push(log_w + log_f);
        for a in 0..d {
            idx[a] += 1;
            if idx[a] < nodes {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok(log_sum_exp(&terms))
}

/// `ln \int exp(loglik(v)) N(v; 0, I) dv` by adaptive Gauss-Hermite quadrature
/// with `nodes` and `2 * nodes` points per dimension; fails unless the two
/// agree to `1e-8 (1 + |value|)`.
pub fn quadrature_log_marginal(model: &dyn ConditionalLikelihood, nodes: usize) -> Result<f64> {
    if model.dim() > 3 {
        return Err(VcmmError::UnsupportedDimension(format!(
            "quadrature supports at most 3 random effects, got {}",
            model.dim()
        )));
    }
    if nodes < 20 {
        return Err(VcmmError::domain("quadrature needs at least 20 nodes per dimension"));
    }
    let coarse = adaptive_gh(model, nodes)?;
    let fine = adaptive_gh(model, 2 * nodes)?;
    if (coarse - fine).abs() > 1e-8 * (1.0 + fine.abs()) {
        return Err(oracle_err(format!(
            "quadrature not converged: {coarse} with {nodes} nodes vs {fine} with {} nodes",
            2 * nodes
        )));
    }
    Ok(fine)
}

/// Standardized design `Z D` restricted to blocks with nonzero variance.
fn bernoulli_model(data: &ProblemData, params: &ModelParams) -> Result<BernoulliModel> {
    if params.beta.len() != data.p() || params.sigma2.len() != data.m() {
        return Err(VcmmError::domain("parameter lengths do not match the data"));
    }
    let offset = data.x() * &params.beta;
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for (i, zi) in data.z_blocks().iter().enumerate() {
        let s = params.sigma2[i].sqrt();
        if s > 0.0 {
            for c in 0..zi.ncols() {
                cols.push(zi.column(c) * s);
            }
        }
    }
    let design = if cols.is_empty() {
        DMatrix::zeros(data.n(), 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    Ok(BernoulliModel {
        y: data.y().clone(),
        offset,
        design,
    })
}

/// Log marginal likelihood of the logistic mixed model by adaptive
/// Gauss-Hermite quadrature. Blocks with zero variance integrate out trivially.
pub fn quadrature_loglik(data: &ProblemData, params: &ModelParams, nodes: usize) -> Result<f64> {
    let model = bernoulli_model(data, params)?;
    quadrature_log_marginal(&model, nodes)
}

/// Importance-sampling estimate of the log marginal likelihood and its
/// delta-method standard error.
///
/// The proposal is a multivariate t with 5 degrees of freedom located at the
/// posterior mode with the Laplace covariance; its heavier tails keep the
/// weight variance finite.
pub fn mc_loglik(
    data: &ProblemData,
    params: &ModelParams,
    nsamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let model = bernoulli_model(data, params)?;
    mc_log_marginal(&model, nsamples, seed)
}

pub fn mc_log_marginal(
    model: &dyn ConditionalLikelihood,
    nsamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    const NU: f64 = 5.0;
    let d = model.dim();
    if d == 0 {
        return Ok((model.loglik(&DVector::zeros(0)), 0.0));
    }
    if nsamples < 2 {
        return Err(VcmmError::domain("need at least two Monte Carlo samples"));
    }
    let (mode, neg_h) = posterior_mode(model)?;
    if mode.iter().any(|x| !x.is_finite()) {
        return Err(oracle_err("non-finite posterior mode"));
    }
    let cov = neg_h
        .try_inverse()
        .ok_or_else(|| oracle_err("singular posterior curvature"))?;
    let l = cov
        .cholesky()
        .ok_or_else(|| oracle_err("degenerate proposal covariance"))?
        .l();
    let log_det_l: f64 = l.diagonal().iter().map(|x| x.ln()).sum();
    let df = d as f64;
    // log density of the standard multivariate t at z
    let log_t_norm = ln_gamma((NU + df) / 2.0)
        - ln_gamma(NU / 2.0)
        - 0.5 * df * (NU * PI).ln();
    let chi = ChiSquared::new(NU).map_err(|e| oracle_err(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log_w = Vec::with_capacity(nsamples);
    for _ in 0..nsamples {
        let g = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let c: f64 = chi.sample(&mut rng);
        let z = g * (NU / c).sqrt();
        let v = &mode + &l * &z;
        let log_q = log_t_norm - 0.5 * (NU + df) * (1.0 + z.norm_squared() / NU).ln() - log_det_l;
        let log_prior = -0.5 * df * (2.0 * PI).ln() - 0.5 * v.norm_squared();
        log_w.push(model.loglik(&v) + log_prior - log_q);
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = log_w.iter().map(|lw| (lw - max).exp()).collect();
    let n = nsamples as f64;
    let mean = scaled.iter().sum::<f64>() / n;
    let var = scaled.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((max + mean.ln(), (var / n).sqrt() / mean))
}

/// Lanczos approximation of `ln Gamma(x)` for `x > 0`.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Conditional mode of the complete log-likelihood by full Newton with
/// backtracking, in the parameterization of `form`.
pub fn newton_u(form: Formulation, params: &ModelParams, data: &ProblemData) -> Result<DVector<f64>> {
    if params.beta.len() != data.p() || params.sigma2.len() != data.m() {
        return Err(VcmmError::domain("parameter lengths do not match the data"));
    }
    let q = data.q();
    let z = data.z();
    // Per-column design scale and prior precision.
    let mut scale = DVector::zeros(q);
    let mut precision = DVector::zeros(q);
    for i in 0..data.m() {
        let s2 = params.sigma2[i];
        for k in data.block_range(i) {
            match form {
                Formulation::F1 => {
                    if s2 <= 0.0 {
                        return Err(VcmmError::SingularParameter { block: i });
                    }
                    scale[k] = 1.0;
                    precision[k] = 1.0 / s2;
                }
                Formulation::F2 => {
                    scale[k] = s2.sqrt();
                    precision[k] = 1.0;
                }
            }
        }
    }
    let offset = data.x() * &params.beta;
    let y = data.y();
    let objective = |u: &DVector<f64>| -> f64 {
        let mut total = 0.0;
        for j in 0..data.n() {
            let mut eta = offset[j];
            for k in 0..q {
                eta += z[(j, k)] * scale[k] * u[k];
            }
            total += y[j] * eta - log1pexp(eta);
        }
        total - 0.5 * (0..q).map(|k| precision[k] * u[k] * u[k]).sum::<f64>()
    };
    let mut u = DVector::zeros(q);
    for _ in 0..500 {
        let mut grad = DVector::zeros(q);
        let mut hess = DMatrix::zeros(q, q);
        for j in 0..data.n() {
            let mut eta = offset[j];
            for k in 0..q {
                eta += z[(j, k)] * scale[k] * u[k];
            }
            let p = sigmoid(eta);
            let w = p * (1.0 - p);
            for a in 0..q {
                let ba = z[(j, a)] * scale[a];
                grad[a] += ba * (y[j] - p);
                for b in 0..q {
                    hess[(a, b)] += w * ba * z[(j, b)] * scale[b];
                }
            }
        }
        for k in 0..q {
            grad[k] -= precision[k] * u[k];
            hess[(k, k)] += precision[k];
        }
        if grad.amax() <= 1e-10 {
            return Ok(u);
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| oracle_err("Newton Hessian is not positive definite"))?
            .solve(&grad);
        let f0 = objective(&u);
        let mut t = 1.0;
        loop {
            let cand = &u + &step * t;
            if objective(&cand) >= f0 - 1e-13 * f0.abs().max(1.0) || t < 1e-12 {
                u = cand;
                break;
            }
            t *= 0.5;
        }
    }
    Err(oracle_err("Newton mode search did not converge"))
}

/// Logistic-regression MLE by iteratively reweighted least squares.
pub fn irls_logistic(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    for _ in 0..200 {
        let eta = x * &beta;
        let prob = eta.map(sigmoid);
        let grad = x.transpose() * (y - &prob);
        if grad.amax() <= 1e-10 {
            // Under separation the score vanishes only as |eta| grows without bound.
            if eta.amax() > 25.0 {
                return Err(oracle_err("IRLS diverged; the data appear to be separated"));
            }
            return Ok(beta);
        }
        let mut xtwx = DMatrix::zeros(p, p);
        for j in 0..x.nrows() {
            let w = prob[j] * (1.0 - prob[j]);
            let row = x.row(j);
            xtwx += row.transpose() * row * w;
        }
        let step = xtwx
            .cholesky()
            .ok_or_else(|| oracle_err("IRLS information matrix is singular"))?
            .solve(&grad);
        beta += step;
        if beta.amax() > 1e3 || beta.iter().any(|b| !b.is_finite()) {
            return Err(oracle_err("IRLS diverged; the data appear to be separated"));
        }
    }
    Err(oracle_err("IRLS did not converge"))
}

/// Central finite-difference gradient. `step = None` uses `1e-6 (1 + |theta_k|)`.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, theta: &DVector<f64>, step: Option<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(theta.len());
    let mut work = theta.clone();
    for k in 0..theta.len() {
        let h = step.unwrap_or(1e-6 * (1.0 + theta[k].abs()));
        work[k] = theta[k] + h;
        let up = f(&work);
        work[k] = theta[k] - h;
        let down = f(&work);
        work[k] = theta[k];
        g[k] = (up - down) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn hermite_rule_integrates_moments() {
        let (z, w) = gauss_hermite_normal(20);
        let m0: f64 = w.iter().sum();
        let m2: f64 = z.iter().zip(&w).map(|(z, w)| w * z * z).sum();
        let m4: f64 = z.iter().zip(&w).map(|(z, w)| w * z.powi(4)).sum();
        assert_relative_eq!(m0, 1.0, epsilon = 1e-12);
        assert_relative_eq!(m2, 1.0, epsilon = 1e-12);
        assert_relative_eq!(m4, 3.0, epsilon = 1e-11);
    }

    #[test]
    fn ln_gamma_values() {
        assert_relative_eq!(ln_gamma(1.0), 0.0, epsilon = 1e-13);
        assert_relative_eq!(ln_gamma(5.0), 24f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(ln_gamma(0.5), PI.sqrt().ln(), epsilon = 1e-12);
    }

    #[test]
    fn fd_of_squared_norm() {
        let theta = DVector::from_vec(vec![0.3, -1.2, 4.0]);
        let g = fd_gradient(|t| t.norm_squared(), &theta, None);
        assert!((g - &theta * 2.0).amax() < 1e-8);
    }

    #[test]
    fn irls_intercept_only_is_logit_of_mean() {
        let y = DVector::from_vec(vec![1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let x = DMatrix::from_element(8, 1, 1.0);
        let b = irls_logistic(&y, &x).unwrap();
        let ybar: f64 = 5.0 / 8.0;
        assert_relative_eq!(b[0], (ybar / (1.0 - ybar)).ln(), epsilon = 1e-10);
    }

    #[test]
    fn irls_detects_separation() {
        let y = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]);
        let x = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0]);
        assert!(irls_logistic(&y, &x).is_err());
    }

    #[test]
    fn irls_null_model_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { StandardNormal.sample(&mut rng) });
        let y = DVector::from_fn(n, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let b = irls_logistic(&y, &x).unwrap();
        // SE is about 2 / sqrt(n).
        assert!(b.amax() < 3.0 * 2.0 / (n as f64).sqrt());
    }

    #[test]
    fn quadrature_is_exact_for_gaussian_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in 1..=3 {
            let n = 8;
            let design = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
            let offset = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
            let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let noise_var = 0.7;
            let model = GaussianModel { y: y.clone(), offset: offset.clone(), design: design.clone(), noise_var };
            let quad = quadrature_log_marginal(&model, 20).unwrap();
            // Closed form: y ~ N(offset, B B^T + noise I).
            let cov = &design * design.transpose() + DMatrix::identity(n, n) * noise_var;
            let r = &y - &offset;
            let chol = cov.cholesky().unwrap();
            let logdet: f64 = chol.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
            let quadform = r.dot(&chol.solve(&r));
            let exact = -0.5 * (n as f64 * (2.0 * PI).ln() + logdet + quadform);
            assert_relative_eq!(quad, exact, epsilon = 1e-8);
        }
    }

    #[test]
    fn quadrature_rejects_large_dimension() {
        let y = DVector::from_element(4, 1.0);
        let data = ProblemData::new(y, DMatrix::zeros(4, 0), vec![DMatrix::from_element(4, 4, 0.5)]).unwrap();
        let params = ModelParams::new(DVector::zeros(0), DVector::from_element(1, 1.0)).unwrap();
        assert!(matches!(quadrature_loglik(&data, &params, 20), Err(VcmmError::UnsupportedDimension(_))));
    }

    #[test]
    fn vanishing_variance_gives_plain_logistic() {
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let x = DMatrix::from_row_slice(6, 1, &[0.2, -0.1, 1.0, 0.5, -0.7, 0.0]);
        let z = DMatrix::from_element(6, 1, 1.0);
        let data = ProblemData::new(y.clone(), x.clone(), vec![z]).unwrap();
        let beta = DVector::from_element(1, 0.8);
        let params = ModelParams::new(beta.clone(), DVector::from_element(1, 1e-12)).unwrap();
        let quad = quadrature_loglik(&data, &params, 20).unwrap();
        let eta = &x * &beta;
        let plain: f64 = (0..6).map(|j| y[j] * eta[j] - log1pexp(eta[j])).sum();
        assert_relative_eq!(quad, plain, epsilon = 1e-6);
        let (est, se) = mc_loglik(&data, &ModelParams::new(beta, DVector::zeros(1)).unwrap(), 100, 1).unwrap();
        assert_relative_eq!(est, plain, epsilon = 1e-12);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn mc_error_shrinks_like_root_n() {
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let z = DMatrix::from_row_slice(8, 2, &[1., 0., 1., 0., 1., 0., 1., 0., 0., 1., 0., 1., 0., 1., 0., 1.]);
        let data = ProblemData::new(y, DMatrix::zeros(8, 0), vec![z]).unwrap();
        let params = ModelParams::new(DVector::zeros(0), DVector::from_element(1, 2.0)).unwrap();
        let (_, se1) = mc_loglik(&data, &params, 40_000, 3).unwrap();
        let (_, se2) = mc_loglik(&data, &params, 80_000, 4).unwrap();
        let ratio = se1 / se2;
        assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn newton_sign_pattern_follows_score() {
        // Balanced y with beta = 0 and orthogonal groups: u has the sign of Z^T (y - 1/2).
        let y = DVector::from_vec(vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let z = DMatrix::from_row_slice(8, 2, &[1., 0., 1., 0., 1., 0., 1., 0., 0., 1., 0., 1., 0., 1., 0., 1.]);
        let data = ProblemData::new(y.clone(), DMatrix::zeros(8, 0), vec![z.clone()]).unwrap();
        let params = ModelParams::new(DVector::zeros(0), DVector::from_element(1, 1.5)).unwrap();
        let u = newton_u(Formulation::F1, &params, &data).unwrap();
        let score = z.transpose() * y.map(|v| v - 0.5);
        for k in 0..2 {
            assert_eq!(u[k].signum(), score[k].signum());
        }
        let tiny = ModelParams::new(DVector::zeros(0), DVector::from_element(1, 1e-10)).unwrap();
        assert!(newton_u(Formulation::F1, &tiny, &data).unwrap().amax() < 1e-9);
    }
}
