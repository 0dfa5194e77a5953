//! Variance-component estimation for logistic linear mixed models.
//!
//! The marginal likelihood is replaced by its Laplace approximation and
//! maximized with minorize-maximize iterations, in either the variance
//! parameterization ([`Formulation::F1`]) or the standard-deviation
//! parameterization ([`Formulation::F2`]). The latter also supports a lasso
//! penalty on the standard deviations for selecting variance components.

pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod penalized;
pub mod simulate;
pub mod solver;
pub mod study;

#[cfg(any(test, feature = "oracle"))]
pub mod oracle;

pub use error::{Result, VcmmError};
pub use model::{
    complete_loglik, laplace_logdet, laplace_loglik, linear_predictor, logistic, state_from_u,
    FitConfig, Formulation, LaplaceState, ModelParams, ProblemData,
};
pub use penalized::{
    compute_path, compute_path_with, default_lambda_grid, fit_penalized, fit_penalized_from,
    lambda_max, soft_threshold, update_sigma_lasso, Criterion, PathOptions, RegPath,
};
pub use solver::{
    fit, fit_from, restricted_objective, sigma_step_terms, solve_u, update_beta, update_sigma2_f1,
    update_sigma_f2, FitDiagnostics, FitResult, FitStart, SigmaStepTerms, SigmaSurrogate,
    USurrogate,
};
