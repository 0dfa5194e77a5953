//! Data generators for the two simulation designs and support-recovery metrics.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcmmError};
use crate::model::{sigmoid_clamped, ModelParams, ProblemData};

/// Fixed effects of the genetic design: intercept followed by five covariates.
pub const GENETIC_BETA: [f64; 6] = [0.1, -1.0, 0.8, -0.3, -1.2, 1.5];

/// Truth used by the crossed-ANOVA study: `(beta_1..3, sigma2_alpha, sigma2_gamma, sigma2_alphagamma)`.
pub const ANOVA_TRUTH: [f64; 6] = [0.6, 1.0, -1.0, 0.5, 0.9, 0.3];

/// Seed for replicate `index`: `seed XOR (index * 0x9E3779B97F4A7C15)`.
pub fn replicate_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// A simulated dataset with its generating parameters.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: ProblemData,
    pub truth: ModelParams,
    pub x_names: Vec<String>,
    pub block_names: Vec<String>,
    /// Realized random effects per block.
    pub effects: Vec<DVector<f64>>,
}

/// Two-way crossed random-effects design with interaction:
/// `eta_ijk = x_ijk^T beta + alpha_i + gamma_j + (alpha gamma)_ij`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaDesign {
    pub a: usize,
    pub b: usize,
    /// Replicates per cell.
    pub c: usize,
    pub beta: [f64; 3],
    /// `(sigma2_alpha, sigma2_gamma, sigma2_alphagamma)`.
    pub sigma2: [f64; 3],
    pub seed: u64,
}

impl AnovaDesign {
    /// `a = b = 5` with the reference truth.
    pub fn standard(c: usize, seed: u64) -> Self {
        Self {
            a: 5,
            b: 5,
            c,
            beta: [ANOVA_TRUTH[0], ANOVA_TRUTH[1], ANOVA_TRUTH[2]],
            sigma2: [ANOVA_TRUTH[3], ANOVA_TRUTH[4], ANOVA_TRUTH[5]],
            seed,
        }
    }

    pub fn n(&self) -> usize {
        self.a * self.b * self.c
    }

    fn validate(&self) -> Result<()> {
        if self.a == 0 || self.b == 0 || self.c == 0 {
            return Err(VcmmError::domain("ANOVA level and replicate counts must be positive"));
        }
        if self.sigma2.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) || self.beta.iter().any(|b| !b.is_finite()) {
            return Err(VcmmError::domain("ANOVA parameters must be finite with nonnegative variances"));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn bernoulli(rng: &mut ChaCha8Rng, eta: f64) -> f64 {
    let p = sigmoid_clamped(eta, 0.0);
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// Rows are ordered by factor-1 level, then factor-2 level, then replicate.
/// Covariates are i.i.d. standard normal.
pub fn simulate_anova(design: &AnovaDesign) -> Result<Simulated> {
    design.validate()?;
    let (a, b, c) = (design.a, design.b, design.c);
    let n = design.n();
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let sd = design.sigma2.map(f64::sqrt);
    let alpha: Vec<f64> = (0..a).map(|_| sd[0] * normal(&mut rng)).collect();
    let gamma: Vec<f64> = (0..b).map(|_| sd[1] * normal(&mut rng)).collect();
    let inter: Vec<f64> = (0..a * b).map(|_| sd[2] * normal(&mut rng)).collect();

    let mut x = DMatrix::zeros(n, 3);
    let mut z_alpha = DMatrix::zeros(n, a);
    let mut z_gamma = DMatrix::zeros(n, b);
    let mut z_inter = DMatrix::zeros(n, a * b);
    let mut y = DVector::zeros(n);
    let mut row = 0;
    for i in 0..a {
        for j in 0..b {
            for _ in 0..c {
                let mut eta = alpha[i] + gamma[j] + inter[i * b + j];
                for k in 0..3 {
                    let v = normal(&mut rng);
                    x[(row, k)] = v;
                    eta += v * design.beta[k];
                }
                z_alpha[(row, i)] = 1.0;
                z_gamma[(row, j)] = 1.0;
                z_inter[(row, i * b + j)] = 1.0;
                y[row] = bernoulli(&mut rng, eta);
                row += 1;
            }
        }
    }
    let data = ProblemData::new(y, x, vec![z_alpha, z_gamma, z_inter])?;
    let truth = ModelParams::new(
        DVector::from_column_slice(&design.beta),
        DVector::from_column_slice(&design.sigma2),
    )?;
    Ok(Simulated {
        data,
        truth,
        x_names: vec!["x1".into(), "x2".into(), "x3".into()],
        block_names: vec!["alpha".into(), "gamma".into(), "alpha_gamma".into()],
        effects: vec![
            DVector::from_vec(alpha),
            DVector::from_vec(gamma),
            DVector::from_vec(inter),
        ],
    })
}

/// Sparse variance-component patterns for the genetic design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneticSetting {
    /// `(5, 7.5, 10, 0, ...)`
    One,
    /// `(10, 15, 20, 0, ...)`
    Two,
    /// `(5, 6, 7, 8, 9, 10, 0, ...)`
    Three,
    /// `(10, 12, 14, 16, 18, 20, 0, ...)`
    Four,
}

impl GeneticSetting {
    pub fn from_index(k: u8) -> Result<Self> {
        match k {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            3 => Ok(Self::Three),
            4 => Ok(Self::Four),
            _ => Err(VcmmError::domain(format!("genetic setting must be 1-4, got {k}"))),
        }
    }

    fn nonzero(self) -> &'static [f64] {
        match self {
            Self::One => &[5.0, 7.5, 10.0],
            Self::Two => &[10.0, 15.0, 20.0],
            Self::Three => &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0],
            Self::Four => &[10.0, 12.0, 14.0, 16.0, 18.0, 20.0],
        }
    }

    /// Variance components for `m` regions; the leading entries are nonzero.
    pub fn sigma2(self, m: usize) -> Result<Vec<f64>> {
        let nz = self.nonzero();
        if m < nz.len() {
            return Err(VcmmError::domain(format!(
                "this setting has {} nonzero components, m = {m} is too small",
                nz.len()
            )));
        }
        let mut out = nz.to_vec();
        out.resize(m, 0.0);
        Ok(out)
    }
}

/// Joint model over `m` regions:
/// `logit(mu) = X beta + sum_i s_i^{-1/2} G_i gamma_i`, `gamma_i ~ N(0, sigma_i^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneticDesign {
    pub n: usize,
    pub m: usize,
    /// Variants per region; drawn uniformly from 10..=25 when `None`.
    pub block_sizes: Option<Vec<usize>>,
    pub beta: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub seed: u64,
    /// Scale each region by `s_i^{-1/2}`.
    pub weight_mode: bool,
}

impl GeneticDesign {
    pub fn setting(setting: GeneticSetting, m: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            n: 399,
            m,
            block_sizes: None,
            beta: GENETIC_BETA.to_vec(),
            sigma2: setting.sigma2(m)?,
            seed,
            weight_mode: true,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(VcmmError::domain("genetic design needs n > 0 and m > 0"));
        }
        if self.sigma2.len() != self.m {
            return Err(VcmmError::domain(format!(
                "sigma2 has {} entries for m = {} regions",
                self.sigma2.len(),
                self.m
            )));
        }
        if self.beta.is_empty() {
            return Err(VcmmError::domain("genetic design needs at least an intercept"));
        }
        if let Some(s) = &self.block_sizes {
            if s.len() != self.m || s.iter().any(|&k| k == 0) {
                return Err(VcmmError::domain("block_sizes must list m positive sizes"));
            }
        }
        if self.sigma2.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(VcmmError::domain("variance components must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Genotypes are i.i.d. Binomial(2, maf) with `maf ~ U(0.05, 0.5)` per variant.
/// `X` is an intercept followed by `len(beta) - 1` standard-normal covariates.
pub fn simulate_genetic(design: &GeneticDesign) -> Result<Simulated> {
    design.validate()?;
    let n = design.n;
    let p = design.beta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let sizes: Vec<usize> = match &design.block_sizes {
        Some(s) => s.clone(),
        None => (0..design.m).map(|_| rng.random_range(10..=25)).collect(),
    };
    let mut x = DMatrix::from_element(n, p, 1.0);
    for r in 0..n {
        for c in 1..p {
            x[(r, c)] = normal(&mut rng);
        }
    }
    let mut blocks = Vec::with_capacity(design.m);
    let mut effects = Vec::with_capacity(design.m);
    let mut eta = &x * DVector::from_column_slice(&design.beta);
    for (i, &s) in sizes.iter().enumerate() {
        let scale = if design.weight_mode { (s as f64).powf(-0.5) } else { 1.0 };
        let mut g = DMatrix::zeros(n, s);
        for k in 0..s {
            let maf: f64 = rng.random_range(0.05..0.5);
            let dist = Binomial::new(2, maf).map_err(|e| VcmmError::domain(e.to_string()))?;
            for r in 0..n {
                g[(r, k)] = dist.sample(&mut rng) as f64 * scale;
            }
        }
        let sd = design.sigma2[i].sqrt();
        let gamma = DVector::from_fn(s, |_, _| sd * normal(&mut rng));
        eta += &g * &gamma;
        blocks.push(g);
        effects.push(gamma);
    }
    let y = eta.map(|e| bernoulli(&mut rng, e));
    let data = ProblemData::new(y, x, blocks)?;
    let truth = ModelParams::new(
        DVector::from_column_slice(&design.beta),
        DVector::from_column_slice(&design.sigma2),
    )?;
    let mut x_names = vec!["intercept".to_string()];
    x_names.extend((1..p).map(|k| format!("cov{k}")));
    Ok(Simulated {
        data,
        truth,
        x_names,
        block_names: (0..design.m).map(|i| format!("region{}", i + 1)).collect(),
        effects,
    })
}

/// Averages over replicates of support-recovery statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub true_positive: f64,
    pub false_positive: f64,
    /// Fraction of replicates selecting exactly the true support.
    pub exact: f64,
    /// Fraction selecting a strict superset of the true support.
    pub over: f64,
}

pub fn selection_metrics(truth: &BTreeSet<usize>, fitted: &[BTreeSet<usize>]) -> SelectionMetrics {
    if fitted.is_empty() {
        return SelectionMetrics {
            true_positive: 0.0,
            false_positive: 0.0,
            exact: 0.0,
            over: 0.0,
        };
    }
    let r = fitted.len() as f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut exact = 0usize;
    let mut over = 0usize;
    for f in fitted {
        tp += f.intersection(truth).count();
        fp += f.difference(truth).count();
        if f == truth {
            exact += 1;
        } else if f.is_superset(truth) {
            over += 1;
        }
    }
    SelectionMetrics {
        true_positive: tp as f64 / r,
        false_positive: fp as f64 / r,
        exact: exact as f64 / r,
        over: over as f64 / r,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn anova_dimensions_and_incidence() {
        let sim = simulate_anova(&AnovaDesign { c: 2, ..AnovaDesign::standard(2, 7) }).unwrap();
        assert_eq!(sim.data.n(), 50);
        assert_eq!(sim.data.block_sizes(), vec![5, 5, 25]);
        for zi in sim.data.z_blocks() {
            for r in 0..zi.nrows() {
                assert_eq!(zi.row(r).sum(), 1.0);
            }
        }
    }

    #[test]
    fn anova_degenerate_model_is_balanced() {
        let design = AnovaDesign {
            a: 5,
            b: 5,
            c: 200,
            beta: [0.0; 3],
            sigma2: [0.0; 3],
            seed: 3,
        };
        let sim = simulate_anova(&design).unwrap();
        let mean = sim.data.y().mean();
        assert!(mean > 0.45 && mean < 0.55, "mean {mean}");
    }

    #[test]
    fn seeded_determinism() {
        let a = simulate_anova(&AnovaDesign::standard(4, 11)).unwrap();
        let b = simulate_anova(&AnovaDesign::standard(4, 11)).unwrap();
        assert_eq!(a.data, b.data);
        let c = simulate_anova(&AnovaDesign::standard(4, 12)).unwrap();
        assert_ne!(a.data, c.data);
        let g1 = simulate_genetic(&GeneticDesign::setting(GeneticSetting::One, 5, 9).unwrap()).unwrap();
        let g2 = simulate_genetic(&GeneticDesign::setting(GeneticSetting::One, 5, 9).unwrap()).unwrap();
        assert_eq!(g1.data, g2.data);
    }

    #[test]
    fn genetic_settings() {
        assert_eq!(GeneticSetting::One.sigma2(5).unwrap(), vec![5.0, 7.5, 10.0, 0.0, 0.0]);
        assert_eq!(
            GeneticSetting::Four.sigma2(10).unwrap(),
            vec![10.0, 12.0, 14.0, 16.0, 18.0, 20.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert!(GeneticSetting::Three.sigma2(5).is_err());
        let design = GeneticDesign::setting(GeneticSetting::One, 5, 1).unwrap();
        let sim = simulate_genetic(&design).unwrap();
        assert_eq!(sim.data.n(), 399);
        assert_eq!(sim.data.p(), 6);
        assert_eq!(sim.data.m(), 5);
        for (i, zi) in sim.data.z_blocks().iter().enumerate() {
            let s = zi.ncols();
            assert!((10..=25).contains(&s));
            let scale = (s as f64).powf(-0.5);
            for v in zi.iter() {
                let g = v / scale;
                assert!((g - g.round()).abs() < 1e-12 && (0.0..=2.0).contains(&g.round()), "block {i}");
            }
        }
    }

    #[test]
    fn zero_variance_genetic_depends_on_x_only() {
        let mut design = GeneticDesign::setting(GeneticSetting::One, 5, 4).unwrap();
        design.sigma2 = vec![0.0; 5];
        design.n = 20_000;
        let sim = simulate_genetic(&design).unwrap();
        // Mean of y matches the mean of logistic(X beta) without random effects.
        let eta = sim.data.x() * &sim.truth.beta;
        let expected: f64 = eta.iter().map(|&e| sigmoid_clamped(e, 0.0)).sum::<f64>() / design.n as f64;
        assert!((sim.data.y().mean() - expected).abs() < 0.015);
    }

    #[test]
    fn anova_latent_moments_match_generating_variance() {
        let design = AnovaDesign {
            a: 80,
            b: 80,
            c: 1,
            beta: [0.0; 3],
            sigma2: [0.5, 0.9, 0.3],
            seed: 5,
        };
        let sim = simulate_anova(&design).unwrap();
        assert!(sim.data.n() >= 5000);
        // Interaction block has a * b = 6400 draws; the main effects 80 each.
        let var = |v: &DVector<f64>| v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
        assert!((var(&sim.effects[2]) - 0.3).abs() / 0.3 < 0.15);
        let pooled = (var(&sim.effects[0]) / 0.5 + var(&sim.effects[1]) / 0.9) / 2.0;
        assert!((pooled - 1.0).abs() < 0.3);
    }

    #[test]
    fn selection_metric_examples() {
        let truth = set(&[1, 2, 3]);
        let m = selection_metrics(&truth, &[truth.clone(), truth.clone()]);
        assert_eq!((m.exact, m.over, m.false_positive), (1.0, 0.0, 0.0));
        let m = selection_metrics(&truth, &vec![set(&[1, 2, 3, 4]); 3]);
        assert_eq!((m.over, m.false_positive, m.exact), (1.0, 1.0, 0.0));
        let m = selection_metrics(&truth, &[set(&[1, 2]), set(&[1, 2, 3, 4])]);
        assert_eq!(m.true_positive, 2.5);
        assert_eq!(m.false_positive, 0.5);
        assert_eq!(m.exact, 0.0);
        assert_eq!(m.over, 0.5);
    }

    #[test]
    fn replicate_seed_rule() {
        assert_eq!(replicate_seed(42, 0), 42);
        assert_eq!(replicate_seed(42, 1), 42 ^ 0x9E37_79B9_7F4A_7C15);
    }
}
