#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vcmm::{ModelParams, ProblemData};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One-hot group indicators with at least one member per group.
pub fn incidence(rng: &mut ChaCha8Rng, n: usize, groups: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n, groups);
    for r in 0..n {
        let g = if r < groups { r } else { rng.random_range(0..groups) };
        z[(r, g)] = 1.0;
    }
    z
}

pub fn gaussian_block(rng: &mut ChaCha8Rng, n: usize, q: usize) -> DMatrix<f64> {
    let scale = 1.0 / (q as f64).sqrt();
    DMatrix::from_fn(n, q, |_, _| scale * normal(rng))
}

/// A random logistic mixed-model instance together with its generating
/// parameters. Even-numbered blocks are group incidence matrices, odd ones
/// dense Gaussian.
pub struct Instance {
    pub data: ProblemData,
    pub truth: ModelParams,
}

pub fn random_instance(seed: u64, n: usize, sizes: &[usize]) -> Instance {
    let mut rng = rng(seed);
    loop {
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { normal(&mut rng) });
        let blocks: Vec<DMatrix<f64>> = sizes
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                if i % 2 == 0 {
                    incidence(&mut rng, n, q)
                } else {
                    gaussian_block(&mut rng, n, q)
                }
            })
            .collect();
        let beta = DVector::from_vec(vec![-0.3, 0.8]);
        let sigma2: DVector<f64> = DVector::from_fn(sizes.len(), |_, _| rng.random_range(0.2..2.0));
        let mut eta = &x * &beta;
        for (i, z) in blocks.iter().enumerate() {
            let u = DVector::from_fn(z.ncols(), |_, _| sigma2[i].sqrt() * normal(&mut rng));
            eta += z * u;
        }
        let y = eta.map(|e| {
            let p = 1.0 / (1.0 + (-e).exp());
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        });
        let ones = y.sum();
        if ones < 2.0 || ones > n as f64 - 2.0 {
            continue;
        }
        let data = ProblemData::new(y, x, blocks).expect("valid instance");
        return Instance {
            data,
            truth: ModelParams::new(beta, sigma2).expect("valid truth"),
        };
    }
}

/// Random instance with random dimensions: `n` in `n_range`, `m` in `1..=max_m`,
/// block sizes in `1..=max_q`.
pub fn random_shape_instance(seed: u64, n_range: (usize, usize), max_m: usize, max_q: usize) -> Instance {
    let mut r = rng(seed ^ 0xA5A5_5A5A);
    let n = r.random_range(n_range.0..=n_range.1);
    let m = r.random_range(1..=max_m);
    let sizes: Vec<usize> = (0..m).map(|_| r.random_range(1..=max_q)).collect();
    random_instance(seed, n, &sizes)
}

/// Random parameters with `p` fixed effects and `m` positive variances.
pub fn random_params(rng: &mut ChaCha8Rng, p: usize, m: usize) -> ModelParams {
    let beta = DVector::from_fn(p, |_, _| 0.5 * normal(rng));
    let sigma2 = DVector::from_fn(m, |_, _| rng.random_range(0.05..3.0));
    ModelParams::new(beta, sigma2).unwrap()
}
