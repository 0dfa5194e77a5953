//! Capacitance-matrix kernels.
//!
//! Everything that needs `A^{-1}` for `A = W^{-1} + sum_i sigma_i^2 Z_i Z_i^T`
//! goes through the Cholesky factor of the q x q matrix
//! `M = I_q + Z(sigma)^T W Z(sigma)`, `Z(sigma) = (sigma_1 Z_1, ..., sigma_m Z_m)`:
//!
//! ```text
//! A^{-1} = W - W Z(sigma) M^{-1} Z(sigma)^T W
//! ln det A + ln det W = ln det M
//! ```
//!
//! `W^{-1}` is never formed, so saturated probabilities (`w_j -> 0`) are harmless.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, VcmmError};

/// Column panel width used when accumulating block traces.
pub const DEFAULT_PANEL_WIDTH: usize = 64;

/// `Z(sigma) = (sigma_1 Z_1, ..., sigma_m Z_m)`.
pub fn scaled_z(sigma: &DVector<f64>, z_blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = z_blocks.first().map_or(0, |b| b.nrows());
    let q: usize = z_blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, q);
    let mut off = 0;
    for (zi, &s) in z_blocks.iter().zip(sigma.iter()) {
        let mut dst = out.columns_mut(off, zi.ncols());
        dst.copy_from(zi);
        dst *= s;
        off += zi.ncols();
    }
    out
}

/// Cholesky factor of `M = I_q + Z(sigma)^T diag(w) Z(sigma)` with the pieces
/// needed to apply `A^{-1}`.
#[derive(Debug, Clone)]
pub struct CapacitanceFactor {
    chol: Cholesky<f64, Dyn>,
    zsigma: DMatrix<f64>,
    w: DVector<f64>,
    panel_width: usize,
}

pub fn build_capacitance(
    w: &DVector<f64>,
    sigma: &DVector<f64>,
    z_blocks: &[DMatrix<f64>],
) -> Result<CapacitanceFactor> {
    if sigma.len() != z_blocks.len() {
        return Err(VcmmError::domain(format!(
            "{} scale factors for {} blocks",
            sigma.len(),
            z_blocks.len()
        )));
    }
    if let Some(b) = z_blocks.iter().position(|b| b.nrows() != w.len()) {
        return Err(VcmmError::domain(format!(
            "block {b} has {} rows but there are {} weights",
            z_blocks[b].nrows(),
            w.len()
        )));
    }
    if w.iter().any(|&wj| !(wj >= 0.0) || !wj.is_finite()) {
        return Err(VcmmError::numerical("weights must be finite and nonnegative"));
    }
    if sigma.iter().any(|s| !s.is_finite()) {
        return Err(VcmmError::numerical("non-finite variance component"));
    }
    let zsigma = scaled_z(sigma, z_blocks);
    let mut root_w_z = zsigma.clone();
    for (j, wj) in w.iter().enumerate() {
        let r = wj.sqrt();
        root_w_z.row_mut(j).scale_mut(r);
    }
    let mut m = root_w_z.tr_mul(&root_w_z);
    for k in 0..m.nrows() {
        m[(k, k)] += 1.0;
    }
    let chol = Cholesky::new(m)
        .ok_or_else(|| VcmmError::numerical("capacitance matrix I + Z'WZ is not positive definite"))?;
    Ok(CapacitanceFactor {
        chol,
        zsigma,
        w: w.clone(),
        panel_width: DEFAULT_PANEL_WIDTH,
    })
}

impl CapacitanceFactor {
    pub fn with_panel_width(mut self, width: usize) -> Self {
        self.panel_width = width.max(1);
        self
    }

    /// Lower-triangular factor `L` with `L L^T = M`.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `M` reconstructed from its factor.
    pub fn matrix(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        &l * l.transpose()
    }

    pub fn zsigma(&self) -> &DMatrix<f64> {
        &self.zsigma
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.w
    }

    /// `ln det M`.
    pub fn log_det(&self) -> f64 {
        self.chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
    }

    /// `M^{-1} B`.
    pub fn solve_capacitance(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `A^{-1} V = W V - W Z(sigma) M^{-1} Z(sigma)^T W V`.
    pub fn apply_a_inverse(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if v.nrows() != self.w.len() {
            return Err(VcmmError::domain(format!(
                "right-hand side has {} rows, expected {}",
                v.nrows(),
                self.w.len()
            )));
        }
        let mut wv = v.clone();
        for (j, wj) in self.w.iter().enumerate() {
            wv.row_mut(j).scale_mut(*wj);
        }
        let inner = self.chol.solve(&self.zsigma.tr_mul(&wv));
        let mut correction = &self.zsigma * inner;
        for (j, wj) in self.w.iter().enumerate() {
            correction.row_mut(j).scale_mut(*wj);
        }
        Ok(wv - correction)
    }

    /// `t_i = tr(Z_i^T A^{-1} Z_i)` for each block, accumulated over column
    /// panels in a fixed order.
    pub fn block_traces(&self, z_blocks: &[DMatrix<f64>]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(z_blocks.len());
        for (i, zi) in z_blocks.iter().enumerate() {
            let mut t = 0.0;
            let mut start = 0;
            while start < zi.ncols() {
                let width = self.panel_width.min(zi.ncols() - start);
                let panel = zi.columns(start, width).into_owned();
                let ainv = self.apply_a_inverse(&panel)?;
                t += panel.component_mul(&ainv).sum();
                start += width;
            }
            out[i] = t;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(
        rng: &mut ChaCha8Rng,
        n: usize,
        sizes: &[usize],
    ) -> (DVector<f64>, DVector<f64>, Vec<DMatrix<f64>>) {
        let w = DVector::from_fn(n, |_, _| rng.random_range(0.01..0.25));
        let sigma = DVector::from_fn(sizes.len(), |_, _| rng.random_range(0.1..2.0));
        let blocks = sizes
            .iter()
            .map(|&q| DMatrix::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        (w, sigma, blocks)
    }

    fn dense_a(w: &DVector<f64>, sigma: &DVector<f64>, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
        let n = w.len();
        let mut a = DMatrix::from_diagonal(&w.map(|x| 1.0 / x));
        for (zi, s) in blocks.iter().zip(sigma.iter()) {
            a += zi * zi.transpose() * (s * s);
        }
        assert_eq!(a.nrows(), n);
        a
    }

    #[test]
    fn zero_sigma_gives_identity() {
        let w = DVector::from_element(5, 0.2);
        let blocks = vec![DMatrix::from_element(5, 2, 1.0), DMatrix::from_element(5, 1, -1.0)];
        let f = build_capacitance(&w, &DVector::zeros(2), &blocks).unwrap();
        assert_relative_eq!(f.l(), DMatrix::identity(3, 3), epsilon = 1e-15);
        assert_eq!(f.log_det(), 0.0);
        let v = DMatrix::from_fn(5, 2, |i, j| (i + 2 * j) as f64);
        let got = f.apply_a_inverse(&v).unwrap();
        assert_relative_eq!(got, &v * 0.2, epsilon = 1e-14);
        let t = f.block_traces(&blocks).unwrap();
        // t_i = w ||Z_i||_F^2
        assert_relative_eq!(t[0], 0.2 * 10.0, epsilon = 1e-14);
        assert_relative_eq!(t[1], 0.2 * 5.0, epsilon = 1e-14);
    }

    #[test]
    fn scalar_capacitance() {
        let w = DVector::from_element(4, 0.25);
        let blocks = vec![DMatrix::from_element(4, 1, 1.0)];
        let f = build_capacitance(&w, &DVector::from_element(1, 2.0), &blocks).unwrap();
        assert_relative_eq!(f.matrix()[(0, 0)], 5.0, epsilon = 1e-14);
        assert_relative_eq!(f.l()[(0, 0)], 5f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn reconstruction_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (w, sigma, blocks) = random_instance(&mut rng, 25, &[3, 4, 2]);
            let f = build_capacitance(&w, &sigma, &blocks).unwrap();
            let zs = scaled_z(&sigma, &blocks);
            let m = DMatrix::identity(9, 9) + zs.transpose() * DMatrix::from_diagonal(&w) * &zs;
            let err = (f.matrix() - &m).norm() / m.norm();
            assert!(err < 1e-10, "relative reconstruction error {err}");
        }
    }

    #[test]
    fn woodbury_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.random_range(5..=30);
            let sizes: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=4)).collect();
            let (w, sigma, blocks) = random_instance(&mut rng, n, &sizes);
            let f = build_capacitance(&w, &sigma, &blocks).unwrap();
            let a = dense_a(&w, &sigma, &blocks);
            let v = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
            let dense = a.clone().lu().solve(&v).unwrap();
            let got = f.apply_a_inverse(&v).unwrap();
            assert!((&got - &dense).norm() <= 1e-7 * v.norm());

            // Round trip A e_1.
            let mut e1 = DMatrix::zeros(n, 1);
            e1[(0, 0)] = 1.0;
            let back = f.apply_a_inverse(&(&a * &e1)).unwrap();
            assert!((back - e1).amax() < 1e-8);
        }
    }

    #[test]
    fn a_inverse_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, sigma, blocks) = random_instance(&mut rng, 20, &[4, 3]);
        let f = build_capacitance(&w, &sigma, &blocks).unwrap();
        for _ in 0..10 {
            let a = DMatrix::from_fn(20, 1, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(20, 1, |_, _| rng.random_range(-1.0..1.0));
            let lhs = a.dot(&f.apply_a_inverse(&b).unwrap());
            let rhs = f.apply_a_inverse(&a).unwrap().dot(&b);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12, max_relative = 1e-10);
        }
    }

    #[test]
    fn traces_match_dense_and_panel_width_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (w, sigma, blocks) = random_instance(&mut rng, 30, &[5, 3, 2]);
        let f = build_capacitance(&w, &sigma, &blocks).unwrap();
        let ainv = dense_a(&w, &sigma, &blocks).try_inverse().unwrap();
        let t = f.block_traces(&blocks).unwrap();
        let t2 = f.clone().with_panel_width(2).block_traces(&blocks).unwrap();
        for (i, zi) in blocks.iter().enumerate() {
            let dense = (zi.transpose() * &ainv * zi).trace();
            assert_relative_eq!(t[i], dense, max_relative = 1e-9);
            assert_relative_eq!(t2[i], dense, max_relative = 1e-9);
            assert!(t[i] > 0.0);
        }
    }

    #[test]
    fn traces_decrease_when_a_variance_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let (w, sigma, blocks) = random_instance(&mut rng, 20, &[3, 3]);
            let t0 = build_capacitance(&w, &sigma, &blocks).unwrap().block_traces(&blocks).unwrap();
            let mut bigger = sigma.clone();
            bigger[1] *= 1.5;
            let t1 = build_capacitance(&w, &bigger, &blocks).unwrap().block_traces(&blocks).unwrap();
            for i in 0..2 {
                assert!(t1[i] < t0[i], "trace {i} did not decrease: {} -> {}", t0[i], t1[i]);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let w = DVector::from_element(4, 0.2);
        let blocks = vec![DMatrix::from_element(4, 1, 1.0)];
        let f = build_capacitance(&w, &DVector::from_element(1, 1.0), &blocks).unwrap();
        assert!(f.apply_a_inverse(&DMatrix::zeros(3, 1)).is_err());
        assert!(build_capacitance(&w, &DVector::from_element(2, 1.0), &blocks).is_err());
        assert!(build_capacitance(&DVector::from_element(4, f64::NAN), &DVector::from_element(1, 1.0), &blocks).is_err());
    }
}
