//! Noise models and robust losses.

use nalgebra::{DMatrix, DVector};

/// Gaussian noise model stored as a square-root information matrix, so
/// whitening a residual is a single triangular multiply.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    sqrt_info: DMatrix<f64>,
}

impl NoiseModel {
    pub fn from_sigmas(sigmas: &[f64]) -> Self {
        let n = sigmas.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, s) in sigmas.iter().enumerate() {
            assert!(*s > 0.0, "sigma must be positive");
            m[(i, i)] = 1.0 / s;
        }
        NoiseModel { sqrt_info: m }
    }

    pub fn isotropic(dim: usize, sigma: f64) -> Self {
        NoiseModel::from_sigmas(&vec![sigma; dim])
    }

    /// Build from a symmetric PSD information matrix via Cholesky.
    pub fn from_information(info: &DMatrix<f64>) -> Option<Self> {
        let chol = info.clone().cholesky()?;
        Some(NoiseModel {
            sqrt_info: chol.l().transpose(),
        })
    }

    /// Build from a covariance matrix, flooring the diagonal to keep the
    /// inverse finite for noise-free simulations.
    pub fn from_covariance(cov: &DMatrix<f64>, floor: f64) -> Option<Self> {
        let mut c = cov.clone();
        for i in 0..c.nrows() {
            c[(i, i)] += floor;
        }
        let info = c.try_inverse()?;
        let sym = (&info + info.transpose()) * 0.5;
        NoiseModel::from_information(&sym)
    }

    pub fn dim(&self) -> usize {
        self.sqrt_info.nrows()
    }

    pub fn whiten_vec(&self, r: &DVector<f64>) -> DVector<f64> {
        &self.sqrt_info * r
    }

    pub fn whiten_mat(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        &self.sqrt_info * j
    }
}

/// Robust loss applied to the whitened squared norm `s = ||r||^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustLoss {
    None,
    /// Cauchy loss with scale `c` in whitened residual units.
    Cauchy { c: f64 },
}

impl RobustLoss {
    pub fn cauchy(c: f64) -> Self {
        assert!(c > 0.0, "cauchy scale must be positive");
        RobustLoss::Cauchy { c }
    }

    /// rho(s): the robustified squared cost.
    pub fn rho(&self, s: f64) -> f64 {
        match self {
            RobustLoss::None => s,
            RobustLoss::Cauchy { c } => {
                // ln_1p keeps the cost accurate when s << c^2, where the
                // naive form underflows to exactly zero
                let c2 = c * c;
                c2 * (s / c2).ln_1p()
            }
        }
    }

    /// rho'(s): the IRLS weight.
    pub fn weight(&self, s: f64) -> f64 {
        match self {
            RobustLoss::None => 1.0,
            RobustLoss::Cauchy { c } => {
                let c2 = c * c;
                1.0 / (1.0 + s / c2)
            }
        }
    }
}
