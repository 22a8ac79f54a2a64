//! Cholesky-based SPD matrix handling shared by the model, sampler and
//! predictors.
//!
//! All Gaussian densities are evaluated through triangular solves; no
//! explicit inverse is formed except where a full conditional genuinely
//! needs inverse matrices as data (the `x_0` update).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative jitter ladder: each rung is multiplied by the mean diagonal of
/// the matrix being factorized. Matrices assembled here are PSD in exact
/// arithmetic; the ladder absorbs the tiny negative eigenvalues that
/// finite-precision assembly can produce.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// A symmetric positive-definite matrix together with its Cholesky factor
/// and the diagonal jitter that was needed to factorize it.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    mat: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl SpdFactor {
    /// Factorizes `mat`, escalating through the jitter ladder if needed.
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        let n = mat.nrows();
        let mean_diag = mat.diagonal().sum() / n as f64;
        let scale = if mean_diag.is_finite() && mean_diag > 0.0 {
            mean_diag
        } else {
            1.0
        };
        let mut attempted = Vec::new();
        for rung in JITTER_LADDER {
            let jitter = rung * scale;
            attempted.push(jitter);
            let candidate = if jitter == 0.0 {
                mat.clone()
            } else {
                let mut m = mat.clone();
                for i in 0..n {
                    m[(i, i)] += jitter;
                }
                m
            };
            if let Some(chol) = Cholesky::new(candidate.clone()) {
                return Ok(SpdFactor {
                    mat: candidate,
                    chol,
                    jitter,
                });
            }
        }
        Err(Error::Numerical(format!(
            "Cholesky factorization failed after jitter ladder {attempted:?} \
             (mean diagonal {mean_diag:.3e}, n = {n})"
        )))
    }

    /// The matrix that was factorized (jitter included).
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    /// Total diagonal jitter added; 0 when the raw matrix factorized.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    /// log |M|
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// M⁻¹ v
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// vᵀ M⁻¹ v
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.chol.solve(v))
    }

    /// M⁻¹ as a dense matrix.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// The lower-triangular Cholesky factor L (M = LLᵀ).
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// log N(x; mean, scale·M)
    pub fn mvn_logpdf(&self, x: &DVector<f64>, mean: &DVector<f64>, scale: f64) -> f64 {
        let n = self.dim() as f64;
        let resid = x - mean;
        -0.5 * n * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * n * scale.ln()
            - 0.5 * self.log_det()
            - 0.5 / scale * self.quad_form(&resid)
    }

    /// A draw from N(mean, scale·M).
    pub fn sample<R: Rng + ?Sized>(
        &self,
        mean: &DVector<f64>,
        scale: f64,
        rng: &mut R,
    ) -> DVector<f64> {
        let z = standard_normal_vector(self.dim(), rng);
        self.sample_with_noise(mean, scale, &z)
    }

    /// N(mean, scale·M) evaluated on caller-provided standard-normal noise;
    /// lets common random numbers be reused across covariance candidates.
    pub fn sample_with_noise(
        &self,
        mean: &DVector<f64>,
        scale: f64,
        z: &DVector<f64>,
    ) -> DVector<f64> {
        mean + self.chol.l() * z * scale.sqrt()
    }

    /// A draw from N(mean, scale·M⁻¹), i.e. treating the factorized matrix
    /// as a precision matrix: x = mean + √scale · L⁻ᵀ z.
    pub fn sample_precision<R: Rng + ?Sized>(
        &self,
        mean: &DVector<f64>,
        scale: f64,
        rng: &mut R,
    ) -> DVector<f64> {
        let z = standard_normal_vector(self.dim(), rng);
        let u = self
            .chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .expect("triangular solve on a Cholesky factor");
        mean + u * scale.sqrt()
    }
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::rng::stream;

    fn spd_example() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0])
    }

    #[test]
    fn logdet_and_quad_match_direct() {
        let m = spd_example();
        let f = SpdFactor::new(m.clone()).unwrap();
        assert_relative_eq!(f.log_det(), m.determinant().ln(), epsilon = 1e-12);
        let v = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let direct = v.dot(&(m.try_inverse().unwrap() * &v));
        assert_relative_eq!(f.quad_form(&v), direct, epsilon = 1e-12);
    }

    #[test]
    fn mvn_logpdf_matches_scalar_formula() {
        let f = SpdFactor::new(DMatrix::from_element(1, 1, 2.0)).unwrap();
        let x = DVector::from_element(1, 1.3);
        let mean = DVector::from_element(1, 0.4);
        let scale = 0.7;
        let var = scale * 2.0;
        let expect = -0.5 * (2.0 * std::f64::consts::PI * var).ln()
            - (1.3f64 - 0.4).powi(2) / (2.0 * var);
        assert_relative_eq!(f.mvn_logpdf(&x, &mean, scale), expect, epsilon = 1e-12);
    }

    #[test]
    fn jitter_ladder_rescues_near_singular() {
        // rank-1 matrix: needs jitter
        let v = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let f = SpdFactor::new(m).unwrap();
        assert!(f.jitter() > 0.0);
    }

    #[test]
    fn hard_failure_reports_ladder() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -5.0]);
        match SpdFactor::new(m) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("jitter ladder")),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn precision_sampling_covariance() {
        // sample N(0, A⁻¹) and check the empirical covariance
        let a = spd_example();
        let f = SpdFactor::new(a.clone()).unwrap();
        let mut rng = stream(9, &[1]);
        let mean = DVector::zeros(3);
        let n = 40_000;
        let mut cov = DMatrix::zeros(3, 3);
        for _ in 0..n {
            let x = f.sample_precision(&mean, 1.0, &mut rng);
            cov += &x * x.transpose();
        }
        cov /= n as f64;
        let target = a.try_inverse().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(cov[(i, j)], target[(i, j)], epsilon = 0.02);
            }
        }
    }
}
