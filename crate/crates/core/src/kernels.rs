//! Covariance kernels: the squared-exponential family used by the three
//! Gaussian model components, the derivative-process kernel, and the Matérn
//! family needed by the benchmark generators.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;

/// Squared-exponential kernel `k(h²) = variance · exp(−decay · h²)`.
///
/// Instantiated with (σ²_p, η₁) for the latent initial field, (σ²_θ, η₂)
/// for the observed initial field, and (σ², η₃) for the random potential.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeKernel {
    variance: f64,
    decay: f64,
}

impl SeKernel {
    pub fn new(variance: f64, decay: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) || !(decay > 0.0 && decay.is_finite()) {
            return Err(Error::Domain(format!(
                "SE kernel parameters must be positive and finite, got variance {variance}, decay {decay}"
            )));
        }
        Ok(SeKernel { variance, decay })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }
}

/// `variance · exp(−decay · sq_dist)`
pub fn se_cov(k: &SeKernel, sq_dist: f64) -> f64 {
    k.variance * (-k.decay * sq_dist).exp()
}

/// Covariance of the derivative process of a GP with SE kernel:
/// `2·decay·variance·exp(−decay·h²)·(1 − 2·decay·h²)`, evaluated at
/// `sq_dist = h²`. Negative for `decay·h² > 1/2`.
pub fn dse_cov(k: &SeKernel, sq_dist: f64) -> f64 {
    let u = k.decay * sq_dist;
    2.0 * k.decay * k.variance * (-u).exp() * (1.0 - 2.0 * u)
}

/// Supported Matérn smoothness values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaternSmoothness {
    Half,
    ThreeHalves,
    Two,
    FiveHalves,
}

impl MaternSmoothness {
    pub fn nu(&self) -> f64 {
        match self {
            MaternSmoothness::Half => 0.5,
            MaternSmoothness::ThreeHalves => 1.5,
            MaternSmoothness::Two => 2.0,
            MaternSmoothness::FiveHalves => 2.5,
        }
    }
}

/// Matérn kernel under the convention
/// `cov(d) = σ² · (2^{1−ν}/Γ(ν)) · (√(2ν)·d/κ)^ν · K_ν(√(2ν)·d/κ)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaternKernel {
    variance: f64,
    range: f64,
    smoothness: MaternSmoothness,
}

impl MaternKernel {
    pub fn new(variance: f64, range: f64, smoothness: MaternSmoothness) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) || !(range > 0.0 && range.is_finite()) {
            return Err(Error::Domain(format!(
                "Matérn parameters must be positive and finite, got variance {variance}, range {range}"
            )));
        }
        Ok(MaternKernel {
            variance,
            range,
            smoothness,
        })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }
}

/// Matérn covariance at distance `dist ≥ 0`; equals `variance` at 0.
///
/// Half-integer smoothness uses the closed forms; ν = 2 uses
/// `K₂(x) = K₀(x) + 2K₁(x)/x` over polynomial approximations of K₀, K₁.
pub fn matern_cov(k: &MaternKernel, dist: f64) -> f64 {
    if dist == 0.0 {
        return k.variance;
    }
    let s = dist / k.range;
    match k.smoothness {
        MaternSmoothness::Half => k.variance * (-s).exp(),
        MaternSmoothness::ThreeHalves => {
            let a = 3.0f64.sqrt() * s;
            k.variance * (1.0 + a) * (-a).exp()
        }
        MaternSmoothness::FiveHalves => {
            let a = 5.0f64.sqrt() * s;
            k.variance * (1.0 + a + a * a / 3.0) * (-a).exp()
        }
        MaternSmoothness::Two => {
            // 2^{1-ν}/Γ(ν) = 1/2 for ν = 2, and √(2ν) = 2
            let x = 2.0 * s;
            let k2 = bessel::k0(x) + 2.0 * bessel::k1(x) / x;
            k.variance * 0.5 * x * x * k2
        }
    }
}

/// Gram matrix of the SE kernel over a squared-distance matrix, plus
/// `jitter·I`, verified Cholesky-factorizable (escalating through the
/// jitter ladder if needed).
pub fn gram_se(k: &SeKernel, sq_dists: &DMatrix<f64>, jitter: f64) -> Result<SpdFactor> {
    gram_with(|d| se_cov(k, d), sq_dists, jitter)
}

/// Gram matrix of the derivative-process kernel over squared distances.
pub fn gram_dse(k: &SeKernel, sq_dists: &DMatrix<f64>, jitter: f64) -> Result<SpdFactor> {
    gram_with(|d| dse_cov(k, d), sq_dists, jitter)
}

/// Gram matrix of the Matérn kernel over a (plain) distance matrix.
pub fn gram_matern(k: &MaternKernel, dists: &DMatrix<f64>, jitter: f64) -> Result<SpdFactor> {
    gram_with(|d| matern_cov(k, d), dists, jitter)
}

fn gram_with<F: Fn(f64) -> f64>(
    eval: F,
    dists: &DMatrix<f64>,
    jitter: f64,
) -> Result<SpdFactor> {
    let n = dists.nrows();
    if dists.ncols() != n {
        return Err(Error::Domain("distance matrix must be square".into()));
    }
    if jitter < 0.0 || !jitter.is_finite() {
        return Err(Error::Domain(format!("jitter must be nonnegative, got {jitter}")));
    }
    for i in 0..n {
        if dists[(i, i)] != 0.0 {
            return Err(Error::Domain("distance matrix must have zero diagonal".into()));
        }
        for j in (i + 1)..n {
            if dists[(i, j)] != dists[(j, i)] {
                return Err(Error::Domain("distance matrix must be symmetric".into()));
            }
        }
    }
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        g[(i, i)] = eval(0.0) + jitter;
        for j in (i + 1)..n {
            let v = eval(dists[(i, j)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    SpdFactor::new(g)
}

/// Modified Bessel functions of the second kind, K₀ and K₁, via the
/// Abramowitz & Stegun polynomial approximations (9.8.1–9.8.8), absolute
/// error below 2e-7.
pub mod bessel {
    fn i0(x: f64) -> f64 {
        let t = x / 3.75;
        let t2 = t * t;
        1.0 + t2
            * (3.5156229
                + t2 * (3.0899424
                    + t2 * (1.2067492 + t2 * (0.2659732 + t2 * (0.0360768 + t2 * 0.0045813)))))
    }

    fn i1(x: f64) -> f64 {
        let t = x / 3.75;
        let t2 = t * t;
        x * (0.5
            + t2 * (0.87890594
                + t2 * (0.51498869
                    + t2 * (0.15084934
                        + t2 * (0.02658733 + t2 * (0.00301532 + t2 * 0.00032411))))))
    }

    pub fn k0(x: f64) -> f64 {
        assert!(x > 0.0, "K0 requires x > 0");
        if x <= 2.0 {
            let y = x * x / 4.0;
            -(x / 2.0).ln() * i0(x)
                + (-0.57721566
                    + y * (0.42278420
                        + y * (0.23069756
                            + y * (0.03488590
                                + y * (0.00262698 + y * (0.00010750 + y * 0.00000740))))))
        } else {
            let y = 2.0 / x;
            (-x).exp() / x.sqrt()
                * (1.25331414
                    + y * (-0.07832358
                        + y * (0.02189568
                            + y * (-0.01062446
                                + y * (0.00587872 + y * (-0.00251540 + y * 0.00053208))))))
        }
    }

    pub fn k1(x: f64) -> f64 {
        assert!(x > 0.0, "K1 requires x > 0");
        if x <= 2.0 {
            let y = x * x / 4.0;
            (x / 2.0).ln() * i1(x)
                + (1.0
                    + y * (0.15443144
                        + y * (-0.67278579
                            + y * (-0.18156897
                                + y * (-0.01919402 + y * (-0.00110404 + y * (-0.00004686)))))))
                    / x
        } else {
            let y = 2.0 / x;
            (-x).exp() / x.sqrt()
                * (1.25331414
                    + y * (0.23498619
                        + y * (-0.03655620
                            + y * (0.01504268
                                + y * (-0.00780353 + y * (0.00325614 + y * (-0.00068245)))))))
        }
    }
}
