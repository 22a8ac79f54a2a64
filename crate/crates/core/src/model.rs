//! Model covariance assembly and the data / latent / joint log-densities.
//!
//! With masses `M_i` and `D = diag(1/M_i)`:
//!
//! - `Σ_t` has entries `dse(h²_{kℓ}(t)) / (M_k M_ℓ)` where
//!   `h_{kℓ}(t) = |y(s_k,t) − y(s_ℓ,t)|`; the data likelihood is
//!   `∏_t N(y_t; μ_{t−1}, (σ²/4) Σ_{t−1})` with
//!   `μ_{t−1} = β y_{t−1} + α D x_{t−1}`.
//! - `Ω_t = α²Σ'_{t−1,t−1} + αΣ'_{t−1,t} + αΣ'_{t,t−1} + Σ'_{t,t}` built from
//!   the unscaled (mass-free) derivative-kernel blocks; the latent likelihood
//!   is `∏_t N(x_t; α²x_{t−1}, (σ²/4) Ω_t)`.
//! - `Δ₀`, `Ω₀` are unit-variance SE Grams in η₂ and η₁; the initial laws are
//!   `y₀ ~ N(0, σ²_θ Δ₀)` and `x₀ ~ N(0, σ²_p Ω₀)`.
//!
//! σ² is kept **outside** the element formulas: `Σ_t`, `Ω_t` are built
//! without it and every density applies the `(σ²/4)` factor at evaluation
//! and sampling time.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sq_distance_matrix, LocationSet};
use crate::kernels::{dse_cov, se_cov, SeKernel};
use crate::linalg::SpdFactor;

/// The eight model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub alpha: f64,
    pub beta: f64,
    pub sigma2: f64,
    pub sigma2_theta: f64,
    pub sigma2_p: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
}

impl ParamVector {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        alpha: f64,
        beta: f64,
        sigma2: f64,
        sigma2_theta: f64,
        sigma2_p: f64,
        eta1: f64,
        eta2: f64,
        eta3: f64,
    ) -> Result<Self> {
        let p = ParamVector {
            alpha,
            beta,
            sigma2,
            sigma2_theta,
            sigma2_p,
            eta1,
            eta2,
            eta3,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha.abs() < 1.0) {
            return Err(Error::Domain(format!("|alpha| must be < 1, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta.abs() < 1.0) {
            return Err(Error::Domain(format!("|beta| must be < 1, got {}", self.beta)));
        }
        for (name, v) in [
            ("sigma2", self.sigma2),
            ("sigma2_theta", self.sigma2_theta),
            ("sigma2_p", self.sigma2_p),
            ("eta1", self.eta1),
            ("eta2", self.eta2),
            ("eta3", self.eta3),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Parameter names in the fixed serialization order.
    pub const NAMES: [&'static str; 8] = [
        "alpha",
        "beta",
        "sigma2",
        "sigma2_theta",
        "sigma2_p",
        "eta1",
        "eta2",
        "eta3",
    ];

    pub fn to_array(&self) -> [f64; 8] {
        [
            self.alpha,
            self.beta,
            self.sigma2,
            self.sigma2_theta,
            self.sigma2_p,
            self.eta1,
            self.eta2,
            self.eta3,
        ]
    }
}

/// A spatio-temporal dataset: `y` (and optionally `x`) as `(T+1)×n`
/// matrices whose row `t` holds the field at time step `t`.
#[derive(Debug, Clone)]
pub struct StDataset {
    pub locs: LocationSet,
    pub y: DMatrix<f64>,
    pub x: Option<DMatrix<f64>>,
    /// Leap-frog step; inference assumes 1.
    pub dt: f64,
}

impl StDataset {
    pub fn new(
        locs: LocationSet,
        y: DMatrix<f64>,
        x: Option<DMatrix<f64>>,
        dt: f64,
    ) -> Result<Self> {
        if y.ncols() != locs.len() {
            return Err(Error::Domain(format!(
                "y has {} columns but there are {} locations",
                y.ncols(),
                locs.len()
            )));
        }
        if y.nrows() < 2 {
            return Err(Error::Domain("need at least two time rows (T >= 1)".into()));
        }
        if let Some(x) = &x {
            if x.shape() != y.shape() {
                return Err(Error::Domain(format!(
                    "x shape {:?} differs from y shape {:?}",
                    x.shape(),
                    y.shape()
                )));
            }
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        Ok(StDataset { locs, y, x, dt })
    }

    /// Number of transitions T (rows are t = 0..T).
    pub fn n_steps(&self) -> usize {
        self.y.nrows() - 1
    }

    pub fn n_locs(&self) -> usize {
        self.locs.len()
    }

    pub fn latent(&self) -> Result<&DMatrix<f64>> {
        self.x
            .as_ref()
            .ok_or_else(|| Error::Usage("dataset has no latent matrix x".into()))
    }
}

/// `μ = β·y + α·x/M`, componentwise.
pub fn mu_t(
    y_t: &DVector<f64>,
    x_t: &DVector<f64>,
    p: &ParamVector,
    masses: &[f64],
) -> DVector<f64> {
    DVector::from_fn(y_t.len(), |i, _| {
        p.beta * y_t[i] + p.alpha * x_t[i] / masses[i]
    })
}

fn unit_se(eta3: f64) -> SeKernel {
    // element formulas carry no σ²; unit variance here
    SeKernel::new(1.0, eta3).expect("eta3 validated upstream")
}

/// Unscaled within-time derivative-kernel block: entry (k,ℓ) is
/// `dse((y_k − y_ℓ)²)` with unit variance.
pub fn build_sigma_raw(y_t: &DVector<f64>, eta3: f64) -> DMatrix<f64> {
    let k = unit_se(eta3);
    let n = y_t.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = dse_cov(&k, 0.0);
        for j in (i + 1)..n {
            let h = y_t[i] - y_t[j];
            let v = dse_cov(&k, h * h);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Unscaled cross-time block: entry (i,k) is `dse(ℓ²_{ik})` with
/// `ℓ_{ik} = |y_prev_i − y_curr_k|`. Not symmetric in general.
pub fn build_cross_raw(y_prev: &DVector<f64>, y_curr: &DVector<f64>, eta3: f64) -> DMatrix<f64> {
    let k = unit_se(eta3);
    let n = y_prev.len();
    DMatrix::from_fn(n, n, |i, j| {
        let l = y_prev[i] - y_curr[j];
        dse_cov(&k, l * l)
    })
}

/// Mass-scaled `Σ_t`: `build_sigma_raw / (M_k M_ℓ)`.
pub fn build_sigma(y_t: &DVector<f64>, p: &ParamVector, masses: &[f64]) -> DMatrix<f64> {
    let mut m = build_sigma_raw(y_t, p.eta3);
    let n = y_t.len();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] /= masses[i] * masses[j];
        }
    }
    m
}

/// `Ω_t` from the four unscaled blocks; carries no mass scaling.
pub fn build_omega(y_prev: &DVector<f64>, y_curr: &DVector<f64>, p: &ParamVector) -> DMatrix<f64> {
    let a = build_sigma_raw(y_prev, p.eta3);
    let c = build_sigma_raw(y_curr, p.eta3);
    let b = build_cross_raw(y_prev, y_curr, p.eta3);
    omega_from_blocks(&a, &b, &c, p.alpha)
}

/// `α²·prev + α·(cross + crossᵀ) + curr`
pub fn omega_from_blocks(
    prev: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    curr: &DMatrix<f64>,
    alpha: f64,
) -> DMatrix<f64> {
    let mut m = prev * (alpha * alpha);
    m += (cross + cross.transpose()) * alpha;
    m += curr;
    m
}

/// Unit-variance SE Grams: `Δ₀` in η₂ and `Ω₀` in η₁, as matrices.
pub fn build_init_covs(locs: &LocationSet, p: &ParamVector) -> (DMatrix<f64>, DMatrix<f64>) {
    let sq = sq_distance_matrix(locs);
    let k_delta = SeKernel::new(1.0, p.eta2).expect("validated");
    let k_omega = SeKernel::new(1.0, p.eta1).expect("validated");
    let n = locs.len();
    let mut delta0 = DMatrix::zeros(n, n);
    let mut omega0 = DMatrix::zeros(n, n);
    for i in 0..n {
        delta0[(i, i)] = 1.0;
        omega0[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let d = se_cov(&k_delta, sq[(i, j)]);
            let o = se_cov(&k_omega, sq[(i, j)]);
            delta0[(i, j)] = d;
            delta0[(j, i)] = d;
            omega0[(i, j)] = o;
            omega0[(j, i)] = o;
        }
    }
    (delta0, omega0)
}

/// Per-time-step covariance factors for a fixed `(y, θ, masses)`.
#[derive(Debug, Clone)]
pub struct CovBundle {
    /// Σ₀ .. Σ_{T−1} (mass-scaled)
    pub sigma: Vec<SpdFactor>,
    /// Ω₁ .. Ω_T (index 0 holds Ω₁)
    pub omega: Vec<SpdFactor>,
    pub delta0: SpdFactor,
    pub omega0: SpdFactor,
}

impl CovBundle {
    pub fn build(d: &StDataset, p: &ParamVector, masses: &[f64]) -> Result<Self> {
        let t_steps = d.n_steps();
        let mut sigma = Vec::with_capacity(t_steps);
        let mut omega = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            let y_t = d.y.row(t).transpose();
            let y_next = d.y.row(t + 1).transpose();
            sigma.push(SpdFactor::new(build_sigma(&y_t, p, masses))?);
            omega.push(SpdFactor::new(build_omega(&y_t, &y_next, p))?);
        }
        let (delta0, omega0) = build_init_covs(&d.locs, p);
        Ok(CovBundle {
            sigma,
            omega,
            delta0: SpdFactor::new(delta0)?,
            omega0: SpdFactor::new(omega0)?,
        })
    }
}

/// `Σ_{t=1..T} log N(y_t; μ_{t−1}, (σ²/4)Σ_{t−1})`, normalizing constants
/// included. Requires `d.x`.
pub fn loglik_data(d: &StDataset, p: &ParamVector, masses: &[f64]) -> Result<f64> {
    let x = d.latent()?;
    let scale = p.sigma2 / 4.0;
    let mut ll = 0.0;
    for t in 0..d.n_steps() {
        let y_t = d.y.row(t).transpose();
        let x_t = x.row(t).transpose();
        let y_next = d.y.row(t + 1).transpose();
        let mu = mu_t(&y_t, &x_t, p, masses);
        let factor = SpdFactor::new(build_sigma(&y_t, p, masses))?;
        ll += factor.mvn_logpdf(&y_next, &mu, scale);
    }
    Ok(ll)
}

/// `Σ_{t=1..T} log N(x_t; α²x_{t−1}, (σ²/4)Ω_t)`. Requires `d.x`.
pub fn loglik_latent(d: &StDataset, p: &ParamVector) -> Result<f64> {
    let x = d.latent()?;
    let scale = p.sigma2 / 4.0;
    let mut ll = 0.0;
    for t in 0..d.n_steps() {
        let y_t = d.y.row(t).transpose();
        let y_next = d.y.row(t + 1).transpose();
        let x_t = x.row(t).transpose();
        let x_next = x.row(t + 1).transpose();
        let factor = SpdFactor::new(build_omega(&y_t, &y_next, p))?;
        let mean = x_t * (p.alpha * p.alpha);
        ll += factor.mvn_logpdf(&x_next, &mean, scale);
    }
    Ok(ll)
}

/// Joint log-density of `(y₀..y_T, x₀..x_T)` given θ:
/// data and latent terms plus the two initial Gaussian log-priors.
pub fn log_joint(d: &StDataset, p: &ParamVector) -> Result<f64> {
    let x = d.latent()?;
    let masses = d.locs.masses();
    let (delta0, omega0) = build_init_covs(&d.locs, p);
    let delta0 = SpdFactor::new(delta0)?;
    let omega0 = SpdFactor::new(omega0)?;
    let zero = DVector::zeros(d.n_locs());
    let y0 = d.y.row(0).transpose();
    let x0 = x.row(0).transpose();
    Ok(loglik_data(d, p, &masses)?
        + loglik_latent(d, p)?
        + delta0.mvn_logpdf(&y0, &zero, p.sigma2_theta)
        + omega0.mvn_logpdf(&x0, &zero, p.sigma2_p))
}
