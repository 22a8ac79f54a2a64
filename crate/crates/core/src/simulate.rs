//! Forward simulation of the Hamiltonian spatio-temporal process and the
//! two benchmark generators used in the comparison experiments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Location, LocationSet};
use crate::kernels::{gram_matern, MaternKernel, MaternSmoothness};
use crate::linalg::SpdFactor;
use crate::model::{build_init_covs, build_omega, build_sigma, ParamVector, StDataset};
use crate::rng::{
    stream, TAG_ASSIGNMENT, TAG_COEFS, TAG_COMPONENT, TAG_LOCATIONS, TAG_OBS_NOISE, TAG_PATH,
};

/// Spatial domain for sampled locations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    UnitSquare,
    Rectangle { x0: f64, x1: f64, y0: f64, y1: f64 },
}

impl Default for Domain {
    fn default() -> Self {
        Domain::UnitSquare
    }
}

/// Configuration of the Hamiltonian forward simulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub t_steps: usize,
    pub seed: u64,
    pub params: ParamVector,
    pub dt: f64,
    pub domain: Domain,
    /// Mass scaling constant c.
    pub scale_c: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Domain("need at least one location".into()));
        }
        if self.t_steps < 1 {
            return Err(Error::Domain("need at least one time step".into()));
        }
        self.params.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Domain(format!("dt must be positive, got {}", self.dt)));
        }
        if let Domain::Rectangle { x0, x1, y0, y1 } = self.domain {
            if !(x0 < x1 && y0 < y1) {
                return Err(Error::Domain("degenerate domain rectangle".into()));
            }
        }
        Ok(())
    }
}

/// Uniform locations over the domain. Duplicates are astronomically
/// unlikely; redrawn if they do occur.
pub fn sample_locations<R: Rng + ?Sized>(
    n: usize,
    domain: &Domain,
    scale_c: f64,
    rng: &mut R,
) -> Result<LocationSet> {
    let (x0, x1, y0, y1) = match *domain {
        Domain::UnitSquare => (0.0, 1.0, 0.0, 1.0),
        Domain::Rectangle { x0, x1, y0, y1 } => (x0, x1, y0, y1),
    };
    let mut pts: Vec<Location> = Vec::with_capacity(n);
    while pts.len() < n {
        let p = Location::new(
            x0 + (x1 - x0) * rng.random::<f64>(),
            y0 + (y1 - y0) * rng.random::<f64>(),
        )?;
        if pts.iter().all(|q| q.sq_dist(&p) > 0.0) {
            pts.push(p);
        }
    }
    LocationSet::new(pts, scale_c)
}

/// One trajectory of the model at the given locations:
/// `y₀ ~ N(0, σ²_θΔ₀)`, `x₀ ~ N(0, σ²_pΩ₀)`, then for each step
/// `y_t ~ N(μ_{t−1}, δt⁴·(σ²/4)Σ_{t−1})` with
/// `μ_{t−1} = βy_{t−1} + δt·αDx_{t−1}`, and
/// `x_t ~ N(α²x_{t−1}, δt²·(σ²/4)Ω_t)` with `Ω_t` built from `(y_{t−1}, y_t)`.
/// At δt = 1 this is exactly the process targeted by inference.
pub fn simulate_hamiltonian_at<R: Rng + ?Sized>(
    locs: &LocationSet,
    params: &ParamVector,
    t_steps: usize,
    dt: f64,
    init: Option<(DVector<f64>, DVector<f64>)>,
    rng: &mut R,
) -> Result<StDataset> {
    params.validate()?;
    let n = locs.len();
    let masses = locs.masses();
    let (delta0, omega0) = build_init_covs(locs, params);
    let zero = DVector::zeros(n);

    let (y0, x0) = match init {
        Some((y0, x0)) => {
            if y0.len() != n || x0.len() != n {
                return Err(Error::Domain("initial vectors must have length n".into()));
            }
            (y0, x0)
        }
        None => {
            let d0 = SpdFactor::new(delta0)?;
            let o0 = SpdFactor::new(omega0)?;
            let y0 = d0.sample(&zero, params.sigma2_theta, rng);
            let x0 = o0.sample(&zero, params.sigma2_p, rng);
            (y0, x0)
        }
    };

    let mut y = DMatrix::zeros(t_steps + 1, n);
    let mut x = DMatrix::zeros(t_steps + 1, n);
    y.row_mut(0).copy_from(&y0.transpose());
    x.row_mut(0).copy_from(&x0.transpose());

    let noise_scale = params.sigma2 / 4.0;
    for t in 0..t_steps {
        let y_t = y.row(t).transpose();
        let x_t = x.row(t).transpose();
        // mean carries δt on the latent contribution only
        let mut mu = y_t.clone() * params.beta;
        for i in 0..n {
            mu[i] += dt * params.alpha * x_t[i] / masses[i];
        }
        let sigma = SpdFactor::new(build_sigma(&y_t, params, &masses))?;
        let y_next = sigma.sample(&mu, noise_scale * dt.powi(4), rng);

        let omega = SpdFactor::new(build_omega(&y_t, &y_next, params))?;
        let x_mean = x_t * (params.alpha * params.alpha);
        let x_next = omega.sample(&x_mean, noise_scale * dt * dt, rng);

        y.row_mut(t + 1).copy_from(&y_next.transpose());
        x.row_mut(t + 1).copy_from(&x_next.transpose());
    }
    StDataset::new(locs.clone(), y, Some(x), dt)
}

/// Samples locations from the configured domain and simulates one
/// trajectory; bit-reproducible in `(cfg, cfg.seed)`.
pub fn simulate_hamiltonian(cfg: &SimConfig) -> Result<StDataset> {
    cfg.validate()?;
    let mut loc_rng = stream(cfg.seed, &[TAG_LOCATIONS]);
    let locs = sample_locations(cfg.n, &cfg.domain, cfg.scale_c, &mut loc_rng)?;
    let mut path_rng = stream(cfg.seed, &[TAG_PATH]);
    simulate_hamiltonian_at(&locs, &cfg.params, cfg.t_steps, cfg.dt, None, &mut path_rng)
}

/// Mixture-of-three-GPs generator configuration. Defaults are the
/// benchmark values: component means (0, 10, 20), observation noise
/// (1.0, 0.01, 2.0), AR coefficients (−0.75, 0.75, 0.25), Matérn ranges
/// (1, 1.5, 2) and variances (1, 2, 0.2), equal mixing weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gp3Config {
    pub b0: [f64; 3],
    pub sigma2_eps: [f64; 3],
    pub a: [f64; 3],
    pub kappa: [f64; 3],
    pub sigma2: [f64; 3],
    pub mix_p: [f64; 3],
    pub smoothness: MaternSmoothness,
}

impl Default for Gp3Config {
    fn default() -> Self {
        Gp3Config {
            b0: [0.0, 10.0, 20.0],
            sigma2_eps: [1.0, 0.01, 2.0],
            a: [-0.75, 0.75, 0.25],
            kappa: [1.0, 1.5, 2.0],
            sigma2: [1.0, 2.0, 0.2],
            mix_p: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            smoothness: MaternSmoothness::Two,
        }
    }
}

impl Gp3Config {
    pub fn validate(&self) -> Result<()> {
        for j in 0..3 {
            if self.a[j].abs() >= 1.0 {
                return Err(Error::Domain(format!("|a[{j}]| must be < 1")));
            }
            if self.sigma2_eps[j] < 0.0 || self.sigma2[j] <= 0.0 || self.kappa[j] <= 0.0 {
                return Err(Error::Domain(format!("bad component {j} parameters")));
            }
            if self.mix_p[j] < 0.0 {
                return Err(Error::Domain("mixing weights must be nonnegative".into()));
            }
        }
        let total: f64 = self.mix_p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("mixing weights must sum to 1, got {total}")));
        }
        Ok(())
    }
}

/// Mixture of three Gaussian process models over `t_steps` time points.
///
/// Per component `j`: spatial Matérn innovations `ξ_j(·,t) ~ N_n(0, C_j)`
/// drive an AR(1) field `ω_j(s,t) = a_j ω_j(s,t−1) + ξ_j(s,t)` started at 0.
/// Each location draws `u ~ U(0,1)` once and joins the component whose
/// partition of `[0,1]` contains `u`; its observations are
/// `y(s,·) ~ N(b0_j·1 + ω_j(s,·), σ²_{εj} I)` and its latent series is
/// `x(s,t) = ω_j(s,t)`.
///
/// Returned rows are the `t_steps` generated time points, so the model-side
/// `t = 0` is the first generated point.
pub fn gen_gp_mixture3(n: usize, t_steps: usize, cfg: &Gp3Config, seed: u64) -> Result<StDataset> {
    cfg.validate()?;
    if n < 1 || t_steps < 2 {
        return Err(Error::Domain("need n >= 1 and t_steps >= 2".into()));
    }
    let mut loc_rng = stream(seed, &[TAG_LOCATIONS]);
    let locs = sample_locations(n, &Domain::UnitSquare, 1.0, &mut loc_rng)?;
    let dists = crate::geometry::sq_distance_matrix(&locs).map(|d| d.sqrt());

    // per-component AR(1) fields driven by spatial Matérn innovations
    let mut omegas: Vec<DMatrix<f64>> = Vec::with_capacity(3);
    for j in 0..3 {
        let kernel = MaternKernel::new(cfg.sigma2[j], cfg.kappa[j], cfg.smoothness)?;
        let factor = gram_matern(&kernel, &dists, 0.0)?;
        let mut comp_rng = stream(seed, &[TAG_COMPONENT, j as u64]);
        let zero = DVector::zeros(n);
        let mut omega = DMatrix::zeros(t_steps, n);
        let mut prev = DVector::zeros(n);
        for t in 0..t_steps {
            let xi = factor.sample(&zero, 1.0, &mut comp_rng);
            let curr = &prev * cfg.a[j] + xi;
            omega.row_mut(t).copy_from(&curr.transpose());
            prev = curr;
        }
        omegas.push(omega);
    }

    // per-location component assignment by the mix_p partition of [0,1]
    let mut assign_rng = stream(seed, &[TAG_ASSIGNMENT]);
    let cut1 = cfg.mix_p[0];
    let cut2 = cfg.mix_p[0] + cfg.mix_p[1];
    let mut y = DMatrix::zeros(t_steps, n);
    let mut x = DMatrix::zeros(t_steps, n);
    for i in 0..n {
        let u: f64 = assign_rng.random();
        let j = if u < cut1 {
            0
        } else if u < cut2 {
            1
        } else {
            2
        };
        let mut noise_rng = stream(seed, &[TAG_OBS_NOISE, i as u64]);
        let sd = cfg.sigma2_eps[j].sqrt();
        for t in 0..t_steps {
            let w = omegas[j][(t, i)];
            let eps: f64 = noise_rng.sample(StandardNormal);
            y[(t, i)] = cfg.b0[j] + w + sd * eps;
            x[(t, i)] = w;
        }
    }
    StDataset::new(locs, y, Some(x), 1.0)
}

/// General quadratic nonlinear mixture generator configuration.
/// Defaults are the benchmark values: coefficient sd 0.001, mixture
/// threshold 0.6, offset 5, exponential kernel decay 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GqnConfig {
    pub coef_sd: f64,
    pub mix_threshold: f64,
    pub mix_offset: f64,
    pub kernel_decay: f64,
    /// Draw the mixture uniform per location instead of once per dataset.
    pub per_location_u: bool,
}

impl Default for GqnConfig {
    fn default() -> Self {
        GqnConfig {
            coef_sd: 0.001,
            mix_threshold: 0.6,
            mix_offset: 5.0,
            kernel_decay: 1.0,
            per_location_u: false,
        }
    }
}

impl GqnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coef_sd < 0.0 {
            return Err(Error::Domain("coef_sd must be nonnegative".into()));
        }
        if !(0.0 < self.mix_threshold && self.mix_threshold < 1.0) {
            return Err(Error::Domain("mix_threshold must lie in (0,1)".into()));
        }
        if self.kernel_decay <= 0.0 {
            return Err(Error::Domain("kernel_decay must be positive".into()));
        }
        Ok(())
    }
}

const GQN_BLOWUP: f64 = 1e6;

/// Mixture of two general quadratic nonlinear models.
///
/// Latent recursion
/// `X(s_i,t) = Σ_j a_ij X(s_j,t−1) + Σ_j Σ_l b_ijl X(s_j,t−1) X(s_l,t−1)² + η(s_i,t)`
/// with `a_ij, b_ijl ~ N(0, coef_sd²)` and GP fields `φ₁, φ₂, ε, η, X(·,0)`
/// drawn from the exponential kernel `exp(−decay·‖s₁−s₂‖)`. Observations are
/// `y = φ₁ + φ₂·tan(X) + ε`, plus `mix_offset` when the single dataset-wide
/// uniform draw `u` is at or above `mix_threshold` (per-location draws behind
/// the `per_location_u` flag).
///
/// `tan` is evaluated as-is: latent values near π/2 produce large but finite
/// observations and are not clipped. The latent recursion itself errors out
/// if |X| exceeds 1e6, which indicates `coef_sd` is too large for `n`.
pub fn gen_gqn_mixture(n: usize, t_steps: usize, cfg: &GqnConfig, seed: u64) -> Result<StDataset> {
    cfg.validate()?;
    if n < 1 || t_steps < 2 {
        return Err(Error::Domain("need n >= 1 and t_steps >= 2".into()));
    }
    let mut loc_rng = stream(seed, &[TAG_LOCATIONS]);
    let locs = sample_locations(n, &Domain::UnitSquare, 1.0, &mut loc_rng)?;

    // exponential-kernel Gram over plain distances
    let pts = locs.points();
    let mut gram = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            gram[(i, j)] = (-cfg.kernel_decay * pts[i].sq_dist(&pts[j]).sqrt()).exp();
        }
    }
    let factor = SpdFactor::new(gram)?;
    let zero = DVector::zeros(n);

    // quadratic-recursion coefficients
    let mut coef_rng = stream(seed, &[TAG_COEFS]);
    let a = DMatrix::from_fn(n, n, |_, _| {
        cfg.coef_sd * coef_rng.sample::<f64, _>(StandardNormal)
    });
    let b: Vec<DMatrix<f64>> = (0..n)
        .map(|_| {
            DMatrix::from_fn(n, n, |_, _| {
                cfg.coef_sd * coef_rng.sample::<f64, _>(StandardNormal)
            })
        })
        .collect();

    let mut path_rng = stream(seed, &[TAG_PATH]);
    let mut x_prev = factor.sample(&zero, 1.0, &mut path_rng);
    let mut x = DMatrix::zeros(t_steps, n);
    for t in 0..t_steps {
        let eta = factor.sample(&zero, 1.0, &mut path_rng);
        let sq = x_prev.map(|v| v * v);
        let mut x_curr = DVector::zeros(n);
        for i in 0..n {
            let linear = a.row(i).transpose().dot(&x_prev);
            let quad = x_prev.dot(&(&b[i] * &sq));
            x_curr[i] = linear + quad + eta[i];
            if !x_curr[i].is_finite() || x_curr[i].abs() > GQN_BLOWUP {
                return Err(Error::Simulation(format!(
                    "latent recursion exceeded |X| = {GQN_BLOWUP:e} at location {i}, step {t}; \
                     use a smaller coef_sd"
                )));
            }
        }
        x.row_mut(t).copy_from(&x_curr.transpose());
        x_prev = x_curr;
    }

    let mut assign_rng = stream(seed, &[TAG_ASSIGNMENT]);
    let dataset_u: f64 = assign_rng.random();
    let mut obs_rng = stream(seed, &[TAG_OBS_NOISE]);
    let mut y = DMatrix::zeros(t_steps, n);
    let mut offsets = vec![0.0f64; n];
    for (i, off) in offsets.iter_mut().enumerate() {
        let u = if cfg.per_location_u {
            stream(seed, &[TAG_ASSIGNMENT, i as u64 + 1]).random()
        } else {
            dataset_u
        };
        if u >= cfg.mix_threshold {
            *off = cfg.mix_offset;
        }
    }
    for t in 0..t_steps {
        let phi1 = factor.sample(&zero, 1.0, &mut obs_rng);
        let phi2 = factor.sample(&zero, 1.0, &mut obs_rng);
        let eps = factor.sample(&zero, 1.0, &mut obs_rng);
        for i in 0..n {
            y[(t, i)] = offsets[i] + phi1[i] + phi2[i] * x[(t, i)].tan() + eps[i];
        }
    }
    StDataset::new(locs, y, Some(x), 1.0)
}
