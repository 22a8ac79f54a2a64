//! Projected coordinates, pairwise distances, and the location-dependent
//! mass term `M_s`.
//!
//! `M_s = exp(c · max{ ||s² − u²||² : u ∈ S })` where `v²` squares each
//! coordinate. The compact set `S` is realized as the finite set of all
//! locations in play (training plus prediction sites); when a bounding box is
//! known, [`mass_rectangle`] evaluates the same maximum in closed form.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A projected planar location (dimensionless coordinates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub s1: f64,
    pub s2: f64,
}

impl Location {
    pub fn new(s1: f64, s2: f64) -> Result<Self> {
        if !s1.is_finite() || !s2.is_finite() {
            return Err(Error::Domain(format!(
                "location coordinates must be finite, got ({s1}, {s2})"
            )));
        }
        Ok(Location { s1, s2 })
    }

    pub fn sq_dist(&self, other: &Location) -> f64 {
        let d1 = self.s1 - other.s1;
        let d2 = self.s2 - other.s2;
        d1 * d1 + d2 * d2
    }
}

/// An ordered, duplicate-free set of locations together with the mass
/// scaling constant `c`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocationSet {
    points: Vec<Location>,
    scale_c: f64,
}

impl LocationSet {
    /// `scale_c` is the `c` in `M_s = exp(c·max ...)`; the sea-surface
    /// analysis in the source protocol uses 0.25, the default is 1.
    pub fn new(points: Vec<Location>, scale_c: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("location set must be nonempty".into()));
        }
        if !(scale_c > 0.0 && scale_c.is_finite()) {
            return Err(Error::Domain(format!(
                "mass scale c must be positive and finite, got {scale_c}"
            )));
        }
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                if points[i].sq_dist(&points[j]) == 0.0 {
                    return Err(Error::Domain(format!(
                        "duplicate locations at indices {i} and {j}"
                    )));
                }
            }
        }
        Ok(LocationSet { points, scale_c })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // nonempty by construction
    }

    pub fn points(&self) -> &[Location] {
        &self.points
    }

    pub fn scale_c(&self) -> f64 {
        self.scale_c
    }

    /// `M_s` for every member location, over this set.
    pub fn masses(&self) -> Vec<f64> {
        self.points.iter().map(|s| mass(s, self)).collect()
    }

    /// A new set containing `self`'s points followed by `extra`, keeping
    /// `scale_c`. Used to freeze one consistent mass field over training
    /// plus prediction sites.
    pub fn union(&self, extra: &[Location]) -> Result<LocationSet> {
        let mut pts = self.points.clone();
        pts.extend_from_slice(extra);
        LocationSet::new(pts, self.scale_c)
    }
}

/// Lambert projection of (longitude, latitude) in degrees onto the plane:
/// with φ = longitude and ψ = latitude in radians,
/// `s1 = 2 sin(π/4 − ψ/2) sin φ`, `s2 = −2 sin(π/4 − ψ/2) cos φ`.
pub fn lambert_project(lon_deg: f64, lat_deg: f64) -> Result<Location> {
    if !(-90.0..=90.0).contains(&lat_deg) || lat_deg.is_nan() {
        return Err(Error::Domain(format!(
            "latitude must lie in [-90, 90] degrees, got {lat_deg}"
        )));
    }
    if !(-180.0..360.0).contains(&lon_deg) || lon_deg.is_nan() {
        return Err(Error::Domain(format!(
            "longitude must lie in [-180, 360) degrees, got {lon_deg}"
        )));
    }
    let phi = lon_deg.to_radians();
    let psi = lat_deg.to_radians();
    let r = 2.0 * (std::f64::consts::FRAC_PI_4 - psi / 2.0).sin();
    Location::new(r * phi.sin(), -r * phi.cos())
}

fn sq_coords(s: &Location) -> (f64, f64) {
    (s.s1 * s.s1, s.s2 * s.s2)
}

/// `M_s` over the finite point set: `exp(c · max_u ||s² − u²||²)`.
/// Always ≥ 1 because the maximum is nonnegative.
pub fn mass(s: &Location, locs: &LocationSet) -> f64 {
    let (a1, a2) = sq_coords(s);
    let mut best = 0.0f64;
    for u in locs.points() {
        let (b1, b2) = sq_coords(u);
        let d = (a1 - b1) * (a1 - b1) + (a2 - b2) * (a2 - b2);
        if d > best {
            best = d;
        }
    }
    (locs.scale_c() * best).exp()
}

/// Exact maximum of `(s² − u²)²` over `u` in `[lo, hi]` for one coordinate.
///
/// `u²` sweeps an interval `[qmin, qmax]` (which starts at 0 whenever the
/// interval contains 0), and `(s² − q)²` is convex in `q`, so the maximum
/// sits at one of the two endpoints.
fn coord_max(s: f64, lo: f64, hi: f64) -> f64 {
    let (qmin, qmax) = if lo <= 0.0 && 0.0 <= hi {
        (0.0, (lo * lo).max(hi * hi))
    } else if lo > 0.0 {
        (lo * lo, hi * hi)
    } else {
        (hi * hi, lo * lo)
    };
    let s2 = s * s;
    let at_min = (s2 - qmin) * (s2 - qmin);
    let at_max = (s2 - qmax) * (s2 - qmax);
    at_min.max(at_max)
}

/// `M_s` when the compact set is the rectangle `[a1,b1]×[a2,b2]`, evaluated
/// by the per-coordinate closed form (sum of the two coordinate maxima,
/// scaled by `c` and exponentiated).
pub fn mass_rectangle(s: &Location, a1: f64, b1: f64, a2: f64, b2: f64, c: f64) -> Result<f64> {
    if !(a1 < b1) || !(a2 < b2) {
        return Err(Error::Domain(format!(
            "degenerate rectangle [{a1},{b1}]x[{a2},{b2}]"
        )));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::Domain(format!(
            "mass scale c must be nonnegative and finite, got {c}"
        )));
    }
    if s.s1 < a1 || s.s1 > b1 || s.s2 < a2 || s.s2 > b2 {
        return Err(Error::Domain(format!(
            "point ({}, {}) lies outside the rectangle [{a1},{b1}]x[{a2},{b2}]",
            s.s1, s.s2
        )));
    }
    let m = coord_max(s.s1, a1, b1) + coord_max(s.s2, a2, b2);
    Ok((c * m).exp())
}

/// Symmetric matrix of squared Euclidean distances with zero diagonal.
pub fn sq_distance_matrix(locs: &LocationSet) -> DMatrix<f64> {
    let n = locs.len();
    let pts = locs.points();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = pts[i].sq_dist(&pts[j]);
            m[(i, j)] = d;
            m[(j, i)] = d;
        }
    }
    m
}
