//! Poincaré ball geometry with curvature `c`.
//!
//! The ball is `{x : c‖x‖² < 1}`. Every constructed [`PoincarePoint`] is kept
//! inside the guard radius `(1 - boundary_eps) / √c`, so conformal factors
//! and `atanh` arguments stay finite.
//!
//! Two distances live here:
//!
//! * [`BallConfig::distance`]: the geodesic distance `(2/√c)·atanh(√c‖−u ⊕ v‖)`.
//! * [`BallConfig::inner_distance`]: the same expression with factor `1/√c`.
//!   It satisfies `‖log₀(u)‖ = inner_distance(0, u)` and is the distance used
//!   by the geodesic inner product [`BallConfig::poincare_inner`].
//!
//! This module is a pure `f64` reference. The training path re-expresses the
//! same operations over the autodiff tape (see `model::space`).

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Upper clamp for `atanh` arguments.
pub const ATANH_CLAMP: f64 = 1.0 - 1e-12;

/// Vectors shorter than this are treated as zero in exp/log maps.
pub const TINY_NORM: f64 = 1e-15;

pub const DEFAULT_BOUNDARY_EPS: f64 = 1e-5;

/// Curvature, boundary guard and dimension of a Poincaré ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallConfig {
    c: f64,
    boundary_eps: f64,
    dim: usize,
}

/// A point strictly inside the ball.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincarePoint {
    coords: Vec<f64>,
}

/// An unconstrained vector in a tangent space.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
}

impl PoincarePoint {
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }

    /// Additive inverse `−u`, which is also a ball point.
    pub fn neg(&self) -> PoincarePoint {
        PoincarePoint {
            coords: self.coords.iter().map(|x| -x).collect(),
        }
    }
}

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("tangent vector has non-finite entries".into()));
        }
        Ok(TangentVector { coords })
    }

    pub fn zeros(dim: usize) -> Self {
        TangentVector {
            coords: vec![0.0; dim],
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }

    pub fn dot(&self, other: &TangentVector) -> f64 {
        dot(&self.coords, &other.coords)
    }
}

impl BallConfig {
    pub fn new(c: f64, dim: usize) -> Result<Self> {
        Self::with_boundary_eps(c, dim, DEFAULT_BOUNDARY_EPS)
    }

    pub fn with_boundary_eps(c: f64, dim: usize, boundary_eps: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Domain(format!("curvature must be positive, got {c}")));
        }
        if !(boundary_eps > 0.0 && boundary_eps < 1.0) {
            return Err(Error::Domain(format!(
                "boundary_eps must lie in (0, 1), got {boundary_eps}"
            )));
        }
        if dim == 0 {
            return Err(Error::Domain("dimension must be at least 1".into()));
        }
        Ok(BallConfig {
            c,
            boundary_eps,
            dim,
        })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn boundary_eps(&self) -> f64 {
        self.boundary_eps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sqrt_c(&self) -> f64 {
        self.c.sqrt()
    }

    /// Euclidean radius of the guard sphere, `(1 − eps)/√c`.
    pub fn max_norm(&self) -> f64 {
        (1.0 - self.boundary_eps) / self.sqrt_c()
    }

    pub fn origin(&self) -> PoincarePoint {
        PoincarePoint {
            coords: vec![0.0; self.dim],
        }
    }

    /// Builds a point from coordinates that must already lie strictly inside
    /// the ball. Points between the guard sphere and the boundary are pulled
    /// onto the guard sphere.
    pub fn point(&self, coords: Vec<f64>) -> Result<PoincarePoint> {
        self.check_dim(coords.len())?;
        check_finite(&coords)?;
        if self.c * dot(&coords, &coords) >= 1.0 {
            return Err(Error::Domain(format!(
                "point with norm {} lies outside the ball of radius {}",
                norm(&coords),
                1.0 / self.sqrt_c()
            )));
        }
        Ok(self.guard(coords))
    }

    pub fn tangent(&self, coords: Vec<f64>) -> Result<TangentVector> {
        self.check_dim(coords.len())?;
        TangentVector::new(coords)
    }

    /// Rescales `x` radially onto the guard sphere when it lies outside it;
    /// otherwise returns it unchanged.
    pub fn project_to_ball(&self, x: &[f64]) -> Result<PoincarePoint> {
        check_finite(x)?;
        Ok(self.guard(x.to_vec()))
    }

    fn guard(&self, mut coords: Vec<f64>) -> PoincarePoint {
        let limit = 1.0 - self.boundary_eps;
        let sq = dot(&coords, &coords);
        if self.c * sq > limit * limit {
            let scale = self.max_norm() / sq.sqrt();
            coords.iter_mut().for_each(|x| *x *= scale);
        }
        PoincarePoint { coords }
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::shape(format!(
                "expected dimension {}, got {got}",
                self.dim
            )));
        }
        Ok(())
    }

    fn check_pair(&self, u: &PoincarePoint, v: &PoincarePoint) -> Result<()> {
        self.check_dim(u.dim())?;
        self.check_dim(v.dim())
    }

    /// Möbius addition `u ⊕_c v`.
    pub fn mobius_add(&self, u: &PoincarePoint, v: &PoincarePoint) -> Result<PoincarePoint> {
        self.check_pair(u, v)?;
        let sum = mobius_add_raw(self.c, &u.coords, &v.coords);
        check_finite(&sum)?;
        Ok(self.guard(sum))
    }

    /// `λ_u = 2 / (1 − c‖u‖²)`.
    pub fn conformal_factor(&self, u: &PoincarePoint) -> f64 {
        2.0 / (1.0 - self.c * dot(&u.coords, &u.coords))
    }

    pub fn exp_map(&self, base: &PoincarePoint, x: &TangentVector) -> Result<PoincarePoint> {
        self.check_dim(base.dim())?;
        self.check_dim(x.dim())?;
        let n = x.norm();
        if n < TINY_NORM {
            return Ok(base.clone());
        }
        let sc = self.sqrt_c();
        let scale = (sc * self.conformal_factor(base) * n / 2.0).tanh() / (sc * n);
        let step: Vec<f64> = x.coords.iter().map(|xi| xi * scale).collect();
        let out = mobius_add_raw(self.c, &base.coords, &step);
        check_finite(&out)?;
        Ok(self.guard(out))
    }

    /// Exponential map at the origin.
    pub fn exp0(&self, x: &TangentVector) -> Result<PoincarePoint> {
        let out = exp0_raw(self.sqrt_c(), &x.coords);
        check_finite(&out)?;
        Ok(self.guard(out))
    }

    pub fn log_map(&self, base: &PoincarePoint, v: &PoincarePoint) -> Result<TangentVector> {
        self.check_pair(base, v)?;
        let w = mobius_add_raw(self.c, &base.neg().coords, &v.coords);
        let n = norm(&w);
        if n < TINY_NORM {
            return Ok(TangentVector::zeros(self.dim));
        }
        let sc = self.sqrt_c();
        let scale = 2.0 / (sc * self.conformal_factor(base)) * clamped_atanh(sc * n) / n;
        TangentVector::new(w.into_iter().map(|x| x * scale).collect())
    }

    /// Logarithmic map at the origin.
    pub fn log0(&self, v: &PoincarePoint) -> TangentVector {
        TangentVector {
            coords: log0_raw(self.sqrt_c(), &v.coords),
        }
    }

    /// Geodesic distance `(2/√c)·atanh(√c‖−u ⊕ v‖)`.
    pub fn distance(&self, u: &PoincarePoint, v: &PoincarePoint) -> Result<f64> {
        Ok(2.0 * self.inner_distance(u, v)?)
    }

    /// Coefficient-free distance `(1/√c)·atanh(√c‖−u ⊕ v‖)`.
    pub fn inner_distance(&self, u: &PoincarePoint, v: &PoincarePoint) -> Result<f64> {
        self.check_pair(u, v)?;
        let w = mobius_add_raw(self.c, &u.neg().coords, &v.coords);
        let sc = self.sqrt_c();
        Ok(clamped_atanh(sc * norm(&w)) / sc)
    }

    /// Möbius matrix-vector product `exp₀(A · log₀(u))`. The result lives in
    /// a ball of dimension `a.nrows()` with the same curvature.
    pub fn mobius_matvec(&self, a: &Array2<f64>, u: &PoincarePoint) -> Result<PoincarePoint> {
        self.check_dim(u.dim())?;
        if a.ncols() != u.dim() {
            return Err(Error::shape(format!(
                "matrix has {} columns but the point has dimension {}",
                a.ncols(),
                u.dim()
            )));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("matrix has non-finite entries".into()));
        }
        let t = log0_raw(self.sqrt_c(), &u.coords);
        let y = a.dot(&Array1::from(t)).to_vec();
        let out = exp0_raw(self.sqrt_c(), &y);
        check_finite(&out)?;
        Ok(self.guard(out))
    }

    /// Two-stage inner product `⟨log₀(u), log₀(v)⟩`.
    pub fn projected_inner(&self, u: &PoincarePoint, v: &PoincarePoint) -> Result<f64> {
        self.check_pair(u, v)?;
        Ok(self.log0(u).dot(&self.log0(v)))
    }

    /// Geodesic inner product `½(d²(0,u) + d²(0,v) − d²(u,v))` with `d` the
    /// coefficient-free distance. Never exceeds [`Self::projected_inner`].
    pub fn poincare_inner(&self, u: &PoincarePoint, v: &PoincarePoint) -> Result<f64> {
        self.check_pair(u, v)?;
        let origin = self.origin();
        let du = self.inner_distance(&origin, u)?;
        let dv = self.inner_distance(&origin, v)?;
        let duv = self.inner_distance(u, v)?;
        Ok(0.5 * (du * du + dv * dv - duv * duv))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn clamped_atanh(x: f64) -> f64 {
    x.clamp(0.0, ATANH_CLAMP).atanh()
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain("non-finite coordinates".into()))
    }
}

fn mobius_add_raw(c: f64, u: &[f64], v: &[f64]) -> Vec<f64> {
    let uv = dot(u, v);
    let uu = dot(u, u);
    let vv = dot(v, v);
    let a = 1.0 + 2.0 * c * uv + c * vv;
    let b = 1.0 - c * uu;
    let den = 1.0 + 2.0 * c * uv + c * c * uu * vv;
    u.iter().zip(v).map(|(x, y)| (a * x + b * y) / den).collect()
}

fn exp0_raw(sqrt_c: f64, x: &[f64]) -> Vec<f64> {
    let n = norm(x);
    if n < TINY_NORM {
        return vec![0.0; x.len()];
    }
    let scale = (sqrt_c * n).tanh() / (sqrt_c * n);
    x.iter().map(|v| v * scale).collect()
}

fn log0_raw(sqrt_c: f64, v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n < TINY_NORM {
        return vec![0.0; v.len()];
    }
    let scale = clamped_atanh(sqrt_c * n) / (sqrt_c * n);
    v.iter().map(|x| x * scale).collect()
}
