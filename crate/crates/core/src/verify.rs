//! Randomised property battery for the ball geometry.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::geometry::{BallConfig, PoincarePoint};

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
}

impl PropertyCheck {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            max_error: 0.0,
            tolerance,
        }
    }

    fn record(&mut self, err: f64) {
        // NaN must fail the check, so it is kept rather than ignored by max.
        if err.is_nan() || err > self.max_error {
            self.max_error = err;
        }
    }

    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

/// `D` along `‖u‖ = ‖v‖ = r` at a fixed angle, for the rise-then-fall check.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityWitness {
    pub angle: f64,
    pub near_origin: (f64, f64),
    pub middle: (f64, f64),
    pub near_boundary: (f64, f64),
}

impl MonotonicityWitness {
    pub fn passed(&self) -> bool {
        self.middle.1 > self.near_origin.1 && self.middle.1 > self.near_boundary.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryReport {
    pub c: f64,
    pub dims: Vec<usize>,
    pub samples: usize,
    pub checks: Vec<PropertyCheck>,
    pub witness: MonotonicityWitness,
}

impl GeometryReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(PropertyCheck::passed) && self.witness.passed()
    }
}

impl fmt::Display for GeometryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "geometry battery: c={} dims={:?} samples per dim={}",
            self.c, self.dims, self.samples
        )?;
        for ch in &self.checks {
            writeln!(
                f,
                "{} {:<22} max_error={:.3e} tolerance={:.0e}",
                if ch.passed() { "PASS" } else { "FAIL" },
                ch.name,
                ch.max_error,
                ch.tolerance
            )?;
        }
        let w = &self.witness;
        write!(
            f,
            "{} {:<22} D({})={:.6} D({})={:.6} D({})={:.6}",
            if w.passed() { "PASS" } else { "FAIL" },
            "rise_then_fall",
            w.near_origin.0,
            w.near_origin.1,
            w.middle.0,
            w.middle.1,
            w.near_boundary.0,
            w.near_boundary.1
        )
    }
}

/// Uniform direction with norm uniform in `[0, max_norm)`.
pub fn random_point(ball: &BallConfig, max_norm: f64, rng: &mut impl Rng) -> Result<PoincarePoint> {
    let mut g: Vec<f64> = (0..ball.dim()).map(|_| rng.sample(StandardNormal)).collect();
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = rng.random_range(0.0..max_norm);
    g.iter_mut().for_each(|x| *x *= r / n);
    ball.point(g)
}

/// `D(u, v)` for `‖u‖ = ‖v‖ = r` (in units of `1/√c`) at angle `beta`.
pub fn equal_norm_inner(c: f64, r: f64, beta: f64) -> Result<f64> {
    let ball = BallConfig::new(c, 2)?;
    let s = r / c.sqrt();
    let u = ball.point(vec![s, 0.0])?;
    let v = ball.point(vec![s * beta.cos(), s * beta.sin()])?;
    ball.poincare_inner(&u, &v)
}

pub fn monotonicity_witness(c: f64) -> Result<MonotonicityWitness> {
    let beta = std::f64::consts::FRAC_PI_4;
    let at = |r: f64| equal_norm_inner(c, r, beta).map(|d| (r, d));
    Ok(MonotonicityWitness {
        angle: beta,
        near_origin: at(0.05)?,
        middle: at(0.5)?,
        near_boundary: at(0.98)?,
    })
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Runs every property over `samples` random pairs for each dimension, with
/// point norms below `max_norm / √c`.
pub fn verify_geometry(samples: usize, dims: &[usize], c: f64, max_norm: f64, seed: u64) -> Result<GeometryReport> {
    let mut identity = PropertyCheck::new("projected_identity", 1e-8);
    let mut ordering = PropertyCheck::new("geodesic_le_projected", 1e-10);
    let mut collinear = PropertyCheck::new("collinear_equality", 1e-8);
    let mut gap = PropertyCheck::new("distance_gap", 1e-10);
    let mut norm_id = PropertyCheck::new("log_norm_identity", 1e-9);
    let mut inverse = PropertyCheck::new("exp_log_inverse", 1e-8);
    let mut left_id = PropertyCheck::new("mobius_left_identity", 1e-9);
    let mut cancel = PropertyCheck::new("mobius_cancellation", 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = max_norm / c.sqrt();
    for &d in dims {
        let ball = BallConfig::new(c, d)?;
        let o = ball.origin();
        for _ in 0..samples {
            let u = random_point(&ball, radius, &mut rng)?;
            let v = random_point(&ball, radius, &mut rng)?;
            let (lu, lv) = (ball.log0(&u), ball.log0(&v));
            let (du, dv) = (ball.inner_distance(&o, &u)?, ball.inner_distance(&o, &v)?);
            let p = ball.projected_inner(&u, &v)?;
            let dd = ball.poincare_inner(&u, &v)?;

            let (nu, nv) = (u.norm(), v.norm());
            let cos = if nu > 0.0 && nv > 0.0 {
                u.coords().iter().zip(v.coords()).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)
            } else {
                0.0
            };
            identity.record((p - du * dv * cos).abs());
            ordering.record(dd - p);
            gap.record(diff_norm(lu.coords(), lv.coords()) - ball.inner_distance(&u, &v)?);
            norm_id.record((lu.norm() - du).abs().max((lv.norm() - dv).abs()));

            let t: f64 = rng.random_range(-1.0..1.0);
            let w = ball.point(u.coords().iter().map(|x| x * t).collect())?;
            collinear.record((ball.poincare_inner(&u, &w)? - ball.projected_inner(&u, &w)?).abs());

            let back = ball.exp_map(&u, &ball.log_map(&u, &v)?)?;
            inverse.record(diff_norm(back.coords(), v.coords()));

            left_id.record(diff_norm(ball.mobius_add(&o, &u)?.coords(), u.coords()));
            let uv = ball.mobius_add(&u, &v)?;
            cancel.record(diff_norm(ball.mobius_add(&u.neg(), &uv)?.coords(), v.coords()));
        }
    }
    Ok(GeometryReport {
        c,
        dims: dims.to_vec(),
        samples,
        checks: vec![identity, ordering, collinear, gap, norm_id, inverse, left_id, cancel],
        witness: monotonicity_witness(c)?,
    })
}
