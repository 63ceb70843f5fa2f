//! Row-wise ball operations expressed over tape variables.
//!
//! Every method treats each row of its arguments as one vector. In the
//! Euclidean variant the maps collapse to identities and `⊕` to `+`.

use crate::autodiff::Var;
use crate::error::Result;

use super::config::{Inner, ModelConfig, Variant};

#[derive(Debug, Clone, Copy)]
pub struct Space {
    variant: Variant,
    c: f64,
    sqrt_c: f64,
    max_norm: f64,
}

impl Space {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            variant: cfg.variant,
            c: cfg.c,
            sqrt_c: cfg.c.sqrt(),
            max_norm: cfg.max_norm(),
        }
    }

    pub fn is_hyperbolic(&self) -> bool {
        self.variant == Variant::Poincare
    }

    /// Keeps every row inside the guard sphere.
    pub fn guard<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if self.is_hyperbolic() {
            x.project_rows(self.max_norm)
        } else {
            Ok(x)
        }
    }

    pub fn exp0<'t>(&self, v: Var<'t>) -> Result<Var<'t>> {
        if !self.is_hyperbolic() {
            return Ok(v);
        }
        let scale = v.row_norm()?.tanh_ratio(self.sqrt_c)?;
        self.guard(v.mul(scale)?)
    }

    pub fn log0<'t>(&self, y: Var<'t>) -> Result<Var<'t>> {
        if !self.is_hyperbolic() {
            return Ok(y);
        }
        let scale = y.row_norm()?.atanh_ratio(self.sqrt_c)?;
        y.mul(scale)
    }

    /// Möbius addition `u ⊕ v`, guarded.
    pub fn mobius_add<'t>(&self, u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        if !self.is_hyperbolic() {
            return u.add(v);
        }
        let c = self.c;
        let uv = u.row_dot(v)?;
        let uu = u.square()?.row_sum()?;
        let vv = v.square()?.row_sum()?;
        let two_c_uv = uv.scale(2.0 * c)?;
        let a = two_c_uv.add(vv.scale(c)?)?.add_scalar(1.0)?;
        let b = uu.scale(-c)?.add_scalar(1.0)?;
        let den = two_c_uv.add(uu.mul(vv)?.scale(c * c)?)?.add_scalar(1.0)?;
        let num = u.mul(a)?.add(v.mul(b)?)?;
        self.guard(num.div(den)?)
    }

    /// `exp_x(v)`, using `exp_x(v) = x ⊕ exp0(λ_x v / 2)`.
    pub fn exp_at<'t>(&self, x: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        if !self.is_hyperbolic() {
            return x.add(v);
        }
        let half_lambda = x.square()?.row_sum()?.scale(-self.c)?.add_scalar(1.0)?;
        let step = self.exp0(v.div(half_lambda)?)?;
        self.mobius_add(x, step)
    }

    /// `log_x(y)`, using `log_x(y) = (2/λ_x) log0(−x ⊕ y)`.
    pub fn log_at<'t>(&self, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        if !self.is_hyperbolic() {
            return y.sub(x);
        }
        let inv_half_lambda = x.square()?.row_sum()?.scale(-self.c)?.add_scalar(1.0)?;
        let w = self.mobius_add(x.neg()?, y)?;
        self.log0(w)?.mul(inv_half_lambda)
    }

    /// Row-wise geodesic distance with the `2/√c` factor, `r×1`.
    /// Euclidean variant: plain vector distance.
    pub fn distance<'t>(&self, u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        if !self.is_hyperbolic() {
            return v.sub(u)?.row_norm();
        }
        let w = self.mobius_add(u.neg()?, v)?;
        w.row_norm()?
            .scale(self.sqrt_c)?
            .atanh()?
            .scale(2.0 / self.sqrt_c)
    }

    /// Scores of every user row against every item row, `B×m`.
    pub fn scores<'t>(&self, users: Var<'t>, items: Var<'t>, inner: Inner) -> Result<Var<'t>> {
        if !self.is_hyperbolic() {
            return users.matmul(items.t()?);
        }
        match inner {
            Inner::Projected => self.log0(users)?.matmul(self.log0(items)?.t()?),
            Inner::Geodesic => self.geodesic_inner(users, items),
        }
    }

    /// `½(d²(0,u) + d²(0,x) − d²(u,x))` with the coefficient-free distance,
    /// via `‖−u ⊕ x‖² = ‖u − x‖² / (1 − 2c⟨u,x⟩ + c²‖u‖²‖x‖²)`.
    fn geodesic_inner<'t>(&self, users: Var<'t>, items: Var<'t>) -> Result<Var<'t>> {
        let (c, sc) = (self.c, self.sqrt_c);
        let uu = users.square()?.row_sum()?; // B×1
        let xx = items.square()?.row_sum()?.t()?; // 1×m
        let g = users.matmul(items.t()?)?; // B×m
        let diff2 = uu.add(xx)?.sub(g.scale(2.0)?)?.relu()?;
        let den = g
            .scale(-2.0 * c)?
            .add(uu.mul(xx)?.scale(c * c)?)?
            .add_scalar(1.0)?;
        let r = diff2.div(den)?.sqrt()?;
        // d = atanh(√c r)/√c = r · atanh_ratio(√c r)
        let d_ux = r.mul(r.atanh_ratio(sc)?)?;
        let d0u = uu.sqrt()?;
        let d0u = d0u.mul(d0u.atanh_ratio(sc)?)?;
        let d0x = xx.sqrt()?;
        let d0x = d0x.mul(d0x.atanh_ratio(sc)?)?;
        d0u.square()?
            .add(d0x.square()?)?
            .sub(d_ux.square()?)?
            .scale(0.5)
    }
}
