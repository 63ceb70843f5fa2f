use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::DEFAULT_BOUNDARY_EPS;

/// Geometry the embeddings live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Poincare,
    /// Flat-space twin: exp/log become identities, ⊕ becomes `+`, and the
    /// score is the dot product.
    Euclidean,
}

/// Score between the user and an item in the Poincaré variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Inner {
    /// Geodesic inner product built from in-ball distances.
    #[default]
    Geodesic,
    /// Dot product of the origin log maps.
    Projected,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "phgr" | "poincare" => Ok(Variant::Poincare),
            "ehgr" | "euclidean" => Ok(Variant::Euclidean),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected phgr or ehgr)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Poincare => "phgr",
            Variant::Euclidean => "ehgr",
        })
    }
}

impl FromStr for Inner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "D" | "d" | "geodesic" => Ok(Inner::Geodesic),
            "P" | "p" | "projected" => Ok(Inner::Projected),
            _ => Err(Error::Config(format!(
                "unknown inner product `{s}` (expected D or P)"
            ))),
        }
    }
}

impl fmt::Display for Inner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Inner::Geodesic => "D",
            Inner::Projected => "P",
        })
    }
}

/// Stages that can be switched off for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    pub no_global: bool,
    pub no_local: bool,
    pub no_long: bool,
    pub no_short: bool,
}

impl Ablation {
    /// Short label used in reports, e.g. `w/o-L&S`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_global {
            parts.push("G");
        }
        if self.no_local {
            parts.push("L");
        }
        match (self.no_long, self.no_short) {
            (true, true) if !self.no_local => parts.push("L&S"),
            (true, true) => parts.extend(["Long", "Short"]),
            (true, false) => parts.push("Long"),
            (false, true) => parts.push("Short"),
            _ => {}
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            format!("w/o-{}", parts.join("&"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub c: f64,
    /// Global layer-mix weights, `layers + 1` entries.
    pub alpha: Vec<f64>,
    /// Local layer-mix weights, `layers + 1` entries.
    pub zeta: Vec<f64>,
    pub variant: Variant,
    pub inner: Inner,
    pub ablation: Ablation,
    pub init_std: f64,
    pub boundary_eps: f64,
    /// Multiply graph-attention logits by the stored edge weight.
    pub edge_weighted_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(16, 2)
    }
}

impl ModelConfig {
    /// Config with uniform layer-mix weights.
    pub fn new(dim: usize, layers: usize) -> Self {
        let w = vec![1.0 / (layers as f64 + 1.0); layers + 1];
        Self {
            dim,
            layers,
            c: 1.0,
            alpha: w.clone(),
            zeta: w,
            variant: Variant::Poincare,
            inner: Inner::Geodesic,
            ablation: Ablation::default(),
            init_std: 0.1,
            boundary_eps: DEFAULT_BOUNDARY_EPS,
            edge_weighted_attention: false,
        }
    }

    /// Sets `layers` and resets both mix-weight vectors to uniform.
    pub fn with_layers(mut self, layers: usize) -> Self {
        let w = vec![1.0 / (layers as f64 + 1.0); layers + 1];
        self.layers = layers;
        self.alpha = w.clone();
        self.zeta = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if !(1..=5).contains(&self.layers) {
            return bad(format!("layers must be in 1..=5, got {}", self.layers));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad(format!("curvature must be positive, got {}", self.c));
        }
        if !(self.boundary_eps > 0.0 && self.boundary_eps < 1.0) {
            return bad(format!("boundary_eps must be in (0,1), got {}", self.boundary_eps));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be nonnegative, got {}", self.init_std));
        }
        for (name, w) in [("alpha", &self.alpha), ("zeta", &self.zeta)] {
            if w.len() != self.layers + 1 {
                return bad(format!(
                    "{name} needs {} entries, got {}",
                    self.layers + 1,
                    w.len()
                ));
            }
            if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return bad(format!("{name} weights must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn max_norm(&self) -> f64 {
        (1.0 - self.boundary_eps) / self.c.sqrt()
    }

    /// Human-readable name of the architecture, e.g. `PHGR-w/o-L&S`.
    pub fn label(&self) -> String {
        let base = match (self.variant, self.inner) {
            (Variant::Euclidean, _) => "EHGR",
            (Variant::Poincare, Inner::Geodesic) => "PHGR",
            (Variant::Poincare, Inner::Projected) => "PHGR-w/o-IP",
        };
        if self.ablation == Ablation::default() {
            base.to_string()
        } else {
            format!("{base}-{}", self.ablation.label())
        }
    }
}
