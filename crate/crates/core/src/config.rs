//! Flat `key = value` run configuration with layered overrides.
//!
//! Precedence, lowest first: defaults, config file, `PHGR_*` environment
//! variables, command-line flags. Every layer goes through [`RunConfig::set`],
//! so all of them accept the same keys and values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::DEFAULT_KS;
use crate::model::{Inner, ModelConfig, Variant};
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "PHGR_";

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("dim", "embedding dimension d"),
    ("layers", "graph attention layers L"),
    ("curvature", "ball curvature c"),
    ("alpha", "global layer-mix weights, L+1 comma-separated values"),
    ("zeta", "local layer-mix weights, L+1 comma-separated values"),
    ("variant", "phgr (Poincaré) or ehgr (Euclidean)"),
    ("inner", "scoring inner product: D (geodesic) or P (projected)"),
    ("no_global", "drop the global graph"),
    ("no_local", "drop the local graph"),
    ("no_long", "drop long-view attention"),
    ("no_short", "drop short-view attention"),
    ("init_std", "embedding initialisation standard deviation"),
    ("boundary_eps", "distance kept from the ball boundary"),
    ("edge_weighted_attention", "scale attention logits by edge weights"),
    ("learning_rate", "optimizer step size"),
    ("batch_size", "sequences per batch"),
    ("omega", "weight of the contrastive ranking loss"),
    ("margin", "contrastive hinge margin"),
    ("patience", "early-stopping patience in epochs"),
    ("max_epochs", "epoch limit"),
    ("seed", "random seed"),
    ("negatives", "negative items per positive"),
    ("k", "cutoffs for the ranking metrics, comma-separated"),
    ("threads", "worker threads, 0 for all cores"),
    ("min_len", "shortest sequence kept when preparing data"),
    ("max_malformed", "malformed input lines tolerated when preparing data"),
    ("data", "dataset directory"),
    ("out", "output directory"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ks: Vec<usize>,
    pub threads: usize,
    pub min_len: usize,
    pub max_malformed: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    alpha_set: bool,
    zeta_set: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ks: DEFAULT_KS.to_vec(),
            threads: 0,
            min_len: crate::data::DEFAULT_MIN_LEN,
            max_malformed: 0,
            data: None,
            out: None,
            alpha_set: false,
            zeta_set: false,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Canonical key: lowercase with `-` read as `_`.
pub fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize_key(key);
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key.as_str() {
            "dim" => m.dim = num(&key, v)?,
            "layers" => m.layers = num(&key, v)?,
            "curvature" => m.c = num(&key, v)?,
            "alpha" => {
                m.alpha = list(&key, v)?;
                self.alpha_set = true;
            }
            "zeta" => {
                m.zeta = list(&key, v)?;
                self.zeta_set = true;
            }
            "variant" => m.variant = v.parse::<Variant>()?,
            "inner" => m.inner = v.parse::<Inner>()?,
            "no_global" => m.ablation.no_global = flag(&key, v)?,
            "no_local" => m.ablation.no_local = flag(&key, v)?,
            "no_long" => m.ablation.no_long = flag(&key, v)?,
            "no_short" => m.ablation.no_short = flag(&key, v)?,
            "init_std" => m.init_std = num(&key, v)?,
            "boundary_eps" => m.boundary_eps = num(&key, v)?,
            "edge_weighted_attention" => m.edge_weighted_attention = flag(&key, v)?,
            "learning_rate" => t.learning_rate = num(&key, v)?,
            "batch_size" => t.batch_size = num(&key, v)?,
            "omega" => t.omega = num(&key, v)?,
            "margin" => t.margin = num(&key, v)?,
            "patience" => t.patience = num(&key, v)?,
            "max_epochs" => t.max_epochs = num(&key, v)?,
            "seed" => t.seed = num(&key, v)?,
            "negatives" => t.negatives = num(&key, v)?,
            "k" => self.ks = list(&key, v)?,
            "threads" => self.threads = num(&key, v)?,
            "min_len" => self.min_len = num(&key, v)?,
            "max_malformed" => self.max_malformed = num(&key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies `PHGR_<KEY>` variables, e.g. `PHGR_LEARNING_RATE`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (k, v) in vars {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                self.set(key, &v)
                    .map_err(|e| Error::Config(format!("environment variable {k}: {e}")))?;
            }
        }
        Ok(())
    }

    /// Fills layer-mix weights left unset and checks everything.
    pub fn finish(mut self) -> Result<Self> {
        let uniform = vec![1.0 / (self.model.layers as f64 + 1.0); self.model.layers + 1];
        if !self.alpha_set {
            self.model.alpha = uniform.clone();
        }
        if !self.zeta_set {
            self.model.zeta = uniform;
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config(format!("k must list positive cutoffs, got {:?}", self.ks)));
        }
        if self.min_len == 0 {
            return Err(Error::Config("min_len must be positive".into()));
        }
        Ok(self)
    }

    /// The config as a file that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("dim", m.dim.to_string());
        put("layers", m.layers.to_string());
        put("curvature", m.c.to_string());
        put("alpha", join(&m.alpha));
        put("zeta", join(&m.zeta));
        put("variant", m.variant.to_string());
        put("inner", m.inner.to_string());
        put("no_global", m.ablation.no_global.to_string());
        put("no_local", m.ablation.no_local.to_string());
        put("no_long", m.ablation.no_long.to_string());
        put("no_short", m.ablation.no_short.to_string());
        put("init_std", m.init_std.to_string());
        put("boundary_eps", m.boundary_eps.to_string());
        put("edge_weighted_attention", m.edge_weighted_attention.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("batch_size", t.batch_size.to_string());
        put("omega", t.omega.to_string());
        put("margin", t.margin.to_string());
        put("patience", t.patience.to_string());
        put("max_epochs", t.max_epochs.to_string());
        put("seed", t.seed.to_string());
        put("negatives", t.negatives.to_string());
        put("k", join(&self.ks));
        put("threads", self.threads.to_string());
        put("min_len", self.min_len.to_string());
        put("max_malformed", self.max_malformed.to_string());
        if let Some(d) = &self.data {
            put("data", d.display().to_string());
        }
        if let Some(o) = &self.out {
            put("out", o.display().to_string());
        }
        s
    }
}
