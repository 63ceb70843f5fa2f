use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Ablation, ModelConfig};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT_TAG: &str = "phgr-checkpoint-v1";

/// Position of each named block inside [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    layers: usize,
}

impl Layout {
    pub fn new(layers: usize) -> Self {
        Self { layers }
    }

    pub const USERS: usize = 0;
    pub const ITEMS: usize = 1;

    pub fn global_w(&self, l: usize) -> usize {
        2 + 2 * l
    }

    pub fn global_b(&self, l: usize) -> usize {
        3 + 2 * l
    }

    pub fn local_w(&self, l: usize) -> usize {
        2 + 2 * self.layers + 2 * l
    }

    pub fn local_b(&self, l: usize) -> usize {
        3 + 2 * self.layers + 2 * l
    }

    fn tail(&self) -> usize {
        2 + 4 * self.layers
    }

    pub fn w_query(&self) -> usize {
        self.tail()
    }

    pub fn w_key(&self) -> usize {
        self.tail() + 1
    }

    pub fn w_value(&self) -> usize {
        self.tail() + 2
    }

    pub fn w_last(&self) -> usize {
        self.tail() + 3
    }

    pub fn w_item(&self) -> usize {
        self.tail() + 4
    }

    pub fn q(&self) -> usize {
        self.tail() + 5
    }

    pub fn w_readout(&self) -> usize {
        self.tail() + 6
    }

    pub fn len(&self) -> usize {
        self.tail() + 7
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Block names and shapes in storage order.
    pub fn blocks(&self, n_users: usize, n_items: usize, d: usize) -> Vec<(String, (usize, usize))> {
        let mut out = vec![
            ("user_embeddings".to_string(), (n_users, d)),
            // One extra row for the reserved unknown item.
            ("item_embeddings".to_string(), (n_items + 1, d)),
        ];
        for kind in ["global", "local"] {
            for l in 0..self.layers {
                out.push((format!("{kind}.{l}.w"), (2 * d, 1)));
                out.push((format!("{kind}.{l}.b"), (1, 1)));
            }
        }
        for name in ["w_query", "w_key", "w_value", "w_last", "w_item"] {
            out.push((format!("attention.{name}"), (d, d)));
        }
        out.push(("attention.q".to_string(), (d, 1)));
        out.push(("readout.w".to_string(), (d, 3 * d)));
        out
    }
}

/// All trainable arrays. Embedding rows are tangent vectors at the origin;
/// ball points are produced from them by `exp0` on use.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    n_users: usize,
    n_items: usize,
    names: Vec<String>,
    blocks: Vec<Array2<f64>>,
}

impl ModelParams {
    /// Gaussian initialisation: embeddings with `init_std`, weights with
    /// variance `1/d`, biases at zero.
    pub fn init(n_users: usize, n_items: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_users == 0 || n_items == 0 {
            return Err(Error::Config(format!(
                "need at least one user and item, got {n_users} and {n_items}"
            )));
        }
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let weight = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let layout = Layout::new(config.layers);
        let mut names = Vec::new();
        let mut blocks = Vec::new();
        for (k, (name, shape)) in layout.blocks(n_users, n_items, d).into_iter().enumerate() {
            let block = if k <= Layout::ITEMS {
                Array2::from_shape_simple_fn(shape, || emb.sample(&mut rng))
            } else if name.ends_with(".b") {
                Array2::zeros(shape)
            } else {
                Array2::from_shape_simple_fn(shape, || weight.sample(&mut rng))
            };
            names.push(name);
            blocks.push(block);
        }
        Ok(Self {
            config: config.clone(),
            n_users,
            n_items,
            names,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Swaps in an architecture with the same parameter shapes (ablation
    /// flags, inner product, mix weights).
    pub fn set_config(&mut self, config: ModelConfig) -> Result<()> {
        config.validate()?;
        if config.dim != self.config.dim || config.layers != self.config.layers {
            return Err(Error::Config("dim and layers cannot change after init".into()));
        }
        self.config = config;
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.config.layers)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    /// Catalog size, excluding the reserved unknown row.
    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Index of the reserved unknown-item row.
    pub fn unknown_item(&self) -> usize {
        self.n_items
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn blocks(&self) -> &[Array2<f64>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.blocks
    }

    pub fn block(&self, name: &str) -> Result<&Array2<f64>> {
        self.index_of(name).map(|k| &self.blocks[k])
    }

    pub fn block_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        let k = self.index_of(name)?;
        Ok(&mut self.blocks[k])
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup(format!("no parameter block named `{name}`")))
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(Array2::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Writes `manifest.txt` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let mut push = |k: &str, v: String| {
            manifest.push_str(k);
            manifest.push('=');
            manifest.push_str(&v);
            manifest.push('\n');
        };
        let c = &self.config;
        push("format", FORMAT_TAG.into());
        push("n_users", self.n_users.to_string());
        push("n_items", self.n_items.to_string());
        push("dim", c.dim.to_string());
        push("layers", c.layers.to_string());
        push("c", c.c.to_string());
        push("alpha", join(&c.alpha));
        push("zeta", join(&c.zeta));
        push("variant", c.variant.to_string());
        push("inner", c.inner.to_string());
        push("no_global", c.ablation.no_global.to_string());
        push("no_local", c.ablation.no_local.to_string());
        push("no_long", c.ablation.no_long.to_string());
        push("no_short", c.ablation.no_short.to_string());
        push("init_std", c.init_std.to_string());
        push("boundary_eps", c.boundary_eps.to_string());
        push("edge_weighted_attention", c.edge_weighted_attention.to_string());
        let mut blob = Vec::with_capacity(8 * self.num_scalars());
        for (k, (name, b)) in self.names.iter().zip(&self.blocks).enumerate() {
            push(
                &format!("block.{k}"),
                format!("{name} {} {} {}", b.nrows(), b.ncols(), blob.len()),
            );
            for x in b.iter() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOB_FILE);
        fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOB_FILE);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected key=value in {}", mpath.display()),
            })?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Data(format!("checkpoint manifest lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("checkpoint key `{k}` is not a number")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("checkpoint key `{k}` is not an integer")))
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("checkpoint key `{k}` is not a boolean")))
        };
        if get("format")? != FORMAT_TAG {
            return Err(Error::Data(format!(
                "unsupported checkpoint format `{}`",
                get("format")?
            )));
        }
        let config = ModelConfig {
            dim: int("dim")?,
            layers: int("layers")?,
            c: num("c")?,
            alpha: split_floats(get("alpha")?)?,
            zeta: split_floats(get("zeta")?)?,
            variant: get("variant")?.parse()?,
            inner: get("inner")?.parse()?,
            ablation: Ablation {
                no_global: flag("no_global")?,
                no_local: flag("no_local")?,
                no_long: flag("no_long")?,
                no_short: flag("no_short")?,
            },
            init_std: num("init_std")?,
            boundary_eps: num("boundary_eps")?,
            edge_weighted_attention: flag("edge_weighted_attention")?,
        };
        config.validate()?;
        let n_users = int("n_users")?;
        let n_items = int("n_items")?;
        let expected = Layout::new(config.layers).blocks(n_users, n_items, config.dim);
        let mut names = Vec::new();
        let mut blocks = Vec::new();
        for (k, (name, shape)) in expected.into_iter().enumerate() {
            let entry = get(&format!("block.{k}"))?;
            let fields: Vec<&str> = entry.split_whitespace().collect();
            let parsed = match fields.as_slice() {
                [n, r, c, o] => Some((*n, r.parse::<usize>(), c.parse::<usize>(), o.parse::<usize>())),
                _ => None,
            };
            let Some((n, Ok(r), Ok(c), Ok(off))) = parsed else {
                return Err(Error::Data(format!("malformed manifest entry block.{k}")));
            };
            if n != name || (r, c) != shape {
                return Err(Error::Data(format!(
                    "block.{k} is `{n}` {r}x{c}, expected `{name}` {}x{}",
                    shape.0, shape.1
                )));
            }
            let bytes = blob
                .get(off..off + 8 * r * c)
                .ok_or_else(|| Error::Data(format!("{} is truncated at `{name}`", bpath.display())))?;
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
                .collect();
            names.push(name);
            blocks.push(Array2::from_shape_vec((r, c), values).expect("shape checked"));
        }
        Ok(Self {
            config,
            n_users,
            n_items,
            names,
            blocks,
        })
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn split_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad number `{x}` in list")))
        })
        .collect()
}
