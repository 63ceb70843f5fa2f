//! The forward pass: graph attention over the user-item graph and each
//! sequence's transition graph, long/short temporal attention, user readout
//! and catalog scoring.

use std::sync::Arc;

use ndarray::Array2;

use super::config::ModelConfig;
use super::params::{Layout, ModelParams};
use super::space::Space;
use crate::autodiff::{Index, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{GlobalGraph, LocalGraph};

/// Edge lists of the user-item graph in the node numbering used by the
/// model: item rows first (including the unknown-item row), then users.
#[derive(Debug, Clone)]
pub struct GlobalIndex {
    n_item_rows: usize,
    n_nodes: usize,
    dst: Index,
    src: Index,
    weight: Array2<f64>,
}

impl GlobalIndex {
    pub fn new(graph: &GlobalGraph, params: &ModelParams) -> Result<Self> {
        if graph.n_items() != params.n_items() || graph.n_users() != params.n_users() {
            return Err(Error::Contract(format!(
                "graph has {} users / {} items but the model has {} / {}",
                graph.n_users(),
                graph.n_items(),
                params.n_users(),
                params.n_items()
            )));
        }
        let n_item_rows = params.n_items() + 1;
        let user_node = |u: usize| n_item_rows + u;
        let (mut dst, mut src, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..graph.n_items() {
            for &(u, c) in graph.item_neighbors(i)? {
                dst.push(i);
                src.push(user_node(u));
                w.push(c);
            }
        }
        for u in 0..graph.n_users() {
            for &(i, c) in graph.user_neighbors(u)? {
                dst.push(user_node(u));
                src.push(i);
                w.push(c);
            }
        }
        let e = w.len();
        Ok(Self {
            n_item_rows,
            n_nodes: n_item_rows + graph.n_users(),
            dst: Arc::from(dst),
            src: Arc::from(src),
            weight: Array2::from_shape_vec((e, 1), w).expect("column"),
        })
    }

    pub fn edge_count(&self) -> usize {
        self.dst.len()
    }
}

/// Flattened index structure for a batch of input sequences.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    batch: usize,
    positions: usize,
    /// Item row for each local node.
    node_items: Index,
    n_local: usize,
    local_dst: Index,
    local_src: Index,
    local_weight: Array2<f64>,
    /// Local node of each position.
    position_nodes: Index,
    /// Sequence of each position.
    seg: Index,
    /// Last position of each sequence.
    last_pos: Index,
    /// Last position of the sequence each position belongs to.
    last_of_position: Index,
    pair_query: Index,
    pair_key: Index,
    inv_len: Array2<f64>,
    offsets: Vec<usize>,
}

impl BatchPlan {
    /// Items at or beyond `n_items` map to the reserved unknown row.
    pub fn new(inputs: &[&[usize]], n_items: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut node_items = Vec::new();
        let (mut ldst, mut lsrc, mut lw) = (Vec::new(), Vec::new(), Vec::new());
        let mut position_nodes = Vec::new();
        let mut seg = Vec::new();
        let mut last_pos = Vec::new();
        let mut last_of_position = Vec::new();
        let (mut pq, mut pk) = (Vec::new(), Vec::new());
        let mut inv_len = Vec::new();
        let mut offsets = Vec::new();
        for (b, seq) in inputs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Contract(format!("sequence {b} of the batch is empty")));
            }
            let items: Vec<usize> = seq.iter().map(|&i| i.min(n_items)).collect();
            let g = LocalGraph::from_items(&items);
            let node_off = node_items.len();
            node_items.extend_from_slice(g.nodes());
            for (dst, list) in g.incoming_local().iter().enumerate() {
                for &(src, w) in list {
                    ldst.push(node_off + dst);
                    lsrc.push(node_off + src);
                    lw.push(w);
                }
            }
            let pos_off = position_nodes.len();
            let n = items.len();
            offsets.push(pos_off);
            position_nodes.extend(g.positions().iter().map(|&p| node_off + p));
            seg.extend(std::iter::repeat_n(b, n));
            last_pos.push(pos_off + n - 1);
            last_of_position.extend(std::iter::repeat_n(pos_off + n - 1, n));
            for i in 0..n {
                for j in 0..n {
                    pq.push(pos_off + i);
                    pk.push(pos_off + j);
                }
            }
            inv_len.push(1.0 / n as f64);
        }
        let e = lw.len();
        Ok(Self {
            batch: inputs.len(),
            positions: position_nodes.len(),
            n_local: node_items.len(),
            node_items: Arc::from(node_items),
            local_dst: Arc::from(ldst),
            local_src: Arc::from(lsrc),
            local_weight: Array2::from_shape_vec((e, 1), lw).expect("column"),
            position_nodes: Arc::from(position_nodes),
            seg: Arc::from(seg),
            last_pos: Arc::from(last_pos),
            last_of_position: Arc::from(last_of_position),
            pair_query: Arc::from(pq),
            pair_key: Arc::from(pk),
            inv_len: Array2::from_shape_vec((inputs.len(), 1), inv_len).expect("column"),
            offsets,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Position range of sequence `b` in the flattened layout.
    pub fn span(&self, b: usize) -> std::ops::Range<usize> {
        let start = self.offsets[b];
        let end = self.offsets.get(b + 1).copied().unwrap_or(self.positions);
        start..end
    }

    /// Offset of sequence `b`'s first pair in the flattened pair list.
    pub fn pair_offset(&self, b: usize) -> usize {
        (0..b).map(|k| self.span(k).len().pow(2)).sum()
    }
}

/// Parameter blocks recorded on a tape.
pub struct ParamVars<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> ParamVars<'t> {
    /// Records every block; as leaves with gradients when `trainable`.
    pub fn new(tape: &'t Tape, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .blocks()
            .iter()
            .map(|b| {
                if trainable {
                    tape.param_array(b)
                } else {
                    tape.constant_array(b.clone())
                }
            })
            .collect();
        Self { vars }
    }

    /// Wraps already-recorded variables, one per block in layout order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, k: usize) -> Var<'t> {
        self.vars[k]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Tape outputs of a batched forward pass.
pub struct BatchForward<'t> {
    /// User points, `B×d`.
    pub users: Var<'t>,
    /// Catalog item points, `m×d`.
    pub items: Var<'t>,
    /// Pre-softmax scores, `B×m`.
    pub scores: Var<'t>,
    /// Short-view weights per position, `S×1`; absent when disabled.
    pub gamma: Option<Var<'t>>,
    /// Long-view attention per within-sequence pair, `P×1`; absent when
    /// disabled.
    pub long_attention: Option<Var<'t>>,
}

/// One graph-attention layer over an edge list `(dst ← src)`.
///
/// Logits are `w · (log0 x_dst ‖ log0 x_src) + b`, normalised over each
/// destination's neighbours; the destination then moves along the weighted
/// sum of its log maps towards the neighbours. Nodes without neighbours pass
/// through unchanged.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_layer<'t>(
    space: &Space,
    h: Var<'t>,
    dst: &Index,
    src: &Index,
    weight: Option<&Array2<f64>>,
    w: Var<'t>,
    b: Var<'t>,
    n_nodes: usize,
) -> Result<Var<'t>> {
    if dst.is_empty() {
        return Ok(h);
    }
    let tape = h.tape();
    let t = space.log0(h)?;
    let pair = tape.concat_cols(&[t.gather_rows(dst)?, t.gather_rows(src)?])?;
    let mut logits = pair.matmul(w)?.add(b)?;
    if let Some(wt) = weight {
        logits = logits.mul(tape.constant_array(wt.clone()))?;
    }
    let e = logits.segment_softmax(dst, n_nodes)?;
    let xd = h.gather_rows(dst)?;
    let xs = h.gather_rows(src)?;
    let msg = space.log_at(xd, xs)?.mul(e)?;
    let agg = msg.segment_sum(dst, n_nodes)?;
    space.exp_at(h, agg)
}

/// `exp0(Σ_l w_l log0(layer_l))`.
pub(crate) fn readout<'t>(space: &Space, layers: &[Var<'t>], weights: &[f64]) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for (x, &w) in layers.iter().zip(weights) {
        let term = space.log0(*x)?.scale(w)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    space.exp0(acc.expect("at least one layer"))
}

fn identity_index(n: usize) -> Index {
    Arc::from((0..n).collect::<Vec<_>>())
}

/// Item representations after the global stage, `(m+1)×d`.
pub fn item_representations<'t>(
    pv: &ParamVars<'t>,
    cfg: &ModelConfig,
    global: &GlobalIndex,
) -> Result<Var<'t>> {
    let space = Space::new(cfg);
    let items = space.exp0(pv.get(Layout::ITEMS))?;
    if cfg.ablation.no_global {
        return Ok(items);
    }
    let tape = items.tape();
    let users = space.exp0(pv.get(Layout::USERS))?;
    let layout = Layout::new(cfg.layers);
    let mut h = tape.concat_rows(&[items, users])?;
    let mut layers = vec![h];
    let weight = cfg.edge_weighted_attention.then_some(&global.weight);
    for l in 0..cfg.layers {
        h = attention_layer(
            &space,
            h,
            &global.dst,
            &global.src,
            weight,
            pv.get(layout.global_w(l)),
            pv.get(layout.global_b(l)),
            global.n_nodes,
        )?;
        layers.push(h);
    }
    let item_rows = identity_index(global.n_item_rows);
    let layers: Vec<Var<'t>> = layers
        .into_iter()
        .map(|x| x.gather_rows(&item_rows))
        .collect::<Result<_>>()?;
    readout(&space, &layers, &cfg.alpha)
}

/// Runs the per-sequence stages on top of precomputed item representations.
pub fn sequence_forward<'t>(
    pv: &ParamVars<'t>,
    cfg: &ModelConfig,
    item_repr: Var<'t>,
    plan: &BatchPlan,
    n_items: usize,
) -> Result<BatchForward<'t>> {
    let space = Space::new(cfg);
    let tape = item_repr.tape();
    let layout = Layout::new(cfg.layers);
    let d = cfg.dim;

    let mut x = item_repr.gather_rows(&plan.node_items)?;
    if !cfg.ablation.no_local {
        let mut layers = vec![x];
        let weight = cfg.edge_weighted_attention.then_some(&plan.local_weight);
        for l in 0..cfg.layers {
            x = attention_layer(
                &space,
                x,
                &plan.local_dst,
                &plan.local_src,
                weight,
                pv.get(layout.local_w(l)),
                pv.get(layout.local_b(l)),
                plan.n_local,
            )?;
            layers.push(x);
        }
        x = readout(&space, &layers, &cfg.zeta)?;
    }
    let t = space.log0(x.gather_rows(&plan.position_nodes)?)?;

    let (z_long, long_attention) = if cfg.ablation.no_long {
        (tape.zeros(plan.batch, d), None)
    } else {
        let q = t.matmul(pv.get(layout.w_query()).t()?)?;
        let k = t.matmul(pv.get(layout.w_key()).t()?)?;
        let v = t.matmul(pv.get(layout.w_value()).t()?)?;
        let logits = q
            .gather_rows(&plan.pair_query)?
            .row_dot(k.gather_rows(&plan.pair_key)?)?
            .scale(1.0 / (d as f64).sqrt())?;
        let a = logits.segment_softmax(&plan.pair_query, plan.positions)?;
        let rows = v
            .gather_rows(&plan.pair_key)?
            .mul(a)?
            .segment_sum(&plan.pair_query, plan.positions)?;
        let mean = rows
            .segment_sum(&plan.seg, plan.batch)?
            .mul(tape.constant_array(plan.inv_len.clone()))?;
        (space.log0(space.exp0(mean)?)?, Some(a))
    };

    let (z_short, gamma) = if cfg.ablation.no_short {
        (tape.zeros(plan.batch, d), None)
    } else {
        let tn = t.gather_rows(&plan.last_of_position)?;
        let h = tn
            .matmul(pv.get(layout.w_last()).t()?)?
            .add(t.matmul(pv.get(layout.w_item()).t()?)?)?
            .sigmoid()?;
        let gamma = h.matmul(pv.get(layout.q()))?;
        let sum = t.mul(gamma)?.segment_sum(&plan.seg, plan.batch)?;
        (space.log0(space.exp0(sum)?)?, Some(gamma))
    };

    let t_last = t.gather_rows(&plan.last_pos)?;
    let cat = tape.concat_cols(&[t_last, z_long, z_short])?;
    let users = space.exp0(cat.matmul(pv.get(layout.w_readout()).t()?)?)?;

    let catalog = identity_index(n_items);
    let items = space.exp0(pv.get(Layout::ITEMS).gather_rows(&catalog)?)?;
    let scores = space.scores(users, items, cfg.inner)?;
    Ok(BatchForward {
        users,
        items,
        scores,
        gamma,
        long_attention,
    })
}

/// Full batched forward on one tape.
pub fn batch_forward<'t>(
    pv: &ParamVars<'t>,
    params: &ModelParams,
    global: &GlobalIndex,
    plan: &BatchPlan,
) -> Result<BatchForward<'t>> {
    let cfg = params.config();
    let repr = item_representations(pv, cfg, global)?;
    sequence_forward(pv, cfg, repr, plan, params.n_items())
}

/// Item representations as plain values, for repeated inference.
pub fn item_representation_values(params: &ModelParams, global: &GlobalIndex) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let pv = ParamVars::new(&tape, params, false);
    let repr = item_representations(&pv, params.config(), global)?;
    Ok((*repr.array()).clone())
}

/// Pre-softmax scores for a batch of input sequences, `B×m`.
pub fn score_batch(
    params: &ModelParams,
    item_repr: &Array2<f64>,
    inputs: &[&[usize]],
) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let pv = ParamVars::new(&tape, params, false);
    let plan = BatchPlan::new(inputs, params.n_items())?;
    let repr = tape.constant_array(item_repr.clone());
    let out = sequence_forward(&pv, params.config(), repr, &plan, params.n_items())?;
    Ok((*out.scores.array()).clone())
}

/// Everything the model computes for one input sequence.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Short-view weight per position (empty when that branch is off).
    pub short_attention: Vec<f64>,
    /// Long-view attention, row = query position (empty when off).
    pub long_attention: Array2<f64>,
    pub user_point: Vec<f64>,
    pub item_points: Array2<f64>,
}

/// Forward pass for a single input sequence (the items seen so far).
pub fn forward(params: &ModelParams, global: &GlobalIndex, items: &[usize]) -> Result<ForwardOutput> {
    let tape = Tape::new();
    let pv = ParamVars::new(&tape, params, false);
    let plan = BatchPlan::new(&[items], params.n_items())?;
    let out = batch_forward(&pv, params, global, &plan)?;
    let n = items.len();
    let scores = out.scores.value().values().to_vec();
    let probabilities = out.scores.softmax(1)?.value().values().to_vec();
    let short_attention = out
        .gamma
        .map(|g| g.value().values().to_vec())
        .unwrap_or_default();
    let long_attention = match out.long_attention {
        Some(a) => {
            let off = plan.pair_offset(0);
            Array2::from_shape_vec((n, n), a.value().values()[off..off + n * n].to_vec())
                .expect("square")
        }
        None => Array2::zeros((0, 0)),
    };
    Ok(ForwardOutput {
        scores,
        probabilities,
        short_attention,
        long_attention,
        user_point: out.users.value().values().to_vec(),
        item_points: (*out.items.array()).clone(),
    })
}
