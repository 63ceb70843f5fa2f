//! Local (per-sequence) and global (user-item) interaction graphs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One user's chronological interactions, as item indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<usize>,
}

impl UserSequence {
    pub fn new(user: usize, items: Vec<usize>) -> Self {
        Self { user, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// All items but the last, and the last.
    pub fn split_target(&self) -> Option<(&[usize], usize)> {
        let (last, prefix) = self.items.split_last()?;
        Some((prefix, *last))
    }
}

/// Directed transition graph over the distinct items of one sequence.
///
/// Edge `i → j` exists when `j` directly follows `i` somewhere in the
/// sequence; its weight is the transition count divided by the number of
/// transitions leaving `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGraph {
    nodes: Vec<usize>,
    positions: Vec<usize>,
    out: Vec<Vec<(usize, f64)>>,
    inc: Vec<Vec<(usize, f64)>>,
}

pub fn build_local_graph(seq: &UserSequence) -> Result<LocalGraph> {
    if seq.len() < 2 {
        return Err(Error::Data(format!(
            "local graph needs at least 2 items, user {} has {}",
            seq.user,
            seq.len()
        )));
    }
    Ok(LocalGraph::from_items(&seq.items))
}

impl LocalGraph {
    /// Builds the graph for any item list, including a single item (one
    /// isolated node) and the empty list.
    pub(crate) fn from_items(items: &[usize]) -> Self {
        let mut nodes: Vec<usize> = items.to_vec();
        nodes.sort_unstable();
        nodes.dedup();
        let local = |item: usize| nodes.binary_search(&item).expect("node present");
        let positions: Vec<usize> = items.iter().map(|&i| local(i)).collect();

        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for w in positions.windows(2) {
            *counts.entry((w[0], w[1])).or_insert(0) += 1;
        }
        let mut totals = vec![0usize; nodes.len()];
        for (&(s, _), &c) in &counts {
            totals[s] += c;
        }
        let mut out = vec![Vec::new(); nodes.len()];
        let mut inc = vec![Vec::new(); nodes.len()];
        // BTreeMap iteration is ordered by (src, dst), so both lists come
        // out sorted by neighbour index.
        for (&(s, d), &c) in &counts {
            let w = c as f64 / totals[s] as f64;
            out[s].push((d, w));
            inc[d].push((s, w));
        }
        for list in &mut inc {
            list.sort_by_key(|&(s, _)| s);
        }
        Self {
            nodes,
            positions,
            out,
            inc,
        }
    }

    /// Distinct items, ascending.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// For every sequence position, the index of its item in [`nodes`](Self::nodes).
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// `(src item, dst item, weight)` for every edge, ordered by source then
    /// destination.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.out
            .iter()
            .enumerate()
            .flat_map(|(s, list)| {
                list.iter()
                    .map(move |&(d, w)| (self.nodes[s], self.nodes[d], w))
            })
            .collect()
    }

    fn local_index(&self, item: usize) -> Result<usize> {
        self.nodes
            .binary_search(&item)
            .map_err(|_| Error::Lookup(format!("item {item} is not in this local graph")))
    }

    /// Successors of `item` with their normalised weights.
    pub fn out_neighbors(&self, item: usize) -> Result<Vec<(usize, f64)>> {
        let k = self.local_index(item)?;
        Ok(self.out[k].iter().map(|&(d, w)| (self.nodes[d], w)).collect())
    }

    /// Predecessors of `item`, each with the weight of its edge into `item`.
    pub fn in_neighbors(&self, item: usize) -> Result<Vec<(usize, f64)>> {
        let k = self.local_index(item)?;
        Ok(self.inc[k].iter().map(|&(s, w)| (self.nodes[s], w)).collect())
    }

    /// Predecessor lists in local node indices.
    pub(crate) fn incoming_local(&self) -> &[Vec<(usize, f64)>] {
        &self.inc
    }
}

/// A node of the user-item graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GlobalNode {
    User(usize),
    Item(usize),
}

/// Bipartite user-item graph; the weight of `(u, i)` is how often `i`
/// occurs in `u`'s sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGraph {
    user_adj: Vec<Vec<(usize, f64)>>,
    item_adj: Vec<Vec<(usize, f64)>>,
}

/// Builds the user-item graph. Pass the training sequences only.
pub fn build_global_graph(seqs: &[UserSequence], n_users: usize, n_items: usize) -> Result<GlobalGraph> {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for s in seqs {
        if s.user >= n_users {
            return Err(Error::Data(format!(
                "user index {} out of range for {n_users} users",
                s.user
            )));
        }
        for &i in &s.items {
            if i >= n_items {
                return Err(Error::Data(format!(
                    "item index {i} out of range for {n_items} items"
                )));
            }
            *counts.entry((s.user, i)).or_insert(0) += 1;
        }
    }
    let mut user_adj = vec![Vec::new(); n_users];
    let mut item_adj = vec![Vec::new(); n_items];
    for (&(u, i), &c) in &counts {
        user_adj[u].push((i, c as f64));
        item_adj[i].push((u, c as f64));
    }
    for list in &mut item_adj {
        list.sort_by_key(|&(u, _)| u);
    }
    Ok(GlobalGraph { user_adj, item_adj })
}

impl GlobalGraph {
    pub fn n_users(&self) -> usize {
        self.user_adj.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_adj.len()
    }

    pub fn edge_count(&self) -> usize {
        self.user_adj.iter().map(Vec::len).sum()
    }

    /// `(user, item, weight)`, ordered by user then item.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.user_adj
            .iter()
            .enumerate()
            .flat_map(|(u, l)| l.iter().map(move |&(i, w)| (u, i, w)))
            .collect()
    }

    pub fn user_neighbors(&self, user: usize) -> Result<&[(usize, f64)]> {
        self.user_adj
            .get(user)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("unknown user node {user}")))
    }

    pub fn item_neighbors(&self, item: usize) -> Result<&[(usize, f64)]> {
        self.item_adj
            .get(item)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("unknown item node {item}")))
    }

    /// Neighbours of `node`, ascending by index.
    pub fn neighbors(&self, node: GlobalNode) -> Result<Vec<(GlobalNode, f64)>> {
        Ok(match node {
            GlobalNode::User(u) => self
                .user_neighbors(u)?
                .iter()
                .map(|&(i, w)| (GlobalNode::Item(i), w))
                .collect(),
            GlobalNode::Item(i) => self
                .item_neighbors(i)?
                .iter()
                .map(|&(u, w)| (GlobalNode::User(u), w))
                .collect(),
        })
    }

    /// Number of training interactions per item.
    pub fn item_counts(&self) -> Vec<f64> {
        self.item_adj
            .iter()
            .map(|l| l.iter().map(|&(_, w)| w).sum())
            .collect()
    }
}
