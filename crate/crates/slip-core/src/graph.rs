//! Instance graph construction from purchase logs.
//!
//! A purchase log is a list of (user, item) interactions. Projecting the
//! user-item bipartite graph onto items yields the instance graph: two items
//! are connected when enough distinct users bought both. A k-core pass then
//! strips weakly connected items, and per-batch hop-distance matrices drive
//! the positive/negative masks of the structural contrastive loss.

use crate::error::{Result, SlipError};
use crate::tensor::Tensor;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// One purchase event. The timestamp is optional and only stored for
/// diagnostics; projection ignores it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: Option<u64>,
}

/// An in-memory purchase log.
#[derive(Debug, Clone, Default)]
pub struct BipartiteLog {
    records: Vec<LogRecord>,
}

impl BipartiteLog {
    pub fn new() -> Self {
        BipartiteLog::default()
    }

    /// Append one event. User and item ids must be non-empty.
    pub fn push(&mut self, user_id: &str, item_id: &str, timestamp: Option<u64>) -> Result<()> {
        if user_id.is_empty() || item_id.is_empty() {
            return Err(SlipError::InvalidInput(
                "log records need non-empty user and item ids".into(),
            ));
        }
        self.records.push(LogRecord {
            user_id: user_id.to_string(),
            item_id: item_id.to_string(),
            timestamp,
        });
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct items in sorted order.
    pub fn item_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.item_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }
}

/// Undirected weighted item graph in compressed sparse row form.
///
/// Nodes carry dense indices `0..n` plus their original string ids. Edge
/// weights count the distinct users shared by the endpoints. Self-loops are
/// rejected at construction; the adjacency is stored symmetrically.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGraph {
    node_ids: Vec<String>,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    weights: Vec<u32>,
}

impl InstanceGraph {
    /// Build from node ids and undirected edges `(i, j, weight)`, each edge
    /// listed once. Rejects self-loops, out-of-range endpoints, zero weights,
    /// and duplicate edges.
    pub fn from_edges(node_ids: Vec<String>, edges: &[(u32, u32, u32)]) -> Result<Self> {
        let n = node_ids.len();
        let mut seen = BTreeSet::new();
        for &(i, j, w) in edges {
            if i as usize >= n || j as usize >= n {
                return Err(SlipError::InvalidInput(format!(
                    "edge ({}, {}) out of range for {} nodes",
                    i, j, n
                )));
            }
            if i == j {
                return Err(SlipError::InvalidInput(format!("self-loop on node {}", i)));
            }
            if w == 0 {
                return Err(SlipError::InvalidInput(format!(
                    "edge ({}, {}) has zero weight",
                    i, j
                )));
            }
            let key = (i.min(j), i.max(j));
            if !seen.insert(key) {
                return Err(SlipError::InvalidInput(format!(
                    "duplicate edge ({}, {})",
                    key.0, key.1
                )));
            }
        }

        let mut adj: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
        for &(i, j, w) in edges {
            adj[i as usize].push((j, w));
            adj[j as usize].push((i, w));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for list in adj.iter_mut() {
            list.sort_unstable();
            for &(j, w) in list.iter() {
                neighbors.push(j);
                weights.push(w);
            }
            offsets.push(neighbors.len());
        }
        Ok(InstanceGraph {
            node_ids,
            offsets,
            neighbors,
            weights,
        })
    }

    pub fn n(&self) -> usize {
        self.node_ids.len()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_id(&self, v: usize) -> &str {
        &self.node_ids[v]
    }

    /// Dense index of a node id, if present.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        // node_ids are not necessarily sorted after k-core relabeling, so scan.
        self.node_ids.iter().position(|x| x == id)
    }

    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    /// Neighbor/weight pairs of one node.
    pub fn neighbors_weighted(&self, v: usize) -> impl Iterator<Item = (u32, u32)> + '_ {
        let r = self.offsets[v]..self.offsets[v + 1];
        self.neighbors[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// All undirected edges once, as `(i, j, weight)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(u32, u32, u32)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for i in 0..self.n() {
            for (j, w) in self.neighbors_weighted(i) {
                if (i as u32) < j {
                    out.push((i as u32, j, w));
                }
            }
        }
        out
    }

    /// Binary adjacency of the subgraph induced by `nodes` (in the given
    /// order), as a b x b tensor with zero diagonal. Nodes must be distinct
    /// and in range.
    pub fn induced_adjacency(&self, nodes: &[usize]) -> Result<Tensor> {
        let b = nodes.len();
        let mut local = BTreeMap::new();
        for (pos, &v) in nodes.iter().enumerate() {
            if v >= self.n() {
                return Err(SlipError::InvalidInput(format!(
                    "node {} out of range for {} nodes",
                    v,
                    self.n()
                )));
            }
            if local.insert(v, pos).is_some() {
                return Err(SlipError::InvalidInput(format!(
                    "node {} listed twice in batch",
                    v
                )));
            }
        }
        let mut adj = Tensor::zeros(b, b);
        for (pos, &v) in nodes.iter().enumerate() {
            for &u in self.neighbors(v) {
                if let Some(&q) = local.get(&(u as usize)) {
                    adj.set(pos, q, 1.0);
                    adj.set(q, pos, 1.0);
                }
            }
        }
        Ok(adj)
    }

    /// Subgraph induced by `nodes`: keeps exactly those nodes (in the given
    /// order, which becomes the new indexing) and the edges whose endpoints
    /// are both listed. Nodes must be distinct and in range.
    pub fn induced(&self, nodes: &[usize]) -> Result<InstanceGraph> {
        let mut local = BTreeMap::new();
        for (pos, &v) in nodes.iter().enumerate() {
            if v >= self.n() {
                return Err(SlipError::InvalidInput(format!(
                    "node {} out of range for {} nodes",
                    v,
                    self.n()
                )));
            }
            if local.insert(v, pos as u32).is_some() {
                return Err(SlipError::InvalidInput(format!(
                    "node {} listed twice in subgraph",
                    v
                )));
            }
        }
        let node_ids: Vec<String> = nodes.iter().map(|&v| self.node_ids[v].clone()).collect();
        let mut edges = Vec::new();
        for &(i, j, w) in &self.edges() {
            if let (Some(&a), Some(&b)) = (local.get(&(i as usize)), local.get(&(j as usize))) {
                edges.push((a, b, w));
            }
        }
        InstanceGraph::from_edges(node_ids, &edges)
    }

    /// Keep only edges with weight at least `min_weight`, then drop nodes
    /// left isolated. Used by the alternative filter order where thresholding
    /// runs after coreness instead of before.
    pub fn filter_edges_by_weight(&self, min_weight: u32) -> InstanceGraph {
        let kept_edges: Vec<(u32, u32, u32)> = self
            .edges()
            .into_iter()
            .filter(|&(_, _, w)| w >= min_weight)
            .collect();
        let mut used = vec![false; self.n()];
        for &(i, j, _) in &kept_edges {
            used[i as usize] = true;
            used[j as usize] = true;
        }
        let mut remap = vec![u32::MAX; self.n()];
        let mut node_ids = Vec::new();
        for v in 0..self.n() {
            if used[v] {
                remap[v] = node_ids.len() as u32;
                node_ids.push(self.node_ids[v].clone());
            }
        }
        let edges: Vec<(u32, u32, u32)> = kept_edges
            .into_iter()
            .map(|(i, j, w)| (remap[i as usize], remap[j as usize], w))
            .collect();
        InstanceGraph::from_edges(node_ids, &edges).expect("remapped edges are valid")
    }
}

/// Project a purchase log onto its items: an edge connects two items exactly
/// when at least `min_cofreq` distinct users interacted with both. Duplicate
/// purchases by one user count once. Items that end up with no edges are
/// still kept as isolated nodes.
pub fn project_bipartite(log: &BipartiteLog, min_cofreq: u32) -> Result<InstanceGraph> {
    if min_cofreq == 0 {
        return Err(SlipError::InvalidInput(
            "minimum co-purchase frequency must be at least 1".into(),
        ));
    }
    let node_ids = log.item_ids();
    let index: BTreeMap<&str, u32> = node_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i as u32))
        .collect();

    // Distinct items per user.
    let mut baskets: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for r in log.records() {
        baskets
            .entry(r.user_id.as_str())
            .or_default()
            .insert(index[r.item_id.as_str()]);
    }

    // Count distinct users per item pair.
    let mut pair_users: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    for basket in baskets.values() {
        let items: Vec<u32> = basket.iter().copied().collect();
        for a in 0..items.len() {
            for b in a + 1..items.len() {
                *pair_users.entry((items[a], items[b])).or_insert(0) += 1;
            }
        }
    }

    let edges: Vec<(u32, u32, u32)> = pair_users
        .into_iter()
        .filter(|&(_, c)| c >= min_cofreq)
        .map(|((i, j), c)| (i, j, c))
        .collect();
    InstanceGraph::from_edges(node_ids, &edges)
}

/// Maximal subgraph in which every node has degree at least `k`, obtained by
/// repeatedly deleting under-degree nodes until a fixpoint. The fixpoint is
/// unique, so deletion order does not matter. `k = 0` returns the graph
/// unchanged. Surviving nodes are re-indexed densely, preserving order.
pub fn k_core(g: &InstanceGraph, k: u32) -> InstanceGraph {
    let n = g.n();
    let mut degree: Vec<usize> = (0..n).map(|v| g.degree(v)).collect();
    let mut removed = vec![false; n];
    let mut queue: VecDeque<usize> = (0..n).filter(|&v| degree[v] < k as usize).collect();
    for &v in &queue {
        removed[v] = true;
    }
    while let Some(v) = queue.pop_front() {
        for &u in g.neighbors(v) {
            let u = u as usize;
            if !removed[u] {
                degree[u] -= 1;
                if degree[u] < k as usize {
                    removed[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }

    let mut remap = vec![u32::MAX; n];
    let mut node_ids = Vec::new();
    for v in 0..n {
        if !removed[v] {
            remap[v] = node_ids.len() as u32;
            node_ids.push(g.node_id(v).to_string());
        }
    }
    let edges: Vec<(u32, u32, u32)> = g
        .edges()
        .into_iter()
        .filter(|&(i, j, _)| !removed[i as usize] && !removed[j as usize])
        .map(|(i, j, w)| (remap[i as usize], remap[j as usize], w))
        .collect();
    InstanceGraph::from_edges(node_ids, &edges).expect("k-core edges are valid")
}

/// Pairwise hop distances between `nodes` inside the subgraph they induce.
/// Entries are BFS distances saturated at `max_hop + 1`; the saturation value
/// also stands in for "unreachable". The diagonal is zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopMatrix {
    b: usize,
    max_hop: u32,
    data: Vec<u32>,
}

impl HopMatrix {
    pub fn b(&self) -> usize {
        self.b
    }

    /// The saturation ceiling: every stored distance is at most this.
    pub fn max_hop(&self) -> u32 {
        self.max_hop
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.data[i * self.b + j]
    }
}

/// BFS hop distances between all pairs of `nodes`, computed in the induced
/// subgraph only: paths through nodes outside the batch do not count.
/// Distances greater than `max_hop` (including unreachable pairs) saturate to
/// `max_hop + 1`.
pub fn hop_distance_matrix(g: &InstanceGraph, nodes: &[usize], max_hop: u32) -> Result<HopMatrix> {
    let b = nodes.len();
    let mut local = BTreeMap::new();
    for (pos, &v) in nodes.iter().enumerate() {
        if v >= g.n() {
            return Err(SlipError::InvalidInput(format!(
                "node {} out of range for {} nodes",
                v,
                g.n()
            )));
        }
        if local.insert(v, pos).is_some() {
            return Err(SlipError::InvalidInput(format!(
                "node {} listed twice in batch",
                v
            )));
        }
    }
    // Local adjacency lists of the induced subgraph.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); b];
    for (pos, &v) in nodes.iter().enumerate() {
        for &u in g.neighbors(v) {
            if let Some(&q) = local.get(&(u as usize)) {
                adj[pos].push(q);
            }
        }
    }

    let far = max_hop + 1;
    let mut data = vec![far; b * b];
    let mut dist = vec![u32::MAX; b];
    let mut frontier = VecDeque::new();
    for s in 0..b {
        dist.iter_mut().for_each(|d| *d = u32::MAX);
        dist[s] = 0;
        frontier.clear();
        frontier.push_back(s);
        while let Some(v) = frontier.pop_front() {
            if dist[v] >= far {
                continue;
            }
            for &u in &adj[v] {
                if dist[u] == u32::MAX {
                    dist[u] = dist[v] + 1;
                    frontier.push_back(u);
                }
            }
        }
        for t in 0..b {
            data[s * b + t] = dist[t].min(far);
        }
    }
    Ok(HopMatrix {
        b,
        max_hop,
        data,
    })
}

/// Positive and negative pair masks for one batch.
///
/// `pos(i, j)` is 1 exactly when `0 < dist(i, j) <= h`; the diagonal is
/// always 0. `neg` is the complement of `pos` off the diagonal, so
/// `pos + neg + identity` is the all-ones matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopMasks {
    b: usize,
    h: u32,
    pos: Vec<u8>,
    neg: Vec<u8>,
}

impl HopMasks {
    pub fn b(&self) -> usize {
        self.b
    }

    /// The hop threshold the masks were built with.
    pub fn h(&self) -> u32 {
        self.h
    }

    #[inline]
    pub fn pos(&self, i: usize, j: usize) -> bool {
        self.pos[i * self.b + j] != 0
    }

    #[inline]
    pub fn neg(&self, i: usize, j: usize) -> bool {
        self.neg[i * self.b + j] != 0
    }

    /// Number of ordered positive pairs.
    pub fn pos_count(&self) -> usize {
        self.pos.iter().filter(|&&v| v != 0).count()
    }

    /// Positive mask as a 0/1 tensor.
    pub fn pos_tensor(&self) -> Tensor {
        Tensor::new(
            self.b,
            self.b,
            self.pos.iter().map(|&v| v as f64).collect(),
        )
        .expect("mask dimensions are consistent")
    }

    /// Negative mask as a 0/1 tensor.
    pub fn neg_tensor(&self) -> Tensor {
        Tensor::new(
            self.b,
            self.b,
            self.neg.iter().map(|&v| v as f64).collect(),
        )
        .expect("mask dimensions are consistent")
    }
}

/// Build positive/negative masks from a hop-distance matrix with threshold
/// `h >= 1`. The matrix diagonal must be zero and `h` must not exceed the
/// matrix saturation ceiling, otherwise saturated entries would be
/// indistinguishable from genuine h-hop neighbors.
pub fn build_masks(d: &HopMatrix, h: u32) -> Result<HopMasks> {
    if h == 0 {
        return Err(SlipError::InvalidInput(
            "hop threshold must be at least 1".into(),
        ));
    }
    if h > d.max_hop() {
        return Err(SlipError::InvalidInput(format!(
            "hop threshold {} exceeds the distance matrix ceiling {}",
            h,
            d.max_hop()
        )));
    }
    let b = d.b();
    for i in 0..b {
        if d.get(i, i) != 0 {
            return Err(SlipError::InvalidInput(format!(
                "distance matrix has a non-zero diagonal at {}",
                i
            )));
        }
    }
    let mut pos = vec![0u8; b * b];
    let mut neg = vec![0u8; b * b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let dist = d.get(i, j);
            if dist >= 1 && dist <= h {
                pos[i * b + j] = 1;
            } else {
                neg[i * b + j] = 1;
            }
        }
    }
    Ok(HopMasks { b, h, pos, neg })
}

/// Per-node scores used by [`graph_stats`]; `None` entries are skipped.
pub trait PairScorer {
    fn score(&self, node: usize) -> Option<f64>;
}

/// Summary row for the stats table. The score statistics are `None` when no
/// scorer was supplied or no node produced a score.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub score_mean: Option<f64>,
    pub score_std: Option<f64>,
}

/// Node/edge counts plus mean and population standard deviation of the
/// scorer's per-node values.
pub fn graph_stats(g: &InstanceGraph, scorer: Option<&dyn PairScorer>) -> GraphStats {
    let mut scores = Vec::new();
    if let Some(s) = scorer {
        for v in 0..g.n() {
            if let Some(x) = s.score(v) {
                scores.push(x);
            }
        }
    }
    let (score_mean, score_std) = if scores.is_empty() {
        (None, None)
    } else {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (Some(mean), Some(var.sqrt()))
    };
    GraphStats {
        nodes: g.n(),
        edges: g.edge_count(),
        score_mean,
        score_std,
    }
}
