//! Exact max-flow / min-cut on directed graphs with integer capacities.
//!
//! Dinic's algorithm: breadth-first level assignment, then blocking-flow
//! augmentation with per-node edge pointers. Capacities are `i64`, so every
//! arithmetic step is exact — the segmenter relies on the returned cut being
//! a true minimum, not an approximation.
//!
//! The minimum cut is read off the solved network by residual reachability:
//! the source side is the complement of the nodes that can still reach the
//! sink, i.e. the source-maximal minimum cut. Of all minimum cuts this is the
//! unique largest source side, which gives downstream code a deterministic
//! tie-breaking rule.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Edge {
    to: usize,
    cap: i64,
    flow: i64,
    rev: usize,
    /// True for caller-added edges; false for the residual counterparts the
    /// network adds internally.
    orig: bool,
}

/// A directed flow network with a fixed source and sink.
#[derive(Debug, Clone)]
pub struct FlowNetwork {
    source: usize,
    sink: usize,
    adj: Vec<Vec<Edge>>,
}

/// Snapshot of one caller-added edge after (or before) solving.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeInfo {
    pub from: usize,
    pub to: usize,
    pub cap: i64,
    pub flow: i64,
}

#[derive(Debug, Clone)]
pub struct MaxFlowResult {
    /// Total flow from source to sink.
    pub value: i64,
    /// `source_side[v]` is true iff `v` cannot reach the sink in the residual
    /// graph: the source-maximal minimum s-t cut.
    pub source_side: Vec<bool>,
}

impl FlowNetwork {
    pub fn new(nodes: usize, source: usize, sink: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::invalid_param("nodes", format!("{nodes} (need >= 2)")));
        }
        if source >= nodes || sink >= nodes {
            return Err(Error::invalid_param(
                "source/sink",
                format!("{source}/{sink} out of range for {nodes} nodes"),
            ));
        }
        if source == sink {
            return Err(Error::invalid_param("source/sink", "must differ"));
        }
        Ok(FlowNetwork {
            source,
            sink,
            adj: vec![Vec::new(); nodes],
        })
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn sink(&self) -> usize {
        self.sink
    }

    /// Adds a directed edge with the given capacity (and its zero-capacity
    /// residual counterpart). Antiparallel and parallel edges are fine;
    /// self-loops and negative capacities are not.
    pub fn add_edge(&mut self, from: usize, to: usize, cap: i64) -> Result<()> {
        let n = self.adj.len();
        if from >= n || to >= n {
            return Err(Error::invalid_param(
                "edge",
                format!("({from} -> {to}) out of range for {n} nodes"),
            ));
        }
        if from == to {
            return Err(Error::invalid_param("edge", format!("self-loop at {from}")));
        }
        if cap < 0 {
            return Err(Error::invalid_param(
                "capacity",
                format!("{cap} on ({from} -> {to}) is negative"),
            ));
        }
        let rev_from = self.adj[to].len();
        let rev_to = self.adj[from].len();
        self.adj[from].push(Edge {
            to,
            cap,
            flow: 0,
            rev: rev_from,
            orig: true,
        });
        self.adj[to].push(Edge {
            to: from,
            cap: 0,
            flow: 0,
            rev: rev_to,
            orig: false,
        });
        Ok(())
    }

    /// Solves to optimality and returns the flow value plus the source side
    /// of a minimum cut. Safe to call again: the second call finds no
    /// augmenting path and reports the same result.
    pub fn max_flow(&mut self) -> MaxFlowResult {
        let n = self.adj.len();
        let mut level = vec![-1i32; n];
        let mut iter = vec![0usize; n];
        loop {
            if !self.bfs_levels(&mut level) {
                break;
            }
            iter.iter_mut().for_each(|i| *i = 0);
            while self.dfs_augment(self.source, i64::MAX, &level, &mut iter) > 0 {}
        }
        // Residual counterparts of edges into the source carry negated flow,
        // so the plain sum over the adjacency list is the net outflow.
        let value = self.adj[self.source].iter().map(|e| e.flow).sum();
        MaxFlowResult {
            value,
            source_side: self.source_maximal_side(),
        }
    }

    fn bfs_levels(&self, level: &mut [i32]) -> bool {
        level.iter_mut().for_each(|l| *l = -1);
        level[self.source] = 0;
        let mut queue = std::collections::VecDeque::from([self.source]);
        while let Some(v) = queue.pop_front() {
            for e in &self.adj[v] {
                if e.cap - e.flow > 0 && level[e.to] < 0 {
                    level[e.to] = level[v] + 1;
                    queue.push_back(e.to);
                }
            }
        }
        level[self.sink] >= 0
    }

    fn dfs_augment(&mut self, v: usize, limit: i64, level: &[i32], iter: &mut [usize]) -> i64 {
        if v == self.sink {
            return limit;
        }
        while iter[v] < self.adj[v].len() {
            let (to, residual, rev) = {
                let e = &self.adj[v][iter[v]];
                (e.to, e.cap - e.flow, e.rev)
            };
            if residual > 0 && level[to] == level[v] + 1 {
                let pushed = self.dfs_augment(to, limit.min(residual), level, iter);
                if pushed > 0 {
                    let idx = iter[v];
                    self.adj[v][idx].flow += pushed;
                    self.adj[to][rev].flow -= pushed;
                    return pushed;
                }
            }
            iter[v] += 1;
        }
        0
    }

    /// Complement of the residual-sink-reaching set. Walks backward from the
    /// sink: node x joins when some residual edge x -> w leads to a node w
    /// already known to reach the sink. For each stored edge w -> x, the
    /// residual capacity of the opposite direction x -> w lives in its
    /// paired edge `adj[x][e.rev]`.
    fn source_maximal_side(&self) -> Vec<bool> {
        let mut reaches_sink = vec![false; self.adj.len()];
        reaches_sink[self.sink] = true;
        let mut stack = vec![self.sink];
        while let Some(w) = stack.pop() {
            for e in &self.adj[w] {
                let pair = &self.adj[e.to][e.rev];
                if pair.cap - pair.flow > 0 && !reaches_sink[e.to] {
                    reaches_sink[e.to] = true;
                    stack.push(e.to);
                }
            }
        }
        reaches_sink.iter().map(|&r| !r).collect()
    }

    /// All caller-added edges with their current flow.
    pub fn edges(&self) -> Vec<EdgeInfo> {
        let mut out = Vec::new();
        for (from, edges) in self.adj.iter().enumerate() {
            for e in edges.iter().filter(|e| e.orig) {
                out.push(EdgeInfo {
                    from,
                    to: e.to,
                    cap: e.cap,
                    flow: e.flow,
                });
            }
        }
        out
    }

    /// Verifies 0 <= flow <= cap on every edge and net flow zero at every
    /// non-terminal node. Intended for tests and debugging.
    pub fn check_conservation(&self) -> Result<()> {
        let mut net = vec![0i64; self.adj.len()];
        for e in self.edges() {
            if e.flow < 0 || e.flow > e.cap {
                return Err(Error::Invalid(format!(
                    "edge ({} -> {}): flow {} outside [0, {}]",
                    e.from, e.to, e.flow, e.cap
                )));
            }
            net[e.from] += e.flow;
            net[e.to] -= e.flow;
        }
        for (v, &balance) in net.iter().enumerate() {
            if v != self.source && v != self.sink && balance != 0 {
                return Err(Error::Invalid(format!(
                    "node {v}: net outflow {balance}, expected 0"
                )));
            }
        }
        Ok(())
    }
}
