//! Agent network topology and the combination matrix.
//!
//! Agents are dropped uniformly in the unit square and linked when within
//! a communication radius. Combination weights come from the Metropolis
//! (Hastings) rule, which each agent can compute from its own and its
//! neighbors' neighborhood sizes and which yields a symmetric,
//! doubly-stochastic matrix with positive diagonal on any connected graph.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DOUBLY_STOCHASTIC_TOL: f64 = 1e-12;

/// Cap on matrix powers in [`consensus_check`].
pub const CONSENSUS_MAX_ITERS: usize = 1_000_000;

/// Undirected graph with self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    adjacency: Array2<bool>,
    positions: Vec<[f64; 2]>,
    radius: f64,
}

impl Topology {
    /// Builds a topology from an edge list. Self-loops are added.
    pub fn from_edges(n_agents: usize, edges: &[(usize, usize)], positions: Vec<[f64; 2]>) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::Argument("topology needs at least one agent".into()));
        }
        if positions.len() != n_agents {
            return Err(Error::Shape(format!(
                "{} positions for {n_agents} agents",
                positions.len()
            )));
        }
        let mut adjacency = Array2::from_elem((n_agents, n_agents), false);
        for k in 0..n_agents {
            adjacency[[k, k]] = true;
        }
        for &(a, b) in edges {
            if a >= n_agents || b >= n_agents {
                return Err(Error::Argument(format!("edge ({a}, {b}) out of range")));
            }
            adjacency[[a, b]] = true;
            adjacency[[b, a]] = true;
        }
        Ok(Self {
            adjacency,
            positions,
            radius: 0.0,
        })
    }

    pub fn ring(n_agents: usize) -> Self {
        let edges: Vec<_> = (0..n_agents).map(|k| (k, (k + 1) % n_agents)).collect();
        let positions = (0..n_agents)
            .map(|k| {
                let phi = 2.0 * std::f64::consts::PI * k as f64 / n_agents as f64;
                [0.5 + 0.5 * phi.cos(), 0.5 + 0.5 * phi.sin()]
            })
            .collect();
        Self::from_edges(n_agents, &edges, positions).expect("ring is valid")
    }

    pub fn complete(n_agents: usize) -> Self {
        let mut edges = Vec::new();
        for a in 0..n_agents {
            for b in a + 1..n_agents {
                edges.push((a, b));
            }
        }
        let positions = vec![[0.5, 0.5]; n_agents];
        let mut t = Self::from_edges(n_agents, &edges, positions).expect("complete graph is valid");
        t.radius = std::f64::consts::SQRT_2;
        t
    }

    pub fn n_agents(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &Array2<bool> {
        &self.adjacency
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    /// Communication radius used to build the graph (0 for hand-built graphs).
    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Neighborhood of `k`, including `k`, in increasing order.
    pub fn neighbors(&self, k: usize) -> Vec<usize> {
        (0..self.n_agents()).filter(|&l| self.adjacency[[k, l]]).collect()
    }

    /// `|N_k|`, counting `k` itself.
    pub fn degree(&self, k: usize) -> usize {
        self.adjacency.row(k).iter().filter(|x| **x).count()
    }

    /// Mean neighborhood size (self included).
    pub fn average_degree(&self) -> f64 {
        let total: usize = (0..self.n_agents()).map(|k| self.degree(k)).sum();
        total as f64 / self.n_agents() as f64
    }

    /// Undirected edges `(a, b)` with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_agents();
        let mut out = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if self.adjacency[[a, b]] {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_agents();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(k) = queue.pop_front() {
            for l in 0..n {
                if self.adjacency[[k, l]] && !seen[l] {
                    seen[l] = true;
                    queue.push_back(l);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Text export: a header line, one `node <k> <x> <y>` line per agent
    /// and one `edge <a> <b>` line per undirected edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# diffdac topology v1").unwrap();
        writeln!(out, "agents {}", self.n_agents()).unwrap();
        writeln!(out, "radius {}", self.radius).unwrap();
        for (k, p) in self.positions.iter().enumerate() {
            writeln!(out, "node {k} {} {}", p[0], p[1]).unwrap();
        }
        for (a, b) in self.edges() {
            writeln!(out, "edge {a} {b}").unwrap();
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut n_agents = None;
        let mut radius = 0.0;
        let mut positions = Vec::new();
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Parse(format!("topology line {}: `{line}`", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["agents", n] => n_agents = Some(n.parse::<usize>().map_err(|_| bad())?),
                ["radius", r] => radius = r.parse::<f64>().map_err(|_| bad())?,
                ["node", k, x, y] => {
                    let k: usize = k.parse().map_err(|_| bad())?;
                    if k != positions.len() {
                        return Err(bad());
                    }
                    positions.push([x.parse().map_err(|_| bad())?, y.parse().map_err(|_| bad())?]);
                }
                ["edge", a, b] => edges.push((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)),
                _ => return Err(bad()),
            }
        }
        let n = n_agents.ok_or_else(|| Error::Parse("topology is missing `agents`".into()))?;
        let mut t = Self::from_edges(n, &edges, positions)?;
        t.radius = radius;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_edge_list())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_edge_list(&std::fs::read_to_string(path)?)
    }
}

fn geometric_adjacency(positions: &[[f64; 2]], radius: f64) -> Array2<bool> {
    let n = positions.len();
    Array2::from_shape_fn((n, n), |(a, b)| a == b || distance(positions[a], positions[b]) <= radius)
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn uniform_positions<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<[f64; 2]> {
    (0..n).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect()
}

fn connect_by_growth(positions: Vec<[f64; 2]>, mut radius: f64) -> Topology {
    loop {
        let topology = Topology {
            adjacency: geometric_adjacency(&positions, radius),
            positions: positions.clone(),
            radius,
        };
        // Any radius >= sqrt(2) links every pair in the unit square.
        if topology.is_connected() || radius >= std::f64::consts::SQRT_2 {
            return topology;
        }
        radius *= 1.1;
    }
}

/// Random geometric graph in the unit square. If the draw is disconnected
/// the radius grows by 10% (positions kept) until it is connected.
pub fn random_geometric_topology<R: Rng + ?Sized>(n: usize, radius: f64, rng: &mut R) -> Result<Topology> {
    if n == 0 {
        return Err(Error::Argument("need at least one agent".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Argument(format!("radius {radius} must be > 0")));
    }
    Ok(connect_by_growth(uniform_positions(n, rng), radius))
}

/// Random geometric graph whose radius is chosen so that the mean
/// neighborhood size (self included) is as close to `target_degree` as the
/// draw allows. Disconnected draws are redrawn; after
/// `DEGREE_ATTEMPTS` failures the last draw's radius is grown instead.
pub fn geometric_topology_with_degree<R: Rng + ?Sized>(
    n: usize,
    target_degree: f64,
    rng: &mut R,
) -> Result<Topology> {
    if n == 0 {
        return Err(Error::Argument("need at least one agent".into()));
    }
    if n == 1 {
        return Ok(connect_by_growth(uniform_positions(n, rng), std::f64::consts::SQRT_2));
    }
    if !(target_degree >= 1.0) {
        return Err(Error::Argument(format!("target degree {target_degree} must be >= 1")));
    }
    let mut last = None;
    for _ in 0..DEGREE_ATTEMPTS {
        let positions = uniform_positions(n, rng);
        let mut dists = Vec::with_capacity(n * (n - 1) / 2);
        for a in 0..n {
            for b in a + 1..n {
                dists.push(distance(positions[a], positions[b]));
            }
        }
        dists.sort_by(|a, b| a.total_cmp(b));
        // Mean degree 1 + 2E/n, so E = (target - 1) n / 2 edges.
        let edges = (((target_degree - 1.0) * n as f64 / 2.0).round() as usize).clamp(1, dists.len());
        let topology = Topology {
            adjacency: geometric_adjacency(&positions, dists[edges - 1]),
            positions,
            radius: dists[edges - 1],
        };
        if topology.is_connected() {
            return Ok(topology);
        }
        last = Some(topology);
    }
    let last = last.expect("at least one attempt");
    Ok(connect_by_growth(last.positions, last.radius))
}

const DEGREE_ATTEMPTS: usize = 10_000;

/// The named networks used in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetPreset {
    /// 25 agents, mean neighborhood size about 4.2.
    N25Sparse,
    /// 25 agents, mean neighborhood size about 7.4.
    N25Dense,
    /// 100 agents, mean neighborhood size about 20.
    N100,
}

impl NetPreset {
    pub const ALL: [NetPreset; 3] = [NetPreset::N25Sparse, NetPreset::N25Dense, NetPreset::N100];

    pub fn name(self) -> &'static str {
        match self {
            NetPreset::N25Sparse => "n25_sparse",
            NetPreset::N25Dense => "n25_dense",
            NetPreset::N100 => "n100",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Argument(format!("unknown network preset `{name}`")))
    }

    pub fn n_agents(self) -> usize {
        match self {
            NetPreset::N100 => 100,
            _ => 25,
        }
    }

    pub fn target_degree(self) -> f64 {
        match self {
            NetPreset::N25Sparse => 4.2,
            NetPreset::N25Dense => 7.4,
            NetPreset::N100 => 20.0,
        }
    }

    pub fn build(self, seed: u64) -> Topology {
        let mut rng = crate::seeded_rng(seed, &[0x6e6574, self.n_agents() as u64]);
        geometric_topology_with_degree(self.n_agents(), self.target_degree(), &mut rng)
            .expect("preset parameters are valid")
    }
}

/// Column-stochastic weights `c_{lk}`: agent `k` mixes with weight `c_{lk}`
/// the parameters received from neighbor `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationMatrix {
    weights: Array2<f64>,
}

impl CombinationMatrix {
    /// Validates nonnegativity, double stochasticity and positive trace.
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        let (r, c) = weights.dim();
        if r != c || r == 0 {
            return Err(Error::Shape(format!("combination matrix is {r}x{c}")));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Invariant("combination weights must be >= 0".into()));
        }
        for k in 0..r {
            let col: f64 = weights.column(k).sum();
            let row: f64 = weights.row(k).sum();
            if (col - 1.0).abs() > DOUBLY_STOCHASTIC_TOL || (row - 1.0).abs() > DOUBLY_STOCHASTIC_TOL {
                return Err(Error::Invariant(format!(
                    "row/column {k} sums to {row}/{col}, expected 1"
                )));
            }
        }
        if weights.diag().sum() <= 0.0 {
            return Err(Error::Invariant("combination matrix has zero trace".into()));
        }
        Ok(Self { weights })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weights: Array2::eye(n),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Nonzero entries of column `k`: `(l, c_{lk})` for every `l` feeding `k`.
    pub fn column_weights(&self, k: usize) -> Vec<(usize, f64)> {
        self.weights
            .column(k)
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(l, w)| (l, *w))
            .collect()
    }

    /// True when every positive weight sits on an edge of `topology`.
    pub fn respects(&self, topology: &Topology) -> bool {
        self.weights
            .indexed_iter()
            .all(|((l, k), w)| *w == 0.0 || topology.adjacency[[l, k]])
    }
}

/// Metropolis weights `c_{lk} = 1 / max(|N_k|, |N_l|)` for neighbors
/// `l != k`, with the remainder on the diagonal.
pub fn hastings_weights(topology: &Topology) -> Result<CombinationMatrix> {
    if !topology.is_connected() {
        return Err(Error::Argument("topology is not connected".into()));
    }
    let n = topology.n_agents();
    let degrees: Vec<usize> = (0..n).map(|k| topology.degree(k)).collect();
    let mut weights = Array2::zeros((n, n));
    for k in 0..n {
        let mut off = 0.0;
        for l in 0..n {
            if l != k && topology.adjacency[[l, k]] {
                let w = 1.0 / degrees[k].max(degrees[l]) as f64;
                weights[[l, k]] = w;
                off += w;
            }
        }
        weights[[k, k]] = 1.0 - off;
    }
    CombinationMatrix::new(weights)
}

/// Smallest `i` with `max |C^i - 11^T / N| <= tol`.
pub fn consensus_check(c: &CombinationMatrix, tol: f64) -> Result<usize> {
    let n = c.n_agents();
    let target = 1.0 / n as f64;
    let gap = |m: &Array2<f64>| m.iter().fold(0.0f64, |g, x| g.max((x - target).abs()));
    let mut power = Array2::<f64>::eye(n);
    let mut residual = gap(&power);
    for i in 0..=CONSENSUS_MAX_ITERS {
        if residual <= tol {
            return Ok(i);
        }
        power = power.dot(&c.weights);
        residual = gap(&power);
    }
    Err(Error::NoConvergence {
        iterations: CONSENSUS_MAX_ITERS,
        residual,
    })
}
