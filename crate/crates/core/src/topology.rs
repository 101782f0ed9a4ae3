//! Communication graphs: generators, validation, metrics, and the edge-list format.
//!
//! Agents are the contiguous integers `0..L`. Edges are stored as `(i, j)` with
//! `i < j`, sorted lexicographically; arcs are both orientations of every edge,
//! also sorted lexicographically. That arc order fixes the column order of the
//! incidence matrices built in [`crate::spectral`].

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{self, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("a {kind} topology needs at least {min} agents, got {agents}")]
    TooFewAgents {
        kind: TopologyKind,
        agents: usize,
        min: usize,
    },
    #[error("connectivity ratio {0} is outside (0, 1]")]
    InvalidRatio(f64),
    #[error("{edges} edges cannot connect {agents} agents (need at least {min})")]
    BelowSpanningTree {
        agents: usize,
        edges: usize,
        min: usize,
    },
    #[error("{edges} edges exceed the {max} available pairs")]
    TooManyEdges { edges: usize, max: usize },
    #[error("imbalance {imbalance} is infeasible for {agents} agents")]
    InvalidImbalance { agents: usize, imbalance: usize },
    #[error("grid extents {0:?} give fewer than two agents")]
    DegenerateGrid([usize; 3]),
    #[error("self-loop at agent {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) appears twice")]
    DuplicateEdge(usize, usize),
    #[error("agent {agent} out of range for {agents} agents")]
    AgentOutOfRange { agent: usize, agents: usize },
    #[error("graph is disconnected: BFS from agent 0 reached {reached} of {agents} agents")]
    Disconnected { reached: usize, agents: usize },
    #[error("edge list line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Random,
    Line,
    Cycle,
    Star,
    Complete,
    Grid3d,
    Bipartite,
}

impl TopologyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TopologyKind::Random => "random",
            TopologyKind::Line => "line",
            TopologyKind::Cycle => "cycle",
            TopologyKind::Star => "star",
            TopologyKind::Complete => "complete",
            TopologyKind::Grid3d => "grid3d",
            TopologyKind::Bipartite => "bipartite",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TopologyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "random" => TopologyKind::Random,
            "line" => TopologyKind::Line,
            "cycle" => TopologyKind::Cycle,
            "star" => TopologyKind::Star,
            "complete" => TopologyKind::Complete,
            "grid3d" => TopologyKind::Grid3d,
            "bipartite" => TopologyKind::Bipartite,
            other => return Err(format!("unknown topology kind `{other}`")),
        })
    }
}

/// A connected, undirected, simple graph over `L` agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    agents: usize,
    edges: Vec<(usize, usize)>,
    kind: TopologyKind,
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Validates and canonicalizes an edge set. Edge orientation in the input
    /// does not matter.
    pub fn from_edges(
        agents: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        kind: TopologyKind,
    ) -> Result<Self, TopologyError> {
        if agents < 2 {
            return Err(TopologyError::TooFewAgents {
                kind,
                agents,
                min: 2,
            });
        }
        let mut seen = HashSet::new();
        let mut canonical = Vec::new();
        for (a, b) in edges {
            for agent in [a, b] {
                if agent >= agents {
                    return Err(TopologyError::AgentOutOfRange { agent, agents });
                }
            }
            if a == b {
                return Err(TopologyError::SelfLoop(a));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(TopologyError::DuplicateEdge(e.0, e.1));
            }
            canonical.push(e);
        }
        canonical.sort_unstable();

        let mut neighbors = vec![Vec::new(); agents];
        for &(i, j) in &canonical {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        let topology = Topology {
            agents,
            edges: canonical,
            kind,
            neighbors,
        };
        let reached = topology.bfs_distances(0).iter().flatten().count();
        if reached != agents {
            return Err(TopologyError::Disconnected { reached, agents });
        }
        Ok(topology)
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn neighbors(&self, agent: usize) -> &[usize] {
        &self.neighbors[agent]
    }

    pub fn degree(&self, agent: usize) -> usize {
        self.neighbors[agent].len()
    }

    /// Both orientations of every edge, sorted lexicographically (2E arcs).
    pub fn arcs(&self) -> Vec<(usize, usize)> {
        let mut arcs: Vec<_> = self
            .edges
            .iter()
            .flat_map(|&(i, j)| [(i, j), (j, i)])
            .collect();
        arcs.sort_unstable();
        arcs
    }

    fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.agents];
        let mut queue = VecDeque::from([source]);
        dist[source] = Some(0);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &w in &self.neighbors[u] {
                if dist[w].is_none() {
                    dist[w] = Some(du + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Two-colors the graph; `None` when an odd cycle exists.
    pub fn bipartition(&self) -> Option<Vec<bool>> {
        let dist = self.bfs_distances(0);
        let side: Vec<bool> = dist.iter().map(|d| d.unwrap_or(0) % 2 == 1).collect();
        self.edges
            .iter()
            .all(|&(i, j)| side[i] != side[j])
            .then_some(side)
    }

    /// Edge-list text: a `L E kind` header followed by one `i j` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{} {} {}\n", self.agents, self.edges.len(), self.kind);
        for (i, j) in &self.edges {
            out.push_str(&format!("{i} {j}\n"));
        }
        out
    }

    pub fn parse_edge_list(text: &str) -> Result<Self, TopologyError> {
        let parse_err = |line: usize, message: String| TopologyError::Parse { line, message };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing `L E kind` header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(
                hline,
                format!("expected `L E kind`, got `{header}`"),
            ));
        }
        let agents: usize = fields[0]
            .parse()
            .map_err(|e| parse_err(hline, format!("agent count: {e}")))?;
        let declared: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(hline, format!("edge count: {e}")))?;
        let kind: TopologyKind = fields[2].parse().map_err(|e| parse_err(hline, e))?;

        let mut edges = Vec::with_capacity(declared);
        for (n, line) in lines {
            let mut it = line.split_whitespace();
            let mut next = || -> Result<usize, TopologyError> {
                it.next()
                    .ok_or_else(|| parse_err(n, "expected `i j`".into()))?
                    .parse()
                    .map_err(|e| parse_err(n, format!("{e}")))
            };
            let (i, j) = (next()?, next()?);
            if it.next().is_some() {
                return Err(parse_err(n, "trailing fields".into()));
            }
            edges.push((i, j));
        }
        if edges.len() != declared {
            return Err(parse_err(
                hline,
                format!("header declares {declared} edges, found {}", edges.len()),
            ));
        }
        Topology::from_edges(agents, edges, kind)
    }
}

/// `round(p · L(L−1)/2)` with halves rounded up.
pub fn target_edge_count(agents: usize, ratio: f64) -> usize {
    let pairs = (agents * agents.saturating_sub(1) / 2) as f64;
    (ratio * pairs + 0.5).floor() as usize
}

/// Uniform spanning tree over the candidate graph by loop-erased random walks
/// (Wilson's algorithm). `step` draws a uniform candidate neighbor of an agent.
fn wilson_tree<R: Rng>(
    agents: usize,
    rng: &mut R,
    mut step: impl FnMut(usize, &mut R) -> usize,
) -> Vec<(usize, usize)> {
    let mut in_tree = vec![false; agents];
    let mut next = vec![usize::MAX; agents];
    in_tree[rng.random_range(0..agents)] = true;
    let mut edges = Vec::with_capacity(agents - 1);
    for start in 0..agents {
        let mut u = start;
        while !in_tree[u] {
            next[u] = step(u, rng);
            u = next[u];
        }
        let mut u = start;
        while !in_tree[u] {
            in_tree[u] = true;
            let v = next[u];
            edges.push((u.min(v), u.max(v)));
            u = v;
        }
    }
    edges
}

/// Random spanning tree plus uniformly chosen extra candidate pairs.
fn tree_plus_extras<R: Rng>(
    agents: usize,
    target: usize,
    candidates: Vec<(usize, usize)>,
    rng: &mut R,
    step: impl FnMut(usize, &mut R) -> usize,
) -> Vec<(usize, usize)> {
    let mut edges = wilson_tree(agents, rng, step);
    let tree: HashSet<_> = edges.iter().copied().collect();
    let pool: Vec<_> = candidates
        .into_iter()
        .filter(|e| !tree.contains(e))
        .collect();
    let extra = target - edges.len();
    edges.extend(
        index::sample(rng, pool.len(), extra)
            .into_iter()
            .map(|k| pool[k]),
    );
    edges
}

/// Random connected graph with exactly `round(p·L(L−1)/2)` edges.
pub fn random_connected(agents: usize, ratio: f64, seed: u64) -> Result<Topology, TopologyError> {
    if agents < 2 {
        return Err(TopologyError::TooFewAgents {
            kind: TopologyKind::Random,
            agents,
            min: 2,
        });
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(TopologyError::InvalidRatio(ratio));
    }
    let target = target_edge_count(agents, ratio);
    if target < agents - 1 {
        return Err(TopologyError::BelowSpanningTree {
            agents,
            edges: target,
            min: agents - 1,
        });
    }
    let mut rng = seeding::rng(seed, Stream::Topology);
    let candidates: Vec<_> = (0..agents)
        .flat_map(|i| (i + 1..agents).map(move |j| (i, j)))
        .collect();
    let edges = tree_plus_extras(agents, target, candidates, &mut rng, |u, rng| {
        let r = rng.random_range(0..agents - 1);
        if r >= u {
            r + 1
        } else {
            r
        }
    });
    Topology::from_edges(agents, edges, TopologyKind::Random)
}

/// Line, cycle, star, or complete graph on `L` agents.
pub fn special(kind: TopologyKind, agents: usize) -> Result<Topology, TopologyError> {
    let min = match kind {
        TopologyKind::Cycle => 3,
        _ => 2,
    };
    if agents < min {
        return Err(TopologyError::TooFewAgents { kind, agents, min });
    }
    let edges: Vec<(usize, usize)> = match kind {
        TopologyKind::Line => (0..agents - 1).map(|i| (i, i + 1)).collect(),
        TopologyKind::Cycle => (0..agents).map(|i| (i, (i + 1) % agents)).collect(),
        TopologyKind::Star => (1..agents).map(|i| (0, i)).collect(),
        TopologyKind::Complete => (0..agents)
            .flat_map(|i| (i + 1..agents).map(move |j| (i, j)))
            .collect(),
        other => panic!("`{other}` is not a closed-form special topology"),
    };
    Topology::from_edges(agents, edges, kind)
}

/// Lattice points of an `nx × ny × nz` box joined at Manhattan distance 1.
pub fn grid3d(nx: usize, ny: usize, nz: usize) -> Result<Topology, TopologyError> {
    let agents = nx * ny * nz;
    if agents < 2 {
        return Err(TopologyError::DegenerateGrid([nx, ny, nz]));
    }
    let id = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
    let mut edges = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if x + 1 < nx {
                    edges.push((id(x, y, z), id(x + 1, y, z)));
                }
                if y + 1 < ny {
                    edges.push((id(x, y, z), id(x, y + 1, z)));
                }
                if z + 1 < nz {
                    edges.push((id(x, y, z), id(x, y, z + 1)));
                }
            }
        }
    }
    Topology::from_edges(agents, edges, TopologyKind::Grid3d)
}

/// Sizes `(|A|, |B|)` of the two groups for imbalance `L_d = |A| − |B|`.
pub fn bipartite_groups(agents: usize, imbalance: usize) -> Result<(usize, usize), TopologyError> {
    if agents < 2 || imbalance > agents - 2 || !(agents + imbalance).is_multiple_of(2) {
        return Err(TopologyError::InvalidImbalance { agents, imbalance });
    }
    Ok(((agents + imbalance) / 2, (agents - imbalance) / 2))
}

/// Largest connectivity ratio a bipartite graph with this imbalance can reach.
pub fn bipartite_max_ratio(agents: usize, imbalance: usize) -> f64 {
    let (l, d) = (agents as f64, imbalance as f64);
    (l + d) * (l - d) / (2.0 * l * (l - 1.0))
}

/// Random connected bipartite graph: agents `0..|A|` form group A, the rest group B.
pub fn bipartite(
    agents: usize,
    imbalance: usize,
    ratio: f64,
    seed: u64,
) -> Result<Topology, TopologyError> {
    let (a, b) = bipartite_groups(agents, imbalance)?;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(TopologyError::InvalidRatio(ratio));
    }
    let target = target_edge_count(agents, ratio);
    if target < agents - 1 {
        return Err(TopologyError::BelowSpanningTree {
            agents,
            edges: target,
            min: agents - 1,
        });
    }
    if target > a * b {
        return Err(TopologyError::TooManyEdges {
            edges: target,
            max: a * b,
        });
    }
    let mut rng = seeding::rng(seed, Stream::Topology);
    let candidates: Vec<_> = (0..a)
        .flat_map(|i| (a..agents).map(move |j| (i, j)))
        .collect();
    let edges = tree_plus_extras(agents, target, candidates, &mut rng, |u, rng| {
        if u < a {
            rng.random_range(a..agents)
        } else {
            rng.random_range(0..a)
        }
    });
    Topology::from_edges(agents, edges, TopologyKind::Bipartite)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkMetrics {
    /// Connectivity ratio E / (L(L−1)/2).
    pub ratio: f64,
    pub diameter: usize,
    pub min_degree: usize,
    pub max_degree: usize,
    /// Geometric average degree √(d_min·d_max).
    pub geometric_degree: f64,
    /// `|A| − |B|` for bipartite-labelled topologies.
    pub imbalance: Option<usize>,
}

pub fn metrics(t: &Topology) -> NetworkMetrics {
    let l = t.agents();
    let diameter = (0..l)
        .map(|s| t.bfs_distances(s).into_iter().flatten().max().unwrap_or(0))
        .max()
        .unwrap_or(0);
    let degrees = (0..l).map(|i| t.degree(i));
    let min_degree = degrees.clone().min().unwrap_or(0);
    let max_degree = degrees.max().unwrap_or(0);
    let imbalance = match t.kind() {
        TopologyKind::Bipartite => t.bipartition().map(|side| {
            let ones = side.iter().filter(|&&s| s).count();
            ones.abs_diff(l - ones)
        }),
        _ => None,
    };
    NetworkMetrics {
        ratio: t.edge_count() as f64 / (l * (l - 1) / 2) as f64,
        diameter,
        min_degree,
        max_degree,
        geometric_degree: ((min_degree * max_degree) as f64).sqrt(),
        imbalance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_when_fully_connected() {
        for seed in 0..5 {
            let t = random_connected(3, 1.0, seed).unwrap();
            assert_eq!(t.edges(), &[(0, 1), (0, 2), (1, 2)]);
        }
        assert_eq!(random_connected(2, 1.0, 0).unwrap().edges(), &[(0, 1)]);
    }

    #[test]
    fn sparsest_ratio_gives_spanning_tree() {
        let t = random_connected(200, 0.01, 3).unwrap();
        assert_eq!(t.edge_count(), 199);
    }

    #[test]
    fn rejects_sub_tree_ratio_and_tiny_graphs() {
        assert!(matches!(
            random_connected(200, 0.005, 0),
            Err(TopologyError::BelowSpanningTree { .. })
        ));
        assert!(matches!(
            random_connected(1, 1.0, 0),
            Err(TopologyError::TooFewAgents { .. })
        ));
        assert_eq!(
            random_connected(10, 0.0, 0),
            Err(TopologyError::InvalidRatio(0.0))
        );
        assert!(random_connected(10, 1.5, 0).is_err());
    }

    #[test]
    fn special_shapes() {
        let line = special(TopologyKind::Line, 5).unwrap();
        assert_eq!(line.edge_count(), 4);
        let degrees: Vec<_> = (0..5).map(|i| line.degree(i)).collect();
        assert_eq!(degrees, [1, 2, 2, 2, 1]);

        let star = special(TopologyKind::Star, 200).unwrap();
        assert_eq!(star.edge_count(), 199);
        let m = metrics(&star);
        assert_eq!((m.max_degree, m.min_degree, m.diameter), (199, 1, 2));
        assert!((m.geometric_degree - 199f64.sqrt()).abs() < 1e-12);

        let complete = special(TopologyKind::Complete, 200).unwrap();
        assert_eq!(complete.edge_count(), 19900);
        let m = metrics(&complete);
        assert_eq!(m.diameter, 1);
        assert_eq!(m.geometric_degree, 199.0);
        assert_eq!(m.ratio, 1.0);

        assert!(special(TopologyKind::Cycle, 2).is_err());
        assert!(special(TopologyKind::Line, 1).is_err());
    }

    #[test]
    fn line_metrics() {
        let m = metrics(&special(TopologyKind::Line, 5).unwrap());
        assert_eq!(m.diameter, 4);
        assert!((m.geometric_degree - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m.imbalance, None);
    }

    #[test]
    fn grid_counts() {
        assert_eq!(grid3d(2, 5, 5).unwrap().agents(), 50);
        let g = grid3d(5, 5, 8).unwrap();
        assert_eq!((g.agents(), g.edge_count()), (200, 495));
        assert_eq!(grid3d(1, 1, 2).unwrap().edges(), &[(0, 1)]);
        assert_eq!(
            grid3d(1, 1, 1),
            Err(TopologyError::DegenerateGrid([1, 1, 1]))
        );
    }

    #[test]
    fn bipartite_extremes() {
        // L_d = L − 2 leaves a single agent on one side: a star.
        let ratio = 199.0 / (200.0 * 199.0 / 2.0);
        let t = bipartite(200, 198, ratio, 1).unwrap();
        let m = metrics(&t);
        assert_eq!((t.edge_count(), m.max_degree, m.min_degree), (199, 199, 1));
        assert_eq!(m.imbalance, Some(198));

        let k22 = bipartite(4, 0, 4.0 / 6.0, 0).unwrap();
        assert_eq!(k22.edges(), &[(0, 2), (0, 3), (1, 2), (1, 3)]);

        let full = bipartite(200, 0, bipartite_max_ratio(200, 0), 9).unwrap();
        assert_eq!(full.edge_count(), 10000);
        assert_eq!(metrics(&full).imbalance, Some(0));
    }

    #[test]
    fn bipartite_rejects_infeasible() {
        assert!(bipartite(200, 199, 0.5, 0).is_err());
        assert!(bipartite(200, 200, 0.5, 0).is_err());
        assert!(matches!(
            bipartite(200, 100, 0.9, 0),
            Err(TopologyError::TooManyEdges { .. })
        ));
        assert!(matches!(
            bipartite(200, 0, 0.001, 0),
            Err(TopologyError::BelowSpanningTree { .. })
        ));
    }

    #[test]
    fn from_edges_validation() {
        use TopologyKind::Random;
        assert_eq!(
            Topology::from_edges(3, [(0, 0)], Random),
            Err(TopologyError::SelfLoop(0))
        );
        assert_eq!(
            Topology::from_edges(3, [(0, 1), (1, 0), (1, 2)], Random),
            Err(TopologyError::DuplicateEdge(0, 1))
        );
        assert_eq!(
            Topology::from_edges(4, [(0, 1), (2, 3)], Random),
            Err(TopologyError::Disconnected {
                reached: 2,
                agents: 4
            })
        );
        assert!(matches!(
            Topology::from_edges(3, [(0, 5)], Random),
            Err(TopologyError::AgentOutOfRange { .. })
        ));
    }

    #[test]
    fn arcs_are_sorted_both_directions() {
        let t = special(TopologyKind::Line, 3).unwrap();
        assert_eq!(t.arcs(), vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
    }

    #[test]
    fn edge_list_roundtrip_and_errors() {
        let t = bipartite(12, 2, 0.4, 5).unwrap();
        let text = t.to_edge_list();
        assert!(text.starts_with(&format!("12 {} bipartite\n", t.edge_count())));
        assert_eq!(Topology::parse_edge_list(&text).unwrap(), t);

        assert!(matches!(
            Topology::parse_edge_list("3 2 line\n0 1\n"),
            Err(TopologyError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Topology::parse_edge_list("3 1 hexagon\n0 1\n"),
            Err(TopologyError::Parse { .. })
        ));
        assert!(matches!(
            Topology::parse_edge_list("2 1 line\n0 x\n"),
            Err(TopologyError::Parse { line: 2, .. })
        ));
    }
}
