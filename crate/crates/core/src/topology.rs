//! Consensus graphs, hierarchical coordination matrices and solve sequences.
//!
//! Client ids are zero-based throughout.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    Centralized,
    Decentralized,
}

/// Consensus constraints between clients. Decentralized edges are stored as `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusGraph {
    mode: GraphMode,
    n: usize,
    active: Vec<usize>,
    edges: Vec<(usize, usize)>,
}

impl ConsensusGraph {
    /// Star around an implicit server.
    pub fn centralized(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("at least one client required"));
        }
        Ok(ConsensusGraph { mode: GraphMode::Centralized, n, active: (0..n).collect(), edges: vec![] })
    }

    pub fn decentralized(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("at least one client required"));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a == b {
                return Err(Error::Topology(format!("self-loop on client {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::Topology(format!("edge ({a}, {b}) outside {n} clients")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let graph = ConsensusGraph {
            mode: GraphMode::Decentralized,
            n,
            active: (0..n).collect(),
            edges: set.into_iter().collect(),
        };
        if !graph.is_connected() {
            return Err(Error::Topology("consensus graph is not connected".into()));
        }
        Ok(graph)
    }

    pub fn mode(&self) -> GraphMode {
        self.mode
    }

    /// Number of client slots, including dropped clients.
    pub fn capacity(&self) -> usize {
        self.n
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn is_active(&self, id: usize) -> bool {
        self.active.binary_search(&id).is_ok()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, id: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| match (a == id, b == id) {
                (true, _) => Some(b),
                (_, true) => Some(a),
                _ => None,
            })
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        if self.mode == GraphMode::Centralized || self.active.len() <= 1 {
            return true;
        }
        let mut seen = BTreeSet::from([self.active[0]]);
        let mut stack = vec![self.active[0]];
        while let Some(u) = stack.pop() {
            for w in self.neighbors(u) {
                if seen.insert(w) {
                    stack.push(w);
                }
            }
        }
        seen.len() == self.active.len()
    }
}

pub fn chain_graph(n: usize) -> Result<ConsensusGraph> {
    if n < 2 {
        return Err(Error::param(format!("a chain needs at least 2 clients, got {n}")));
    }
    let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
    ConsensusGraph::decentralized(n, &edges)
}

/// Square matrix where `h[i][j] = 1` marks `i` as a direct descendant of `j`
/// and `h[i][i]` is the out-degree of `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchicalMatrix {
    rows: Vec<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NotSquare { row: usize, len: usize, expected: usize },
    OffDiagonal { row: usize, col: usize, value: i64 },
    Diagonal { node: usize, diagonal: i64, out_degree: i64 },
    Cycle { nodes: Vec<usize> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotSquare { row, len, expected } => {
                write!(f, "row {row} has {len} entries, expected {expected}")
            }
            Violation::OffDiagonal { row, col, value } => {
                write!(f, "entry ({row}, {col}) is {value}, expected 0 or 1")
            }
            Violation::Diagonal { node, diagonal, out_degree } => {
                write!(f, "diagonal of node {node} is {diagonal} but its out-degree is {out_degree}")
            }
            Violation::Cycle { nodes } => write!(f, "descendant cycle through nodes {nodes:?}"),
        }
    }
}

impl HierarchicalMatrix {
    pub fn new(rows: Vec<Vec<i64>>) -> Self {
        HierarchicalMatrix { rows }
    }

    /// Whitespace-separated integers, one row per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<i64>()
                        .map_err(|_| Error::param(format!("line {}: `{tok}` is not an integer", lineno + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::param("empty hierarchical matrix"));
        }
        Ok(HierarchicalMatrix { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<i64>] {
        &self.rows
    }

    pub fn to_text(&self) -> String {
        self.rows
            .iter()
            .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ") + "\n")
            .collect()
    }

    fn parents_of(&self, i: usize) -> Vec<usize> {
        (0..self.size()).filter(|&j| j != i && self.rows[i][j] == 1).collect()
    }

    /// Builds the matrix from per-node parent lists.
    pub fn from_parents(parents: &[Vec<usize>]) -> Self {
        let n = parents.len();
        let mut rows = vec![vec![0; n]; n];
        for (i, ps) in parents.iter().enumerate() {
            for &p in ps {
                rows[i][p] = 1;
            }
            rows[i][i] = ps.len() as i64;
        }
        HierarchicalMatrix { rows }
    }
}

pub fn validate_matrix(h: &HierarchicalMatrix) -> Vec<Violation> {
    let n = h.size();
    let mut out = Vec::new();
    for (i, row) in h.rows.iter().enumerate() {
        if row.len() != n {
            out.push(Violation::NotSquare { row: i, len: row.len(), expected: n });
        }
    }
    if !out.is_empty() {
        return out;
    }
    for i in 0..n {
        let mut degree = 0;
        for j in 0..n {
            let v = h.rows[i][j];
            if i != j {
                if v != 0 && v != 1 {
                    out.push(Violation::OffDiagonal { row: i, col: j, value: v });
                }
                degree += (v == 1) as i64;
            }
        }
        if h.rows[i][i] != degree {
            out.push(Violation::Diagonal { node: i, diagonal: h.rows[i][i], out_degree: degree });
        }
    }
    if let Err(nodes) = heights(h) {
        out.push(Violation::Cycle { nodes });
    }
    out
}

/// Longest descendant path length below each node (leaves are 0), or the nodes left on a cycle.
fn heights(h: &HierarchicalMatrix) -> std::result::Result<Vec<usize>, Vec<usize>> {
    let n = h.size();
    let mut pending: Vec<usize> = (0..n)
        .map(|j| (0..n).filter(|&i| i != j && h.rows[i][j] == 1).count())
        .collect();
    let mut height = vec![0usize; n];
    let mut ready: Vec<usize> = (0..n).filter(|&j| pending[j] == 0).collect();
    let mut done = 0;
    while let Some(i) = ready.pop() {
        done += 1;
        for p in h.parents_of(i) {
            height[p] = height[p].max(height[i] + 1);
            pending[p] -= 1;
            if pending[p] == 0 {
                ready.push(p);
            }
        }
    }
    if done < n {
        return Err((0..n).filter(|&j| pending[j] > 0).collect());
    }
    Ok(height)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordinationMode {
    FullCycle,
    PartialCycle,
    SelectiveRepetitive,
}

/// Ordered solve levels for one inner sweep. Levels are barriers; members of a level are independent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinationSequence {
    levels: Vec<Vec<usize>>,
    mode: CoordinationMode,
    /// Parent lists indexed by client id, when built from a hierarchy.
    parents: Option<Vec<Vec<usize>>>,
}

impl CoordinationSequence {
    pub fn new(levels: Vec<Vec<usize>>, mode: CoordinationMode) -> Result<Self> {
        let levels: Vec<Vec<usize>> = levels.into_iter().filter(|l| !l.is_empty()).collect();
        if levels.is_empty() {
            return Err(Error::param("coordination sequence schedules no client"));
        }
        let seq = CoordinationSequence { levels, mode, parents: None };
        if mode != CoordinationMode::SelectiveRepetitive {
            let mut seen = BTreeSet::new();
            if let Some(&dup) = seq.iter().find(|&&c| !seen.insert(c)) {
                return Err(Error::Topology(format!("client {dup} scheduled twice in a {mode:?} sequence")));
            }
        }
        Ok(seq)
    }

    /// All clients in one level (the centralized case; the server is the implicit root).
    pub fn single_level(n: usize) -> Self {
        CoordinationSequence { levels: vec![(0..n).collect()], mode: CoordinationMode::FullCycle, parents: None }
    }

    /// One client per level in index order.
    pub fn in_order(n: usize) -> Self {
        CoordinationSequence {
            levels: (0..n).map(|i| vec![i]).collect(),
            mode: CoordinationMode::FullCycle,
            parents: None,
        }
    }

    pub fn levels(&self) -> &[Vec<usize>] {
        &self.levels
    }

    pub fn mode(&self) -> CoordinationMode {
        self.mode
    }

    pub fn iter(&self) -> impl Iterator<Item = &usize> {
        self.levels.iter().flatten()
    }

    pub fn first_level(&self) -> &[usize] {
        &self.levels[0]
    }

    pub fn parents(&self) -> Option<&[Vec<usize>]> {
        self.parents.as_deref()
    }

    /// Reconstructs the hierarchy this sequence was derived from.
    pub fn to_matrix(&self) -> Option<HierarchicalMatrix> {
        self.parents.as_ref().map(|p| HierarchicalMatrix::from_parents(p))
    }

    /// Keeps only `selected` clients, preserving level order.
    pub fn restrict(&self, selected: &[usize]) -> CoordinationSequence {
        let keep: BTreeSet<usize> = selected.iter().copied().collect();
        CoordinationSequence {
            levels: self
                .levels
                .iter()
                .map(|l| l.iter().copied().filter(|c| keep.contains(c)).collect::<Vec<_>>())
                .filter(|l| !l.is_empty())
                .collect(),
            mode: CoordinationMode::PartialCycle,
            parents: self.parents.clone(),
        }
    }

    /// Checks the schedule against the active clients of `graph`.
    pub fn validate_for(&self, graph: &ConsensusGraph) -> Result<()> {
        if let Some(&c) = self.iter().find(|&&c| !graph.is_active(c)) {
            return Err(Error::Topology(format!("client {c} is scheduled but not active")));
        }
        if self.mode == CoordinationMode::FullCycle {
            let mut scheduled: Vec<usize> = self.iter().copied().collect();
            scheduled.sort_unstable();
            if scheduled != graph.active() {
                return Err(Error::Topology("full-cycle sequence must schedule every active client once".into()));
            }
        }
        if let Some(parents) = &self.parents {
            for level in &self.levels {
                for &a in level {
                    for &b in level {
                        if a != b && is_ancestor(parents, a, b) {
                            return Err(Error::Topology(format!("clients {a} and {b} share a level but are related")));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn is_ancestor(parents: &[Vec<usize>], ancestor: usize, node: usize) -> bool {
    let mut stack = parents[node].clone();
    let mut seen = BTreeSet::new();
    while let Some(p) = stack.pop() {
        if p == ancestor {
            return true;
        }
        if seen.insert(p) {
            stack.extend(parents[p].iter().copied());
        }
    }
    false
}

/// Levels by height: leaves first, roots last.
pub fn levels_from_matrix(h: &HierarchicalMatrix) -> Result<CoordinationSequence> {
    let violations = validate_matrix(h);
    if let Some(v) = violations.first() {
        return Err(Error::Topology(format!("invalid hierarchical matrix: {v}")));
    }
    let heights = heights(h).map_err(|nodes| Error::Topology(format!("cycle through {nodes:?}")))?;
    let depth = heights.iter().copied().max().unwrap_or(0) + 1;
    let mut levels = vec![Vec::new(); depth];
    for (node, &ht) in heights.iter().enumerate() {
        levels[ht].push(node);
    }
    Ok(CoordinationSequence {
        levels,
        mode: CoordinationMode::FullCycle,
        parents: Some((0..h.size()).map(|i| h.parents_of(i)).collect()),
    })
}

/// Seeded random partial-cycle selection of `per_sweep` distinct clients per sweep.
///
/// Clients are dealt from a shuffled deck that is refilled when exhausted, so over any
/// window every client is picked within one of the uniform count.
#[derive(Debug, Clone)]
pub struct PartialCycleScheduler {
    per_sweep: usize,
    rng: ChaCha8Rng,
    deck: Vec<usize>,
}

impl PartialCycleScheduler {
    pub fn new(per_sweep: usize, seed: u64) -> Result<Self> {
        if per_sweep == 0 {
            return Err(Error::param("partial-cycle sweeps must select at least one client"));
        }
        Ok(PartialCycleScheduler { per_sweep, rng: ChaCha8Rng::seed_from_u64(seed), deck: Vec::new() })
    }

    /// The clients of the next sweep, in draw order.
    pub fn next_selection(&mut self, graph: &ConsensusGraph) -> Vec<usize> {
        let active = graph.active();
        let k = self.per_sweep.min(active.len());
        let mut picked = Vec::with_capacity(k);
        while picked.len() < k {
            let Some(c) = self.deck.pop() else {
                let mut fresh: Vec<usize> = active.iter().copied().filter(|c| !picked.contains(c)).collect();
                fresh.shuffle(&mut self.rng);
                // Deal from the back.
                fresh.reverse();
                self.deck = fresh;
                continue;
            };
            if graph.is_active(c) && !picked.contains(&c) {
                picked.push(c);
            }
        }
        picked
    }

    pub fn next_sweep(&mut self, base: &CoordinationSequence, graph: &ConsensusGraph) -> CoordinationSequence {
        let picked = self.next_selection(graph);
        base.restrict(&picked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Restitch {
    /// Link the dropped client's neighbors into a path in id order.
    #[default]
    NeighborPath,
    /// Only delete incident edges.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconfiguration {
    pub sequence: CoordinationSequence,
    pub graph: ConsensusGraph,
    pub removed_edges: Vec<(usize, usize)>,
    pub added_edges: Vec<(usize, usize)>,
}

pub fn drop_client(seq: &CoordinationSequence, graph: &ConsensusGraph, id: usize) -> Result<Reconfiguration> {
    drop_client_with(seq, graph, id, Restitch::NeighborPath)
}

pub fn drop_client_with(
    seq: &CoordinationSequence,
    graph: &ConsensusGraph,
    id: usize,
    restitch: Restitch,
) -> Result<Reconfiguration> {
    if !graph.is_active(id) {
        return Err(Error::Topology(format!("client {id} is not active")));
    }
    if graph.active.len() == 1 {
        return Err(Error::Topology("cannot drop the last client".into()));
    }
    let mut next = graph.clone();
    next.active.retain(|&c| c != id);

    let (removed_edges, kept): (Vec<_>, Vec<_>) =
        graph.edges.iter().partition(|&&(a, b)| a == id || b == id);
    let mut edges: BTreeSet<(usize, usize)> = kept.into_iter().collect();
    let mut added_edges = Vec::new();
    if restitch == Restitch::NeighborPath {
        let mut nbrs = graph.neighbors(id);
        nbrs.sort_unstable();
        for w in nbrs.windows(2) {
            if edges.insert((w[0], w[1])) {
                added_edges.push((w[0], w[1]));
            }
        }
    }
    next.edges = edges.into_iter().collect();
    if !next.is_connected() {
        return Err(Error::Topology(format!("dropping client {id} disconnects the consensus graph")));
    }

    let parents = seq.parents.as_ref().map(|parents| {
        let mut parents = parents.clone();
        let grand = parents[id].clone();
        for (c, ps) in parents.iter_mut().enumerate() {
            if c != id && ps.contains(&id) {
                ps.retain(|&p| p != id);
                for &g in &grand {
                    if !ps.contains(&g) {
                        ps.push(g);
                    }
                }
                ps.sort_unstable();
            }
        }
        parents[id].clear();
        parents
    });
    let sequence = CoordinationSequence {
        levels: seq
            .levels
            .iter()
            .map(|l| l.iter().copied().filter(|&c| c != id).collect::<Vec<_>>())
            .filter(|l| !l.is_empty())
            .collect(),
        mode: seq.mode,
        parents,
    };
    Ok(Reconfiguration { sequence, graph: next, removed_edges, added_edges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain3() -> HierarchicalMatrix {
        HierarchicalMatrix::new(vec![vec![1, 1, 0], vec![0, 1, 1], vec![0, 0, 0]])
    }

    fn star(leaves: usize) -> HierarchicalMatrix {
        // Node 0 is the root.
        let n = leaves + 1;
        let mut rows = vec![vec![0; n]; n];
        for (i, row) in rows.iter_mut().enumerate().skip(1) {
            row[0] = 1;
            row[i] = 1;
        }
        HierarchicalMatrix::new(rows)
    }

    #[test]
    fn validate_examples() {
        assert!(validate_matrix(&chain3()).is_empty());
        assert!(validate_matrix(&HierarchicalMatrix::new(vec![vec![0]])).is_empty());
        let bad = HierarchicalMatrix::new(vec![vec![2, 1], vec![0, 0]]);
        assert_eq!(validate_matrix(&bad), vec![Violation::Diagonal { node: 0, diagonal: 2, out_degree: 1 }]);
        let cyc = HierarchicalMatrix::new(vec![vec![1, 1], vec![1, 1]]);
        assert!(matches!(validate_matrix(&cyc).as_slice(), [Violation::Cycle { .. }]));
        let ragged = HierarchicalMatrix::new(vec![vec![0, 0], vec![0]]);
        assert!(matches!(validate_matrix(&ragged).as_slice(), [Violation::NotSquare { row: 1, .. }]));
        let nonbinary = HierarchicalMatrix::new(vec![vec![0, 2], vec![0, 0]]);
        assert!(validate_matrix(&nonbinary).iter().any(|v| matches!(v, Violation::OffDiagonal { .. })));
    }

    #[test]
    fn levels_examples() {
        assert_eq!(levels_from_matrix(&chain3()).unwrap().levels(), &[vec![0], vec![1], vec![2]]);
        assert_eq!(levels_from_matrix(&star(3)).unwrap().levels(), &[vec![1, 2, 3], vec![0]]);
        assert_eq!(levels_from_matrix(&HierarchicalMatrix::new(vec![vec![0]])).unwrap().levels(), &[vec![0]]);
        let cyc = HierarchicalMatrix::new(vec![vec![1, 1], vec![1, 1]]);
        assert!(matches!(levels_from_matrix(&cyc), Err(Error::Topology(_))));
    }

    #[test]
    fn matrix_text_round_trip() {
        let h = HierarchicalMatrix::parse("1 1 0\n0 1 1 # middle\n\n0 0 0\n").unwrap();
        assert_eq!(h, chain3());
        assert_eq!(HierarchicalMatrix::parse(&h.to_text()).unwrap(), h);
        assert!(HierarchicalMatrix::parse("1 x").is_err());
    }

    #[test]
    fn chain_examples() {
        assert_eq!(chain_graph(3).unwrap().edges(), &[(0, 1), (1, 2)]);
        assert_eq!(chain_graph(2).unwrap().edges(), &[(0, 1)]);
        let g = chain_graph(5).unwrap();
        assert_eq!(g.edges().len(), 4);
        assert!(g.is_connected());
        assert!(chain_graph(1).is_err());
        assert!(ConsensusGraph::decentralized(3, &[(0, 1)]).is_err());
        assert!(ConsensusGraph::decentralized(2, &[(1, 1)]).is_err());
    }

    #[test]
    fn drop_examples() {
        let seq = levels_from_matrix(&chain3()).unwrap();
        let r = drop_client(&seq, &chain_graph(3).unwrap(), 1).unwrap();
        assert_eq!(r.graph.edges(), &[(0, 2)]);
        assert_eq!(r.removed_edges, vec![(0, 1), (1, 2)]);
        assert_eq!(r.added_edges, vec![(0, 2)]);
        assert_eq!(r.sequence.levels(), &[vec![0], vec![2]]);
        // The orphaned child now reports to the dropped client's parent.
        assert_eq!(r.sequence.parents().unwrap()[0], vec![2]);
        r.sequence.validate_for(&r.graph).unwrap();

        let star_seq = CoordinationSequence::single_level(4);
        let r = drop_client(&star_seq, &ConsensusGraph::centralized(4).unwrap(), 2).unwrap();
        assert_eq!(r.graph.active(), &[0, 1, 3]);
        assert_eq!(r.sequence.levels(), &[vec![0, 1, 3]]);

        let r = drop_client(&CoordinationSequence::in_order(2), &chain_graph(2).unwrap(), 1).unwrap();
        assert_eq!(r.graph.active(), &[0]);
        assert!(r.graph.edges().is_empty());
        assert!(r.graph.is_connected());

        let err = drop_client_with(&CoordinationSequence::in_order(3), &chain_graph(3).unwrap(), 1, Restitch::None);
        assert!(matches!(err, Err(Error::Topology(_))));
    }

    #[test]
    fn sequence_validation() {
        let g = chain_graph(3).unwrap();
        CoordinationSequence::in_order(3).validate_for(&g).unwrap();
        let missing = CoordinationSequence::new(vec![vec![0], vec![1]], CoordinationMode::FullCycle).unwrap();
        assert!(missing.validate_for(&g).is_err());
        assert!(CoordinationSequence::new(vec![vec![0], vec![0]], CoordinationMode::FullCycle).is_err());
        let rep = CoordinationSequence::new(vec![vec![0], vec![1], vec![0]], CoordinationMode::SelectiveRepetitive)
            .unwrap();
        rep.validate_for(&g).unwrap();
        let partial = CoordinationSequence::new(vec![vec![1]], CoordinationMode::PartialCycle).unwrap();
        partial.validate_for(&g).unwrap();
        assert!(CoordinationSequence::new(vec![vec![]], CoordinationMode::PartialCycle).is_err());
    }

    #[test]
    fn partial_cycle_is_roughly_uniform() {
        let n = 8;
        let g = ConsensusGraph::centralized(n).unwrap();
        let base = CoordinationSequence::single_level(n);
        for per_sweep in [1, 3] {
            let mut sched = PartialCycleScheduler::new(per_sweep, 42).unwrap();
            let sweeps = 10 * n;
            let mut counts = vec![0usize; n];
            for _ in 0..sweeps {
                let s = sched.next_sweep(&base, &g);
                assert_eq!(s.iter().count(), per_sweep);
                for &c in s.iter() {
                    counts[c] += 1;
                }
            }
            let expected = (sweeps * per_sweep) as f64 / n as f64;
            for c in counts {
                assert!((c as f64 - expected).abs() <= 0.2 * expected, "count {c} vs {expected}");
            }
        }
    }

    /// Random forests given as parent lists over nodes ordered so parents have larger ids.
    fn forest() -> impl Strategy<Value = Vec<Vec<usize>>> {
        (1usize..9).prop_flat_map(|n| {
            prop::collection::vec(prop::collection::vec(any::<prop::sample::Index>(), 0..3), n).prop_map(move |raw| {
                raw.into_iter()
                    .enumerate()
                    .map(|(i, picks)| {
                        let mut ps: Vec<usize> = if i + 1 < n {
                            picks.into_iter().map(|ix| i + 1 + ix.index(n - i - 1)).collect()
                        } else {
                            vec![]
                        };
                        ps.sort_unstable();
                        ps.dedup();
                        ps
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn levels_round_trip_and_cover(parents in forest()) {
            let n = parents.len();
            let h = HierarchicalMatrix::from_parents(&parents);
            prop_assert!(validate_matrix(&h).is_empty());
            let seq = levels_from_matrix(&h).unwrap();
            prop_assert_eq!(seq.to_matrix().unwrap(), h);
            let mut all: Vec<usize> = seq.iter().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            // Every child is solved in a strictly earlier level than its parents.
            let level_of = |c: usize| seq.levels().iter().position(|l| l.contains(&c)).unwrap();
            for (c, ps) in parents.iter().enumerate() {
                for &p in ps {
                    prop_assert!(level_of(c) < level_of(p));
                }
            }
            prop_assert!(seq.validate_for(&ConsensusGraph::centralized(n).unwrap()).is_ok());
        }

        #[test]
        fn drop_keeps_graph_connected(n in 2usize..10, extra in prop::collection::vec((0usize..10, 0usize..10), 0..6), victim in 0usize..10) {
            let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
            edges.extend(extra.into_iter().filter(|&(a, b)| a < n && b < n && a != b));
            let g = ConsensusGraph::decentralized(n, &edges).unwrap();
            let r = drop_client(&CoordinationSequence::in_order(n), &g, victim % n).unwrap();
            prop_assert!(r.graph.is_connected());
            prop_assert_eq!(r.graph.active().len(), n - 1);
            prop_assert!(r.sequence.validate_for(&r.graph).is_ok());
        }
    }
}
