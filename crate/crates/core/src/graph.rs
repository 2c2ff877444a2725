//! Observation encoder and per-timestep agent graphs.

use std::rc::Rc;

use crate::env::{Observation, Pos};
use crate::error::{Error, Result};
use crate::numeric::{Activation, Matrix, NeighborLists, ParamId, ParamStore, RngStream, Tape, Var};

/// Where layer weights come from when building a forward pass: trainable
/// leaves, or frozen constants (target network).
#[derive(Clone, Copy)]
pub enum Binding<'a> {
    Train(&'a ParamStore),
    Frozen(&'a ParamStore),
}

impl<'a> Binding<'a> {
    pub fn bind(self, tape: &mut Tape, id: ParamId) -> Result<Var> {
        match self {
            Binding::Train(s) => tape.param(s, id),
            Binding::Frozen(s) => tape.constant(s.value(id).clone()),
        }
    }

    pub fn store(self) -> &'a ParamStore {
        match self {
            Binding::Train(s) | Binding::Frozen(s) => s,
        }
    }
}

/// Dense embedding of flattened observations into node features.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        obs_dim: usize,
        feature_dim: usize,
        activation: Activation,
        rng: &mut RngStream,
    ) -> Self {
        let weight = store.add_glorot("encoder.weight", obs_dim, feature_dim, rng);
        let bias = store.add("encoder.bias", Matrix::zeros(1, feature_dim));
        Encoder {
            weight,
            bias,
            activation,
        }
    }

    /// `act(obs W + b)` with dead rows forced to zero. `obs` is
    /// `N x obs_dim`, `alive[n]` is 1.0 or 0.0.
    pub fn forward(&self, tape: &mut Tape, b: Binding, obs: Var, alive: Rc<[f64]>) -> Result<Var> {
        let w = b.bind(tape, self.weight)?;
        let bias = b.bind(tape, self.bias)?;
        let h = tape.matmul(obs, w)?;
        let h = tape.add_row(h, bias)?;
        let h = tape.activation(h, self.activation)?;
        tape.scale_rows(h, alive)
    }
}

/// Stacks flattened observations into an `N x obs_dim` matrix.
pub fn stack_observations(obs: &[Observation]) -> Result<Matrix> {
    let dim = obs.first().map_or(0, |o| o.as_slice().len());
    let mut data = Vec::with_capacity(obs.len() * dim);
    for o in obs {
        if o.as_slice().len() != dim {
            return Err(Error::dim("stack_observations", "observation shapes differ"));
        }
        data.extend_from_slice(o.as_slice());
    }
    Matrix::from_vec(obs.len(), dim, data)
}

/// Node features for one timestep.
pub fn embed_observations(
    obs: &[Observation],
    alive: &[bool],
    encoder: &Encoder,
    store: &ParamStore,
) -> Result<Matrix> {
    if obs.len() != alive.len() {
        return Err(Error::dim("embed_observations", "alive mask length"));
    }
    let stacked = stack_observations(obs)?;
    let expected = store.value(encoder.weight).rows();
    if stacked.cols() != expected {
        return Err(Error::dim(
            "embed_observations",
            format!("observation width {} vs encoder input {expected}", stacked.cols()),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(stacked)?;
    let out = encoder.forward(&mut tape, Binding::Frozen(store), x, alive_weights(alive))?;
    Ok(tape.value(out).clone())
}

pub fn alive_weights(alive: &[bool]) -> Rc<[f64]> {
    alive.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShiftKind {
    /// Neighbor adjacency plus self-loops on alive nodes.
    Adjacency,
    /// Out-degree minus neighbor adjacency.
    Laplacian,
    /// Row-normalized neighbor adjacency; isolated rows stay zero.
    RandomWalk,
}

impl ShiftKind {
    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::Adjacency => "adjacency",
            ShiftKind::Laplacian => "laplacian",
            ShiftKind::RandomWalk => "random_walk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adjacency" => Some(ShiftKind::Adjacency),
            "laplacian" => Some(ShiftKind::Laplacian),
            "random_walk" => Some(ShiftKind::RandomWalk),
            _ => None,
        }
    }
}

/// Directed k-nearest-neighbor graph over a fixed node universe. Dead nodes
/// stay in the universe but have no edges.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSnapshot {
    alive: Vec<bool>,
    neighbors: Vec<Vec<usize>>,
}

impl GraphSnapshot {
    /// Builds a snapshot from explicit neighbor lists. Lists must not
    /// contain the node itself, dead nodes, or duplicates.
    pub fn from_neighbors(alive: Vec<bool>, neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = alive.len();
        if neighbors.len() != n {
            return Err(Error::dim("graph", "neighbor list count"));
        }
        for (i, list) in neighbors.iter().enumerate() {
            if !alive[i] && !list.is_empty() {
                return Err(Error::Contract(format!("dead node {i} has neighbors")));
            }
            let mut seen = std::collections::HashSet::new();
            for &j in list {
                if j >= n || j == i || !alive[j] || !seen.insert(j) {
                    return Err(Error::Contract(format!("invalid edge {i}->{j}")));
                }
            }
        }
        Ok(GraphSnapshot { alive, neighbors })
    }

    pub fn num_nodes(&self) -> usize {
        self.alive.len()
    }

    pub fn alive(&self) -> &[bool] {
        &self.alive
    }

    /// B_n for every node.
    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    /// Attention neighborhoods: the node itself followed by B_n for alive
    /// nodes, empty for dead ones.
    pub fn attention_sets(&self) -> Vec<Vec<usize>> {
        self.neighbors
            .iter()
            .enumerate()
            .map(|(i, b)| {
                if self.alive[i] {
                    std::iter::once(i).chain(b.iter().copied()).collect()
                } else {
                    Vec::new()
                }
            })
            .collect()
    }

    /// 0/1 matrix with `a[n][j] = 1` for `j` in B_n. No self-loops.
    pub fn adjacency(&self) -> Matrix {
        let n = self.num_nodes();
        let mut a = Matrix::zeros(n, n);
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                a[(i, j)] = 1.0;
            }
        }
        a
    }

    /// Snapshot with node `i` taking the role of old node `order[i]`.
    pub fn relabel(&self, order: &[usize]) -> Result<GraphSnapshot> {
        let n = self.num_nodes();
        if order.len() != n {
            return Err(Error::dim("relabel", "order length"));
        }
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::Contract("relabel order is not a permutation".into()));
            }
            inverse[old] = new;
        }
        let alive = order.iter().map(|&o| self.alive[o]).collect();
        let neighbors = order
            .iter()
            .map(|&o| self.neighbors[o].iter().map(|&j| inverse[j]).collect())
            .collect();
        Ok(GraphSnapshot { alive, neighbors })
    }
}

/// Links each alive agent to its `k` nearest alive agents by Manhattan
/// distance, ties to the lower index.
pub fn build_graph(positions: &[Pos], alive: &[bool], k: usize) -> Result<GraphSnapshot> {
    if positions.len() != alive.len() {
        return Err(Error::dim("build_graph", "positions vs alive mask"));
    }
    let n = positions.len();
    let mut neighbors = vec![Vec::new(); n];
    let mut candidates = Vec::with_capacity(n);
    for i in (0..n).filter(|&i| alive[i]) {
        candidates.clear();
        candidates.extend(
            (0..n)
                .filter(|&j| j != i && alive[j])
                .map(|j| (positions[i].manhattan(positions[j]), j)),
        );
        candidates.sort_unstable();
        neighbors[i] = candidates.iter().take(k).map(|&(_, j)| j).collect();
    }
    Ok(GraphSnapshot {
        alive: alive.to_vec(),
        neighbors,
    })
}

pub fn shift_operator(g: &GraphSnapshot, kind: ShiftKind) -> Matrix {
    let mut a = g.adjacency();
    let n = g.num_nodes();
    match kind {
        ShiftKind::Adjacency => {
            for i in (0..n).filter(|&i| g.alive[i]) {
                a[(i, i)] = 1.0;
            }
            a
        }
        ShiftKind::Laplacian => {
            let mut l = a.scale(-1.0);
            for i in 0..n {
                l[(i, i)] = g.neighbors[i].len() as f64;
            }
            l
        }
        ShiftKind::RandomWalk => {
            for i in 0..n {
                let d = g.neighbors[i].len();
                if d > 0 {
                    a.row_mut(i).iter_mut().for_each(|v| *v /= d as f64);
                }
            }
            a
        }
    }
}

/// Flattened neighbor lists for a batch of snapshots stacked block-wise,
/// node `i` of snapshot `b` becoming `b * N + i`.
pub fn batched_attention_sets(graphs: &[&GraphSnapshot]) -> NeighborLists {
    let mut lists = Vec::new();
    let mut offset = 0;
    for g in graphs {
        for set in g.attention_sets() {
            lists.push(set.into_iter().map(|j| j + offset).collect());
        }
        offset += g.num_nodes();
    }
    NeighborLists::new(&lists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{observe, reset, EnvConfig};

    #[test]
    fn two_agents_see_each_other() {
        let g = build_graph(&[Pos::new(0, 0), Pos::new(5, 5)], &[true, true], 3).unwrap();
        assert_eq!(g.neighbors(), &[vec![1], vec![0]]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let pos = [Pos::new(2, 2), Pos::new(2, 3), Pos::new(1, 2), Pos::new(3, 2)];
        let g = build_graph(&pos, &[true; 4], 2).unwrap();
        assert_eq!(g.neighbors()[0], vec![1, 2]);
    }

    #[test]
    fn random_positions_match_exhaustive_sort() {
        let mut rng = RngStream::new(8);
        for _ in 0..50 {
            let pos: Vec<Pos> = (0..5).map(|_| Pos::new(rng.below(6), rng.below(6))).collect();
            let alive: Vec<bool> = (0..5).map(|_| rng.next_f64() < 0.8).collect();
            let g = build_graph(&pos, &alive, 2).unwrap();
            for i in 0..5 {
                if !alive[i] {
                    assert!(g.neighbors()[i].is_empty());
                    continue;
                }
                // oracle: all pairs, stable sort by distance keeps index order
                let mut others: Vec<usize> = (0..5).filter(|&j| j != i && alive[j]).collect();
                others.sort_by_key(|&j| {
                    let d = (pos[i].row as i64 - pos[j].row as i64).abs()
                        + (pos[i].col as i64 - pos[j].col as i64).abs();
                    d
                });
                others.truncate(2);
                assert_eq!(g.neighbors()[i], others);
            }
        }
    }

    #[test]
    fn shift_operators() {
        let g = GraphSnapshot::from_neighbors(vec![true; 3], vec![vec![1], vec![0, 2], vec![1]])
            .unwrap();
        let l = shift_operator(&g, ShiftKind::Laplacian);
        let expected =
            Matrix::from_rows(&[vec![1.0, -1.0, 0.0], vec![-1.0, 2.0, -1.0], vec![0.0, -1.0, 1.0]])
                .unwrap();
        assert_eq!(l, expected);
        let rw = shift_operator(&g, ShiftKind::RandomWalk);
        for s in rw.row_sums() {
            assert!((s - 1.0).abs() < 1e-15);
        }
        let iso = GraphSnapshot::from_neighbors(vec![true, true], vec![vec![], vec![]]).unwrap();
        assert_eq!(shift_operator(&iso, ShiftKind::Adjacency), Matrix::identity(2));
        assert_eq!(shift_operator(&iso, ShiftKind::RandomWalk), Matrix::zeros(2, 2));
    }

    #[test]
    fn dead_nodes_isolated_in_every_shift() {
        let pos = [Pos::new(0, 0), Pos::new(0, 1), Pos::new(1, 1), Pos::new(4, 4)];
        let g = build_graph(&pos, &[true, false, true, true], 3).unwrap();
        for kind in [ShiftKind::Adjacency, ShiftKind::Laplacian, ShiftKind::RandomWalk] {
            let s = shift_operator(&g, kind);
            for k in 0..4 {
                assert_eq!(s[(1, k)], 0.0);
                assert_eq!(s[(k, 1)], 0.0);
            }
        }
    }

    #[test]
    fn relabel_conjugates_adjacency() {
        let mut rng = RngStream::new(4);
        let pos: Vec<Pos> = (0..6).map(|_| Pos::new(rng.below(8), rng.below(8))).collect();
        let g = build_graph(&pos, &[true; 6], 2).unwrap();
        let order = [3, 0, 5, 1, 4, 2];
        let p = Matrix::from_fn(6, 6, |r, c| if order[c] == r { 1.0 } else { 0.0 });
        let conj = p.transpose().matmul(&g.adjacency()).unwrap().matmul(&p).unwrap();
        assert_eq!(g.relabel(&order).unwrap().adjacency(), conj);
    }

    #[test]
    fn embedding_matches_scalar_loop() {
        let cfg = EnvConfig {
            grid_size: 8,
            num_agents: 3,
            num_food: 4,
            view_size: 3,
            seed: 5,
            ..EnvConfig::gather()
        };
        let mut s = reset(&cfg).unwrap();
        s.kill_agent(2);
        let obs: Vec<_> = (0..3).map(|i| observe(&s, i)).collect();
        let mut rng = RngStream::new(6);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, cfg.obs_dim(), 4, Activation::Relu, &mut rng);
        *store.value_mut(enc.bias) = rng.uniform_matrix(1, 4, -0.5, 0.5);
        let alive = s.learner_alive();
        let x = embed_observations(&obs, &alive, &enc, &store).unwrap();
        let w = store.value(enc.weight);
        let b = store.value(enc.bias);
        for n in 0..3 {
            for f in 0..4 {
                let mut acc = b[(0, f)];
                for (d, v) in obs[n].as_slice().iter().enumerate() {
                    acc += v * w[(d, f)];
                }
                let expected = if alive[n] { acc.max(0.0) } else { 0.0 };
                assert!((x[(n, f)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_observation_zero_bias_gives_zero_features() {
        let mut rng = RngStream::new(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, 4, 3, Activation::Relu, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(2, 4)).unwrap();
        let y = enc
            .forward(&mut tape, Binding::Frozen(&store), x, alive_weights(&[true, true]))
            .unwrap();
        assert_eq!(tape.value(y), &Matrix::zeros(2, 3));
    }
}
