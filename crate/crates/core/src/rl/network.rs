use std::rc::Rc;

use crate::env::{observe, EnvState};
use crate::error::{Error, Result};
use crate::gnn::{GatLayer, GatShape, GcnLayer, QHead};
use crate::graph::{
    alive_weights, batched_attention_sets, build_graph, shift_operator, stack_observations,
    Binding, Encoder, GraphSnapshot, ShiftKind,
};
use crate::numeric::{Matrix, NeighborLists, ParamStore, RngStream, SparseMatrix, Tape, Var};
use crate::permutation::GsNetwork;

use super::config::{Algorithm, BackboneKind, TrainConfig};

/// Learner observations and graph for one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    pub obs: Matrix,
    pub alive: Vec<bool>,
    pub graph: GraphSnapshot,
}

impl StepInput {
    pub fn new(obs: Matrix, graph: GraphSnapshot) -> Result<Self> {
        if obs.rows() != graph.num_nodes() {
            return Err(Error::dim("step input", "observation rows vs graph nodes"));
        }
        let alive = graph.alive().to_vec();
        Ok(StepInput { obs, alive, graph })
    }

    pub fn from_state(state: &EnvState, neighbors: usize) -> Result<Self> {
        let obs: Vec<_> = state.learner_ids().map(|i| observe(state, i)).collect();
        let alive = state.learner_alive();
        let graph = build_graph(&state.learner_positions(), &alive, neighbors)?;
        StepInput::new(stack_observations(&obs)?, graph)
    }

    pub fn num_nodes(&self) -> usize {
        self.alive.len()
    }
}

/// Several timesteps stacked block-wise into one disjoint graph.
pub struct GraphBatch {
    pub obs: Matrix,
    pub alive: Vec<bool>,
    pub weights: Rc<[f64]>,
    pub nbrs: Rc<NeighborLists>,
    pub shift: Option<Rc<SparseMatrix>>,
    pub blocks: usize,
    pub nodes: usize,
}

impl GraphBatch {
    pub fn new(inputs: &[&StepInput], shift: Option<ShiftKind>) -> Result<Self> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("empty graph batch".into()))?;
        let nodes = first.num_nodes();
        let dim = first.obs.cols();
        let mut data = Vec::with_capacity(inputs.len() * nodes * dim);
        let mut alive = Vec::with_capacity(inputs.len() * nodes);
        for s in inputs {
            if s.num_nodes() != nodes || s.obs.cols() != dim {
                return Err(Error::dim("graph batch", "inconsistent timestep shapes"));
            }
            data.extend_from_slice(s.obs.as_slice());
            alive.extend_from_slice(&s.alive);
        }
        let graphs: Vec<&GraphSnapshot> = inputs.iter().map(|s| &s.graph).collect();
        let nbrs = Rc::new(batched_attention_sets(&graphs));
        let shift = shift.map(|kind| {
            let blocks: Vec<Matrix> = graphs.iter().map(|g| shift_operator(g, kind)).collect();
            Rc::new(SparseMatrix::block_diagonal(&blocks))
        });
        Ok(GraphBatch {
            obs: Matrix::from_vec(inputs.len() * nodes, dim, data)?,
            weights: alive_weights(&alive),
            alive,
            nbrs,
            shift,
            blocks: inputs.len(),
            nodes,
        })
    }

    pub fn rows(&self) -> usize {
        self.blocks * self.nodes
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Gat(Vec<GatLayer>),
    Gcn { layers: Vec<GcnLayer>, shift: ShiftKind },
}

/// Encoder, graph stack and Q head, plus the permutation network for GS
/// learners. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct QNetwork {
    pub algorithm: Algorithm,
    pub encoder: Encoder,
    pub backbone: Backbone,
    pub head: QHead,
    pub gs: Option<GsNetwork>,
}

/// Stage outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub features: Matrix,
    pub gat_out: Matrix,
    pub q: Matrix,
}

impl QNetwork {
    /// Backbone and head weights come from one stream of `seed`, the GS
    /// weights from another, so GS and plain learners share the rest.
    pub fn new(
        algorithm: Algorithm,
        config: &TrainConfig,
        obs_dim: usize,
        seed: u64,
    ) -> Result<(QNetwork, ParamStore)> {
        config.network.validate()?;
        let net = &config.network;
        let root = RngStream::new(seed);
        let mut rng = root.derive(1);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, obs_dim, net.feature_dim, net.activation, &mut rng);
        let backbone = match algorithm.backbone() {
            BackboneKind::Gat => {
                let shape = GatShape {
                    in_dim: net.feature_dim,
                    out_dim: net.feature_dim,
                    heads: net.heads,
                    head_dim: net.head_dim,
                };
                let layers = (0..net.layers)
                    .map(|l| {
                        GatLayer::new(
                            &mut store,
                            &format!("gat{l}"),
                            shape,
                            net.scaled_attention,
                            net.activation,
                            &mut rng,
                        )
                    })
                    .collect::<Result<_>>()?;
                Backbone::Gat(layers)
            }
            BackboneKind::Gcn => Backbone::Gcn {
                layers: (0..net.layers)
                    .map(|l| GcnLayer::new(&mut store, &format!("gcn{l}"), net.gcn_order, net.activation))
                    .collect(),
                shift: net.gcn_shift,
            },
        };
        let head = QHead::new(&mut store, net.feature_dim, &mut rng);
        let gs = if algorithm.uses_gs() {
            let mut gs_rng = root.derive(2);
            Some(GsNetwork::new(&mut store, net.feature_dim, config.gs, &mut gs_rng)?)
        } else {
            None
        };
        Ok((
            QNetwork {
                algorithm,
                encoder,
                backbone,
                head,
                gs,
            },
            store,
        ))
    }

    pub fn shift_kind(&self) -> Option<ShiftKind> {
        match &self.backbone {
            Backbone::Gat(_) => None,
            Backbone::Gcn { shift, .. } => Some(*shift),
        }
    }

    pub fn batch(&self, inputs: &[&StepInput]) -> Result<GraphBatch> {
        GraphBatch::new(inputs, self.shift_kind())
    }

    /// Encoder output and graph-stack output.
    pub fn features(&self, tape: &mut Tape, b: Binding, batch: &GraphBatch) -> Result<(Var, Var)> {
        let obs = tape.constant(batch.obs.clone())?;
        let x = self.encoder.forward(tape, b, obs, batch.weights.clone())?;
        let mut z = x;
        match &self.backbone {
            Backbone::Gat(layers) => {
                for layer in layers {
                    z = layer.forward(tape, b, z, &batch.nbrs)?;
                }
            }
            Backbone::Gcn { layers, .. } => {
                let s = batch
                    .shift
                    .as_ref()
                    .ok_or_else(|| Error::Contract("graph batch built without a shift".into()))?;
                for layer in layers {
                    z = layer.forward(tape, b, s, z)?;
                }
            }
        }
        Ok((x, z))
    }

    pub fn q(&self, tape: &mut Tape, b: Binding, z: Var, batch: &GraphBatch) -> Result<Var> {
        self.head.forward(tape, b, z, batch.weights.clone())
    }

    pub fn forward(&self, store: &ParamStore, batch: &GraphBatch) -> Result<PipelineOutput> {
        let mut tape = Tape::new();
        let b = Binding::Frozen(store);
        let (x, z) = self.features(&mut tape, b, batch)?;
        let q = self.q(&mut tape, b, z, batch)?;
        Ok(PipelineOutput {
            features: tape.value(x).clone(),
            gat_out: tape.value(z).clone(),
            q: tape.value(q).clone(),
        })
    }
}

/// Embed, graph stack and Q head for a single timestep.
pub fn forward_pipeline(net: &QNetwork, store: &ParamStore, input: &StepInput) -> Result<PipelineOutput> {
    net.forward(store, &net.batch(&[input])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reset, EnvConfig, NUM_ACTIONS};
    use crate::gnn::{gat_forward, gcn_forward, q_values};
    use crate::graph::embed_observations;
    use crate::rl::config::NetworkConfig;

    fn small_config() -> TrainConfig {
        TrainConfig {
            network: NetworkConfig {
                feature_dim: 8,
                heads: 2,
                head_dim: 4,
                ..NetworkConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_env() -> EnvConfig {
        EnvConfig {
            grid_size: 8,
            num_agents: 3,
            num_food: 4,
            view_size: 3,
            ..EnvConfig::gather()
        }
    }

    #[test]
    fn pipeline_matches_staged_composition() {
        let env = tiny_env();
        let mut state = reset(&env).unwrap();
        state.kill_agent(1);
        let input = StepInput::from_state(&state, 3).unwrap();
        for algorithm in [Algorithm::Gat, Algorithm::Gcn] {
            let (net, store) = QNetwork::new(algorithm, &small_config(), env.obs_dim(), 5).unwrap();
            let out = forward_pipeline(&net, &store, &input).unwrap();
            let obs: Vec<_> = state.learner_ids().map(|i| observe(&state, i)).collect();
            let x = embed_observations(&obs, &input.alive, &net.encoder, &store).unwrap();
            assert_eq!(out.features, x);
            let mut z = x;
            match &net.backbone {
                Backbone::Gat(layers) => {
                    for l in layers {
                        z = gat_forward(l, &store, &input.graph, &z).unwrap();
                    }
                }
                Backbone::Gcn { layers, shift } => {
                    let s = shift_operator(&input.graph, *shift);
                    for l in layers {
                        z = gcn_forward(l, &store, &s, &z, false).unwrap();
                    }
                }
            }
            assert!(out.gat_out.max_abs_diff(&z).unwrap() < 1e-12);
            let q = q_values(&net.head, &store, &z, &input.alive).unwrap();
            assert!(out.q.max_abs_diff(&q).unwrap() < 1e-12);
            assert_eq!(out.q.row(1), &[0.0; NUM_ACTIONS]);
        }
    }

    #[test]
    fn gs_learners_share_plain_weights() {
        let c = small_config();
        let (_, plain) = QNetwork::new(Algorithm::Gat, &c, 54, 9).unwrap();
        let (net, gs) = QNetwork::new(Algorithm::GsGat, &c, 54, 9).unwrap();
        assert!(net.gs.is_some());
        assert_eq!(gs.len(), plain.len() + 3);
        for id in plain.ids() {
            assert_eq!(plain.name(id), gs.name(id));
            assert_eq!(plain.value(id), gs.value(id));
        }
    }

    #[test]
    fn batch_blocks_are_independent() {
        let env = tiny_env();
        let a = StepInput::from_state(&reset(&env).unwrap(), 2).unwrap();
        let b = StepInput::from_state(&reset(&EnvConfig { seed: 3, ..env.clone() }).unwrap(), 2).unwrap();
        for algorithm in [Algorithm::Gat, Algorithm::Gcn] {
            let (net, store) = QNetwork::new(algorithm, &small_config(), env.obs_dim(), 1).unwrap();
            let joint = net.forward(&store, &net.batch(&[&a, &b]).unwrap()).unwrap();
            let qa = forward_pipeline(&net, &store, &a).unwrap().q;
            let qb = forward_pipeline(&net, &store, &b).unwrap().q;
            assert!(joint.q.select_rows(&[0, 1, 2]).max_abs_diff(&qa).unwrap() < 1e-12);
            assert!(joint.q.select_rows(&[3, 4, 5]).max_abs_diff(&qb).unwrap() < 1e-12);
        }
    }
}
