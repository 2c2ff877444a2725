use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::Binding;
use crate::numeric::{Matrix, ParamId, ParamStore, RngStream, Tape, Var};

use super::assignment::{hungarian_match, PermutationMatrix};
use super::sinkhorn::{DoublyStochasticMatrix, GumbelSinkhorn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GsMode {
    Soft,
    Hard,
}

impl GsMode {
    pub fn name(self) -> &'static str {
        match self {
            GsMode::Soft => "soft",
            GsMode::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "soft" => Some(GsMode::Soft),
            "hard" => Some(GsMode::Hard),
            _ => None,
        }
    }
}

/// A latent permutation over the full node universe.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentPermutation {
    Soft(DoublyStochasticMatrix),
    Hard(PermutationMatrix),
}

impl LatentPermutation {
    pub fn to_matrix(&self) -> Matrix {
        match self {
            LatentPermutation::Soft(d) => d.values().clone(),
            LatentPermutation::Hard(p) => p.to_matrix(),
        }
    }
}

/// Learned score projections and embedding of the permutation network.
#[derive(Clone, Debug)]
pub struct GsNetwork {
    pub score_left: ParamId,
    pub score_right: ParamId,
    pub embed: ParamId,
    pub relax: GumbelSinkhorn,
    pub feature_dim: usize,
}

/// Tape handles produced by [`GsNetwork::predict_on_tape`].
pub struct GsPrediction {
    /// `N x F` predicted features for the next step; rows outside
    /// `active` are zero.
    pub prediction: Var,
    pub active: Rc<[usize]>,
}

impl GsNetwork {
    /// Projections start Glorot-uniform, the embedding starts at identity.
    pub fn new(
        store: &mut ParamStore,
        feature_dim: usize,
        relax: GumbelSinkhorn,
        rng: &mut RngStream,
    ) -> Result<Self> {
        relax.validate()?;
        let score_left = store.add_glorot("gs.score_left", feature_dim, feature_dim, rng);
        let score_right = store.add_glorot("gs.score_right", feature_dim, feature_dim, rng);
        let embed = store.add("gs.embed", Matrix::identity(feature_dim));
        Ok(GsNetwork {
            score_left,
            score_right,
            embed,
            relax,
            feature_dim,
        })
    }

    /// `(cur W_a)(next W_b)^T / sqrt(F)`
    pub fn scores(&self, tape: &mut Tape, b: Binding, cur: Var, next: Var) -> Result<Var> {
        let wa = b.bind(tape, self.score_left)?;
        let wb = b.bind(tape, self.score_right)?;
        let left = tape.matmul(cur, wa)?;
        let right = tape.matmul(next, wb)?;
        let x = tape.matmul_bt(left, right)?;
        tape.scale(x, 1.0 / (self.feature_dim as f64).sqrt())
    }

    /// Permutation over the rows listed in `active`; `cur` and `next` are
    /// the already-gathered `k x F` feature blocks.
    pub fn permutation_on_tape(
        &self,
        tape: &mut Tape,
        b: Binding,
        cur: Var,
        next: Var,
        mode: GsMode,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let x = self.scores(tape, b, cur, next)?;
        match mode {
            GsMode::Soft => self.relax.relax(tape, x, rng),
            GsMode::Hard => {
                let p = hungarian_match(tape.value(x))?;
                tape.constant(p.to_matrix())
            }
        }
    }

    /// Predicted next-step features `P (cur W_p)` where `P` acts only on
    /// the agents in `active` (alive at the next step).
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape,
        b: Binding,
        gat_t: Var,
        gat_t1: Var,
        active: Rc<[usize]>,
        mode: GsMode,
        rng: &mut RngStream,
    ) -> Result<GsPrediction> {
        let (n, f) = tape.shape(gat_t);
        if tape.shape(gat_t1) != (n, f) || f != self.feature_dim {
            return Err(Error::dim(
                "gs_network",
                format!("{:?} vs {:?} (F = {})", (n, f), tape.shape(gat_t1), self.feature_dim),
            ));
        }
        if active.is_empty() {
            let zero = tape.constant(Matrix::zeros(n, f))?;
            return Ok(GsPrediction {
                prediction: zero,
                active,
            });
        }
        let cur = tape.gather_rows(gat_t, active.clone())?;
        let next = tape.gather_rows(gat_t1, active.clone())?;
        let p = self.permutation_on_tape(tape, b, cur, next, mode, rng)?;
        let wp = b.bind(tape, self.embed)?;
        let embedded = tape.matmul(cur, wp)?;
        let pred = tape.matmul(p, embedded)?;
        let prediction = tape.scatter_rows(pred, active.clone(), n)?;
        Ok(GsPrediction { prediction, active })
    }

    /// `P_theta` for a pair of feature matrices. Rows and columns of agents
    /// not in `alive_next` are fixed to self-assignment.
    pub fn permutation(
        &self,
        store: &ParamStore,
        gat_t: &Matrix,
        gat_t1: &Matrix,
        alive_next: &[bool],
        mode: GsMode,
        rng: &mut RngStream,
    ) -> Result<LatentPermutation> {
        let n = gat_t.rows();
        if gat_t.shape() != gat_t1.shape() || alive_next.len() != n || gat_t.cols() != self.feature_dim {
            return Err(Error::dim("gs_network", "input shapes"));
        }
        let active: Vec<usize> = (0..n).filter(|&i| alive_next[i]).collect();
        let mut tape = Tape::new();
        let b = Binding::Frozen(store);
        let mut block = None;
        if !active.is_empty() {
            let cur = tape.constant(gat_t.select_rows(&active))?;
            let next = tape.constant(gat_t1.select_rows(&active))?;
            let p = self.permutation_on_tape(&mut tape, b, cur, next, mode, rng)?;
            block = Some(tape.value(p).clone());
        }
        let mut full = Matrix::identity(n);
        if let Some(block) = &block {
            for (a, &i) in active.iter().enumerate() {
                full[(i, i)] = 0.0;
                for (c, &j) in active.iter().enumerate() {
                    full[(i, j)] = block[(a, c)];
                }
            }
        }
        Ok(match mode {
            GsMode::Soft => LatentPermutation::Soft(DoublyStochasticMatrix::new(
                full,
                self.relax.iterations,
            )),
            GsMode::Hard => LatentPermutation::Hard(PermutationMatrix::from_matrix(&full)?),
        })
    }
}

/// `P (gat_t W_p)`
pub fn predict_next(gat_t: &Matrix, p: &Matrix, w_p: &Matrix) -> Result<Matrix> {
    p.matmul(&gat_t.matmul(w_p)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_network(store: &mut ParamStore, f: usize, relax: GumbelSinkhorn) -> GsNetwork {
        let net = GsNetwork::new(store, f, relax, &mut RngStream::new(0)).unwrap();
        *store.value_mut(net.score_left) = Matrix::identity(f);
        *store.value_mut(net.score_right) = Matrix::identity(f);
        net
    }

    #[test]
    fn self_match_is_identity() {
        let mut store = ParamStore::new();
        let net = identity_network(&mut store, 6, GumbelSinkhorn::default());
        let mut rng = RngStream::new(8);
        for _ in 0..20 {
            let x = rng.uniform_matrix(5, 6, -1.0, 1.0);
            let p = net
                .permutation(&store, &x, &x, &[true; 5], GsMode::Hard, &mut rng)
                .unwrap();
            // <x_i, x_j> <= (|x_i|^2 + |x_j|^2) / 2, so the diagonal wins overall
            assert_eq!(p, LatentPermutation::Hard(PermutationMatrix::identity(5)));
        }
    }

    #[test]
    fn zero_inputs_give_uniform() {
        let mut store = ParamStore::new();
        let relax = GumbelSinkhorn {
            noise_scale: 0.0,
            ..GumbelSinkhorn::default()
        };
        let net = GsNetwork::new(&mut store, 3, relax, &mut RngStream::new(1)).unwrap();
        let z = Matrix::zeros(4, 3);
        let p = net
            .permutation(&store, &z, &z, &[true; 4], GsMode::Soft, &mut RngStream::new(2))
            .unwrap();
        for &v in p.to_matrix().as_slice() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_output_is_doubly_stochastic() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3);
        let relax = GumbelSinkhorn {
            temperature: 1.0,
            iterations: 100,
            noise_scale: 1.0,
        };
        let net = GsNetwork::new(&mut store, 4, relax, &mut rng).unwrap();
        let a = rng.uniform_matrix(6, 4, -1.0, 1.0);
        let b = rng.uniform_matrix(6, 4, -1.0, 1.0);
        match net.permutation(&store, &a, &b, &[true; 6], GsMode::Soft, &mut rng).unwrap() {
            LatentPermutation::Soft(d) => assert!(d.residual() < 1e-6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dead_agents_map_to_themselves() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(4);
        let relax = GumbelSinkhorn {
            iterations: 200,
            ..GumbelSinkhorn::default()
        };
        let net = GsNetwork::new(&mut store, 3, relax, &mut rng).unwrap();
        let a = rng.uniform_matrix(5, 3, -1.0, 1.0);
        let mut b = rng.uniform_matrix(5, 3, -1.0, 1.0);
        b.row_mut(2).fill(0.0);
        let alive = [true, true, false, true, true];
        for mode in [GsMode::Soft, GsMode::Hard] {
            let m = net.permutation(&store, &a, &b, &alive, mode, &mut rng).unwrap().to_matrix();
            for j in 0..5 {
                let expect = if j == 2 { 1.0 } else { 0.0 };
                assert_eq!(m[(2, j)], expect);
                assert_eq!(m[(j, 2)], expect);
            }
            assert!(super::super::row_col_residual(&m) < 1e-6);
        }
    }

    #[test]
    fn predict_next_cases() {
        let mut rng = RngStream::new(5);
        let g = rng.uniform_matrix(3, 2, -1.0, 1.0);
        let i2 = Matrix::identity(2);
        assert_eq!(predict_next(&g, &Matrix::identity(3), &i2).unwrap(), g);
        let swap = PermutationMatrix::from_assignment(vec![1, 0, 2]).unwrap().to_matrix();
        let out = predict_next(&g, &swap, &i2).unwrap();
        assert_eq!(out.row(0), g.row(1));
        assert_eq!(out.row(1), g.row(0));
        assert_eq!(out.row(2), g.row(2));

        let p = rng.uniform_matrix(3, 3, 0.0, 1.0);
        let w = rng.uniform_matrix(2, 2, -1.0, 1.0);
        let out = predict_next(&g, &p, &w).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                let mut expect = 0.0;
                for j in 0..3 {
                    for k in 0..2 {
                        expect += p[(i, j)] * g[(j, k)] * w[(k, c)];
                    }
                }
                assert!((out[(i, c)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        let net = GsNetwork::new(&mut store, 3, GumbelSinkhorn::default(), &mut RngStream::new(0)).unwrap();
        let a = Matrix::zeros(4, 3);
        let b = Matrix::zeros(3, 3);
        assert!(net
            .permutation(&store, &a, &b, &[true; 4], GsMode::Hard, &mut RngStream::new(0))
            .is_err());
    }
}
