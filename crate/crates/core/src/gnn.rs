//! Polynomial graph filters, multi-head graph attention and the per-node
//! Q head, plus executable equivariance checks.

use std::rc::Rc;

use crate::env::NUM_ACTIONS;
use crate::error::{Error, Result};
use crate::graph::{alive_weights, Binding, GraphSnapshot};
use crate::numeric::{
    softmax_rows, Activation, Matrix, NeighborLists, ParamId, ParamStore, RngStream, SparseMatrix,
    Tape, Var,
};
use crate::permutation::PermutationMatrix;

/// One-hop exchange `S x`.
pub fn aggregate(s: &Matrix, x: &Matrix) -> Result<Matrix> {
    if s.rows() != s.cols() {
        return Err(Error::dim("aggregate", format!("shift {:?} is not square", s.shape())));
    }
    s.matmul(x)
}

/// `sigma(sum_k h_k S^k x)` with scalar taps `h_0..h_K`.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub coeffs: ParamId,
    pub order: usize,
    pub activation: Activation,
}

impl GcnLayer {
    /// Taps start at `h_k = 1 / (k + 1)`.
    pub fn new(store: &mut ParamStore, name: &str, order: usize, activation: Activation) -> Self {
        let taps = Matrix::from_fn(1, order + 1, |_, k| 1.0 / (k + 1) as f64);
        let coeffs = store.add(format!("{name}.coeffs"), taps);
        GcnLayer {
            coeffs,
            order,
            activation,
        }
    }

    /// Filter output before the nonlinearity, by iterated shifts.
    pub fn forward_linear(
        &self,
        tape: &mut Tape,
        b: Binding,
        s: &Rc<SparseMatrix>,
        x: Var,
    ) -> Result<Var> {
        let h = b.bind(tape, self.coeffs)?;
        if tape.shape(h) != (1, self.order + 1) {
            return Err(Error::dim("gcn_forward", "coefficient count"));
        }
        let mut acc = tape.scale_by(x, h, 0)?;
        let mut shifted = x;
        for k in 1..=self.order {
            shifted = tape.spmm(s.clone(), shifted)?;
            let term = tape.scale_by(shifted, h, k)?;
            acc = tape.add(acc, term)?;
        }
        Ok(acc)
    }

    pub fn forward(&self, tape: &mut Tape, b: Binding, s: &Rc<SparseMatrix>, x: Var) -> Result<Var> {
        let z = self.forward_linear(tape, b, s, x)?;
        tape.activation(z, self.activation)
    }
}

/// Filter output for a dense shift; `linear` skips the nonlinearity.
pub fn gcn_forward(
    layer: &GcnLayer,
    store: &ParamStore,
    s: &Matrix,
    x: &Matrix,
    linear: bool,
) -> Result<Matrix> {
    if s.rows() != s.cols() || s.rows() != x.rows() {
        return Err(Error::dim(
            "gcn_forward",
            format!("shift {:?}, features {:?}", s.shape(), x.shape()),
        ));
    }
    let sparse = Rc::new(SparseMatrix::from_dense(s));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let b = Binding::Frozen(store);
    let out = if linear {
        layer.forward_linear(&mut tape, b, &sparse, xv)?
    } else {
        layer.forward(&mut tape, b, &sparse, xv)?
    };
    Ok(tape.value(out).clone())
}

/// Multi-head attention layer. Per-head query, key and value matrices are
/// stored side by side: head `m` owns columns `m*d..(m+1)*d`.
#[derive(Clone, Debug)]
pub struct GatLayer {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub mix: ParamId,
    pub heads: usize,
    pub head_dim: usize,
    pub scaled: bool,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct GatShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl GatLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        shape: GatShape,
        scaled: bool,
        activation: Activation,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if shape.heads == 0 || shape.head_dim == 0 || shape.in_dim == 0 || shape.out_dim == 0 {
            return Err(Error::Validation(format!("degenerate attention layer {shape:?}")));
        }
        let width = shape.heads * shape.head_dim;
        let query = store.add_glorot(format!("{name}.query"), shape.in_dim, width, rng);
        let key = store.add_glorot(format!("{name}.key"), shape.in_dim, width, rng);
        let value = store.add_glorot(format!("{name}.value"), shape.in_dim, width, rng);
        let mix = store.add_glorot(format!("{name}.mix"), width, shape.out_dim, rng);
        Ok(GatLayer {
            query,
            key,
            value,
            mix,
            heads: shape.heads,
            head_dim: shape.head_dim,
            scaled,
            activation,
        })
    }

    pub fn score_scale(&self) -> f64 {
        if self.scaled {
            1.0 / (self.head_dim as f64).sqrt()
        } else {
            1.0
        }
    }

    /// Mixed head outputs before the nonlinearity.
    pub fn forward_linear(
        &self,
        tape: &mut Tape,
        b: Binding,
        x: Var,
        nbrs: &Rc<NeighborLists>,
    ) -> Result<Var> {
        let wq = b.bind(tape, self.query)?;
        let wk = b.bind(tape, self.key)?;
        let wv = b.bind(tape, self.value)?;
        let wm = b.bind(tape, self.mix)?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let heads = tape.neighbor_attention(q, k, v, self.heads, self.score_scale(), nbrs.clone())?;
        tape.matmul(heads, wm)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        b: Binding,
        x: Var,
        nbrs: &Rc<NeighborLists>,
    ) -> Result<Var> {
        let z = self.forward_linear(tape, b, x, nbrs)?;
        tape.activation(z, self.activation)
    }
}

pub fn gat_forward(layer: &GatLayer, store: &ParamStore, g: &GraphSnapshot, x: &Matrix) -> Result<Matrix> {
    if x.rows() != g.num_nodes() {
        return Err(Error::dim(
            "gat_forward",
            format!("{} feature rows for {} nodes", x.rows(), g.num_nodes()),
        ));
    }
    let nbrs = Rc::new(NeighborLists::new(&g.attention_sets()));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let out = layer.forward(&mut tape, Binding::Frozen(store), xv, &nbrs)?;
    Ok(tape.value(out).clone())
}

/// Dense attention matrix of one head. Rows with an empty neighbor set are
/// zero and listed in `empty_rows`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub values: Matrix,
    pub empty_rows: Vec<usize>,
}

pub fn gat_attention(
    layer: &GatLayer,
    store: &ParamStore,
    x: &Matrix,
    head: usize,
    neighbor_sets: &[Vec<usize>],
) -> Result<AttentionMatrix> {
    let n = x.rows();
    if neighbor_sets.len() != n || head >= layer.heads {
        return Err(Error::dim(
            "gat_attention",
            format!("{} sets for {n} rows, head {head} of {}", neighbor_sets.len(), layer.heads),
        ));
    }
    let d = layer.head_dim;
    let cols = head * d..(head + 1) * d;
    let q = x.matmul(store.value(layer.query))?;
    let k = x.matmul(store.value(layer.key))?;
    let scale = layer.score_scale();
    let mut scores = Matrix::zeros(n, n);
    let mut mask = vec![false; n * n];
    let mut empty_rows = Vec::new();
    for i in 0..n {
        if neighbor_sets[i].is_empty() {
            empty_rows.push(i);
            // placeholder so the softmax row is well defined; zeroed below
            mask[i * n] = true;
            continue;
        }
        for &j in &neighbor_sets[i] {
            if j >= n {
                return Err(Error::dim("gat_attention", format!("neighbor {j} out of range")));
            }
            let qi = &q.row(i)[cols.clone()];
            let kj = &k.row(j)[cols.clone()];
            scores[(i, j)] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            mask[i * n + j] = true;
        }
    }
    let mut values = softmax_rows(&scores, Some(&mask))?;
    for &i in &empty_rows {
        values.row_mut(i).fill(0.0);
    }
    Ok(AttentionMatrix { values, empty_rows })
}

/// Affine map from node features to action values.
#[derive(Clone, Debug)]
pub struct QHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl QHead {
    pub fn new(store: &mut ParamStore, in_dim: usize, rng: &mut RngStream) -> Self {
        let weight = store.add_glorot("q_head.weight", in_dim, NUM_ACTIONS, rng);
        let bias = store.add("q_head.bias", Matrix::zeros(1, NUM_ACTIONS));
        QHead { weight, bias }
    }

    /// `(z W + b)` with dead rows zeroed.
    pub fn forward(&self, tape: &mut Tape, b: Binding, z: Var, alive: Rc<[f64]>) -> Result<Var> {
        let w = b.bind(tape, self.weight)?;
        let bias = b.bind(tape, self.bias)?;
        let q = tape.matmul(z, w)?;
        let q = tape.add_row(q, bias)?;
        tape.scale_rows(q, alive)
    }
}

pub fn q_values(head: &QHead, store: &ParamStore, z: &Matrix, alive: &[bool]) -> Result<Matrix> {
    if alive.len() != z.rows() {
        return Err(Error::dim("q_values", "alive mask length"));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone())?;
    let out = head.forward(&mut tape, Binding::Frozen(store), zv, alive_weights(alive))?;
    Ok(tape.value(out).clone())
}

/// Sup-norm residuals before and after the nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivarianceResidual {
    pub linear: f64,
    pub activated: f64,
}

fn permute_rows(p: &PermutationMatrix, x: &Matrix) -> Result<Matrix> {
    if p.len() != x.rows() {
        return Err(Error::dim("permutation", "size does not match node count"));
    }
    p.to_matrix().transpose().matmul(x)
}

/// `|H(S') P^T x - P^T H(S) x|` for an arbitrary next-step shift `S'`.
pub fn gcn_transfer_residual(
    layer: &GcnLayer,
    store: &ParamStore,
    s: &Matrix,
    s_next: &Matrix,
    x: &Matrix,
    p: &PermutationMatrix,
) -> Result<EquivarianceResidual> {
    let px = permute_rows(p, x)?;
    let mut out = [0.0; 2];
    for (slot, linear) in out.iter_mut().zip([true, false]) {
        let lhs = gcn_forward(layer, store, s_next, &px, linear)?;
        let rhs = permute_rows(p, &gcn_forward(layer, store, s, x, linear)?)?;
        *slot = lhs.max_abs_diff(&rhs)?;
    }
    Ok(EquivarianceResidual {
        linear: out[0],
        activated: out[1],
    })
}

/// Residual of the filter under the relabeled shift `P^T S P`.
pub fn check_equivariance_gcn(
    layer: &GcnLayer,
    store: &ParamStore,
    s: &Matrix,
    x: &Matrix,
    p: &PermutationMatrix,
) -> Result<EquivarianceResidual> {
    let pm = p.to_matrix();
    if pm.rows() != s.rows() {
        return Err(Error::dim("check_equivariance_gcn", "permutation size"));
    }
    let s_next = pm.transpose().matmul(s)?.matmul(&pm)?;
    gcn_transfer_residual(layer, store, s, &s_next, x, p)
}

/// `|gat(P^T x, g') - P^T gat(x, g)|` for an arbitrary next-step graph.
pub fn gat_transfer_residual(
    layer: &GatLayer,
    store: &ParamStore,
    g: &GraphSnapshot,
    g_next: &GraphSnapshot,
    x: &Matrix,
    p: &PermutationMatrix,
) -> Result<f64> {
    let px = permute_rows(p, x)?;
    let lhs = gat_forward(layer, store, g_next, &px)?;
    let rhs = permute_rows(p, &gat_forward(layer, store, g, x)?)?;
    lhs.max_abs_diff(&rhs)
}

/// Residual with the graph rebuilt under the relabeling `P^T`.
pub fn check_equivariance_gat(
    layer: &GatLayer,
    store: &ParamStore,
    g: &GraphSnapshot,
    x: &Matrix,
    p: &PermutationMatrix,
) -> Result<f64> {
    let g_next = g.relabel(&p.transpose_order())?;
    gat_transfer_residual(layer, store, g, &g_next, x, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{shift_operator, ShiftKind};
    use crate::numeric::{finite_diff_grad, max_relative_error};

    fn random_graph(n: usize, rng: &mut RngStream) -> GraphSnapshot {
        let alive = vec![true; n];
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && rng.next_f64() < 0.4).collect())
            .collect();
        GraphSnapshot::from_neighbors(alive, neighbors).unwrap()
    }

    fn random_perm(n: usize, rng: &mut RngStream) -> PermutationMatrix {
        let mut a: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut a);
        PermutationMatrix::from_assignment(a).unwrap()
    }

    fn gat(store: &mut ParamStore, in_dim: usize, out_dim: usize, rng: &mut RngStream) -> GatLayer {
        let shape = GatShape {
            in_dim,
            out_dim,
            heads: 2,
            head_dim: 3,
        };
        GatLayer::new(store, "gat", shape, true, Activation::Relu, rng).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let mut rng = RngStream::new(1);
        let x = rng.uniform_matrix(3, 2, -1.0, 1.0);
        assert_eq!(aggregate(&Matrix::identity(3), &x).unwrap(), x);
        assert_eq!(aggregate(&Matrix::zeros(3, 3), &x).unwrap(), Matrix::zeros(3, 2));
        let chain = GraphSnapshot::from_neighbors(vec![true; 3], vec![vec![1], vec![0, 2], vec![1]])
            .unwrap();
        let s = shift_operator(&chain, ShiftKind::Adjacency);
        let y = aggregate(&s, &Matrix::filled(3, 1, 1.0)).unwrap();
        assert_eq!(y.as_slice(), &[2.0, 3.0, 2.0]);
        assert!(aggregate(&Matrix::zeros(2, 3), &x).is_err());
    }

    #[test]
    fn gcn_zero_order_and_identity_shift() {
        let mut rng = RngStream::new(2);
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, "gcn", 0, Activation::Tanh);
        *store.value_mut(layer.coeffs) = Matrix::from_vec(1, 1, vec![0.7]).unwrap();
        let x = rng.uniform_matrix(4, 3, -1.0, 1.0);
        let s = rng.uniform_matrix(4, 4, 0.0, 1.0);
        let out = gcn_forward(&layer, &store, &s, &x, false).unwrap();
        assert!(out.max_abs_diff(&x.map(|v| (0.7 * v).tanh())).unwrap() < 1e-15);

        let layer = GcnLayer::new(&mut store, "gcn3", 3, Activation::Tanh);
        let h: f64 = store.value(layer.coeffs).sum();
        let out = gcn_forward(&layer, &store, &Matrix::identity(4), &x, false).unwrap();
        assert!(out.max_abs_diff(&x.map(|v| (h * v).tanh())).unwrap() < 1e-14);
    }

    #[test]
    fn gcn_matches_explicit_powers() {
        let mut rng = RngStream::new(3);
        for order in 0..=4 {
            let mut store = ParamStore::new();
            let layer = GcnLayer::new(&mut store, "gcn", order, Activation::Identity);
            *store.value_mut(layer.coeffs) = rng.uniform_matrix(1, order + 1, -1.0, 1.0);
            let g = random_graph(6, &mut rng);
            let s = shift_operator(&g, ShiftKind::RandomWalk);
            let x = rng.uniform_matrix(6, 4, -1.0, 1.0);
            let h = store.value(layer.coeffs).clone();
            let mut expect = Matrix::zeros(6, 4);
            let mut power = Matrix::identity(6);
            for k in 0..=order {
                expect = expect.add(&power.matmul(&x).unwrap().scale(h[(0, k)])).unwrap();
                power = power.matmul(&s).unwrap();
            }
            let out = gcn_forward(&layer, &store, &s, &x, true).unwrap();
            assert!(out.max_abs_diff(&expect).unwrap() < 1e-12);
        }
    }

    #[test]
    fn attention_examples() {
        let mut rng = RngStream::new(4);
        let mut store = ParamStore::new();
        let layer = gat(&mut store, 3, 4, &mut rng);
        let x = rng.uniform_matrix(3, 3, -1.0, 1.0);
        let sets = vec![vec![1], vec![0, 1, 2], vec![]];
        let a = gat_attention(&layer, &store, &x, 0, &sets).unwrap();
        assert_eq!(a.values.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(a.values.row(2), &[0.0, 0.0, 0.0]);
        assert_eq!(a.empty_rows, vec![2]);
        assert!((a.values.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // equal keys everywhere
        let same = Matrix::from_fn(3, 3, |_, j| j as f64 * 0.3 - 0.2);
        let a = gat_attention(&layer, &store, &same, 1, &sets).unwrap();
        for &v in a.values.row(1) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_scalar_evaluation() {
        let mut rng = RngStream::new(5);
        let mut store = ParamStore::new();
        let layer = gat(&mut store, 3, 2, &mut rng);
        let x = rng.uniform_matrix(3, 3, -1.0, 1.0);
        let sets = vec![vec![0, 2], vec![1, 0, 2], vec![2]];
        let wq = store.value(layer.query);
        let wk = store.value(layer.key);
        for head in 0..2 {
            let a = gat_attention(&layer, &store, &x, head, &sets).unwrap();
            for i in 0..3 {
                let score = |j: usize| {
                    let mut s = 0.0;
                    for c in head * 3..head * 3 + 3 {
                        let mut qi = 0.0;
                        let mut kj = 0.0;
                        for f in 0..3 {
                            qi += x[(i, f)] * wq[(f, c)];
                            kj += x[(j, f)] * wk[(f, c)];
                        }
                        s += qi * kj;
                    }
                    (s / 3f64.sqrt()).exp()
                };
                let z: f64 = sets[i].iter().map(|&j| score(j)).sum();
                for j in 0..3 {
                    let expect = if sets[i].contains(&j) { score(j) / z } else { 0.0 };
                    assert!((a.values[(i, j)] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gat_forward_examples() {
        let mut rng = RngStream::new(6);
        let mut store = ParamStore::new();
        let layer = gat(&mut store, 3, 4, &mut rng);

        let lone = GraphSnapshot::from_neighbors(vec![true], vec![vec![]]).unwrap();
        let x = rng.uniform_matrix(1, 3, -1.0, 1.0);
        let expect = x
            .matmul(store.value(layer.value))
            .unwrap()
            .matmul(store.value(layer.mix))
            .unwrap()
            .map(|v| v.max(0.0));
        let out = gat_forward(&layer, &store, &lone, &x).unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-14);

        let g = random_graph(4, &mut rng);
        assert_eq!(
            gat_forward(&layer, &store, &g, &Matrix::zeros(4, 3)).unwrap(),
            Matrix::zeros(4, 4)
        );

        // head-by-head composition
        let x = rng.uniform_matrix(4, 3, -1.0, 1.0);
        let sets = g.attention_sets();
        let v = x.matmul(store.value(layer.value)).unwrap();
        let mut concat = Matrix::zeros(4, 6);
        for head in 0..2 {
            let a = gat_attention(&layer, &store, &x, head, &sets).unwrap().values;
            let vh = Matrix::from_fn(4, 3, |i, c| v[(i, head * 3 + c)]);
            let h = a.matmul(&vh).unwrap();
            for i in 0..4 {
                for c in 0..3 {
                    concat[(i, head * 3 + c)] = h[(i, c)];
                }
            }
        }
        let expect = concat.matmul(store.value(layer.mix)).unwrap().map(|v| v.max(0.0));
        let out = gat_forward(&layer, &store, &g, &x).unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn q_values_examples() {
        let mut rng = RngStream::new(7);
        let mut store = ParamStore::new();
        let head = QHead::new(&mut store, NUM_ACTIONS, &mut rng);
        let z = rng.uniform_matrix(3, NUM_ACTIONS, -1.0, 1.0);
        let alive = [true, false, true];
        *store.value_mut(head.weight) = Matrix::identity(NUM_ACTIONS);
        let q = q_values(&head, &store, &z, &alive).unwrap();
        assert_eq!(q.row(0), z.row(0));
        assert!(q.row(1).iter().all(|&v| v == 0.0));

        *store.value_mut(head.weight) = rng.uniform_matrix(NUM_ACTIONS, NUM_ACTIONS, -1.0, 1.0);
        *store.value_mut(head.bias) = rng.uniform_matrix(1, NUM_ACTIONS, -1.0, 1.0);
        let q = q_values(&head, &store, &z, &alive).unwrap();
        let (w, b) = (store.value(head.weight), store.value(head.bias));
        for a in 0..NUM_ACTIONS {
            let mut expect = b[(0, a)];
            for f in 0..NUM_ACTIONS {
                expect += z[(2, f)] * w[(f, a)];
            }
            assert!((q[(2, a)] - expect).abs() < 1e-12);
        }
        assert_eq!(
            q_values(&head, &store, &Matrix::zeros(2, NUM_ACTIONS), &[true, true])
                .unwrap()
                .max_abs(),
            store.value(head.bias).max_abs()
        );
    }

    #[test]
    fn gcn_equivariance_and_breakage() {
        let mut rng = RngStream::new(8);
        for trial in 0..200 {
            let n = 2 + trial % 7;
            let order = trial % 4;
            let mut store = ParamStore::new();
            let layer = GcnLayer::new(&mut store, "gcn", order, Activation::Relu);
            *store.value_mut(layer.coeffs) = rng.uniform_matrix(1, order + 1, -1.0, 1.0);
            let g = random_graph(n, &mut rng);
            let s = shift_operator(&g, ShiftKind::Adjacency);
            let x = rng.uniform_matrix(n, 3, -1.0, 1.0);
            let p = random_perm(n, &mut rng);
            let r = check_equivariance_gcn(&layer, &store, &s, &x, &p).unwrap();
            assert!(r.linear < 1e-10 && r.activated < 1e-10, "{r:?}");
        }
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, "gcn", 1, Activation::Identity);
        let x = rng.uniform_matrix(3, 2, 0.5, 1.0);
        let s = Matrix::identity(3);
        let mut broken = s.clone();
        broken[(0, 1)] = 1.0;
        let p = PermutationMatrix::identity(3);
        assert_eq!(check_equivariance_gcn(&layer, &store, &s, &x, &p).unwrap().linear, 0.0);
        assert!(gcn_transfer_residual(&layer, &store, &s, &broken, &x, &p).unwrap().linear > 0.1);
    }

    #[test]
    fn gat_equivariance_and_churn() {
        let mut rng = RngStream::new(9);
        for trial in 0..200 {
            let n = 2 + trial % 7;
            let mut store = ParamStore::new();
            let layer = gat(&mut store, 3, 3, &mut rng);
            let g = random_graph(n, &mut rng);
            let x = rng.uniform_matrix(n, 3, -1.0, 1.0);
            let p = random_perm(n, &mut rng);
            let r = check_equivariance_gat(&layer, &store, &g, &x, &p).unwrap();
            assert!(r < 1e-10, "{r}");
            if trial == 0 {
                let id = PermutationMatrix::identity(n);
                assert_eq!(check_equivariance_gat(&layer, &store, &g, &x, &id).unwrap(), 0.0);
            }
        }
        let mut store = ParamStore::new();
        let layer = gat(&mut store, 3, 3, &mut rng);
        *store.value_mut(layer.mix) = Matrix::from_fn(6, 3, |i, j| if i % 3 == j { 1.0 } else { 0.0 });
        let x = rng.uniform_matrix(3, 3, -1.0, 1.0);
        let g = GraphSnapshot::from_neighbors(vec![true; 3], vec![vec![], vec![], vec![]]).unwrap();
        let churned =
            GraphSnapshot::from_neighbors(vec![true; 3], vec![vec![1, 2], vec![0], vec![]]).unwrap();
        let p = PermutationMatrix::identity(3);
        assert!(gat_transfer_residual(&layer, &store, &g, &churned, &x, &p).unwrap() > 0.0);
    }

    fn check_grads(store: &ParamStore, loss: &dyn Fn(&mut Tape, Binding) -> Result<Var>) {
        let mut analytic = store.clone();
        analytic.zero_grads();
        let mut tape = Tape::new();
        let l = loss(&mut tape, Binding::Train(store)).unwrap();
        tape.backward(l, &mut analytic).unwrap();
        let numeric = finite_diff_grad(
            |s| {
                let mut t = Tape::new();
                let l = loss(&mut t, Binding::Frozen(s))?;
                t.scalar(l)
            },
            store,
            1e-6,
        )
        .unwrap();
        for id in store.ids() {
            let err = max_relative_error(&[analytic.grad(id).clone()], &numeric[id.index()..=id.index()], 1e-6);
            assert!(err < 1e-5, "{}: {err}", store.name(id));
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = RngStream::new(10);
        let mut store = ParamStore::new();
        let shape = GatShape {
            in_dim: 3,
            out_dim: 3,
            heads: 2,
            head_dim: 2,
        };
        let gat = GatLayer::new(&mut store, "gat", shape, true, Activation::Tanh, &mut rng).unwrap();
        let gcn = GcnLayer::new(&mut store, "gcn", 2, Activation::Tanh);
        let head = QHead::new(&mut store, 3, &mut rng);
        let g = random_graph(5, &mut rng);
        let nbrs = Rc::new(NeighborLists::new(&g.attention_sets()));
        let s = Rc::new(SparseMatrix::from_dense(&shift_operator(&g, ShiftKind::RandomWalk)));
        let x = rng.uniform_matrix(5, 3, -1.0, 1.0);
        let alive = alive_weights(&[true, true, false, true, true]);
        check_grads(&store, &|tape, b| {
            let xv = tape.constant(x.clone())?;
            let z = gat.forward(tape, b, xv, &nbrs)?;
            let z = gcn.forward(tape, b, &s, z)?;
            let q = head.forward(tape, b, z, alive.clone())?;
            let sq = tape.mul(q, q)?;
            tape.sum(sq)
        });
    }
}
