use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Hard permutation stored as its assignment vector: row `i` has its single
/// one in column `assignment[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PermutationMatrix {
    assignment: Vec<usize>,
}

impl PermutationMatrix {
    pub fn identity(n: usize) -> Self {
        PermutationMatrix {
            assignment: (0..n).collect(),
        }
    }

    pub fn from_assignment(assignment: Vec<usize>) -> Result<Self> {
        let n = assignment.len();
        let mut seen = vec![false; n];
        for &c in &assignment {
            if c >= n || seen[c] {
                return Err(Error::Contract(format!(
                    "{assignment:?} is not a permutation"
                )));
            }
            seen[c] = true;
        }
        Ok(PermutationMatrix { assignment })
    }

    /// Parses a 0/1 matrix, rejecting anything that is not a permutation.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::dim("permutation", "not square"));
        }
        let mut assignment = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let ones: Vec<usize> = (0..m.cols()).filter(|&j| m[(i, j)] == 1.0).collect();
            let zeros = m.row(i).iter().filter(|&&v| v == 0.0).count();
            if ones.len() != 1 || zeros != m.cols() - 1 {
                return Err(Error::Contract(format!("row {i} is not a unit row")));
            }
            assignment.push(ones[0]);
        }
        PermutationMatrix::from_assignment(assignment)
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn to_matrix(&self) -> Matrix {
        let n = self.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &j) in self.assignment.iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        m
    }

    pub fn transpose(&self) -> PermutationMatrix {
        let mut inv = vec![0; self.len()];
        for (i, &j) in self.assignment.iter().enumerate() {
            inv[j] = i;
        }
        PermutationMatrix { assignment: inv }
    }

    /// Node order after applying `P^T` to a node-indexed signal: new node
    /// `i` is old node `order[i]`.
    pub fn transpose_order(&self) -> Vec<usize> {
        self.transpose().assignment
    }

    /// `<P, X>_F`
    pub fn frobenius(&self, x: &Matrix) -> f64 {
        self.assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| x[(i, j)])
            .sum()
    }
}

/// The assignment maximizing `<P, X>_F`, via the O(N^3) shortest augmenting
/// path method with potentials. Among (numerically) tied optima the
/// lexicographically smallest assignment vector is returned.
pub fn hungarian_match(x: &Matrix) -> Result<PermutationMatrix> {
    let n = x.rows();
    if x.cols() != n {
        return Err(Error::dim("hungarian_match", format!("{:?} is not square", x.shape())));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "hungarian_match" });
    }
    if n == 0 {
        return Ok(PermutationMatrix::identity(0));
    }
    // minimize cost = -x; 1-based arrays, index 0 is the virtual row/column
    let cost = |i: usize, j: usize| -x[(i - 1, j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }

    // tight edges under the final potentials carry every optimal assignment
    let tol = 1e-9 * (1.0 + x.max_abs());
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| cost(i + 1, j + 1) - u[i + 1] - v[j + 1] <= tol)
                .collect()
        })
        .collect();
    lexicographic_refine(&tight, &mut row_to_col);
    PermutationMatrix::from_assignment(row_to_col)
}

/// Rewrites a perfect matching inside `tight` into the lexicographically
/// smallest one, fixing rows in order.
fn lexicographic_refine(tight: &[Vec<usize>], row_to_col: &mut [usize]) {
    let n = row_to_col.len();
    let mut col_to_row = vec![0; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    for i in 0..n {
        for &j in &tight[i] {
            if j == row_to_col[i] {
                break;
            }
            let r = col_to_row[j];
            if r < i {
                continue;
            }
            // row r gives up j; look for an alternating path from r to the
            // column i is about to release, through unfixed rows only
            let target = row_to_col[i];
            let mut visited = vec![false; n];
            visited[j] = true;
            let mut path = Vec::new();
            if find_path(tight, &col_to_row, r, target, i, &mut visited, &mut path) {
                for &(row, col) in &path {
                    row_to_col[row] = col;
                    col_to_row[col] = row;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
    }
}

fn find_path(
    tight: &[Vec<usize>],
    col_to_row: &[usize],
    row: usize,
    target: usize,
    pivot: usize,
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for &c in &tight[row] {
        if visited[c] {
            continue;
        }
        visited[c] = true;
        if c == target {
            path.push((row, c));
            return true;
        }
        let next = col_to_row[c];
        if next > pivot && find_path(tight, col_to_row, next, target, pivot, visited, path) {
            path.push((row, c));
            return true;
        }
    }
    false
}
