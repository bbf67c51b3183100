//! Typed sparse graphs and GCN shift operators.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sparse matrix stored as coordinate triplets sorted by `(row, col)`.
///
/// Duplicate coordinates are merged by summing and exact zeros are dropped,
/// so iteration order is canonical.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_idx: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_idx: Vec::new(),
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_idx: (0..n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|(r, c, _)| *r >= rows || *c >= cols) {
            return Err(Error::InvalidGraph(format!(
                "entry ({r}, {c}) outside a {rows}x{cols} matrix"
            )));
        }
        if let Some(&(r, c, v)) = triplets.iter().find(|(_, _, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sparse entry ({r}, {c}) = {v}")));
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut m = Self::empty(rows, cols);
        for (r, c, v) in triplets {
            if m.row_idx.last() == Some(&r) && m.col_idx.last() == Some(&c) {
                *m.values.last_mut().unwrap() += v;
            } else {
                m.row_idx.push(r);
                m.col_idx.push(c);
                m.values.push(v);
            }
        }
        m.drop_zeros();
        Ok(m)
    }

    pub fn from_dense(t: &Tensor) -> Self {
        let mut m = Self::empty(t.rows(), t.cols());
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                let v = t.get(r, c);
                if v != 0.0 {
                    m.row_idx.push(r);
                    m.col_idx.push(c);
                    m.values.push(v);
                }
            }
        }
        m
    }

    fn drop_zeros(&mut self) {
        let keep: Vec<bool> = self.values.iter().map(|v| *v != 0.0).collect();
        if keep.iter().all(|k| *k) {
            return;
        }
        let mut i = 0;
        self.row_idx.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        i = 0;
        self.col_idx.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        self.values.retain(|v| *v != 0.0);
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.row_idx
            .iter()
            .zip(&self.col_idx)
            .zip(&self.values)
            .map(|((&r, &c), &v)| (r, c, v))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let start = self.row_idx.partition_point(|&x| x < r);
        let end = self.row_idx.partition_point(|&x| x <= r);
        match self.col_idx[start..end].binary_search(&c) {
            Ok(pos) => self.values[start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.rows, self.cols);
        for (r, c, v) in self.iter() {
            t.set(r, c, v);
        }
        t
    }

    pub fn transpose(&self) -> SparseMatrix {
        let triplets = self.iter().map(|(r, c, v)| (c, r, v)).collect();
        SparseMatrix::from_triplets(self.cols, self.rows, triplets).expect("transpose of valid matrix")
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && self.iter().all(|(r, c, v)| self.get(c, r) == v)
    }

    pub fn scale(&self, factor: f64) -> SparseMatrix {
        let mut m = self.clone();
        for v in &mut m.values {
            *v *= factor;
        }
        m.drop_zeros();
        m
    }

    /// Weighted sum `Σ wᵢ·Mᵢ` of equally shaped matrices.
    pub fn linear_combination(terms: &[(f64, &SparseMatrix)]) -> Result<SparseMatrix> {
        let Some((_, first)) = terms.first() else {
            return Err(Error::InvalidGraph("empty linear combination".into()));
        };
        let (rows, cols) = (first.rows, first.cols);
        let mut triplets = Vec::new();
        for (w, m) in terms {
            if (m.rows, m.cols) != (rows, cols) {
                return Err(Error::ShapeMismatch {
                    op: "linear_combination",
                    lhs: (rows, cols),
                    rhs: (m.rows, m.cols),
                });
            }
            if *w == 0.0 {
                continue;
            }
            triplets.extend(m.iter().map(|(r, c, v)| (r, c, w * v)));
        }
        SparseMatrix::from_triplets(rows, cols, triplets)
    }

    /// Exact sparse × dense product.
    pub fn spmm(&self, x: &Tensor) -> Result<Tensor> {
        if self.cols != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "spmm",
                lhs: (self.rows, self.cols),
                rhs: x.shape(),
            });
        }
        let k = x.cols();
        let mut out = Tensor::zeros(self.rows, k);
        let src = x.data();
        let dst = out.data_mut();
        for (r, c, v) in self.iter() {
            for (o, s) in dst[r * k..(r + 1) * k].iter_mut().zip(&src[c * k..(c + 1) * k]) {
                *o += v * s;
            }
        }
        Ok(out)
    }

    /// `Sᵀ · g`, the gradient of [`spmm`](Self::spmm) with respect to its dense input.
    pub fn spmm_transpose(&self, g: &Tensor) -> Result<Tensor> {
        if self.rows != g.rows() {
            return Err(Error::ShapeMismatch {
                op: "spmm_transpose",
                lhs: (self.rows, self.cols),
                rhs: g.shape(),
            });
        }
        let k = g.cols();
        let mut out = Tensor::zeros(self.cols, k);
        let src = g.data();
        let dst = out.data_mut();
        for (r, c, v) in self.iter() {
            for (o, s) in dst[c * k..(c + 1) * k].iter_mut().zip(&src[r * k..(r + 1) * k]) {
                *o += v * s;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeLayer {
    pub edge_type: u32,
    pub adjacency: SparseMatrix,
}

/// Node set with one symmetric weighted adjacency per edge type.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edge_layers: Vec<EdgeLayer>,
    node_features: Tensor,
}

impl Graph {
    pub fn new(num_nodes: usize, edge_layers: Vec<EdgeLayer>, node_features: Tensor) -> Result<Self> {
        if node_features.rows() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "{} feature rows for {num_nodes} nodes",
                node_features.rows()
            )));
        }
        for layer in &edge_layers {
            validate_adjacency(&layer.adjacency, num_nodes)
                .map_err(|e| Error::InvalidGraph(format!("edge type {}: {e}", layer.edge_type)))?;
        }
        Ok(Self {
            num_nodes,
            edge_layers,
            node_features,
        })
    }

    /// Builds a graph from undirected typed edges `(u, v, type, weight)`.
    ///
    /// Each row is mirrored into both directions; repeated rows accumulate
    /// weight. Layers are emitted in the order of `edge_types`.
    pub fn from_typed_edges(
        num_nodes: usize,
        edge_types: &[u32],
        edges: &[(usize, usize, u32, f64)],
        node_features: Tensor,
    ) -> Result<Self> {
        let mut per_type: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); edge_types.len()];
        for &(u, v, ty, w) in edges {
            let slot = edge_types
                .iter()
                .position(|&t| t == ty)
                .ok_or_else(|| Error::InvalidGraph(format!("unknown edge type {ty}")))?;
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop on node {u}")));
            }
            per_type[slot].push((u, v, w));
            per_type[slot].push((v, u, w));
        }
        let layers = edge_types
            .iter()
            .zip(per_type)
            .map(|(&edge_type, trips)| {
                Ok(EdgeLayer {
                    edge_type,
                    adjacency: SparseMatrix::from_triplets(num_nodes, num_nodes, trips)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Graph::new(num_nodes, layers, node_features)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edge_layers(&self) -> &[EdgeLayer] {
        &self.edge_layers
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    /// All edge types summed with their native weights, ignoring types.
    pub fn combined_adjacency(&self) -> Result<SparseMatrix> {
        if self.edge_layers.is_empty() {
            return Ok(SparseMatrix::empty(self.num_nodes, self.num_nodes));
        }
        let terms: Vec<(f64, &SparseMatrix)> = self.edge_layers.iter().map(|l| (1.0, &l.adjacency)).collect();
        SparseMatrix::linear_combination(&terms)
    }

    /// Undirected edges `(u < v, type, weight)` in canonical order.
    pub fn undirected_edges(&self) -> Vec<(usize, usize, u32, f64)> {
        let mut out = Vec::new();
        for layer in &self.edge_layers {
            out.extend(
                layer
                    .adjacency
                    .iter()
                    .filter(|(r, c, _)| r < c)
                    .map(|(r, c, v)| (r, c, layer.edge_type, v)),
            );
        }
        out
    }
}

fn validate_adjacency(a: &SparseMatrix, n: usize) -> Result<()> {
    if a.rows() != n || a.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "adjacency",
            lhs: (a.rows(), a.cols()),
            rhs: (n, n),
        });
    }
    for (r, c, v) in a.iter() {
        if v < 0.0 {
            return Err(Error::NegativeWeight {
                row: r,
                col: c,
                weight: v,
            });
        }
        if r == c {
            return Err(Error::InvalidGraph(format!("self-loop on node {r}")));
        }
    }
    if !a.is_symmetric() {
        return Err(Error::InvalidGraph("adjacency is not symmetric".into()));
    }
    Ok(())
}

/// Symmetrically normalised adjacency used as the aggregation step.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftOperator {
    matrix: Arc<SparseMatrix>,
}

impl ShiftOperator {
    pub fn from_matrix(matrix: SparseMatrix) -> Self {
        Self {
            matrix: Arc::new(matrix),
        }
    }

    pub fn matrix(&self) -> &Arc<SparseMatrix> {
        &self.matrix
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn to_dense(&self) -> Tensor {
        self.matrix.to_dense()
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` (or without `I` when `add_self_loops` is off).
///
/// Nodes whose degree is zero keep a unit diagonal entry.
pub fn normalized_shift(a: &SparseMatrix, add_self_loops: bool) -> Result<ShiftOperator> {
    if a.rows() != a.cols() {
        return Err(Error::ShapeMismatch {
            op: "normalized_shift",
            lhs: (a.rows(), a.cols()),
            rhs: (a.cols(), a.rows()),
        });
    }
    if let Some((r, c, v)) = a.iter().find(|(_, _, v)| *v < 0.0) {
        return Err(Error::NegativeWeight {
            row: r,
            col: c,
            weight: v,
        });
    }
    if !a.is_symmetric() {
        return Err(Error::InvalidGraph("shift input is not symmetric".into()));
    }
    let n = a.rows();
    let loop_weight = if add_self_loops { 1.0 } else { 0.0 };
    let mut degree = vec![loop_weight; n];
    for (r, _, v) in a.iter() {
        degree[r] += v;
    }
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut triplets: Vec<(usize, usize, f64)> = a
        .iter()
        .map(|(r, c, v)| (r, c, v * (inv_sqrt[r] * inv_sqrt[c])))
        .collect();
    for i in 0..n {
        if degree[i] == 0.0 {
            triplets.push((i, i, 1.0));
        } else if add_self_loops {
            triplets.push((i, i, loop_weight * inv_sqrt[i] * inv_sqrt[i]));
        }
    }
    Ok(ShiftOperator::from_matrix(SparseMatrix::from_triplets(n, n, triplets)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn single_isolated_node() {
        let s = normalized_shift(&SparseMatrix::empty(1, 1), true).unwrap();
        assert_eq!(s.to_dense().data(), &[1.0]);
        let s = normalized_shift(&SparseMatrix::empty(1, 1), false).unwrap();
        assert_eq!(s.to_dense().data(), &[1.0]);
    }

    #[test]
    fn two_nodes_one_edge() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let s = normalized_shift(&a, true).unwrap().to_dense();
        assert!(close(&s, &Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap(), 1e-15));
    }

    #[test]
    fn empty_edges_give_identity() {
        let s = normalized_shift(&SparseMatrix::empty(4, 4), true).unwrap();
        assert_eq!(s.to_dense(), Tensor::identity(4));
    }

    #[test]
    fn negative_weight_rejected() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(0, 1, -1.0), (1, 0, -1.0)]).unwrap();
        assert!(matches!(normalized_shift(&a, true), Err(Error::NegativeWeight { .. })));
    }

    #[test]
    fn spmm_identity_and_permutation() {
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(SparseMatrix::identity(2).spmm(&x).unwrap(), x);
        let p = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        assert_eq!(p.spmm(&x).unwrap().data(), &[2.0, 1.0]);
        assert!(p.spmm(&Tensor::zeros(3, 1)).is_err());
    }

    #[test]
    fn duplicates_are_summed() {
        let m = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.0), (1, 0, 0.5)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.0);
        let g = Graph::from_typed_edges(
            2,
            &[7],
            &[(0, 1, 7, 1.0), (0, 1, 7, 1.0)],
            Tensor::zeros(2, 1),
        )
        .unwrap();
        assert_eq!(g.edge_layers()[0].adjacency.get(1, 0), 2.0);
    }

    #[test]
    fn unknown_type_and_self_loop_rejected() {
        let f = Tensor::zeros(3, 1);
        assert!(Graph::from_typed_edges(3, &[0], &[(0, 1, 1, 1.0)], f.clone()).is_err());
        assert!(Graph::from_typed_edges(3, &[0], &[(1, 1, 0, 1.0)], f.clone()).is_err());
        assert!(Graph::from_typed_edges(3, &[0], &[(0, 5, 0, 1.0)], f).is_err());
    }

    fn random_adjacency(n: usize, rng: &mut ChaCha8Rng) -> SparseMatrix {
        let mut trips = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(0.3) {
                    let w = rng.gen_range(0.1..2.0);
                    trips.push((i, j, w));
                    trips.push((j, i, w));
                }
            }
        }
        SparseMatrix::from_triplets(n, n, trips).unwrap()
    }

    proptest! {
        #[test]
        fn spmm_equals_dense_matmul(n in 1usize..=32, k in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = normalized_shift(&random_adjacency(n, &mut rng), true).unwrap();
            let x = Tensor::uniform(n, k, -1.0, 1.0, &mut rng);
            let sparse = s.matrix().spmm(&x).unwrap();
            let dense = s.to_dense().matmul(&x).unwrap();
            prop_assert!(close(&sparse, &dense, 1e-15));
        }

        #[test]
        fn shift_is_symmetric_bounded_and_stable(n in 1usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = normalized_shift(&random_adjacency(n, &mut rng), true).unwrap();
            let m = s.matrix();
            prop_assert!(m.is_symmetric());
            prop_assert!(m.iter().all(|(_, _, v)| v.abs() <= 1.0 + 1e-15));
            // re-symmetrising (S + Sᵀ)/2 returns S
            let d = s.to_dense();
            let sym = d.add(&d.transpose()).unwrap().scale(0.5);
            prop_assert!(close(&sym, &d, 0.0));
        }
    }
}
