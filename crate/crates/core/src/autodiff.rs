//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, which is already a topological order, so the backward
//! sweep is a single reverse pass over the node list.
//!
//! ```
//! use emgraph::autodiff::Tape;
//! use emgraph::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(w, w).unwrap();
//! let grads = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
//! assert_eq!(grads.get(w).unwrap().item().unwrap(), 6.0);
//! ```

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::SparseMatrix;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: bool },
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    RowSoftmax(usize),
    MeanRows(usize),
    Sum(usize),
    SelectRows(usize, Vec<usize>),
    Spmm(Arc<SparseMatrix>, usize),
    SoftmaxCrossEntropy {
        logits: usize,
        rows: Vec<usize>,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a backward pass, one per differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }

    /// Removes and returns the gradient for `var`.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        let pos = self.grads.iter().position(|(v, _)| *v == var)?;
        Some(self.grads.swap_remove(pos).1)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: true })
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: false })
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scale(factor);
        self.push(v, Op::Scale(a.0, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.push(v, Op::Relu(a.0))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).row_softmax();
        self.push(v, Op::RowSoftmax(a.0))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "mean_rows",
                lhs: self.value(a).shape(),
                rhs: (1, self.value(a).cols()),
            });
        }
        let v = self.value(a).mean_rows();
        Ok(self.push(v, Op::MeanRows(a.0)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a.0))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(a).select_rows(rows)?;
        Ok(self.push(v, Op::SelectRows(a.0, rows.to_vec())))
    }

    /// Sparse × dense product `S · x`.
    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let v = s.spmm(self.value(x))?;
        Ok(self.push(v, Op::Spmm(Arc::clone(s), x.0)))
    }

    /// Mean cross-entropy of `row_softmax(logits)` over the selected rows.
    ///
    /// Fused for numerical stability; equivalent to selecting the rows,
    /// applying row-softmax and averaging `-ln p[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, rows: &[usize], labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if rows.len() != labels.len() || rows.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: (rows.len(), 1),
                rhs: (labels.len(), 1),
            });
        }
        let selected = z.select_rows(rows)?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.cols()) {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: z.shape(),
                rhs: (1, bad + 1),
            });
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = selected.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let probs = selected.row_softmax();
        let v = Tensor::scalar(total / rows.len() as f64);
        Ok(self.push(
            v,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                rows: rows.to_vec(),
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Propagates `seed` from `output` back to every differentiable leaf.
    ///
    /// The returned gradient of a leaf is `∂(output · seed)/∂leaf`. A tape can
    /// be swept only once.
    pub fn backward(&mut self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: out_shape,
                rhs: seed.shape(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(&self.nodes[*b].value)?;
                    let gb = self.nodes[*a].value.t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(&self.nodes[*b].value)?;
                    let gb = g.hadamard(&self.nodes[*a].value)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.scale(*f))?,
                Op::Relu(a) => {
                    // relu'(0) = 0
                    let ga = self.nodes[*a]
                        .value
                        .zip_map(&g, "relu_backward", |x, g| if x > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yv, gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.nodes[*a].value.shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(0)) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, Tensor::filled(rows, cols, g.item()?))?;
                }
                Op::SelectRows(a, rows) => {
                    let (nr, nc) = self.nodes[*a].value.shape();
                    let mut ga = Tensor::zeros(nr, nc);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Spmm(s, x) => accumulate(&mut grads, *x, s.spmm_transpose(&g)?)?,
                Op::SoftmaxCrossEntropy {
                    logits,
                    rows,
                    labels,
                    probs,
                } => {
                    let upstream = g.item()?;
                    let (nr, nc) = self.nodes[*logits].value.shape();
                    let mut ga = Tensor::zeros(nr, nc);
                    let inv = upstream / rows.len() as f64;
                    for (i, (&r, &label)) in rows.iter().zip(labels).enumerate() {
                        let out = ga.row_mut(r);
                        for (c, (o, p)) in out.iter_mut().zip(probs.row(i)).enumerate() {
                            let target = if c == label { 1.0 } else { 0.0 };
                            *o += (p - target) * inv;
                        }
                    }
                    accumulate(&mut grads, *logits, ga)?;
                }
            }
        }

        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: true } = node.op {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                out.push((Var(idx), g));
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) -> Result<()> {
    match &mut grads[idx] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Compares an analytic gradient with central differences.
///
/// `f` returns the loss and its gradient (one tensor per entry of `params`).
/// The result is the maximum over all entries of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_check",
            lhs: (params.len(), 1),
            rhs: (analytic.len(), 1),
        });
    }
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for leaf in 0..params.len() {
        for entry in 0..params[leaf].data().len() {
            let orig = params[leaf].data()[entry];
            work[leaf].data_mut()[entry] = orig + h;
            let (plus, _) = f(&work)?;
            work[leaf].data_mut()[entry] = orig - h;
            let (minus, _) = f(&work)?;
            work[leaf].data_mut()[entry] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at perturbed leaf {leaf} entry {entry}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[leaf].data()[entry] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SparseMatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0]]).unwrap());
        let s = tape.sum(w);
        let g = tape.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(w).unwrap(), &Tensor::ones(2, 2));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(w, w).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 9.0);
        let g = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(w).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(1.0));
        let y = tape.scale(w, 2.0);
        tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            tape.backward(y, &Tensor::scalar(1.0)),
            Err(Error::TapeConsumed)
        ));
    }

    #[test]
    fn seed_shape_must_match() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(2, 2));
        assert!(tape.backward(w, &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[vec![0.0, 1.0, -1.0]]).unwrap());
        let r = tape.relu(w);
        let s = tape.sum(r);
        let g = tape.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient_entry() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let w = tape.param(Tensor::scalar(5.0));
        let y = tape.mul(c, w).unwrap();
        let g = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.get(w).unwrap().item().unwrap(), 2.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn finite_diff_linear_and_quadratic() {
        let linear = |p: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            let w = p[0].item()?;
            Ok((3.0 * w, vec![Tensor::scalar(3.0)]))
        };
        let err = finite_diff_check(linear, &[Tensor::scalar(0.7)], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");

        let quad = |p: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            let w = p[0].item()?;
            Ok((w * w, vec![Tensor::scalar(2.0 * w)]))
        };
        let err = finite_diff_check(quad, &[Tensor::scalar(1.0)], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_non_finite() {
        let f = |p: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            let w = p[0].item()?;
            Ok((w.ln(), vec![Tensor::scalar(1.0 / w)]))
        };
        assert!(finite_diff_check(f, &[Tensor::scalar(1.0)], 0.0).is_err());
        let err = finite_diff_check(f, &[Tensor::scalar(0.0)], 1e-3).unwrap_err();
        assert!(err.to_string().contains("entry 0"), "{err}");
    }

    /// Builds `sum(seed ∘ op(inputs))` so every output entry is weighted
    /// differently and checks it against central differences.
    fn check_primitive(
        shapes: &[(usize, usize)],
        seed_rng: u64,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_rng);
        let params: Vec<Tensor> = shapes
            .iter()
            .map(|&(r, c)| Tensor::uniform(r, c, -1.0, 1.0, &mut rng))
            .collect();
        let weights = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
            let out = build(&mut tape, &vars).unwrap();
            let (r, c) = tape.value(out).shape();
            Tensor::uniform(r, c, -1.0, 1.0, &mut rng)
        };
        let f = |p: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t.clone())).collect();
            let out = build(&mut tape, &vars)?;
            let value = tape.value(out).hadamard(&weights)?.sum();
            let mut g = tape.backward(out, &weights)?;
            Ok((value, vars.iter().map(|v| g.take(*v).unwrap()).collect()))
        };
        finite_diff_check(f, &params, 1e-5).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn primitives_match_central_differences(
            n in 1usize..5, k in 1usize..5, m in 1usize..5, seed in any::<u64>()
        ) {
            let tol = 1e-5;
            prop_assert!(check_primitive(&[(n, k), (k, m)], seed, |t, v| t.matmul(v[0], v[1])) < tol);
            prop_assert!(check_primitive(&[(n, k), (n, k)], seed, |t, v| t.add(v[0], v[1])) < tol);
            prop_assert!(check_primitive(&[(n, k), (n, k)], seed, |t, v| t.sub(v[0], v[1])) < tol);
            prop_assert!(check_primitive(&[(n, k), (n, k)], seed, |t, v| t.mul(v[0], v[1])) < tol);
            prop_assert!(check_primitive(&[(n, k)], seed, |t, v| Ok(t.scale(v[0], -1.7))) < tol);
            prop_assert!(check_primitive(&[(n, k)], seed, |t, v| Ok(t.relu(v[0]))) < tol);
            prop_assert!(check_primitive(&[(n, k)], seed, |t, v| Ok(t.row_softmax(v[0]))) < tol);
            prop_assert!(check_primitive(&[(n, k)], seed, |t, v| t.mean_rows(v[0])) < tol);
            prop_assert!(check_primitive(&[(n, k)], seed, |t, v| Ok(t.sum(v[0]))) < tol);
            prop_assert!(check_primitive(&[(n, k)], seed, |t, v| t.select_rows(v[0], &[n - 1, 0, n - 1])) < tol);
            let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            let rows: Vec<usize> = (0..n).collect();
            prop_assert!(check_primitive(&[(n, k)], seed, |t, v| t.softmax_cross_entropy(v[0], &rows, &labels)) < tol);
            let s = Arc::new(random_sparse(n, seed));
            prop_assert!(check_primitive(&[(n, k)], seed, |t, v| t.spmm(&s, v[0])) < tol);
        }

        #[test]
        fn softmax_rows_sum_to_one(n in 1usize..6, k in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform(n, k, -30.0, 30.0, &mut rng).row_softmax();
            for r in 0..n {
                prop_assert!((x.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    fn random_sparse(n: usize, seed: u64) -> SparseMatrix {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut triplets = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if rng.gen_bool(0.5) {
                    triplets.push((i, j, rng.gen_range(-1.0..1.0)));
                }
            }
        }
        SparseMatrix::from_triplets(n, n, triplets).unwrap()
    }
}
