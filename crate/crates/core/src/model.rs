//! The λ-dependent GCN `Ψ(λ, x; θ)`, its task heads and losses.
//!
//! Layer `k` uses the weight `θ₁ᵏ + λ·θ₂ᵏ`:
//! `x^k = ReLU(S_λ · x^{k−1} · (θ₁ᵏ + λθ₂ᵏ))`, with the last layer left linear.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::ShiftOperator;
use crate::tensor::Tensor;

/// Shift operators and features of every instance at one λ.
#[derive(Clone, Copy, Debug)]
pub struct GraphBatch<'a> {
    shifts: &'a [ShiftOperator],
    features: &'a [Tensor],
}

impl<'a> GraphBatch<'a> {
    pub fn new(shifts: &'a [ShiftOperator], features: &'a [Tensor]) -> Self {
        assert_eq!(shifts.len(), features.len(), "one shift operator per feature matrix");
        Self { shifts, features }
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    pub fn shift(&self, i: usize) -> &'a ShiftOperator {
        &self.shifts[i]
    }

    pub fn features(&self, i: usize) -> &'a Tensor {
        &self.features[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskKind {
    /// One graph; `labels[node]` is `None` for unlabeled nodes.
    NodeClassification { labels: Vec<Option<usize>>, num_classes: usize },
    /// One target per graph instance.
    GraphRegression { targets: Vec<f64> },
}

/// Task, labels and split. Split indices refer to nodes for node
/// classification and to graph instances for regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, train: Vec<usize>, val: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let spec = Self { kind, train, val, test };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::InvalidTask("empty training split".into()));
        }
        let n = self.num_items();
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(Error::InvalidTask(format!("split index {i} out of range for {n} items")));
            }
            if seen[i] {
                return Err(Error::InvalidTask(format!("index {i} appears in more than one split")));
            }
            seen[i] = true;
        }
        match &self.kind {
            TaskKind::NodeClassification { labels, num_classes } => {
                if *num_classes < 2 {
                    return Err(Error::InvalidTask("node classification needs at least 2 classes".into()));
                }
                for &i in self.train.iter().chain(&self.val).chain(&self.test) {
                    match labels[i] {
                        None => return Err(Error::InvalidTask(format!("node {i} is in a split but unlabeled"))),
                        Some(c) if c >= *num_classes => {
                            return Err(Error::InvalidTask(format!("label {c} of node {i} exceeds class count")))
                        }
                        _ => {}
                    }
                }
            }
            TaskKind::GraphRegression { targets } => {
                if targets.iter().any(|t| !t.is_finite()) {
                    return Err(Error::InvalidTask("non-finite regression target".into()));
                }
            }
        }
        Ok(())
    }

    /// Number of nodes (classification) or graphs (regression).
    pub fn num_items(&self) -> usize {
        match &self.kind {
            TaskKind::NodeClassification { labels, .. } => labels.len(),
            TaskKind::GraphRegression { targets } => targets.len(),
        }
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.kind, TaskKind::NodeClassification { .. })
    }

    /// Output width of the last GCN layer.
    pub fn output_dim(&self, hidden: usize) -> usize {
        match &self.kind {
            TaskKind::NodeClassification { num_classes, .. } => *num_classes,
            TaskKind::GraphRegression { .. } => hidden,
        }
    }

    fn labels_for(&self, rows: &[usize]) -> Vec<usize> {
        match &self.kind {
            TaskKind::NodeClassification { labels, .. } => rows.iter().map(|&r| labels[r].unwrap_or(0)).collect(),
            TaskKind::GraphRegression { .. } => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    /// Inverted dropout on hidden activations during gradient steps.
    pub dropout: f64,
    pub weight_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            dropout: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config("model needs at least one layer of positive width".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub theta1: Tensor,
    pub theta2: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerWeights>,
    /// Scalar projection of the readout; present only for regression.
    pub head: Option<Tensor>,
}

impl ModelParams {
    /// Glorot initialization. `θ₂` is shrunk by `1/max(1, lambda_scale)` so
    /// that `θ₁ + λθ₂` starts at a comparable scale for every λ on the grid.
    pub fn init(config: &ModelConfig, input_dim: usize, task: &TaskSpec, lambda_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let out = task.output_dim(config.hidden);
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat(config.hidden).take(config.layers - 1));
        dims.push(out);
        let shrink = 1.0 / lambda_scale.abs().max(1.0);
        let layers = dims
            .windows(2)
            .map(|w| LayerWeights {
                theta1: Tensor::glorot(w[0], w[1], 1.0, rng),
                theta2: Tensor::glorot(w[0], w[1], shrink, rng),
            })
            .collect();
        let head = (!task.is_classification()).then(|| Tensor::glorot(out, 1, 1.0, rng));
        Self { layers, head }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    theta1: Tensor::zeros(l.theta1.rows(), l.theta1.cols()),
                    theta2: Tensor::zeros(l.theta2.rows(), l.theta2.cols()),
                })
                .collect(),
            head: self.head.as_ref().map(|h| Tensor::zeros(h.rows(), h.cols())),
        }
    }

    /// All weight tensors in a fixed order: `θ₁¹, θ₂¹, …, θ₁ᴷ, θ₂ᴷ, head`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.layers.iter().flat_map(|l| [&l.theta1, &l.theta2]).collect();
        out.extend(self.head.as_ref());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.theta1, &mut l.theta2])
            .collect();
        out.extend(self.head.as_mut());
        out
    }

    /// Rebuilds parameters of the same layout from `tensors()`-ordered values.
    pub fn with_tensors(&self, values: &[Tensor]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::Config(format!("{} tensors for {} parameter slots", values.len(), slots.len())));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "with_tensors",
                    lhs: slot.shape(),
                    rhs: v.shape(),
                });
            }
            *slot = v.clone();
        }
        Ok(out)
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        let others = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != others.len() {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        for (m, o) in mine.into_iter().zip(others) {
            m.axpy(alpha, o)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }
}

struct Leaves {
    layers: Vec<(Var, Var)>,
    head: Option<Var>,
}

fn register(tape: &mut Tape, params: &ModelParams) -> Leaves {
    Leaves {
        layers: params
            .layers
            .iter()
            .map(|l| (tape.param(l.theta1.clone()), tape.param(l.theta2.clone())))
            .collect(),
        head: params.head.as_ref().map(|h| tape.param(h.clone())),
    }
}

fn embed(
    tape: &mut Tape,
    leaves: &Leaves,
    lambda: f64,
    shift: &ShiftOperator,
    features: &Tensor,
    dropout: &mut Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Var> {
    let weights: Vec<Var> = leaves
        .layers
        .iter()
        .map(|&(t1, t2)| {
            let scaled = tape.scale(t2, lambda);
            tape.add(t1, scaled)
        })
        .collect::<Result<_>>()?;
    let mut x = tape.constant(features.clone());
    let last = weights.len() - 1;
    for (k, &w) in weights.iter().enumerate() {
        let xw = tape.matmul(x, w)?;
        x = tape.spmm(shift.matrix(), xw)?;
        if k < last {
            x = tape.relu(x);
            if let Some((p, rng)) = dropout.as_mut() {
                let (rows, cols) = tape.value(x).shape();
                let keep = 1.0 - *p;
                let mask: Vec<f64> = (0..rows * cols)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = tape.constant(Tensor::from_vec(rows, cols, mask)?);
                x = tape.mul(x, m)?;
            }
        }
    }
    Ok(x)
}

fn check_batch(batch: &GraphBatch<'_>, task: &TaskSpec) -> Result<()> {
    let expected = match task.kind {
        TaskKind::NodeClassification { .. } => 1,
        TaskKind::GraphRegression { ref targets } => targets.len(),
    };
    if batch.len() != expected {
        return Err(Error::InvalidTask(format!(
            "task expects {expected} graph instances, batch has {}",
            batch.len()
        )));
    }
    Ok(())
}

/// Records the training loss on `tape` and returns `(leaves, loss)`.
fn record_loss(
    tape: &mut Tape,
    params: &ModelParams,
    lambda: f64,
    batch: &GraphBatch<'_>,
    task: &TaskSpec,
    rows: &[usize],
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(Leaves, Var)> {
    check_batch(batch, task)?;
    if rows.is_empty() {
        return Err(Error::InvalidTask("loss over an empty split".into()));
    }
    let leaves = register(tape, params);
    let loss = match &task.kind {
        TaskKind::NodeClassification { .. } => {
            let z = embed(tape, &leaves, lambda, batch.shift(0), batch.features(0), &mut dropout)?;
            tape.softmax_cross_entropy(z, rows, &task.labels_for(rows))?
        }
        TaskKind::GraphRegression { targets } => {
            let head = leaves.head.ok_or_else(|| Error::InvalidTask("regression model without head".into()))?;
            let mut total: Option<Var> = None;
            for &g in rows {
                let z = embed(tape, &leaves, lambda, batch.shift(g), batch.features(g), &mut dropout)?;
                let pooled = tape.mean_rows(z)?;
                let pred = tape.matmul(pooled, head)?;
                let target = tape.constant(Tensor::scalar(targets[g]));
                let err = tape.sub(pred, target)?;
                let sq = tape.mul(err, err)?;
                total = Some(match total {
                    None => sq,
                    Some(t) => tape.add(t, sq)?,
                });
            }
            let total = total.expect("rows is non-empty");
            tape.scale(total, 1.0 / rows.len() as f64)
        }
    };
    Ok((leaves, loss))
}

/// Per-instance embeddings `z = x^K` at λ.
pub fn forward(params: &ModelParams, lambda: f64, batch: &GraphBatch<'_>) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let leaves = register(&mut tape, params);
    (0..batch.len())
        .map(|i| {
            let z = embed(&mut tape, &leaves, lambda, batch.shift(i), batch.features(i), &mut None)?;
            Ok(tape.value(z).clone())
        })
        .collect()
}

/// Mean over node rows.
pub fn readout(z: &Tensor) -> Result<Tensor> {
    if z.rows() == 0 {
        return Err(Error::InvalidGraph("readout of an empty graph".into()));
    }
    Ok(z.mean_rows())
}

/// `L_X(λ, θ)` on the given split.
pub fn loss(params: &ModelParams, lambda: f64, batch: &GraphBatch<'_>, task: &TaskSpec, split: Split) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, l) = record_loss(&mut tape, params, lambda, batch, task, task.split(split), None)?;
    let value = tape.value(l).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss at λ = {lambda}")));
    }
    Ok(value)
}

/// Training loss and its gradient with respect to every parameter.
///
/// Weight decay adds `weight_decay · θ` to the gradient; dropout is applied
/// only when an RNG is given.
pub fn loss_and_grad(
    params: &ModelParams,
    lambda: f64,
    batch: &GraphBatch<'_>,
    task: &TaskSpec,
    config: &ModelConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ModelParams)> {
    let mut tape = Tape::new();
    let dropout = rng.filter(|_| config.dropout > 0.0).map(|r| (config.dropout, r));
    let (leaves, l) = record_loss(&mut tape, params, lambda, batch, task, &task.train, dropout)?;
    let value = tape.value(l).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss at λ = {lambda}")));
    }
    let mut grads = tape.backward(l, &Tensor::scalar(1.0))?;
    let mut take = |v: Var| grads.take(v).expect("every parameter leaf has a gradient");
    let mut grad = ModelParams {
        layers: leaves
            .layers
            .iter()
            .map(|&(t1, t2)| LayerWeights {
                theta1: take(t1),
                theta2: take(t2),
            })
            .collect(),
        head: leaves.head.map(&mut take),
    };
    if config.weight_decay > 0.0 {
        grad.axpy(config.weight_decay, params)?;
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!("gradient at λ = {lambda}")));
    }
    Ok((value, grad))
}

/// Task outputs per item: class logits (`n × C`, one row per node) for node
/// classification, or `m × 1` graph predictions for regression.
pub fn outputs_from_embeddings(params: &ModelParams, embeddings: &[Tensor], task: &TaskSpec) -> Result<Tensor> {
    match &task.kind {
        TaskKind::NodeClassification { .. } => Ok(embeddings[0].clone()),
        TaskKind::GraphRegression { .. } => {
            let head = params
                .head
                .as_ref()
                .ok_or_else(|| Error::InvalidTask("regression model without head".into()))?;
            let preds = embeddings
                .iter()
                .map(|z| readout(z)?.matmul(head).and_then(|p| p.item()))
                .collect::<Result<Vec<f64>>>()?;
            Tensor::from_vec(preds.len(), 1, preds)
        }
    }
}

/// Expected embeddings `Σ_λ w(λ)·Ψ(λ, x; θ)` over the given (λ, weight, batch) terms.
pub fn expected_embeddings<'a>(
    params: &ModelParams,
    terms: impl IntoIterator<Item = (f64, f64, GraphBatch<'a>)>,
) -> Result<Vec<Tensor>> {
    let mut acc: Option<Vec<Tensor>> = None;
    for (lambda, weight, batch) in terms {
        let z = forward(params, lambda, &batch)?;
        match acc.as_mut() {
            None => acc = Some(z.into_iter().map(|t| t.scale(weight)).collect()),
            Some(sum) => {
                for (s, t) in sum.iter_mut().zip(&z) {
                    s.axpy(weight, t)?;
                }
            }
        }
    }
    acc.ok_or(Error::ZeroDensity)
}

/// Loss of precomputed outputs on a split: cross-entropy of the logits or
/// mean squared error of the predictions.
pub fn output_loss(outputs: &Tensor, task: &TaskSpec, split: Split) -> Result<f64> {
    let rows = task.split(split);
    if rows.is_empty() {
        return Err(Error::InvalidTask("loss over an empty split".into()));
    }
    match &task.kind {
        TaskKind::NodeClassification { .. } => {
            let mut tape = Tape::new();
            let z = tape.constant(outputs.clone());
            let l = tape.softmax_cross_entropy(z, rows, &task.labels_for(rows))?;
            tape.value(l).item()
        }
        TaskKind::GraphRegression { targets } => {
            Ok(rows.iter().map(|&g| (outputs.get(g, 0) - targets[g]).powi(2)).sum::<f64>() / rows.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::graph::{normalized_shift, SparseMatrix};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn path_shift(n: usize) -> ShiftOperator {
        let mut t = Vec::new();
        for i in 0..n - 1 {
            t.push((i, i + 1, 1.0));
            t.push((i + 1, i, 1.0));
        }
        normalized_shift(&SparseMatrix::from_triplets(n, n, t).unwrap(), true).unwrap()
    }

    fn node_task(n: usize, classes: usize) -> TaskSpec {
        let labels = (0..n).map(|i| Some(i % classes)).collect();
        TaskSpec::new(
            TaskKind::NodeClassification { labels, num_classes: classes },
            (0..n - 2).collect(),
            vec![n - 2],
            vec![n - 1],
        )
        .unwrap()
    }

    fn dense_forward(params: &ModelParams, lambda: f64, s: &Tensor, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let k = params.layers.len();
        for (i, l) in params.layers.iter().enumerate() {
            let mut w = l.theta1.clone();
            for (a, b) in w.data_mut().iter_mut().zip(l.theta2.data()) {
                *a += lambda * b;
            }
            let mut out = vec![0.0; s.rows() * w.cols()];
            for r in 0..s.rows() {
                for c in 0..w.cols() {
                    let mut acc = 0.0;
                    for m in 0..s.cols() {
                        for j in 0..h.cols() {
                            acc += s.get(r, m) * h.get(m, j) * w.get(j, c);
                        }
                    }
                    out[r * w.cols() + c] = if i + 1 < k { acc.max(0.0) } else { acc };
                }
            }
            h = Tensor::from_vec(s.rows(), w.cols(), out).unwrap();
        }
        h
    }

    #[test]
    fn single_identity_layer_copies_features() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap();
        let params = ModelParams {
            layers: vec![LayerWeights {
                theta1: Tensor::identity(2),
                theta2: Tensor::zeros(2, 2),
            }],
            head: None,
        };
        let shifts = [ShiftOperator::from_matrix(SparseMatrix::identity(2))];
        let feats = [x.clone()];
        let z = forward(&params, 0.3, &GraphBatch::new(&shifts, &feats)).unwrap();
        assert_eq!(z[0], x);
    }

    #[test]
    fn two_layer_path_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let task = node_task(6, 3);
        let cfg = ModelConfig { hidden: 5, ..Default::default() };
        let params = ModelParams::init(&cfg, 4, &task, 1.0, &mut rng);
        let x = Tensor::uniform(6, 4, -1.0, 1.0, &mut rng);
        let s = path_shift(6);
        let shifts = [s.clone()];
        let feats = [x.clone()];
        let z = forward(&params, 0.5, &GraphBatch::new(&shifts, &feats)).unwrap();
        let expected = dense_forward(&params, 0.5, &s.to_dense(), &x);
        for (a, b) in z[0].data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn theta2_zero_is_lambda_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let task = node_task(6, 2);
        let mut params = ModelParams::init(&ModelConfig::default(), 3, &task, 1.0, &mut rng);
        for l in &mut params.layers {
            l.theta2 = Tensor::zeros(l.theta2.rows(), l.theta2.cols());
        }
        let shifts = [path_shift(6)];
        let feats = [Tensor::uniform(6, 3, -1.0, 1.0, &mut rng)];
        let b = GraphBatch::new(&shifts, &feats);
        let l0 = loss(&params, 0.0, &b, &task, Split::Train).unwrap();
        for lambda in [0.25, 0.7, 1.0] {
            assert_eq!(loss(&params, lambda, &b, &task, Split::Train).unwrap(), l0);
        }
    }

    #[test]
    fn readout_examples() {
        let z = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(readout(&z).unwrap().data(), &[2.0]);
        assert_eq!(readout(&Tensor::filled(4, 3, 1.5)).unwrap(), Tensor::filled(1, 3, 1.5));
        assert!(readout(&Tensor::zeros(0, 2)).is_err());
    }

    #[test]
    fn loss_examples() {
        let task = node_task(4, 2);
        let onehot = Tensor::from_rows(&[vec![1000.0, 0.0], vec![0.0, 1000.0], vec![1000.0, 0.0], vec![0.0, 1000.0]]).unwrap();
        assert!(output_loss(&onehot, &task, Split::Train).unwrap() < 1e-6);
        let flat = Tensor::zeros(4, 2);
        assert!((output_loss(&flat, &task, Split::Train).unwrap() - 2f64.ln()).abs() < 1e-12);
        let reg = TaskSpec::new(TaskKind::GraphRegression { targets: vec![1.0, 2.0] }, vec![0, 1], vec![], vec![]).unwrap();
        let preds = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(output_loss(&preds, &reg, Split::Train).unwrap(), 0.0);
    }

    #[test]
    fn invalid_tasks() {
        let kind = TaskKind::NodeClassification { labels: vec![Some(0), Some(1), None], num_classes: 2 };
        assert!(TaskSpec::new(kind.clone(), vec![], vec![], vec![]).is_err());
        assert!(TaskSpec::new(kind.clone(), vec![0], vec![0], vec![]).is_err());
        assert!(TaskSpec::new(kind.clone(), vec![2], vec![], vec![]).is_err());
        assert!(TaskSpec::new(kind, vec![0, 1], vec![], vec![]).is_ok());
    }

    fn regression_fixture(rng: &mut ChaCha8Rng) -> (Vec<ShiftOperator>, Vec<Tensor>, TaskSpec) {
        let shifts = vec![path_shift(3), path_shift(5), ShiftOperator::from_matrix(SparseMatrix::identity(1))];
        let feats = shifts.iter().map(|s| Tensor::uniform(s.num_nodes(), 2, -1.0, 1.0, rng)).collect();
        let task = TaskSpec::new(TaskKind::GraphRegression { targets: vec![0.5, -1.0, 2.0] }, vec![0, 1, 2], vec![], vec![]).unwrap();
        (shifts, feats, task)
    }

    #[test]
    fn regression_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (shifts, feats, task) = regression_fixture(&mut rng);
        let cfg = ModelConfig { hidden: 4, ..Default::default() };
        let params = ModelParams::init(&cfg, 2, &task, 1.0, &mut rng);
        let batch = GraphBatch::new(&shifts, &feats);
        let values: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let err = finite_diff_check(
            |vals| {
                let p = params.with_tensors(vals)?;
                let (l, g) = loss_and_grad(&p, 0.4, &batch, &task, &cfg, None)?;
                Ok((l, g.tensors().into_iter().cloned().collect()))
            },
            &values,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn weight_decay_adds_scaled_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let task = node_task(6, 2);
        let cfg = ModelConfig { hidden: 3, ..Default::default() };
        let params = ModelParams::init(&cfg, 2, &task, 1.0, &mut rng);
        let shifts = [path_shift(6)];
        let feats = [Tensor::uniform(6, 2, -1.0, 1.0, &mut rng)];
        let b = GraphBatch::new(&shifts, &feats);
        let (_, g0) = loss_and_grad(&params, 0.2, &b, &task, &cfg, None).unwrap();
        let decayed = ModelConfig { weight_decay: 0.1, ..cfg };
        let (_, g1) = loss_and_grad(&params, 0.2, &b, &task, &decayed, None).unwrap();
        let mut expected = g0;
        expected.axpy(0.1, &params).unwrap();
        assert_eq!(expected, g1);
    }

    #[test]
    fn expectation_of_constant_is_single_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let task = node_task(6, 2);
        let mut params = ModelParams::init(&ModelConfig::default(), 3, &task, 1.0, &mut rng);
        for l in &mut params.layers {
            l.theta2 = Tensor::zeros(l.theta2.rows(), l.theta2.cols());
        }
        let shifts = [path_shift(6)];
        let feats = [Tensor::uniform(6, 3, -1.0, 1.0, &mut rng)];
        let b = GraphBatch::new(&shifts, &feats);
        let single = forward(&params, 0.0, &b).unwrap();
        let mixed = expected_embeddings(&params, [(0.0, 0.5, b), (1.0, 0.5, b)]).unwrap();
        for (a, e) in mixed[0].data().iter().zip(single[0].data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn classification_gradient_matches_finite_differences(seed in any::<u64>(), lambda in 0.0f64..1.0, n in 3usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Vec::new();
            for i in 0..n { for j in (i + 1)..n { if rng.gen_bool(0.4) { t.push((i, j, 1.0)); t.push((j, i, 1.0)); } } }
            let shifts = [normalized_shift(&SparseMatrix::from_triplets(n, n, t).unwrap(), true).unwrap()];
            let feats = [Tensor::uniform(n, 3, -1.0, 1.0, &mut rng)];
            let labels = (0..n).map(|_| Some(rng.gen_range(0..3))).collect();
            let task = TaskSpec::new(TaskKind::NodeClassification { labels, num_classes: 3 }, (0..n).collect(), vec![], vec![]).unwrap();
            let cfg = ModelConfig { hidden: 4, ..Default::default() };
            let params = ModelParams::init(&cfg, 3, &task, 1.0, &mut rng);
            let batch = GraphBatch::new(&shifts, &feats);
            let values: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
            let err = finite_diff_check(|vals| {
                let p = params.with_tensors(vals)?;
                let (l, g) = loss_and_grad(&p, lambda, &batch, &task, &cfg, None)?;
                Ok((l, g.tensors().into_iter().cloned().collect()))
            }, &values, 1e-5).unwrap();
            prop_assert!(err < 1e-5, "{}", err);
        }

        #[test]
        fn permutation_equivariance(seed in any::<u64>(), n in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut edges = Vec::new();
            for i in 0..n { for j in (i + 1)..n { if rng.gen_bool(0.5) { edges.push((i, j)); } } }
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() { perm.swap(i, rng.gen_range(0..=i)); }
            let build = |map: &dyn Fn(usize) -> usize| {
                let t = edges.iter().flat_map(|&(i, j)| [(map(i), map(j), 1.0), (map(j), map(i), 1.0)]).collect();
                normalized_shift(&SparseMatrix::from_triplets(n, n, t).unwrap(), true).unwrap()
            };
            let x = Tensor::uniform(n, 3, -1.0, 1.0, &mut rng);
            let mut px = Tensor::zeros(n, 3);
            for i in 0..n { px.row_mut(perm[i]).copy_from_slice(x.row(i)); }
            let task = TaskSpec::new(TaskKind::GraphRegression { targets: vec![0.0] }, vec![0], vec![], vec![]).unwrap();
            let params = ModelParams::init(&ModelConfig { hidden: 4, ..Default::default() }, 3, &task, 1.0, &mut rng);
            let s = [build(&|i| i)];
            let ps = [build(&|i| perm[i])];
            let fx = [x];
            let fpx = [px];
            let z = forward(&params, 0.6, &GraphBatch::new(&s, &fx)).unwrap().remove(0);
            let pz = forward(&params, 0.6, &GraphBatch::new(&ps, &fpx)).unwrap().remove(0);
            for i in 0..n {
                for (a, b) in z.row(i).iter().zip(pz.row(perm[i])) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
            let r1 = readout(&z).unwrap();
            let r2 = readout(&pz).unwrap();
            for (a, b) in r1.data().iter().zip(r2.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
