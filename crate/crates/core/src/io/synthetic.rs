//! Two-edge-type graphs with labels planted by a frozen teacher GCN.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factory::mix_adjacency;
use crate::graph::{normalized_shift, Graph};
use crate::io::{default_split, hetero, write_file};
use crate::model::{forward, GraphBatch, ModelConfig, ModelParams, TaskKind, TaskSpec};
use crate::tensor::Tensor;

const MAX_ATTEMPTS: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Planted mixing weight of edge type 0.
    pub lambda_star: f64,
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Probability of replacing a label by a uniformly drawn class.
    pub label_noise: f64,
    /// Expected degree of the Erdős–Rényi generator of edge type 0.
    pub degree_type0: f64,
    /// Expected degree of the Erdős–Rényi generator of edge type 1.
    pub degree_type1: f64,
    pub teacher_hidden: usize,
    pub teacher_layers: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            lambda_star: 0.7,
            num_nodes: 300,
            num_classes: 3,
            feature_dim: 16,
            label_noise: 0.0,
            degree_type0: 3.0,
            degree_type1: 9.0,
            teacher_hidden: 16,
            teacher_layers: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_star) {
            return Err(Error::Config(format!("lambda_star = {} is outside [0, 1]", self.lambda_star)));
        }
        if self.num_nodes < 10 {
            return Err(Error::Config("a synthetic graph needs at least 10 nodes".into()));
        }
        if self.num_classes < 2 || self.feature_dim == 0 || self.teacher_hidden == 0 || self.teacher_layers == 0 {
            return Err(Error::Config("classes ≥ 2 and positive dimensions required".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!("label_noise = {} is outside [0, 1]", self.label_noise)));
        }
        let max_degree = (self.num_nodes - 1) as f64;
        for d in [self.degree_type0, self.degree_type1] {
            if !(0.0..=max_degree).contains(&d) {
                return Err(Error::Config(format!("expected degree {d} is outside [0, {max_degree}]")));
            }
        }
        Ok(())
    }

    pub fn teacher_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.teacher_hidden,
            layers: self.teacher_layers,
            ..ModelConfig::default()
        }
    }
}

/// Ground truth recorded next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub lambda_star: f64,
    /// Seed that produced the dataset after skipping degenerate draws.
    pub seed: u64,
    pub spec: SyntheticSpec,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub graph: Graph,
    pub task: TaskSpec,
    pub teacher: ModelParams,
    pub meta: SyntheticMeta,
}

fn erdos_renyi(n: usize, degree: f64, ty: u32, rng: &mut ChaCha8Rng, out: &mut Vec<(usize, usize, u32, f64)>) {
    let p = degree / (n - 1) as f64;
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.gen::<f64>() < p {
                out.push((u, v, ty, 1.0));
            }
        }
    }
}

/// Teacher class per node: argmax of its logits on `A_λ`.
pub fn teacher_labels(teacher: &ModelParams, graph: &Graph, lambda: f64) -> Result<Vec<usize>> {
    let layers: Vec<_> = graph.edge_layers().iter().map(|l| l.adjacency.clone()).collect();
    let mixed = mix_adjacency(&[lambda, 1.0 - lambda], &layers)?;
    let shifts = [normalized_shift(&mixed, true)?];
    let features = [graph.node_features().clone()];
    Ok(forward(teacher, lambda, &GraphBatch::new(&shifts, &features))?.remove(0).argmax_rows())
}

fn attempt(spec: &SyntheticSpec, seed: u64) -> Result<Option<SyntheticData>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.num_nodes;
    let mut edges = Vec::new();
    erdos_renyi(n, spec.degree_type0, 0, &mut rng, &mut edges);
    erdos_renyi(n, spec.degree_type1, 1, &mut rng, &mut edges);
    let features = Tensor::uniform(n, spec.feature_dim, -3f64.sqrt(), 3f64.sqrt(), &mut rng);
    let graph = Graph::from_typed_edges(n, &[0, 1], &edges, features)?;

    let shape = TaskSpec::new(
        TaskKind::NodeClassification {
            labels: vec![Some(0); n],
            num_classes: spec.num_classes,
        },
        vec![0],
        vec![],
        vec![],
    )?;
    let mut teacher = ModelParams::init(&spec.teacher_config(), spec.feature_dim, &shape, 1.0, &mut rng);
    for layer in &mut teacher.layers {
        layer.theta2 = Tensor::zeros(layer.theta2.rows(), layer.theta2.cols());
    }
    let mut labels = teacher_labels(&teacher, &graph, spec.lambda_star)?;
    for label in &mut labels {
        if rng.gen::<f64>() < spec.label_noise {
            *label = rng.gen_range(0..spec.num_classes);
        }
    }
    let mut counts = vec![0usize; spec.num_classes];
    for &l in &labels {
        counts[l] += 1;
    }
    if counts.contains(&0) {
        return Ok(None);
    }
    let nodes: Vec<usize> = (0..n).collect();
    let (train, val, test) = default_split(&nodes, seed);
    let task = TaskSpec::new(
        TaskKind::NodeClassification {
            labels: labels.into_iter().map(Some).collect(),
            num_classes: spec.num_classes,
        },
        train,
        val,
        test,
    )?;
    Ok(Some(SyntheticData {
        graph,
        task,
        teacher,
        meta: SyntheticMeta {
            lambda_star: spec.lambda_star,
            seed,
            spec: spec.clone(),
        },
    }))
}

/// Generates a dataset from `seed`, moving on to the next seed whenever a
/// class comes out empty.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    for k in 0..MAX_ATTEMPTS {
        if let Some(data) = attempt(spec, seed.wrapping_add(k))? {
            return Ok(data);
        }
    }
    Err(Error::Data(format!("every class non-empty in none of {MAX_ATTEMPTS} draws from seed {seed}")))
}

/// Writes the dataset in the heterogeneous text format plus `meta.json`.
pub fn write_synthetic(dir: &Path, data: &SyntheticData) -> Result<()> {
    hetero::write_hetero(dir, &data.graph, &data.task)?;
    write_file(&dir.join("meta.json"), &(serde_json::to_string_pretty(&data.meta)? + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{loss, Split};

    fn small(lambda_star: f64) -> SyntheticSpec {
        SyntheticSpec {
            lambda_star,
            num_nodes: 60,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_and_balanced_enough() {
        let a = gen_synthetic(&small(0.7), 5).unwrap();
        let b = gen_synthetic(&small(0.7), 5).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.task, b.task);
        let TaskKind::NodeClassification { labels, .. } = &a.task.kind else { unreachable!() };
        for c in 0..3 {
            assert!(labels.contains(&Some(c)));
        }
        let nnz: Vec<usize> = a.graph.edge_layers().iter().map(|l| l.adjacency.nnz()).collect();
        assert!(nnz[1] > 2 * nnz[0], "{nnz:?}");
    }

    #[test]
    fn lambda_one_ignores_type_one_edges() {
        let data = gen_synthetic(&small(1.0), 2).unwrap();
        let mut rewired = data.graph.clone();
        let n = rewired.num_nodes();
        let mut edges: Vec<_> = rewired.undirected_edges().into_iter().filter(|e| e.2 == 0).collect();
        edges.push((0, n - 1, 1, 1.0));
        edges.push((1, 2, 1, 1.0));
        rewired = Graph::from_typed_edges(n, &[0, 1], &edges, rewired.node_features().clone()).unwrap();
        assert_eq!(
            teacher_labels(&data.teacher, &data.graph, 1.0).unwrap(),
            teacher_labels(&data.teacher, &rewired, 1.0).unwrap()
        );
    }

    #[test]
    fn scaled_teacher_reaches_zero_training_error() {
        let data = gen_synthetic(&small(0.7), 9).unwrap();
        let layers: Vec<_> = data.graph.edge_layers().iter().map(|l| l.adjacency.clone()).collect();
        let shift = [normalized_shift(&mix_adjacency(&[0.7, 0.3], &layers).unwrap(), true).unwrap()];
        let features = [data.graph.node_features().clone()];
        let batch = GraphBatch::new(&shift, &features);
        let mut sharp = data.teacher.clone();
        let last = sharp.layers.last_mut().unwrap();
        last.theta1 = last.theta1.scale(1e4);
        let logits = forward(&sharp, 0.7, &batch).unwrap().remove(0);
        let TaskKind::NodeClassification { labels, .. } = &data.task.kind else { unreachable!() };
        let pred = logits.argmax_rows();
        assert!(data.task.train.iter().all(|&i| labels[i] == Some(pred[i])));
        assert!(loss(&sharp, 0.7, &batch, &data.task, Split::Train).unwrap() < 1e-3);
    }

    #[test]
    fn rejects_invalid_spec() {
        assert!(gen_synthetic(&SyntheticSpec { num_nodes: 5, ..small(0.5) }, 0).is_err());
        assert!(gen_synthetic(&small(1.5), 0).is_err());
    }
}
