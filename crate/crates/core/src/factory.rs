//! Generators of the λ-dependent graph family.
//!
//! Heterogeneous graphs are re-weighted by convex mixing of their per-type
//! adjacencies; molecules are connected by thresholding interatomic distances.
//! Every grid point's shift operators are built once up front, since the
//! generator is deterministic in `(λ, G)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalized_shift, EdgeLayer, Graph, ShiftOperator, SparseMatrix};
use crate::model::GraphBatch;
use crate::par::Execution;
use crate::param_space::ParamGrid;
use crate::tensor::Tensor;

/// Atom positions in ångström with per-atom features.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateSet {
    positions: Vec<[f64; 3]>,
    atom_features: Tensor,
}

impl CoordinateSet {
    pub fn new(positions: Vec<[f64; 3]>, atom_features: Tensor) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Data("a coordinate set needs at least one atom".into()));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("atom coordinate".into()));
        }
        if atom_features.rows() != positions.len() {
            return Err(Error::Data(format!(
                "{} feature rows for {} atoms",
                atom_features.rows(),
                positions.len()
            )));
        }
        Ok(Self {
            positions,
            atom_features,
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn atom_features(&self) -> &Tensor {
        &self.atom_features
    }
}

/// Edge weights assigned by [`threshold_graph`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeWeighting {
    #[default]
    Unit,
    InverseDistance,
}

/// `A_λ = Σ λᵢ Aᵢ` for a point `λ` of the probability simplex.
///
/// Layers with `λᵢ = 0` contribute no edges.
pub fn mix_adjacency(lambda: &[f64], layers: &[SparseMatrix]) -> Result<SparseMatrix> {
    if lambda.len() != layers.len() {
        return Err(Error::InvalidGraph(format!(
            "{} mixing weights for {} edge layers",
            lambda.len(),
            layers.len()
        )));
    }
    if lambda.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::InvalidGraph(format!("mixing weights must be non-negative: {lambda:?}")));
    }
    let total: f64 = lambda.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidGraph(format!("mixing weights sum to {total}, not 1")));
    }
    let terms: Vec<(f64, &SparseMatrix)> = lambda.iter().copied().zip(layers).collect();
    SparseMatrix::linear_combination(&terms)
}

/// Symmetric Euclidean distance matrix with zero diagonal.
pub fn pairwise_distances(coords: &CoordinateSet) -> Tensor {
    let n = coords.num_atoms();
    let mut d = Tensor::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (coords.positions[i], coords.positions[j]);
            let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            d.set(i, j, dist);
            d.set(j, i, dist);
        }
    }
    d
}

/// Connects atoms `i ≠ j` with `d(i, j) ≤ λ`.
pub fn threshold_graph(coords: &CoordinateSet, lambda: f64, weighting: EdgeWeighting) -> Result<Graph> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidGraph(format!("threshold must be non-negative, got {lambda}")));
    }
    let n = coords.num_atoms();
    let d = pairwise_distances(coords);
    let mut trips = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let dist = d.get(i, j);
            if i != j && dist <= lambda {
                let w = match weighting {
                    EdgeWeighting::Unit => 1.0,
                    EdgeWeighting::InverseDistance => 1.0 / dist.max(1e-6),
                };
                trips.push((i, j, w));
            }
        }
    }
    let layer = EdgeLayer {
        edge_type: 0,
        adjacency: SparseMatrix::from_triplets(n, n, trips)?,
    };
    Graph::new(n, vec![layer], coords.atom_features.clone())
}

/// Observed data from which the graph family is generated.
#[derive(Clone, Debug)]
pub enum GraphSource {
    /// One graph with several edge types; λ mixes the types.
    Hetero(Graph),
    /// Many molecules; λ is the distance threshold in ångström.
    Molecular {
        molecules: Vec<CoordinateSet>,
        /// Threshold defining the observed graph used for pretraining.
        observed_cutoff: f64,
        weighting: EdgeWeighting,
    },
}

impl GraphSource {
    pub fn num_instances(&self) -> usize {
        match self {
            GraphSource::Hetero(_) => 1,
            GraphSource::Molecular { molecules, .. } => molecules.len(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            GraphSource::Hetero(g) => g.node_features().cols(),
            GraphSource::Molecular { molecules, .. } => molecules.first().map_or(0, |m| m.atom_features().cols()),
        }
    }

    fn features(&self) -> Vec<Tensor> {
        match self {
            GraphSource::Hetero(g) => vec![g.node_features().clone()],
            GraphSource::Molecular { molecules, .. } => {
                molecules.iter().map(|m| m.atom_features().clone()).collect()
            }
        }
    }

    /// `h(λ, G)`: the shift operators of every instance at grid point `point`.
    pub fn generate(&self, point: &[f64]) -> Result<Vec<ShiftOperator>> {
        match self {
            GraphSource::Hetero(g) => {
                let layers: Vec<SparseMatrix> = g.edge_layers().iter().map(|l| l.adjacency.clone()).collect();
                let weights = hetero_weights(point, layers.len())?;
                let mixed = mix_adjacency(&weights, &layers)?;
                Ok(vec![normalized_shift(&mixed, true)?])
            }
            GraphSource::Molecular {
                molecules,
                weighting,
                ..
            } => {
                if point.len() != 1 {
                    return Err(Error::Config("molecular thresholds need a scalar grid".into()));
                }
                molecules
                    .iter()
                    .map(|m| {
                        let g = threshold_graph(m, point[0], *weighting)?;
                        normalized_shift(&g.edge_layers()[0].adjacency, true)
                    })
                    .collect()
            }
        }
    }

    /// Shift operators of the observed graph with its native edge weights.
    pub fn observed(&self) -> Result<Vec<ShiftOperator>> {
        match self {
            GraphSource::Hetero(g) => Ok(vec![normalized_shift(&g.combined_adjacency()?, true)?]),
            GraphSource::Molecular { observed_cutoff, .. } => self.generate(&[*observed_cutoff]),
        }
    }
}

/// Scalar grids over two edge types mix as `(λ, 1 − λ)`; simplex grids give
/// the weights directly.
fn hetero_weights(point: &[f64], layers: usize) -> Result<Vec<f64>> {
    match (point.len(), layers) {
        (1, 2) => Ok(vec![point[0], 1.0 - point[0]]),
        (d, l) if d == l => Ok(point.to_vec()),
        (d, l) => Err(Error::Config(format!(
            "grid points have {d} coordinates but the graph has {l} edge types"
        ))),
    }
}

/// Precomputed shift operators for every grid point plus the observed graph.
#[derive(Clone, Debug)]
pub struct GraphFamily {
    grid: Arc<ParamGrid>,
    features: Vec<Tensor>,
    shifts: Vec<Vec<ShiftOperator>>,
    observed: Vec<ShiftOperator>,
}

impl GraphFamily {
    pub fn build(source: &GraphSource, grid: Arc<ParamGrid>, exec: Execution) -> Result<Self> {
        let shifts = exec
            .map_range(grid.len(), |i| source.generate(grid.point(i)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features: source.features(),
            observed: source.observed()?,
            shifts,
            grid,
        })
    }

    /// A family from explicit per-point shifts, mainly for fixtures.
    pub fn from_parts(
        grid: Arc<ParamGrid>,
        features: Vec<Tensor>,
        shifts: Vec<Vec<ShiftOperator>>,
        observed: Vec<ShiftOperator>,
    ) -> Result<Self> {
        if shifts.len() != grid.len() {
            return Err(Error::Config(format!(
                "{} shift sets for a grid of {}",
                shifts.len(),
                grid.len()
            )));
        }
        if shifts.iter().chain(std::iter::once(&observed)).any(|s| s.len() != features.len()) {
            return Err(Error::Config("every shift set needs one operator per instance".into()));
        }
        Ok(Self {
            grid,
            features,
            shifts,
            observed,
        })
    }

    pub fn grid(&self) -> &Arc<ParamGrid> {
        &self.grid
    }

    pub fn features(&self) -> &[Tensor] {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Tensor::cols)
    }

    pub fn shifts(&self, index: usize) -> &[ShiftOperator] {
        &self.shifts[index]
    }

    /// Instances at grid point `index`.
    pub fn batch(&self, index: usize) -> GraphBatch<'_> {
        GraphBatch::new(&self.shifts[index], &self.features)
    }

    pub fn observed_batch(&self) -> GraphBatch<'_> {
        GraphBatch::new(&self.observed, &self.features)
    }
}
