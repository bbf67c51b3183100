//! TOML run configuration.
//!
//! ```toml
//! output = "runs/demo"
//!
//! [dataset]
//! kind = "synthetic"
//! seed = 0
//!
//! [grid]
//! kind = "range"
//! lo = 0.0
//! hi = 1.0
//! step = 0.05
//!
//! [train]
//! T = 15
//! T_prime = 20
//! variant = "PT"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::em::TrainConfig;
use crate::error::{Error, Result};
use crate::factory::{EdgeWeighting, GraphFamily, GraphSource};
use crate::io::hetero::{load_hetero, HeteroFiles};
use crate::io::molecular::load_molecular;
use crate::io::synthetic::{gen_synthetic, SyntheticMeta, SyntheticSpec};
use crate::model::TaskSpec;
use crate::param_space::{GridSpec, ParamGrid};

fn default_cutoff() -> f64 {
    1.6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    HeteroEdgelist {
        edges: PathBuf,
        features: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        splits: Option<PathBuf>,
        /// Edge types in layer order; defaults to the sorted types present.
        #[serde(default)]
        edge_types: Option<Vec<u32>>,
        #[serde(default)]
        split_seed: u64,
    },
    MolecularCoords {
        coords: PathBuf,
        targets: PathBuf,
        /// Threshold in ångström of the observed graph used for pretraining.
        #[serde(default = "default_cutoff")]
        observed_cutoff: f64,
        #[serde(default)]
        weighting: EdgeWeighting,
        #[serde(default)]
        split_seed: u64,
    },
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        spec: SyntheticSpec,
    },
}

impl DatasetConfig {
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            DatasetConfig::HeteroEdgelist {
                edges,
                features,
                labels,
                splits,
                ..
            } => {
                let mut out = vec![edges, features, labels];
                out.extend(splits.as_mut());
                out
            }
            DatasetConfig::MolecularCoords { coords, targets, .. } => vec![coords, targets],
            DatasetConfig::Synthetic { .. } => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub grid: GridSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

/// A loaded dataset ready for [`GraphFamily::build`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub source: GraphSource,
    pub task: TaskSpec,
    pub synthetic: Option<SyntheticMeta>,
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in config.dataset.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = config.output.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid.build()?;
        self.train.validate()?;
        let mut dataset = self.dataset.clone();
        for p in dataset.paths_mut() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        match &self.dataset {
            DatasetConfig::Synthetic { spec, .. } => {
                spec.validate()?;
                if grid.dim() != 1 || grid.index_of(spec.lambda_star).is_none() {
                    return Err(Error::Config(format!("lambda_star = {} is not on the grid", spec.lambda_star)));
                }
            }
            DatasetConfig::MolecularCoords { observed_cutoff, .. } => {
                if !(*observed_cutoff >= 0.0) {
                    return Err(Error::Config(format!("observed_cutoff = {observed_cutoff} is negative")));
                }
            }
            DatasetConfig::HeteroEdgelist { .. } => {}
        }
        Ok(())
    }

    /// The configuration with absolute paths, as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn build_grid(&self) -> Result<Arc<ParamGrid>> {
        Ok(Arc::new(self.grid.build()?))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetConfig::HeteroEdgelist {
                edges,
                features,
                labels,
                splits,
                edge_types,
                split_seed,
            } => {
                let files = HeteroFiles {
                    edges,
                    features,
                    labels,
                    splits: splits.as_deref(),
                };
                let (graph, task) = load_hetero(files, edge_types.as_deref(), *split_seed)?;
                Ok(Dataset {
                    source: GraphSource::Hetero(graph),
                    task,
                    synthetic: None,
                })
            }
            DatasetConfig::MolecularCoords {
                coords,
                targets,
                observed_cutoff,
                weighting,
                split_seed,
            } => {
                let (molecules, task) = load_molecular(coords, targets, *split_seed)?;
                Ok(Dataset {
                    source: GraphSource::Molecular {
                        molecules,
                        observed_cutoff: *observed_cutoff,
                        weighting: *weighting,
                    },
                    task,
                    synthetic: None,
                })
            }
            DatasetConfig::Synthetic { seed, spec } => {
                let data = gen_synthetic(spec, *seed)?;
                Ok(Dataset {
                    source: GraphSource::Hetero(data.graph),
                    task: data.task,
                    synthetic: Some(data.meta),
                })
            }
        }
    }

    /// Loads the dataset and precomputes its graph family.
    pub fn build_family(&self) -> Result<(GraphFamily, Dataset)> {
        let dataset = self.load_dataset()?;
        let family = GraphFamily::build(&dataset.source, self.build_grid()?, self.train.execution)?;
        Ok((family, dataset))
    }
}
