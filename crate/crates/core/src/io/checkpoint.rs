//! JSON checkpoints of the training state.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::em::{TrainState, TrainStateRecord};
use crate::error::{Error, Result};
use crate::io::write_file;
use crate::param_space::{GridSpec, ParamGrid};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub grid: GridSpec,
    pub state: TrainStateRecord,
}

impl Checkpoint {
    pub fn new(state: &TrainState, grid: &ParamGrid) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            grid: grid.spec().clone(),
            state: state.to_record(),
        }
    }

    /// Rebuilds the state on `grid`, which must match the saved grid.
    pub fn restore(self, grid: &Arc<ParamGrid>) -> Result<TrainState> {
        if &self.grid != grid.spec() {
            return Err(Error::Config(format!(
                "checkpoint grid {:?} differs from configured grid {:?}",
                self.grid,
                grid.spec()
            )));
        }
        TrainState::from_record(self.state, grid)
    }
}

pub fn save(path: &Path, state: &TrainState, grid: &ParamGrid) -> Result<()> {
    write_file(path, &serde_json::to_string(&Checkpoint::new(state, grid))?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if checkpoint.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            checkpoint.format_version
        )));
    }
    Ok(checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{TrainConfig, Trainer};
    use crate::factory::GraphFamily;
    use crate::io::synthetic::{gen_synthetic, SyntheticSpec};
    use crate::factory::GraphSource;
    use crate::gibbs::ChainConfig;
    use crate::par::Execution;
    use crate::param_space::make_grid;

    #[test]
    fn save_load_restores_identical_state() {
        let spec = SyntheticSpec {
            num_nodes: 30,
            lambda_star: 0.5,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec, 1).unwrap();
        let grid = Arc::new(make_grid(0.0, 1.0, 0.25).unwrap());
        let family = GraphFamily::build(&GraphSource::Hetero(data.graph), Arc::clone(&grid), Execution::Sequential).unwrap();
        let config = TrainConfig {
            iterations: 2,
            t_prime: 3,
            pretrain_epochs: 2,
            chain: ChainConfig {
                n_iterations: 300,
                burn_in: 50,
                ..ChainConfig::default()
            },
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(&config, &family, &data.task).unwrap();
        let state = trainer.train().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save(&path, &state, &grid).unwrap();
        let restored = load(&path).unwrap().restore(&grid).unwrap();
        assert_eq!(restored, state);
        let other = Arc::new(make_grid(0.0, 1.0, 0.5).unwrap());
        assert!(load(&path).unwrap().restore(&other).is_err());
    }
}
