//! Dataset loaders, synthetic data, run configuration and persistence.

pub mod checkpoint;
pub mod config;
pub mod hetero;
pub mod molecular;
pub mod synthetic;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::em::IterationRecord;
use crate::error::{Error, Result};

/// Non-empty, non-comment lines with their 1-based line numbers.
pub(crate) fn content_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

/// Seeded shuffle of `items` cut 60/20/20 into train/val/test.
pub fn default_split(items: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_train = (n * 3 / 5).max(1.min(n));
    let n_val = n / 5;
    let test = shuffled.split_off((n_train + n_val).min(n));
    let val = shuffled.split_off(n_train.min(shuffled.len()));
    (shuffled, val, test)
}

/// `iteration,train_loss,val_metric,test_metric`, 10 decimals.
pub fn metrics_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,train_loss,val_metric,test_metric\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.10},{:.10},{:.10}\n",
            r.iteration,
            r.train_loss,
            r.val.primary(),
            r.test.primary()
        ));
    }
    out
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}
