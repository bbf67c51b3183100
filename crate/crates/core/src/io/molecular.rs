//! Molecules as coordinate blocks.
//!
//! The coordinates file is a sequence of blocks, each an atom count `N`
//! followed by `N` lines `element x y z`. Atom features are a one-hot
//! encoding of the element over the sorted set of elements in the file.
//! The targets file holds one float per molecule.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::factory::CoordinateSet;
use crate::io::{content_lines, default_split, write_file};
use crate::model::{TaskKind, TaskSpec};
use crate::tensor::Tensor;

/// One molecule before featurisation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMolecule {
    pub elements: Vec<String>,
    pub positions: Vec<[f64; 3]>,
}

fn parse_f64(path: &Path, line: usize, token: &str) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| Error::parse(path.display(), line, format!("cannot parse number from {token:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(path.display(), line, "non-finite value"));
    }
    Ok(v)
}

pub fn read_coordinates(path: &Path) -> Result<Vec<RawMolecule>> {
    let lines = content_lines(path)?;
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let (line, ref text) = lines[i];
        let n: usize = text.parse().map_err(|_| {
            Error::parse(path.display(), line, format!("molecule {}: expected atom count, found {text:?}", out.len()))
        })?;
        if n == 0 {
            return Err(Error::parse(path.display(), line, format!("molecule {} has no atoms", out.len())));
        }
        if i + n >= lines.len() {
            return Err(Error::parse(
                path.display(),
                line,
                format!("molecule {}: expected {n} atoms, file ends early", out.len()),
            ));
        }
        let mut mol = RawMolecule {
            elements: Vec::with_capacity(n),
            positions: Vec::with_capacity(n),
        };
        for (line, text) in &lines[i + 1..=i + n] {
            let f: Vec<&str> = text.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::parse(
                    path.display(),
                    *line,
                    format!("molecule {}: expected `element x y z`", out.len()),
                ));
            }
            mol.elements.push(f[0].to_string());
            mol.positions.push([
                parse_f64(path, *line, f[1])?,
                parse_f64(path, *line, f[2])?,
                parse_f64(path, *line, f[3])?,
            ]);
        }
        out.push(mol);
        i += n + 1;
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no molecules", path.display())));
    }
    Ok(out)
}

pub fn read_targets(path: &Path) -> Result<Vec<f64>> {
    content_lines(path)?
        .into_iter()
        .map(|(line, text)| parse_f64(path, line, &text))
        .collect()
}

/// One-hot element features over the sorted element vocabulary.
pub fn featurize(molecules: &[RawMolecule]) -> Result<(Vec<CoordinateSet>, Vec<String>)> {
    let vocab: Vec<String> = molecules
        .iter()
        .flat_map(|m| m.elements.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let sets = molecules
        .iter()
        .map(|m| {
            let mut feats = Tensor::zeros(m.elements.len(), vocab.len());
            for (a, e) in m.elements.iter().enumerate() {
                let k = vocab.binary_search(e).expect("element is in the vocabulary");
                feats.set(a, k, 1.0);
            }
            CoordinateSet::new(m.positions.clone(), feats)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((sets, vocab))
}

/// Loads molecules and a graph-regression task split 60/20/20 by `split_seed`.
pub fn load_molecular(coords: &Path, targets: &Path, split_seed: u64) -> Result<(Vec<CoordinateSet>, TaskSpec)> {
    let raw = read_coordinates(coords)?;
    let y = read_targets(targets)?;
    if y.len() != raw.len() {
        return Err(Error::Data(format!(
            "{}: {} targets for {} molecules",
            targets.display(),
            y.len(),
            raw.len()
        )));
    }
    let (sets, _) = featurize(&raw)?;
    let items: Vec<usize> = (0..sets.len()).collect();
    let (train, val, test) = default_split(&items, split_seed);
    let task = TaskSpec::new(TaskKind::GraphRegression { targets: y }, train, val, test)?;
    Ok((sets, task))
}

pub fn coordinate_text(molecules: &[RawMolecule]) -> String {
    let mut out = String::new();
    for m in molecules {
        out.push_str(&format!("{}\n", m.elements.len()));
        for (e, p) in m.elements.iter().zip(&m.positions) {
            out.push_str(&format!("{e} {:?} {:?} {:?}\n", p[0], p[1], p[2]));
        }
    }
    out
}

pub fn write_molecular(dir: &Path, molecules: &[RawMolecule], targets: &[f64]) -> Result<()> {
    write_file(&dir.join("coords.txt"), &coordinate_text(molecules))?;
    let t: String = targets.iter().map(|v| format!("{v:?}\n")).collect();
    write_file(&dir.join("targets.txt"), &t)
}
