//! Discretised latent parameter space and probability mass functions on it.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a grid was constructed; enough to rebuild it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GridSpec {
    /// Scalars `lo, lo + step, …` up to `hi`.
    Range { lo: f64, hi: f64, step: f64 },
    /// Points of the probability simplex with `parts` coordinates, each a
    /// multiple of `step`, in lexicographic order.
    Simplex { parts: usize, step: f64 },
}

impl GridSpec {
    pub fn build(&self) -> Result<ParamGrid> {
        match *self {
            GridSpec::Range { lo, hi, step } => make_grid(lo, hi, step),
            GridSpec::Simplex { parts, step } => simplex_grid(parts, step),
        }
    }
}

/// Finite sample space. Every point has `dim` coordinates; scalar grids have
/// `dim == 1`. The scalar value used by λ-dependent layer weights is the first
/// coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrid {
    spec: GridSpec,
    dim: usize,
    coords: Vec<f64>,
}

const SNAP: f64 = 1e10;

fn snap(v: f64) -> f64 {
    let r = (v * SNAP).round() / SNAP;
    if (v - r).abs() < 1e-12 {
        r
    } else {
        v
    }
}

/// Scalar grid over `[lo, hi]` with spacing `step`.
///
/// `hi` is included when `(hi − lo)/step` is integral within `1e-9`.
pub fn make_grid(lo: f64, hi: f64, step: f64) -> Result<ParamGrid> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidGrid(format!("step must be positive, got {step}")));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidGrid(format!("need lo < hi, got [{lo}, {hi}]")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    let coords = (0..n).map(|i| snap(lo + i as f64 * step)).collect();
    Ok(ParamGrid {
        spec: GridSpec::Range { lo, hi, step },
        dim: 1,
        coords,
    })
}

/// Simplex grid `{λ : λᵢ = kᵢ·step, Σλᵢ = 1}` with `parts` coordinates.
pub fn simplex_grid(parts: usize, step: f64) -> Result<ParamGrid> {
    if parts == 0 {
        return Err(Error::InvalidGrid("simplex needs at least one part".into()));
    }
    if !(step > 0.0) || step > 1.0 {
        return Err(Error::InvalidGrid(format!("simplex step must be in (0, 1], got {step}")));
    }
    let m = (1.0 / step).round() as usize;
    if ((m as f64) * step - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidGrid(format!("1/step must be an integer, got step {step}")));
    }
    let mut coords = Vec::new();
    let mut current = vec![0usize; parts];
    enumerate_compositions(m, 0, &mut current, &mut |c| {
        coords.extend(c.iter().map(|&k| snap(k as f64 / m as f64)));
    });
    Ok(ParamGrid {
        spec: GridSpec::Simplex { parts, step },
        dim: parts,
        coords,
    })
}

fn enumerate_compositions(remaining: usize, pos: usize, current: &mut Vec<usize>, emit: &mut impl FnMut(&[usize])) {
    let parts = current.len();
    if pos == parts - 1 {
        current[pos] = remaining;
        emit(current);
        return;
    }
    for k in 0..=remaining {
        current[pos] = k;
        enumerate_compositions(remaining - k, pos + 1, current, emit);
    }
}

impl ParamGrid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// Scalar λ of point `i`.
    pub fn lambda(&self, i: usize) -> f64 {
        self.coords[i * self.dim]
    }

    pub fn lambdas(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.lambda(i)).collect()
    }

    /// Index of the point whose scalar λ is within `1e-9` of `value`.
    pub fn index_of(&self, value: f64) -> Option<usize> {
        (0..self.len()).find(|&i| (self.lambda(i) - value).abs() < 1e-9)
    }

    /// Index of the grid point with scalar λ nearest to `value`.
    pub fn nearest(&self, value: f64) -> usize {
        (0..self.len())
            .min_by(|&a, &b| {
                (self.lambda(a) - value)
                    .abs()
                    .total_cmp(&(self.lambda(b) - value).abs())
            })
            .unwrap_or(0)
    }

    /// Largest |λ| over the grid.
    pub fn max_abs_lambda(&self) -> f64 {
        (0..self.len()).map(|i| self.lambda(i).abs()).fold(0.0, f64::max)
    }

    /// Human-readable coordinates of point `i`, 10 decimals each.
    pub fn format_point(&self, i: usize) -> String {
        self.point(i)
            .iter()
            .map(|v| format!("{v:.10}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Probability mass function over a [`ParamGrid`].
///
/// The off-grid delta is a formal object whose mass is zero at every grid
/// point; it is only ever evaluated, never sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    grid: Arc<ParamGrid>,
    mass: Vec<f64>,
    zero_density: bool,
}

impl DiscreteDistribution {
    pub fn uniform(grid: Arc<ParamGrid>) -> Self {
        let n = grid.len();
        Self {
            mass: vec![1.0 / n as f64; n],
            grid,
            zero_density: false,
        }
    }

    /// Delta at a point outside the grid: zero mass on every grid point.
    pub fn delta_off_grid(grid: Arc<ParamGrid>) -> Self {
        Self {
            mass: vec![0.0; grid.len()],
            grid,
            zero_density: true,
        }
    }

    pub fn point_mass(grid: Arc<ParamGrid>, index: usize) -> Result<Self> {
        if index >= grid.len() {
            return Err(Error::InvalidDistribution(format!(
                "point index {index} outside a grid of {}",
                grid.len()
            )));
        }
        let mut mass = vec![0.0; grid.len()];
        mass[index] = 1.0;
        Ok(Self {
            grid,
            mass,
            zero_density: false,
        })
    }

    /// Normalised visit counts.
    pub fn empirical(grid: Arc<ParamGrid>, counts: &[u64]) -> Result<Self> {
        if counts.len() != grid.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} counts for a grid of {}",
                counts.len(),
                grid.len()
            )));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidDistribution("all counts are zero".into()));
        }
        let mass = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self {
            grid,
            mass,
            zero_density: false,
        })
    }

    /// Normalises non-negative weights.
    pub fn from_weights(grid: Arc<ParamGrid>, weights: &[f64]) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} weights for a grid of {}",
                weights.len(),
                grid.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidDistribution("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("all weights are zero".into()));
        }
        Ok(Self {
            grid,
            mass: weights.iter().map(|w| w / total).collect(),
            zero_density: false,
        })
    }

    /// Uses `mass` as is after checking it is a probability vector within `1e-10`.
    pub fn from_masses(grid: Arc<ParamGrid>, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} masses for a grid of {}",
                mass.len(),
                grid.len()
            )));
        }
        if mass.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::InvalidDistribution("negative or NaN mass".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidDistribution(format!("masses sum to {total}")));
        }
        Ok(Self {
            grid,
            mass,
            zero_density: false,
        })
    }

    pub fn grid(&self) -> &Arc<ParamGrid> {
        &self.grid
    }

    pub fn mass(&self, index: usize) -> f64 {
        self.mass[index]
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn is_zero_density(&self) -> bool {
        self.zero_density
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Grid indices with positive mass.
    pub fn support(&self) -> Vec<usize> {
        (0..self.mass.len()).filter(|&i| self.mass[i] > 0.0).collect()
    }

    /// Most probable grid index; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &m) in self.mass.iter().enumerate() {
            if m > self.mass[best] {
                best = i;
            }
        }
        best
    }

    /// Draws a grid index by inverse-CDF sampling.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        let total = self.total_mass();
        if self.zero_density || !(total > 0.0) {
            return Err(Error::ZeroDensity);
        }
        let u = rng.gen::<f64>() * total;
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (i, &m) in self.mass.iter().enumerate() {
            if m > 0.0 {
                cum += m;
                last_positive = i;
                if cum > u {
                    return Ok(i);
                }
            }
        }
        Ok(last_positive)
    }

    /// `Σ mass(λ)·f(λ)` over grid indices with positive mass.
    pub fn expectation<F>(&self, mut f: F) -> Result<Tensor>
    where
        F: FnMut(usize) -> Result<Tensor>,
    {
        if self.zero_density {
            return Err(Error::ZeroDensity);
        }
        let mut acc: Option<Tensor> = None;
        for i in self.support() {
            let v = f(i)?;
            match &mut acc {
                Some(a) => a.axpy(self.mass[i], &v)?,
                None => acc = Some(v.scale(self.mass[i])),
            }
        }
        acc.ok_or(Error::ZeroDensity)
    }

    /// Total-variation distance `½ Σ |p − q|`.
    pub fn tv_distance(&self, other: &DiscreteDistribution) -> Result<f64> {
        if self.grid != other.grid && *self.grid != *other.grid {
            return Err(Error::InvalidDistribution("distributions live on different grids".into()));
        }
        Ok(0.5 * self.mass.iter().zip(&other.mass).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }

    /// Two-column `lambda<TAB>mass` table, λ in grid order, 10 decimals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for i in 0..self.mass.len() {
            out.push_str(&self.grid.format_point(i));
            out.push('\t');
            out.push_str(&format!("{:.10}\n", self.mass[i]));
        }
        out
    }

    pub fn to_record(&self) -> DistributionRecord {
        DistributionRecord {
            grid: self.grid.spec().clone(),
            mass: self.mass.clone(),
            zero_density: self.zero_density,
        }
    }

    pub fn from_record(record: &DistributionRecord, grid: Arc<ParamGrid>) -> Result<Self> {
        if &record.grid != grid.spec() {
            return Err(Error::InvalidDistribution("record grid does not match".into()));
        }
        if record.zero_density {
            return Ok(Self::delta_off_grid(grid));
        }
        Self::from_masses(grid, record.mass.clone())
    }
}

/// Serialisable form of a distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionRecord {
    pub grid: GridSpec,
    pub mass: Vec<f64>,
    #[serde(default)]
    pub zero_density: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(lo: f64, hi: f64, step: f64) -> Arc<ParamGrid> {
        Arc::new(make_grid(lo, hi, step).unwrap())
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(make_grid(0.0, 1.0, 0.05).unwrap().len(), 21);
        assert_eq!(make_grid(1.0, 10.0, 0.05).unwrap().len(), 181);
        assert_eq!(make_grid(0.0, 1.0, 0.5).unwrap().lambdas(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn grid_points_are_clean_and_increasing() {
        let g = make_grid(0.0, 1.0, 0.05).unwrap();
        assert_eq!(g.lambda(3), 0.15);
        assert_eq!(g.lambda(20), 1.0);
        assert!(g.lambdas().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(g.index_of(0.7), Some(14));
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(make_grid(0.0, 1.0, 0.0).is_err());
        assert!(make_grid(0.0, 1.0, -0.1).is_err());
        assert!(make_grid(1.0, 1.0, 0.1).is_err());
        assert!(simplex_grid(3, 0.3).is_err());
    }

    #[test]
    fn simplex_points_sum_to_one() {
        let g = simplex_grid(3, 0.25).unwrap();
        // C(4 + 2, 2) compositions of 4 into 3 parts
        assert_eq!(g.len(), 15);
        for i in 0..g.len() {
            let p = g.point(i);
            assert!(p.iter().all(|v| *v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let two = simplex_grid(2, 0.05).unwrap();
        assert_eq!(two.len(), 21);
        assert_eq!(two.point(14), &[0.7, 0.3]);
    }

    #[test]
    fn basic_distributions() {
        let g = grid(0.0, 1.0, 0.05);
        let u = DiscreteDistribution::uniform(g.clone());
        assert!(u.masses().iter().all(|m| *m == 1.0 / 21.0));
        let d = DiscreteDistribution::delta_off_grid(g.clone());
        assert!(d.masses().iter().all(|m| *m == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(d.sample(&mut rng), Err(Error::ZeroDensity)));

        let g2 = grid(0.5, 1.0, 0.5);
        let e = DiscreteDistribution::empirical(g2.clone(), &[3, 1]).unwrap();
        assert_eq!(e.masses(), &[0.75, 0.25]);
        assert!(DiscreteDistribution::empirical(g2, &[0, 0]).is_err());
    }

    #[test]
    fn tv_and_expectation() {
        let g = grid(0.0, 1.0, 1.0);
        let u = DiscreteDistribution::uniform(g.clone());
        assert_eq!(u.tv_distance(&u).unwrap(), 0.0);
        let a = DiscreteDistribution::point_mass(g.clone(), 0).unwrap();
        let b = DiscreteDistribution::point_mass(g.clone(), 1).unwrap();
        assert_eq!(a.tv_distance(&b).unwrap(), 1.0);
        let e = u.expectation(|i| Ok(Tensor::scalar(g.lambda(i)))).unwrap();
        assert_eq!(e.item().unwrap(), 0.5);
        let other = DiscreteDistribution::uniform(grid(0.0, 2.0, 1.0));
        assert!(u.tv_distance(&other).is_err());
    }

    #[test]
    fn sampling_matches_distribution() {
        let g = grid(0.0, 1.0, 0.05);
        let weights: Vec<f64> = (0..21).map(|i| ((i as f64) - 8.0).powi(2) + 0.5).collect();
        let d = DiscreteDistribution::from_weights(g.clone(), &weights).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = vec![0u64; 21];
        for _ in 0..100_000 {
            counts[d.sample(&mut rng).unwrap()] += 1;
        }
        let emp = DiscreteDistribution::empirical(g, &counts).unwrap();
        assert!(emp.tv_distance(&d).unwrap() < 0.02);
    }

    #[test]
    fn sampling_skips_zero_mass_points() {
        let g = grid(0.0, 1.0, 0.25);
        let d = DiscreteDistribution::from_masses(g, vec![0.0, 0.5, 0.0, 0.5, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let i = d.sample(&mut rng).unwrap();
            assert!(i == 1 || i == 3);
        }
    }

    #[test]
    fn table_format() {
        let g = grid(0.0, 1.0, 0.5);
        let u = DiscreteDistribution::uniform(g);
        assert_eq!(
            u.to_table(),
            "0.0000000000\t0.3333333333\n0.5000000000\t0.3333333333\n1.0000000000\t0.3333333333\n"
        );
    }

    #[test]
    fn record_round_trip() {
        let g = grid(1.0, 2.0, 0.25);
        let d = DiscreteDistribution::from_weights(g.clone(), &[1.0, 2.0, 3.0, 0.0, 4.0]).unwrap();
        let rec = d.to_record();
        let json = serde_json::to_string(&rec).unwrap();
        let back: DistributionRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(DiscreteDistribution::from_record(&back, g).unwrap(), d);
    }

    proptest! {
        #[test]
        fn expectation_is_linear(ws in proptest::collection::vec(0.01f64..5.0, 6), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let g = grid(0.0, 1.0, 0.2);
            let d = DiscreteDistribution::from_weights(g.clone(), &ws).unwrap();
            let f = |i: usize| Tensor::scalar((g.lambda(i) * 3.0).sin());
            let h = |i: usize| Tensor::scalar(g.lambda(i).powi(2));
            let lhs = d.expectation(|i| Ok(f(i).scale(a).add(&h(i).scale(b))?)).unwrap().item().unwrap();
            let rhs = a * d.expectation(|i| Ok(f(i))).unwrap().item().unwrap()
                + b * d.expectation(|i| Ok(h(i))).unwrap().item().unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn integer_scaled_masses_round_trip(counts in proptest::collection::vec(0u64..50, 21)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let g = grid(0.0, 1.0, 0.05);
            let d = DiscreteDistribution::empirical(g.clone(), &counts).unwrap();
            let total: u64 = counts.iter().sum();
            let rescaled: Vec<u64> = d.masses().iter().map(|m| (m * total as f64).round() as u64).collect();
            prop_assert_eq!(&rescaled, &counts);
            let again = DiscreteDistribution::empirical(g.clone(), &rescaled).unwrap();
            prop_assert_eq!(again.masses(), d.masses());
            prop_assert!((d.total_mass() - 1.0).abs() < 1e-10);

            let u = DiscreteDistribution::uniform(g.clone());
            let ucounts: Vec<u64> = u.masses().iter().map(|m| (m * 21.0).round() as u64).collect();
            prop_assert_eq!(DiscreteDistribution::empirical(g, &ucounts).unwrap(), u);
        }
    }
}
