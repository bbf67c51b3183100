//! Metropolis–Hastings sampling of the Gibbs posterior
//! `p(λ) ∝ exp(−η·L(λ)) · prior(λ)` over a finite grid, and its exact
//! enumeration.
//!
//! Losses are frozen for the duration of a chain, so they are evaluated once
//! per grid point into a [`LossCache`] and every MH step is a table lookup.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::param_space::{DiscreteDistribution, ParamGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub eta: f64,
    /// Probability of proposing a uniform jump over the whole grid instead
    /// of a ±1 neighbour step.
    pub global_jump_prob: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iterations: 15000,
            burn_in: 1000,
            thinning: 1,
            eta: 1.0,
            global_jump_prob: 0.5,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iterations {
            return Err(Error::Config(format!(
                "burn-in {} must be below the iteration count {}",
                self.burn_in, self.n_iterations
            )));
        }
        if self.thinning == 0 {
            return Err(Error::Config("thinning must be at least 1".into()));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.global_jump_prob) {
            return Err(Error::Config("global_jump_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `L(λ)` for every grid point at a frozen θ.
#[derive(Clone, Debug, PartialEq)]
pub struct LossCache {
    grid: Arc<ParamGrid>,
    losses: Vec<f64>,
}

impl LossCache {
    pub fn from_losses(grid: Arc<ParamGrid>, losses: Vec<f64>) -> Result<Self> {
        if losses.len() != grid.len() {
            return Err(Error::Config(format!("{} losses for a grid of {}", losses.len(), grid.len())));
        }
        if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("loss at λ = {}", grid.format_point(i))));
        }
        Ok(Self { grid, losses })
    }

    /// Evaluates `loss(i)` at every grid index.
    pub fn compute<F>(grid: Arc<ParamGrid>, exec: Execution, loss: F) -> Result<Self>
    where
        F: Fn(usize) -> Result<f64> + Sync + Send,
    {
        let losses = exec.map_range(grid.len(), loss).into_iter().collect::<Result<Vec<_>>>()?;
        Self::from_losses(grid, losses)
    }

    pub fn grid(&self) -> &Arc<ParamGrid> {
        &self.grid
    }

    pub fn get(&self, index: usize) -> f64 {
        self.losses[index]
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }
}

/// Unnormalized posterior mass `exp(−η·L(λ))·prior(λ)` at grid index `index`.
pub fn gibbs_weight(cache: &LossCache, index: usize, eta: f64, prior: &DiscreteDistribution) -> f64 {
    let p = prior.mass(index);
    if p == 0.0 {
        return 0.0;
    }
    (-eta * cache.get(index)).exp() * p
}

fn log_weight(cache: &LossCache, index: usize, eta: f64, prior: &DiscreteDistribution) -> f64 {
    let p = prior.mass(index);
    if p == 0.0 {
        f64::NEG_INFINITY
    } else {
        -eta * cache.get(index) + p.ln()
    }
}

fn check_prior(cache: &LossCache, prior: &DiscreteDistribution) -> Result<()> {
    if prior.grid().len() != cache.grid().len() {
        return Err(Error::InvalidDistribution("prior and loss cache live on different grids".into()));
    }
    if prior.is_zero_density() || prior.total_mass() == 0.0 {
        return Err(Error::ZeroDensity);
    }
    Ok(())
}

/// Exact posterior over the grid, normalized with log-sum-exp.
pub fn exact_gibbs(cache: &LossCache, eta: f64, prior: &DiscreteDistribution) -> Result<DiscreteDistribution> {
    check_prior(cache, prior)?;
    let logs: Vec<f64> = (0..cache.grid().len()).map(|i| log_weight(cache, i, eta, prior)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::ZeroDensity);
    }
    let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + total.ln();
    let mass: Vec<f64> = logs.iter().map(|l| (l - log_z).exp()).collect();
    DiscreteDistribution::from_weights(Arc::clone(cache.grid()), &mass)
}

fn propose<R: Rng + ?Sized>(current: usize, n: usize, global_jump_prob: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < global_jump_prob {
        return rng.gen_range(0..n);
    }
    if rng.gen::<bool>() {
        if current + 1 < n {
            current + 1
        } else {
            current
        }
    } else {
        current.checked_sub(1).unwrap_or(current)
    }
}

/// Runs the chain from a uniform draw among positive-prior points and
/// returns the post-burn-in, thinned states as grid indices.
pub fn run_chain<R: Rng + ?Sized>(
    cache: &LossCache,
    prior: &DiscreteDistribution,
    config: &ChainConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_prior(cache, prior)?;
    let support = prior.support();
    let start = support[rng.gen_range(0..support.len())];
    run_chain_from(cache, prior, config, start, rng)
}

pub fn run_chain_from<R: Rng + ?Sized>(
    cache: &LossCache,
    prior: &DiscreteDistribution,
    config: &ChainConfig,
    start: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    config.validate()?;
    check_prior(cache, prior)?;
    let n = cache.grid().len();
    if start >= n || prior.mass(start) == 0.0 {
        return Err(Error::ZeroMassStart(start));
    }
    let eta = config.eta;
    let mut current = start;
    let mut current_log = log_weight(cache, current, eta, prior);
    let mut accepted = Vec::with_capacity((config.n_iterations - config.burn_in) / config.thinning + 1);
    for it in 0..config.n_iterations {
        let proposal = propose(current, n, config.global_jump_prob, rng);
        let u: f64 = rng.gen();
        if proposal != current {
            let proposal_log = log_weight(cache, proposal, eta, prior);
            let ratio = proposal_log - current_log;
            if ratio >= 0.0 || u < ratio.exp() {
                current = proposal;
                current_log = proposal_log;
            }
        }
        if it >= config.burn_in && (it - config.burn_in) % config.thinning == 0 {
            accepted.push(current);
        }
    }
    Ok(accepted)
}

/// Independent chains with seeds `seeds[i]`, evaluated under `exec`.
pub fn run_chains(
    cache: &LossCache,
    prior: &DiscreteDistribution,
    config: &ChainConfig,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<Vec<usize>>> {
    exec.map_slice(seeds, |&seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        run_chain(cache, prior, config, &mut rng)
    })
    .into_iter()
    .collect()
}

/// Normalized visit counts of the accepted states.
pub fn empirical_distribution(accepted: &[usize], grid: Arc<ParamGrid>) -> Result<DiscreteDistribution> {
    if accepted.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut counts = vec![0u64; grid.len()];
    for &i in accepted {
        if i >= grid.len() {
            return Err(Error::InvalidDistribution(format!("sample index {i} outside the grid")));
        }
        counts[i] += 1;
    }
    DiscreteDistribution::empirical(grid, &counts)
}

/// One λ per line, formatted with 10 decimals.
pub fn format_accepted(accepted: &[usize], grid: &ParamGrid) -> String {
    let mut out = String::with_capacity(accepted.len() * 14);
    for &i in accepted {
        out.push_str(&grid.format_point(i));
        out.push('\n');
    }
    out
}

/// Transition matrix `P[i][j]` of the MH kernel, row-stochastic.
pub fn transition_matrix(cache: &LossCache, eta: f64, prior: &DiscreteDistribution, global_jump_prob: f64) -> Vec<Vec<f64>> {
    let n = cache.grid().len();
    let logs: Vec<f64> = (0..n).map(|i| log_weight(cache, i, eta, prior)).collect();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut off = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut q = global_jump_prob / n as f64;
            if i.abs_diff(j) == 1 {
                q += (1.0 - global_jump_prob) / 2.0;
            }
            let accept = if logs[j] == f64::NEG_INFINITY {
                0.0
            } else {
                (logs[j] - logs[i]).exp().min(1.0)
            };
            p[i][j] = q * accept;
            off += p[i][j];
        }
        p[i][i] = 1.0 - off;
    }
    p
}
