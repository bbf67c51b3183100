//! Consistency diagnostics: the ϱ ratio of the log-normalizer expansion, the
//! exact M-step objective and its importance-sampled estimate, an empirical
//! stability probe, and distribution tables.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::em::{descend_on_draws, IterationRecord, MStepInputs, StepSchedule, Variant};
use crate::error::{Error, Result};
use crate::factory::{GraphFamily, GraphSource};
use crate::gibbs::{exact_gibbs, LossCache};
use crate::graph::Graph;
use crate::model::{self, ModelConfig, ModelParams, Split, TaskKind, TaskSpec};
use crate::par::Execution;
use crate::param_space::{make_grid, DiscreteDistribution};
use crate::tensor::Tensor;

/// `ρ = Var_{p₀}(e^{−ηL}) / (2·E_{p₀}[e^{−ηL}]²)`, the denominator
/// `−η·E_{p₀}[L]` and their ratio ϱ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoRatio {
    pub rho: f64,
    pub denominator: f64,
    /// `None` when the denominator is zero.
    pub ratio: Option<f64>,
}

fn check_lengths(losses: &[f64], d: &DiscreteDistribution) -> Result<()> {
    if losses.len() != d.grid().len() {
        return Err(Error::InvalidDistribution(format!(
            "{} losses for a grid of {}",
            losses.len(),
            d.grid().len()
        )));
    }
    Ok(())
}

/// Exact grid sums over `p0`. Exponentials are shifted by the smallest loss
/// on the support; ρ is invariant to that scale.
pub fn rho_ratio(losses: &[f64], eta: f64, p0: &DiscreteDistribution) -> Result<RhoRatio> {
    check_lengths(losses, p0)?;
    if p0.is_zero_density() || !(p0.total_mass() > 0.0) {
        return Err(Error::ZeroDensity);
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("loss at grid index {i}")));
    }
    let support = p0.support();
    let shift = support.iter().map(|&i| losses[i]).fold(f64::INFINITY, f64::min);
    let x: Vec<f64> = losses.iter().map(|l| (-eta * (l - shift)).exp()).collect();
    let mean: f64 = support.iter().map(|&i| p0.mass(i) * x[i]).sum();
    let var: f64 = support.iter().map(|&i| p0.mass(i) * (x[i] - mean).powi(2)).sum();
    let rho = var / (2.0 * mean * mean);
    let denominator = -eta * support.iter().map(|&i| p0.mass(i) * losses[i]).sum::<f64>();
    let ratio = (denominator != 0.0).then(|| rho / denominator);
    Ok(RhoRatio {
        rho,
        denominator,
        ratio,
    })
}

/// `J(θ) = Σ_λ (p_t(λ) − p₀(λ))·L(λ, θ)`.
pub fn j_exact(losses: &[f64], p_t: &DiscreteDistribution, p0: &DiscreteDistribution) -> Result<f64> {
    check_lengths(losses, p_t)?;
    check_lengths(losses, p0)?;
    Ok(losses
        .iter()
        .enumerate()
        .map(|(i, l)| (p_t.mass(i) - p0.mass(i)) * l)
        .sum())
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

/// `E_{λ∼q}[(p_t(λ) − p₀(λ))/q(λ) · L(λ)]` from `draws` samples.
pub fn importance_estimate<R: Rng + ?Sized>(
    losses: &[f64],
    p_t: &DiscreteDistribution,
    p0: &DiscreteDistribution,
    q: &DiscreteDistribution,
    draws: usize,
    rng: &mut R,
) -> Result<Estimate> {
    check_lengths(losses, q)?;
    if draws < 2 {
        return Err(Error::Config("need at least two draws".into()));
    }
    let values = (0..draws)
        .map(|_| {
            let i = q.sample(rng)?;
            Ok((p_t.mass(i) - p0.mass(i)) / q.mass(i) * losses[i])
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = draws as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Estimate {
        mean,
        std_error: (var / n).sqrt(),
    })
}

/// Writes the two-column `λ<TAB>mass` table.
pub fn report_distribution<W: Write>(p: &DiscreteDistribution, sink: &mut W) -> Result<()> {
    sink.write_all(p.to_table().as_bytes())?;
    Ok(())
}

/// `iteration,rho,denominator,ratio` rows; undefined values are left empty.
pub fn rho_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,rho,denominator,ratio\n");
    for rec in history {
        match rec.rho {
            Some(r) => {
                let ratio = r.ratio.map(|v| format!("{v:.10}")).unwrap_or_default();
                out.push_str(&format!("{},{:.10},{:.10},{}\n", rec.iteration, r.rho, r.denominator, ratio));
            }
            None => out.push_str(&format!("{},,,\n", rec.iteration)),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityProbeConfig {
    pub t_primes: Vec<usize>,
    pub seed_pairs: usize,
    pub seed: u64,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for StabilityProbeConfig {
    fn default() -> Self {
        Self {
            t_primes: vec![4, 16, 64, 256],
            seed_pairs: 20,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl StabilityProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut sorted = self.t_primes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() < 2 || sorted[0] == 0 {
            return Err(Error::Config("the probe needs at least two distinct positive T′ values".into()));
        }
        if self.seed_pairs == 0 {
            return Err(Error::Config("the probe needs at least one seed pair".into()));
        }
        Ok(())
    }
}

/// Fixed inputs of algorithm A: starting point, distributions and model.
#[derive(Clone, Debug)]
pub struct ProbeFixture {
    pub family: GraphFamily,
    pub task: TaskSpec,
    pub theta0: ModelParams,
    pub p_t: DiscreteDistribution,
    pub p0: DiscreteDistribution,
    pub q: DiscreteDistribution,
    pub model: ModelConfig,
    pub schedule: StepSchedule,
}

impl ProbeFixture {
    fn inputs(&self) -> MStepInputs<'_> {
        MStepInputs {
            family: &self.family,
            task: &self.task,
            model: &self.model,
            schedule: self.schedule,
            p_t: &self.p_t,
            p0: &self.p0,
            q: &self.q,
            negative_weight_clip: None,
        }
    }

    fn losses(&self, theta: &ModelParams) -> Result<Vec<f64>> {
        let grid = self.family.grid();
        (0..grid.len())
            .map(|i| model::loss(theta, grid.lambda(i), &self.family.batch(i), &self.task, Split::Train))
            .collect()
    }

    /// `(1/T′)·Σ w(λ_i)·L(λ_i, θ)` over the draws.
    fn empirical_objective(&self, losses: &[f64], draws: &[usize]) -> f64 {
        let inputs = self.inputs();
        draws.iter().map(|&i| inputs.weight(i) * losses[i]).sum::<f64>() / draws.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub t_prime: usize,
    /// Mean of `|J_{Λ_{T′}}(θ̂) − J(θ̂)|`.
    pub mean_gap: f64,
    /// Mean of `max_λ |L(λ, θ̂) − L(λ, θ̂′)|` between the two runs of a pair.
    pub mean_stability: f64,
}

struct PairOutcome {
    gap: f64,
    stability: f64,
}

fn run_pair(fixture: &ProbeFixture, t_prime: usize, seed: u64) -> Result<PairOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = (0..t_prime)
        .map(|_| fixture.q.sample(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut perturbed = draws.clone();
    let pos = rng.gen_range(0..t_prime);
    perturbed[pos] = fixture.q.sample(&mut rng)?;
    let inputs = fixture.inputs();
    let mut gaps = 0.0;
    let mut all_losses = Vec::with_capacity(2);
    for d in [&draws, &perturbed] {
        let (theta, _) = descend_on_draws(fixture.theta0.clone(), d, &inputs)?;
        let losses = fixture.losses(&theta)?;
        let j = j_exact(&losses, &fixture.p_t, &fixture.p0)?;
        gaps += (fixture.empirical_objective(&losses, d) - j).abs();
        all_losses.push(losses);
    }
    let stability = all_losses[0]
        .iter()
        .zip(&all_losses[1])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(PairOutcome {
        gap: gaps / 2.0,
        stability,
    })
}

/// For each T′, runs the M-step on pairs of λ sequences that differ in one
/// position and averages the gap between the empirical and exact objectives.
pub fn stability_probe(config: &StabilityProbeConfig, fixture: &ProbeFixture) -> Result<Vec<ProbeRow>> {
    config.validate()?;
    let jobs: Vec<(usize, u64)> = config
        .t_primes
        .iter()
        .flat_map(|&t| (0..config.seed_pairs as u64).map(move |k| (t, k)))
        .collect();
    let outcomes = config
        .execution
        .map_slice(&jobs, |&(t, k)| {
            let seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((t as u64) << 32) ^ k;
            run_pair(fixture, t, seed)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let pairs = config.seed_pairs as f64;
    Ok(config
        .t_primes
        .iter()
        .enumerate()
        .map(|(row, &t)| {
            let chunk = &outcomes[row * config.seed_pairs..(row + 1) * config.seed_pairs];
            ProbeRow {
                t_prime: t,
                mean_gap: chunk.iter().map(|o| o.gap).sum::<f64>() / pairs,
                mean_stability: chunk.iter().map(|o| o.stability).sum::<f64>() / pairs,
            }
        })
        .collect())
}

/// Least-squares slope of `ln(mean_gap)` against `ln(T′)`.
pub fn log_log_slope(rows: &[ProbeRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.mean_gap > 0.0)
        .map(|r| ((r.t_prime as f64).ln(), r.mean_gap.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// `t_prime,mean_gap,mean_stability` rows.
pub fn gap_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("t_prime,mean_gap,mean_stability\n");
    for r in rows {
        out.push_str(&format!("{},{:.10},{:.10}\n", r.t_prime, r.mean_gap, r.mean_stability));
    }
    out
}

/// A small two-edge-type node-classification problem with a single linear
/// GCN layer, so the loss is convex in θ for every λ. `p_t` is the exact
/// posterior at the starting point; `p₀` and `q` follow `variant`.
pub fn convex_fixture(seed: u64, variant: Variant) -> Result<ProbeFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 30;
    let classes = 3;
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] == labels[j] && rng.gen_bool(0.25) {
                edges.push((i, j, 0, 1.0));
            }
            if rng.gen_bool(0.15) {
                edges.push((i, j, 1, 1.0));
            }
        }
    }
    let mut feats = Tensor::uniform(n, 4, -1.0, 1.0, &mut rng);
    for (i, &c) in labels.iter().enumerate() {
        let v = feats.get(i, c) + 0.5;
        feats.set(i, c, v);
    }
    let graph = Graph::from_typed_edges(n, &[0, 1], &edges, feats)?;
    let grid = Arc::new(make_grid(0.0, 1.0, 0.05)?);
    let family = GraphFamily::build(&GraphSource::Hetero(graph), Arc::clone(&grid), Execution::Sequential)?;
    let task = TaskSpec::new(
        TaskKind::NodeClassification {
            labels: labels.into_iter().map(Some).collect(),
            num_classes: classes,
        },
        (0..20).collect(),
        (20..25).collect(),
        (25..30).collect(),
    )?;
    let model_cfg = ModelConfig {
        hidden: classes,
        layers: 1,
        ..Default::default()
    };
    let theta0 = ModelParams::init(&model_cfg, 4, &task, 1.0, &mut rng);
    let losses = (0..grid.len())
        .map(|i| model::loss(&theta0, grid.lambda(i), &family.batch(i), &task, Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let uniform = DiscreteDistribution::uniform(Arc::clone(&grid));
    let p_t = exact_gibbs(&LossCache::from_losses(Arc::clone(&grid), losses)?, 20.0, &uniform)?;
    let priors = variant.priors();
    let p0 = match priors.p0 {
        crate::em::PriorChoice::DeltaOffGrid => DiscreteDistribution::delta_off_grid(Arc::clone(&grid)),
        _ => uniform.clone(),
    };
    let q = match priors.q {
        crate::em::ProposalChoice::Posterior => p_t.clone(),
        _ => uniform,
    };
    Ok(ProbeFixture {
        family,
        task,
        theta0,
        p_t,
        p0,
        q,
        model: model_cfg,
        schedule: StepSchedule { a0: 0.5, c: None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Arc<crate::param_space::ParamGrid> {
        Arc::new(make_grid(0.0, 1.0, 1.0 / (n - 1) as f64).unwrap())
    }

    fn brute_rho(losses: &[f64], eta: f64, p0: &[f64]) -> (f64, f64) {
        let w: Vec<f64> = losses.iter().map(|l| (-eta * l).exp()).collect();
        let e1: f64 = w.iter().zip(p0).map(|(a, p)| a * p).sum();
        let e2: f64 = w.iter().zip(p0).map(|(a, p)| a * a * p).sum();
        let rho = (e2 - e1 * e1) / (2.0 * e1 * e1);
        let den = -eta * losses.iter().zip(p0).map(|(l, p)| l * p).sum::<f64>();
        (rho, den)
    }

    #[test]
    fn constant_loss_gives_zero_rho() {
        let g = grid(5);
        let r = rho_ratio(&[0.7; 5], 2.0, &DiscreteDistribution::uniform(g)).unwrap();
        assert_eq!(r.rho, 0.0);
        assert_eq!(r.ratio, Some(0.0));
    }

    #[test]
    fn two_point_closed_form() {
        let g = grid(2);
        let r = rho_ratio(&[0.0, 1.0], 1.0, &DiscreteDistribution::uniform(g)).unwrap();
        let e = (-1.0f64).exp();
        let mean = (1.0 + e) / 2.0;
        let var = ((1.0 - mean).powi(2) + (e - mean).powi(2)) / 2.0;
        assert!((r.rho - var / (2.0 * mean * mean)).abs() < 1e-15);
        assert!((r.denominator + 0.5).abs() < 1e-15);
        assert!((r.ratio.unwrap() - r.rho / -0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_losses_leave_ratio_undefined() {
        let r = rho_ratio(&[0.0, 0.0], 1.0, &DiscreteDistribution::uniform(grid(2))).unwrap();
        assert_eq!(r.ratio, None);
        assert!(rho_ratio(&[0.0, 0.0], 1.0, &DiscreteDistribution::delta_off_grid(grid(2))).is_err());
    }

    #[test]
    fn rho_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let g = grid(21);
            let losses: Vec<f64> = (0..21).map(|_| rng.gen_range(0.1..2.0)).collect();
            let w: Vec<f64> = (0..21).map(|_| rng.gen_range(0.0..1.0)).collect();
            let p0 = DiscreteDistribution::from_weights(Arc::clone(&g), &w).unwrap();
            let eta = rng.gen_range(0.1..3.0);
            let r = rho_ratio(&losses, eta, &p0).unwrap();
            let (rho, den) = brute_rho(&losses, eta, p0.masses());
            assert!((r.rho - rho).abs() < 1e-10);
            assert!((r.ratio.unwrap() - rho / den).abs() < 1e-10);
        }
    }

    #[test]
    fn j_exact_examples() {
        let g = grid(3);
        let l = [1.0, 2.0, 4.0];
        let u = DiscreteDistribution::uniform(Arc::clone(&g));
        assert_eq!(j_exact(&l, &u, &u).unwrap(), 0.0);
        let a = DiscreteDistribution::point_mass(Arc::clone(&g), 0).unwrap();
        let b = DiscreteDistribution::point_mass(Arc::clone(&g), 2).unwrap();
        assert_eq!(j_exact(&l, &a, &b).unwrap(), -3.0);
        assert_eq!(j_exact(&l, &b, &a).unwrap(), 3.0);
    }

    #[test]
    fn importance_estimate_within_three_standard_errors() {
        let g = grid(21);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let losses: Vec<f64> = (0..21).map(|i| 1.0 + (i as f64 * 0.3).cos()).collect();
        let w: Vec<f64> = (0..21).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p_t = DiscreteDistribution::from_weights(Arc::clone(&g), &w).unwrap();
        let p0 = DiscreteDistribution::uniform(Arc::clone(&g));
        let exact = j_exact(&losses, &p_t, &p0).unwrap();
        let est = importance_estimate(&losses, &p_t, &p0, &p0, 10_000, &mut rng).unwrap();
        assert!((est.mean - exact).abs() < 3.0 * est.std_error);
    }

    #[test]
    fn distribution_report() {
        let g = Arc::new(make_grid(0.0, 1.0, 0.5).unwrap());
        let mut out = Vec::new();
        report_distribution(&DiscreteDistribution::uniform(Arc::clone(&g)), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.ends_with("\t0.3333333333")));
        let mut out = Vec::new();
        report_distribution(&DiscreteDistribution::point_mass(g, 1).unwrap(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().filter(|l| !l.ends_with("\t0.0000000000")).count(), 1);
    }

    #[test]
    fn probe_gap_vanishes_when_posterior_equals_prior() {
        let mut fixture = convex_fixture(1, Variant::PO).unwrap();
        fixture.p_t = fixture.p0.clone();
        let cfg = StabilityProbeConfig {
            t_primes: vec![2, 8],
            seed_pairs: 3,
            ..Default::default()
        };
        let rows = stability_probe(&cfg, &fixture).unwrap();
        assert!(rows.iter().all(|r| r.mean_gap == 0.0 && r.mean_stability == 0.0));
    }

    #[test]
    fn probe_rejects_single_t_prime() {
        let fixture = convex_fixture(1, Variant::PD).unwrap();
        let cfg = StabilityProbeConfig {
            t_primes: vec![4, 4],
            ..Default::default()
        };
        assert!(stability_probe(&cfg, &fixture).is_err());
    }

    #[test]
    fn slope_of_power_law() {
        let rows: Vec<ProbeRow> = [4usize, 16, 64]
            .iter()
            .map(|&t| ProbeRow {
                t_prime: t,
                mean_gap: 1.0 / (t as f64).sqrt(),
                mean_stability: 0.0,
            })
            .collect();
        assert!((log_log_slope(&rows) + 0.5).abs() < 1e-12);
    }
}
