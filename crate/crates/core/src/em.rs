//! EM training loop: pretrain, then alternate the MCMC E-step with the
//! importance-weighted M-step, and predict with the posterior expectation.

use std::sync::Arc;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{j_exact, rho_ratio, RhoRatio};
use crate::error::{Error, Result};
use crate::factory::GraphFamily;
use crate::gibbs::{self, ChainConfig, LossCache};
use crate::metrics;
use crate::model::{self, GraphBatch, ModelConfig, ModelParams, Split, TaskKind, TaskSpec};
use crate::par::Execution;
use crate::param_space::{DiscreteDistribution, DistributionRecord, ParamGrid};
use crate::tensor::Tensor;

/// The four prior/proposal combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// p₀ uniform, p′₀ uniform, q = p_t.
    PT,
    /// p₀ uniform, p′₀ uniform, q uniform.
    PO,
    /// p₀ off-grid delta, p′₀ uniform, q = p_t.
    PD,
    /// p₀ off-grid delta, p′₀ uniform, q uniform.
    PH,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::PT, Variant::PO, Variant::PD, Variant::PH];

    pub fn priors(self) -> PriorSet {
        let (p0, q) = match self {
            Variant::PT => (PriorChoice::Uniform, ProposalChoice::Posterior),
            Variant::PO => (PriorChoice::Uniform, ProposalChoice::Uniform),
            Variant::PD => (PriorChoice::DeltaOffGrid, ProposalChoice::Posterior),
            Variant::PH => (PriorChoice::DeltaOffGrid, ProposalChoice::Uniform),
        };
        PriorSet {
            p0,
            p0_prime: PriorChoice::Uniform,
            q,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PT" => Ok(Variant::PT),
            "PO" => Ok(Variant::PO),
            "PD" => Ok(Variant::PD),
            "PH" => Ok(Variant::PH),
            other => Err(Error::Config(format!("unknown variant {other:?}; expected PT, PO, PD or PH"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PriorChoice {
    Uniform,
    DeltaOffGrid,
    PointMass { lambda: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProposalChoice {
    /// Sample from the current posterior p_t.
    Posterior,
    Uniform,
    PointMass { lambda: f64 },
}

/// `(p₀, p′₀, q)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSet {
    pub p0: PriorChoice,
    pub p0_prime: PriorChoice,
    pub q: ProposalChoice,
}

fn point_index(grid: &ParamGrid, lambda: f64) -> Result<usize> {
    grid.index_of(lambda)
        .ok_or_else(|| Error::Config(format!("point mass at λ = {lambda} is not on the grid")))
}

fn resolve_prior(choice: PriorChoice, grid: &Arc<ParamGrid>) -> Result<DiscreteDistribution> {
    match choice {
        PriorChoice::Uniform => Ok(DiscreteDistribution::uniform(Arc::clone(grid))),
        PriorChoice::DeltaOffGrid => Ok(DiscreteDistribution::delta_off_grid(Arc::clone(grid))),
        PriorChoice::PointMass { lambda } => DiscreteDistribution::point_mass(Arc::clone(grid), point_index(grid, lambda)?),
    }
}

/// Proposal used by the M-step.
#[derive(Clone, Debug, PartialEq)]
pub enum Proposal {
    Posterior,
    Fixed(DiscreteDistribution),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedPriors {
    pub p0: DiscreteDistribution,
    pub p0_prime: DiscreteDistribution,
    pub q: Proposal,
}

impl PriorSet {
    /// Builds the distributions and checks the support conditions that can be
    /// checked before training: p′₀ must have mass, and a fixed q must cover
    /// the supports of p₀ and p′₀ (hence of every p_t).
    pub fn resolve(&self, grid: &Arc<ParamGrid>) -> Result<ResolvedPriors> {
        let p0 = resolve_prior(self.p0, grid)?;
        let p0_prime = resolve_prior(self.p0_prime, grid)?;
        if p0_prime.is_zero_density() {
            return Err(Error::Config("p′₀ must put mass on the grid".into()));
        }
        let q = match self.q {
            ProposalChoice::Posterior => Proposal::Posterior,
            ProposalChoice::Uniform => Proposal::Fixed(DiscreteDistribution::uniform(Arc::clone(grid))),
            ProposalChoice::PointMass { lambda } => {
                Proposal::Fixed(DiscreteDistribution::point_mass(Arc::clone(grid), point_index(grid, lambda)?)?)
            }
        };
        if let Proposal::Fixed(q) = &q {
            for i in 0..grid.len() {
                if q.mass(i) == 0.0 && (p0.mass(i) > 0.0 || p0_prime.mass(i) > 0.0) {
                    return Err(Error::Config(format!(
                        "proposal q has no mass at λ = {} where p₀ or p′₀ does",
                        grid.format_point(i)
                    )));
                }
            }
        }
        Ok(ResolvedPriors { p0, p0_prime, q })
    }
}

/// `a_{t′} = min(a₀, c/t′)` for `t′ = 1, 2, …`, restarted every M-step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub a0: f64,
    /// Defaults to `a0`.
    #[serde(default)]
    pub c: Option<f64>,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self { a0: 0.05, c: None }
    }
}

impl StepSchedule {
    pub fn step(&self, t_prime: usize) -> f64 {
        let c = self.c.unwrap_or(self.a0);
        self.a0.min(c / t_prime.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a0 > 0.0) || !self.a0.is_finite() {
            return Err(Error::Config(format!("a0 must be positive, got {}", self.a0)));
        }
        if let Some(c) = self.c {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("c must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "T")]
    pub iterations: usize,
    #[serde(rename = "T_prime")]
    pub t_prime: usize,
    #[serde(default)]
    pub schedule: StepSchedule,
    pub variant: Variant,
    /// Overrides the variant's `(p₀, p′₀, q)` when present.
    #[serde(default)]
    pub priors: Option<PriorSet>,
    #[serde(default)]
    pub pretrain_epochs: usize,
    /// Constant pretraining step; defaults to `schedule.a0`.
    #[serde(default)]
    pub pretrain_lr: Option<f64>,
    /// Scalar λ in the layer weights while pretraining on the observed
    /// graph; defaults to the grid midpoint.
    #[serde(default)]
    pub pretrain_lambda: Option<f64>,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub seed: u64,
    /// Largest magnitude allowed for negative importance weights.
    #[serde(default)]
    pub negative_weight_clip: Option<f64>,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 15,
            t_prime: 20,
            schedule: StepSchedule::default(),
            variant: Variant::PT,
            priors: None,
            pretrain_epochs: 50,
            pretrain_lr: None,
            pretrain_lambda: None,
            chain: ChainConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
            negative_weight_clip: None,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        self.schedule.validate()?;
        self.chain.validate()?;
        self.model.validate()?;
        if let Some(lr) = self.pretrain_lr {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("pretrain_lr must be positive, got {lr}")));
            }
        }
        if let Some(c) = self.negative_weight_clip {
            if !(c >= 0.0) {
                return Err(Error::Config("negative_weight_clip must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn prior_set(&self) -> PriorSet {
        self.priors.unwrap_or_else(|| self.variant.priors())
    }
}

/// Scores of the expectation predictor on one split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub micro_f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub rmse: Option<f64>,
}

impl SplitMetrics {
    /// Micro-F1 for classification, RMSE for regression.
    pub fn primary(&self) -> f64 {
        self.micro_f1.or(self.rmse).unwrap_or(f64::NAN)
    }
}

/// `a` is strictly better than `b` on the task's primary metric.
pub fn is_better(task: &TaskSpec, a: f64, b: f64) -> bool {
    if b.is_nan() {
        return !a.is_nan();
    }
    if task.is_classification() {
        a > b
    } else {
        a < b
    }
}

/// Metrics of precomputed outputs on a split. Empty splits score NaN.
pub fn evaluate(outputs: &Tensor, task: &TaskSpec, split: Split) -> Result<SplitMetrics> {
    let rows = task.split(split);
    if rows.is_empty() {
        return Ok(SplitMetrics {
            loss: f64::NAN,
            micro_f1: task.is_classification().then_some(f64::NAN),
            macro_f1: task.is_classification().then_some(f64::NAN),
            rmse: (!task.is_classification()).then_some(f64::NAN),
        });
    }
    let loss = model::output_loss(outputs, task, split)?;
    match &task.kind {
        TaskKind::NodeClassification { labels, num_classes } => {
            let pred = outputs.select_rows(rows)?.argmax_rows();
            let truth: Vec<usize> = rows.iter().map(|&r| labels[r].unwrap_or(0)).collect();
            Ok(SplitMetrics {
                loss,
                micro_f1: Some(metrics::micro_f1(&truth, &pred, *num_classes)?),
                macro_f1: Some(metrics::macro_f1(&truth, &pred, *num_classes)?),
                rmse: None,
            })
        }
        TaskKind::GraphRegression { targets } => {
            let truth: Vec<f64> = rows.iter().map(|&g| targets[g]).collect();
            let pred: Vec<f64> = rows.iter().map(|&g| outputs.get(g, 0)).collect();
            Ok(SplitMetrics {
                loss,
                micro_f1: None,
                macro_f1: None,
                rmse: Some(metrics::rmse(&truth, &pred)?),
            })
        }
    }
}

/// One M-step gradient step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub lambda_index: usize,
    pub weight: f64,
    pub step: f64,
    /// `L_X(λ_{t′}, θ)` before the step.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Training loss of the expectation predictor after the M-step.
    pub train_loss: f64,
    pub train: SplitMetrics,
    pub val: SplitMetrics,
    pub test: SplitMetrics,
    /// Evaluated at the E-step parameters; absent when p₀ has no mass.
    pub rho: Option<RhoRatio>,
    /// Exact M-step objective at the E-step parameters.
    pub j_exact: f64,
    /// Grid points where p₀ has mass but q = p_t has none.
    pub support_gaps: usize,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub iteration: usize,
    pub val_metric: f64,
    pub theta: ModelParams,
    pub p_t: DiscreteDistribution,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub theta: ModelParams,
    pub p_t: Option<DiscreteDistribution>,
    pub iteration: usize,
    pub pretrain_losses: Vec<f64>,
    pub history: Vec<IterationRecord>,
    pub rng: ChaCha8Rng,
    pub best: Option<BestSnapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub iteration: usize,
    pub val_metric: f64,
    pub theta: ModelParams,
    pub p_t: DistributionRecord,
}

/// Serialisable form of [`TrainState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStateRecord {
    pub theta: ModelParams,
    pub p_t: Option<DistributionRecord>,
    pub iteration: usize,
    pub pretrain_losses: Vec<f64>,
    pub history: Vec<IterationRecord>,
    pub rng: ChaCha8Rng,
    pub best: Option<BestRecord>,
}

impl TrainState {
    pub fn to_record(&self) -> TrainStateRecord {
        TrainStateRecord {
            theta: self.theta.clone(),
            p_t: self.p_t.as_ref().map(DiscreteDistribution::to_record),
            iteration: self.iteration,
            pretrain_losses: self.pretrain_losses.clone(),
            history: self.history.clone(),
            rng: self.rng.clone(),
            best: self.best.as_ref().map(|b| BestRecord {
                iteration: b.iteration,
                val_metric: b.val_metric,
                theta: b.theta.clone(),
                p_t: b.p_t.to_record(),
            }),
        }
    }

    pub fn from_record(record: TrainStateRecord, grid: &Arc<ParamGrid>) -> Result<Self> {
        let p_t = record
            .p_t
            .as_ref()
            .map(|r| DiscreteDistribution::from_record(r, Arc::clone(grid)))
            .transpose()?;
        let best = match record.best {
            Some(b) => Some(BestSnapshot {
                iteration: b.iteration,
                val_metric: b.val_metric,
                p_t: DiscreteDistribution::from_record(&b.p_t, Arc::clone(grid))?,
                theta: b.theta,
            }),
            None => None,
        };
        Ok(Self {
            theta: record.theta,
            p_t,
            iteration: record.iteration,
            pretrain_losses: record.pretrain_losses,
            history: record.history,
            rng: record.rng,
            best,
        })
    }
}

/// Runs EM on a precomputed graph family.
pub struct Trainer<'a> {
    config: &'a TrainConfig,
    family: &'a GraphFamily,
    task: &'a TaskSpec,
    priors: ResolvedPriors,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, family: &'a GraphFamily, task: &'a TaskSpec) -> Result<Self> {
        config.validate()?;
        task.validate()?;
        let priors = config.prior_set().resolve(family.grid())?;
        Ok(Self {
            config,
            family,
            task,
            priors,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        self.config
    }

    pub fn priors(&self) -> &ResolvedPriors {
        &self.priors
    }

    pub fn grid(&self) -> &Arc<ParamGrid> {
        self.family.grid()
    }

    fn pretrain_lambda(&self) -> f64 {
        self.config.pretrain_lambda.unwrap_or_else(|| {
            let g = self.grid();
            0.5 * (g.lambda(0) + g.lambda(g.len() - 1))
        })
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ModelParams {
        ModelParams::init(
            &self.config.model,
            self.family.feature_dim(),
            self.task,
            self.grid().max_abs_lambda(),
            rng,
        )
    }

    /// Full-batch gradient descent on the observed graph.
    pub fn pretrain(&self, params: ModelParams, rng: &mut ChaCha8Rng) -> Result<(ModelParams, Vec<f64>)> {
        let lr = self.config.pretrain_lr.unwrap_or(self.config.schedule.a0);
        gradient_descent(
            params,
            self.pretrain_lambda(),
            &self.family.observed_batch(),
            self.task,
            &self.config.model,
            self.config.pretrain_epochs,
            |_| lr,
            rng,
        )
    }

    /// Seeds the RNG, initializes and pretrains θ⁽⁰⁾.
    pub fn start(&self) -> Result<TrainState> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let init = self.init_params(&mut rng);
        let (theta, pretrain_losses) = self.pretrain(init, &mut rng)?;
        Ok(TrainState {
            theta,
            p_t: None,
            iteration: 0,
            pretrain_losses,
            history: Vec::new(),
            rng,
            best: None,
        })
    }

    /// Training loss at every grid point for fixed θ.
    pub fn loss_cache(&self, theta: &ModelParams) -> Result<LossCache> {
        let grid = Arc::clone(self.grid());
        let g = Arc::clone(&grid);
        LossCache::compute(grid, self.config.execution, |i| {
            model::loss(theta, g.lambda(i), &self.family.batch(i), self.task, Split::Train)
        })
    }

    /// MCMC estimate of p_t at θ, plus the losses it was built from.
    pub fn e_step(&self, theta: &ModelParams, rng: &mut ChaCha8Rng) -> Result<(DiscreteDistribution, LossCache)> {
        if !theta.is_finite() {
            return Err(Error::NonFinite("parameters entering the E-step".into()));
        }
        let cache = self.loss_cache(theta)?;
        let accepted = gibbs::run_chain(&cache, &self.priors.p0_prime, &self.config.chain, rng)?;
        let p_t = gibbs::empirical_distribution(&accepted, Arc::clone(self.grid()))?;
        Ok((p_t, cache))
    }

    /// Importance-weighted stochastic gradient descent for `T′` epochs.
    pub fn m_step(
        &self,
        theta: ModelParams,
        p_t: &DiscreteDistribution,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ModelParams, Vec<EpochRecord>)> {
        let q = match &self.priors.q {
            Proposal::Posterior => p_t,
            Proposal::Fixed(q) => q,
        };
        importance_descent(
            theta,
            &MStepInputs {
                family: self.family,
                task: self.task,
                model: &self.config.model,
                schedule: self.config.schedule,
                p_t,
                p0: &self.priors.p0,
                q,
                negative_weight_clip: self.config.negative_weight_clip,
            },
            self.config.t_prime,
            rng,
        )
    }

    /// Task outputs of `Σ_λ p(λ)·Ψ(λ, x; θ)`.
    pub fn infer(&self, theta: &ModelParams, p: &DiscreteDistribution) -> Result<Tensor> {
        expected_outputs(theta, p, self.family, self.task, self.config.execution)
    }

    /// Runs one EM iteration in place.
    pub fn iterate(&self, state: &mut TrainState) -> Result<()> {
        let t = state.iteration + 1;
        let (p_t, cache) = self.e_step(&state.theta, &mut state.rng)?;
        let rho = if self.priors.p0.total_mass() > 0.0 {
            Some(rho_ratio(cache.losses(), self.config.chain.eta, &self.priors.p0)?)
        } else {
            None
        };
        let j = j_exact(cache.losses(), &p_t, &self.priors.p0)?;
        let support_gaps = match self.priors.q {
            Proposal::Posterior => (0..p_t.grid().len())
                .filter(|&i| p_t.mass(i) == 0.0 && self.priors.p0.mass(i) > 0.0)
                .count(),
            Proposal::Fixed(_) => 0,
        };
        if support_gaps > 0 {
            debug!("iteration {t}: q = p_t misses {support_gaps} points where p0 has mass");
        }
        let theta = std::mem::replace(&mut state.theta, ModelParams { layers: Vec::new(), head: None });
        let (theta, epochs) = self.m_step(theta, &p_t, &mut state.rng)?;
        let outputs = self.infer(&theta, &p_t)?;
        let train = evaluate(&outputs, self.task, Split::Train)?;
        let val = evaluate(&outputs, self.task, Split::Val)?;
        let test = evaluate(&outputs, self.task, Split::Test)?;
        info!(
            "iteration {t}: argmax λ = {}, train loss {:.6}, val {:.4}, test {:.4}",
            p_t.grid().format_point(p_t.argmax()),
            train.loss,
            val.primary(),
            test.primary()
        );
        let improves = match &state.best {
            None => true,
            Some(b) => is_better(self.task, val.primary(), b.val_metric),
        };
        if improves {
            state.best = Some(BestSnapshot {
                iteration: t,
                val_metric: val.primary(),
                theta: theta.clone(),
                p_t: p_t.clone(),
            });
        }
        state.history.push(IterationRecord {
            iteration: t,
            train_loss: train.loss,
            train,
            val,
            test,
            rho,
            j_exact: j,
            support_gaps,
            epochs,
        });
        state.theta = theta;
        state.p_t = Some(p_t);
        state.iteration = t;
        Ok(())
    }

    /// Iterates until `T` iterations are done, calling `on_iteration` after each.
    pub fn run<F>(&self, state: &mut TrainState, mut on_iteration: F) -> Result<()>
    where
        F: FnMut(&TrainState) -> Result<()>,
    {
        while state.iteration < self.config.iterations {
            self.iterate(state)?;
            on_iteration(state)?;
        }
        Ok(())
    }

    /// `start` followed by `run`.
    pub fn train(&self) -> Result<TrainState> {
        let mut state = self.start()?;
        self.run(&mut state, |_| Ok(()))?;
        Ok(state)
    }
}

/// Inputs of [`importance_descent`] that stay fixed across epochs.
pub struct MStepInputs<'a> {
    pub family: &'a GraphFamily,
    pub task: &'a TaskSpec,
    pub model: &'a ModelConfig,
    pub schedule: StepSchedule,
    pub p_t: &'a DiscreteDistribution,
    pub p0: &'a DiscreteDistribution,
    pub q: &'a DiscreteDistribution,
    pub negative_weight_clip: Option<f64>,
}

impl MStepInputs<'_> {
    /// `(p_t(λ) − p₀(λ)) / q(λ)`, with optional clipping of negative weights.
    pub fn weight(&self, index: usize) -> f64 {
        let w = (self.p_t.mass(index) - self.p0.mass(index)) / self.q.mass(index);
        match self.negative_weight_clip {
            Some(c) if w < -c => -c,
            _ => w,
        }
    }
}

/// Draws `λ_{t′} ∼ q` for `t′ = 1..=epochs` and steps along the weighted gradient.
pub fn importance_descent(
    theta: ModelParams,
    inputs: &MStepInputs<'_>,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    let mut theta = theta;
    let mut records = Vec::with_capacity(epochs);
    for t in 1..=epochs {
        let idx = inputs.q.sample(rng)?;
        let dropout_rng = (inputs.model.dropout > 0.0).then_some(&mut *rng);
        let (next, rec) = weighted_step(theta, idx, t, inputs, dropout_rng)?;
        theta = next;
        records.push(rec);
    }
    Ok((theta, records))
}

/// The M-step on a given sequence of grid indices.
pub fn descend_on_draws(
    mut theta: ModelParams,
    draws: &[usize],
    inputs: &MStepInputs<'_>,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    let mut records = Vec::with_capacity(draws.len());
    for (k, &idx) in draws.iter().enumerate() {
        let (next, rec) = weighted_step(theta, idx, k + 1, inputs, None)?;
        theta = next;
        records.push(rec);
    }
    Ok((theta, records))
}

fn weighted_step(
    mut theta: ModelParams,
    idx: usize,
    t: usize,
    inputs: &MStepInputs<'_>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(ModelParams, EpochRecord)> {
    if inputs.q.mass(idx) == 0.0 {
        return Err(Error::ZeroDensity);
    }
    let weight = inputs.weight(idx);
    let step = inputs.schedule.step(t);
    let lambda = inputs.family.grid().lambda(idx);
    let (loss, grad) = model::loss_and_grad(&theta, lambda, &inputs.family.batch(idx), inputs.task, inputs.model, rng)?;
    if weight != 0.0 {
        theta.axpy(-step * weight, &grad)?;
        if !theta.is_finite() {
            return Err(Error::NonFinite(format!("parameters after M-step epoch {t}")));
        }
    }
    Ok((
        theta,
        EpochRecord {
            lambda_index: idx,
            weight,
            step,
            loss,
        },
    ))
}

/// Plain gradient descent at a fixed λ; `lr(t)` gives the step of epoch `t ≥ 1`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_descent(
    mut params: ModelParams,
    lambda: f64,
    batch: &GraphBatch<'_>,
    task: &TaskSpec,
    model_config: &ModelConfig,
    epochs: usize,
    lr: impl Fn(usize) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, Vec<f64>)> {
    let mut losses = Vec::with_capacity(epochs);
    for t in 1..=epochs {
        let (l, g) = model::loss_and_grad(&params, lambda, batch, task, model_config, Some(&mut *rng)).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at epoch {t}; losses so far {losses:?}")),
            other => other,
        })?;
        losses.push(l);
        params.axpy(-lr(t), &g)?;
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("parameters diverged at epoch {t}; losses {losses:?}")));
        }
    }
    Ok((params, losses))
}

/// Outputs of the expectation predictor over the support of `p`.
pub fn expected_outputs(
    theta: &ModelParams,
    p: &DiscreteDistribution,
    family: &GraphFamily,
    task: &TaskSpec,
    exec: Execution,
) -> Result<Tensor> {
    let support = p.support();
    if support.is_empty() {
        return Err(Error::ZeroDensity);
    }
    let grid = family.grid();
    let parts = exec
        .map_slice(&support, |&i| model::forward(theta, grid.lambda(i), &family.batch(i)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut acc: Option<Vec<Tensor>> = None;
    for (&i, z) in support.iter().zip(parts) {
        let w = p.mass(i);
        match acc.as_mut() {
            None => acc = Some(z.into_iter().map(|t| t.scale(w)).collect()),
            Some(sum) => {
                for (s, t) in sum.iter_mut().zip(&z) {
                    s.axpy(w, t)?;
                }
            }
        }
    }
    model::outputs_from_embeddings(theta, &acc.expect("non-empty support"), task)
}

/// Result of [`train_plain`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlainRun {
    /// Validation-selected parameters.
    pub best: ModelParams,
    pub last: ModelParams,
    pub pretrain_losses: Vec<f64>,
    /// Per-epoch training losses after pretraining.
    pub losses: Vec<f64>,
    pub val_history: Vec<f64>,
}

/// Settings of a single-graph reference run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlainSchedule {
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub schedule: StepSchedule,
}

/// Ordinary GCN training on one graph with the layer weights evaluated at
/// `weight_lambda`. The step schedule restarts every round, mirroring the
/// M-step, and validation selection happens at the end of each round.
pub fn train_plain(
    params: ModelParams,
    weight_lambda: f64,
    batch: &GraphBatch<'_>,
    task: &TaskSpec,
    model_config: &ModelConfig,
    plan: &PlainSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<PlainRun> {
    let lr = plan.pretrain_lr;
    let (mut params, pretrain_losses) =
        gradient_descent(params, weight_lambda, batch, task, model_config, plan.pretrain_epochs, |_| lr, rng)?;
    let mut losses = Vec::new();
    let mut val_history = Vec::new();
    let mut best: Option<(f64, ModelParams)> = None;
    for _ in 0..plan.rounds {
        let (next, l) = gradient_descent(
            params,
            weight_lambda,
            batch,
            task,
            model_config,
            plan.epochs_per_round,
            |t| plan.schedule.step(t),
            rng,
        )?;
        params = next;
        losses.extend(l);
        let z = model::forward(&params, weight_lambda, batch)?;
        let out = model::outputs_from_embeddings(&params, &z, task)?;
        let v = evaluate(&out, task, Split::Val)?.primary();
        val_history.push(v);
        if best.as_ref().map_or(true, |(b, _)| is_better(task, v, *b)) {
            best = Some((v, params.clone()));
        }
    }
    if best.is_none() {
        warn!("plain training ran zero rounds; returning the pretrained parameters");
    }
    Ok(PlainRun {
        best: best.map_or_else(|| params.clone(), |(_, p)| p),
        last: params,
        pretrain_losses,
        losses,
        val_history,
    })
}
