use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use emgraph::diagnostics::{gap_csv, log_log_slope, rho_csv, rho_ratio, stability_probe, ProbeFixture, StabilityProbeConfig};
use emgraph::em::{Proposal, SplitMetrics, TrainState, Trainer, Variant};
use emgraph::factory::GraphFamily;
use emgraph::io::checkpoint;
use emgraph::io::config::{DatasetConfig, RunConfig};
use emgraph::io::synthetic::{gen_synthetic, write_synthetic, SyntheticSpec};
use emgraph::io::{metrics_csv, write_file};
use emgraph::model::Split;
use emgraph::par::init_thread_pool_from_env;
use emgraph::{Error, ErrorCategory, Result};

#[derive(Parser, Debug)]
#[command(name = "emgraph", version, about = "EM training of GNNs over parametrized graph families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain on the observed graph and save the starting checkpoint.
    Pretrain(RunArgs),
    /// Run EM, writing checkpoints, metrics and distribution tables.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint instead of pretraining.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on train, validation and test splits.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate the validation-selected snapshot instead of the last state.
        #[arg(long)]
        best: bool,
    },
    /// Emit the ϱ table and the stability gap table for a checkpoint.
    Diagnose {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated T′ values of the stability probe.
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 16, 64, 256])]
        t_primes: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        seed_pairs: usize,
    },
    /// Generate a synthetic dataset with a planted λ*.
    GenData {
        /// Take the synthetic spec and seed from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda_star: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the distribution table `lambda<TAB>mass` stored in a checkpoint.
    ExportDist {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Export the best snapshot's distribution.
        #[arg(long)]
        best: bool,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long = "T")]
    iterations: Option<usize>,
    #[arg(long = "T-prime")]
    t_prime: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let mut config = RunConfig::load(&self.config)?;
        let train = &mut config.train;
        if let Some(s) = self.seed {
            train.seed = s;
        }
        if let Some(v) = self.variant {
            train.variant = v;
        }
        if let Some(e) = self.eta {
            train.chain.eta = e;
        }
        if let Some(t) = self.iterations {
            train.iterations = t;
        }
        if let Some(t) = self.t_prime {
            train.t_prime = t;
        }
        if let Some(o) = &self.out {
            config.output = Some(o.clone());
        }
        config.validate()?;
        let out = config
            .output
            .clone()
            .ok_or_else(|| Error::Config("no output directory: set `output` or pass --out".into()))?;
        Ok((config, out))
    }
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = init_thread_pool_from_env() {
        info!("worker pool capped at {n} threads");
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("{category}: {e}");
            ExitCode::from(exit_code(category))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain(args) => pretrain(&args),
        Command::Train { run, resume } => train(&run, resume.as_deref()),
        Command::Eval { run, checkpoint, best } => eval(&run, &checkpoint, best),
        Command::Diagnose {
            run,
            checkpoint,
            t_primes,
            seed_pairs,
        } => diagnose(&run, &checkpoint, t_primes, seed_pairs),
        Command::GenData {
            config,
            seed,
            lambda_star,
            out,
        } => gen_data(config.as_deref(), seed, lambda_star, &out),
        Command::ExportDist { checkpoint, best, out } => export_dist(&checkpoint, best, out.as_deref()),
    }
}

fn snapshot(config: &RunConfig, out: &Path) -> Result<()> {
    write_file(&out.join("config.toml"), &config.to_toml()?)
}

fn pretrain(args: &RunArgs) -> Result<()> {
    let (config, out) = args.load()?;
    let (family, data) = config.build_family()?;
    let trainer = Trainer::new(&config.train, &family, &data.task)?;
    let state = trainer.start()?;
    snapshot(&config, &out)?;
    let mut csv = String::from("epoch,train_loss\n");
    for (i, l) in state.pretrain_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l:.10}\n", i + 1));
    }
    write_file(&out.join("pretrain.csv"), &csv)?;
    let path = out.join("checkpoints").join("pretrain.json");
    checkpoint::save(&path, &state, family.grid())?;
    info!("pretrained for {} epochs; checkpoint at {}", state.pretrain_losses.len(), path.display());
    Ok(())
}

fn write_iteration(out: &Path, state: &TrainState, family: &GraphFamily) -> Result<()> {
    let t = state.iteration;
    checkpoint::save(&out.join("checkpoints").join(format!("iter_{t:03}.json")), state, family.grid())?;
    if let Some(p) = &state.p_t {
        write_file(&out.join("dist").join(format!("p_t_{t}.tsv")), &p.to_table())?;
    }
    write_file(&out.join("metrics.csv"), &metrics_csv(&state.history))?;
    write_file(&out.join("rho.csv"), &rho_csv(&state.history))
}

fn train(args: &RunArgs, resume: Option<&Path>) -> Result<()> {
    let (config, out) = args.load()?;
    let (family, data) = config.build_family()?;
    let trainer = Trainer::new(&config.train, &family, &data.task)?;
    let mut state = match resume {
        Some(path) => checkpoint::load(path)?.restore(family.grid())?,
        None => trainer.start()?,
    };
    snapshot(&config, &out)?;
    if let Some(meta) = &data.synthetic {
        write_file(&out.join("planted.txt"), &format!("lambda_star\t{}\n", meta.lambda_star))?;
    }
    trainer.run(&mut state, |s| write_iteration(&out, s, &family))?;
    checkpoint::save(&out.join("checkpoints").join("last.json"), &state, family.grid())?;
    if let Some(last) = state.history.last() {
        write_file(&out.join("final_eval.csv"), &eval_csv(&[("train", &last.train), ("val", &last.val), ("test", &last.test)]))?;
        info!("final test metric {:.6}", last.test.primary());
    }
    if let Some(p) = &state.p_t {
        info!("argmax of p_T: {}", family.grid().format_point(p.argmax()));
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.10}"))
}

fn eval_csv(rows: &[(&str, &SplitMetrics)]) -> String {
    let mut out = String::from("split,loss,micro_f1,macro_f1,rmse\n");
    for (name, m) in rows {
        out.push_str(&format!(
            "{name},{:.10},{},{},{}\n",
            m.loss,
            opt(m.micro_f1),
            opt(m.macro_f1),
            opt(m.rmse)
        ));
    }
    out
}

fn eval(args: &RunArgs, path: &Path, best: bool) -> Result<()> {
    let (config, out) = args.load()?;
    let (family, data) = config.build_family()?;
    let trainer = Trainer::new(&config.train, &family, &data.task)?;
    let state = checkpoint::load(path)?.restore(family.grid())?;
    let (theta, p) = if best {
        let b = state
            .best
            .as_ref()
            .ok_or_else(|| Error::Data("checkpoint has no best snapshot".into()))?;
        (&b.theta, &b.p_t)
    } else {
        let p = state
            .p_t
            .as_ref()
            .ok_or_else(|| Error::Data("checkpoint has no posterior yet; run at least one EM iteration".into()))?;
        (&state.theta, p)
    };
    let outputs = trainer.infer(theta, p)?;
    let m = [Split::Train, Split::Val, Split::Test].map(|s| emgraph::em::evaluate(&outputs, &data.task, s));
    let [train, val, test] = m;
    let (train, val, test) = (train?, val?, test?);
    let csv = eval_csv(&[("train", &train), ("val", &val), ("test", &test)]);
    write_file(&out.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn diagnose(args: &RunArgs, path: &Path, t_primes: Vec<usize>, seed_pairs: usize) -> Result<()> {
    let (config, out) = args.load()?;
    let (family, data) = config.build_family()?;
    let trainer = Trainer::new(&config.train, &family, &data.task)?;
    let state = checkpoint::load(path)?.restore(family.grid())?;
    let p_t = state
        .p_t
        .clone()
        .ok_or_else(|| Error::Data("checkpoint has no posterior yet; run at least one EM iteration".into()))?;
    let dir = out.join("diagnostics");

    let mut rho = rho_csv(&state.history);
    let priors = trainer.priors();
    if priors.p0.total_mass() > 0.0 {
        let cache = trainer.loss_cache(&state.theta)?;
        let r = rho_ratio(cache.losses(), config.train.chain.eta, &priors.p0)?;
        rho.push_str(&format!(
            "current,{:.10},{:.10},{}\n",
            r.rho,
            r.denominator,
            opt(r.ratio)
        ));
    }
    write_file(&dir.join("rho.csv"), &rho)?;
    print!("{rho}");

    let fixture = ProbeFixture {
        family: family.clone(),
        task: data.task.clone(),
        theta0: state.theta.clone(),
        q: match &priors.q {
            Proposal::Posterior => p_t.clone(),
            Proposal::Fixed(q) => q.clone(),
        },
        p_t,
        p0: priors.p0.clone(),
        model: config.train.model,
        schedule: config.train.schedule,
    };
    let probe = StabilityProbeConfig {
        t_primes,
        seed_pairs,
        seed: config.train.seed,
        execution: config.train.execution,
    };
    let rows = stability_probe(&probe, &fixture)?;
    let gap = gap_csv(&rows);
    write_file(&dir.join("gap.csv"), &gap)?;
    print!("{gap}");
    info!("log-log slope of the mean gap: {:.4}", log_log_slope(&rows));
    Ok(())
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, lambda_star: Option<f64>, out: &Path) -> Result<()> {
    let (mut spec, mut base_seed) = (SyntheticSpec::default(), 0);
    if let Some(path) = config {
        match RunConfig::load(path)?.dataset {
            DatasetConfig::Synthetic { seed, spec: s } => {
                spec = s;
                base_seed = seed;
            }
            _ => return Err(Error::Config("gen-data needs a synthetic dataset config".into())),
        }
    }
    if let Some(l) = lambda_star {
        spec.lambda_star = l;
    }
    let data = gen_synthetic(&spec, seed.unwrap_or(base_seed))?;
    write_synthetic(out, &data)?;
    info!(
        "wrote {} nodes with planted λ* = {} (seed {}) to {}",
        spec.num_nodes,
        data.meta.lambda_star,
        data.meta.seed,
        out.display()
    );
    Ok(())
}

fn export_dist(path: &Path, best: bool, out: Option<&Path>) -> Result<()> {
    let ckpt = checkpoint::load(path)?;
    let grid = std::sync::Arc::new(ckpt.grid.build()?);
    let state = ckpt.restore(&grid)?;
    let p = if best {
        state.best.map(|b| b.p_t)
    } else {
        state.p_t
    }
    .ok_or_else(|| Error::Data("checkpoint holds no distribution".into()))?;
    match out {
        Some(o) => write_file(o, &p.to_table()),
        None => {
            print!("{}", p.to_table());
            Ok(())
        }
    }
}
