use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use ppl_stability::bounds::{self, BoundInputs, TheoremId};
use ppl_stability::datasets::{LabelRule, SyntheticGenerator};
use ppl_stability::harness::{self, ExperimentConfig};
use ppl_stability::losses::{MixedLoss, PairwiseLoss, PointwiseLoss};
use ppl_stability::optim::{rrm_solve, sgd_run, RrmOptions, SgdConfig, StepSchedule};
use ppl_stability::risk::{empirical_mixed_risk, risk_report, Regularizer};
use ppl_stability::stability::{
    on_average_stability, uniform_stability_estimate, write_cells_csv, OnAverageOptions, RrmTrainer, SgdTrainer,
    StabilityEstimate, Trainer, UniformOptions,
};
use ppl_stability::{seed, Dataset};

#[derive(Parser)]
#[command(name = "ppl-stab", version, about = "Pointwise-and-pairwise learning: training, stability and bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset and write it as CSV.
    GenData(GenData),
    /// Empirical (and optionally population) risks of a model.
    Risk(RiskArgs),
    /// Projected SGD on the mixed loss.
    TrainSgd(TrainSgd),
    /// Regularized risk minimization.
    TrainRrm(TrainRrm),
    /// Estimate uniform and on-average stability.
    Stability(StabilityArgs),
    /// Evaluate a closed-form bound.
    Bounds(Box<BoundsArgs>),
    /// Run an experiment sweep.
    Sweep(SweepArgs),
    /// Summarize a sweep directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "linear-regression")]
    label_rule: String,
    #[arg(long)]
    out: PathBuf,
}

/// Training config file (TOML). Command-line flags take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    #[serde(default)]
    loss: LossSection,
    #[serde(default)]
    sgd: SgdSection,
    #[serde(default)]
    rrm: RrmSection,
    #[serde(default)]
    data: DataSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossSection {
    pointwise: String,
    pairwise: String,
    tau: Option<f64>,
    lambda3: Option<f64>,
    ball_radius: Option<f64>,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            pointwise: "squared".into(),
            pairwise: "squared-ranking".into(),
            tau: None,
            lambda3: None,
            ball_radius: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SgdSection {
    eta: Option<f64>,
    #[serde(rename = "T")]
    iterations: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RrmSection {
    sigma: Option<f64>,
    lambda2: Option<f64>,
    tol: Option<f64>,
    max_iters: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    dim: usize,
    noise_std: f64,
    seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dim: 5,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(TrainConfig::default()),
    }
}

fn build_loss(cfg: &TrainConfig, tau: Option<f64>, data: Option<&Dataset>) -> Result<MixedLoss> {
    let tau = tau.or(cfg.loss.tau).context("tau must be given by --tau or [loss] tau")?;
    let f: PointwiseLoss = cfg.loss.pointwise.parse()?;
    let g = PairwiseLoss::from_id(&cfg.loss.pairwise, cfg.loss.lambda3, data)?;
    Ok(MixedLoss::new(f, g, tau)?)
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Dataset::read_csv(f)?)
}

fn write_model(w: &[f64], out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string(w)? + "\n";
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Args)]
struct RiskArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON array of model parameters.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// Population sample size for a Monte Carlo estimate of the true risk,
    /// drawn from the `[data]` generator.
    #[arg(long)]
    n_pop: Option<usize>,
}

#[derive(Args)]
struct TrainSgd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long = "T")]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainRrm {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `rrm` or `sgd`.
    #[arg(long, default_value = "rrm")]
    algorithm: String,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    outer_resamples: usize,
    #[arg(long, default_value_t = 64)]
    pair_cap: usize,
    #[arg(long, default_value_t = 100)]
    probe_size: usize,
    #[arg(long, default_value_t = 10)]
    n_replacements: usize,
    #[arg(long, default_value_t = 3)]
    draws_per_index: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `stability.json` and `cells.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long, value_parser = theorem_ids())]
    theorem: String,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "M")]
    m: Option<f64>,
    #[arg(long = "L")]
    l: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n: Option<u64>,
    #[arg(long = "T")]
    t: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    emp_point: Option<f64>,
    #[arg(long)]
    emp_pair: Option<f64>,
    #[arg(long)]
    ind_i: Option<f64>,
    #[arg(long)]
    ind_j: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    v_point: Option<f64>,
    #[arg(long)]
    v_pair: Option<f64>,
    #[arg(long)]
    h1_point: Option<f64>,
    #[arg(long)]
    h1_pair: Option<f64>,
    #[arg(long)]
    mean_sq_drift: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

fn gen_data(a: GenData) -> Result<()> {
    let mut g = SyntheticGenerator::standard(a.dim, a.noise, a.seed);
    g.label_rule = a.label_rule.parse::<LabelRule>()?;
    let d = g.sample(a.n)?;
    let f = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    d.write_csv(f)?;
    Ok(())
}

fn generator(cfg: &TrainConfig) -> SyntheticGenerator {
    SyntheticGenerator::standard(cfg.data.dim, cfg.data.noise_std, cfg.data.seed)
}

fn risk(a: RiskArgs) -> Result<()> {
    let cfg = load_train_config(a.config.as_deref())?;
    let data = read_dataset(&a.data)?;
    let w: Vec<f64> = serde_json::from_str(&fs::read_to_string(&a.model)?)?;
    let loss = build_loss(&cfg, a.tau, Some(&data))?;
    let report = match a.n_pop {
        Some(n_pop) => risk_report(&data, &loss, &w, &generator(&cfg), n_pop, seed::derive(cfg.data.seed, &[seed::tag::POPULATION]))?,
        None => empirical_mixed_risk(&data, &loss, &w)?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn train_sgd(a: TrainSgd) -> Result<()> {
    let cfg = load_train_config(a.config.as_deref())?;
    let data = read_dataset(&a.data)?;
    let loss = build_loss(&cfg, a.tau, Some(&data))?;
    let eta = a.eta.or(cfg.sgd.eta).context("eta must be given by --eta or [sgd] eta")?;
    let iterations = a
        .iterations
        .or(cfg.sgd.iterations)
        .context("T must be given by --T or [sgd] T")?;
    let sgd = SgdConfig {
        iterations,
        schedule: StepSchedule::Constant { eta },
        projection_radius: cfg.loss.ball_radius,
        seed: a.seed.or(cfg.sgd.seed).unwrap_or(0),
        record_history: false,
    };
    let trace = sgd_run(&data, &loss, &sgd, &vec![0.0; data.dim()])?;
    write_model(&trace.w_final, a.out.as_deref())
}

fn rrm_trainer(cfg: &TrainConfig, loss: MixedLoss, sigma: Option<f64>, tol: Option<f64>) -> Result<RrmTrainer> {
    let sigma = sigma.or(cfg.rrm.sigma).context("sigma must be given by --sigma or [rrm] sigma")?;
    Ok(RrmTrainer {
        loss,
        regularizer: Regularizer::elastic(sigma, cfg.rrm.lambda2.unwrap_or(0.0)),
        options: RrmOptions {
            tol: tol.or(cfg.rrm.tol),
            max_iters: cfg.rrm.max_iters.unwrap_or(RrmOptions::default().max_iters),
            ball_radius: cfg.loss.ball_radius,
            ..RrmOptions::default()
        },
    })
}

fn train_rrm(a: TrainRrm) -> Result<()> {
    let cfg = load_train_config(a.config.as_deref())?;
    let data = read_dataset(&a.data)?;
    let loss = build_loss(&cfg, a.tau, Some(&data))?;
    let t = rrm_trainer(&cfg, loss, a.sigma, a.tol)?;
    let sol = rrm_solve(&data, &t.loss, &t.regularizer, &t.options)?;
    eprintln!(
        "converged in {} iterations, residual {:e}, objective {}",
        sol.iterations, sol.residual, sol.objective
    );
    write_model(&sol.w, a.out.as_deref())
}

fn stability(a: StabilityArgs) -> Result<()> {
    let cfg = load_train_config(a.config.as_deref())?;
    let gen = generator(&cfg);
    let pilot = gen.sample(a.n)?;
    let loss = build_loss(&cfg, a.tau, Some(&pilot))?;
    let trainer: Box<dyn Trainer> = match a.algorithm.as_str() {
        "rrm" => Box::new(rrm_trainer(&cfg, loss, None, None)?),
        "sgd" => Box::new(SgdTrainer {
            loss,
            config: SgdConfig {
                iterations: cfg.sgd.iterations.context("[sgd] T is required")?,
                schedule: StepSchedule::Constant {
                    eta: cfg.sgd.eta.context("[sgd] eta is required")?,
                },
                projection_radius: cfg.loss.ball_radius,
                seed: cfg.sgd.seed.unwrap_or(0),
                record_history: false,
            },
            w0: vec![0.0; gen.dim()],
        }),
        other => bail!("unknown algorithm {other:?}, expected rrm or sgd"),
    };
    let probe = gen.sample_with_seed(a.probe_size, seed::derive(a.seed, &[seed::tag::PROBE]))?;
    let uni = uniform_stability_estimate(
        trainer.as_ref(),
        &pilot,
        &loss,
        &gen,
        &probe,
        &UniformOptions {
            n_replacements: a.n_replacements,
            draws_per_index: a.draws_per_index,
            record_cells: true,
        },
        a.seed,
    )?;
    let avg = on_average_stability(
        trainer.as_ref(),
        &gen,
        &loss,
        a.n,
        &OnAverageOptions {
            outer_resamples: a.outer_resamples,
            pair_cap: a.pair_cap,
            record_cells: true,
            ..OnAverageOptions::default()
        },
        a.seed,
    )?;
    let est = StabilityEstimate::combine(Some(&uni), &avg);
    fs::create_dir_all(&a.out)?;
    let json = serde_json::to_string_pretty(&est)? + "\n";
    fs::write(a.out.join("stability.json"), &json)?;
    let mut cells = uni.cells;
    cells.extend(avg.cells);
    write_cells_csv(&cells, fs::File::create(a.out.join("cells.csv"))?)?;
    print!("{json}");
    Ok(())
}

fn theorem_ids() -> clap::builder::PossibleValuesParser {
    clap::builder::PossibleValuesParser::new(TheoremId::ALL.map(|t| t.id()))
}

fn bounds_cmd(a: BoundsArgs) -> Result<()> {
    let theorem: TheoremId = a.theorem.parse()?;
    let inputs = BoundInputs {
        gamma: a.gamma,
        m: a.m,
        l: a.l,
        beta: a.beta,
        sigma: a.sigma,
        tau: a.tau,
        n: a.n,
        t: a.t,
        eta: a.eta,
        delta: a.delta,
        b: a.b,
        theta: a.theta,
        epsilon: a.epsilon,
        emp_point: a.emp_point,
        emp_pair: a.emp_pair,
        ind_i: a.ind_i,
        ind_j: a.ind_j,
        mu: a.mu,
        v_point: a.v_point,
        v_pair: a.v_pair,
        h1_point: a.h1_point,
        h1_pair: a.h1_pair,
        mean_sq_drift: a.mean_sq_drift,
    };
    let v = bounds::evaluate(theorem, &inputs)?;
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<bool> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let cfg = ExperimentConfig::from_json(&text)?;
    let rows = harness::run_sweep(&cfg, Some(&a.out))?;
    let report = harness::make_report(&rows, &cfg)?;
    eprintln!("{} rows written to {}", rows.len(), a.out.join(harness::SWEEP_FILE).display());
    Ok(report.all_pass)
}

fn report(a: ReportArgs) -> Result<bool> {
    let r = harness::report_dir(&a.input)?;
    print!("{}", r.text);
    Ok(r.all_pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Risk(a) => risk(a).map(|_| true),
        Command::TrainSgd(a) => train_sgd(a).map(|_| true),
        Command::TrainRrm(a) => train_rrm(a).map(|_| true),
        Command::Stability(a) => stability(a).map(|_| true),
        Command::Bounds(a) => bounds_cmd(*a).map(|_| true),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
