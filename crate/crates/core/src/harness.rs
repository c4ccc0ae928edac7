//! Seeded experiment sweeps comparing measured quantities with the bounds,
//! log-log slope fits and report generation.
//!
//! A sweep config is a list of blocks. Each block fixes an algorithm and a
//! loss pair and spans a grid over `n`, `tau`, `sigma`, `eta` and `T`; every
//! grid point is a cell and every cell runs `trials` independent trials,
//! producing one [`SweepRow`] each. Cell seeds are derived from the master
//! seed and the global cell index, so results do not depend on thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bounds::{self, estimate_b_theta, estimate_m};
use crate::datasets::{SampleSource, SyntheticGenerator};
use crate::error::{Error, Result};
use crate::linalg::{dist2, mean_and_se};
use crate::losses::{DataBounds, LossConstants, MixedLoss, PairwiseLoss, PointwiseLoss};
use crate::optim::{reference_solution, RrmOptions, SgdConfig, StepSchedule};
use crate::risk::{empirical_mixed_risk, population_risk_mc, Regularizer};
use crate::seed::{self, tag};
use crate::stability::{
    coupled_drift_check, on_average_stability, uniform_stability_estimate, OnAverageOptions, RrmTrainer,
    SgdTrainer, Trainer, UniformOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Rrm,
    Sgd,
}

impl Algorithm {
    pub fn id(&self) -> &'static str {
        match self {
            Algorithm::Rrm => "rrm",
            Algorithm::Sgd => "sgd",
        }
    }
}

/// Comparisons a block can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Eqstab,
    Lemma1,
    Lemma2,
    Lemma3,
    Thm1,
    Thm4,
    Thm5,
    Cor2,
    Thm6,
    Thm7,
    Lemma4,
}

impl Check {
    pub const ALL: [Check; 11] = [
        Check::Eqstab,
        Check::Lemma1,
        Check::Lemma2,
        Check::Lemma3,
        Check::Thm1,
        Check::Thm4,
        Check::Thm5,
        Check::Cor2,
        Check::Thm6,
        Check::Thm7,
        Check::Lemma4,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Check::Eqstab => "eqstab",
            Check::Lemma1 => "lemma1",
            Check::Lemma2 => "lemma2",
            Check::Lemma3 => "lemma3",
            Check::Thm1 => "thm1",
            Check::Thm4 => "thm4",
            Check::Thm5 => "thm5",
            Check::Cor2 => "cor2",
            Check::Thm6 => "thm6",
            Check::Thm7 => "thm7",
            Check::Lemma4 => "lemma4",
        }
    }

    fn rrm_only(&self) -> bool {
        matches!(
            self,
            Check::Lemma1 | Check::Lemma2 | Check::Lemma3 | Check::Thm1 | Check::Thm4 | Check::Thm7
        )
    }

    fn on_average(&self) -> bool {
        matches!(self, Check::Thm5 | Check::Cor2 | Check::Thm6 | Check::Thm7 | Check::Lemma4)
    }
}

/// Fit `log y` against `log x` within each group of cells that share all
/// other grid values, and require the slope to fall in `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeCheck {
    pub x: String,
    pub y: String,
    pub min: f64,
    pub max: f64,
}

fn d_dim() -> usize {
    5
}
fn d_noise() -> f64 {
    0.1
}
fn d_ball() -> f64 {
    2.0
}
fn d_one() -> usize {
    1
}
fn d_probe() -> usize {
    100
}
fn d_repl() -> usize {
    10
}
fn d_draws() -> usize {
    3
}
fn d_outer() -> usize {
    50
}
fn d_pair_cap() -> usize {
    64
}
fn d_pop_onavg() -> usize {
    2000
}
fn d_pop() -> usize {
    20_000
}
fn d_ref() -> usize {
    100_000
}
fn d_m_resamples() -> usize {
    10
}
fn d_m_probe() -> usize {
    50
}
fn d_bt() -> usize {
    2000
}
fn d_eps() -> f64 {
    1.0
}
fn d_tol() -> f64 {
    1e-9
}
fn d_iters() -> usize {
    100_000
}
fn d_delta() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub algorithm: Algorithm,
    pub pointwise: PointwiseLoss,
    /// `squared-ranking`, `hinge-ranking` or `link-constraint`.
    pub pairwise: String,
    #[serde(default)]
    pub lambda3: Option<f64>,
    pub n: Vec<usize>,
    pub tau: Vec<f64>,
    /// Ridge strengths (RRM).
    #[serde(default)]
    pub sigma: Vec<f64>,
    /// Constant step sizes (SGD).
    #[serde(default)]
    pub eta: Vec<f64>,
    /// Iteration counts (SGD).
    #[serde(default, rename = "T")]
    pub iterations: Vec<usize>,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_noise")]
    pub noise_std: f64,
    #[serde(default = "d_ball")]
    pub ball_radius: f64,
    #[serde(default = "d_one")]
    pub trials: usize,
    pub checks: Vec<Check>,
    #[serde(default = "d_probe")]
    pub probe_size: usize,
    #[serde(default = "d_repl")]
    pub n_replacements: usize,
    #[serde(default = "d_draws")]
    pub draws_per_index: usize,
    #[serde(default = "d_outer")]
    pub outer_resamples: usize,
    #[serde(default = "d_pair_cap")]
    pub pair_cap: usize,
    #[serde(default)]
    pub index_cap: Option<usize>,
    /// Population sample per on-average resample.
    #[serde(default = "d_pop_onavg")]
    pub population_size: usize,
    /// Population sample for the risk of a single trained model.
    #[serde(default = "d_pop")]
    pub n_pop: usize,
    #[serde(default = "d_ref")]
    pub n_ref: usize,
    #[serde(default = "d_m_resamples")]
    pub m_resamples: usize,
    #[serde(default = "d_m_probe")]
    pub m_probe: usize,
    #[serde(default = "d_bt")]
    pub b_theta_sample: usize,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default = "d_tol")]
    pub rrm_tol: f64,
    #[serde(default = "d_iters")]
    pub rrm_max_iters: usize,
    #[serde(default)]
    pub slope_checks: Vec<SlopeCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    #[serde(default = "d_delta")]
    pub delta: f64,
    pub blocks: Vec<Block>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |b: &Block, msg: String| Err(Error::InvalidConfig(format!("block {:?}: {msg}", b.name)));
        if !(self.delta > 0.0 && self.delta <= (-1.0f64).exp()) {
            return Err(Error::InvalidConfig(format!("delta must lie in (0, 1/e], got {}", self.delta)));
        }
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("no blocks".into()));
        }
        for b in &self.blocks {
            if b.n.is_empty() || b.tau.is_empty() || b.checks.is_empty() {
                return bad(b, "n, tau and checks must be nonempty".into());
            }
            if b.n.iter().any(|&n| n < 2) {
                return bad(b, "every n must be at least 2".into());
            }
            if b.tau.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return bad(b, "tau must lie in [0, 1]".into());
            }
            if b.trials == 0 || b.dim == 0 {
                return bad(b, "trials and dim must be positive".into());
            }
            if !(b.ball_radius > 0.0 && b.noise_std >= 0.0 && b.epsilon > 0.0 && b.rrm_tol > 0.0) {
                return bad(b, "ball_radius, epsilon, rrm_tol must be positive and noise_std nonnegative".into());
            }
            match b.algorithm {
                Algorithm::Rrm => {
                    if b.sigma.is_empty() || b.sigma.iter().any(|s| s.is_nan() || *s <= 0.0) {
                        return bad(b, "RRM needs positive sigma values".into());
                    }
                }
                Algorithm::Sgd => {
                    if b.eta.is_empty() || b.iterations.is_empty() || b.eta.iter().any(|e| e.is_nan() || *e <= 0.0) {
                        return bad(b, "SGD needs positive eta values and T values".into());
                    }
                    if let Some(c) = b.checks.iter().find(|c| c.rrm_only()) {
                        return bad(b, format!("check {} applies to RRM only", c.id()));
                    }
                }
            }
            if b.pairwise == "link-constraint" && b.lambda3.is_none() {
                return bad(b, "link-constraint needs lambda3".into());
            }
            for s in &b.slope_checks {
                if !(GRID_KEYS.contains(&s.x.as_str())) {
                    return bad(b, format!("slope x must be a grid key, got {:?}", s.x));
                }
                if s.min > s.max {
                    return bad(b, "slope range is empty".into());
                }
            }
        }
        Ok(())
    }

    /// Cells in sweep order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            let sig: Vec<Option<f64>> = opt_axis(&b.sigma, b.algorithm == Algorithm::Rrm);
            let eta: Vec<Option<f64>> = opt_axis(&b.eta, b.algorithm == Algorithm::Sgd);
            let its: Vec<Option<usize>> = if b.algorithm == Algorithm::Sgd {
                b.iterations.iter().map(|&t| Some(t)).collect()
            } else {
                vec![None]
            };
            for &n in &b.n {
                for &tau in &b.tau {
                    for &sigma in &sig {
                        for &e in &eta {
                            for &t in &its {
                                let index = out.len();
                                out.push(Cell {
                                    block: bi,
                                    index,
                                    n,
                                    tau,
                                    sigma,
                                    eta: e,
                                    iterations: t,
                                    seed: seed::derive(self.master_seed, &[tag::CELL, index as u64]),
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn opt_axis(v: &[f64], used: bool) -> Vec<Option<f64>> {
    if used {
        v.iter().map(|&x| Some(x)).collect()
    } else {
        vec![None]
    }
}

const GRID_KEYS: [&str; 5] = ["n", "tau", "sigma", "eta", "T"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub block: usize,
    pub index: usize,
    pub n: usize,
    pub tau: f64,
    pub sigma: Option<f64>,
    pub eta: Option<f64>,
    pub iterations: Option<usize>,
    pub seed: u64,
}

/// One trial of one cell. Measured quantities, bound values and holds
/// flags are empty when the block did not request the corresponding check.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepRow {
    pub block: String,
    pub cell: usize,
    pub trial: usize,
    pub algorithm: String,
    pub pointwise: String,
    pub pairwise: String,
    pub n: usize,
    pub d: usize,
    pub tau: f64,
    pub sigma: Option<f64>,
    pub eta: Option<f64>,
    #[serde(rename = "T")]
    pub iterations: Option<usize>,
    pub noise_std: f64,
    pub delta: f64,
    pub seed: u64,
    #[serde(rename = "L")]
    pub lipschitz: Option<f64>,
    pub beta: Option<f64>,
    pub r_emp: Option<f64>,
    pub r_pop: Option<f64>,
    pub gap: Option<f64>,
    pub u_point: Option<f64>,
    pub u_pair: Option<f64>,
    pub v_point: Option<f64>,
    pub v_pair: Option<f64>,
    pub h1_point: Option<f64>,
    pub h1_pair: Option<f64>,
    pub h2: Option<f64>,
    pub gap_mean: Option<f64>,
    pub gap_se: Option<f64>,
    pub emp_point_mean: Option<f64>,
    pub emp_pair_mean: Option<f64>,
    pub thm5_se: Option<f64>,
    pub cor2_se: Option<f64>,
    pub dist_sq: Option<f64>,
    pub dist_sq_se: Option<f64>,
    pub ref_gap: Option<f64>,
    pub drift: Option<f64>,
    pub m_hat: Option<f64>,
    pub b_hat: Option<f64>,
    pub theta_hat: Option<f64>,
    pub eqstab: Option<f64>,
    pub thm2hp: Option<f64>,
    pub lemma1: Option<f64>,
    pub lemma1_slack: Option<f64>,
    pub lemma2: Option<f64>,
    pub lemma3: Option<f64>,
    pub thm1: Option<f64>,
    pub thm4: Option<f64>,
    pub thm5: Option<f64>,
    pub cor2: Option<f64>,
    pub thm6: Option<f64>,
    pub thm7: Option<f64>,
    pub thm7_precondition: Option<bool>,
    pub lemma4: Option<f64>,
    pub holds_eqstab: Option<bool>,
    pub holds_lemma1: Option<bool>,
    pub holds_lemma2: Option<bool>,
    pub holds_lemma3: Option<bool>,
    pub holds_thm1: Option<bool>,
    pub holds_thm4: Option<bool>,
    pub holds_thm5: Option<bool>,
    pub holds_cor2: Option<bool>,
    pub holds_thm6: Option<bool>,
    pub holds_thm7: Option<bool>,
    pub holds_lemma4: Option<bool>,
    pub error: Option<String>,
}

fn le(a: Option<f64>, b: Option<f64>, slack: Option<f64>) -> Option<bool> {
    Some(a? <= b? + slack.unwrap_or(0.0))
}

fn three(se: Option<f64>) -> Option<f64> {
    se.map(|s| 3.0 * s)
}

impl SweepRow {
    pub fn u_max(&self) -> Option<f64> {
        Some(self.u_point?.max(self.u_pair?))
    }

    /// Holds flags as implied by the stored numbers, in [`Check::ALL`] order.
    pub fn recompute_holds(&self) -> [Option<bool>; 11] {
        [
            le(self.drift, self.eqstab, None),
            le(self.u_max(), self.lemma1, self.lemma1_slack),
            le(self.dist_sq, self.lemma2, three(self.dist_sq_se)),
            le(self.ref_gap, self.lemma3, None),
            le(self.gap, self.thm1, None),
            le(self.gap, self.thm4, None),
            le(self.gap_mean, self.thm5, three(self.thm5_se)),
            le(self.gap_mean, self.cor2, three(self.cor2_se)),
            le(self.gap_mean, self.thm6, three(self.gap_se)),
            match self.thm7_precondition {
                Some(false) => Some(true),
                _ => le(self.gap_mean, self.thm7, three(self.gap_se)),
            },
            le(self.gap_mean, self.lemma4, three(self.gap_se)),
        ]
    }

    pub fn stored_holds(&self) -> [Option<bool>; 11] {
        [
            self.holds_eqstab,
            self.holds_lemma1,
            self.holds_lemma2,
            self.holds_lemma3,
            self.holds_thm1,
            self.holds_thm4,
            self.holds_thm5,
            self.holds_cor2,
            self.holds_thm6,
            self.holds_thm7,
            self.holds_lemma4,
        ]
    }

    fn set_holds(&mut self) {
        let h = self.recompute_holds();
        self.holds_eqstab = h[0];
        self.holds_lemma1 = h[1];
        self.holds_lemma2 = h[2];
        self.holds_lemma3 = h[3];
        self.holds_thm1 = h[4];
        self.holds_thm4 = h[5];
        self.holds_thm5 = h[6];
        self.holds_cor2 = h[7];
        self.holds_thm6 = h[8];
        self.holds_thm7 = h[9];
        self.holds_lemma4 = h[10];
    }

    pub fn holds_consistent(&self) -> bool {
        self.recompute_holds() == self.stored_holds()
    }

    /// A grid value or measured column by name, for slope fits.
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "n" => self.n as f64,
            "tau" => self.tau,
            "sigma" => self.sigma?,
            "eta" => self.eta?,
            "T" => self.iterations? as f64,
            "u_max" => self.u_max()?,
            "u_point" => self.u_point?,
            "u_pair" => self.u_pair?,
            "v_point" => self.v_point?,
            "v_pair" => self.v_pair?,
            "h1_point" => self.h1_point?,
            "h1_pair" => self.h1_pair?,
            "h2" => self.h2?,
            "gap" => self.gap?,
            "gap_mean" => self.gap_mean?,
            "dist_sq" => self.dist_sq?,
            "drift" => self.drift?,
            "eqstab" => self.eqstab?,
            "thm2hp" => self.thm2hp?,
            "lemma1" => self.lemma1?,
            "lemma2" => self.lemma2?,
            "lemma3" => self.lemma3?,
            "thm1" => self.thm1?,
            "thm4" => self.thm4?,
            "thm5" => self.thm5?,
            "cor2" => self.cor2?,
            "thm6" => self.thm6?,
            "thm7" => self.thm7?,
            "lemma4" => self.lemma4?,
            _ => return None,
        })
    }

    /// `(measured, bound)` pairs for each evaluated check.
    fn comparisons(&self) -> Vec<(Check, f64, f64)> {
        let pairs = [
            (Check::Eqstab, self.drift, self.eqstab),
            (Check::Lemma1, self.u_max(), self.lemma1),
            (Check::Lemma2, self.dist_sq, self.lemma2),
            (Check::Lemma3, self.ref_gap, self.lemma3),
            (Check::Thm1, self.gap, self.thm1),
            (Check::Thm4, self.gap, self.thm4),
            (Check::Thm5, self.gap_mean, self.thm5),
            (Check::Cor2, self.gap_mean, self.cor2),
            (Check::Thm6, self.gap_mean, self.thm6),
            (Check::Thm7, self.gap_mean, self.thm7),
            (Check::Lemma4, self.gap_mean, self.lemma4),
        ];
        pairs
            .into_iter()
            .filter_map(|(c, a, b)| Some((c, a?, b?)))
            .collect()
    }
}

pub fn write_rows_csv<W: std::io::Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv<R: std::io::Read>(reader: R) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

struct CellContext {
    gen: SyntheticGenerator,
    loss: MixedLoss,
    consts: LossConstants,
    w_star: Option<Vec<f64>>,
    ref_pop: Option<f64>,
    b_theta: Option<bounds::RangeVariance>,
    m_hat: Option<f64>,
}

fn block_loss(b: &Block, tau: f64, gen: &SyntheticGenerator, n: usize, seed_value: u64) -> Result<MixedLoss> {
    let pairwise = if b.pairwise == "link-constraint" {
        let pilot = gen.draw(n.max(2), seed::derive(seed_value, &[tag::PROBE]))?;
        PairwiseLoss::from_id(&b.pairwise, b.lambda3, Some(&pilot))?
    } else {
        PairwiseLoss::from_id(&b.pairwise, None, None)?
    };
    MixedLoss::new(b.pointwise, pairwise, tau)
}

fn rrm_trainer(b: &Block, loss: MixedLoss, sigma: f64) -> RrmTrainer {
    RrmTrainer {
        loss,
        regularizer: Regularizer::l2(sigma),
        options: RrmOptions {
            tol: Some(b.rrm_tol),
            max_iters: b.rrm_max_iters,
            ball_radius: Some(b.ball_radius),
            ..RrmOptions::default()
        },
    }
}

fn sgd_config(b: &Block, cell: &Cell, seed_value: u64) -> SgdConfig {
    SgdConfig {
        iterations: cell.iterations.unwrap_or(0),
        schedule: StepSchedule::Constant {
            eta: cell.eta.unwrap_or(0.0),
        },
        projection_radius: Some(b.ball_radius),
        seed: seed::derive(seed_value, &[tag::ALGORITHM]),
        record_history: false,
    }
}

fn cell_context(b: &Block, cell: &Cell) -> Result<CellContext> {
    let gen = SyntheticGenerator::standard(b.dim, b.noise_std, seed::derive(cell.seed, &[tag::DATA]));
    gen.validate()?;
    let loss = block_loss(b, cell.tau, &gen, cell.n, cell.seed)?;
    let consts = loss.constants_on_ball(DataBounds {
        ball_radius: b.ball_radius,
        x_max: gen.feature_bound,
        y_max: gen.label_bound(),
    })?;
    let mut ctx = CellContext {
        gen,
        loss,
        consts,
        w_star: None,
        ref_pop: None,
        b_theta: None,
        m_hat: None,
    };
    let has = |c: Check| b.checks.contains(&c);
    if b.algorithm == Algorithm::Rrm {
        let sigma = cell.sigma.unwrap_or(0.0);
        let reg = Regularizer::l2(sigma);
        if has(Check::Lemma2) || has(Check::Lemma3) || has(Check::Thm4) {
            let r = reference_solution(&ctx.gen, &ctx.loss, &reg, b.n_ref, Some(b.ball_radius), cell.seed)?;
            let sample = ctx.gen.draw(b.b_theta_sample, seed::derive(cell.seed, &[tag::REFERENCE, 1]))?;
            ctx.b_theta = Some(estimate_b_theta(&r.w_star, &ctx.loss, &sample)?);
            let pop = population_risk_mc(&ctx.gen, &ctx.loss, &r.w_star, b.n_pop, seed::derive(cell.seed, &[tag::POPULATION]))?;
            ctx.ref_pop = Some(pop.estimate);
            ctx.w_star = Some(r.w_star);
        }
        if has(Check::Thm1) {
            let trainer = rrm_trainer(b, ctx.loss, sigma);
            let probe = ctx.gen.draw(b.m_probe, seed::derive(cell.seed, &[tag::PROBE, 1]))?;
            ctx.m_hat = Some(estimate_m(
                &trainer,
                &ctx.gen,
                &ctx.loss,
                cell.n,
                b.m_resamples,
                &probe,
                seed::derive(cell.seed, &[tag::GHOST]),
            )?);
        }
    }
    Ok(ctx)
}

fn base_row(cfg: &ExperimentConfig, b: &Block, cell: &Cell, trial: usize, trial_seed: u64) -> SweepRow {
    SweepRow {
        block: b.name.clone(),
        cell: cell.index,
        trial,
        algorithm: b.algorithm.id().into(),
        pointwise: b.pointwise.id().into(),
        pairwise: b.pairwise.clone(),
        n: cell.n,
        d: b.dim,
        tau: cell.tau,
        sigma: cell.sigma,
        eta: cell.eta,
        iterations: cell.iterations,
        noise_std: b.noise_std,
        delta: cfg.delta,
        seed: trial_seed,
        ..SweepRow::default()
    }
}

fn run_trial(cfg: &ExperimentConfig, b: &Block, cell: &Cell, ctx: &CellContext, row: &mut SweepRow) -> Result<()> {
    let ts = row.seed;
    let has = |c: Check| b.checks.contains(&c);
    let (gen, loss, consts) = (&ctx.gen, &ctx.loss, &ctx.consts);
    let n = cell.n;
    let l = consts.lipschitz;
    row.lipschitz = Some(l);
    row.beta = consts.smoothness;
    let s = gen.draw(n, seed::derive(ts, &[tag::DATA]))?;

    let trainer: Box<dyn Trainer> = match b.algorithm {
        Algorithm::Rrm => Box::new(rrm_trainer(b, *loss, cell.sigma.unwrap_or(0.0))),
        Algorithm::Sgd => Box::new(SgdTrainer {
            loss: *loss,
            config: sgd_config(b, cell, ts),
            w0: vec![0.0; b.dim],
        }),
    };

    if has(Check::Eqstab) {
        let mut rng = seed::rng(seed::derive(ts, &[tag::INDICES]));
        let k = rng.random_range(0..n);
        let z = gen.draw(1, seed::derive(ts, &[tag::REPLACEMENT]))?.samples()[0].clone();
        let chk = coupled_drift_check(&s, k, &z, &sgd_config(b, cell, ts), loss, consts, &vec![0.0; b.dim], cfg.delta)?;
        row.drift = Some(chk.drift);
        row.eqstab = Some(chk.rhs_stab);
        row.thm2hp = Some(chk.rhs_highprob);
    }

    if b.algorithm == Algorithm::Rrm {
        let sigma = cell.sigma.unwrap_or(0.0);
        let gamma = bounds::rrm_stability_const(l, sigma, cell.tau, n as u64)?.value;
        row.lemma1 = Some(gamma);
        if has(Check::Thm1) || has(Check::Thm4) {
            let w = trainer.train(&s)?;
            let emp = empirical_mixed_risk(&s, loss, &w)?.r_mixed_emp;
            let pop = population_risk_mc(gen, loss, &w, b.n_pop, seed::derive(ts, &[tag::POPULATION]))?;
            row.r_emp = Some(emp);
            row.r_pop = Some(pop.estimate);
            row.gap = Some((pop.estimate - emp).abs());
        }
        if has(Check::Lemma1) {
            let probe = gen.draw(b.probe_size, seed::derive(ts, &[tag::PROBE]))?;
            let opts = UniformOptions {
                n_replacements: b.n_replacements,
                draws_per_index: b.draws_per_index,
                record_cells: false,
            };
            let u = uniform_stability_estimate(trainer.as_ref(), &s, loss, gen, &probe, &opts, ts)?;
            row.u_point = Some(u.u_point);
            row.u_pair = Some(u.u_pair);
            row.lemma1_slack = Some(2.0 * l * b.rrm_tol / sigma);
        }
        if has(Check::Thm1) {
            let m_hat = ctx.m_hat.unwrap_or(0.0);
            row.m_hat = Some(m_hat);
            row.thm1 = Some(bounds::thm1_bound(gamma, m_hat, cell.tau, n as u64, cfg.delta)?.value);
        }
        if let Some(bt) = ctx.b_theta {
            row.b_hat = Some(bt.b);
            row.theta_hat = Some(bt.theta);
            if has(Check::Thm4) {
                row.thm4 = Some(bounds::thm4_bound(bt.b, bt.theta, l, sigma, cell.tau, n as u64, cfg.delta)?.value);
            }
            if has(Check::Lemma3) {
                let w_star = ctx.w_star.as_deref().unwrap_or_default();
                let emp = empirical_mixed_risk(&s, loss, w_star)?.r_mixed_emp;
                row.ref_gap = Some((ctx.ref_pop.unwrap_or(0.0) - emp).abs());
                row.lemma3 = Some(bounds::bernstein_mixed_bound(bt.b, bt.theta, cell.tau, n as u64, cfg.delta)?.value);
            }
        }
        if has(Check::Lemma2) {
            let w_star = ctx.w_star.as_deref().unwrap_or_default();
            let d: Vec<f64> = (0..b.outer_resamples)
                .map(|r| {
                    let sr = gen.draw(n, seed::derive(ts, &[tag::GHOST, r as u64]))?;
                    let w = trainer.train(&sr)?;
                    Ok(dist2(&w, w_star).powi(2))
                })
                .collect::<Result<_>>()?;
            let (mean, se) = mean_and_se(&d);
            row.dist_sq = Some(mean);
            row.dist_sq_se = Some(se);
            row.lemma2 = Some(bounds::lemma2_bound(gamma, cell.tau, sigma)?.value);
        }
    }

    if b.checks.iter().any(|c| c.on_average()) {
        let opts = OnAverageOptions {
            outer_resamples: b.outer_resamples,
            pair_cap: b.pair_cap,
            index_cap: b.index_cap,
            population_size: b.population_size,
            record_cells: false,
        };
        let e = on_average_stability(trainer.as_ref(), gen, loss, n, &opts, seed::derive(ts, &[tag::CELL]))?;
        row.v_point = Some(e.v_point);
        row.v_pair = Some(e.v_pair);
        row.h1_point = Some(e.h1_point);
        row.h1_pair = Some(e.h1_pair);
        row.h2 = Some(e.h2);
        row.gap_mean = Some(e.gap_mean);
        row.gap_se = Some(e.gap_se);
        row.emp_point_mean = Some(e.emp_point_mean);
        row.emp_pair_mean = Some(e.emp_pair_mean);
        let hyp = |a: f64, b: f64| (a * a + b * b).sqrt();
        let v_se = if e.v_point >= e.v_pair { e.v_point_se } else { e.v_pair_se };
        let h_se = if e.h1_point >= e.h1_pair { e.h1_point_se } else { e.h1_pair_se };
        if has(Check::Thm5) {
            row.thm5 = Some(bounds::thm5_relation(e.v_point, e.v_pair)?.value);
            row.thm5_se = Some(hyp(e.gap_se, v_se));
        }
        if has(Check::Cor2) {
            row.cor2 = Some(bounds::cor2_relation(l, e.h1_point, e.h1_pair)?.value);
            row.cor2_se = Some(hyp(e.gap_se, l * h_se));
        }
        let beta = || {
            consts
                .smoothness
                .ok_or_else(|| Error::InvalidConfig("smooth-loss bounds need a smooth loss".into()))
        };
        let (ep, eq) = (e.emp_point_mean.max(0.0), e.emp_pair_mean.max(0.0));
        if has(Check::Thm6) {
            row.thm6 = Some(bounds::thm6_bound(beta()?, e.h2, None, cell.tau, ep, eq)?.value);
        }
        if has(Check::Thm7) {
            let v = bounds::thm7_bound(beta()?, cell.sigma.unwrap_or(0.0), b.epsilon, cell.tau, n as u64, ep, eq)?;
            row.thm7 = Some(v.value);
            row.thm7_precondition = Some(v.precondition_ok);
        }
        if has(Check::Lemma4) {
            row.lemma4 = Some(bounds::lemma4_rhs(beta()?, b.epsilon, cell.tau, ep, eq, e.h2_squared)?.value);
        }
    }
    Ok(())
}

/// Wall-clock seconds per (cell, trial), kept apart from the rows so the
/// sweep CSV is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub cell: usize,
    pub trial: usize,
    pub seconds: f64,
}

pub const SWEEP_FILE: &str = "sweep.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Run every (cell, trial). Failures are recorded in the row's `error`
/// column and the sweep continues. With `out_dir`, the config, the rows and
/// the timings are written there and flushed after every cell.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut sinks = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;
            let rows = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_path(dir.join(SWEEP_FILE))?;
            let times = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_path(dir.join(TIMINGS_FILE))?;
            Some((rows, times))
        }
        None => None,
    };
    let mut all = Vec::new();
    for cell in cfg.cells() {
        let b = &cfg.blocks[cell.block];
        let ctx = cell_context(b, &cell);
        for trial in 0..b.trials {
            let started = Instant::now();
            let ts = seed::derive(cell.seed, &[trial as u64]);
            let mut row = base_row(cfg, b, &cell, trial, ts);
            let outcome = match &ctx {
                Ok(ctx) => run_trial(cfg, b, &cell, ctx, &mut row),
                Err(e) => Err(Error::InvalidConfig(format!("cell setup failed: {e}"))),
            };
            if let Err(e) = outcome {
                row.error = Some(e.to_string());
            }
            row.set_holds();
            if let Some((rows, times)) = sinks.as_mut() {
                rows.serialize(&row)?;
                times.serialize(Timing {
                    cell: cell.index,
                    trial,
                    seconds: started.elapsed().as_secs_f64(),
                })?;
            }
            all.push(row);
        }
        if let Some((rows, times)) = sinks.as_mut() {
            rows.flush()?;
            times.flush()?;
        }
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Standard error of the slope (0 with fewer than three points).
    pub slope_se: f64,
    pub points: usize,
}

/// Ordinary least squares of `log y` on `log x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput("x and y lengths differ".into()));
    }
    if xs.len() < 3 {
        return Err(Error::InsufficientData {
            n: xs.len(),
            required: 3,
        });
    }
    if xs.iter().chain(ys).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Domain("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("log-log fit needs at least two distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let slope_se = if lx.len() > 2 {
        (sse / (k - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(SlopeFit {
        slope,
        intercept,
        r2,
        slope_se,
        points: lx.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeResult {
    pub block: String,
    pub x: String,
    pub y: String,
    pub group: String,
    pub fit: Option<SlopeFit>,
    pub min: f64,
    pub max: f64,
    /// `None` when there were too few points to fit.
    pub pass: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    /// `(file name, csv contents)` with columns `x,y,series`.
    pub plots: Vec<(String, String)>,
    pub slopes: Vec<SlopeResult>,
    pub all_pass: bool,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v}"))
}

fn group_key(row: &SweepRow, x: &str) -> String {
    let mut parts = Vec::new();
    for key in GRID_KEYS {
        if key == x {
            continue;
        }
        if let Some(v) = row.metric(key) {
            parts.push(format!("{key}={v}"));
        }
    }
    parts.join(" ")
}

fn slope_results(rows: &[SweepRow], cfg: &ExperimentConfig) -> Vec<(SlopeResult, Vec<(f64, f64)>)> {
    let mut out = Vec::new();
    for b in &cfg.blocks {
        for sc in &b.slope_checks {
            // group -> x -> values
            let mut groups: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
            for r in rows.iter().filter(|r| r.block == b.name && r.error.is_none()) {
                if let (Some(x), Some(y)) = (r.metric(&sc.x), r.metric(&sc.y)) {
                    groups
                        .entry(group_key(r, &sc.x))
                        .or_default()
                        .entry(x.to_bits())
                        .or_default()
                        .push(y);
                }
            }
            for (group, by_x) in groups {
                let mut pts: Vec<(f64, f64)> = by_x
                    .into_iter()
                    .map(|(xb, ys)| (f64::from_bits(xb), ys.iter().sum::<f64>() / ys.len() as f64))
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
                let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
                let fit = fit_loglog_slope(&xs, &ys).ok();
                let pass = fit.map(|f| f.slope >= sc.min && f.slope <= sc.max);
                out.push((
                    SlopeResult {
                        block: b.name.clone(),
                        x: sc.x.clone(),
                        y: sc.y.clone(),
                        group,
                        fit,
                        min: sc.min,
                        max: sc.max,
                        pass,
                    },
                    pts,
                ));
            }
        }
    }
    out
}

/// Text summary plus plot-data files.
pub fn make_report(rows: &[SweepRow], cfg: &ExperimentConfig) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut text = String::new();
    let errors = rows.iter().filter(|r| r.error.is_some()).count();
    let _ = writeln!(text, "sweep report");
    let _ = writeln!(text, "master seed {}, delta {}", cfg.master_seed, cfg.delta);
    let _ = writeln!(text, "rows {}, failed cells {}", rows.len(), errors);
    let _ = writeln!(text);
    let _ = writeln!(text, "hold rates");
    let mut all_pass = errors == 0;
    let mut inconsistent = 0;
    for (k, check) in Check::ALL.iter().enumerate() {
        let flags: Vec<bool> = rows.iter().filter_map(|r| r.stored_holds()[k]).collect();
        if flags.is_empty() {
            continue;
        }
        let held = flags.iter().filter(|f| **f).count();
        all_pass &= held == flags.len();
        let _ = writeln!(
            text,
            "  {:<8} {}/{} ({:.2}%)",
            check.id(),
            held,
            flags.len(),
            100.0 * held as f64 / flags.len() as f64
        );
    }
    for r in rows {
        if !r.holds_consistent() {
            inconsistent += 1;
        }
    }
    if inconsistent > 0 {
        all_pass = false;
        let _ = writeln!(text, "  {inconsistent} rows have holds flags inconsistent with their values");
    }

    let _ = writeln!(text);
    let _ = writeln!(text, "slope checks");
    let slopes = slope_results(rows, cfg);
    let mut plots = Vec::new();
    let mut plot_files: BTreeMap<String, String> = BTreeMap::new();
    if slopes.is_empty() {
        let _ = writeln!(text, "  none configured");
    }
    for (s, pts) in &slopes {
        let label = format!("{} {} vs {} [{}]", s.block, s.y, s.x, s.group);
        match (s.fit, s.pass) {
            (Some(f), Some(p)) => {
                all_pass &= p;
                let _ = writeln!(
                    text,
                    "  {label}: slope {:.4} +/- {:.4} (2 se), r2 {:.4}, range [{}, {}] {}",
                    f.slope,
                    2.0 * f.slope_se,
                    f.r2,
                    s.min,
                    s.max,
                    if p { "PASS" } else { "FAIL" }
                );
            }
            _ => {
                let _ = writeln!(text, "  {label}: insufficient points ({})", pts.len());
            }
        }
        let file = format!("plot_{}_{}_vs_{}.csv", s.block, s.y, s.x);
        let body = plot_files.entry(file).or_insert_with(|| "x,y,series\n".into());
        for (x, y) in pts {
            let _ = writeln!(body, "{x:?},{y:?},{}", s.group);
        }
    }

    let mut ratios = String::from("x,y,series\n");
    for (i, r) in rows.iter().enumerate() {
        for (c, a, b) in r.comparisons() {
            if b > 0.0 {
                let _ = writeln!(ratios, "{i},{:?},{}", a / b, c.id());
            }
        }
    }
    plot_files.insert("plot_measured_over_bound.csv".into(), ratios);
    plots.extend(plot_files);

    let _ = writeln!(text);
    let _ = writeln!(text, "failed rows");
    let mut any_failed = false;
    for r in rows {
        let failed: Vec<&str> = Check::ALL
            .iter()
            .zip(r.stored_holds())
            .filter(|(_, h)| *h == Some(false))
            .map(|(c, _)| c.id())
            .collect();
        if r.error.is_some() || !failed.is_empty() {
            any_failed = true;
            let _ = writeln!(
                text,
                "  {} cell {} trial {} (n={}, tau={}, sigma={}, eta={}): {}{}",
                r.block,
                r.cell,
                r.trial,
                r.n,
                r.tau,
                fmt_opt(r.sigma),
                fmt_opt(r.eta),
                failed.join(" "),
                r.error.as_deref().map(|e| format!("error: {e}")).unwrap_or_default()
            );
        }
    }
    if !any_failed {
        let _ = writeln!(text, "  none");
    }
    let _ = writeln!(text);
    let _ = writeln!(text, "result: {}", if all_pass { "PASS" } else { "FAIL" });
    Ok(Report {
        text,
        plots,
        slopes: slopes.into_iter().map(|(s, _)| s).collect(),
        all_pass,
    })
}

/// Read a sweep directory, write `report.txt` and the plot files into it.
pub fn report_dir(dir: &Path) -> Result<Report> {
    let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let rows = read_rows_csv(fs::File::open(dir.join(SWEEP_FILE))?)?;
    let report = make_report(&rows, &cfg)?;
    let mut f = fs::File::create(dir.join("report.txt"))?;
    f.write_all(report.text.as_bytes())?;
    for (name, body) in &report.plots {
        fs::write(dir.join(name), body)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "master_seed": 7,
                "blocks": [{
                    "name": "tiny",
                    "algorithm": "rrm",
                    "pointwise": "squared",
                    "pairwise": "squared-ranking",
                    "n": [20],
                    "tau": [0.5],
                    "sigma": [1.0],
                    "dim": 2,
                    "checks": ["lemma1", "thm1"],
                    "probe_size": 10,
                    "n_replacements": 2,
                    "draws_per_index": 1,
                    "m_resamples": 2,
                    "m_probe": 5,
                    "n_pop": 500
                }]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn exact_slopes() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let f = fit_loglog_slope(&xs, &xs.map(|x| 7.0 / x)).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        let c = fit_loglog_slope(&xs, &[3.0; 4]).unwrap();
        assert_eq!(c.slope, 0.0);
        assert!(fit_loglog_slope(&xs[..2], &[1.0, 2.0]).is_err());
        assert!(matches!(fit_loglog_slope(&xs, &[1.0, 0.0, 1.0, 1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn one_cell_one_row_and_rerun_identical() {
        let cfg = tiny_config();
        let a = run_sweep(&cfg, None).unwrap();
        assert_eq!(a.len(), 1);
        assert!(a[0].error.is_none(), "{:?}", a[0].error);
        assert_eq!(a[0].holds_lemma1, Some(true));
        assert_eq!(a[0].holds_thm1, Some(true));
        let b = run_sweep(&cfg, None).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_rows_csv(&a, &mut x).unwrap();
        write_rows_csv(&b, &mut y).unwrap();
        assert_eq!(x, y);
        assert_eq!(read_rows_csv(x.as_slice()).unwrap(), a);
    }

    #[test]
    fn single_cell_report_marks_insufficient_slopes() {
        let mut cfg = tiny_config();
        cfg.blocks[0].slope_checks.push(SlopeCheck {
            x: "n".into(),
            y: "lemma1".into(),
            min: -1.01,
            max: -0.99,
        });
        let rows = run_sweep(&cfg, None).unwrap();
        let rep = make_report(&rows, &cfg).unwrap();
        assert!(rep.text.contains("insufficient points"));
        assert!(rep.text.contains("100.00%"));
        assert!(rep.all_pass);
        assert_eq!(make_report(&rows, &cfg).unwrap().text, rep.text);
        assert!(matches!(make_report(&[], &cfg), Err(Error::EmptyInput)));
    }

    #[test]
    fn errors_are_recorded_not_fatal() {
        let mut cfg = tiny_config();
        cfg.blocks[0].rrm_max_iters = 1;
        let rows = run_sweep(&cfg, None).unwrap();
        assert!(rows[0].error.is_some());
        assert!(!make_report(&rows, &cfg).unwrap().all_pass);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.blocks[0].algorithm = Algorithm::Sgd;
        cfg.blocks[0].eta = vec![0.01];
        cfg.blocks[0].iterations = vec![10];
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = tiny_config();
        cfg.delta = 0.5;
        assert!(cfg.validate().is_err());
    }
}
