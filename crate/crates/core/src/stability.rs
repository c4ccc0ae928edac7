//! Empirical stability estimation by replace-one and replace-two
//! experiments.
//!
//! Every retraining shares the algorithm's own randomness with the base run:
//! SGD trainers carry a fixed seed, RRM is deterministic. Sup-type
//! quantities are probe-maximized lower bounds of the true suprema.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds;
use crate::datasets::{Dataset, Sample, SampleSource};
use crate::error::{Error, Result};
use crate::linalg::{dist2, mean_and_se, tree_sum};
use crate::losses::{LossConstants, MixedLoss, PairwiseLoss, PointwiseLoss};
use crate::optim::{rrm_solve, sgd_coupled_pair, sgd_run, IndicatorSums, RrmOptions, SgdConfig};
use crate::risk::{pairwise_risk, pointwise_risk, Regularizer};
use crate::seed::{self, tag};

/// A learning algorithm `S -> w`.
pub trait Trainer: Sync {
    fn train(&self, data: &Dataset) -> Result<Vec<f64>>;

    /// Train on a dataset close to one whose output `near` is known.
    /// Iterative solvers may use it as a warm start.
    fn train_near(&self, data: &Dataset, near: &[f64]) -> Result<Vec<f64>> {
        let _ = near;
        self.train(data)
    }
}

/// Ignores its input and returns a fixed model.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantTrainer(pub Vec<f64>);

impl Trainer for ConstantTrainer {
    fn train(&self, _data: &Dataset) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

/// Wraps any closure as a trainer.
pub struct FnTrainer<F>(pub F);

impl<F> Trainer for FnTrainer<F>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync,
{
    fn train(&self, data: &Dataset) -> Result<Vec<f64>> {
        (self.0)(data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrmTrainer {
    pub loss: MixedLoss,
    pub regularizer: Regularizer,
    pub options: RrmOptions,
}

impl Trainer for RrmTrainer {
    fn train(&self, data: &Dataset) -> Result<Vec<f64>> {
        Ok(rrm_solve(data, &self.loss, &self.regularizer, &self.options)?.w)
    }

    fn train_near(&self, data: &Dataset, near: &[f64]) -> Result<Vec<f64>> {
        let opts = RrmOptions {
            warm_start: Some(near.to_vec()),
            ..self.options.clone()
        };
        Ok(rrm_solve(data, &self.loss, &self.regularizer, &opts)?.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdTrainer {
    pub loss: MixedLoss,
    pub config: SgdConfig,
    pub w0: Vec<f64>,
}

impl Trainer for SgdTrainer {
    fn train(&self, data: &Dataset) -> Result<Vec<f64>> {
        Ok(sgd_run(data, &self.loss, &self.config, &self.w0)?.w_final)
    }
}

fn train_at<T: Trainer + ?Sized>(t: &T, data: &Dataset, near: Option<&[f64]>, index: usize) -> Result<Vec<f64>> {
    let out = match near {
        Some(w) => t.train_near(data, w),
        None => t.train(data),
    };
    out.map_err(|e| Error::Training {
        index,
        source: Box::new(e),
    })
}

/// One raw measurement, written as a CSV row `def,kind,i,j,trial,value,seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCell {
    pub def: String,
    pub kind: String,
    pub i: usize,
    pub j: Option<usize>,
    pub trial: usize,
    pub value: f64,
    pub seed: u64,
}

pub fn write_cells_csv<W: std::io::Write>(cells: &[RawCell], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(["def", "kind", "i", "j", "trial", "value", "seed"])?;
    for c in cells {
        w.write_record([
            c.def.clone(),
            c.kind.clone(),
            c.i.to_string(),
            c.j.map(|j| j.to_string()).unwrap_or_default(),
            c.trial.to_string(),
            format!("{:?}", c.value),
            c.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformOptions {
    pub n_replacements: usize,
    /// Fresh replacement draws per index.
    pub draws_per_index: usize,
    #[serde(default)]
    pub record_cells: bool,
}

impl Default for UniformOptions {
    fn default() -> Self {
        UniformOptions {
            n_replacements: 10,
            draws_per_index: 3,
            record_cells: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformEstimate {
    pub u_point: f64,
    pub u_pair: f64,
    pub probe_size: usize,
    pub n_replacements: usize,
    pub draws_per_index: usize,
    pub replaced: Vec<usize>,
    #[serde(skip)]
    pub cells: Vec<RawCell>,
}

impl UniformEstimate {
    pub fn gamma_hat(&self) -> f64 {
        self.u_point.max(self.u_pair)
    }
}

/// Largest pointwise and pairwise loss change between two models over a
/// probe pool (all ordered pairs, diagonal included).
pub fn max_loss_shift(f: PointwiseLoss, g: PairwiseLoss, a: &[f64], b: &[f64], pool: &[Sample]) -> (f64, f64) {
    let point = pool
        .iter()
        .map(|z| (f.value_unchecked(a, z) - f.value_unchecked(b, z)).abs())
        .fold(0.0, f64::max);
    let pair = pool
        .par_iter()
        .map(|z| {
            pool.iter()
                .map(|zt| (g.value_unchecked(a, z, zt) - g.value_unchecked(b, z, zt)).abs())
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    (point, pair)
}

/// Probe-maximized lower bounds of `U_point` and `U_pair`.
///
/// Replacement indices are a seeded permutation prefix and replacement draws
/// are keyed by `(index, draw)`, so enlarging either count only adds terms
/// to the maxima. The probe pool is `probe` together with the training set.
pub fn uniform_stability_estimate<T: Trainer + ?Sized, G: SampleSource + ?Sized>(
    trainer: &T,
    s: &Dataset,
    loss: &MixedLoss,
    source: &G,
    probe: &Dataset,
    opts: &UniformOptions,
    seed_value: u64,
) -> Result<UniformEstimate> {
    if probe.is_empty() {
        return Err(Error::EmptyInput);
    }
    if opts.n_replacements == 0 || opts.draws_per_index == 0 {
        return Err(Error::InvalidConfig("need at least one replacement and one draw".into()));
    }
    let n = s.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed_value, &[tag::INDICES])));
    order.truncate(opts.n_replacements.min(n));

    let base = trainer.train(s)?;
    let pool: Vec<Sample> = probe.samples().iter().chain(s.samples()).cloned().collect();

    let jobs: Vec<(usize, usize)> = order
        .iter()
        .flat_map(|&i| (0..opts.draws_per_index).map(move |k| (i, k)))
        .collect();
    type Shift = (usize, usize, u64, f64, f64);
    let results: Vec<Result<Shift>> = jobs
        .par_iter()
        .map(|&(i, k)| {
            let cell_seed = seed::derive(seed_value, &[tag::REPLACEMENT, i as u64, k as u64]);
            let z = source.draw(1, cell_seed)?.samples()[0].clone();
            let si = s.neighbor_i(i, &z)?;
            let wi = train_at(trainer, &si, Some(&base), i)?;
            let (p, q) = max_loss_shift(loss.pointwise, loss.pairwise, &base, &wi, &pool);
            Ok((i, k, cell_seed, p, q))
        })
        .collect();

    let mut est = UniformEstimate {
        u_point: 0.0,
        u_pair: 0.0,
        probe_size: pool.len(),
        n_replacements: order.len(),
        draws_per_index: opts.draws_per_index,
        replaced: order.clone(),
        cells: Vec::new(),
    };
    for r in results {
        let (i, k, cell_seed, p, q) = r?;
        est.u_point = est.u_point.max(p);
        est.u_pair = est.u_pair.max(q);
        if opts.record_cells {
            for (kind, value) in [("point", p), ("pair", q)] {
                est.cells.push(RawCell {
                    def: "uniform".into(),
                    kind: kind.into(),
                    i,
                    j: None,
                    trial: k,
                    value,
                    seed: cell_seed,
                });
            }
        }
    }
    Ok(est)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnAverageOptions {
    pub outer_resamples: usize,
    /// Ordered pairs `(i, j)` per resample for the replace-two terms.
    pub pair_cap: usize,
    /// Indices per resample for the replace-one terms (`None` = all `n`).
    pub index_cap: Option<usize>,
    /// Independent draws used to estimate the population risk of `A(S)`.
    pub population_size: usize,
    #[serde(default)]
    pub record_cells: bool,
}

impl Default for OnAverageOptions {
    fn default() -> Self {
        OnAverageOptions {
            outer_resamples: 50,
            pair_cap: 64,
            index_cap: None,
            population_size: 2000,
            record_cells: false,
        }
    }
}

/// Monte Carlo estimates of the on-average loss and argument stabilities,
/// together with the mean generalization gap of the mixed risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnAverageEstimate {
    pub v_point: f64,
    pub v_pair: f64,
    pub h1_point: f64,
    pub h1_pair: f64,
    /// Root of the mean squared replace-one drift.
    pub h2: f64,
    pub h2_squared: f64,
    pub v_point_se: f64,
    pub v_pair_se: f64,
    pub h1_point_se: f64,
    pub h1_pair_se: f64,
    pub h2_squared_se: f64,
    pub gap_mean: f64,
    pub gap_se: f64,
    /// Mean empirical pointwise and pairwise risks of `A(S)`.
    pub emp_point_mean: f64,
    pub emp_pair_mean: f64,
    pub n: usize,
    pub outer_resamples: usize,
    pub indices_per_resample: usize,
    pub pairs_per_resample: usize,
    pub population_size: usize,
    #[serde(skip)]
    pub cells: Vec<RawCell>,
}

impl OnAverageEstimate {
    pub fn gamma_loss(&self) -> f64 {
        self.v_point.max(self.v_pair)
    }

    pub fn gamma_l1(&self) -> f64 {
        self.h1_point.max(self.h1_pair)
    }
}

struct ResampleStats {
    v_point: f64,
    v_pair: f64,
    h1_point: f64,
    h1_pair: f64,
    h2_sq: f64,
    gap: f64,
    emp_point: f64,
    emp_pair: f64,
    cells: Vec<RawCell>,
}

fn sample_indices(rng: &mut seed::Rng, n: usize, cap: Option<usize>) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    if let Some(c) = cap.filter(|&c| c < n) {
        all.shuffle(rng);
        all.truncate(c);
        all.sort_unstable();
    }
    all
}

fn sample_pairs(rng: &mut seed::Rng, n: usize, cap: usize) -> Vec<(usize, usize)> {
    use rand::Rng as _;
    if n * (n - 1) <= cap {
        return (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
    }
    (0..cap)
        .map(|_| loop {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                break (i, j);
            }
        })
        .collect()
}

fn one_resample<T: Trainer + ?Sized, G: SampleSource + ?Sized>(
    trainer: &T,
    source: &G,
    loss: &MixedLoss,
    n: usize,
    opts: &OnAverageOptions,
    r: usize,
    seed_value: u64,
) -> Result<ResampleStats> {
    let rs = seed::derive(seed_value, &[tag::CELL, r as u64]);
    let s = source.draw(n, seed::derive(rs, &[tag::DATA]))?;
    let s_ghost = source.draw(n, seed::derive(rs, &[tag::GHOST]))?;
    let pop = source.draw(opts.population_size, seed::derive(rs, &[tag::POPULATION]))?;
    let mut rng = seed::rng(seed::derive(rs, &[tag::INDICES]));
    let idx = sample_indices(&mut rng, n, opts.index_cap);
    let pairs = sample_pairs(&mut rng, n, opts.pair_cap);

    let base = trainer.train(&s)?;
    let (f, g) = (loss.pointwise, loss.pairwise);
    let emp_point = pointwise_risk(&s, f, &base);
    let emp_pair = pairwise_risk(&s, g, &base)?;
    let pop_point = pointwise_risk(&pop, f, &base);
    let pop_pair = pairwise_risk(&pop, g, &base)?;
    let gap = crate::risk::mix(loss.tau, pop_point - emp_point, pop_pair - emp_pair);

    let zs = s.samples();
    let ghost = s_ghost.samples();
    let singles: Vec<Result<(f64, f64)>> = idx
        .par_iter()
        .map(|&i| {
            let si = s.neighbor_i(i, &ghost[i])?;
            let wi = train_at(trainer, &si, Some(&base), i)?;
            Ok((
                f.value_unchecked(&wi, &zs[i]) - f.value_unchecked(&base, &zs[i]),
                dist2(&base, &wi),
            ))
        })
        .collect();
    let doubles: Vec<Result<(f64, f64)>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let sij = s.neighbor_ij(i.min(j), i.max(j), &ghost[i.min(j)], &ghost[i.max(j)])?;
            let wij = train_at(trainer, &sij, Some(&base), i)?;
            Ok((
                g.value_unchecked(&wij, &zs[i], &zs[j]) - g.value_unchecked(&base, &zs[i], &zs[j]),
                dist2(&base, &wij),
            ))
        })
        .collect();
    let singles = singles.into_iter().collect::<Result<Vec<_>>>()?;
    let doubles = doubles.into_iter().collect::<Result<Vec<_>>>()?;

    let mean = |xs: Vec<f64>| tree_sum(&xs) / xs.len() as f64;
    let mut cells = Vec::new();
    if opts.record_cells {
        for (&i, &(v, h)) in idx.iter().zip(&singles) {
            for (def, kind, value) in [("loss", "point", v), ("argument", "point", h)] {
                cells.push(RawCell {
                    def: def.into(),
                    kind: kind.into(),
                    i,
                    j: None,
                    trial: r,
                    value,
                    seed: rs,
                });
            }
        }
        for (&(i, j), &(v, h)) in pairs.iter().zip(&doubles) {
            for (def, kind, value) in [("loss", "pair", v), ("argument", "pair", h)] {
                cells.push(RawCell {
                    def: def.into(),
                    kind: kind.into(),
                    i,
                    j: Some(j),
                    trial: r,
                    value,
                    seed: rs,
                });
            }
        }
    }
    Ok(ResampleStats {
        v_point: mean(singles.iter().map(|p| p.0).collect()),
        h1_point: mean(singles.iter().map(|p| p.1).collect()),
        h2_sq: mean(singles.iter().map(|p| p.1 * p.1).collect()),
        v_pair: mean(doubles.iter().map(|p| p.0).collect()),
        h1_pair: mean(doubles.iter().map(|p| p.1).collect()),
        gap,
        emp_point,
        emp_pair,
        cells,
    })
}

/// On-average loss and argument stability of `trainer` on `n`-sample draws
/// from `source`. Each outer resample draws `S`, a ghost sample `S'` that
/// supplies the replacements, and a population sample for the gap.
pub fn on_average_stability<T: Trainer + ?Sized, G: SampleSource + ?Sized>(
    trainer: &T,
    source: &G,
    loss: &MixedLoss,
    n: usize,
    opts: &OnAverageOptions,
    seed_value: u64,
) -> Result<OnAverageEstimate> {
    if opts.outer_resamples == 0 {
        return Err(Error::InvalidConfig("outer_resamples must be at least 1".into()));
    }
    if n < 2 {
        return Err(Error::InsufficientData { n, required: 2 });
    }
    if opts.pair_cap == 0 || opts.index_cap == Some(0) || opts.population_size < 2 {
        return Err(Error::InvalidConfig("sample caps must be positive".into()));
    }
    let stats = (0..opts.outer_resamples)
        .map(|r| one_resample(trainer, source, loss, n, opts, r, seed_value))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&ResampleStats) -> f64| mean_and_se(&stats.iter().map(f).collect::<Vec<_>>());
    let (v_point, v_point_se) = col(|s| s.v_point);
    let (v_pair, v_pair_se) = col(|s| s.v_pair);
    let (h1_point, h1_point_se) = col(|s| s.h1_point);
    let (h1_pair, h1_pair_se) = col(|s| s.h1_pair);
    let (h2_squared, h2_squared_se) = col(|s| s.h2_sq);
    let (gap_mean, gap_se) = col(|s| s.gap);
    let (emp_point_mean, _) = col(|s| s.emp_point);
    let (emp_pair_mean, _) = col(|s| s.emp_pair);
    let indices_per_resample = opts.index_cap.map_or(n, |c| c.min(n));
    let pairs_per_resample = opts.pair_cap.min(n * (n - 1));
    Ok(OnAverageEstimate {
        v_point,
        v_pair,
        h1_point,
        h1_pair,
        h2: h2_squared.max(0.0).sqrt(),
        h2_squared,
        v_point_se,
        v_pair_se,
        h1_point_se,
        h1_pair_se,
        h2_squared_se,
        gap_mean,
        gap_se,
        emp_point_mean,
        emp_pair_mean,
        n,
        outer_resamples: opts.outer_resamples,
        indices_per_resample,
        pairs_per_resample,
        population_size: opts.population_size,
        cells: stats.into_iter().flat_map(|s| s.cells).collect(),
    })
}

/// `(v_point, v_pair)` alone.
pub fn on_average_loss_stability<T: Trainer + ?Sized, G: SampleSource + ?Sized>(
    trainer: &T,
    source: &G,
    loss: &MixedLoss,
    n: usize,
    opts: &OnAverageOptions,
    seed_value: u64,
) -> Result<(f64, f64)> {
    let e = on_average_stability(trainer, source, loss, n, opts, seed_value)?;
    Ok((e.v_point, e.v_pair))
}

/// `(h1_point, h1_pair, h2)` alone.
pub fn on_average_argument_stability<T: Trainer + ?Sized, G: SampleSource + ?Sized>(
    trainer: &T,
    source: &G,
    loss: &MixedLoss,
    n: usize,
    opts: &OnAverageOptions,
    seed_value: u64,
) -> Result<(f64, f64, f64)> {
    let e = on_average_stability(trainer, source, loss, n, opts, seed_value)?;
    Ok((e.h1_point, e.h1_pair, e.h2))
}

/// Combined report of all three stability notions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEstimate {
    pub u_point: Option<f64>,
    pub u_pair: Option<f64>,
    pub v_point: f64,
    pub v_pair: f64,
    pub h1_point: f64,
    pub h1_pair: f64,
    pub h2: f64,
    pub n: usize,
    pub outer_resamples: usize,
    pub probe_size: usize,
    pub gamma_uniform: Option<f64>,
    pub gamma_loss: f64,
    pub gamma_l1: f64,
    pub gap_mean: f64,
    pub gap_se: f64,
    pub pairs_per_resample: usize,
    pub indices_per_resample: usize,
}

impl StabilityEstimate {
    pub fn combine(uniform: Option<&UniformEstimate>, avg: &OnAverageEstimate) -> Self {
        StabilityEstimate {
            u_point: uniform.map(|u| u.u_point),
            u_pair: uniform.map(|u| u.u_pair),
            v_point: avg.v_point,
            v_pair: avg.v_pair,
            h1_point: avg.h1_point,
            h1_pair: avg.h1_pair,
            h2: avg.h2,
            n: avg.n,
            outer_resamples: avg.outer_resamples,
            probe_size: uniform.map_or(0, |u| u.probe_size),
            gamma_uniform: uniform.map(|u| u.gamma_hat()),
            gamma_loss: avg.gamma_loss(),
            gamma_l1: avg.gamma_l1(),
            gap_mean: avg.gap_mean,
            gap_se: avg.gap_se,
            pairs_per_resample: avg.pairs_per_resample,
            indices_per_resample: avg.indices_per_resample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCheck {
    pub drift: f64,
    /// Parameter-scale per-run bound `2L sum eta I[i_t=k] + 2L(1-tau) sum eta I[j_t=k]`.
    pub rhs_stab: f64,
    /// The same bound on the loss scale (one more factor `L`).
    pub rhs_stab_loss: f64,
    pub rhs_highprob: f64,
    pub holds: bool,
    pub indicators: IndicatorSums,
}

/// Coupled SGD runs on `S` and `S` with position `replaced_index` swapped
/// for `replacement`, compared against the per-run drift bound.
#[allow(clippy::too_many_arguments)]
pub fn coupled_drift_check(
    s: &Dataset,
    replaced_index: usize,
    replacement: &Sample,
    cfg: &SgdConfig,
    m: &MixedLoss,
    consts: &LossConstants,
    w0: &[f64],
    delta: f64,
) -> Result<DriftCheck> {
    if !m.is_smooth() || !m.is_convex() {
        return Err(Error::InvalidConfig("drift bound needs smooth convex losses".into()));
    }
    let beta = consts
        .smoothness
        .ok_or_else(|| Error::InvalidConfig("drift bound needs a smoothness constant".into()))?;
    cfg.validate()?;
    cfg.check_step_bound(beta)?;
    match cfg.projection_radius {
        Some(b) if b <= consts.valid_on.ball_radius => {}
        _ => {
            return Err(Error::InvalidConfig(
                "iterates must be projected onto the ball the constants are certified on".into(),
            ))
        }
    }
    let neighbor = s.neighbor_i(replaced_index, replacement)?;
    let run = sgd_coupled_pair(s, &neighbor, m, cfg, w0)?;
    let l = consts.lipschitz;
    let ind = run.indicators;
    let rhs_stab = 2.0 * l * ind.eta_i + 2.0 * l * (1.0 - m.tau) * ind.eta_j;
    let rhs_highprob = bounds::sgd_drift_highprob(l, cfg.eta(), m.tau, cfg.iterations, s.len(), delta)?.value;
    let drift = run.drift();
    Ok(DriftCheck {
        drift,
        rhs_stab,
        rhs_stab_loss: l * rhs_stab,
        rhs_highprob,
        holds: drift <= rhs_stab,
        indicators: ind,
    })
}
