//! Stochastic gradient descent for the mixed objective, coupled runs on
//! neighboring datasets, and the regularized risk minimization solver.
//!
//! One SGD step draws an ordered pair `(i_t, j_t)` with `i_t != j_t`
//! uniformly at random and moves along
//! `tau grad f(w; z_i) + (1 - tau) grad g(w; z_i, z_j)`, optionally followed
//! by projection onto a ball. The index stream depends only on
//! `(seed, n, T)`, never on the data, so two runs on neighboring datasets can
//! share it exactly.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, SampleSource};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, dist2, norm2, project_ball, soft_threshold};
use crate::losses::{MixedLoss, PairwiseLoss, PointwiseLoss};
use crate::risk::{empirical_mixed_risk_grad, Regularizer};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StepSchedule {
    Constant { eta: f64 },
    /// `eta_t = c / sqrt(T)` for every step.
    InvSqrtT { c: f64 },
}

impl StepSchedule {
    pub fn eta(&self, iterations: usize) -> f64 {
        match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::InvSqrtT { c } => c / (iterations.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub iterations: usize,
    pub schedule: StepSchedule,
    pub projection_radius: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub record_history: bool,
}

impl SgdConfig {
    pub fn constant(eta: f64, iterations: usize, seed: u64) -> Self {
        SgdConfig {
            iterations,
            schedule: StepSchedule::Constant { eta },
            projection_radius: None,
            seed,
            record_history: false,
        }
    }

    pub fn with_projection(mut self, radius: f64) -> Self {
        self.projection_radius = Some(radius);
        self
    }

    pub fn eta(&self) -> f64 {
        self.schedule.eta(self.iterations)
    }

    pub fn validate(&self) -> Result<()> {
        let eta = self.eta();
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::InvalidConfig(format!("step size must be positive, got {eta}")));
        }
        if let Some(b) = self.projection_radius {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::InvalidConfig(format!("projection radius must be positive, got {b}")));
            }
        }
        Ok(())
    }

    /// Require `eta <= 2 / beta`.
    pub fn check_step_bound(&self, beta: f64) -> Result<()> {
        let eta = self.eta();
        if eta > 2.0 / beta {
            return Err(Error::InvalidConfig(format!(
                "step size {eta} exceeds 2/beta = {}",
                2.0 / beta
            )));
        }
        Ok(())
    }
}

/// Realized sequence of ordered pairs `(i_t, j_t)`, `i_t != j_t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStream {
    pub seed: u64,
    pub n: usize,
    pub pairs: Vec<(u32, u32)>,
}

impl IndexStream {
    /// Uniform ordered pairs by rejection: both indices are redrawn whenever
    /// they coincide.
    pub fn generate(seed_value: u64, n: usize, iterations: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InsufficientData { n, required: 2 });
        }
        if n > u32::MAX as usize {
            return Err(Error::InvalidInput("dataset too large for index stream".into()));
        }
        let mut rng = seed::rng(seed::derive(seed_value, &[seed::tag::INDICES]));
        let pairs = (0..iterations)
            .map(|_| loop {
                let i = rng.random_range(0..n as u32);
                let j = rng.random_range(0..n as u32);
                if i != j {
                    break (i, j);
                }
            })
            .collect();
        Ok(IndexStream {
            seed: seed_value,
            n,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Step-size weighted hit counts of index `k` in either slot.
    pub fn indicator_sums(&self, k: usize, schedule: &StepSchedule) -> IndicatorSums {
        let eta = schedule.eta(self.pairs.len());
        let mut s = IndicatorSums {
            index: k,
            eta_i: 0.0,
            eta_j: 0.0,
            hits_i: 0,
            hits_j: 0,
        };
        for &(i, j) in &self.pairs {
            if i as usize == k {
                s.hits_i += 1;
                s.eta_i += eta;
            }
            if j as usize == k {
                s.hits_j += 1;
                s.eta_j += eta;
            }
        }
        s
    }
}

/// `sum_t eta_t I[i_t = k]` and `sum_t eta_t I[j_t = k]`, with raw counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSums {
    pub index: usize,
    pub eta_i: f64,
    pub eta_j: f64,
    pub hits_i: usize,
    pub hits_j: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdTrace {
    pub w_final: Vec<f64>,
    /// `w_0, w_1, ..., w_T` when requested.
    pub history: Option<Vec<Vec<f64>>>,
    pub stream: IndexStream,
}

fn check_start(data: &Dataset, cfg: &SgdConfig, w0: &[f64]) -> Result<()> {
    cfg.validate()?;
    if w0.len() != data.dim() {
        return Err(Error::InvalidInput(format!(
            "initial point has dimension {}, data has {}",
            w0.len(),
            data.dim()
        )));
    }
    if !all_finite(w0) {
        return Err(Error::Numeric("initial point is not finite".into()));
    }
    if let Some(b) = cfg.projection_radius {
        if norm2(w0) > b * (1.0 + 1e-12) {
            return Err(Error::InvalidInput(format!(
                "initial point has norm {} outside the projection ball of radius {b}",
                norm2(w0)
            )));
        }
    }
    Ok(())
}

/// Projected SGD for the mixed loss.
pub fn sgd_run(data: &Dataset, m: &MixedLoss, cfg: &SgdConfig, w0: &[f64]) -> Result<SgdTrace> {
    let stream = IndexStream::generate(cfg.seed, data.len(), cfg.iterations)?;
    sgd_run_with_stream(data, m, cfg, w0, stream)
}

/// SGD driven by an explicit index stream (used for replay and coupling).
pub fn sgd_run_with_stream(
    data: &Dataset,
    m: &MixedLoss,
    cfg: &SgdConfig,
    w0: &[f64],
    stream: IndexStream,
) -> Result<SgdTrace> {
    check_start(data, cfg, w0)?;
    if stream.n != data.len() {
        return Err(Error::InvalidInput(format!(
            "index stream built for n = {}, data has n = {}",
            stream.n,
            data.len()
        )));
    }
    let eta = cfg.eta();
    let z = data.samples();
    let mut w = w0.to_vec();
    let mut history = cfg.record_history.then(|| vec![w.clone()]);
    for (t, &(i, j)) in stream.pairs.iter().enumerate() {
        let (_, grad) = m.value_grad_unchecked(&w, &z[i as usize], &z[j as usize]);
        for (wk, gk) in w.iter_mut().zip(&grad) {
            *wk -= eta * gk;
        }
        if let Some(b) = cfg.projection_radius {
            project_ball(&mut w, b);
        }
        if !all_finite(&w) {
            return Err(Error::Divergence { step: t + 1 });
        }
        if let Some(h) = history.as_mut() {
            h.push(w.clone());
        }
    }
    Ok(SgdTrace {
        w_final: w,
        history,
        stream,
    })
}

/// Two SGD runs on datasets differing in exactly one position, sharing the
/// same index stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledRun {
    pub base: SgdTrace,
    pub neighbor: SgdTrace,
    pub replaced_index: usize,
    pub indicators: IndicatorSums,
}

impl CoupledRun {
    /// `||w_T - w'_T||_2`
    pub fn drift(&self) -> f64 {
        dist2(&self.base.w_final, &self.neighbor.w_final)
    }
}

pub fn sgd_coupled_pair(
    data: &Dataset,
    neighbor: &Dataset,
    m: &MixedLoss,
    cfg: &SgdConfig,
    w0: &[f64],
) -> Result<CoupledRun> {
    let diff = data.differing_positions(neighbor)?;
    if diff.len() != 1 {
        return Err(Error::Coupling(format!(
            "datasets must differ in exactly one position, found {}",
            diff.len()
        )));
    }
    let k = diff[0];
    let stream = IndexStream::generate(cfg.seed, data.len(), cfg.iterations)?;
    let indicators = stream.indicator_sums(k, &cfg.schedule);
    let base = sgd_run_with_stream(data, m, cfg, w0, stream.clone())?;
    let other = sgd_run_with_stream(neighbor, m, cfg, w0, stream)?;
    Ok(CoupledRun {
        base,
        neighbor: other,
        replaced_index: k,
        indicators,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrmOptions {
    /// Stopping tolerance on the gradient-mapping norm. Defaults to
    /// `1e-10 (1 + ||grad F_S(0)||)`.
    pub tol: Option<f64>,
    pub max_iters: usize,
    /// Constrain the minimizer to a ball (the parameter space `W`).
    pub ball_radius: Option<f64>,
    pub warm_start: Option<Vec<f64>>,
    #[serde(default)]
    pub record_objective: bool,
}

impl Default for RrmOptions {
    fn default() -> Self {
        RrmOptions {
            tol: None,
            max_iters: 100_000,
            ball_radius: None,
            warm_start: None,
            record_objective: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrmSolution {
    pub w: Vec<f64>,
    pub iterations: usize,
    /// Gradient-mapping norm at the returned point's predecessor.
    pub residual: f64,
    pub tol: f64,
    pub objective: f64,
    /// `F_S` after every accepted step, when requested.
    pub objective_trace: Option<Vec<f64>>,
}

/// Upper bound on the smoothness of the mixed empirical risk on `data`.
pub fn empirical_smoothness_bound(data: &Dataset, m: &MixedLoss) -> Result<f64> {
    let (x, y) = data.bounds();
    let x = x.max(f64::MIN_POSITIVE);
    let bf = match m.pointwise {
        PointwiseLoss::Squared => 2.0 * x * x,
        PointwiseLoss::Logistic => y * y * x * x / 4.0,
    };
    let bg = match m.pairwise {
        PairwiseLoss::SquaredRanking => 8.0 * x * x,
        PairwiseLoss::LinkConstraint { lambda3 } => 8.0 * x * x * lambda3.max(1.0),
        PairwiseLoss::HingeRanking => {
            return Err(Error::Unsupported(
                "regularized risk minimization needs a smooth pairwise loss".into(),
            ))
        }
    };
    Ok(if m.tau == 1.0 {
        bf
    } else if m.tau == 0.0 {
        bg
    } else {
        m.tau * bf + (1.0 - m.tau) * bg
    })
}

/// `A(S) = argmin_{w in W} R_S(w) + r(w)`.
///
/// Proximal gradient descent with backtracking: the smooth part is
/// `R_S + sigma/2 ||w||^2`, the prox handles `lambda2 ||w||_1` and the
/// optional ball constraint (`prox = project o soft-threshold`, exact for an
/// l2 ball). The step never drops below `1/beta_F`, at which the sufficient
/// decrease condition holds in exact arithmetic, so objective values are
/// non-increasing.
pub fn rrm_solve(data: &Dataset, m: &MixedLoss, r: &Regularizer, opts: &RrmOptions) -> Result<RrmSolution> {
    r.validate()?;
    if r.sigma <= 0.0 {
        return Err(Error::InvalidConfig(
            "regularized risk minimization needs sigma > 0 for strong convexity".into(),
        ));
    }
    let d = data.dim();
    let beta_f = empirical_smoothness_bound(data, m)? + r.sigma;
    let min_step = 1.0 / beta_f;

    let smooth = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (v, mut g) = empirical_mixed_risk_grad(data, m, w)?;
        for (gk, wk) in g.iter_mut().zip(w) {
            *gk += r.sigma * wk;
        }
        Ok((v + 0.5 * r.sigma * crate::linalg::dot(w, w), g))
    };
    let l1 = |w: &[f64]| r.lambda2 * w.iter().map(|v| v.abs()).sum::<f64>();
    let prox = |v: &mut Vec<f64>, step: f64| {
        if r.lambda2 > 0.0 {
            soft_threshold(v, step * r.lambda2);
        }
        if let Some(b) = opts.ball_radius {
            project_ball(v, b);
        }
    };

    let tol = match opts.tol {
        Some(t) if t > 0.0 && t.is_finite() => t,
        Some(t) => return Err(Error::InvalidConfig(format!("tolerance must be positive, got {t}"))),
        None => {
            let (_, g0) = smooth(&vec![0.0; d])?;
            1e-10 * (1.0 + norm2(&g0))
        }
    };

    let mut x = match &opts.warm_start {
        Some(w) if w.len() == d && all_finite(w) => w.clone(),
        Some(_) => return Err(Error::InvalidInput("warm start has wrong dimension".into())),
        None => vec![0.0; d],
    };
    if let Some(b) = opts.ball_radius {
        project_ball(&mut x, b);
    }
    let (mut fx, mut gx) = smooth(&x)?;
    let mut trace = opts.record_objective.then(|| vec![fx + l1(&x)]);
    let mut step = min_step;
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iters {
        let (xn, fxn, gxn) = loop {
            let mut cand: Vec<f64> = x.iter().zip(&gx).map(|(a, g)| a - step * g).collect();
            prox(&mut cand, step);
            let (fc, gc) = smooth(&cand)?;
            let delta: Vec<f64> = cand.iter().zip(&x).map(|(a, b)| a - b).collect();
            let model = fx + crate::linalg::dot(&gx, &delta) + crate::linalg::dot(&delta, &delta) / (2.0 * step);
            if fc <= model || step <= min_step {
                residual = norm2(&delta) / step;
                break (cand, fc, gc);
            }
            step = (step * 0.5).max(min_step);
        };
        if !all_finite(&xn) {
            return Err(Error::Divergence { step: it });
        }
        x = xn;
        fx = fxn;
        gx = gxn;
        if let Some(t) = trace.as_mut() {
            t.push(fx + l1(&x));
        }
        if residual <= tol {
            return Ok(RrmSolution {
                objective: fx + l1(&x),
                w: x,
                iterations: it,
                residual,
                tol,
                objective_trace: trace,
            });
        }
        step *= 1.5;
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iters,
        residual,
    })
}

/// Approximations of `w* = argmin R + r` and `w*_R = argmin R`, obtained by
/// solving on a large independent sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub w_star: Vec<f64>,
    pub w_star_r: Vec<f64>,
    pub residual_star: f64,
    pub residual_star_r: f64,
    pub n_ref: usize,
    pub notes: String,
}

/// Ridge added when approximating the unregularized minimizer.
pub const REFERENCE_RIDGE: f64 = 1e-8;

pub fn reference_solution<G: SampleSource + ?Sized>(
    source: &G,
    m: &MixedLoss,
    r: &Regularizer,
    n_ref: usize,
    ball_radius: Option<f64>,
    seed_value: u64,
) -> Result<ReferenceSolution> {
    let data = source.draw(n_ref, seed::derive(seed_value, &[seed::tag::REFERENCE]))?;
    let opts = RrmOptions {
        ball_radius,
        ..RrmOptions::default()
    };
    let star = rrm_solve(&data, m, r, &opts)?;
    let star_r = rrm_solve(
        &data,
        m,
        &Regularizer::l2(REFERENCE_RIDGE),
        &RrmOptions {
            warm_start: Some(star.w.clone()),
            ..opts
        },
    )?;
    Ok(ReferenceSolution {
        w_star: star.w,
        w_star_r: star_r.w,
        residual_star: star.residual,
        residual_star_r: star_r.residual,
        n_ref,
        notes: format!(
            "proximal gradient on {n_ref} independent draws; w*_R uses ridge {REFERENCE_RIDGE:e}"
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Provenance, Sample, SyntheticGenerator};
    use crate::risk::regularized_objective;

    fn sq(tau: f64) -> MixedLoss {
        MixedLoss::new(PointwiseLoss::Squared, PairwiseLoss::SquaredRanking, tau).unwrap()
    }

    #[test]
    fn stream_never_repeats_an_index_within_a_pair() {
        let s = IndexStream::generate(3, 2, 1000).unwrap();
        assert!(s.pairs.iter().all(|(i, j)| i != j));
        assert_eq!(s, IndexStream::generate(3, 2, 1000).unwrap());
        assert!(IndexStream::generate(3, 1, 10).is_err());
    }

    #[test]
    fn one_step_by_hand() {
        // tau = 1, w0 = 0, z = (1, 1), eta = 0.5 -> w1 = 0 - 0.5 * 2 (0 - 1) * 1 = 1
        let d = Dataset::new(
            vec![Sample::new(vec![1.0], 1.0), Sample::new(vec![1.0], 1.0)],
            Provenance::external("t"),
        )
        .unwrap();
        let tr = sgd_run(&d, &sq(1.0), &SgdConfig::constant(0.5, 1, 0), &[0.0]).unwrap();
        assert_eq!(tr.w_final, vec![1.0]);
    }

    #[test]
    fn interpolating_start_is_a_fixed_point() {
        let g = SyntheticGenerator::standard(3, 0.0, 2);
        let d = g.sample(20).unwrap();
        let mut cfg = SgdConfig::constant(0.05, 200, 1);
        cfg.record_history = true;
        let tr = sgd_run(&d, &sq(0.5), &cfg, &g.true_w).unwrap();
        for w in tr.history.unwrap() {
            for (a, b) in w.iter().zip(&g.true_w) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn tau_zero_ignores_pointwise_loss() {
        let g = SyntheticGenerator::standard(3, 0.1, 2);
        let d = g.sample(20).unwrap();
        let cfg = SgdConfig::constant(0.05, 100, 7);
        let a = sgd_run(&d, &sq(0.0), &cfg, &[0.0; 3]).unwrap();
        let m = MixedLoss::new(PointwiseLoss::Logistic, PairwiseLoss::SquaredRanking, 0.0).unwrap();
        let b = sgd_run(&d, &m, &cfg, &[0.0; 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn replay_reproduces_bitwise() {
        let g = SyntheticGenerator::standard(4, 0.1, 5);
        let d = g.sample(30).unwrap();
        let cfg = SgdConfig::constant(0.02, 300, 9).with_projection(2.0);
        let tr = sgd_run(&d, &sq(0.3), &cfg, &[0.0; 4]).unwrap();
        let again = sgd_run_with_stream(&d, &sq(0.3), &cfg, &[0.0; 4], tr.stream.clone()).unwrap();
        assert_eq!(tr.w_final, again.w_final);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let g = SyntheticGenerator::standard(2, 0.1, 5);
        let d = g.sample(10).unwrap();
        let cfg = SgdConfig::constant(1e6, 500, 1);
        match sgd_run(&d, &sq(1.0), &cfg, &[0.0; 2]) {
            Err(Error::Divergence { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn start_outside_ball_rejected() {
        let g = SyntheticGenerator::standard(2, 0.1, 5);
        let d = g.sample(10).unwrap();
        let cfg = SgdConfig::constant(0.1, 5, 1).with_projection(1.0);
        assert!(matches!(sgd_run(&d, &sq(1.0), &cfg, &[3.0, 0.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn coupling_requires_single_difference() {
        let g = SyntheticGenerator::standard(2, 0.1, 5);
        let d = g.sample(10).unwrap();
        let cfg = SgdConfig::constant(0.1, 5, 1);
        assert!(matches!(sgd_coupled_pair(&d, &d, &sq(1.0), &cfg, &[0.0; 2]), Err(Error::Coupling(_))));
        let z = Sample::new(vec![0.1, 0.1], 0.0);
        let w = Sample::new(vec![0.2, 0.1], 0.0);
        let two = d.neighbor_ij(1, 4, &z, &w).unwrap();
        assert!(matches!(sgd_coupled_pair(&d, &two, &sq(1.0), &cfg, &[0.0; 2]), Err(Error::Coupling(_))));
    }

    #[test]
    fn scalar_stationarity() {
        // f = (w - 1)^2 with x = 1, y = 1; r = 0.5 w^2 -> w = 2/3
        let d = Dataset::new(
            vec![Sample::new(vec![1.0], 1.0), Sample::new(vec![1.0], 1.0)],
            Provenance::external("t"),
        )
        .unwrap();
        let sol = rrm_solve(&d, &sq(1.0), &Regularizer::l2(1.0), &RrmOptions::default()).unwrap();
        assert!((sol.w[0] - 2.0 / 3.0).abs() < 1e-9, "{}", sol.w[0]);
    }

    #[test]
    fn all_zero_data_gives_zero() {
        let d = Dataset::new(vec![Sample::new(vec![0.0, 0.0], 0.0); 5], Provenance::external("t")).unwrap();
        let sol = rrm_solve(&d, &sq(0.5), &Regularizer::l2(0.3), &RrmOptions::default()).unwrap();
        assert_eq!(sol.w, vec![0.0, 0.0]);
    }

    #[test]
    fn rrm_objective_is_monotone() {
        let g = SyntheticGenerator::standard(4, 0.2, 13);
        let d = g.sample(60).unwrap();
        let r = Regularizer::elastic(0.1, 0.01);
        let opts = RrmOptions {
            record_objective: true,
            ball_radius: Some(2.0),
            ..RrmOptions::default()
        };
        let sol = rrm_solve(&d, &sq(0.5), &r, &opts).unwrap();
        let tr = sol.objective_trace.unwrap();
        for w in tr.windows(2) {
            assert!(w[1] <= w[0] + 4.0 * f64::EPSILON * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
        let f = regularized_objective(&d, &sq(0.5), &sol.w, &r).unwrap();
        assert!((f - sol.objective).abs() < 1e-12);
    }

    #[test]
    fn rrm_rejects_bad_configs() {
        let g = SyntheticGenerator::standard(2, 0.2, 13);
        let d = g.sample(10).unwrap();
        assert!(matches!(
            rrm_solve(&d, &sq(0.5), &Regularizer::none(), &RrmOptions::default()),
            Err(Error::InvalidConfig(_))
        ));
        let hinge = MixedLoss::new(PointwiseLoss::Squared, PairwiseLoss::HingeRanking, 0.5).unwrap();
        assert!(matches!(
            rrm_solve(&d, &hinge, &Regularizer::l2(1.0), &RrmOptions::default()),
            Err(Error::Unsupported(_))
        ));
        let opts = RrmOptions {
            max_iters: 1,
            tol: Some(1e-300),
            ..RrmOptions::default()
        };
        assert!(matches!(
            rrm_solve(&d, &sq(0.5), &Regularizer::l2(0.01), &opts),
            Err(Error::NoConvergence { iterations: 1, .. })
        ));
    }
}
