//! Empirical and Monte Carlo population risks, the regularized objective
//! `F_S = R_S + r`, and the generalization gap.
//!
//! The pairwise empirical risk averages over ordered pairs `i != j` with
//! denominator `n(n-1)`. For the squared ranking loss it is evaluated in
//! `O(n)` through the identity
//! `sum_{i,j} (r_i - r_j)^2 = 2n sum_i (r_i - mean r)^2`
//! with residuals `r_i = y_i - <w, x_i>`. Every other pairwise loss is
//! symmetric and is summed over unordered pairs in a fixed row-by-row order
//! (rows computed in parallel, reduced by [`tree_sum`]), so the result does
//! not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, SampleSource};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, dot, mean_and_se, tree_sum, tree_sum_vecs};
use crate::losses::{MixedLoss, PairwiseLoss, PointwiseLoss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub r_point_emp: f64,
    pub r_pair_emp: f64,
    pub r_mixed_emp: f64,
    pub r_mixed_pop_estimate: Option<f64>,
    pub pop_std_error: Option<f64>,
    pub n_pop: usize,
}

/// `r(w) = sigma/2 ||w||^2 + lambda2 ||w||_1`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub sigma: f64,
    pub lambda2: f64,
}

impl Regularizer {
    pub fn none() -> Self {
        Regularizer {
            sigma: 0.0,
            lambda2: 0.0,
        }
    }

    pub fn l2(sigma: f64) -> Self {
        Regularizer { sigma, lambda2: 0.0 }
    }

    pub fn elastic(sigma: f64, lambda2: f64) -> Self {
        Regularizer { sigma, lambda2 }
    }

    pub fn kind(&self) -> &'static str {
        if self.lambda2 > 0.0 {
            "elastic"
        } else {
            "l2"
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0 && self.lambda2.is_finite() && self.lambda2 >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid regularizer {self:?}")));
        }
        Ok(())
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        let l1: f64 = w.iter().map(|v| v.abs()).sum();
        0.5 * self.sigma * dot(w, w) + self.lambda2 * l1
    }
}

fn check_model(s: &Dataset, w: &[f64]) -> Result<()> {
    if w.len() != s.dim() {
        return Err(Error::InvalidInput(format!(
            "model has dimension {}, data has {}",
            w.len(),
            s.dim()
        )));
    }
    if !all_finite(w) {
        return Err(Error::Numeric("model is not finite".into()));
    }
    Ok(())
}

/// `(1/n) sum_i f(w; z_i)`
pub fn pointwise_risk(s: &Dataset, f: PointwiseLoss, w: &[f64]) -> f64 {
    let vals: Vec<f64> = s.samples().iter().map(|z| f.value_unchecked(w, z)).collect();
    tree_sum(&vals) / s.len() as f64
}

/// `(1/(n(n-1))) sum_{i != j} g(w; z_i, z_j)`; requires `n >= 2`.
pub fn pairwise_risk(s: &Dataset, g: PairwiseLoss, w: &[f64]) -> Result<f64> {
    let n = s.len();
    if n < 2 {
        return Err(Error::InsufficientData { n, required: 2 });
    }
    let nn = (n * (n - 1)) as f64;
    let z = s.samples();
    if let PairwiseLoss::SquaredRanking = g {
        let r: Vec<f64> = z.iter().map(|zi| zi.y - dot(w, &zi.x)).collect();
        let mean = tree_sum(&r) / n as f64;
        let sq: Vec<f64> = r.iter().map(|v| (v - mean) * (v - mean)).collect();
        return Ok(2.0 * n as f64 * tree_sum(&sq) / nn);
    }
    let total = if g.is_symmetric() {
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let vals: Vec<f64> = (i + 1..n).map(|j| g.value_unchecked(w, &z[i], &z[j])).collect();
                tree_sum(&vals)
            })
            .collect();
        2.0 * tree_sum(&rows)
    } else {
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let vals: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| g.value_unchecked(w, &z[i], &z[j]))
                    .collect();
                tree_sum(&vals)
            })
            .collect();
        tree_sum(&rows)
    };
    Ok(total / nn)
}

/// Gradient of [`pointwise_risk`].
pub fn pointwise_risk_grad(s: &Dataset, f: PointwiseLoss, w: &[f64]) -> (f64, Vec<f64>) {
    let n = s.len() as f64;
    let mut g = vec![0.0; w.len()];
    let vals: Vec<f64> = s
        .samples()
        .iter()
        .map(|z| f.accumulate(w, z, 1.0 / n, &mut g))
        .collect();
    (tree_sum(&vals) / n, g)
}

/// Gradient of [`pairwise_risk`].
pub fn pairwise_risk_grad(s: &Dataset, g: PairwiseLoss, w: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = s.len();
    if n < 2 {
        return Err(Error::InsufficientData { n, required: 2 });
    }
    let d = w.len();
    let z = s.samples();
    let nn = (n * (n - 1)) as f64;
    if let PairwiseLoss::SquaredRanking = g {
        let r: Vec<f64> = z.iter().map(|zi| zi.y - dot(w, &zi.x)).collect();
        let rbar = tree_sum(&r) / n as f64;
        let mut xbar = vec![0.0; d];
        for zi in z {
            axpy(1.0 / n as f64, &zi.x, &mut xbar);
        }
        let mut cross = vec![0.0; d];
        let mut sq = Vec::with_capacity(n);
        for (zi, ri) in z.iter().zip(&r) {
            let c = ri - rbar;
            sq.push(c * c);
            for k in 0..d {
                cross[k] += c * (zi.x[k] - xbar[k]);
            }
        }
        let value = 2.0 * n as f64 * tree_sum(&sq) / nn;
        let grad = cross.iter().map(|c| -4.0 * c / (n - 1) as f64).collect();
        return Ok((value, grad));
    }
    let symmetric = g.is_symmetric();
    let rows: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0; d];
            let vals: Vec<f64> = if symmetric {
                (i + 1..n)
                    .map(|j| g.accumulate(w, &z[i], &z[j], 1.0, &mut acc))
                    .collect()
            } else {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| g.accumulate(w, &z[i], &z[j], 1.0, &mut acc))
                    .collect()
            };
            (tree_sum(&vals), acc)
        })
        .collect();
    let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let grads: Vec<Vec<f64>> = rows.into_iter().map(|r| r.1).collect();
    let factor = if symmetric { 2.0 } else { 1.0 };
    let value = factor * tree_sum(&values) / nn;
    let grad = tree_sum_vecs(&grads, d)
        .into_iter()
        .map(|v| factor * v / nn)
        .collect();
    Ok((value, grad))
}

/// Empirical pointwise, pairwise and mixed risks at `w`.
///
/// At `tau = 1` the pairwise part is not needed and a single sample is
/// allowed (the pairwise risk is then reported as 0, the empty average).
pub fn empirical_mixed_risk(s: &Dataset, m: &MixedLoss, w: &[f64]) -> Result<RiskReport> {
    check_model(s, w)?;
    let n = s.len();
    if n == 0 {
        return Err(Error::InsufficientData { n, required: 1 });
    }
    if m.tau < 1.0 && n < 2 {
        return Err(Error::InsufficientData { n, required: 2 });
    }
    let rp = pointwise_risk(s, m.pointwise, w);
    let rq = if n >= 2 { pairwise_risk(s, m.pairwise, w)? } else { 0.0 };
    Ok(RiskReport {
        r_point_emp: rp,
        r_pair_emp: rq,
        r_mixed_emp: mix(m.tau, rp, rq),
        r_mixed_pop_estimate: None,
        pop_std_error: None,
        n_pop: 0,
    })
}

/// `tau a + (1 - tau) b`, exact at the endpoints.
#[inline]
pub(crate) fn mix(tau: f64, a: f64, b: f64) -> f64 {
    if tau == 1.0 {
        a
    } else if tau == 0.0 {
        b
    } else {
        tau * a + (1.0 - tau) * b
    }
}

/// Mixed empirical risk and its gradient.
pub fn empirical_mixed_risk_grad(s: &Dataset, m: &MixedLoss, w: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_model(s, w)?;
    let n = s.len();
    if m.tau < 1.0 && n < 2 {
        return Err(Error::InsufficientData { n, required: 2 });
    }
    if m.tau == 1.0 {
        return Ok(pointwise_risk_grad(s, m.pointwise, w));
    }
    let (vq, gq) = pairwise_risk_grad(s, m.pairwise, w)?;
    if m.tau == 0.0 {
        return Ok((vq, gq));
    }
    let (vp, gp) = pointwise_risk_grad(s, m.pointwise, w);
    let t = m.tau;
    let grad = gp.iter().zip(&gq).map(|(a, b)| t * a + (1.0 - t) * b).collect();
    Ok((t * vp + (1.0 - t) * vq, grad))
}

/// `F_S(w) = R_S(w) + r(w)`
pub fn regularized_objective(s: &Dataset, m: &MixedLoss, w: &[f64], r: &Regularizer) -> Result<f64> {
    r.validate()?;
    Ok(empirical_mixed_risk(s, m, w)?.r_mixed_emp + r.value(w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_pop: usize,
}

/// Monte Carlo estimate of the population risk `R(w)`.
///
/// The estimate is the empirical mixed risk on `n_pop` fresh draws. The
/// standard error treats consecutive disjoint pairs `(z_{2k}, z_{2k+1})` as
/// independent replicates of
/// `tau (f(z_{2k}) + f(z_{2k+1}))/2 + (1 - tau) g(z_{2k}, z_{2k+1})`.
pub fn population_risk_mc<G: SampleSource + ?Sized>(
    source: &G,
    m: &MixedLoss,
    w: &[f64],
    n_pop: usize,
    seed_value: u64,
) -> Result<PopulationEstimate> {
    if n_pop < 2 {
        return Err(Error::InsufficientData { n: n_pop, required: 2 });
    }
    let data = source.draw(n_pop, seed_value)?;
    let estimate = empirical_mixed_risk(&data, m, w)?.r_mixed_emp;
    let z = data.samples();
    let reps: Vec<f64> = (0..n_pop / 2)
        .map(|k| {
            let (a, b) = (&z[2 * k], &z[2 * k + 1]);
            let fp = if m.tau > 0.0 {
                0.5 * (m.pointwise.value_unchecked(w, a) + m.pointwise.value_unchecked(w, b))
            } else {
                0.0
            };
            let gp = if m.tau < 1.0 {
                m.pairwise.value_unchecked(w, a, b)
            } else {
                0.0
            };
            mix(m.tau, fp, gp)
        })
        .collect();
    let (_, se) = mean_and_se(&reps);
    Ok(PopulationEstimate {
        estimate,
        std_error: se,
        n_pop,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    /// `R(w) - R_S(w)`; positive means the population risk exceeds the
    /// training risk.
    pub gap: f64,
    pub population: f64,
    pub empirical: f64,
    pub std_error: f64,
}

pub fn generalization_gap<G: SampleSource + ?Sized>(
    s: &Dataset,
    m: &MixedLoss,
    w: &[f64],
    source: &G,
    n_pop: usize,
    seed_value: u64,
) -> Result<GapEstimate> {
    let emp = empirical_mixed_risk(s, m, w)?.r_mixed_emp;
    let pop = population_risk_mc(source, m, w, n_pop, seed_value)?;
    Ok(GapEstimate {
        gap: pop.estimate - emp,
        population: pop.estimate,
        empirical: emp,
        std_error: pop.std_error,
    })
}

/// Empirical risks together with a Monte Carlo population estimate.
pub fn risk_report<G: SampleSource + ?Sized>(
    s: &Dataset,
    m: &MixedLoss,
    w: &[f64],
    source: &G,
    n_pop: usize,
    seed_value: u64,
) -> Result<RiskReport> {
    let mut rep = empirical_mixed_risk(s, m, w)?;
    let pop = population_risk_mc(source, m, w, n_pop, seed_value)?;
    rep.r_mixed_pop_estimate = Some(pop.estimate);
    rep.pop_std_error = Some(pop.std_error);
    rep.n_pop = n_pop;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{FeatureLaw, Provenance, Sample, SyntheticGenerator};

    fn scalar_pair() -> Dataset {
        Dataset::new(
            vec![Sample::new(vec![1.0], 0.0), Sample::new(vec![1.0], 2.0)],
            Provenance::external("t"),
        )
        .unwrap()
    }

    fn sq(tau: f64) -> MixedLoss {
        MixedLoss::new(PointwiseLoss::Squared, PairwiseLoss::SquaredRanking, tau).unwrap()
    }

    #[test]
    fn scalar_hand_example() {
        let r = empirical_mixed_risk(&scalar_pair(), &sq(0.5), &[1.0]).unwrap();
        assert_eq!((r.r_point_emp, r.r_pair_emp, r.r_mixed_emp), (1.0, 4.0, 2.5));
    }

    #[test]
    fn zero_model_zero_labels() {
        let d = Dataset::new(
            vec![Sample::new(vec![0.3, 0.1], 0.0), Sample::new(vec![-0.2, 0.5], 0.0)],
            Provenance::external("t"),
        )
        .unwrap();
        let r = empirical_mixed_risk(&d, &sq(0.3), &[0.0, 0.0]).unwrap();
        assert_eq!((r.r_point_emp, r.r_pair_emp, r.r_mixed_emp), (0.0, 0.0, 0.0));
    }

    #[test]
    fn insufficient_data() {
        let one = Dataset::new(vec![Sample::new(vec![1.0], 1.0)], Provenance::external("t")).unwrap();
        assert!(matches!(
            empirical_mixed_risk(&one, &sq(0.5), &[0.0]),
            Err(Error::InsufficientData { n: 1, required: 2 })
        ));
        assert!(empirical_mixed_risk(&one, &sq(1.0), &[0.0]).is_ok());
    }

    #[test]
    fn regularized_objective_hand_values() {
        let s = scalar_pair();
        let m = sq(0.5);
        assert_eq!(regularized_objective(&s, &m, &[1.0], &Regularizer::l2(1.0)).unwrap(), 3.0);
        assert_eq!(regularized_objective(&s, &m, &[1.0], &Regularizer::none()).unwrap(), 2.5);
        let r0 = empirical_mixed_risk(&s, &m, &[0.0]).unwrap().r_mixed_emp;
        assert_eq!(regularized_objective(&s, &m, &[0.0], &Regularizer::elastic(3.0, 2.0)).unwrap(), r0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = SyntheticGenerator::standard(3, 0.3, 4);
        let s = g.sample(17).unwrap();
        let w = [0.2, -0.4, 0.9];
        for pair in [PairwiseLoss::SquaredRanking, PairwiseLoss::LinkConstraint { lambda3: 0.1 }] {
            let m = MixedLoss::new(PointwiseLoss::Logistic, pair, 0.4).unwrap();
            let (v, grad) = empirical_mixed_risk_grad(&s, &m, &w).unwrap();
            assert!((v - empirical_mixed_risk(&s, &m, &w).unwrap().r_mixed_emp).abs() < 1e-12);
            for k in 0..3 {
                let h = 1e-6;
                let mut wp = w;
                let mut wm = w;
                wp[k] += h;
                wm[k] -= h;
                let fd = (empirical_mixed_risk(&s, &m, &wp).unwrap().r_mixed_emp
                    - empirical_mixed_risk(&s, &m, &wm).unwrap().r_mixed_emp)
                    / (2.0 * h);
                assert!((fd - grad[k]).abs() < 1e-7, "{pair:?} k={k}: {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn point_mass_population_has_zero_error() {
        let mut g = SyntheticGenerator::standard(2, 0.0, 1);
        g.features = FeatureLaw::Fixed { x: vec![0.3, 0.4] };
        let m = sq(0.7);
        let w = [0.5, -1.0];
        let p = population_risk_mc(&g, &m, &w, 100, 9).unwrap();
        let z = Sample::new(vec![0.3, 0.4], dot(&g.true_w, &[0.3, 0.4]));
        let expected = 0.7 * m.pointwise.value_unchecked(&w, &z);
        assert!((p.estimate - expected).abs() < 1e-15);
        assert!(p.std_error < 1e-15);
        assert_eq!(population_risk_mc(&g, &m, &w, 100, 9).unwrap(), p);
    }

    #[test]
    fn gap_is_population_minus_empirical() {
        let g = SyntheticGenerator::standard(2, 0.1, 3);
        let s = g.sample(30).unwrap();
        let m = sq(0.5);
        let gap = generalization_gap(&s, &m, &[0.1, 0.2], &g, 500, 1).unwrap();
        assert_eq!(gap.gap, gap.population - gap.empirical);
    }
}
