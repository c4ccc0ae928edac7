//! Closed-form generalization and stability bounds.
//!
//! Every evaluator validates its domain and returns a [`BoundValue`] that
//! echoes its inputs. Integer rounding (`ceil(log2 n)`, `floor(n/2)`) is done
//! in integer arithmetic.

use std::f64::consts::{E, SQRT_2};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Sample, SampleSource};
use crate::error::{Error, Result};
use crate::linalg::tree_sum;
use crate::losses::MixedLoss;
use crate::seed::{self, tag};
use crate::stability::Trainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TheoremId {
    Thm1,
    Eqstab,
    Thm2hp,
    Lemma1,
    Lemma2,
    Lemma3,
    Thm4,
    Chernoff,
    Thm5,
    Cor2,
    Thm6,
    Thm7,
    Lemma4,
}

impl TheoremId {
    pub const ALL: [TheoremId; 13] = [
        TheoremId::Thm1,
        TheoremId::Eqstab,
        TheoremId::Thm2hp,
        TheoremId::Lemma1,
        TheoremId::Lemma2,
        TheoremId::Lemma3,
        TheoremId::Thm4,
        TheoremId::Chernoff,
        TheoremId::Thm5,
        TheoremId::Cor2,
        TheoremId::Thm6,
        TheoremId::Thm7,
        TheoremId::Lemma4,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            TheoremId::Thm1 => "thm1",
            TheoremId::Eqstab => "eqstab",
            TheoremId::Thm2hp => "thm2hp",
            TheoremId::Lemma1 => "lemma1",
            TheoremId::Lemma2 => "lemma2",
            TheoremId::Lemma3 => "lemma3",
            TheoremId::Thm4 => "thm4",
            TheoremId::Chernoff => "chernoff",
            TheoremId::Thm5 => "thm5",
            TheoremId::Cor2 => "cor2",
            TheoremId::Thm6 => "thm6",
            TheoremId::Thm7 => "thm7",
            TheoremId::Lemma4 => "lemma4",
        }
    }
}

impl fmt::Display for TheoremId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TheoremId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TheoremId::ALL
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown theorem id {s:?}")))
    }
}

/// Named inputs shared by all evaluators. Fields a theorem does not use are
/// left empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundInputs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(rename = "M", alias = "m", skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(rename = "L", alias = "l", skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(rename = "T", alias = "t", skip_serializing_if = "Option::is_none")]
    pub t: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emp_point: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emp_pair: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ind_i: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ind_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_point: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_pair: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h1_point: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h1_pair: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_sq_drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub theorem: TheoremId,
    pub value: f64,
    pub inputs: BoundInputs,
    /// False when a non-fatal precondition of the theorem is violated.
    pub precondition_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl BoundValue {
    fn new(theorem: TheoremId, value: f64, inputs: BoundInputs) -> Self {
        BoundValue {
            theorem,
            value,
            inputs,
            precondition_ok: true,
            note: None,
        }
    }
}

/// `ceil(log2 n)` for `n >= 1`.
pub fn ceil_log2(n: u64) -> u64 {
    if n <= 1 {
        0
    } else {
        (u64::BITS - (n - 1).leading_zeros()) as u64
    }
}

fn nonneg(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(Error::Domain(format!("{name} must be finite and nonnegative, got {v}")))
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Domain(format!("{name} must be positive, got {v}")))
    }
}

fn unit_tau(tau: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&tau) {
        Ok(tau)
    } else {
        Err(Error::Domain(format!("tau must lie in [0, 1], got {tau}")))
    }
}

/// Confidence levels for the high-probability bounds: `0 < delta <= 1/e`.
fn delta_highprob(delta: f64) -> Result<f64> {
    if delta > 0.0 && delta <= (-1.0f64).exp() {
        Ok(delta)
    } else {
        Err(Error::Domain(format!("delta must lie in (0, 1/e], got {delta}")))
    }
}

fn delta_unit(delta: f64) -> Result<f64> {
    if delta > 0.0 && delta < 1.0 {
        Ok(delta)
    } else {
        Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")))
    }
}

fn min_n(n: u64, k: u64) -> Result<u64> {
    if n >= k {
        Ok(n)
    } else {
        Err(Error::Domain(format!("n must be at least {k}, got {n}")))
    }
}

/// High-probability generalization bound for a `gamma`-uniformly stable
/// algorithm.
pub fn thm1_bound(gamma: f64, m: f64, tau: f64, n: u64, delta: f64) -> Result<BoundValue> {
    let gamma = nonneg("gamma", gamma)?;
    let m = nonneg("M", m)?;
    let tau = unit_tau(tau)?;
    let n = min_n(n, 2)?;
    let delta = delta_highprob(delta)?;
    let le = (E / delta).ln();
    let value = (4.0 - 2.0 * tau) * gamma
        + E * (4.0 * m * (4.0 - 3.0 * tau) * le.sqrt() / (n as f64).sqrt()
            + 24.0 * SQRT_2 * (2.0 - tau) * gamma * ceil_log2(n) as f64 * le);
    Ok(BoundValue::new(
        TheoremId::Thm1,
        value,
        BoundInputs {
            gamma: Some(gamma),
            m: Some(m),
            tau: Some(tau),
            n: Some(n),
            delta: Some(delta),
            ..BoundInputs::default()
        },
    ))
}

/// Loss-scale per-run SGD stability: `2L^2 ind_i + 2L^2 (1-tau) ind_j`.
/// Dividing by `L` gives the parameter drift bound.
pub fn sgd_stability_rhs(ind_i: f64, ind_j: f64, l: f64, tau: f64) -> Result<BoundValue> {
    let ind_i = nonneg("ind_i", ind_i)?;
    let ind_j = nonneg("ind_j", ind_j)?;
    let l = nonneg("L", l)?;
    let tau = unit_tau(tau)?;
    let value = if tau == 1.0 {
        2.0 * l * l * ind_i
    } else {
        2.0 * l * l * ind_i + 2.0 * l * l * (1.0 - tau) * ind_j
    };
    Ok(BoundValue::new(
        TheoremId::Eqstab,
        value,
        BoundInputs {
            ind_i: Some(ind_i),
            ind_j: Some(ind_j),
            l: Some(l),
            tau: Some(tau),
            ..BoundInputs::default()
        },
    ))
}

/// High-probability parameter drift of constant-step SGD after `t` steps.
pub fn sgd_drift_highprob(l: f64, eta: f64, tau: f64, t: usize, n: usize, delta: f64) -> Result<BoundValue> {
    let l = nonneg("L", l)?;
    let eta = positive("eta", eta)?;
    let tau = unit_tau(tau)?;
    let n = min_n(n as u64, 1)?;
    let delta = delta_highprob(delta)?;
    let ld = (1.0 / delta).ln();
    let ratio = t as f64 / n as f64;
    let value = 2.0 * l * eta * (2.0 - tau) * (ratio + ld + (2.0 * ratio * ld).sqrt());
    Ok(BoundValue::new(
        TheoremId::Thm2hp,
        value,
        BoundInputs {
            l: Some(l),
            eta: Some(eta),
            tau: Some(tau),
            t: Some(t as u64),
            n: Some(n),
            delta: Some(delta),
            ..BoundInputs::default()
        },
    ))
}

/// Uniform stability constant of regularized risk minimization,
/// `4 L^2 (2 - tau) / (n sigma)`.
pub fn rrm_stability_const(l: f64, sigma: f64, tau: f64, n: u64) -> Result<BoundValue> {
    let l = nonneg("L", l)?;
    let sigma = positive("sigma", sigma)?;
    let tau = unit_tau(tau)?;
    let n = min_n(n, 1)?;
    let value = 4.0 * l * l * (2.0 - tau) / (n as f64 * sigma);
    Ok(BoundValue::new(
        TheoremId::Lemma1,
        value,
        BoundInputs {
            l: Some(l),
            sigma: Some(sigma),
            tau: Some(tau),
            n: Some(n),
            ..BoundInputs::default()
        },
    ))
}

/// `E ||A(S) - w*||^2 <= 4 gamma (2 - tau) / sigma`.
pub fn lemma2_bound(gamma: f64, tau: f64, sigma: f64) -> Result<BoundValue> {
    let gamma = nonneg("gamma", gamma)?;
    let tau = unit_tau(tau)?;
    let sigma = positive("sigma", sigma)?;
    Ok(BoundValue::new(
        TheoremId::Lemma2,
        4.0 * gamma * (2.0 - tau) / sigma,
        BoundInputs {
            gamma: Some(gamma),
            tau: Some(tau),
            sigma: Some(sigma),
            ..BoundInputs::default()
        },
    ))
}

/// Mixed Bernstein deviation of `|R(w*) - R_S(w*)|`.
pub fn bernstein_mixed_bound(b: f64, theta: f64, tau: f64, n: u64, delta: f64) -> Result<BoundValue> {
    let b = nonneg("b", b)?;
    let theta = nonneg("theta", theta)?;
    let tau = unit_tau(tau)?;
    let n = min_n(n, 2)?;
    let delta = delta_unit(delta)?;
    let ld = (1.0 / delta).ln();
    let half = (n / 2) as f64;
    let nf = n as f64;
    let point = 2.0 * b * ld / (3.0 * nf) + (2.0 * theta * ld / nf).sqrt();
    let pair = 2.0 * b * ld / (3.0 * half) + (2.0 * theta * ld / half).sqrt();
    let value = if tau == 1.0 {
        point
    } else if tau == 0.0 {
        pair
    } else {
        (1.0 - tau) * pair + tau * point
    };
    Ok(BoundValue::new(
        TheoremId::Lemma3,
        value,
        BoundInputs {
            b: Some(b),
            theta: Some(theta),
            tau: Some(tau),
            n: Some(n),
            delta: Some(delta),
            ..BoundInputs::default()
        },
    ))
}

/// High-probability generalization bound for regularized risk minimization.
pub fn thm4_bound(b: f64, theta: f64, l: f64, sigma: f64, tau: f64, n: u64, delta: f64) -> Result<BoundValue> {
    let b = nonneg("b", b)?;
    let theta = nonneg("theta", theta)?;
    let l = nonneg("L", l)?;
    let sigma = positive("sigma", sigma)?;
    let tau = unit_tau(tau)?;
    let n = min_n(n, 2)?;
    let delta = delta_highprob(delta)?;
    let nf = n as f64;
    let ld = (1.0 / delta).ln();
    let le = (E / delta).ln();
    let c = l * l / (nf * sigma);
    let k = 2.0 - tau;
    let value = 2.0 * b * ld / (3.0 * nf)
        + (2.0 * theta * ld / nf).sqrt()
        + 8.0 * c * k * k
        + E * (16.0 * c * k * (4.0 - 3.0 * tau) * le.sqrt() + 96.0 * SQRT_2 * c * k * k * ceil_log2(n) as f64 * le);
    Ok(BoundValue::new(
        TheoremId::Thm4,
        value,
        BoundInputs {
            b: Some(b),
            theta: Some(theta),
            l: Some(l),
            sigma: Some(sigma),
            tau: Some(tau),
            n: Some(n),
            delta: Some(delta),
            ..BoundInputs::default()
        },
    ))
}

/// Chernoff upper tail for a sum of independent indicators with mean `mu`.
pub fn chernoff_tail(mu: f64, delta: f64) -> Result<BoundValue> {
    let mu = nonneg("mu", mu)?;
    let delta = delta_unit(delta)?;
    let ld = (1.0 / delta).ln();
    Ok(BoundValue::new(
        TheoremId::Chernoff,
        mu + ld + (2.0 * mu * ld).sqrt(),
        BoundInputs {
            mu: Some(mu),
            delta: Some(delta),
            ..BoundInputs::default()
        },
    ))
}

/// Expected generalization gap bound from on-average loss stability.
pub fn thm5_relation(v_point: f64, v_pair: f64) -> Result<BoundValue> {
    if !(v_point.is_finite() && v_pair.is_finite()) {
        return Err(Error::Domain("stability estimates must be finite".into()));
    }
    Ok(BoundValue::new(
        TheoremId::Thm5,
        v_point.max(v_pair),
        BoundInputs {
            v_point: Some(v_point),
            v_pair: Some(v_pair),
            ..BoundInputs::default()
        },
    ))
}

/// The l1 argument-stability variant, `L max(h1_point, h1_pair)`.
pub fn cor2_relation(l: f64, h1_point: f64, h1_pair: f64) -> Result<BoundValue> {
    let l = nonneg("L", l)?;
    let h1_point = nonneg("h1_point", h1_point)?;
    let h1_pair = nonneg("h1_pair", h1_pair)?;
    Ok(BoundValue::new(
        TheoremId::Cor2,
        l * h1_point.max(h1_pair),
        BoundInputs {
            l: Some(l),
            h1_point: Some(h1_point),
            h1_pair: Some(h1_pair),
            ..BoundInputs::default()
        },
    ))
}

/// Smooth-loss bound in terms of empirical risks. With `epsilon = None` the
/// infimum over `epsilon > 0` is returned, attained in the limit
/// `epsilon -> 0`.
pub fn thm6_bound(
    beta: f64,
    gamma: f64,
    epsilon: Option<f64>,
    tau: f64,
    emp_point: f64,
    emp_pair: f64,
) -> Result<BoundValue> {
    let beta = nonneg("beta", beta)?;
    let gamma = positive("gamma", gamma)?;
    let eps = match epsilon {
        Some(e) => positive("epsilon", e)?,
        None => 0.0,
    };
    let tau = unit_tau(tau)?;
    let emp_point = nonneg("emp_point", emp_point)?;
    let emp_pair = nonneg("emp_pair", emp_pair)?;
    let gamma_emp = crate::risk::mix(tau, emp_point, emp_pair);
    let value = beta / gamma * gamma_emp + (beta + eps) * gamma * (2.0 - 1.5 * tau);
    let mut out = BoundValue::new(
        TheoremId::Thm6,
        value,
        BoundInputs {
            beta: Some(beta),
            gamma: Some(gamma),
            epsilon,
            tau: Some(tau),
            emp_point: Some(emp_point),
            emp_pair: Some(emp_pair),
            ..BoundInputs::default()
        },
    );
    if epsilon.is_none() {
        out.note = Some("infimum over epsilon > 0, epsilon -> 0".into());
    }
    Ok(out)
}

/// Bound for strongly convex smooth objectives. The requirement
/// `beta <= sigma n / (4 (2 - tau))` is reported through `precondition_ok`.
pub fn thm7_bound(
    beta: f64,
    sigma: f64,
    epsilon: f64,
    tau: f64,
    n: u64,
    emp_point: f64,
    emp_pair: f64,
) -> Result<BoundValue> {
    let beta = nonneg("beta", beta)?;
    let sigma = positive("sigma", sigma)?;
    let eps = positive("epsilon", epsilon)?;
    let tau = unit_tau(tau)?;
    let n = min_n(n, 1)?;
    let emp_point = nonneg("emp_point", emp_point)?;
    let emp_pair = nonneg("emp_pair", emp_pair)?;
    let nf = n as f64;
    let k = 2.0 - 1.5 * tau;
    let denom = sigma * sigma * nf * nf;
    let mut value = beta * tau * emp_point / eps + 384.0 * tau * tau * (eps + beta) * beta / denom * k * emp_point;
    if tau != 1.0 {
        value += beta * (1.0 - tau) * emp_pair / eps
            + 768.0 * (1.0 - tau) * (1.0 - tau) * (eps + beta) * beta / denom * k * emp_pair;
    }
    let mut out = BoundValue::new(
        TheoremId::Thm7,
        value,
        BoundInputs {
            beta: Some(beta),
            sigma: Some(sigma),
            epsilon: Some(eps),
            tau: Some(tau),
            n: Some(n),
            emp_point: Some(emp_point),
            emp_pair: Some(emp_pair),
            ..BoundInputs::default()
        },
    );
    if beta > sigma * nf / (4.0 * (2.0 - tau)) {
        out.precondition_ok = false;
        out.note = Some(format!(
            "beta = {beta} exceeds sigma n / (4 (2 - tau)) = {}",
            sigma * nf / (4.0 * (2.0 - tau))
        ));
    }
    Ok(out)
}

/// Generalization bound through the mean squared replace-one drift.
pub fn lemma4_rhs(
    beta: f64,
    epsilon: f64,
    tau: f64,
    emp_point: f64,
    emp_pair: f64,
    mean_sq_drift: f64,
) -> Result<BoundValue> {
    let beta = nonneg("beta", beta)?;
    let eps = positive("epsilon", epsilon)?;
    let tau = unit_tau(tau)?;
    let emp_point = nonneg("emp_point", emp_point)?;
    let emp_pair = nonneg("emp_pair", emp_pair)?;
    let drift = nonneg("mean_sq_drift", mean_sq_drift)?;
    let mut value = beta * tau * emp_point / eps + (eps + beta) * (2.0 - 1.5 * tau) * drift;
    if tau != 1.0 {
        value += beta * (1.0 - tau) * emp_pair / eps;
    }
    Ok(BoundValue::new(
        TheoremId::Lemma4,
        value,
        BoundInputs {
            beta: Some(beta),
            epsilon: Some(eps),
            tau: Some(tau),
            emp_point: Some(emp_point),
            emp_pair: Some(emp_pair),
            mean_sq_drift: Some(drift),
            ..BoundInputs::default()
        },
    ))
}

fn need<T: Copy>(v: Option<T>, name: &str, th: TheoremId) -> Result<T> {
    v.ok_or_else(|| Error::Domain(format!("{th} needs input {name}")))
}

/// Evaluate a theorem from named inputs.
pub fn evaluate(theorem: TheoremId, i: &BoundInputs) -> Result<BoundValue> {
    let th = theorem;
    match theorem {
        TheoremId::Thm1 => thm1_bound(
            need(i.gamma, "gamma", th)?,
            need(i.m, "M", th)?,
            need(i.tau, "tau", th)?,
            need(i.n, "n", th)?,
            need(i.delta, "delta", th)?,
        ),
        TheoremId::Eqstab => sgd_stability_rhs(
            need(i.ind_i, "ind_i", th)?,
            need(i.ind_j, "ind_j", th)?,
            need(i.l, "L", th)?,
            need(i.tau, "tau", th)?,
        ),
        TheoremId::Thm2hp => sgd_drift_highprob(
            need(i.l, "L", th)?,
            need(i.eta, "eta", th)?,
            need(i.tau, "tau", th)?,
            need(i.t, "T", th)? as usize,
            need(i.n, "n", th)? as usize,
            need(i.delta, "delta", th)?,
        ),
        TheoremId::Lemma1 => rrm_stability_const(
            need(i.l, "L", th)?,
            need(i.sigma, "sigma", th)?,
            need(i.tau, "tau", th)?,
            need(i.n, "n", th)?,
        ),
        TheoremId::Lemma2 => lemma2_bound(
            need(i.gamma, "gamma", th)?,
            need(i.tau, "tau", th)?,
            need(i.sigma, "sigma", th)?,
        ),
        TheoremId::Lemma3 => bernstein_mixed_bound(
            need(i.b, "b", th)?,
            need(i.theta, "theta", th)?,
            need(i.tau, "tau", th)?,
            need(i.n, "n", th)?,
            need(i.delta, "delta", th)?,
        ),
        TheoremId::Thm4 => thm4_bound(
            need(i.b, "b", th)?,
            need(i.theta, "theta", th)?,
            need(i.l, "L", th)?,
            need(i.sigma, "sigma", th)?,
            need(i.tau, "tau", th)?,
            need(i.n, "n", th)?,
            need(i.delta, "delta", th)?,
        ),
        TheoremId::Chernoff => chernoff_tail(need(i.mu, "mu", th)?, need(i.delta, "delta", th)?),
        TheoremId::Thm5 => thm5_relation(need(i.v_point, "v_point", th)?, need(i.v_pair, "v_pair", th)?),
        TheoremId::Cor2 => cor2_relation(
            need(i.l, "L", th)?,
            need(i.h1_point, "h1_point", th)?,
            need(i.h1_pair, "h1_pair", th)?,
        ),
        TheoremId::Thm6 => thm6_bound(
            need(i.beta, "beta", th)?,
            need(i.gamma, "gamma", th)?,
            i.epsilon,
            need(i.tau, "tau", th)?,
            need(i.emp_point, "emp_point", th)?,
            need(i.emp_pair, "emp_pair", th)?,
        ),
        TheoremId::Thm7 => thm7_bound(
            need(i.beta, "beta", th)?,
            need(i.sigma, "sigma", th)?,
            need(i.epsilon, "epsilon", th)?,
            need(i.tau, "tau", th)?,
            need(i.n, "n", th)?,
            need(i.emp_point, "emp_point", th)?,
            need(i.emp_pair, "emp_pair", th)?,
        ),
        TheoremId::Lemma4 => lemma4_rhs(
            need(i.beta, "beta", th)?,
            need(i.epsilon, "epsilon", th)?,
            need(i.tau, "tau", th)?,
            need(i.emp_point, "emp_point", th)?,
            need(i.emp_pair, "emp_pair", th)?,
            need(i.mean_sq_drift, "mean_sq_drift", th)?,
        ),
    }
}

/// Estimate of `M = max_{z, z'} max(|E_S f(A(S); z)|, |E_S g(A(S); z, z')|)`:
/// the expectation over `S` is a mean over `resamples` trained models, the
/// max runs over a probe set (all ordered pairs for `g`).
#[allow(clippy::too_many_arguments)]
pub fn estimate_m<T: Trainer + ?Sized, G: SampleSource + ?Sized>(
    trainer: &T,
    source: &G,
    loss: &MixedLoss,
    n: usize,
    resamples: usize,
    probe: &Dataset,
    seed_value: u64,
) -> Result<f64> {
    if resamples == 0 || probe.is_empty() {
        return Err(Error::InvalidConfig("need at least one resample and probe point".into()));
    }
    let models = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let s = source.draw(n, seed::derive(seed_value, &[tag::DATA, r as u64]))?;
            trainer.train(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = probe.samples();
    let k = models.len() as f64;
    let point = pool
        .iter()
        .map(|z| {
            let vals: Vec<f64> = models.iter().map(|w| loss.pointwise.value_unchecked(w, z)).collect();
            (tree_sum(&vals) / k).abs()
        })
        .fold(0.0, f64::max);
    let pair = pool
        .par_iter()
        .map(|z| {
            pool.iter()
                .map(|zt| {
                    let vals: Vec<f64> = models.iter().map(|w| loss.pairwise.value_unchecked(w, z, zt)).collect();
                    (tree_sum(&vals) / k).abs()
                })
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    Ok(point.max(pair))
}

/// Range and variance constants at a reference model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeVariance {
    pub b: f64,
    pub theta: f64,
}

/// `b` is the largest loss value over the sample (pointwise) and over all
/// ordered pairs (pairwise); `theta` is the larger of the two sample
/// variances, the pairwise one taken over disjoint consecutive pairs so its
/// terms are independent.
pub fn estimate_b_theta(w_star: &[f64], loss: &MixedLoss, sample: &Dataset) -> Result<RangeVariance> {
    let z: &[Sample] = sample.samples();
    if z.len() < 4 {
        return Err(Error::InsufficientData {
            n: z.len(),
            required: 4,
        });
    }
    let f: Vec<f64> = z.iter().map(|s| loss.pointwise.value_unchecked(w_star, s)).collect();
    let g_max = z
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            z.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| loss.pairwise.value_unchecked(w_star, a, b))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    let g_disjoint: Vec<f64> = z
        .chunks_exact(2)
        .map(|p| loss.pairwise.value_unchecked(w_star, &p[0], &p[1]))
        .collect();
    let var = |xs: &[f64]| {
        let m = tree_sum(xs) / xs.len() as f64;
        let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
        tree_sum(&sq) / (xs.len() - 1) as f64
    };
    let f_max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RangeVariance {
        b: f_max.max(g_max).max(0.0),
        theta: var(&f).max(var(&g_disjoint)),
    })
}
