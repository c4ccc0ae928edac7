//! Pointwise and pairwise losses, their mixture, and certified constants.
//!
//! Every loss here is linear-model based: predictions are `<w, x>`. Values
//! and gradients are computed in closed form. Constants (Lipschitz `L`,
//! smoothness `beta`) are certified on
//! `{ ||w|| <= B, ||x|| <= X_max, |y| <= Y_max }`:
//!
//! | loss              | L                        | beta               |
//! |-------------------|--------------------------|--------------------|
//! | squared           | 2 (B X + Y) X            | 2 X^2              |
//! | logistic          | Y X                      | Y^2 X^2 / 4        |
//! | squared-ranking   | 8 X (Y + B X)            | 8 X^2              |
//! | hinge-ranking     | 2 X                      | none (nonsmooth)   |
//! | link-constraint   | 8 B X^2 max(1, l3)       | 8 X^2 max(1, l3)   |
//!
//! Pairwise differences `x - x'` have norm at most `2X` and label gaps at most
//! `2Y`, which is where the factors of 2 and 8 come from.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, dot, norm2};
use crate::seed;

/// Region on which loss constants are certified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataBounds {
    pub ball_radius: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl DataBounds {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.ball_radius) || !ok(self.x_max) || !(self.y_max.is_finite() && self.y_max >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "ball radius and feature bound must be positive, label bound nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConstants {
    /// Bound on the gradient norm.
    pub lipschitz: f64,
    /// Gradient Lipschitz constant; `None` for nonsmooth losses.
    pub smoothness: Option<f64>,
    /// Strong convexity modulus (0 for merely convex losses).
    pub strong_convexity: f64,
    pub valid_on: DataBounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointwiseLoss {
    /// `(y - <w,x>)^2`
    Squared,
    /// `log(1 + exp(-y <w,x>))`
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PairwiseLoss {
    /// `((y - y') - <w, x - x'>)^2`
    SquaredRanking,
    /// `max(0, 1 - sign(y - y') <w, x - x'>)`
    HingeRanking,
    /// Must-link / cannot-link quadratic penalty: `<w, x - x'>^2` when both
    /// labels fall in the same class (`y >= 0`), `-lambda3 <w, x - x'>^2`
    /// otherwise. Per-pair values are negative on cannot-link pairs; only
    /// the aggregate over a dataset is certified nonnegative.
    LinkConstraint { lambda3: f64 },
}

#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn check_args(w: &[f64], zs: &[&Sample]) -> Result<()> {
    for z in zs {
        if z.dim() != w.len() {
            return Err(Error::InvalidInput(format!(
                "parameter has dimension {}, sample has {}",
                w.len(),
                z.dim()
            )));
        }
    }
    if !all_finite(w) {
        return Err(Error::Numeric("parameter vector is not finite".into()));
    }
    Ok(())
}

impl PointwiseLoss {
    pub fn id(&self) -> &'static str {
        match self {
            PointwiseLoss::Squared => "squared",
            PointwiseLoss::Logistic => "logistic",
        }
    }

    #[inline]
    pub fn value_unchecked(&self, w: &[f64], z: &Sample) -> f64 {
        let p = dot(w, &z.x);
        match self {
            PointwiseLoss::Squared => {
                let r = z.y - p;
                r * r
            }
            PointwiseLoss::Logistic => softplus(-z.y * p),
        }
    }

    /// Adds `scale * grad` into `acc` and returns the value.
    #[inline]
    pub fn accumulate(&self, w: &[f64], z: &Sample, scale: f64, acc: &mut [f64]) -> f64 {
        let p = dot(w, &z.x);
        match self {
            PointwiseLoss::Squared => {
                let r = z.y - p;
                axpy(-2.0 * r * scale, &z.x, acc);
                r * r
            }
            PointwiseLoss::Logistic => {
                let m = z.y * p;
                axpy(-z.y * sigmoid(-m) * scale, &z.x, acc);
                softplus(-m)
            }
        }
    }

    pub fn value_grad(&self, w: &[f64], z: &Sample) -> Result<(f64, Vec<f64>)> {
        check_args(w, &[z])?;
        let mut g = vec![0.0; w.len()];
        let v = self.accumulate(w, z, 1.0, &mut g);
        Ok((v, g))
    }

    pub fn constants_on_ball(&self, b: DataBounds) -> Result<LossConstants> {
        b.validate()?;
        let (bb, x, y) = (b.ball_radius, b.x_max, b.y_max);
        let (l, beta) = match self {
            PointwiseLoss::Squared => (2.0 * (bb * x + y) * x, 2.0 * x * x),
            PointwiseLoss::Logistic => (y * x, y * y * x * x / 4.0),
        };
        Ok(LossConstants {
            lipschitz: l,
            smoothness: Some(beta),
            strong_convexity: 0.0,
            valid_on: b,
        })
    }
}

impl std::str::FromStr for PointwiseLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(PointwiseLoss::Squared),
            "logistic" => Ok(PointwiseLoss::Logistic),
            other => Err(Error::Unsupported(format!("pointwise loss {other:?}"))),
        }
    }
}

#[inline]
fn same_class(a: f64, b: f64) -> bool {
    (a >= 0.0) == (b >= 0.0)
}

impl PairwiseLoss {
    pub fn id(&self) -> &'static str {
        match self {
            PairwiseLoss::SquaredRanking => "squared-ranking",
            PairwiseLoss::HingeRanking => "hinge-ranking",
            PairwiseLoss::LinkConstraint { .. } => "link-constraint",
        }
    }

    /// Build a pairwise loss from its string id. `link-constraint` needs
    /// `lambda3` and data on which its convexity is certified.
    pub fn from_id(id: &str, lambda3: Option<f64>, data: Option<&Dataset>) -> Result<Self> {
        match id {
            "squared-ranking" => Ok(PairwiseLoss::SquaredRanking),
            "hinge-ranking" => Ok(PairwiseLoss::HingeRanking),
            "link-constraint" => {
                let l3 = lambda3.ok_or_else(|| {
                    Error::InvalidConfig("link-constraint loss requires lambda3".into())
                })?;
                let data = data.ok_or_else(|| {
                    Error::InvalidConfig("link-constraint loss requires data for its convexity check".into())
                })?;
                PairwiseLoss::link_constraint(l3, data, None)
            }
            other => Err(Error::Unsupported(format!("pairwise loss {other:?}"))),
        }
    }

    /// Link-constraint loss, accepted only if the induced quadratic form on
    /// `data` is positive semidefinite (smallest eigenvalue >= -1e-10).
    pub fn link_constraint(lambda3: f64, data: &Dataset, cap_per_sample: Option<usize>) -> Result<Self> {
        if !(lambda3.is_finite() && lambda3 >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda3 must be >= 0, got {lambda3}")));
        }
        let sets = LinkSets::from_labels(data, cap_per_sample);
        let min_eig = sets.min_eigenvalue(data, lambda3);
        if min_eig < -1e-10 {
            return Err(Error::InvalidConfig(format!(
                "lambda3 = {lambda3} makes the link-constraint form indefinite (smallest eigenvalue {min_eig:e})"
            )));
        }
        Ok(PairwiseLoss::LinkConstraint { lambda3 })
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, PairwiseLoss::HingeRanking)
    }

    /// Convex in `w` for every fixed pair of samples.
    pub fn is_convex(&self) -> bool {
        match self {
            PairwiseLoss::LinkConstraint { lambda3 } => *lambda3 == 0.0,
            _ => true,
        }
    }

    /// `g(w; z, z') = g(w; z', z)` for all arguments.
    pub fn is_symmetric(&self) -> bool {
        true
    }

    pub fn is_nonnegative(&self) -> bool {
        match self {
            PairwiseLoss::LinkConstraint { lambda3 } => *lambda3 == 0.0,
            _ => true,
        }
    }

    #[inline]
    pub fn value_unchecked(&self, w: &[f64], z: &Sample, zt: &Sample) -> f64 {
        let p = dot(w, &z.x) - dot(w, &zt.x);
        match self {
            PairwiseLoss::SquaredRanking => {
                let r = (z.y - zt.y) - p;
                r * r
            }
            PairwiseLoss::HingeRanking => {
                let s = sign0(z.y - zt.y);
                (1.0 - s * p).max(0.0)
            }
            PairwiseLoss::LinkConstraint { lambda3 } => {
                let c = if same_class(z.y, zt.y) { 1.0 } else { -lambda3 };
                c * p * p
            }
        }
    }

    /// Adds `scale * grad` into `acc` and returns the value.
    #[inline]
    pub fn accumulate(&self, w: &[f64], z: &Sample, zt: &Sample, scale: f64, acc: &mut [f64]) -> f64 {
        let p = dot(w, &z.x) - dot(w, &zt.x);
        let (value, coef) = match self {
            PairwiseLoss::SquaredRanking => {
                let r = (z.y - zt.y) - p;
                (r * r, -2.0 * r)
            }
            PairwiseLoss::HingeRanking => {
                let s = sign0(z.y - zt.y);
                let slack = 1.0 - s * p;
                // subgradient 0 at the kink
                if slack > 0.0 {
                    (slack, -s)
                } else {
                    (0.0, 0.0)
                }
            }
            PairwiseLoss::LinkConstraint { lambda3 } => {
                let c = if same_class(z.y, zt.y) { 1.0 } else { -lambda3 };
                (c * p * p, 2.0 * c * p)
            }
        };
        if coef != 0.0 {
            let k = coef * scale;
            for ((a, xi), xj) in acc.iter_mut().zip(&z.x).zip(&zt.x) {
                *a += k * (xi - xj);
            }
        }
        value
    }

    pub fn value_grad(&self, w: &[f64], z: &Sample, zt: &Sample) -> Result<(f64, Vec<f64>)> {
        check_args(w, &[z, zt])?;
        let mut g = vec![0.0; w.len()];
        let v = self.accumulate(w, z, zt, 1.0, &mut g);
        Ok((v, g))
    }

    pub fn constants_on_ball(&self, b: DataBounds) -> Result<LossConstants> {
        b.validate()?;
        let (bb, x, y) = (b.ball_radius, b.x_max, b.y_max);
        let (l, beta) = match self {
            PairwiseLoss::SquaredRanking => (8.0 * x * (y + bb * x), Some(8.0 * x * x)),
            PairwiseLoss::HingeRanking => (2.0 * x, None),
            PairwiseLoss::LinkConstraint { lambda3 } => {
                let c = lambda3.max(1.0);
                (8.0 * bb * x * x * c, Some(8.0 * x * x * c))
            }
        };
        Ok(LossConstants {
            lipschitz: l,
            smoothness: beta,
            strong_convexity: 0.0,
            valid_on: b,
        })
    }
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Must-link (same class) and cannot-link (different class) pairs.
#[derive(Debug, Clone, Default)]
pub struct LinkSets {
    pub must: Vec<(usize, usize)>,
    pub cannot: Vec<(usize, usize)>,
}

impl LinkSets {
    /// Unordered pairs `i < j`, classed by label sign. With a cap, each
    /// sample `i` keeps at most `cap` partners of each kind.
    pub fn from_labels(data: &Dataset, cap_per_sample: Option<usize>) -> Self {
        let s = data.samples();
        let cap = cap_per_sample.unwrap_or(usize::MAX);
        let mut sets = LinkSets::default();
        for i in 0..s.len() {
            let (mut nm, mut nc) = (0, 0);
            for j in i + 1..s.len() {
                if same_class(s[i].y, s[j].y) {
                    if nm < cap {
                        sets.must.push((i, j));
                        nm += 1;
                    }
                } else if nc < cap {
                    sets.cannot.push((i, j));
                    nc += 1;
                }
            }
        }
        sets
    }

    /// Smallest eigenvalue of `sum_M dd^T - lambda3 sum_C dd^T`, `d = x_i - x_j`.
    pub fn min_eigenvalue(&self, data: &Dataset, lambda3: f64) -> f64 {
        let dim = data.dim();
        let s = data.samples();
        let mut q = DMatrix::<f64>::zeros(dim, dim);
        let mut add = |i: usize, j: usize, c: f64| {
            let d: Vec<f64> = s[i].x.iter().zip(&s[j].x).map(|(a, b)| a - b).collect();
            for r in 0..dim {
                for k in 0..dim {
                    q[(r, k)] += c * d[r] * d[k];
                }
            }
        };
        for &(i, j) in &self.must {
            add(i, j, 1.0);
        }
        for &(i, j) in &self.cannot {
            add(i, j, -lambda3);
        }
        if dim == 0 {
            return 0.0;
        }
        SymmetricEigen::new(q).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// `ell(w; z, z') = tau f(w; z) + (1 - tau) g(w; z, z')`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedLoss {
    pub pointwise: PointwiseLoss,
    pub pairwise: PairwiseLoss,
    pub tau: f64,
}

impl MixedLoss {
    pub fn new(pointwise: PointwiseLoss, pairwise: PairwiseLoss, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidConfig(format!("tau must lie in [0, 1], got {tau}")));
        }
        Ok(MixedLoss {
            pointwise,
            pairwise,
            tau,
        })
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        MixedLoss::new(self.pointwise, self.pairwise, tau)
    }

    pub fn is_smooth(&self) -> bool {
        self.pairwise.is_smooth()
    }

    pub fn is_convex(&self) -> bool {
        self.pairwise.is_convex()
    }

    /// Mixed value and gradient. At `tau = 1` (resp. `0`) the pairwise
    /// (resp. pointwise) part is never evaluated, so the result is bitwise
    /// the single-component output.
    pub fn value_grad(&self, w: &[f64], z: &Sample, zt: &Sample) -> Result<(f64, Vec<f64>)> {
        check_args(w, &[z, zt])?;
        Ok(self.value_grad_unchecked(w, z, zt))
    }

    pub fn value_grad_unchecked(&self, w: &[f64], z: &Sample, zt: &Sample) -> (f64, Vec<f64>) {
        let d = w.len();
        if self.tau == 1.0 {
            let mut g = vec![0.0; d];
            let v = self.pointwise.accumulate(w, z, 1.0, &mut g);
            return (v, g);
        }
        if self.tau == 0.0 {
            let mut g = vec![0.0; d];
            let v = self.pairwise.accumulate(w, z, zt, 1.0, &mut g);
            return (v, g);
        }
        let mut gf = vec![0.0; d];
        let mut gg = vec![0.0; d];
        let f = self.pointwise.accumulate(w, z, 1.0, &mut gf);
        let g = self.pairwise.accumulate(w, z, zt, 1.0, &mut gg);
        let t = self.tau;
        let grad = gf.iter().zip(&gg).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        (t * f + (1.0 - t) * g, grad)
    }

    /// Constants of the mixture: the componentwise maximum.
    pub fn constants_on_ball(&self, b: DataBounds) -> Result<LossConstants> {
        let f = self.pointwise.constants_on_ball(b)?;
        let g = self.pairwise.constants_on_ball(b)?;
        Ok(LossConstants {
            lipschitz: f.lipschitz.max(g.lipschitz),
            smoothness: match (f.smoothness, g.smoothness) {
                (Some(a), Some(c)) => Some(a.max(c)),
                _ => None,
            },
            strong_convexity: 0.0,
            valid_on: b,
        })
    }
}

/// Common interface used by the probing and property-checking code: a loss
/// taking a parameter and (up to) two samples.
pub trait PplLoss: Sync {
    fn value_grad_at(&self, w: &[f64], z: &Sample, zt: &Sample) -> (f64, Vec<f64>);
}

impl PplLoss for PointwiseLoss {
    fn value_grad_at(&self, w: &[f64], z: &Sample, _zt: &Sample) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; w.len()];
        let v = self.accumulate(w, z, 1.0, &mut g);
        (v, g)
    }
}

impl PplLoss for PairwiseLoss {
    fn value_grad_at(&self, w: &[f64], z: &Sample, zt: &Sample) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; w.len()];
        let v = self.accumulate(w, z, zt, 1.0, &mut g);
        (v, g)
    }
}

impl PplLoss for MixedLoss {
    fn value_grad_at(&self, w: &[f64], z: &Sample, zt: &Sample) -> (f64, Vec<f64>) {
        self.value_grad_unchecked(w, z, zt)
    }
}

/// Uniform draw from the closed ball of radius `r` in `d` dimensions.
pub fn random_point_in_ball(rng: &mut seed::Rng, d: usize, r: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm2(&v);
        if n > 0.0 {
            let u: f64 = rng.random();
            let rad = r * u.powf(1.0 / d as f64);
            return v.into_iter().map(|c| c * rad / n).collect();
        }
    }
}

/// Random sample with `||x|| <= x_max` and `y` uniform on `[-y_max, y_max]`.
pub fn random_sample_in_bounds(rng: &mut seed::Rng, d: usize, b: &DataBounds) -> Sample {
    let x = random_point_in_ball(rng, d, b.x_max);
    let y = if b.y_max > 0.0 {
        rng.random_range(-b.y_max..=b.y_max)
    } else {
        0.0
    };
    Sample::new(x, y)
}

/// Empirical lower bounds on the constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbedConstants {
    pub lipschitz: f64,
    pub smoothness: f64,
    pub trials: usize,
}

/// Randomized audit of declared constants: the largest gradient norm and
/// the largest gradient difference ratio seen at random points of the
/// certified region.
pub fn probe_constants<L: PplLoss + ?Sized>(
    loss: &L,
    dim: usize,
    bounds: DataBounds,
    trials: usize,
    seed_value: u64,
) -> Result<ProbedConstants> {
    bounds.validate()?;
    if trials == 0 {
        return Err(Error::InvalidInput("trials must be >= 1".into()));
    }
    let mut rng = seed::rng(seed_value);
    let (mut lhat, mut bhat) = (0.0_f64, 0.0_f64);
    for _ in 0..trials {
        let z = random_sample_in_bounds(&mut rng, dim, &bounds);
        let zt = random_sample_in_bounds(&mut rng, dim, &bounds);
        let u = random_point_in_ball(&mut rng, dim, bounds.ball_radius);
        let v = random_point_in_ball(&mut rng, dim, bounds.ball_radius);
        let (_, gu) = loss.value_grad_at(&u, &z, &zt);
        let (_, gv) = loss.value_grad_at(&v, &z, &zt);
        lhat = lhat.max(norm2(&gu)).max(norm2(&gv));
        let duv = crate::linalg::dist2(&u, &v);
        if duv > 0.0 {
            bhat = bhat.max(crate::linalg::dist2(&gu, &gv) / duv);
        }
    }
    Ok(ProbedConstants {
        lipschitz: lhat,
        smoothness: bhat,
        trials,
    })
}
