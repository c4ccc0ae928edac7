//! Samples, datasets, neighboring datasets and the seeded synthetic data
//! source that stands in for the unknown sampling distribution.
//!
//! Indices are zero-based throughout: a dataset of size `n` has positions
//! `0..n`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2};
use crate::seed;

/// Gaussian label noise is truncated at this many standard deviations so
/// labels stay bounded.
pub const NOISE_CLIP: f64 = 3.0;

/// One labelled example `z = (x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Sample { x, y }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.y.is_finite() && self.x.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality (distinguishes `0.0` from `-0.0`, equates NaNs with
    /// identical payloads).
    pub fn bit_eq(&self, other: &Sample) -> bool {
        self.y.to_bits() == other.y.to_bits()
            && self.x.len() == other.x.len()
            && self
                .x
                .iter()
                .zip(&other.x)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
}

impl Provenance {
    pub fn external(name: &str) -> Self {
        Provenance {
            generator: name.to_string(),
            seed: 0,
        }
    }
}

/// An ordered, immutable training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    dim: usize,
    provenance: Provenance,
}

impl Dataset {
    /// Build a dataset, checking that every sample is finite and that all
    /// samples share one dimension.
    pub fn new(samples: Vec<Sample>, provenance: Provenance) -> Result<Self> {
        let dim = samples.first().map(Sample::dim).unwrap_or(0);
        for (k, s) in samples.iter().enumerate() {
            if s.dim() != dim {
                return Err(Error::InvalidSample(format!(
                    "sample {k} has dimension {}, expected {dim}",
                    s.dim()
                )));
            }
            if !s.is_finite() {
                return Err(Error::InvalidSample(format!("sample {k} is not finite")));
            }
        }
        Ok(Dataset {
            samples,
            dim,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> Option<&Sample> {
        self.samples.get(i)
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Hash of the exact bit patterns of every entry.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.samples.len().hash(&mut h);
        for s in &self.samples {
            for v in &s.x {
                v.to_bits().hash(&mut h);
            }
            s.y.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Positions at which two datasets of equal length differ bitwise.
    pub fn differing_positions(&self, other: &Dataset) -> Result<Vec<usize>> {
        if self.len() != other.len() {
            return Err(Error::InvalidInput(format!(
                "datasets have different sizes ({} vs {})",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .samples
            .iter()
            .zip(&other.samples)
            .enumerate()
            .filter(|(_, (a, b))| !a.bit_eq(b))
            .map(|(k, _)| k)
            .collect())
    }

    fn check_replacement(&self, i: usize, z: &Sample) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Index {
                index: i,
                len: self.len(),
            });
        }
        if z.dim() != self.dim {
            return Err(Error::InvalidSample(format!(
                "replacement has dimension {}, dataset has {}",
                z.dim(),
                self.dim
            )));
        }
        if !z.is_finite() {
            return Err(Error::InvalidSample("replacement is not finite".into()));
        }
        Ok(())
    }

    /// `S_i`: a copy of the dataset with position `i` replaced by `z_new`.
    pub fn neighbor_i(&self, i: usize, z_new: &Sample) -> Result<Dataset> {
        self.check_replacement(i, z_new)?;
        let mut samples = self.samples.clone();
        samples[i] = z_new.clone();
        Ok(Dataset {
            samples,
            dim: self.dim,
            provenance: self.provenance.clone(),
        })
    }

    /// `S_{i,j}`: a copy with positions `i < j` replaced.
    pub fn neighbor_ij(&self, i: usize, j: usize, z_i: &Sample, z_j: &Sample) -> Result<Dataset> {
        if i >= j {
            return Err(Error::Ordering { i, j });
        }
        self.check_replacement(i, z_i)?;
        self.check_replacement(j, z_j)?;
        let mut samples = self.samples.clone();
        samples[i] = z_i.clone();
        samples[j] = z_j.clone();
        Ok(Dataset {
            samples,
            dim: self.dim,
            provenance: self.provenance.clone(),
        })
    }

    /// Largest feature norm and largest absolute label.
    pub fn bounds(&self) -> (f64, f64) {
        self.samples.iter().fold((0.0_f64, 0.0_f64), |(xm, ym), s| {
            (xm.max(norm2(&s.x)), ym.max(s.y.abs()))
        })
    }

    /// Write as CSV with header `x0,...,x{d-1},y`. Values use Rust's
    /// shortest round-trip float formatting.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec: Vec<String> = s.x.iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{:?}", s.y));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = r.headers()?.clone();
        let d = header.len().checked_sub(1).ok_or_else(|| {
            Error::InvalidInput("CSV header must contain at least the label column".into())
        })?;
        for (k, name) in header.iter().enumerate() {
            let expected = if k == d { "y".to_string() } else { format!("x{k}") };
            if name.trim() != expected {
                return Err(Error::InvalidInput(format!(
                    "unexpected CSV column {name:?}, expected {expected:?}"
                )));
            }
        }
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidInput(format!("bad number {f:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (x, y) = vals.split_at(d);
            samples.push(Sample::new(x.to_vec(), y[0]));
        }
        Dataset::new(samples, Provenance::external("csv"))
    }
}

/// `make_neighbor_i`
pub fn make_neighbor_i(s: &Dataset, i: usize, z_new: &Sample) -> Result<Dataset> {
    s.neighbor_i(i, z_new)
}

/// `make_neighbor_ij`
pub fn make_neighbor_ij(
    s: &Dataset,
    i: usize,
    j: usize,
    z_i: &Sample,
    z_j: &Sample,
) -> Result<Dataset> {
    s.neighbor_ij(i, j, z_i, z_j)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    /// `y = <w, x> + noise`
    LinearRegression,
    /// `y = sign(<w, x> + noise)`, with `sign(0) = +1`
    Sign,
}

impl std::str::FromStr for LabelRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-regression" | "linear" => Ok(LabelRule::LinearRegression),
            "sign" => Ok(LabelRule::Sign),
            other => Err(Error::InvalidConfig(format!("unknown label rule {other:?}"))),
        }
    }
}

/// Law of the feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FeatureLaw {
    /// Isotropic Gaussian with per-coordinate standard deviation `std`,
    /// radially rescaled onto the ball of radius `feature_bound` whenever it
    /// falls outside.
    ClippedGaussian { std: f64 },
    /// Every sample has the same feature vector (a point mass).
    Fixed { x: Vec<f64> },
}

/// Seeded synthetic sampling distribution with bounded support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGenerator {
    pub true_w: Vec<f64>,
    pub feature_bound: f64,
    pub features: FeatureLaw,
    pub noise_std: f64,
    pub label_rule: LabelRule,
    pub seed: u64,
}

impl SyntheticGenerator {
    /// Linear model with `true_w = (1, ..., 1)/sqrt(d)` and clipped Gaussian
    /// features of per-coordinate std `0.5 * feature_bound / sqrt(d)`.
    pub fn standard(dim: usize, noise_std: f64, seed: u64) -> Self {
        let dim = dim.max(1);
        let c = 1.0 / (dim as f64).sqrt();
        SyntheticGenerator {
            true_w: vec![c; dim],
            feature_bound: 1.0,
            features: FeatureLaw::ClippedGaussian { std: 0.5 * c },
            noise_std,
            label_rule: LabelRule::LinearRegression,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.true_w.len()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SyntheticGenerator {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.true_w.is_empty() {
            return bad("true_w must be nonempty");
        }
        if !self.true_w.iter().all(|v| v.is_finite()) {
            return bad("true_w must be finite");
        }
        if !(self.feature_bound.is_finite() && self.feature_bound > 0.0) {
            return bad("feature_bound must be positive and finite");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std must be nonnegative and finite");
        }
        match &self.features {
            FeatureLaw::ClippedGaussian { std } => {
                if !(std.is_finite() && *std > 0.0) {
                    return bad("feature std must be positive and finite");
                }
            }
            FeatureLaw::Fixed { x } => {
                if x.len() != self.dim() || !x.iter().all(|v| v.is_finite()) {
                    return bad("fixed feature vector must be finite with dimension d");
                }
                if norm2(x) > self.feature_bound {
                    return bad("fixed feature vector exceeds feature_bound");
                }
            }
        }
        Ok(())
    }

    /// Upper bound on `|y|` over the support.
    pub fn label_bound(&self) -> f64 {
        match self.label_rule {
            LabelRule::Sign => 1.0,
            LabelRule::LinearRegression => {
                norm2(&self.true_w) * self.feature_bound + NOISE_CLIP * self.noise_std
            }
        }
    }

    fn draw_one(&self, rng: &mut seed::Rng) -> Sample {
        let d = self.dim();
        let x = match &self.features {
            FeatureLaw::ClippedGaussian { std } => {
                let mut x: Vec<f64> = (0..d)
                    .map(|_| std * { let v: f64 = StandardNormal.sample(rng); v })
                    .collect();
                let nx = norm2(&x);
                if nx > self.feature_bound {
                    let s = self.feature_bound / nx;
                    x.iter_mut().for_each(|v| *v *= s);
                }
                x
            }
            FeatureLaw::Fixed { x } => x.clone(),
        };
        // The noise draw happens even when noise_std = 0 so the stream shape
        // never depends on the noise level.
        let e = loop {
            let e: f64 = StandardNormal.sample(rng);
            if e.abs() <= NOISE_CLIP {
                break e;
            }
        };
        let signal = dot(&self.true_w, &x) + self.noise_std * e;
        let y = match self.label_rule {
            LabelRule::LinearRegression => signal,
            LabelRule::Sign => {
                if signal >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        Sample::new(x, y)
    }

    /// `n` i.i.d. draws, deterministic in `(self.seed, n)`.
    pub fn sample(&self, n: usize) -> Result<Dataset> {
        self.sample_with_seed(n, self.seed)
    }

    pub fn sample_with_seed(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        let mut rng = seed::rng(seed);
        let samples = (0..n).map(|_| self.draw_one(&mut rng)).collect();
        Dataset::new(
            samples,
            Provenance {
                generator: "synthetic".into(),
                seed,
            },
        )
    }
}

/// `sample_synthetic`
pub fn sample_synthetic(gen: &SyntheticGenerator, n: usize) -> Result<Dataset> {
    gen.sample(n)
}

/// Anything that can produce i.i.d. samples on demand.
pub trait SampleSource: Sync {
    fn dim(&self) -> usize;
    fn draw(&self, n: usize, seed: u64) -> Result<Dataset>;
}

impl SampleSource for SyntheticGenerator {
    fn dim(&self) -> usize {
        SyntheticGenerator::dim(self)
    }

    fn draw(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.sample_with_seed(n, seed)
    }
}

/// The empirical distribution of a fixed dataset (uniform resampling with
/// replacement).
#[derive(Debug, Clone)]
pub struct EmpiricalSource(pub Dataset);

impl SampleSource for EmpiricalSource {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn draw(&self, n: usize, seed: u64) -> Result<Dataset> {
        if self.0.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut rng = seed::rng(seed);
        let m = self.0.len();
        let samples = (0..n)
            .map(|_| self.0.samples()[rng.random_range(0..m)].clone())
            .collect();
        Dataset::new(
            samples,
            Provenance {
                generator: "empirical".into(),
                seed,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset::new(
            vec![
                Sample::new(vec![1.0], 1.0),
                Sample::new(vec![2.0], 2.0),
                Sample::new(vec![3.0], 3.0),
            ],
            Provenance::external("toy"),
        )
        .unwrap()
    }

    #[test]
    fn neighbor_i_replaces_one_position() {
        let s = toy();
        let z = Sample::new(vec![9.0], 9.0);
        let s1 = s.neighbor_i(1, &z).unwrap();
        assert_eq!(s1.samples()[0], s.samples()[0]);
        assert_eq!(s1.samples()[1], z);
        assert_eq!(s1.samples()[2], s.samples()[2]);
        assert_eq!(s.samples()[1].y, 2.0);
    }

    #[test]
    fn neighbor_i_with_itself_is_identity() {
        let s = toy();
        let same = s.samples()[2].clone();
        assert_eq!(s.neighbor_i(2, &same).unwrap(), s);
    }

    #[test]
    fn neighbor_ij_replaces_two_positions() {
        let s = toy();
        let a = Sample::new(vec![7.0], 7.0);
        let b = Sample::new(vec![8.0], 8.0);
        let s02 = s.neighbor_ij(0, 2, &a, &b).unwrap();
        assert_eq!(s02.samples(), &[a.clone(), s.samples()[1].clone(), b.clone()]);
        let composed = s.neighbor_i(0, &a).unwrap().neighbor_i(2, &b).unwrap();
        assert_eq!(composed, s02);
    }

    #[test]
    fn neighbor_errors() {
        let s = toy();
        let z = Sample::new(vec![0.0], 0.0);
        assert!(matches!(s.neighbor_i(3, &z), Err(Error::Index { index: 3, len: 3 })));
        assert!(matches!(
            s.neighbor_i(0, &Sample::new(vec![0.0, 1.0], 0.0)),
            Err(Error::InvalidSample(_))
        ));
        assert!(matches!(s.neighbor_ij(2, 1, &z, &z), Err(Error::Ordering { i: 2, j: 1 })));
        assert!(matches!(s.neighbor_ij(1, 1, &z, &z), Err(Error::Ordering { .. })));
        assert!(matches!(s.neighbor_ij(0, 5, &z, &z), Err(Error::Index { .. })));
    }

    #[test]
    fn dataset_rejects_mixed_dimensions_and_nan() {
        let bad = vec![Sample::new(vec![1.0], 0.0), Sample::new(vec![1.0, 2.0], 0.0)];
        assert!(Dataset::new(bad, Provenance::external("t")).is_err());
        let nan = vec![Sample::new(vec![f64::NAN], 0.0)];
        assert!(Dataset::new(nan, Provenance::external("t")).is_err());
    }

    #[test]
    fn noiseless_linear_labels_are_exact() {
        let g = SyntheticGenerator::standard(4, 0.0, 11);
        let s = g.sample(200).unwrap();
        for z in s.samples() {
            assert_eq!(z.y, dot(&g.true_w, &z.x));
        }
    }

    #[test]
    fn generator_is_deterministic_and_seed_sensitive() {
        let g = SyntheticGenerator::standard(3, 0.1, 5);
        let a = g.sample(20).unwrap();
        let b = g.sample(20).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = g.with_seed(6).sample(20).unwrap();
        assert!(!a.differing_positions(&c).unwrap().is_empty());
    }

    #[test]
    fn feature_norms_respect_bound() {
        let mut g = SyntheticGenerator::standard(3, 0.1, 99);
        // wide Gaussian so that clipping is exercised often
        g.features = FeatureLaw::ClippedGaussian { std: 2.0 };
        let s = g.sample(100_000).unwrap();
        let (xmax, ymax) = s.bounds();
        assert!(xmax <= g.feature_bound * (1.0 + 1e-15));
        assert!(ymax <= g.label_bound() * (1.0 + 1e-12));
    }

    #[test]
    fn noise_mean_is_near_zero() {
        let g = SyntheticGenerator::standard(5, 0.1, 2024);
        let s = g.sample(10_000).unwrap();
        let resid: f64 = s
            .samples()
            .iter()
            .map(|z| z.y - dot(&g.true_w, &z.x))
            .sum::<f64>()
            / 10_000.0;
        assert!(resid.abs() <= 4.0 * 0.1 / 100.0, "mean residual {resid}");
    }

    #[test]
    fn invalid_generator_parameters_are_rejected() {
        let mut g = SyntheticGenerator::standard(2, 0.1, 0);
        g.noise_std = f64::NAN;
        assert!(matches!(g.sample(3), Err(Error::InvalidConfig(_))));
        let mut g = SyntheticGenerator::standard(2, 0.1, 0);
        g.true_w[0] = f64::INFINITY;
        assert!(matches!(g.sample(3), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn sign_labels_are_plus_minus_one() {
        let mut g = SyntheticGenerator::standard(2, 0.3, 1);
        g.label_rule = LabelRule::Sign;
        let s = g.sample(500).unwrap();
        assert!(s.samples().iter().all(|z| z.y == 1.0 || z.y == -1.0));
        assert_eq!(g.label_bound(), 1.0);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let g = SyntheticGenerator::standard(3, 0.2, 77);
        let s = g.sample(50).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x0,x1,x2,y\n"));
        let back = Dataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back.fingerprint(), s.fingerprint());
    }

    #[test]
    fn csv_rejects_bad_header() {
        let text = "a,b,y\n1,2,3\n";
        assert!(Dataset::read_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn empirical_source_resamples_members() {
        let s = toy();
        let src = EmpiricalSource(s.clone());
        let d = src.draw(100, 3).unwrap();
        assert!(d.samples().iter().all(|z| s.samples().contains(z)));
    }
}
