use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{Binomial, DiscreteCDF};
use statrs::statistics::Distribution;

use ppl_stability::bounds;
use ppl_stability::datasets::{Dataset, EmpiricalSource, Provenance, Sample, SampleSource};
use ppl_stability::harness::fit_loglog_slope;
use ppl_stability::losses::{MixedLoss, PairwiseLoss, PointwiseLoss};
use ppl_stability::optim::{rrm_solve, IndexStream, RrmOptions};
use ppl_stability::risk::Regularizer;
use ppl_stability::seed;
use ppl_stability::stability::{
    on_average_stability, uniform_stability_estimate, FnTrainer, OnAverageOptions, UniformOptions,
};
use ppl_stability::SyntheticGenerator;

const LABELS: [f64; 3] = [-1.0, 0.0, 1.0];

fn support() -> Dataset {
    let s = LABELS.iter().map(|&y| Sample::new(vec![1.0], y)).collect();
    Dataset::new(s, Provenance::external("support")).unwrap()
}

fn label_mean(d: &Dataset) -> ppl_stability::Result<Vec<f64>> {
    Ok(vec![d.samples().iter().map(|z| z.y).sum::<f64>() / d.len() as f64])
}

fn loss() -> MixedLoss {
    // With constant features the ranking loss does not depend on w.
    MixedLoss::new(PointwiseLoss::Squared, PairwiseLoss::SquaredRanking, 1.0).unwrap()
}

#[test]
fn label_mean_uniform_stability_matches_enumeration() {
    let src = EmpiricalSource(support());
    let probe = support();
    let trainer = FnTrainer(label_mean);
    for n in 1..=5usize {
        for rep in 0..4u64 {
            let s = src.draw(n, seed::derive(11, &[n as u64, rep])).unwrap();
            let w = label_mean(&s).unwrap()[0];
            let mut exact = 0.0f64;
            for i in 0..n {
                for &zn in &LABELS {
                    let wi = w + (zn - s.samples()[i].y) / n as f64;
                    for &y in &LABELS {
                        exact = exact.max(((y - wi).powi(2) - (y - w).powi(2)).abs());
                    }
                }
            }
            let opts = UniformOptions {
                n_replacements: n,
                draws_per_index: 40,
                record_cells: false,
            };
            let est = uniform_stability_estimate(&trainer, &s, &loss(), &src, &probe, &opts, 12).unwrap();
            assert_relative_eq!(est.u_point, exact, epsilon = 1e-12);
            assert_eq!(est.u_pair, 0.0);

            let few = UniformOptions {
                n_replacements: 1,
                draws_per_index: 1,
                record_cells: false,
            };
            let lower = uniform_stability_estimate(&trainer, &s, &loss(), &src, &probe, &few, 12).unwrap();
            assert!(lower.u_point <= exact + 1e-15);
        }
    }
}

#[test]
fn label_mean_on_average_stability_matches_enumeration() {
    let n = 3usize;
    let mut exact = 0.0;
    let mut count = 0.0;
    for a in LABELS {
        for b in LABELS {
            for c in LABELS {
                let s = [a, b, c];
                let w = (a + b + c) / 3.0;
                for &yi in &s {
                    for zn in LABELS {
                        let wi = w + (zn - yi) / n as f64;
                        exact += (yi - wi).powi(2) - (yi - w).powi(2);
                        count += 1.0;
                    }
                }
            }
        }
    }
    exact /= count;

    let opts = OnAverageOptions {
        outer_resamples: 4000,
        population_size: 60,
        ..OnAverageOptions::default()
    };
    let src = EmpiricalSource(support());
    let est = on_average_stability(&FnTrainer(label_mean), &src, &loss(), n, &opts, 13).unwrap();
    assert!((est.v_point - exact).abs() <= 4.0 * est.v_point_se, "{} vs {exact}", est.v_point);
    // The expected gap equals the on-average loss stability.
    assert!((est.gap_mean - exact).abs() <= 4.0 * est.gap_se, "{} vs {exact}", est.gap_mean);
    assert_eq!(est.v_pair, 0.0);
    assert!(est.h1_point <= est.h2 + 1e-15);
}

#[test]
fn ridge_solution_matches_normal_equations() {
    let g = SyntheticGenerator::standard(4, 0.3, 21);
    let s = g.sample(40).unwrap();
    let n = s.len();
    let d = s.dim();
    let x = DMatrix::from_fn(n, d, |i, k| s.samples()[i].x[k]);
    let y = DVector::from_fn(n, |i, _| s.samples()[i].y);
    let center = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let (xc, yc) = (&center * &x, &center * &y);
    let sigma = 0.2;
    for tau in [0.0, 0.3, 1.0] {
        let cp = 2.0 * tau / n as f64;
        let cq = 4.0 * (1.0 - tau) / (n - 1) as f64;
        let lhs = x.transpose() * &x * cp + xc.transpose() * &xc * cq + DMatrix::identity(d, d) * sigma;
        let rhs = x.transpose() * &y * cp + xc.transpose() * &yc * cq;
        let oracle = lhs.lu().solve(&rhs).unwrap();

        let m = MixedLoss::new(PointwiseLoss::Squared, PairwiseLoss::SquaredRanking, tau).unwrap();
        let opts = RrmOptions {
            tol: Some(1e-13),
            ..RrmOptions::default()
        };
        let sol = rrm_solve(&s, &m, &Regularizer::l2(sigma), &opts).unwrap();
        for k in 0..d {
            assert_relative_eq!(sol.w[k], oracle[k], epsilon = 1e-9, max_relative = 1e-9);
        }
    }
}

#[test]
fn first_index_hits_respect_the_chernoff_tail() {
    // Hits of a fixed index are Binomial(T, 1/n); the tail bound must sit at
    // or above the exact quantile.
    let (t, n) = (500u64, 100u64);
    let bin = Binomial::new(1.0 / n as f64, t).unwrap();
    for delta in [0.2, 0.1, 0.01, 0.001] {
        let bound = bounds::chernoff_tail(t as f64 / n as f64, delta).unwrap().value;
        let quantile = (0..=t).find(|&k| bin.cdf(k) >= 1.0 - delta).unwrap();
        assert!(bound >= quantile as f64, "delta {delta}: {bound} < {quantile}");
    }
    let counts: Vec<u64> = (0..2000u64)
        .map(|r| {
            let s = IndexStream::generate(seed::derive(31, &[r]), n as usize, t as usize).unwrap();
            s.pairs.iter().filter(|p| p.0 == 0).count() as u64
        })
        .collect();
    let mean = counts.iter().sum::<u64>() as f64 / counts.len() as f64;
    let sd = (bin.variance().unwrap() / counts.len() as f64).sqrt();
    assert!((mean - 5.0).abs() <= 4.0 * sd);
}

#[test]
fn loglog_fit_recovers_power_laws() {
    let xs = [50.0, 100.0, 200.0, 400.0, 800.0];
    for slope in [-1.0, -0.5, 0.0, 2.0] {
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(slope)).collect();
        let f = fit_loglog_slope(&xs, &ys).unwrap();
        assert_relative_eq!(f.slope, slope, epsilon = 1e-12);
        assert_relative_eq!(f.intercept, 3.0f64.ln(), epsilon = 1e-10);
        assert!(f.slope_se < 1e-10);
    }
    // Multiplicative noise averages out over many points.
    let mut rng = seed::rng(41);
    let xs: Vec<f64> = (0..400).map(|k| 10.0 + k as f64).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| {
            use rand::Rng;
            x.powf(-1.0) * (1.0 + 0.1 * (rng.random::<f64>() - 0.5))
        })
        .collect();
    let f = fit_loglog_slope(&xs, &ys).unwrap();
    assert!((f.slope + 1.0).abs() <= 4.0 * f.slope_se + 1e-3);
    assert!(fit_loglog_slope(&xs[..2], &ys[..2]).is_err());
}
