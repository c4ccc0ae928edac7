use proptest::prelude::*;

use ppl_stability::bounds::{self, ceil_log2};
use ppl_stability::datasets::{Dataset, Provenance, Sample, SyntheticGenerator};
use ppl_stability::linalg::{norm2, project_ball, tree_sum};
use ppl_stability::losses::{MixedLoss, PairwiseLoss, PointwiseLoss};
use ppl_stability::optim::{rrm_solve, IndexStream, RrmOptions};
use ppl_stability::risk::{empirical_mixed_risk, pairwise_risk, pointwise_risk, Regularizer};

const D: usize = 3;

fn sample() -> impl Strategy<Value = Sample> {
    (prop::collection::vec(-1.0..1.0f64, D), -2.0..2.0f64).prop_map(|(x, y)| Sample::new(x, y))
}

fn dataset(min: usize, max: usize) -> impl Strategy<Value = Dataset> {
    prop::collection::vec(sample(), min..=max)
        .prop_map(|s| Dataset::new(s, Provenance::external("prop")).unwrap())
}

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, D)
}

fn nonneg_pairwise() -> impl Strategy<Value = PairwiseLoss> {
    prop_oneof![Just(PairwiseLoss::SquaredRanking), Just(PairwiseLoss::HingeRanking)]
}

fn pointwise() -> impl Strategy<Value = PointwiseLoss> {
    prop_oneof![Just(PointwiseLoss::Squared), Just(PointwiseLoss::Logistic)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neighbor_differs_only_at_replaced_position(s in dataset(2, 12), z in sample(), k in 0usize..12) {
        let i = k % s.len();
        let si = s.neighbor_i(i, &z).unwrap();
        prop_assert_eq!(si.len(), s.len());
        let diff = s.differing_positions(&si).unwrap();
        prop_assert!(diff.is_empty() || diff == vec![i]);
        prop_assert!(si.samples()[i].bit_eq(&z));
        // Replacing back restores the original.
        let back = si.neighbor_i(i, &s.samples()[i]).unwrap();
        prop_assert!(s.differing_positions(&back).unwrap().is_empty());
    }

    #[test]
    fn two_point_neighbor_matches_two_single_replacements(
        s in dataset(3, 10), a in sample(), b in sample(), k in 0usize..100
    ) {
        let n = s.len();
        let i = k % (n - 1);
        let j = i + 1 + (k / 7) % (n - 1 - i);
        let both = s.neighbor_ij(i, j, &a, &b).unwrap();
        let seq = s.neighbor_i(i, &a).unwrap().neighbor_i(j, &b).unwrap();
        prop_assert!(both.differing_positions(&seq).unwrap().is_empty());
        prop_assert!(s.neighbor_ij(j, i, &a, &b).is_err());
    }

    #[test]
    fn risks_are_nonnegative(s in dataset(2, 15), w in weights(), f in pointwise(), g in nonneg_pairwise()) {
        prop_assert!(pointwise_risk(&s, f, &w) >= 0.0);
        prop_assert!(pairwise_risk(&s, g, &w).unwrap() >= 0.0);
    }

    #[test]
    fn symmetric_pairwise_losses(z in sample(), zt in sample(), w in weights()) {
        let g = PairwiseLoss::SquaredRanking;
        let a = g.value_unchecked(&w, &z, &zt);
        let b = g.value_unchecked(&w, &zt, &z);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn mixed_risk_interpolates_in_tau(
        s in dataset(2, 15), w in weights(), f in pointwise(), g in nonneg_pairwise(), tau in 0.0..=1.0f64
    ) {
        let r = empirical_mixed_risk(&s, &MixedLoss::new(f, g, tau).unwrap(), &w).unwrap();
        let expect = tau * pointwise_risk(&s, f, &w) + (1.0 - tau) * pairwise_risk(&s, g, &w).unwrap();
        prop_assert!((r.r_mixed_emp - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn projection_is_idempotent_and_lands_in_ball(w in prop::collection::vec(-10.0..10.0f64, 1..6), r in 0.1..5.0f64) {
        let mut p = w.clone();
        project_ball(&mut p, r);
        prop_assert!(norm2(&p) <= r);
        let mut pp = p.clone();
        project_ball(&mut pp, r);
        prop_assert_eq!(&p, &pp);
        if norm2(&w) <= r {
            prop_assert_eq!(&p, &w);
        }
    }

    #[test]
    fn regularized_solution_is_stationary(s in dataset(4, 20), tau in 0.0..=1.0f64, sigma in 0.05..2.0f64) {
        let m = MixedLoss::new(PointwiseLoss::Squared, PairwiseLoss::SquaredRanking, tau).unwrap();
        let reg = Regularizer::l2(sigma);
        let sol = rrm_solve(&s, &m, &reg, &RrmOptions { tol: Some(1e-11), ..RrmOptions::default() }).unwrap();
        // Strong convexity: F(v) >= F(w) + sigma/2 ||v - w||^2 at the minimizer.
        let obj = |v: &[f64]| empirical_mixed_risk(&s, &m, v).unwrap().r_mixed_emp + reg.value(v);
        let fw = obj(&sol.w);
        for k in 0..D {
            let mut v = sol.w.clone();
            v[k] += 0.3;
            prop_assert!(obj(&v) >= fw + 0.5 * sigma * 0.09 - 1e-8);
        }
    }

    #[test]
    fn bounds_are_nonnegative_and_affine_in_tau(
        gamma in 0.0..1.0f64, m in 0.0..10.0f64, n in 2u64..5000, delta in 1e-4..0.36f64, tau in 0.0..=1.0f64
    ) {
        let at = |t: f64| bounds::thm1_bound(gamma, m, t, n, delta).unwrap().value;
        let v = at(tau);
        prop_assert!(v >= 0.0);
        let lin = (1.0 - tau) * at(0.0) + tau * at(1.0);
        prop_assert!((v - lin).abs() <= 1e-10 * v.max(1.0));
        let b = |t: f64| bounds::bernstein_mixed_bound(m, gamma, t, n, delta).unwrap().value;
        prop_assert!((b(tau) - ((1.0 - tau) * b(0.0) + tau * b(1.0))).abs() <= 1e-10 * b(tau).max(1.0));
        prop_assert!(bounds::lemma2_bound(gamma, tau, 0.5).unwrap().value >= 0.0);
    }

    #[test]
    fn bounds_are_monotone(
        gamma in 0.0..1.0f64, m in 0.0..10.0f64, n in 2u64..5000, delta in 1e-4..0.3f64, tau in 0.0..=1.0f64
    ) {
        let base = bounds::thm1_bound(gamma, m, tau, n, delta).unwrap().value;
        prop_assert!(bounds::thm1_bound(gamma + 0.1, m, tau, n, delta).unwrap().value >= base);
        prop_assert!(bounds::thm1_bound(gamma, m + 0.1, tau, n, delta).unwrap().value >= base);
        prop_assert!(bounds::thm1_bound(gamma, m, tau, n, delta * 0.5).unwrap().value >= base);
        let c = |mu: f64, d: f64| bounds::chernoff_tail(mu, d).unwrap().value;
        prop_assert!(c(m + 1.0, delta) >= c(m, delta));
        prop_assert!(c(m, delta * 0.5) >= c(m, delta));
        prop_assert!(c(m, delta) >= m);
        let nb = |k: u64| bounds::rrm_stability_const(1.3, 0.7, tau, k).unwrap().value * k as f64;
        prop_assert!((nb(n) - nb(n + 1)).abs() <= 1e-12 * nb(n));
    }

    #[test]
    fn ceil_log2_brackets_n(n in 2u64..(1u64 << 40)) {
        let k = ceil_log2(n);
        prop_assert!(1u64 << k >= n);
        prop_assert!(1u64 << (k - 1) < n);
    }

    #[test]
    fn index_stream_is_a_function_of_seed_and_shape(seed in any::<u64>(), n in 2usize..50, t in 1usize..200) {
        let a = IndexStream::generate(seed, n, t).unwrap();
        let b = IndexStream::generate(seed, n, t).unwrap();
        prop_assert_eq!(&a.pairs, &b.pairs);
        prop_assert!(a.pairs.iter().all(|&(i, j)| i != j && (i as usize) < n && (j as usize) < n));
    }

    #[test]
    fn dataset_csv_round_trip(s in dataset(1, 20)) {
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), s.len());
        prop_assert!(s.differing_positions(&back).unwrap().is_empty());
    }

    #[test]
    fn tree_sum_matches_plain_sum(xs in prop::collection::vec(-1e3..1e3f64, 0..300)) {
        let plain: f64 = xs.iter().sum();
        let scale: f64 = xs.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        prop_assert!((tree_sum(&xs) - plain).abs() <= 1e-12 * scale);
    }

    #[test]
    fn generator_respects_its_bounds(seed in any::<u64>(), n in 1usize..50) {
        let g = SyntheticGenerator::standard(D, 0.2, seed);
        let s = g.sample(n).unwrap();
        let (xm, ym) = s.bounds();
        prop_assert!(xm <= g.feature_bound * (1.0 + 1e-12));
        prop_assert!(ym <= g.label_bound());
    }
}
