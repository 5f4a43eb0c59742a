use digflow::measures::{
    assignment_cost, discrepancy, entropic_transport, exact_w2_oracle, sample_directions, sinkhorn_divergence,
    sliced_w2, sliced_w2_terms, DiscrepancyKind, EmpiricalMeasure,
};
use digflow::rng::{rng_from, Rng};
use itertools::Itertools;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

fn cloud(rng: &mut Rng, n: usize, d: usize) -> EmpiricalMeasure {
    EmpiricalMeasure::new(Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))).unwrap()
}

fn permuted(m: &EmpiricalMeasure, perm: &[usize]) -> EmpiricalMeasure {
    EmpiricalMeasure::new(m.points().select(Axis(0), perm)).unwrap()
}

const KINDS: [DiscrepancyKind; 4] = [
    DiscrepancyKind::SlicedW2 { projections: 16 },
    DiscrepancyKind::Sinkhorn {
        epsilon: 1.0,
        max_iters: 200_000,
        tol: 1e-9,
    },
    DiscrepancyKind::MmdRbf { sigma: 1.0 },
    DiscrepancyKind::CosineMean,
];

fn pair_strategy() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 2usize..=6, 1usize..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sliced_is_symmetric_and_deterministic((seed, n, d) in pair_strategy(), dir_seed in any::<u64>()) {
        let mut rng = rng_from(seed);
        let (mu, nu) = (cloud(&mut rng, n, d), cloud(&mut rng, n, d));
        let ab = sliced_w2(&mu, &nu, 16, dir_seed).unwrap();
        let ba = sliced_w2(&nu, &mu, 16, dir_seed).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert_eq!(ab, sliced_w2(&mu, &nu, 16, dir_seed).unwrap());
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn every_discrepancy_vanishes_on_identical_measures((seed, n, d) in pair_strategy()) {
        let mut rng = rng_from(seed);
        let mu = cloud(&mut rng, n, d);
        let mut shuffled: Vec<usize> = (0..n).collect();
        shuffled.shuffle(&mut rng);
        let same = permuted(&mu, &shuffled);
        for kind in &KINDS {
            let v = discrepancy(kind, &mu, &same, seed).unwrap();
            prop_assert!(v.abs() <= 1e-9, "{} gave {v}", kind.label());
        }
    }

    #[test]
    fn common_permutation_leaves_every_discrepancy_unchanged((seed, n, d) in pair_strategy()) {
        let mut rng = rng_from(seed);
        let (mu, nu) = (cloud(&mut rng, n, d), cloud(&mut rng, n, d));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let (pm, pn) = (permuted(&mu, &perm), permuted(&nu, &perm));
        for kind in &KINDS {
            let a = discrepancy(kind, &mu, &nu, seed).unwrap();
            let b = discrepancy(kind, &pm, &pn, seed).unwrap();
            let tol = match kind {
                DiscrepancyKind::Sinkhorn { .. } => 1e-6,
                _ => 1e-12,
            };
            prop_assert!((a - b).abs() <= tol * a.abs().max(1.0), "{}: {a} vs {b}", kind.label());
        }
    }

    #[test]
    fn oracle_lower_bounds_every_assignment((seed, n, d) in pair_strategy()) {
        let mut rng = rng_from(seed);
        let (mu, nu) = (cloud(&mut rng, n, d), cloud(&mut rng, n, d));
        let best = exact_w2_oracle(&mu, &nu).unwrap();
        let mut hit = false;
        for perm in (0..n).permutations(n) {
            let c = assignment_cost(&mu, &nu, &perm);
            prop_assert!(best <= c + 1e-12);
            hit |= (c - best).abs() <= 1e-12 * best.max(1.0);
        }
        prop_assert!(hit, "oracle value is attained by some assignment");
    }
}

/// Direction average of the exact 1-D transport cost, using an independent
/// set of directions.
fn projected_oracle(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, count: usize, seed: u64) -> (f64, f64) {
    let dirs = sample_directions(mu.dim(), count, seed);
    let vals: Vec<f64> = dirs
        .rows()
        .into_iter()
        .map(|u| {
            let p = |m: &EmpiricalMeasure| {
                EmpiricalMeasure::new(Array2::from_shape_vec((m.len(), 1), m.project(u)).unwrap()).unwrap()
            };
            exact_w2_oracle(&p(mu), &p(nu)).unwrap()
        })
        .collect();
    mean_var(&vals)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn many_projection_estimate_agrees_with_projected_oracle() {
    let mut rng = rng_from(2024);
    for trial in 0..12u64 {
        let n = 2 + (trial as usize % 5);
        let d = 1 + (trial as usize % 3);
        let (mu, nu) = (cloud(&mut rng, n, d), cloud(&mut rng, n, d));
        let m = 8192;
        let terms = sliced_w2_terms(&mu, &nu, sample_directions(d, m, trial).view()).unwrap();
        let (est, var_est) = mean_var(&terms);
        let k = 4096;
        let (oracle, var_oracle) = projected_oracle(&mu, &nu, k, 1_000_000 + trial);
        let se = (var_est / m as f64 + var_oracle / k as f64).sqrt();
        assert!(
            (est - oracle).abs() <= 3.0 * se + 1e-12,
            "trial {trial}: estimate {est} oracle {oracle} se {se}"
        );
        assert_eq!(est, sliced_w2(&mu, &nu, m, trial).unwrap());
    }
}

#[test]
fn entropic_cost_decreases_to_the_exact_cost() {
    // OT_eps is nondecreasing in eps, and the optimal assignment used as a
    // feasible plan gives W2^2 <= OT_eps <= W2^2 + eps ln n.
    let mut rng = rng_from(99);
    let epsilons = [2.0, 1.0, 0.5, 0.25, 0.1, 0.05, 0.02];
    for _ in 0..8 {
        let (mu, nu) = (cloud(&mut rng, 5, 2), cloud(&mut rng, 5, 2));
        let exact = exact_w2_oracle(&mu, &nu).unwrap();
        let costs: Vec<f64> = epsilons
            .iter()
            .map(|&e| entropic_transport(&mu, &nu, e, 200_000, 1e-10).unwrap())
            .collect();
        for (c, e) in costs.iter().zip(epsilons) {
            assert!(*c >= exact - 1e-8, "{costs:?} vs {exact}");
            assert!(*c <= exact + e * 5f64.ln() + 1e-8, "{costs:?} vs {exact}");
        }
        for w in costs.windows(2) {
            assert!(w[1] <= w[0] + 1e-8, "{costs:?}");
        }
    }
}

#[test]
fn debiased_divergence_approaches_the_exact_cost() {
    let mut rng = rng_from(7);
    for _ in 0..5 {
        let (mu, nu) = (cloud(&mut rng, 5, 2), cloud(&mut rng, 5, 2));
        let exact = exact_w2_oracle(&mu, &nu).unwrap();
        let err = |e: f64| (sinkhorn_divergence(&mu, &nu, e, 200_000, 1e-9).unwrap() - exact).abs();
        let (coarse, fine) = (err(2.0), err(0.05));
        assert!(fine < 0.1 * coarse.max(1e-3) && fine < 0.02 * exact, "coarse {coarse} fine {fine}");
    }
}
