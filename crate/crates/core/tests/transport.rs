mod common;

use std::time::Instant;

use common::oracles::transport_lp;
use common::{rng, uniform};
use proptest::prelude::*;
use rand::Rng;
use tsdistill::align::{sinkhorn, SinkhornOptions};
use tsdistill::tensor::Tensor;

fn marginal(r: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn opts(mu: f64) -> SinkhornOptions {
    SinkhornOptions {
        mu,
        max_iters: 10_000,
        tol: 1e-9,
    }
}

#[test]
fn twenty_instances_against_lp_oracle() {
    let start = Instant::now();
    for i in 0..20u64 {
        let mut r = rng(i);
        let (n, m) = (r.random_range(1..=4), r.random_range(1..=4));
        let w = uniform(&mut r, n, m, 0.0, 2.0);
        let (a, b) = (marginal(&mut r, n), marginal(&mut r, m));
        let mu = [0.05, 0.1, 0.5][i as usize % 3];
        let t = sinkhorn(&w, &a, &b, &opts(mu)).unwrap();
        assert!(t.converged, "instance {i} did not converge");
        assert!(t.marginal_violation() < 1e-6);
        let lp = transport_lp(&w, &a, &b);
        let slack = 1e-9;
        assert!(t.cost >= lp - slack, "instance {i}: cost {} below LP {lp}", t.cost);
        let upper = lp + mu * ((n * m) as f64).ln();
        assert!(t.cost <= upper + slack, "instance {i}: cost {} above {upper}", t.cost);
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn lp_oracle_matches_hand_solution() {
    // Identity-like cost: the diagonal coupling is free.
    let w = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
    assert!(transport_lp(&w, &[0.5, 0.5], &[0.5, 0.5]).abs() < 1e-12);
    assert!((transport_lp(&w, &[1.0 - 0.3, 0.3], &[0.3, 0.7]) - 0.4).abs() < 1e-12);
}

#[test]
fn zero_cost_gives_product_plan() {
    let mut r = rng(9);
    let (a, b) = (marginal(&mut r, 4), marginal(&mut r, 3));
    let t = sinkhorn(&Tensor::zeros(&[4, 3]), &a, &b, &opts(0.1)).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            assert!((t.plan.get(i, j) - a[i] * b[j]).abs() < 1e-10);
        }
    }
}

#[test]
fn small_mu_approaches_lp() {
    let mut r = rng(3);
    let w = uniform(&mut r, 3, 3, 0.0, 1.0);
    let (a, b) = (marginal(&mut r, 3), marginal(&mut r, 3));
    let lp = transport_lp(&w, &a, &b);
    let gaps: Vec<f64> = [1.0, 0.1, 0.01]
        .iter()
        .map(|&mu| sinkhorn(&w, &a, &b, &opts(mu)).unwrap().cost - lp)
        .collect();
    assert!(gaps[2] < 0.01 * 9f64.ln() + 1e-9, "{gaps:?}");
    assert!(gaps[0] >= gaps[2]);
}

#[test]
fn invalid_inputs_are_rejected() {
    let w = Tensor::zeros(&[2, 2]);
    assert!(sinkhorn(&w, &[0.5, 0.5], &[0.5, 0.5], &opts(0.0)).is_err());
    assert!(sinkhorn(&w, &[1.0, 0.0], &[0.5, 0.5], &opts(0.1)).is_err());
    assert!(sinkhorn(&w, &[0.6, 0.6], &[0.5, 0.5], &opts(0.1)).is_err());
    assert!(sinkhorn(&w, &[1.0], &[0.5, 0.5], &opts(0.1)).is_err());
    let bad = Tensor::matrix(1, 1, vec![f64::NAN]);
    assert!(sinkhorn(&bad, &[1.0], &[1.0], &opts(0.1)).is_err());
}

#[test]
fn extreme_costs_stay_finite() {
    let w = Tensor::matrix(2, 2, vec![0.0, 1e4, 1e4, 0.0]);
    let t = sinkhorn(&w, &[0.5, 0.5], &[0.5, 0.5], &opts(1e-3)).unwrap();
    assert!(t.plan.is_finite());
    assert!(t.marginal_violation() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn violations_never_increase(n in 1usize..5, m in 1usize..5, mu in 0.05f64..1.0, seed: u64) {
        let mut r = rng(seed);
        let w = uniform(&mut r, n, m, 0.0, 2.0);
        let (a, b) = (marginal(&mut r, n), marginal(&mut r, m));
        let t = sinkhorn(&w, &a, &b, &opts(mu)).unwrap();
        prop_assert!(t.converged);
        for pair in t.violations.windows(2) {
            prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-9) + 1e-15, "{:?}", t.violations);
        }
        let rows: Vec<f64> = (0..n).map(|i| t.plan.row(i).iter().sum()).collect();
        for (x, y) in rows.iter().zip(&a) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        prop_assert!(t.plan.data().iter().all(|&p| p >= 0.0));
    }
}
