//! Enumeration oracles for the evidence bound and the score-function
//! gradient on a model small enough to sum over every program.

mod common;

use common::*;

#[test]
fn toy_support_is_normalized() {
    let t = toy(0);
    assert_eq!(t.zs.len(), 13);
    let (lq, _, lp) = tables(&t);
    assert!((log_sum_exp(&lq)).abs() < 1e-12);
    assert!((log_sum_exp(&lp)).abs() < 1e-12);
}

#[test]
fn objective_lower_bounds_the_evidence() {
    let c = bound_check(0..50, &[1.0, 1.5]);
    assert!(c.worst_excess <= 1e-8, "{c:?}");
    // at beta = 1 the gap is KL(q(z|x) || p(z|x))
    assert!(c.min_kl >= 0.0);
    assert!(c.worst_gap_error < 1e-8, "{c:?}");
}

#[test]
fn exact_score_function_gradient_matches_direct_differentiation() {
    let d = score_function_check(0..5);
    assert!(d < 1e-8, "{d:e}");
}

#[test]
fn entropy_path_term_matches_direct_differentiation() {
    // coefficient (R - b - beta) on log q reproduces the gradient of the
    // bound including its -beta log q term
    let beta = 0.3;
    let mut t = toy(7);
    let (lq, lx, lp) = tables(&t);
    let rewards: Vec<f64> = (0..lq.len()).map(|i| lx[i] - beta * lq[i] + beta * lp[i]).collect();
    let outside: Vec<f64> = (0..lq.len()).map(|i| lx[i] + beta * lp[i]).collect();
    let direct = direct_grad(&mut t, &outside, beta);
    let coef: Vec<f64> = rewards.iter().map(|r| r - beta).collect();
    let exact = exact_expectation(&mut t, &coef, 0.4);
    assert!(max_abs_diff(&exact, &direct) < 1e-8);
}

#[test]
fn constant_reward_at_the_baseline_gives_zero_gradient() {
    let mut t = toy(3);
    let zs = t.zs.clone();
    for z in &zs {
        assert!(score_grad(&mut t, z, 2.5, 2.5).iter().all(|&g| g == 0.0));
    }
}

#[test]
fn monte_carlo_mean_is_within_three_standard_errors() {
    for (k, p) in monte_carlo_check(100_000, 5).iter().enumerate() {
        assert!(p.within(3.0), "direction {k}: {p:?}");
    }
}

#[test]
fn baseline_matches_closed_form() {
    let (exact, unrolled) = baseline_check(100, 50);
    assert!(exact);
    assert!(unrolled < 1e-9, "{unrolled:e}");
}
