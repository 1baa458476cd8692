mod common;

use common::*;
use cvstem::analysis::*;
use cvstem::linalg::{condition_number, eig_extremes, lambda_max, lambda_min};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn steady_state_objective_dominates_metric_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..10_000 {
        let n = 1 + i % 5;
        let spread = rng.random_range(0.1..5.0);
        let w = random_spd(&mut rng, n, spread);
        let c = rng.random_range(0.0..10.0);
        let obj = steady_state_objective(&w, c).unwrap();
        assert!(obj.metric_form <= obj.upper * (1.0 + 1e-9), "sample {i}: {} > {}", obj.metric_form, obj.upper);
    }
}

#[test]
fn composite_objective_dominates_metric_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..10_000 {
        let n = 1 + i % 4;
        let (sh, sm) = (rng.random_range(0.1..3.0), rng.random_range(0.1..3.0));
        let h = random_spd(&mut rng, n, sh);
        let m = random_spd(&mut rng, n, sm);
        let lx_eps = rng.random_range(0.0..5.0);
        let w = m.clone().try_inverse().unwrap();
        let c2 = lambda_max(&h) + lx_eps;
        let lhs = lagrangian_objective_metric_form(&h, &m, lx_eps);
        let kappa = condition_number(&w);
        let rhs = kappa + c2 * kappa * kappa * lambda_min(&w);
        assert!(lhs <= rhs * (1.0 + 1e-9), "sample {i}: {lhs} > {rhs}");
    }
}

#[test]
fn epsilon_matches_dense_grid_on_toy_constants() {
    let c = ContractionConstants { m_lower: 1.0, m_upper: 1.0, m_x: 1.0, m_xx: 0.0, g1: 1.0, g2: 0.0, gamma_c: 1.0, eps: 1.0 };
    let grid_argmin = |c: &ContractionConstants| {
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..2_000_000 {
            let eps = i as f64 * 1e-6;
            let mut k = *c;
            k.eps = eps;
            if k.gamma1() <= 0.0 {
                break;
            }
            let f = k.c_c() / (2.0 * k.gamma1());
            if f < best.0 {
                best = (f, eps);
            }
        }
        best.1
    };
    let e = optimal_epsilon(&c, None).unwrap();
    assert!((e.eps - grid_argmin(&c)).abs() < 1e-4);
    // Doubling the noise moves the optimum: it solves eps^2 + 2 eps - 2/lambda = 0.
    let scaled = ContractionConstants { g1: 2f64.sqrt(), ..c };
    let e2 = optimal_epsilon(&scaled, None).unwrap();
    assert!((e2.eps - grid_argmin(&scaled)).abs() < 1e-4);
    assert!((e2.eps - (2f64.sqrt() - 1.0)).abs() < 1e-8);
    assert!((e.eps - e2.eps).abs() > 0.3);
}

#[test]
fn epsilon_fails_when_noise_destroys_contraction() {
    let c = ContractionConstants { m_lower: 1.0, m_upper: 1.0, m_x: 1.0, m_xx: 10.0, g1: 1.0, g2: 0.0, gamma_c: 1.0, eps: 1.0 };
    assert!(matches!(optimal_epsilon(&c, None), Err(AnalysisError::BoundUndefined(_))));
}

#[test]
fn discrete_bound_converges_to_the_continuous_solution() {
    let (gamma, c_c, v0, m, t) = (0.8, 0.3, 2.0, 1.0, 1.5);
    let cont = ContractionConstants { m_lower: m, m_upper: m, m_x: 0.0, m_xx: 0.0, g1: (c_c / 2.0f64).sqrt(), g2: (c_c / 2.0f64).sqrt(), gamma_c: gamma, eps: 1.0 };
    assert!((cont.c_c() - c_c).abs() < 1e-14);
    let exact = (1.0 - (-2.0 * gamma * t).exp()) * c_c / (2.0 * gamma) + (-2.0 * gamma * t).exp() * v0 / m;
    let mut prev = f64::INFINITY;
    for dt in [0.1, 0.01, 0.001, 0.0001] {
        let gamma2 = 2.0 * gamma * dt;
        let g1d = cont.g1 * f64::sqrt(dt);
        let d = DiscreteConstants { m_lower: m, m_upper: m, gamma_d: gamma2, gamma2, g1d, g2d: g1d };
        let (rate, c_tilde) = discrete_to_continuous(dt, gamma2, d.c_d()).unwrap();
        assert!((rate - 2.0 * gamma).abs() < 1e-12 && (c_tilde - c_c).abs() < 1e-12);
        let k = (t / dt).round() as u32;
        let err = (discrete_mse_bound(&d, v0, k).unwrap() - exact).abs();
        assert!(err < prev);
        prev = err;
    }
    assert!(prev < 1e-3);
    // The continuous bound keeps the full offset, so it sits above the limit.
    assert!(continuous_mse_bound(&cont, v0, t).unwrap() >= exact);
    let far = 50.0;
    let exact_far = (1.0 - (-2.0 * gamma * far).exp()) * c_c / (2.0 * gamma);
    assert!((continuous_mse_bound(&cont, 0.0, far).unwrap() - exact_far).abs() < 1e-12);
}

#[test]
fn pair_energy_matches_quadrature_and_generator_matches_differences() {
    let metric = |x: &DVector<f64>| DMatrix::from_element(1, 1, 2.0 + x[0].sin());
    let (a, b) = (0.9, -0.4);
    let q = straight_line_energy(&metric, &DVector::from_element(1, a), &DVector::from_element(1, b), 64);
    assert!((q - pair_v(a, b)).abs() < 1e-9);
    let h = 1e-4;
    let va = (pair_v(a + h, b) - pair_v(a - h, b)) / (2.0 * h);
    let vb = (pair_v(a, b + h) - pair_v(a, b - h)) / (2.0 * h);
    let vaa = (pair_v(a + h, b) - 2.0 * pair_v(a, b) + pair_v(a - h, b)) / (h * h);
    let vbb = (pair_v(a, b + h) - 2.0 * pair_v(a, b) + pair_v(a, b - h)) / (h * h);
    let fd = va * pair_drift(a) + vb * pair_drift(b) + 0.5 * (G1 * G1 * vaa + G2 * G2 * vbb);
    assert!((fd - pair_generator(a, b)).abs() < 1e-5);
}

#[test]
fn one_step_gap_shrinks_superlinearly() {
    let sys = ScalarPair { drift: &pair_drift, g1: G1, g2: G2, v: &pair_v, generator: &pair_generator };
    let outer = [(1.0, -0.5), (0.3, 0.8), (-1.2, 0.4)];
    let gap = |dt: f64| outer.iter().map(|&xi| one_step_generator_gap(&sys, xi, dt, 100_000, 5).unwrap().abs()).sum::<f64>();
    let coarse = gap(0.1);
    let fine = gap(0.05);
    assert!(coarse / fine >= 2.5, "ratio {}", coarse / fine);
}

#[test]
fn bound_report_flags_hard_violations() {
    let series = cvstem::sim::EnsembleSeries { times: vec![0.0, 1.0], mean: vec![1.0, 2.0], std_err: vec![0.1, 0.1], runs: 10 };
    let soft = BoundReport::compare("x", serde_json::json!({}), &series, vec![1.0, 1.9], 1.96, 0.5).unwrap();
    assert!(soft.passed);
    let hard = BoundReport::compare("x", serde_json::json!({}), &series, vec![1.0, 1.0], 1.96, 0.5).unwrap();
    assert!(!hard.passed);
    let json = serde_json::to_string(&hard).unwrap();
    assert!(json.contains("violation_fraction"));
}

#[test]
fn l2_check_rejects_non_positive_margin() {
    let c = L2GainConstants { alpha: 0.1, m_lower: 1.0, m_upper: 2.0, c_m: 0.0, eps1: 1.0 };
    assert!(l2_gain_check(&[], &c, 1.96).is_err());
}

proptest! {
    #[test]
    fn continuous_bound_monotone(gamma_c in 0.1f64..3.0, dg in 0.0f64..1.0, t in 0.0f64..5.0, dt in 0.0f64..2.0,
                                 v0 in 0.0f64..10.0, g in 0.0f64..0.5) {
        let c = ContractionConstants { m_lower: 1.0, m_upper: 1.5, m_x: 0.2, m_xx: 0.1, g1: g, g2: g, gamma_c, eps: 0.5 };
        let b = continuous_mse_bound(&c, v0, t).unwrap();
        prop_assert!(continuous_mse_bound(&c, v0, t + dt).unwrap() <= b * (1.0 + 1e-12));
        let faster = ContractionConstants { gamma_c: gamma_c + dg, ..c };
        prop_assert!(continuous_mse_bound(&faster, v0, t).unwrap() <= b * (1.0 + 1e-12));
    }

    #[test]
    fn discrete_bound_monotone_from_above(gamma2 in 0.01f64..0.9, g in 0.0f64..0.3, extra in 0.0f64..5.0, k in 0u32..200) {
        let d = DiscreteConstants { m_lower: 1.0, m_upper: 1.0, gamma_d: gamma2, gamma2, g1d: g, g2d: g };
        let v0 = d.c_d() / d.gamma2 + extra;
        prop_assert!(discrete_mse_bound(&d, v0, k + 1).unwrap() <= discrete_mse_bound(&d, v0, k).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn epsilon_is_a_minimizer(m_lower in 0.5f64..2.0, ratio in 1.0f64..3.0, m_x in 0.05f64..2.0, m_xx in 0.0f64..0.5,
                              g in 0.05f64..0.8, gamma_c in 0.5f64..3.0) {
        let c = ContractionConstants { m_lower, m_upper: m_lower * ratio, m_x, m_xx, g1: g, g2: g, gamma_c, eps: 1.0 };
        if let Ok(e) = optimal_epsilon(&c, None) {
            for scale in [0.5, 0.9, 1.1, 2.0] {
                let k = ContractionConstants { eps: e.eps * scale, ..c };
                if k.gamma1() > 0.0 {
                    prop_assert!(e.value <= k.c_c() / (2.0 * k.gamma1()) * (1.0 + 1e-9));
                }
            }
        }
    }

    #[test]
    fn offset_constants_recompute(m_lower in 0.1f64..2.0, ratio in 1.0f64..4.0, m_x in 0.0f64..2.0, m_xx in 0.0f64..2.0,
                                  g_u in 0.0f64..2.0, eps in 0.01f64..3.0) {
        let c = TrackingConstants { alpha: 0.3, m_lower, m_upper: m_lower * ratio, m_x, m_xx, g_u, eps };
        let expect = ratio * g_u * g_u + m_x * g_u * g_u / (eps * m_lower);
        prop_assert!((c.offset() - expect).abs() <= 1e-12 * (1.0 + expect));
        prop_assert!((c.two_alpha_g() - g_u * g_u * (m_x * eps + m_xx / 2.0)).abs() < 1e-12 * (1.0 + c.two_alpha_g()));
        let (lo, hi) = eig_extremes(&DMatrix::from_diagonal(&DVector::from_vec(vec![m_lower, m_lower * ratio])));
        prop_assert!((lo - m_lower).abs() < 1e-12 && (hi - m_lower * ratio).abs() < 1e-9);
    }
}
