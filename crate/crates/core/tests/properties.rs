//! Deterministic property suites: algebraic identities of the Kronecker
//! layer, dual-route checks of the transfer blocks, exactness of the
//! truncated recursion, and soundness of every bound family.

use std::collections::BTreeMap;

use proptest::prelude::*;

use momentprop::bounds::{
    build_error_coefficients, choose_j, exactness_condition, refined_row_bound, JStrategy,
};
use momentprop::carleman::{build_e, build_e_jk, enumerate_h, expected_kron_block};
use momentprop::distribution::ScalarDistribution;
use momentprop::init_moments::InitialMomentEngine;
use momentprop::kron::{kron_power, kron_product, Mat};
use momentprop::model::{CoefficientModel, Expr, InitialStateModel, PolynomialSystemSpec};
use momentprop::oracle::{exact_enumeration_moments, sample_trajectory};
use momentprop::propagate::{extract_moment, init_state, TruncatedPropagator};
use momentprop::tail::{safety_bound, safety_radius};
use momentprop::{build_logistic_model, logistic_benchmark_model};

fn mat_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |data| Mat::from_vec(rows, cols, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixed_product_identity(
        dims in (1usize..=4, 1usize..=4, 1usize..=4, 1usize..=4, 1usize..=4, 1usize..=4),
        seed in any::<u64>(),
    ) {
        let (p, q, r, s, qq, ss) = dims;
        let mut rng_state = seed | 1;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        let fill = |rows: usize, cols: usize, f: &mut dyn FnMut() -> f64| {
            Mat::from_vec(rows, cols, (0..rows * cols).map(|_| f()).collect()).unwrap()
        };
        let a = fill(p, q, &mut next);
        let b = fill(r, s, &mut next);
        let c = fill(q, qq, &mut next);
        let d = fill(s, ss, &mut next);
        let lhs = kron_product(&a, &b).unwrap().matmul(&kron_product(&c, &d).unwrap()).unwrap();
        let rhs = kron_product(&a.matmul(&c).unwrap(), &b.matmul(&d).unwrap()).unwrap();
        let scale = rhs.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((x - y).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn kron_power_dims_and_additivity(m in mat_strategy(2, 3), j in 0usize..=2, k in 0usize..=2) {
        let pj = kron_power(&m, j).unwrap();
        prop_assert_eq!(pj.rows(), 2usize.pow(j as u32));
        prop_assert_eq!(pj.cols(), 3usize.pow(j as u32));
        let pk = kron_power(&m, k).unwrap();
        let pjk = kron_power(&m, j + k).unwrap();
        let prod = kron_product(&pj, &pk).unwrap();
        let scale = pjk.data().iter().fold(1.0f64, |mx, v| mx.max(v.abs()));
        for (x, y) in pjk.data().iter().zip(prod.data()) {
            prop_assert!((x - y).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn h_counts_match_brute_force(j in 0usize..=4, k in 0usize..=12, d_s in 0usize..=3) {
        let h = enumerate_h(j, k, d_s);
        // Independent route: filter all (d_S+1)^j tuples.
        let mut count = 0usize;
        let base = d_s + 1;
        let total = base.pow(j as u32);
        for code in 0..total {
            let mut rem = code;
            let mut sum = 0;
            for _ in 0..j {
                sum += rem % base;
                rem /= base;
            }
            if sum == k {
                count += 1;
            }
        }
        prop_assert_eq!(h.sequences.len(), count);
        // Duplicate-free and every sequence valid.
        let mut seen = std::collections::BTreeSet::new();
        for s in &h.sequences {
            prop_assert_eq!(s.iter().sum::<usize>(), k);
            prop_assert!(s.iter().all(|&i| i <= d_s));
            prop_assert!(seen.insert(s.clone()));
        }
    }

    #[test]
    fn safety_roundtrip(
        x1 in proptest::collection::vec(-1.0f64..1.0, 1..4),
        vars in proptest::collection::vec(0.01f64..1.0, 1..4),
        eps in 0.0f64..0.2,
        p in 0.01f64..1.0,
    ) {
        let n = x1.len().min(vars.len());
        let x1 = &x1[..n];
        // Second moment >= mean^2 keeps the instance realizable.
        let x2: Vec<f64> = x1.iter().zip(&vars[..n]).map(|(m, v)| m * m + v).collect();
        let zeros = vec![0.0; n];
        let alpha = safety_radius(x1, &x2, eps, &zeros, &zeros, p).unwrap();
        if alpha > eps {
            let b = safety_bound(x1, &x2, eps, &zeros, &zeros, alpha).unwrap();
            prop_assert!(b.raw <= p + 1e-9, "raw {} vs p {}", b.raw, p);
        }
    }
}

/// Deterministic pseudo-random coefficient models for cross-route checks:
/// n = 2, degree 2, one parameter, everything nonzero including F_0.
fn small_random_model(seed: u64, with_param: bool) -> PolynomialSystemSpec {
    let mut state = seed | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let n = 2;
    let mut fill = |rows: usize, cols: usize| {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| next() * 0.8).collect()).unwrap()
    };
    let constants = vec![fill(n, 1), fill(n, n), fill(n, n * n)];
    let mut linear: Vec<BTreeMap<usize, Mat>> =
        vec![BTreeMap::new(), BTreeMap::new(), BTreeMap::new()];
    if with_param {
        linear[0].insert(0, fill(n, 1));
        linear[1].insert(0, fill(n, n));
        linear[2].insert(0, fill(n, n * n));
    }
    let params = if with_param {
        vec![ScalarDistribution::finite(vec![0.2, 0.8], vec![0.5, 0.5])]
    } else {
        vec![]
    };
    let coeffs = CoefficientModel::new(n, 2, params, constants, linear).unwrap();
    let init = InitialStateModel {
        sources: vec![
            ScalarDistribution::finite(vec![0.1, 0.4], vec![0.5, 0.5]),
            ScalarDistribution::point(0.3),
        ],
        components: vec![Expr::source(0), Expr::source(1)],
    };
    PolynomialSystemSpec::new("random-small", coeffs, init).unwrap()
}

#[test]
fn e_jk_matches_sequence_sum_route() {
    // The graded recursion against the literal sum over H_{j,k} of
    // per-sequence expectations.
    for seed in [3, 17, 91] {
        for with_param in [false, true] {
            let spec = small_random_model(seed, with_param);
            for j in 0..=3usize {
                for k in 0..=(j * 2).min(4) {
                    let fast = build_e_jk(&spec.coeffs, j, k).unwrap();
                    let h = enumerate_h(j, k, 2);
                    let mut slow = Mat::zeros(2usize.pow(j as u32), 2usize.pow(k as u32)).unwrap();
                    for seq in &h.sequences {
                        let term = expected_kron_block(&spec.coeffs, seq).unwrap();
                        slow.axpy(1.0, &term);
                    }
                    let scale = slow.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
                    for (a, b) in fast.data().iter().zip(slow.data()) {
                        assert!(
                            (a - b).abs() <= 1e-12 * scale,
                            "seed {seed} param {with_param} block ({j},{k}): {a} vs {b}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn e_row_block_zero_is_unit_row() {
    for seed in [5, 23] {
        let spec = small_random_model(seed, true);
        let e = build_e(&spec.coeffs, 3, 3).unwrap();
        let row0 = e.mat.row(0);
        assert_eq!(row0[0], 1.0);
        assert!(row0[1..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn dense_and_matrix_free_engines_agree() {
    // The two propagation engines implement the same linear map; compare
    // them on perturbed states, with F_0 both absent and present.
    for seed in [7, 29, 111] {
        for with_param in [false, true] {
            let spec = small_random_model(seed, with_param);
            let n_t = 4;
            let dense = TruncatedPropagator::build_dense(&spec, n_t, None).unwrap();
            let free = TruncatedPropagator::build_matrix_free(&spec, n_t).unwrap();
            let eng = InitialMomentEngine::new(&spec.init).unwrap();
            let mut s0 = init_state(&eng, n_t).unwrap();
            // Perturb away from a pure moment vector: the map is linear, so
            // agreement must hold on arbitrary stacked vectors.
            let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
            for v in s0.y.iter_mut().skip(1) {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                *v += ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.1;
            }
            let a = dense.propagate(s0.clone(), 3).unwrap();
            let b = free.propagate(s0, 3).unwrap();
            for (sa, sb) in a.iter().zip(&b) {
                let scale = sa.y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for (x, y) in sa.y.iter().zip(&sb.y) {
                    assert!(
                        (x - y).abs() <= 1e-12 * scale,
                        "seed {seed} param {with_param} t {}: {x} vs {y}",
                        sa.t
                    );
                }
            }
        }
    }
}

#[test]
fn constant_slot_pinned_over_long_runs() {
    let spec = logistic_benchmark_model();
    let prop = TruncatedPropagator::build_dense(&spec, 8, None).unwrap();
    let eng = InitialMomentEngine::new(&spec.init).unwrap();
    let s0 = init_state(&eng, 8).unwrap();
    let mut s = s0;
    for _ in 0..50 {
        s = prop.step(&s).unwrap();
        assert_eq!(s.y[0], 1.0);
    }
}

#[test]
fn propagation_is_linear_on_convex_combinations() {
    let spec = logistic_benchmark_model();
    let n_t = 6;
    let prop = TruncatedPropagator::build_dense(&spec, n_t, None).unwrap();
    let eng = InitialMomentEngine::new(&spec.init).unwrap();
    let a = init_state(&eng, n_t).unwrap();
    // A second valid initial state: deterministic x0 = 0.3.
    let spec_b = build_logistic_model(
        ScalarDistribution::uniform(0.3, 0.7),
        ScalarDistribution::point(0.3),
    )
    .unwrap();
    let eng_b = InitialMomentEngine::new(&spec_b.init).unwrap();
    let b = init_state(&eng_b, n_t).unwrap();

    let lambda = 0.3;
    let mut mix = a.clone();
    for (m, (x, y)) in mix.y.iter_mut().zip(a.y.iter().zip(&b.y)) {
        *m = lambda * x + (1.0 - lambda) * y;
    }
    let pa = prop.propagate(a, 5).unwrap();
    let pb = prop.propagate(b, 5).unwrap();
    let pm = prop.propagate(mix, 5).unwrap();
    for t in 0..=5 {
        for i in 0..pm[t].y.len() {
            let want = lambda * pa[t].y[i] + (1.0 - lambda) * pb[t].y[i];
            assert!(
                (pm[t].y[i] - want).abs() <= 1e-12 * want.abs().max(1.0),
                "t={t} i={i}"
            );
        }
    }
}

fn two_point_logistic() -> PolynomialSystemSpec {
    build_logistic_model(
        ScalarDistribution::finite(vec![0.4, 0.6], vec![0.5, 0.5]),
        ScalarDistribution::point(0.5),
    )
    .unwrap()
}

#[test]
fn prop1_exactness_against_enumeration() {
    // Finite-valued parameters, deterministic x0: whenever j0 d_S^t <= N_T
    // the truncated recursion must reproduce the enumerated moment.
    let spec = two_point_logistic();
    for (j0, t) in [(1usize, 1usize), (1, 2), (1, 3), (1, 4), (2, 1), (2, 2), (2, 3)] {
        let n_t = j0 << t; // j0 * 2^t
        assert!(exactness_condition(j0, t, 2, n_t));
        let prop = TruncatedPropagator::build_dense(&spec, n_t, None).unwrap();
        let eng = InitialMomentEngine::new(&spec.init).unwrap();
        let states = prop.propagate(init_state(&eng, n_t).unwrap(), t).unwrap();
        let approx = extract_moment(&states[t], j0).unwrap();
        let exact = exact_enumeration_moments(&spec, j0, t).unwrap();
        for (a, e) in approx.iter().zip(&exact) {
            assert!(
                (a - e).abs() <= 1e-9 * e.abs().max(1e-12),
                "j0={j0} t={t}: {a} vs {e}"
            );
        }
    }
}

#[test]
fn deterministic_model_full_lift_matches_simulation() {
    // With no randomness at all, block j of the truncated state equals
    // x(t)^[j] of the direct simulation while j d_S^t stays within N_T.
    for seed in [13, 77] {
        let spec = small_random_model(seed, false);
        // Make x0 deterministic for a pointwise comparison.
        let init = InitialStateModel {
            sources: vec![
                ScalarDistribution::point(0.25),
                ScalarDistribution::point(-0.15),
            ],
            components: vec![Expr::source(0), Expr::source(1)],
        };
        let spec =
            PolynomialSystemSpec::new("det", spec.coeffs.clone(), init).unwrap();
        let n_t = 8;
        let prop = TruncatedPropagator::build_dense(&spec, n_t, None).unwrap();
        let eng = InitialMomentEngine::new(&spec.init).unwrap();
        let t_max = 2usize;
        let states = prop
            .propagate(init_state(&eng, n_t).unwrap(), t_max)
            .unwrap();
        let traj = sample_trajectory(&spec, t_max, 0).unwrap();
        for t in 0..=t_max {
            for j in 0..=2usize {
                if !exactness_condition(j, t, 2, n_t) {
                    continue;
                }
                let approx = extract_moment(&states[t], j).unwrap();
                let exact = momentprop::kron::kron_power_vec(&traj[t], j).unwrap();
                for (a, e) in approx.iter().zip(&exact) {
                    assert!(
                        (a - e).abs() <= 1e-10 * e.abs().max(1.0),
                        "seed {seed} t={t} j={j}: {a} vs {e}"
                    );
                }
            }
        }
    }
}

#[test]
fn error_reconstruction_identity() {
    // Etil_j reconstruction: x~_{j0}(t) + sum_j Etil_j E[x0^[j]] equals the
    // exact moment, on instances where enumeration is available.
    let spec = two_point_logistic();
    let eng = InitialMomentEngine::new(&spec.init).unwrap();
    for (j0, t, n_t) in [
        (1usize, 3usize, 4usize),
        (1, 4, 8),
        (2, 2, 4),
        (2, 3, 4),
        (2, 4, 16),
        (1, 1, 1),
    ] {
        let ec = build_error_coefficients(&spec.coeffs, j0, t, n_t).unwrap();
        let prop = TruncatedPropagator::build_dense(&spec, n_t, None).unwrap();
        let states = prop.propagate(init_state(&eng, n_t).unwrap(), t).unwrap();
        let approx = extract_moment(&states[t], j0).unwrap();
        let exact = exact_enumeration_moments(&spec, j0, t).unwrap();
        let err = ec.error_vector(&eng).unwrap();
        for i in 0..approx.len() {
            let reconstructed = approx[i] + err[i];
            assert!(
                (reconstructed - exact[i]).abs() <= 1e-9 * exact[i].abs().max(1e-9),
                "j0={j0} t={t} N_T={n_t} row {i}: {reconstructed} vs {}",
                exact[i]
            );
        }
    }
}

#[test]
fn refined_bounds_sound_for_every_subset_family() {
    let spec = two_point_logistic();
    let eng = InitialMomentEngine::new(&spec.init).unwrap();
    for (j0, t, n_t) in [(1usize, 3usize, 4usize), (1, 4, 8), (2, 2, 4), (2, 3, 8)] {
        let ec = build_error_coefficients(&spec.coeffs, j0, t, n_t).unwrap();
        let prop = TruncatedPropagator::build_dense(&spec, n_t, None).unwrap();
        let states = prop.propagate(init_state(&eng, n_t).unwrap(), t).unwrap();
        let approx = extract_moment(&states[t], j0).unwrap();
        let exact = exact_enumeration_moments(&spec, j0, t).unwrap();
        let true_err: Vec<f64> = exact.iter().zip(approx).map(|(e, a)| e - a).collect();

        let max_order = ec.max_order();
        let norms = eng.moment_norm_table(max_order).unwrap();
        let full: Vec<usize> = (0..=max_order).collect();
        // Prefix sets, strategy-chosen sets, a scattered set, empty, full.
        let mut subsets: Vec<Vec<usize>> = vec![vec![], full.clone()];
        for k in [1usize, 2, 3, max_order / 2 + 1] {
            subsets.push((0..k.min(max_order + 1)).collect());
            subsets.push(choose_j(&ec, &norms, 0, k.min(max_order + 1), JStrategy::ByRowNorm));
            subsets.push(choose_j(&ec, &norms, 0, k.min(max_order + 1), JStrategy::ByMomentNorm));
        }
        subsets.push((0..=max_order).step_by(3).collect());
        for j_set in &subsets {
            let bound = refined_row_bound(&ec, &eng, 0, j_set).unwrap();
            assert!(
                bound + 1e-12 >= true_err[0].abs(),
                "unsound: j0={j0} t={t} N_T={n_t} J={j_set:?}: bound {bound} < |e| {}",
                true_err[0].abs()
            );
        }
        // Full subset evaluates the error exactly.
        let b_full = refined_row_bound(&ec, &eng, 0, &full).unwrap();
        assert!(
            (b_full - true_err[0].abs()).abs() <= 1e-9 * true_err[0].abs().max(1e-12),
            "full-J not exact: {b_full} vs {}",
            true_err[0].abs()
        );
    }
}

#[test]
fn moment_norm_table_no_monotonicity_assumed() {
    // A point mass above 1 has increasing Kronecker-moment norms; the table
    // must report them faithfully.
    let init = InitialStateModel {
        sources: vec![ScalarDistribution::point(2.0)],
        components: vec![Expr::source(0)],
    };
    let eng = InitialMomentEngine::new(&init).unwrap();
    let table = eng.moment_norm_table(3).unwrap();
    assert_eq!(table, vec![1.0, 2.0, 4.0, 8.0]);
}
