//! Property tests over random instances.

mod support;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbm_matching::engine::{run, RunOptions, SimState};
use sbm_matching::estimator::{CountsTable, GFunction};
use sbm_matching::fluid_balance::{
    balance_deviation_bound, build_schedule, f_eval, f_inverse, f_sup, m_star_grid,
};
use sbm_matching::fluid_myopic::{refinement_error, solve_ode, uniform_grid, ODE_STEP};
use sbm_matching::model::{largest_remainder, no_edge_probability};
use sbm_matching::policies::{balance_choose, balance_score, ChoiceContext, LearnedBalance, Policy, PolicySpec};
use sbm_matching::transport::solve_qstar;
use sbm_matching::{Backend, Choice, ModelParams};
use support::{instance, random_instance, transport_lp_value};

fn shape() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 1usize..=5, 1usize..=5)
}

fn params_from((seed, c, d): (u64, usize, usize)) -> ModelParams {
    random_instance(seed, c, d, 0.0, 5.0, 1000, 2.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qstar_matches_lp_and_marginals(s in shape()) {
        let p = params_from(s);
        let q = solve_qstar(&p).unwrap();
        prop_assert!(q.marginal_error(&p) <= 1e-9);
        prop_assert!((q.objective - transport_lp_value(&p)).abs() <= 1e-9);
        for d in 0..p.d() {
            let col: f64 = (0..p.c()).map(|c| q.plan[c][d]).sum();
            prop_assert!((col - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn qstar_plan_is_scale_invariant(s in shape(), lambda in 0.05f64..1.0) {
        let p = params_from(s);
        let mut scaled = p.clone();
        for row in &mut scaled.affinity {
            for a in row.iter_mut() {
                *a *= lambda;
            }
        }
        let (q, qs) = (solve_qstar(&p).unwrap(), solve_qstar(&scaled).unwrap());
        prop_assert!((qs.objective - lambda * q.objective).abs() <= 1e-9);
        for c in 0..p.c() {
            for d in 0..p.d() {
                prop_assert!((q.mass[c][d] - qs.mass[c][d]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn f_inverse_round_trips(s in shape(), beta_frac in 0.0f64..=1.0, z_frac in 0.0f64..1.0) {
        let p = params_from(s);
        for c in 0..p.c() {
            if f_sup(&p, c) <= 0.0 {
                continue;
            }
            let beta = beta_frac * p.budgets[c];
            let z = z_frac * beta;
            let v = f_eval(&p, c, beta, z);
            let back = f_inverse(&p, c, beta, v).unwrap();
            prop_assert!((f_eval(&p, c, beta, back) - v).abs() <= 1e-10);
            if v > 1e-6 {
                prop_assert!((back - z).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn g_is_increasing_and_round_trips(
        terms in prop::collection::vec((1u32..100, 0.5f64..2.0), 1..20),
        lower in 0.01f64..0.9,
        u in 0.0f64..=1.0,
        v in 0.0f64..=1.0,
    ) {
        let g = GFunction::new(terms.iter().map(|&(w, e)| (w as f64, e)).collect(), lower).unwrap();
        let x = lower + u * (1.0 - lower);
        let y = lower + v * (1.0 - lower);
        prop_assert!(g.derivative(x) > 0.0);
        if x < y {
            prop_assert!(g.eval(x).unwrap() < g.eval(y).unwrap());
        }
        prop_assert!((g.invert(g.eval(x).unwrap()).x - x).abs() <= 1e-10);
    }

    #[test]
    fn g_inverse_is_lipschitz_on_observed_data(
        a in 0.1f64..3.0,
        cap in 20u64..200,
        m_frac in 0.0f64..0.9,
        weights in prop::collection::vec(0u64..5, 200),
        u in 0.05f64..0.95,
    ) {
        let p = instance(vec![vec![a]], vec![1.0], vec![1.0], cap, 1.0);
        let m = ((cap as f64) * m_frac) as u64;
        let mut counts = CountsTable::new(&[cap], 1);
        for (mp, &w) in weights.iter().enumerate().take(cap as usize) {
            for _ in 0..w {
                counts.record(0, 0, mp as u64, false);
            }
        }
        counts.record(0, 0, m, false);
        let g = GFunction::from_counts(&counts, &p, 0, 0, m).unwrap();
        let lo = g.eval(g.lower).unwrap();
        let y0 = lo + u * (1.0 - lo);
        let h = 1e-6;
        let slope = (g.invert(y0 + h).x - g.invert(y0 - h).x) / (2.0 * h);
        prop_assert!(slope <= 2.0 * a.exp() + 1e-6, "slope {slope}");
    }

    #[test]
    fn balance_score_strictly_decreases(s in shape(), cap in 2u64..200) {
        let p = random_instance(s.0, s.1, s.2, 0.1, 5.0, 1000, 1.0);
        for c in 0..p.c() {
            for m in 1..cap {
                prop_assert!(balance_score(&p, m, cap, c) < balance_score(&p, m - 1, cap, c));
            }
        }
    }

    #[test]
    fn argmax_survives_scaling_single_arrival_class_equal_free(
        seed in any::<u64>(),
        c in 2usize..=4,
        free in 1u64..40,
        lambda in 0.01f64..=1.0,
    ) {
        let p = random_instance(seed, c, 1, 0.1, 5.0, 50, 1.0);
        let caps = vec![free; c];
        let matched = vec![0; c];
        let mut scaled = p.clone();
        for row in &mut scaled.affinity {
            row[0] *= lambda;
        }
        let scores: Vec<f64> = (0..c).map(|k| balance_score(&p, 0, free, k)).collect();
        let best = scores.iter().cloned().fold(f64::MIN, f64::max);
        prop_assume!(scores.iter().filter(|&&s| s >= best - 1e-9).count() == 1);
        prop_assert_eq!(balance_choose(&p, &matched, &caps), balance_choose(&scaled, &matched, &caps));
    }

    #[test]
    fn learned_with_oracle_counts_equals_balance(seed in any::<u64>(), c in 1usize..=3, d in 1usize..=3, n in 2u64..=20) {
        let p = random_instance(seed, c, d, 0.1, 1.9, n, 1.0);
        let caps = largest_remainder(n, &p.budgets);
        let oracle = CountsTable::oracle(&p, &caps, 1 << 20);
        let mut learned = Policy::LearnedBalance(Box::new(LearnedBalance::new(&p, &caps, oracle, 0, 0.05)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = vec![0u64; c];
        loop {
            let ctx = ChoiceContext { params: &p, caps: &caps, matched: &m, d: 0, t: 1 };
            let want = balance_choose(&p, &m, &caps);
            prop_assert_eq!(learned.choose(&ctx, &mut rng), Choice::Class(want), "state {:?}", &m);
            // Odometer over all matched vectors.
            let mut k = 0;
            while k < c {
                if m[k] < caps[k] {
                    m[k] += 1;
                    break;
                }
                m[k] = 0;
                k += 1;
            }
            if k == c {
                break;
            }
        }
    }

    #[test]
    fn myopic_fluid_sits_below_surrogate_within_envelope(s in shape(), alpha in 0.1f64..5.0) {
        let mut p = params_from(s);
        p.horizon_factor = alpha;
        let q = solve_qstar(&p).unwrap();
        let grid = uniform_grid(alpha, 200);
        let f = solve_ode(&p, &q, &grid).unwrap();
        for c in 0..p.c() {
            for i in 0..grid.len() {
                let gap = f.y_tilde[c][i] - f.y[c][i];
                prop_assert!(gap >= -1e-8);
                prop_assert!(gap <= f.err_env[c][i] + 1e-8);
            }
        }
        prop_assert!(refinement_error(&p, &q, &grid, ODE_STEP).unwrap() <= 1e-8);
    }

    #[test]
    fn m_star_is_monotone_and_bounded(s in shape(), alpha in 0.5f64..6.0) {
        let mut p = random_instance(s.0, s.1, s.2, 0.5, 5.0, 1000, alpha);
        p.horizon_factor = alpha;
        let sch = build_schedule(&p).unwrap();
        let m = m_star_grid(&p, &sch, &uniform_grid(alpha, 300)).unwrap();
        for c in 0..p.c() {
            prop_assert!(m[c][0].abs() <= 1e-12);
            for w in m[c].windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12);
            }
            prop_assert!(m[c].iter().all(|&x| x <= p.budgets[c] + 1e-12));
        }
    }

    #[test]
    fn sparse_failure_probability_is_close_to_exponential(a in 0.0f64..50.0, n in 100u64..10_000, frac in 0.0f64..=1.0) {
        prop_assume!(a <= n as f64 / 2.0);
        let free = (frac * n as f64) as u64;
        let exact = no_edge_probability(a, n as f64, free);
        let approx = (-a * free as f64 / n as f64).exp();
        prop_assert!((exact - approx).abs() <= a / (n as f64 * std::f64::consts::E) + 1e-15);
    }

    #[test]
    fn largest_remainder_apportions_exactly(n in 0u64..100_000, s in shape()) {
        let p = params_from(s);
        let k = largest_remainder(n, &p.budgets);
        prop_assert_eq!(k.iter().sum::<u64>(), n);
        for (x, b) in k.iter().zip(&p.budgets) {
            prop_assert!((*x as f64 - n as f64 * b).abs() < 1.0 + 1e-9);
        }
        prop_assert_eq!(k, largest_remainder(n, &p.budgets));
    }

    #[test]
    fn steps_move_one_unit_within_capacity(s in shape(), seed in any::<u64>(), graph in any::<bool>()) {
        let p = random_instance(s.0, s.1, s.2, 0.0, 5.0, 60, 3.0);
        let backend = if graph { Backend::Graph } else { Backend::Counts };
        let caps = largest_remainder(60, &p.budgets);
        for spec in [PolicySpec::Myopic, PolicySpec::Balance, PolicySpec::RealBalance, PolicySpec::learned(0.5), PolicySpec::Uniform] {
            let mut policy = Policy::build(&spec, &p, &caps).unwrap();
            let mut st = SimState::new(&p, caps.clone(), seed, backend).unwrap();
            for _ in 0..p.horizon() {
                let before = st.matched.clone();
                let out = st.step(&mut policy, &p);
                let moved: u64 = st.matched.iter().zip(&before).map(|(a, b)| a - b).sum();
                prop_assert_eq!(moved, out.matched as u64);
                prop_assert!(st.matched.iter().zip(&caps).all(|(m, c)| m <= c));
            }
        }
    }

    #[test]
    fn runs_are_reproducible(seed in any::<u64>(), graph in any::<bool>()) {
        let p = random_instance(seed, 3, 4, 0.0, 5.0, 80, 2.0);
        let opts = RunOptions { backend: if graph { Backend::Graph } else { Backend::Counts }, ..Default::default() };
        for spec in [PolicySpec::Myopic, PolicySpec::learned(0.5)] {
            prop_assert_eq!(run(&p, &spec, seed, &opts).unwrap(), run(&p, &spec, seed, &opts).unwrap());
        }
    }
}

#[test]
fn argmax_can_flip_under_scaling_with_unequal_free_counts() {
    // Class 0 has one free node with a large affinity, class 1 forty
    // free nodes with a small one.
    let p = instance(vec![vec![45.0], vec![2.0]], vec![0.5, 0.5], vec![1.0], 50, 1.0);
    let caps = [1, 40];
    let before = balance_choose(&p, &[0, 0], &caps);
    let mut half = p.clone();
    half.affinity = vec![vec![22.5], vec![1.0]];
    let after = balance_choose(&half, &[0, 0], &caps);
    assert_eq!((before, after), (0, 1));
}

#[test]
fn balance_bound_is_monotone_in_n_for_fixed_epsilon() {
    let mut violations = Vec::new();
    for seed in 0..20u64 {
        let p = random_instance(seed, 4, 5, 0.5, 5.0, 1000, 2.0);
        for eps in [1e-3, 1e-2, 0.1, 1.0] {
            let mut prev = f64::INFINITY;
            for k in 0..40 {
                let n = 100.0 * 1.3f64.powi(k);
                let b = balance_deviation_bound(&p, n, eps).unwrap();
                let worst = b.bound.iter().cloned().fold(0.0, f64::max);
                if worst > prev * (1.0 + 1e-12) {
                    violations.push((seed, eps, n, prev, worst));
                }
                prev = worst;
            }
        }
    }
    assert!(violations.is_empty(), "{} violations, first {:?}", violations.len(), violations.first());
}
