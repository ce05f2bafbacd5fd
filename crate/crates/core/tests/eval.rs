use std::sync::Arc;

use mast::eval::{
    check_compatible, episode_success, run_episode, run_eval, spl, spl_term, EpisodeResult, EvalConfig, EvalError,
    Report, SuccessConfig,
};
use mast::policy::{ActMode, PolicyConfig, PolicyNet, Variant};
use mast::sim::{generate_world, sample_episode, Action, SensorConfig, Simulator, World, WorldParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn result(stopped: bool, steps: usize, final_distance: f64, s: f64, d: f64) -> EpisodeResult {
    EpisodeResult { success: false, steps, shortest_path: s, path_length: d, final_distance, stopped, collisions: 0 }
}

/// (result, goal radius, expected success, expected SPL term), all by hand.
fn golden() -> Vec<(EpisodeResult, f64, bool, f64)> {
    vec![
        // Optimal stop on the goal.
        (result(true, 10, 0.0, 4.0, 4.0), 1.0, true, 1.0),
        // Twice the shortest path.
        (result(true, 10, 0.0, 4.0, 8.0), 1.0, true, 0.5),
        // On the goal cell but timed out without stopping.
        (result(false, 500, 0.0, 4.0, 4.0), 1.0, false, 0.0),
        // Stopped one room away.
        (result(true, 30, 5.0, 6.0, 3.0), 1.0, false, 0.0),
        // Last admissible step.
        (result(true, 499, 0.0, 6.0, 10.0), 1.0, true, 0.6),
        // Stop issued on step 500 is too late.
        (result(true, 500, 0.0, 6.0, 6.0), 1.0, false, 0.0),
        // Radius is strict.
        (result(true, 12, 1.0, 6.0, 5.0), 1.0, false, 0.0),
        // Wider radius lets d fall below s; the term is capped at 1.
        (result(true, 5, 1.0, 3.0, 2.0), 2.0, true, 1.0),
        // Wandered off without stopping.
        (result(false, 40, 0.0, 7.0, 7.0), 1.0, false, 0.0),
        // Four times the shortest path.
        (result(true, 12, 0.0, 5.0, 20.0), 1.0, true, 0.25),
    ]
}

#[test]
fn golden_suite_is_exact() {
    let mut scored = Vec::new();
    for (i, (mut r, radius, succ, term)) in golden().into_iter().enumerate() {
        let cfg = SuccessConfig { goal_radius: radius, ..SuccessConfig::default() };
        assert_eq!(episode_success(&r, &cfg), succ, "case {i}");
        r.success = succ;
        assert_eq!(spl_term(&r).unwrap(), term, "case {i}");
        scored.push(r);
    }
    assert_eq!(spl(&scored).unwrap(), (1.0 + 0.5 + 0.0 + 0.0 + 0.6 + 0.0 + 0.0 + 1.0 + 0.0 + 0.25) / 10.0);
    let rep = Report::from_results("x", "-", &scored).unwrap();
    assert_eq!(rep.success_rate, 50.0);
    assert_eq!(rep.episodes, 10);
}

#[test]
fn spl_examples_and_contract() {
    let mut a = result(true, 9, 0.0, 4.0, 8.0);
    a.success = true;
    let b = result(false, 500, 3.0, 4.0, 20.0);
    assert_eq!(spl(&[a.clone(), b.clone()]).unwrap(), 0.25);
    assert_eq!(spl(&[b.clone(), b]).unwrap(), 0.0);
    let mut bad = a;
    bad.shortest_path = 0.0;
    assert!(matches!(spl(&[bad]), Err(EvalError::Contract(_))));
}

fn arb_result() -> impl Strategy<Value = EpisodeResult> {
    (any::<bool>(), any::<bool>(), 1usize..600, 0.0f64..20.0, 0.1f64..30.0, 0.0f64..60.0).prop_map(
        |(success, stopped, steps, fd, s, d)| EpisodeResult {
            success,
            steps,
            shortest_path: s,
            path_length: d,
            final_distance: fd,
            stopped,
            collisions: 0,
        },
    )
}

proptest! {
    #[test]
    fn spl_bounded_by_success_rate(rs in prop::collection::vec(arb_result(), 1..40)) {
        for r in &rs {
            let t = spl_term(r).unwrap();
            prop_assert!((0.0..=1.0).contains(&t));
        }
        let rep = Report::from_results("x", "-", &rs).unwrap();
        prop_assert!(0.0 <= rep.spl);
        prop_assert!(rep.spl <= rep.success_rate + 1e-9);
        prop_assert!(rep.success_rate <= 100.0);
    }

    #[test]
    fn success_implies_all_three_conditions(r in arb_result(), radius in 0.5f64..3.0) {
        let cfg = SuccessConfig { goal_radius: radius, ..SuccessConfig::default() };
        if episode_success(&r, &cfg) {
            prop_assert!(r.stopped && r.steps < 500 && r.final_distance < radius);
        }
    }
}

fn sensor() -> SensorConfig {
    SensorConfig { n_rays: 36, image_height: 36, ..SensorConfig::default() }
}

fn small_policy(variant: Variant, seed: u64) -> (PolicyNet, mast::tensor::ParamStore) {
    let cfg = PolicyConfig {
        hidden: 16,
        action_embedding: 4,
        image_height: 36,
        image_width: 36,
        radius: 2,
        n_classes: 8,
        map_dim: 8,
        map_heads: 2,
        map_layers: 1,
        ..PolicyConfig::default()
    }
    .with_variant(variant);
    PolicyNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// The standard suite: default 3-room worlds with furniture.
fn suite(n: usize) -> Vec<Arc<World>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    (0..n).map(|_| Arc::new(generate_world(&WorldParams::default(), &mut rng).unwrap())).collect()
}

fn eval_cfg(episodes: usize, greedy: bool) -> EvalConfig {
    EvalConfig { episodes, seed: 5, greedy, min_geo: 2.0, max_geo: 20.0, success: SuccessConfig::default() }
}

#[test]
fn same_seed_same_report() {
    let (net, store) = small_policy(Variant::Mast, 1);
    let ws = suite(3);
    for greedy in [false, true] {
        let a = run_eval(&net, &store, &ws, &sensor(), &eval_cfg(6, greedy)).unwrap();
        let b = run_eval(&net, &store, &ws, &sensor(), &eval_cfg(6, greedy)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.label, "MaAST");
        assert!(a.0.spl <= a.0.success_rate);
    }
}

#[test]
fn traces_are_consistent_with_their_results() {
    let (net, store) = small_policy(Variant::RgbdSem, 2);
    let ws = suite(2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = SuccessConfig::default();
    for i in 0..8 {
        let w = ws[i % 2].clone();
        let ep = sample_episode(&w, &mut rng, 2.0, 20.0).unwrap();
        let t = run_episode(&net, &store, w, ep, &sensor(), &cfg, ActMode::Sample, &mut rng).unwrap();
        // d recounted from positions: turns and bumps leave (x, y) unchanged.
        let moved = t.poses.windows(2).filter(|p| (p[0].x, p[0].y) != (p[1].x, p[1].y)).count();
        assert_eq!(t.result.path_length, moved as f64);
        assert_eq!(t.actions.len(), t.result.steps);
        assert_eq!(t.poses.len(), t.result.steps + 1);
        assert_eq!(t.result.stopped, t.actions.last() == Some(&Action::Stop));
        assert_eq!(episode_success(&t.result, &cfg), t.result.success);
    }
}

#[test]
fn random_policies_rarely_succeed() {
    let ws = suite(8);
    // Fresh network, sampled actions.
    let (net, store) = small_policy(Variant::Rgbd, 3);
    let (rep, _) = run_eval(&net, &store, &ws, &sensor(), &eval_cfg(200, false)).unwrap();
    assert!(rep.success_rate < 5.0, "fresh policy success {}", rep.success_rate);

    // Uniform random actions, Monte Carlo.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, mut wins) = (2000, 0);
    for i in 0..n {
        let w = ws[i % ws.len()].clone();
        let ep = sample_episode(&w, &mut rng, 2.0, 20.0).unwrap();
        let mut sim = Simulator::new(w, sensor(), ep).unwrap();
        loop {
            let (_, info) = sim.step(Action::ALL[rng.random_range(0..4)]).unwrap();
            if info.done {
                wins += (info.stopped && info.steps < 500 && info.geodesic < 1.0) as usize;
                break;
            }
        }
    }
    assert!((wins as f64) < 0.05 * n as f64, "random actions won {wins}/{n}");
}

#[test]
fn mismatched_setups_are_incompatible() {
    let (net, store) = small_policy(Variant::Mast, 4);
    let ws = suite(1);
    let wide = SensorConfig { n_rays: 40, ..sensor() };
    assert!(matches!(check_compatible(&net, &wide, &ws[0]), Err(EvalError::Compatibility(_))));
    assert!(matches!(
        run_eval(&net, &store, &ws, &wide, &eval_cfg(1, true)),
        Err(EvalError::Compatibility(_))
    ));
    let params = WorldParams { n_classes: 12, ..WorldParams::default() };
    let many = generate_world(&params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(check_compatible(&net, &sensor(), &many), Err(EvalError::Compatibility(_))));
    assert!(matches!(run_eval(&net, &store, &[], &sensor(), &eval_cfg(1, true)), Err(EvalError::Contract(_))));
}
