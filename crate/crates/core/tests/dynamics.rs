use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trafficrlhf_core::policy::{rollout_closed_loop, PolicyConfig, RolloutConfig, TrafficPolicy};
use trafficrlhf_core::scenegen::{
    generate_scene, GeneratorConfig, RoadKind, SceneSpec, DEFAULT_EPISODE_LEN,
};
use trafficrlhf_core::world::{step_unicycle, PreparedMap};
use trafficrlhf_core::{Action, ActionLimits, AgentState, DT};

fn actions() -> impl Strategy<Value = Vec<Action>> {
    let lim = ActionLimits::default();
    prop::collection::vec(
        (
            -lim.accel_max..=lim.accel_max,
            -lim.yaw_rate_max..=lim.yaw_rate_max,
        )
            .prop_map(|(a, w)| Action::new(a, w)),
        10,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    // Starting speeds stay above what full braking removes in one second,
    // so the stop-at-zero rule never engages.
    #[test]
    fn one_second_matches_thousandfold_substeps(
        x in -50.0..50.0f64,
        y in -50.0..50.0f64,
        v in 3.5..20.0f64,
        theta in -3.1..3.1f64,
        plan in actions(),
    ) {
        let mut coarse = AgentState::new(x, y, v, theta);
        let mut fine = coarse;
        for a in &plan {
            coarse = step_unicycle(coarse, *a, DT).unwrap();
            for _ in 0..1000 {
                fine = step_unicycle(fine, *a, DT / 1000.0).unwrap();
            }
        }
        let gap = (coarse.x - fine.x).hypot(coarse.y - fine.y);
        prop_assert!(gap < 1e-3, "gap {} m", gap);
        prop_assert!((coarse.v - fine.v).abs() < 1e-9);
    }
}

#[test]
fn closed_loop_logs_replay_under_the_step_equation() {
    let policy = TrafficPolicy::new(&PolicyConfig::default(), 4).unwrap();
    for (seed, kind) in [
        (1, RoadKind::Straight),
        (2, RoadKind::Curve),
        (3, RoadKind::Merge),
    ] {
        let spec = SceneSpec {
            seed,
            n_agents: 4,
            road_kind: kind,
            episode_len: DEFAULT_EPISODE_LEN,
        };
        let scene = generate_scene(&spec, &GeneratorConfig::default()).unwrap();
        let map = PreparedMap::new(&scene.map).unwrap();
        let r = rollout_closed_loop(
            &policy,
            &map,
            &scene.context,
            &RolloutConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        // Every executed step carries its sampled action.
        let executed: usize = r
            .scenario
            .agents
            .iter()
            .map(|a| a.states.len() - scene.context.history[0].states.len())
            .sum();
        assert_eq!(r.records.len(), executed);
        for rec in &r.records {
            let track = &r.scenario.agents[rec.agent].states;
            let action = policy.limits.clip(Action::new(rec.raw[0], rec.raw[1]));
            let next = step_unicycle(track[rec.t], action, DT).unwrap();
            assert_eq!(next, track[rec.t + 1], "agent {} step {}", rec.agent, rec.t);
        }
    }
}
