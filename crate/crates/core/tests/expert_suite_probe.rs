use deskdrive::simloop::{eval_suite, run_episode, training_suite, EpisodeConfig, ExpertParams, Policy};

#[test]
fn probe_expert_on_all_bundled_scenarios() {
    let expert = ExpertParams::default();
    let cfg = EpisodeConfig::new("probe", 0);
    let mut failures = Vec::new();
    for (id, scenario) in eval_suite().iter().chain(training_suite().iter()) {
        let log = run_episode(id, scenario, &Policy::Expert(&expert), &cfg);
        let o = &log.outcome;
        println!(
            "{id}: success={} goal={} collision={} offroad={} rc={:.2} steps={} err={:?}",
            o.success, o.goal_reached, o.collision, o.offroad, o.route_completion, log.steps.len(), log.error
        );
        if !o.success {
            failures.push(id.clone());
        }
    }
    assert!(failures.is_empty(), "expert failed: {failures:?}");
}
