//! Bundled scenario suite: five interaction families with seeded variation,
//! used for demo collection, closed-loop evaluation, and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::Vec2;
use crate::world::{
    AgentBehavior, AgentState, Goal, LanePolyline, NavCommand, Scenario, VehicleState,
};

pub const FAMILIES: [&str; 5] = [
    "free_cruise",
    "emergency_brake",
    "merge",
    "give_way",
    "overtake",
];

fn lane(id: u64, points: Vec<(f64, f64)>, width: f64) -> LanePolyline {
    LanePolyline {
        id,
        centerline: points.into_iter().map(|(x, y)| Vec2::new(x, y)).collect(),
        width,
    }
}

fn agent(
    id: u64,
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
    behavior: AgentBehavior,
    target_speed: f64,
) -> AgentState {
    AgentState {
        id,
        state: VehicleState::new(x, y, heading, speed),
        length: 4.2,
        width: 1.8,
        behavior,
        target_speed,
    }
}

fn free_cruise(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(101));
    Scenario {
        lanes: vec![lane(0, vec![(-10.0, 0.0), (180.0, 0.0)], 3.5)],
        ego_init: VehicleState::new(0.0, 0.0, 0.0, rng.gen_range(5.0..7.0)),
        agents: vec![],
        nav_command: NavCommand::Follow,
        expert_route: vec![0],
        goal: Goal {
            x: rng.gen_range(105.0..115.0),
            y: 0.0,
            radius: 3.0,
        },
        time_limit: 30.0,
        seed,
    }
}

/// A reactive lead closes on a slow mover and brakes hard; the ego must
/// react quickly and then follow through the slowdown.
fn emergency_brake(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(202));
    let blocker_x = rng.gen_range(46.0..54.0);
    let blocker_speed = rng.gen_range(1.6..2.4);
    let lead_x = rng.gen_range(21.0..25.0);
    Scenario {
        lanes: vec![lane(0, vec![(-10.0, 0.0), (220.0, 0.0)], 3.5)],
        ego_init: VehicleState::new(0.0, 0.0, 0.0, 6.5),
        agents: vec![
            agent(1, lead_x, 0.0, 0.0, 7.0, AgentBehavior::Reactive, 7.5),
            agent(
                2,
                blocker_x,
                0.0,
                0.0,
                blocker_speed,
                AgentBehavior::NonReactive,
                blocker_speed,
            ),
        ],
        nav_command: NavCommand::Follow,
        expert_route: vec![0],
        goal: Goal {
            x: rng.gen_range(58.0..64.0),
            y: 0.0,
            radius: 3.0,
        },
        time_limit: 35.0,
        seed,
    }
}

/// The ego enters from a ramp and must slot into main-lane traffic.
fn merge(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(303));
    let main = lane(0, vec![(-10.0, 0.0), (150.0, 0.0)], 3.5);
    let ramp = lane(1, vec![(-5.0, 5.0), (20.0, 5.0), (45.0, 0.0)], 3.5);
    let agent_x = rng.gen_range(14.0..26.0);
    let agent_speed = rng.gen_range(5.0..6.0);
    Scenario {
        lanes: vec![main, ramp],
        ego_init: VehicleState::new(0.0, 5.0, 0.0, 6.0),
        agents: vec![agent(
            1,
            agent_x,
            0.0,
            0.0,
            agent_speed,
            AgentBehavior::Reactive,
            agent_speed,
        )],
        nav_command: NavCommand::Right,
        expert_route: vec![1, 0],
        goal: Goal {
            x: 90.0,
            y: 0.0,
            radius: 3.0,
        },
        time_limit: 30.0,
        seed,
    }
}

/// A non-reactive vehicle cuts across the ego lane; the ego must yield.
fn give_way(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(404));
    let cross_x = rng.gen_range(44.0..50.0);
    let cross_y = rng.gen_range(16.0..20.0);
    Scenario {
        lanes: vec![lane(0, vec![(-10.0, 0.0), (150.0, 0.0)], 3.5)],
        ego_init: VehicleState::new(0.0, 0.0, 0.0, 7.0),
        agents: vec![agent(
            1,
            cross_x,
            cross_y,
            -std::f64::consts::FRAC_PI_2,
            4.0,
            AgentBehavior::NonReactive,
            4.0,
        )],
        nav_command: NavCommand::Straight,
        expert_route: vec![0],
        goal: Goal {
            x: 90.0,
            y: 0.0,
            radius: 3.0,
        },
        time_limit: 30.0,
        seed,
    }
}

/// A slow vehicle blocks the right lane; the route overtakes on the left.
fn overtake(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(505));
    let lead_x = rng.gen_range(28.0..36.0);
    Scenario {
        lanes: vec![
            lane(0, vec![(-10.0, 0.0), (150.0, 0.0)], 3.5),
            lane(1, vec![(-10.0, 3.5), (150.0, 3.5)], 3.5),
        ],
        ego_init: VehicleState::new(0.0, 0.0, 0.0, 7.0),
        agents: vec![agent(
            2,
            lead_x,
            0.0,
            0.0,
            2.0,
            AgentBehavior::NonReactive,
            2.0,
        )],
        nav_command: NavCommand::Left,
        expert_route: vec![1],
        goal: Goal {
            x: 95.0,
            y: 3.5,
            radius: 3.0,
        },
        time_limit: 30.0,
        seed,
    }
}

fn build(family: &str, seed: u64) -> Scenario {
    match family {
        "free_cruise" => free_cruise(seed),
        "emergency_brake" => emergency_brake(seed),
        "merge" => merge(seed),
        "give_way" => give_way(seed),
        "overtake" => overtake(seed),
        other => panic!("unknown scenario family {other}"),
    }
}

/// Every family crossed with the given seeds, as (id, scenario) pairs with
/// ids of the form `family-s<seed>`.
pub fn bundled_suite(seeds: &[u64]) -> Vec<(String, Scenario)> {
    let mut out = Vec::with_capacity(FAMILIES.len() * seeds.len());
    for family in FAMILIES {
        for &seed in seeds {
            out.push((format!("{family}-s{seed}"), build(family, seed)));
        }
    }
    out
}

/// The 20-episode evaluation suite: 5 families × 4 seeds.
pub fn eval_suite() -> Vec<(String, Scenario)> {
    bundled_suite(&[0, 1, 2, 3])
}

/// The training suite is seed-disjoint from evaluation; 100 episodes yield
/// roughly 2k demonstration frames.
pub fn training_suite() -> Vec<(String, Scenario)> {
    let seeds: Vec<u64> = (100..120).collect();
    bundled_suite(&seeds)
}

/// Rebuild a bundled scenario from its `family-s<seed>` id.
pub fn scenario_by_id(id: &str) -> Option<Scenario> {
    let (family, seed_part) = id.rsplit_once("-s")?;
    if !FAMILIES.contains(&family) {
        return None;
    }
    let seed: u64 = seed_part.parse().ok()?;
    Some(build(family, seed))
}
