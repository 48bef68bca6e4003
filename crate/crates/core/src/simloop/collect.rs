//! Expert demonstration collection: one JSONL record per 2 Hz frame with
//! scene tokens, the expert's future trajectory and controls, and the raw
//! ego-frame scene geometry needed for teacher labeling.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_episode, EpisodeConfig, ExpertParams, Policy, SimError};
use crate::geom::normalize_angle;
use crate::heads::DiscreteControl;
use crate::kinematics::{Trajectory, Waypoint};
use crate::world::{
    AgentState, ControlTuple, LanePolyline, NavCommand, Scenario, SceneTokens, VehicleState,
};

/// Raw scene geometry in the frame ego frame, for open-loop labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoScene {
    pub agents: Vec<AgentState>,
    pub lanes: Vec<LanePolyline>,
    /// Expert route polyline points, ego frame.
    pub route: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub scenario_id: String,
    pub t: f64,
    pub tokens: SceneTokens,
    /// Future 2 Hz waypoints in the frame ego frame.
    pub expert_traj: Trajectory,
    /// Discrete targets for the current and future 2 Hz control steps.
    pub expert_ctrl_2hz: Vec<DiscreteControl>,
    /// Continuous 10 Hz controls applied from this frame onward.
    pub expert_ctrl_10hz: Vec<ControlTuple>,
    pub nav: NavCommand,
    pub scene: DemoScene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoHeader {
    #[serde(rename = "type")]
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub t_ctrl: usize,
    pub t_dp: usize,
    pub traj_waypoints: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollectStats {
    pub episodes: usize,
    pub skipped: usize,
    pub frames: usize,
}

fn to_ego_agent(ego: &VehicleState, a: &AgentState) -> AgentState {
    let p = ego.to_ego_frame(a.state.position());
    AgentState {
        state: VehicleState::new(
            p.x,
            p.y,
            normalize_angle(a.state.heading - ego.heading),
            a.state.speed,
        ),
        ..a.clone()
    }
}

fn to_ego_lane(ego: &VehicleState, l: &LanePolyline) -> LanePolyline {
    LanePolyline {
        id: l.id,
        centerline: l.centerline.iter().map(|&p| ego.to_ego_frame(p)).collect(),
        width: l.width,
    }
}

/// Run the scripted expert over the scenarios and write one frame record per
/// 2 Hz step whose full future horizon fits in the episode. Scenarios the
/// expert fails are skipped with a warning. The header record always comes
/// first, even for an empty scenario list.
pub fn collect_demos(
    scenarios: &[(String, Scenario)],
    out_path: impl AsRef<Path>,
    cfg: &EpisodeConfig,
    expert: &ExpertParams,
    t_ctrl: usize,
    t_dp: usize,
) -> Result<CollectStats, SimError> {
    let traj_waypoints = 6usize;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_path)?);
    let header = DemoHeader {
        kind: "header".to_string(),
        config_hash: cfg.config_hash.clone(),
        seed: cfg.seed,
        t_ctrl,
        t_dp,
        traj_waypoints,
    };
    writeln!(f, "{}", serde_json::to_string(&header)?)?;

    let mut stats = CollectStats {
        episodes: 0,
        skipped: 0,
        frames: 0,
    };
    for (id, scenario) in scenarios {
        let log = run_episode(id, scenario, &Policy::Expert(expert), cfg);
        if !log.outcome.success {
            eprintln!(
                "warning: expert failed on {id} (goal={}, collision={}), skipping",
                log.outcome.goal_reached, log.outcome.collision
            );
            stats.skipped += 1;
            continue;
        }
        stats.episodes += 1;
        let steps = &log.steps;
        let horizon = 5 * traj_waypoints; // 3 s of future states at 10 Hz
        let mut k = 0usize;
        while k + horizon < steps.len() {
            let ego = steps[k].world.ego;
            let expert_traj = Trajectory::new(
                (1..=traj_waypoints)
                    .map(|j| {
                        let s = &steps[k + 5 * j].world.ego;
                        let p = ego.to_ego_frame(s.position());
                        Waypoint {
                            x: p.x,
                            y: p.y,
                            heading: normalize_angle(s.heading - ego.heading),
                        }
                    })
                    .collect(),
                0.5,
            );
            let expert_ctrl_2hz: Vec<DiscreteControl> = (0..t_ctrl)
                .map(|j| {
                    let idx = (k + 5 * j).min(steps.len() - 1);
                    DiscreteControl::from_continuous(&steps[idx].control)
                })
                .collect();
            let expert_ctrl_10hz: Vec<ControlTuple> = (0..t_dp)
                .map(|j| steps[(k + j).min(steps.len() - 1)].control)
                .collect();
            let record = DemoRecord {
                scenario_id: id.clone(),
                t: steps[k].time,
                tokens: crate::world::tokenize_scene(
                    &ego,
                    &steps[k].world.agents,
                    &scenario.lanes,
                    scenario.nav_command,
                    &cfg.tokenizer,
                ),
                expert_traj,
                expert_ctrl_2hz,
                expert_ctrl_10hz,
                nav: scenario.nav_command,
                scene: DemoScene {
                    agents: steps[k]
                        .world
                        .agents
                        .iter()
                        .map(|a| to_ego_agent(&ego, a))
                        .collect(),
                    lanes: scenario.lanes.iter().map(|l| to_ego_lane(&ego, l)).collect(),
                    route: scenario
                        .route_polyline()
                        .points()
                        .iter()
                        .map(|&p| {
                            let q = ego.to_ego_frame(p);
                            (q.x, q.y)
                        })
                        .collect(),
                },
            };
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
            stats.frames += 1;
            k += 5;
        }
    }
    Ok(stats)
}

pub fn load_demos(path: impl AsRef<Path>) -> Result<(DemoHeader, Vec<DemoRecord>), SimError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: DemoHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| SimError::BadLog("empty demo file".to_string()))?,
    )?;
    if header.kind != "header" {
        return Err(SimError::BadLog("first record must be the header".to_string()));
    }
    let mut records = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line)?);
    }
    Ok((header, records))
}
