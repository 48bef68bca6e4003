//! Rule-based metric teachers producing binary ground-truth scores for
//! vocabulary distillation: collision, soft lane keeping, and ego progress.
//!
//! All inputs are expected in one common frame (the labeled instant's ego
//! frame). Agents are propagated at constant velocity for open-loop labeling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{angle_diff, Polyline, Vec2};
use crate::kinematics::{resample, Trajectory, VehicleParams, SIM_HZ};
use crate::world::{AgentState, LanePolyline};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("degenerate expert route: expert trajectory has no arc-length progress")]
    DegenerateExpert,
    #[error(transparent)]
    Kinematics(#[from] crate::kinematics::KinematicsError),
}

/// Teacher thresholds. The paper's rule set leaves these free; they are
/// surfaced in reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherParams {
    /// Maximum angle between a trajectory segment and its nearest lane
    /// segment, radians.
    pub angle_max: f64,
    /// Extra lateral slack beyond the half lane width, meters.
    pub lateral_margin: f64,
    /// Minimum progress ratio counted as sufficient.
    pub ep_threshold: f64,
}

impl Default for TeacherParams {
    fn default() -> Self {
        Self {
            angle_max: 30f64.to_radians(),
            lateral_margin: 0.5,
            ep_threshold: 0.5,
        }
    }
}

/// An oriented rectangle in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Obb {
    pub fn new(center: Vec2, heading: f64, length: f64, width: f64) -> Self {
        debug_assert!(length > 0.0 && width > 0.0);
        Self {
            center,
            heading,
            half_length: length / 2.0,
            half_width: width / 2.0,
        }
    }

    pub fn from_agent(a: &AgentState) -> Self {
        Self::new(a.state.position(), a.state.heading, a.length, a.width)
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let axis_l = Vec2::new(self.heading.cos(), self.heading.sin());
        let axis_w = Vec2::new(-self.heading.sin(), self.heading.cos());
        let l = axis_l * self.half_length;
        let w = axis_w * self.half_width;
        [
            self.center + l + w,
            self.center + l - w,
            self.center - l - w,
            self.center - l + w,
        ]
    }

    fn axes(&self) -> [Vec2; 2] {
        [
            Vec2::new(self.heading.cos(), self.heading.sin()),
            Vec2::new(-self.heading.sin(), self.heading.cos()),
        ]
    }
}

/// Signed SAT margin: the smallest overlap depth across the four face
/// normals (negative when a separating axis exists).
pub fn obb_sat_margin(a: &Obb, b: &Obb) -> f64 {
    let mut margin = f64::INFINITY;
    let d = b.center - a.center;
    for axis in a.axes().into_iter().chain(b.axes()) {
        let ra = a.half_length * a.axes()[0].dot(axis).abs()
            + a.half_width * a.axes()[1].dot(axis).abs();
        let rb = b.half_length * b.axes()[0].dot(axis).abs()
            + b.half_width * b.axes()[1].dot(axis).abs();
        let depth = ra + rb - d.dot(axis).abs();
        margin = margin.min(depth);
    }
    margin
}

/// Separating-axis intersection test over the 4 face normals. Touching
/// boxes count as overlapping.
pub fn obb_overlap(a: &Obb, b: &Obb) -> bool {
    obb_sat_margin(a, b) >= 0.0
}

/// Agent pose extrapolated at constant velocity after `dt` seconds.
pub fn propagate_agent(a: &AgentState, dt: f64) -> Obb {
    let pos = a.state.position()
        + Vec2::new(a.state.heading.cos(), a.state.heading.sin()) * (a.state.speed * dt);
    Obb::new(pos, a.state.heading, a.length, a.width)
}

/// Collision teacher: 1 iff the ego box never intersects any
/// constant-velocity agent at 10 Hz along the trajectory.
pub fn collision_score(
    t: &Trajectory,
    agents: &[AgentState],
    vehicle: &VehicleParams,
) -> Result<bool, TeacherError> {
    if agents.is_empty() {
        return Ok(true);
    }
    let fine = if t.waypoints.len() >= 2 {
        resample(t, SIM_HZ)?
    } else {
        t.clone()
    };
    for (k, w) in fine.waypoints.iter().enumerate() {
        let time = (k + 1) as f64 * fine.dt;
        let ego_box = Obb::new(w.position(), w.heading, vehicle.ego_length, vehicle.ego_width);
        for a in agents {
            if obb_overlap(&ego_box, &propagate_agent(a, time)) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn nearest_lane<'a>(lanes: &'a [LanePolyline], p: Vec2) -> Option<(&'a LanePolyline, Polyline, crate::geom::Projection)> {
    let mut best: Option<(&LanePolyline, Polyline, crate::geom::Projection)> = None;
    for lane in lanes {
        let pl = lane.polyline();
        let proj = pl.project(p);
        if best.as_ref().map_or(true, |(_, _, bp)| proj.distance < bp.distance) {
            best = Some((lane, pl, proj));
        }
    }
    best
}

/// Soft lane keeping: 0 if any waypoint leaves its nearest lane corridor or
/// any trajectory segment turns too far from its nearest lane segment.
/// Lane changes are allowed because the nearest lane is evaluated per point.
pub fn lane_keeping_score(t: &Trajectory, lanes: &[LanePolyline], params: &TeacherParams) -> bool {
    assert!(t.waypoints.len() >= 2, "lane keeping needs >= 2 waypoints");
    if lanes.is_empty() {
        return false;
    }
    for w in &t.waypoints {
        let (lane, _, proj) = nearest_lane(lanes, w.position()).unwrap();
        if proj.distance > lane.width / 2.0 + params.lateral_margin {
            return false;
        }
    }
    // Segment angles, including the implicit origin → first waypoint leg.
    let mut prev = Vec2::ZERO;
    for w in &t.waypoints {
        let cur = w.position();
        let seg = cur - prev;
        if seg.norm() > 1e-9 {
            let mid = prev + seg * 0.5;
            let (_, pl, proj) = nearest_lane(lanes, mid).unwrap();
            let lane_dir = pl.tangent_at(proj.arc_length);
            let seg_dir = seg.y.atan2(seg.x);
            if angle_diff(seg_dir, lane_dir).abs() > params.angle_max {
                return false;
            }
        }
        prev = cur;
    }
    true
}

/// Ego progress: arc-length progress along the expert route, normalized by
/// the expert's own progress. Both progresses are measured from the
/// projection of the frame origin (the labeled instant's position).
pub fn ego_progress_score(
    t: &Trajectory,
    route: &Polyline,
    expert: &Trajectory,
    params: &TeacherParams,
) -> Result<(bool, f64), TeacherError> {
    let s0 = route.project(Vec2::ZERO).arc_length;
    let expert_end = route
        .project(expert.waypoints.last().unwrap().position())
        .arc_length;
    let expert_progress = expert_end - s0;
    if expert_progress <= 1e-9 {
        return Err(TeacherError::DegenerateExpert);
    }
    let ego_end = route.project(t.waypoints.last().unwrap().position()).arc_length;
    let ratio = ((ego_end - s0) / expert_progress).max(0.0);
    Ok((ratio >= params.ep_threshold, ratio))
}

/// Per-anchor binary teacher labels plus the softmax imitation target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub col: Vec<bool>,
    pub slk: Vec<bool>,
    pub ep: Vec<bool>,
    pub ep_ratio: Vec<f64>,
    pub y_imitation: Vec<f64>,
}

/// Scene geometry for labeling, all in the labeled instant's ego frame.
pub struct SceneGeometry<'a> {
    pub agents: &'a [AgentState],
    pub lanes: &'a [LanePolyline],
    pub route: &'a Polyline,
}

/// Sum of squared paired-waypoint distances (x, y only).
pub fn trajectory_sq_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    a.waypoints
        .iter()
        .zip(&b.waypoints)
        .map(|(wa, wb)| {
            let dx = wa.x - wb.x;
            let dy = wa.y - wb.y;
            dx * dx + dy * dy
        })
        .sum()
}

/// Label every anchor with the three teachers and the imitation softmax
/// y_i ∝ exp(−‖expert − anchor_i‖²).
pub fn label_vocabulary(
    anchors: &[Trajectory],
    expert: &Trajectory,
    scene: &SceneGeometry,
    vehicle: &VehicleParams,
    params: &TeacherParams,
) -> Result<MetricScores, TeacherError> {
    assert!(!anchors.is_empty(), "vocabulary must not be empty");
    let neg_d2: Vec<f64> = anchors
        .iter()
        .map(|a| -trajectory_sq_distance(expert, a))
        .collect();
    let max = neg_d2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = neg_d2.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let y_imitation: Vec<f64> = exps.iter().map(|e| e / sum).collect();

    let mut col = Vec::with_capacity(anchors.len());
    let mut slk = Vec::with_capacity(anchors.len());
    let mut ep = Vec::with_capacity(anchors.len());
    let mut ep_ratio = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        col.push(collision_score(anchor, scene.agents, vehicle)?);
        slk.push(lane_keeping_score(anchor, scene.lanes, params));
        match ego_progress_score(anchor, scene.route, expert, params) {
            Ok((score, ratio)) => {
                ep.push(score);
                ep_ratio.push(ratio);
            }
            // A stationary expert demands no progress from anyone.
            Err(TeacherError::DegenerateExpert) => {
                ep.push(true);
                ep_ratio.push(1.0);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(MetricScores {
        col,
        slk,
        ep,
        ep_ratio,
        y_imitation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::Waypoint;
    use crate::world::{AgentBehavior, VehicleState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn boxed(cx: f64, cy: f64, heading: f64, l: f64, w: f64) -> Obb {
        Obb::new(Vec2::new(cx, cy), heading, l, w)
    }

    #[test]
    fn identical_boxes_overlap() {
        let a = boxed(1.0, 2.0, 0.3, 4.0, 2.0);
        assert!(obb_overlap(&a, &a));
    }

    #[test]
    fn distant_unit_boxes_do_not_overlap() {
        let a = boxed(0.0, 0.0, 0.0, 1.0, 1.0);
        let b = boxed(10.0, 0.0, 0.5, 1.0, 1.0);
        assert!(!obb_overlap(&a, &b));
    }

    /// Dense point-sampling oracle: grid points of box A tested for
    /// containment in box B (inclusive).
    fn sampling_oracle(a: &Obb, b: &Obb, grid: f64) -> bool {
        let inside = |obb: &Obb, p: Vec2| {
            let rel = (p - obb.center).rotate(-obb.heading);
            rel.x.abs() <= obb.half_length + 1e-12 && rel.y.abs() <= obb.half_width + 1e-12
        };
        let nx = (2.0 * a.half_length / grid).ceil() as usize + 1;
        let ny = (2.0 * a.half_width / grid).ceil() as usize + 1;
        for i in 0..=nx {
            for j in 0..=ny {
                let local = Vec2::new(
                    -a.half_length + 2.0 * a.half_length * i as f64 / nx as f64,
                    -a.half_width + 2.0 * a.half_width * j as f64 / ny as f64,
                );
                let p = local.rotate(a.heading) + a.center;
                if inside(b, p) {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn sat_agrees_with_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for _ in 0..500 {
            let a = boxed(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-3.1..3.1),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.5..3.0),
            );
            let b = boxed(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.1..3.1),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.5..3.0),
            );
            // Skip pairs within 0.02 m of tangency, where grid sampling and
            // the exact test legitimately disagree.
            if obb_sat_margin(&a, &b).abs() < 0.02 {
                continue;
            }
            checked += 1;
            assert_eq!(
                obb_overlap(&a, &b),
                sampling_oracle(&a, &b, 0.01),
                "disagreement for {a:?} vs {b:?}"
            );
        }
        assert!(checked > 400, "too many tangential pairs skipped: {checked}");
    }

    fn agent(x: f64, y: f64, heading: f64, speed: f64) -> AgentState {
        AgentState {
            id: 1,
            state: VehicleState::new(x, y, heading, speed),
            length: 4.0,
            width: 1.8,
            behavior: AgentBehavior::NonReactive,
            target_speed: speed,
        }
    }

    fn straight_traj(n: usize, step: f64) -> Trajectory {
        Trajectory::new(
            (1..=n)
                .map(|k| Waypoint {
                    x: step * k as f64,
                    y: 0.0,
                    heading: 0.0,
                })
                .collect(),
            0.5,
        )
    }

    #[test]
    fn empty_scene_is_collision_free() {
        let t = straight_traj(6, 2.5);
        assert!(collision_score(&t, &[], &VehicleParams::default()).unwrap());
    }

    #[test]
    fn agent_on_first_waypoint_collides() {
        let t = straight_traj(6, 2.5);
        let a = agent(2.5, 0.0, 0.0, 0.0);
        assert!(!collision_score(&t, &[a], &VehicleParams::default()).unwrap());
    }

    /// Independent dense oracle: linear ego interpolation at 100 Hz with
    /// constant-velocity agents.
    fn dense_collision_oracle(t: &Trajectory, agents: &[AgentState], v: &VehicleParams) -> bool {
        let horizon = t.horizon();
        let n = (horizon * 100.0).round() as usize;
        let pose_at = |time: f64| -> (Vec2, f64) {
            let pos = time / t.dt;
            let idx = pos.floor() as usize;
            let frac = pos - idx as f64;
            let get = |i: usize| -> (Vec2, f64) {
                if i == 0 {
                    (Vec2::ZERO, 0.0)
                } else {
                    let w = &t.waypoints[(i - 1).min(t.waypoints.len() - 1)];
                    (w.position(), w.heading)
                }
            };
            let (p0, h0) = get(idx);
            let (p1, h1) = get(idx + 1);
            (p0 + (p1 - p0) * frac, crate::geom::lerp_angle(h0, h1, frac))
        };
        for k in 1..=n {
            let time = k as f64 * 0.01;
            if time > horizon {
                break;
            }
            let (p, h) = pose_at(time);
            let ego = Obb::new(p, h, v.ego_length, v.ego_width);
            for a in agents {
                if obb_overlap(&ego, &propagate_agent(a, time)) {
                    return false;
                }
            }
        }
        true
    }

    /// Lower bound on the minimum box separation over the dense timeline.
    fn min_separation_bound(t: &Trajectory, agents: &[AgentState], v: &VehicleParams) -> f64 {
        let r_ego = (v.ego_length / 2.0).hypot(v.ego_width / 2.0);
        let mut min_sep = f64::INFINITY;
        let n = (t.horizon() * 100.0).round() as usize;
        for k in 1..=n {
            let time = k as f64 * 0.01;
            let pos = time / t.dt;
            let idx = pos.floor() as usize;
            let frac = pos - idx as f64;
            let get = |i: usize| -> Vec2 {
                if i == 0 {
                    Vec2::ZERO
                } else {
                    t.waypoints[(i - 1).min(t.waypoints.len() - 1)].position()
                }
            };
            let p = get(idx) + (get(idx + 1) - get(idx)) * frac;
            for a in agents {
                let b = propagate_agent(a, time);
                let r_a = a.length.hypot(a.width) / 2.0;
                min_sep = min_sep.min(p.distance(b.center) - r_ego - r_a);
            }
        }
        min_sep
    }

    #[test]
    fn collision_teacher_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = VehicleParams::default();
        let mut disagreements = 0;
        let scenes = 500;
        for _ in 0..scenes {
            let step = rng.gen_range(0.5..4.0);
            let curve = rng.gen_range(-0.08f64..0.08);
            let t = Trajectory::new(
                (1..=6)
                    .map(|k| {
                        let s = step * k as f64;
                        Waypoint {
                            x: s,
                            y: curve * s * s,
                            heading: (2.0 * curve * s).atan(),
                        }
                    })
                    .collect(),
                0.5,
            );
            let agents: Vec<AgentState> = (0..rng.gen_range(1..=3))
                .map(|i| AgentState {
                    id: i,
                    state: VehicleState::new(
                        rng.gen_range(0.0..20.0),
                        rng.gen_range(-4.0..4.0),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(0.0..6.0),
                    ),
                    length: rng.gen_range(3.5..5.0),
                    width: rng.gen_range(1.5..2.2),
                    behavior: AgentBehavior::NonReactive,
                    target_speed: 0.0,
                })
                .collect();
            let fast = collision_score(&t, &agents, &v).unwrap();
            let dense = dense_collision_oracle(&t, &agents, &v);
            if fast != dense {
                disagreements += 1;
                assert!(
                    min_separation_bound(&t, &agents, &v) <= 0.2,
                    "disagreement with clear separation"
                );
            }
        }
        assert!(
            (disagreements as f64) <= 0.01 * scenes as f64,
            "{disagreements} disagreements out of {scenes}"
        );
    }

    #[test]
    fn collision_monotone_in_agent_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = VehicleParams::default();
        for _ in 0..100 {
            let t = straight_traj(6, rng.gen_range(1.0..3.0));
            let mut a = agent(
                rng.gen_range(0.0..16.0),
                rng.gen_range(-2.0..2.0),
                0.0,
                rng.gen_range(0.0..4.0),
            );
            if !collision_score(&t, &[a.clone()], &v).unwrap() {
                a.length *= 1.5;
                a.width *= 1.5;
                assert!(!collision_score(&t, &[a], &v).unwrap());
            }
        }
    }

    fn lane(id: u64, y: f64) -> LanePolyline {
        LanePolyline {
            id,
            centerline: vec![Vec2::new(-5.0, y), Vec2::new(60.0, y)],
            width: 3.5,
        }
    }

    #[test]
    fn centerline_trajectory_keeps_lane() {
        let t = straight_traj(6, 2.5);
        assert!(lane_keeping_score(&t, &[lane(0, 0.0)], &TeacherParams::default()));
    }

    #[test]
    fn perpendicular_trajectory_fails_lane_keeping() {
        let t = Trajectory::new(
            (1..=6)
                .map(|k| Waypoint {
                    x: 0.0,
                    y: 1.0 * k as f64,
                    heading: std::f64::consts::FRAC_PI_2,
                })
                .collect(),
            0.5,
        );
        assert!(!lane_keeping_score(&t, &[lane(0, 0.0)], &TeacherParams::default()));
    }

    #[test]
    fn gradual_lane_change_allowed() {
        // Adjacent lanes 3.5 m apart; lateral step of ≤ tan(15°)·dx per
        // segment keeps every segment angle at 15° < 30°.
        let lanes = [lane(0, 0.0), lane(1, 3.5)];
        let dx = 3.0;
        let dy = dx * 15f64.to_radians().tan();
        let mut y = 0.0;
        let mut wps = Vec::new();
        for k in 1..=8 {
            y = (y + dy).min(3.5);
            wps.push(Waypoint {
                x: dx * k as f64,
                y,
                heading: 0.0,
            });
        }
        let t = Trajectory::new(wps, 0.5);
        assert!(lane_keeping_score(&t, &lanes, &TeacherParams::default()));
    }

    #[test]
    fn progress_ratio_against_expert() {
        let route = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)]);
        let expert = straight_traj(6, 2.0); // 12 m progress
        let params = TeacherParams::default();

        let (score, ratio) = ego_progress_score(&expert, &route, &expert, &params).unwrap();
        assert!(score);
        assert!((ratio - 1.0).abs() < 1e-12);

        let half = straight_traj(6, 1.0); // 6 m progress
        let (score, ratio) = ego_progress_score(&half, &route, &expert, &params).unwrap();
        assert!((ratio - 0.5).abs() < 1e-12);
        assert!(score); // 0.5 >= threshold 0.5

        let stopped = Trajectory::new(vec![Waypoint { x: 0.0, y: 0.0, heading: 0.0 }; 6], 0.5);
        let (score, ratio) = ego_progress_score(&stopped, &route, &expert, &params).unwrap();
        assert_eq!(ratio, 0.0);
        assert!(!score);
    }

    #[test]
    fn degenerate_expert_errors() {
        let route = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)]);
        let stopped = Trajectory::new(vec![Waypoint { x: 0.0, y: 0.0, heading: 0.0 }; 6], 0.5);
        assert!(matches!(
            ego_progress_score(&stopped, &route, &stopped, &TeacherParams::default()),
            Err(TeacherError::DegenerateExpert)
        ));
    }

    #[test]
    fn imitation_softmax_properties() {
        let route = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)]);
        let expert = straight_traj(6, 2.0);
        let anchors = vec![
            straight_traj(6, 2.0),
            straight_traj(6, 1.0),
            straight_traj(6, 3.0),
        ];
        let scene = SceneGeometry {
            agents: &[],
            lanes: &[lane(0, 0.0)],
            route: &route,
        };
        let scores = label_vocabulary(
            &anchors,
            &expert,
            &scene,
            &VehicleParams::default(),
            &TeacherParams::default(),
        )
        .unwrap();
        // anchor 0 equals the expert: argmax of y.
        let argmax = scores
            .y_imitation
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 0);
        let sum: f64 = scores.y_imitation.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // anchors 1 and 2 are equidistant from the expert: equal weights.
        assert!((scores.y_imitation[1] - scores.y_imitation[2]).abs() < 1e-12);
    }

    #[test]
    fn translation_leaves_labels_unchanged() {
        let shift = Vec2::new(13.0, -4.0);
        let route = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)]);
        let route_shifted = Polyline::new(
            route.points().iter().map(|&p| p + shift).collect(),
        );
        let expert = straight_traj(6, 2.0);
        let anchors = vec![straight_traj(6, 1.5), straight_traj(6, 2.5)];
        let shift_traj = |t: &Trajectory| {
            Trajectory::new(
                t.waypoints
                    .iter()
                    .map(|w| Waypoint {
                        x: w.x + shift.x,
                        y: w.y + shift.y,
                        heading: w.heading,
                    })
                    .collect(),
                t.dt,
            )
        };
        let lanes = [lane(0, 0.0)];
        let lanes_shifted = [LanePolyline {
            id: 0,
            centerline: lanes[0].centerline.iter().map(|&p| p + shift).collect(),
            width: lanes[0].width,
        }];
        let a = agent(8.0, 0.5, 0.0, 2.0);
        let mut a_shifted = a.clone();
        a_shifted.state = VehicleState::new(
            a.state.x + shift.x,
            a.state.y + shift.y,
            a.state.heading,
            a.state.speed,
        );

        let base = label_vocabulary(
            &anchors,
            &expert,
            &SceneGeometry {
                agents: std::slice::from_ref(&a),
                lanes: &lanes,
                route: &route,
            },
            &VehicleParams::default(),
            &TeacherParams::default(),
        )
        .unwrap();
        let anchors_shifted: Vec<Trajectory> = anchors.iter().map(|t| shift_traj(t)).collect();
        let shifted = label_vocabulary(
            &anchors_shifted,
            &shift_traj(&expert),
            &SceneGeometry {
                agents: std::slice::from_ref(&a_shifted),
                lanes: &lanes_shifted,
                route: &route_shifted,
            },
            &VehicleParams::default(),
            &TeacherParams::default(),
        )
        .unwrap();
        assert_eq!(base.col, shifted.col);
        assert_eq!(base.slk, shifted.slk);
        assert_eq!(base.ep, shifted.ep);
        for (a, b) in base.y_imitation.iter().zip(&shifted.y_imitation) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        // adding a constant to all squared distances must not change y:
        // exercised through two anchor sets at a constant offset in d².
        let expert = straight_traj(6, 2.0);
        let anchors = vec![straight_traj(6, 1.0), straight_traj(6, 3.0)];
        let d2: Vec<f64> = anchors
            .iter()
            .map(|a| trajectory_sq_distance(&expert, a))
            .collect();
        let softmax = |d2: &[f64]| {
            let m = d2.iter().cloned().fold(f64::INFINITY, f64::min);
            let e: Vec<f64> = d2.iter().map(|v| (-(v - m)).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let y0 = softmax(&d2);
        let shifted: Vec<f64> = d2.iter().map(|v| v + 42.0).collect();
        let y1 = softmax(&shifted);
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
