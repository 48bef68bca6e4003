//! Kinematic bicycle model, actuation mapping, trajectory rollout,
//! resampling, and the waypoint tracker used on selected trajectories.
//!
//! The bicycle model is the rear-axle form: heading_rate = v·tan(δ)/L.
//! All rollouts integrate at 10 Hz; 2 Hz control sequences hold each
//! control constant across its 5 sub-steps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{lerp_angle, normalize_angle, Vec2};
use crate::world::{ControlTuple, VehicleState};

/// Integration frequency for rollouts and simulation, Hz.
pub const SIM_HZ: u32 = 10;
/// Planning frequency for trajectories and the control decoder, Hz.
pub const PLAN_HZ: u32 = 2;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("need >= 2 waypoints to resample")]
    TooFewWaypoints,
    #[error("control sequence must not be empty")]
    EmptySequence,
}

/// Physical vehicle parameters and actuation constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub max_accel: f64,
    pub brake_decel: f64,
    pub drag_coeff: f64,
    pub max_steer_angle: f64,
    pub ego_length: f64,
    pub ego_width: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.8,
            max_accel: 3.0,
            brake_decel: 6.0,
            drag_coeff: 0.1,
            max_steer_angle: 0.7,
            ego_length: 4.6,
            ego_width: 1.9,
        }
    }
}

/// One trajectory waypoint in the ego frame of the planning instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Waypoint {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Uniformly-sampled waypoint sequence. The state at t = 0 is the frame
/// origin and is not stored; the first waypoint is at time `dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Waypoint>, dt: f64) -> Self {
        assert!(dt > 0.0, "trajectory dt must be positive");
        assert!(!waypoints.is_empty(), "trajectory needs at least 1 waypoint");
        Self { waypoints, dt }
    }

    pub fn horizon(&self) -> f64 {
        self.waypoints.len() as f64 * self.dt
    }

    /// Waypoint position at waypoint index, with index 0 meaning the origin.
    fn point_incl_origin(&self, idx: usize) -> Vec2 {
        if idx == 0 {
            Vec2::ZERO
        } else {
            self.waypoints[idx - 1].position()
        }
    }

    fn heading_incl_origin(&self, idx: usize) -> f64 {
        if idx == 0 {
            0.0
        } else {
            self.waypoints[idx - 1].heading
        }
    }
}

/// An ordered control sequence at 2 or 10 Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence {
    pub controls: Vec<ControlTuple>,
    pub frequency_hz: u32,
}

impl ControlSequence {
    pub fn new(controls: Vec<ControlTuple>, frequency_hz: u32) -> Self {
        assert!(
            frequency_hz == PLAN_HZ || frequency_hz == SIM_HZ,
            "control frequency must be 2 or 10 Hz"
        );
        assert!(!controls.is_empty(), "control sequence must not be empty");
        Self {
            controls,
            frequency_hz,
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.frequency_hz as f64
    }
}

/// Map a control tuple to (acceleration, steering angle). Brake overrides
/// throttle entirely.
pub fn actuation_map(c: &ControlTuple, speed: f64, p: &VehicleParams) -> (f64, f64) {
    let accel = if c.brake {
        -p.brake_decel
    } else {
        p.max_accel * c.throttle - p.drag_coeff * speed
    };
    (accel, p.max_steer_angle * c.steer)
}

/// One explicit-Euler step of the rear-axle kinematic bicycle model.
pub fn bicycle_step(s: &VehicleState, c: &ControlTuple, dt: f64, p: &VehicleParams) -> VehicleState {
    debug_assert!(dt > 0.0);
    let (accel, steer_angle) = actuation_map(c, s.speed, p);
    let heading_rate = s.speed * steer_angle.tan() / p.wheelbase;
    VehicleState {
        x: s.x + s.speed * s.heading.cos() * dt,
        y: s.y + s.speed * s.heading.sin() * dt,
        heading: normalize_angle(s.heading + heading_rate * dt),
        speed: (s.speed + accel * dt).max(0.0),
    }
}

/// Integrate a control sequence at 10 Hz from `init`, returning the rolled
/// out trajectory expressed in `init`'s ego frame. A 2 Hz sequence holds
/// each control for 5 sub-steps.
pub fn rollout(seq: &ControlSequence, init: &VehicleState, p: &VehicleParams) -> Trajectory {
    let sub_steps = (SIM_HZ / seq.frequency_hz) as usize;
    let dt = 1.0 / SIM_HZ as f64;
    let mut state = *init;
    let mut waypoints = Vec::with_capacity(seq.controls.len() * sub_steps);
    for c in &seq.controls {
        for _ in 0..sub_steps {
            state = bicycle_step(&state, c, dt, p);
            let rel = init.to_ego_frame(state.position());
            waypoints.push(Waypoint {
                x: rel.x,
                y: rel.y,
                heading: normalize_angle(state.heading - init.heading),
            });
        }
    }
    Trajectory::new(waypoints, dt)
}

/// Resample a trajectory to a new frequency by linear interpolation of
/// positions and circular interpolation of headings. The implicit origin at
/// t = 0 anchors interpolation before the first waypoint; the original
/// endpoint time is preserved.
pub fn resample(t: &Trajectory, target_hz: u32) -> Result<Trajectory, KinematicsError> {
    assert!(target_hz > 0, "target frequency must be positive");
    let src_hz = (1.0 / t.dt).round() as u32;
    if src_hz == target_hz {
        return Ok(t.clone());
    }
    if t.waypoints.len() < 2 && target_hz > src_hz {
        return Err(KinematicsError::TooFewWaypoints);
    }
    let horizon = t.horizon();
    let out_dt = 1.0 / target_hz as f64;
    let n_out = (horizon * target_hz as f64).round().max(1.0) as usize;
    let mut waypoints = Vec::with_capacity(n_out);
    for k in 1..=n_out {
        let time = (k as f64 * out_dt).min(horizon);
        let pos = time / t.dt;
        let idx = (pos.floor() as usize).min(t.waypoints.len());
        let frac = pos - idx as f64;
        let (p, h) = if idx >= t.waypoints.len() {
            (t.point_incl_origin(t.waypoints.len()), t.heading_incl_origin(t.waypoints.len()))
        } else {
            let p0 = t.point_incl_origin(idx);
            let p1 = t.point_incl_origin(idx + 1);
            let h0 = t.heading_incl_origin(idx);
            let h1 = t.heading_incl_origin(idx + 1);
            (p0 + (p1 - p0) * frac, lerp_angle(h0, h1, frac))
        };
        waypoints.push(Waypoint {
            x: p.x,
            y: p.y,
            heading: h,
        });
    }
    Ok(Trajectory::new(waypoints, out_dt))
}

/// Tracker gains and lookahead bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub k_p: f64,
    pub lookahead_time: f64,
    pub lookahead_min: f64,
    pub lookahead_max: f64,
    /// Target speeds below this request a full stop.
    pub stop_speed: f64,
    /// Brake when the vehicle is this much faster than the target.
    pub overspeed: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            k_p: 0.5,
            lookahead_time: 1.0,
            lookahead_min: 2.0,
            lookahead_max: 6.0,
            stop_speed: 0.5,
            overspeed: 2.0,
        }
    }
}

/// Track a trajectory: pure-pursuit steering toward a speed-scaled lookahead
/// point, proportional throttle toward the local waypoint speed, and a brake
/// rule for stops and overspeed.
pub fn pid_control(
    t: &Trajectory,
    s: &VehicleState,
    gains: &PidGains,
    p: &VehicleParams,
) -> ControlTuple {
    let lookahead = (s.speed * gains.lookahead_time).clamp(gains.lookahead_min, gains.lookahead_max);
    let pos = s.position();

    // Start at the path point nearest the vehicle (origin counts as index 0),
    // then walk forward for the first point at or beyond the lookahead
    // distance.
    let mut nearest_idx = 0;
    let mut nearest_d = f64::INFINITY;
    for i in 0..=t.waypoints.len() {
        let d = pos.distance(t.point_incl_origin(i));
        if d < nearest_d {
            nearest_d = d;
            nearest_idx = i;
        }
    }
    let mut target = t.point_incl_origin(t.waypoints.len());
    let mut target_idx = t.waypoints.len();
    for i in nearest_idx.max(1)..=t.waypoints.len() {
        if pos.distance(t.point_incl_origin(i)) >= lookahead {
            target = t.point_incl_origin(i);
            target_idx = i;
            break;
        }
    }

    // Pure pursuit: curvature toward the target point in the vehicle frame.
    let rel = (target - pos).rotate(-s.heading);
    let alpha = rel.y.atan2(rel.x);
    let dist = rel.norm().max(1e-9);
    let steer_angle = (2.0 * p.wheelbase * alpha.sin()).atan2(dist);
    let steer = (steer_angle / p.max_steer_angle).clamp(-1.0, 1.0);

    // Longitudinal: speed implied by consecutive waypoint spacing at the
    // lookahead index.
    let prev = t.point_incl_origin(target_idx - 1);
    let cur = t.point_incl_origin(target_idx);
    let v_target = prev.distance(cur) / t.dt;

    let brake = v_target < gains.stop_speed || s.speed - v_target > gains.overspeed;
    let throttle = if brake {
        0.0
    } else {
        (gains.k_p * (v_target - s.speed)).clamp(0.0, 1.0)
    };
    ControlTuple::new(brake, throttle, steer)
}
