//! Nearest-neighbor matching of diffusion proposals against the trajectory
//! and control branches, control ensembling, the turn-slowdown post-process,
//! and the full planning step producing the final control.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    ddim_sample, ddpm_sample, decode_proposal, DiffusionConfig, DiffusionError, DiffusionSchedule,
};
use crate::heads::{
    ctrl_forward, decode_controls, select_trajectory, traj_forward, HeadsConfig, MetricWeights,
    TrajectoryVocabulary,
};
use crate::kinematics::{
    pid_control, resample, rollout, ControlSequence, KinematicsError, PidGains, Trajectory,
    VehicleParams, PLAN_HZ,
};
use crate::nn::{NnError, ParamStore};
use crate::world::{ControlTuple, SceneTokens, VehicleState};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("trajectories share no common horizon")]
    NoCommonHorizon,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Where a candidate control came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PidTrajectory,
    ControlDecoder,
    ProposalNearTrajectory { index: usize },
    ProposalNearControl { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub control: ControlTuple,
    pub provenance: Provenance,
}

/// The candidate controls entering the ensemble. Four entries in the full
/// pipeline (duplicates kept with their own provenance), two in the
/// trajectory+control ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Mean Euclidean distance over paired 2 Hz waypoints, after resampling
/// both trajectories and truncating to the common horizon.
pub fn l2_distance(a: &Trajectory, b: &Trajectory) -> Result<f64, RefineError> {
    let a2 = resample(a, PLAN_HZ)?;
    let b2 = resample(b, PLAN_HZ)?;
    let n = a2.waypoints.len().min(b2.waypoints.len());
    if n == 0 {
        return Err(RefineError::NoCommonHorizon);
    }
    let sum: f64 = a2.waypoints[..n]
        .iter()
        .zip(&b2.waypoints[..n])
        .map(|(wa, wb)| wa.position().distance(wb.position()))
        .sum();
    Ok(sum / n as f64)
}

fn argmin_lowest(values: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::INFINITY;
    for (i, v) in values.iter().enumerate() {
        if *v < best_v {
            best_v = *v;
            best = i;
        }
    }
    best
}

/// Result of the proposal-matching step, retaining the geometry needed for
/// diagnostics.
#[derive(Debug, Clone)]
pub struct NearestNeighborMatch {
    pub set: CandidateSet,
    pub proposal_near_traj: usize,
    pub proposal_near_ctrl: usize,
    pub dist_to_traj: Vec<f64>,
    pub dist_to_ctrl: Vec<f64>,
    pub ctrl_rollout: Trajectory,
    pub proposal_rollouts: Vec<Trajectory>,
}

/// Roll out the control branch and every proposal through the bicycle
/// model, then pick the proposal nearest the trajectory branch and the one
/// nearest the control branch. Both first controls join the candidate set
/// even when the same proposal wins twice; ties pick the lowest index.
pub fn nearest_neighbor_match(
    traj: &Trajectory,
    ctrl_seq: &ControlSequence,
    proposals: &[ControlSequence],
    state: &VehicleState,
    vehicle: &VehicleParams,
    gains: &PidGains,
) -> Result<NearestNeighborMatch, RefineError> {
    assert!(!proposals.is_empty(), "need at least one proposal");
    let pid = pid_control(traj, state, gains, vehicle);
    let ctrl_rollout = rollout(ctrl_seq, state, vehicle);
    let proposal_rollouts: Vec<Trajectory> = proposals
        .iter()
        .map(|p| rollout(p, state, vehicle))
        .collect();
    let mut dist_to_traj = Vec::with_capacity(proposals.len());
    let mut dist_to_ctrl = Vec::with_capacity(proposals.len());
    for r in &proposal_rollouts {
        dist_to_traj.push(l2_distance(r, traj)?);
        dist_to_ctrl.push(l2_distance(r, &ctrl_rollout)?);
    }
    let i = argmin_lowest(&dist_to_traj);
    let j = argmin_lowest(&dist_to_ctrl);
    let set = CandidateSet {
        candidates: vec![
            Candidate {
                control: pid,
                provenance: Provenance::PidTrajectory,
            },
            Candidate {
                control: ctrl_seq.controls[0],
                provenance: Provenance::ControlDecoder,
            },
            Candidate {
                control: proposals[i].controls[0],
                provenance: Provenance::ProposalNearTrajectory { index: i },
            },
            Candidate {
                control: proposals[j].controls[0],
                provenance: Provenance::ProposalNearControl { index: j },
            },
        ],
    };
    Ok(NearestNeighborMatch {
        set,
        proposal_near_traj: i,
        proposal_near_ctrl: j,
        dist_to_traj,
        dist_to_ctrl,
        ctrl_rollout,
        proposal_rollouts,
    })
}

/// Average throttle and steer over the candidates; brake iff at least τ
/// candidates brake. A braking ensemble zeroes its throttle.
pub fn ensemble(set: &CandidateSet, tau: usize) -> ControlTuple {
    assert!(
        tau >= 1 && tau <= set.len(),
        "tau must be within 1..=candidates"
    );
    let n = set.len() as f64;
    let throttle = set.candidates.iter().map(|c| c.control.throttle).sum::<f64>() / n;
    let steer = set.candidates.iter().map(|c| c.control.steer).sum::<f64>() / n;
    let brakes: usize = set.candidates.iter().map(|c| c.control.brake_count()).sum();
    let brake = brakes >= tau;
    ControlTuple::new(brake, if brake { 0.0 } else { throttle }, steer)
}

/// Turn-slowdown post-process parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessParams {
    pub steer_threshold: f64,
    pub throttle_cap: f64,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        Self {
            steer_threshold: 0.4,
            throttle_cap: 0.5,
        }
    }
}

/// Cap throttle while steering hard, when enabled.
pub fn postprocess(c: ControlTuple, enabled: bool, params: &PostprocessParams) -> ControlTuple {
    if enabled && c.steer.abs() > params.steer_threshold {
        ControlTuple::new(c.brake, c.throttle.min(params.throttle_cap), c.steer)
    } else {
        c
    }
}

/// Pipeline stages reproducing the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// PID on the selected trajectory alone.
    Traj,
    /// Trajectory and control decoder, two-candidate ensemble with τ = 1.
    TrajCtrl,
    /// All branches plus nearest-neighbor matching.
    Full,
}

impl AblationMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "traj" => Some(Self::Traj),
            "traj+ctrl" => Some(Self::TrajCtrl),
            "full" => Some(Self::Full),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Traj => "traj",
            Self::TrajCtrl => "traj+ctrl",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

/// Everything the planner needs beyond learned parameters.
#[derive(Debug, Clone)]
pub struct PlanConfig {
    pub mode: AblationMode,
    pub heads: HeadsConfig,
    pub diffusion: DiffusionConfig,
    pub sampler: SamplerKind,
    pub ddim_steps: usize,
    pub n_proposals: usize,
    pub tau: usize,
    pub weights: MetricWeights,
    pub postprocess_enabled: bool,
    pub postprocess: PostprocessParams,
    pub gains: PidGains,
    pub vehicle: VehicleParams,
}

impl PlanConfig {
    pub fn new(mode: AblationMode, heads: HeadsConfig, diffusion: DiffusionConfig) -> Self {
        assert_eq!(heads.d_model, diffusion.d_model, "branch widths must agree");
        Self {
            mode,
            heads,
            diffusion,
            sampler: SamplerKind::Ddpm,
            ddim_steps: 20,
            n_proposals: 10,
            tau: 2,
            weights: MetricWeights::default(),
            postprocess_enabled: true,
            postprocess: PostprocessParams::default(),
            gains: PidGains::default(),
            vehicle: VehicleParams::default(),
        }
    }
}

/// A loaded planner: parameters, vocabulary, schedule, and configuration.
#[derive(Debug, Clone)]
pub struct Planner {
    pub params: ParamStore,
    pub vocab: TrajectoryVocabulary,
    pub schedule: DiffusionSchedule,
    pub config: PlanConfig,
}

/// Per-step planning record for logs and rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub mode: String,
    pub anchor_index: usize,
    pub trajectory: Trajectory,
    pub candidates: Vec<Candidate>,
    pub proposal_near_traj: Option<usize>,
    pub proposal_near_ctrl: Option<usize>,
    pub dist_to_traj: Vec<f64>,
    pub dist_to_ctrl: Vec<f64>,
    /// Rolled-out proposal paths in the planning frame, for rendering.
    pub proposal_paths: Vec<Vec<(f64, f64)>>,
    pub control: ControlTuple,
}

/// One planning step: select a trajectory, decode controls, sample and match
/// proposals per the configured ablation mode, ensemble, and post-process.
pub fn plan_step(
    planner: &Planner,
    tokens: &SceneTokens,
    state: &VehicleState,
    seed: u64,
) -> Result<(ControlTuple, PlanDiagnostics), RefineError> {
    let cfg = &planner.config;
    // Planning happens in the ego frame: origin, heading 0, current speed.
    let ego = VehicleState::new(0.0, 0.0, 0.0, state.speed);

    let (traj_out, _) = traj_forward(&planner.params, tokens, &cfg.heads)?;
    let (trajectory, anchor_index) = select_trajectory(&traj_out, &planner.vocab, &cfg.weights);
    let pid = pid_control(&trajectory, &ego, &cfg.gains, &cfg.vehicle);

    let (control, diagnostics) = match cfg.mode {
        AblationMode::Traj => {
            let c = postprocess(pid, cfg.postprocess_enabled, &cfg.postprocess);
            let set = CandidateSet {
                candidates: vec![Candidate {
                    control: pid,
                    provenance: Provenance::PidTrajectory,
                }],
            };
            (
                c,
                PlanDiagnostics {
                    mode: cfg.mode.as_str().to_string(),
                    anchor_index,
                    trajectory: trajectory.clone(),
                    candidates: set.candidates,
                    proposal_near_traj: None,
                    proposal_near_ctrl: None,
                    dist_to_traj: Vec::new(),
                    dist_to_ctrl: Vec::new(),
                    proposal_paths: Vec::new(),
                    control: c,
                },
            )
        }
        AblationMode::TrajCtrl => {
            let (ctrl_out, _) = ctrl_forward(&planner.params, tokens, &cfg.heads)?;
            let ctrl_seq = decode_controls(&ctrl_out);
            let set = CandidateSet {
                candidates: vec![
                    Candidate {
                        control: pid,
                        provenance: Provenance::PidTrajectory,
                    },
                    Candidate {
                        control: ctrl_seq.controls[0],
                        provenance: Provenance::ControlDecoder,
                    },
                ],
            };
            // two proposals: brake threshold 1
            let c = postprocess(ensemble(&set, 1), cfg.postprocess_enabled, &cfg.postprocess);
            (
                c,
                PlanDiagnostics {
                    mode: cfg.mode.as_str().to_string(),
                    anchor_index,
                    trajectory: trajectory.clone(),
                    candidates: set.candidates,
                    proposal_near_traj: None,
                    proposal_near_ctrl: None,
                    dist_to_traj: Vec::new(),
                    dist_to_ctrl: Vec::new(),
                    proposal_paths: Vec::new(),
                    control: c,
                },
            )
        }
        AblationMode::Full => {
            let (ctrl_out, _) = ctrl_forward(&planner.params, tokens, &cfg.heads)?;
            let ctrl_seq = decode_controls(&ctrl_out);
            let raw = match cfg.sampler {
                SamplerKind::Ddpm => ddpm_sample(
                    &planner.params,
                    tokens,
                    cfg.n_proposals,
                    &planner.schedule,
                    &cfg.diffusion,
                    seed,
                )?,
                SamplerKind::Ddim => ddim_sample(
                    &planner.params,
                    tokens,
                    cfg.n_proposals,
                    &planner.schedule,
                    cfg.ddim_steps,
                    &cfg.diffusion,
                    seed,
                )?,
            };
            let proposals: Vec<ControlSequence> = raw.iter().map(decode_proposal).collect();
            let matched = nearest_neighbor_match(
                &trajectory,
                &ctrl_seq,
                &proposals,
                &ego,
                &cfg.vehicle,
                &cfg.gains,
            )?;
            let c = postprocess(
                ensemble(&matched.set, cfg.tau),
                cfg.postprocess_enabled,
                &cfg.postprocess,
            );
            let proposal_paths = matched
                .proposal_rollouts
                .iter()
                .map(|t| t.waypoints.iter().map(|w| (w.x, w.y)).collect())
                .collect();
            (
                c,
                PlanDiagnostics {
                    mode: cfg.mode.as_str().to_string(),
                    anchor_index,
                    trajectory: trajectory.clone(),
                    candidates: matched.set.candidates,
                    proposal_near_traj: Some(matched.proposal_near_traj),
                    proposal_near_ctrl: Some(matched.proposal_near_ctrl),
                    dist_to_traj: matched.dist_to_traj,
                    dist_to_ctrl: matched.dist_to_ctrl,
                    proposal_paths,
                    control: c,
                },
            )
        }
    };
    Ok((control, diagnostics))
}
