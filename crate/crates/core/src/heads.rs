//! The trajectory decoder (vocabulary scoring with metric distillation) and
//! the discrete control decoder, with their losses and analytic gradients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{ControlSequence, Trajectory, Waypoint, PLAN_HZ};
use crate::nn::{
    accumulate, encoder_backward, encoder_forward, linear_backward, linear_forward, mlp_backward,
    mlp_forward, mlp_param_shapes, EncoderConfig, EncoderTape, Gradients, LinearTape, MlpTape,
    NnError, ParamStore,
};
use crate::teachers::MetricScores;
use crate::world::{ControlTuple, SceneTokens};

/// Score clamp applied before logarithms.
pub const SCORE_EPS: f64 = 1e-7;

pub const THROTTLE_BINS: usize = 5;
pub const STEER_BINS: usize = 21;

#[derive(Debug, Error)]
pub enum HeadsError {
    #[error("vocabulary needs {k} distinct demos (anchors pairwise distinct): have {have}")]
    NotEnoughDistinctDemos { have: usize, k: usize },
    #[error("vocabulary must have K >= 2, got {0}")]
    VocabularyTooSmall(usize),
    #[error("demo trajectories must share one waypoint count: {0} vs {1}")]
    MixedHorizons(usize, usize),
    #[error("k-means produced duplicate anchors")]
    DuplicateAnchors,
    #[error("label vector length {got} does not match K = {expected}")]
    LabelMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("vocabulary io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Trajectory vocabulary
// ---------------------------------------------------------------------------

/// K anchor trajectories with generation metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryVocabulary {
    pub k: usize,
    pub seed: u64,
    pub method: String,
    pub anchors: Vec<Trajectory>,
}

impl TrajectoryVocabulary {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HeadsError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HeadsError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Seeded k-means over flat vectors with a fixed iteration budget.
/// Returns centroids and the inertia after each assignment pass.
pub fn kmeans(data: &[Vec<f64>], k: usize, iterations: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    assert!(k >= 1 && data.len() >= k);
    let dim = data[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut centroids: Vec<Vec<f64>> = order[..k].iter().map(|&i| data[i].clone()).collect();

    let sq_dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    let mut inertia_history = Vec::with_capacity(iterations);
    let mut assignment = vec![0usize; data.len()];
    for _ in 0..iterations {
        let mut inertia = 0.0;
        for (i, point) in data.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(point, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
            inertia += best_d;
        }
        inertia_history.push(inertia);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, point) in data.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i]].iter_mut().zip(point) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            }
            // empty clusters keep their previous centroid
        }
    }
    (centroids, inertia_history)
}

/// Cluster demo trajectories into K anchors: k-means with 50 fixed
/// iterations over flattened (x, y) waypoints, seeded init. Anchor headings
/// are rebuilt from consecutive waypoints.
pub fn build_vocabulary(
    demos: &[Trajectory],
    k: usize,
    seed: u64,
) -> Result<TrajectoryVocabulary, HeadsError> {
    if k < 2 {
        return Err(HeadsError::VocabularyTooSmall(k));
    }
    let n_wp = demos.first().map(|d| d.waypoints.len()).unwrap_or(0);
    for d in demos {
        if d.waypoints.len() != n_wp {
            return Err(HeadsError::MixedHorizons(n_wp, d.waypoints.len()));
        }
    }
    let flatten = |t: &Trajectory| -> Vec<f64> {
        t.waypoints.iter().flat_map(|w| [w.x, w.y]).collect()
    };
    let mut distinct: Vec<Vec<f64>> = Vec::new();
    for d in demos {
        let f = flatten(d);
        if !distinct.iter().any(|existing| existing == &f) {
            distinct.push(f);
        }
    }
    if distinct.len() < k {
        return Err(HeadsError::NotEnoughDistinctDemos {
            have: distinct.len(),
            k,
        });
    }
    let (centroids, _) = kmeans(&distinct, k, 50, seed);

    let dt = demos[0].dt;
    let mut anchors = Vec::with_capacity(k);
    for c in &centroids {
        let mut waypoints = Vec::with_capacity(n_wp);
        let mut prev = (0.0, 0.0);
        let mut heading = 0.0;
        for j in 0..n_wp {
            let (x, y) = (c[2 * j], c[2 * j + 1]);
            let (dx, dy) = (x - prev.0, y - prev.1);
            if dx.hypot(dy) > 1e-9 {
                heading = dy.atan2(dx);
            }
            waypoints.push(Waypoint { x, y, heading });
            prev = (x, y);
        }
        anchors.push(Trajectory::new(waypoints, dt));
    }
    for i in 0..anchors.len() {
        for j in i + 1..anchors.len() {
            if anchors[i] == anchors[j] {
                return Err(HeadsError::DuplicateAnchors);
            }
        }
    }
    Ok(TrajectoryVocabulary {
        k,
        seed,
        method: "kmeans50-forgy-xy".to_string(),
        anchors,
    })
}

// ---------------------------------------------------------------------------
// Discrete controls
// ---------------------------------------------------------------------------

/// Discretized control: binary brake, 5 throttle bins, 21 steer bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteControl {
    pub brake_class: u8,
    pub throttle_bin: u8,
    pub steer_bin: u8,
}

impl DiscreteControl {
    pub fn throttle_center(bin: u8) -> f64 {
        bin as f64 * 0.25
    }

    pub fn steer_center(bin: u8) -> f64 {
        -1.0 + bin as f64 * 0.1
    }

    /// Snap a continuous control to the nearest bin centers.
    pub fn from_continuous(c: &ControlTuple) -> Self {
        let throttle_bin = (c.throttle * 4.0).round().clamp(0.0, 4.0) as u8;
        let steer_bin = ((c.steer + 1.0) * 10.0).round().clamp(0.0, 20.0) as u8;
        Self {
            brake_class: u8::from(c.brake),
            throttle_bin,
            steer_bin,
        }
    }

    /// Map bin indices back to a continuous control at the bin centers.
    pub fn to_control(self) -> ControlTuple {
        ControlTuple::new(
            self.brake_class == 1,
            Self::throttle_center(self.throttle_bin),
            Self::steer_center(self.steer_bin),
        )
    }
}

// ---------------------------------------------------------------------------
// Shared math helpers
// ---------------------------------------------------------------------------

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn clamped_ln(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS).ln()
}

fn in_clamp_range(s: f64) -> bool {
    s > SCORE_EPS && s < 1.0 - SCORE_EPS
}

/// Gradient of −Σ y_i ln(clamp(s_i)) with respect to softmax logits.
fn softmax_ce_logit_grad(s: &[f64], y: &[f64]) -> Vec<f64> {
    let u: Vec<f64> = s
        .iter()
        .zip(y)
        .map(|(si, yi)| if in_clamp_range(*si) { -yi / si } else { 0.0 })
        .collect();
    let inner: f64 = u.iter().zip(s).map(|(ui, si)| ui * si).sum();
    s.iter()
        .zip(&u)
        .map(|(si, ui)| si * (ui - inner))
        .collect()
}

// ---------------------------------------------------------------------------
// Trajectory head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadsConfig {
    pub d_model: usize,
    pub vocab_k: usize,
    pub t_ctrl: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            vocab_k: 256,
            t_ctrl: 6,
        }
    }
}

pub const METRIC_NAMES: [&str; 3] = ["col", "slk", "ep"];
const TRAJ_HEAD_NAMES: [&str; 4] = ["im", "col", "slk", "ep"];

impl HeadsConfig {
    pub fn traj_encoder(&self) -> EncoderConfig {
        EncoderConfig::new("traj.enc", 1, self.d_model)
    }

    pub fn ctrl_encoder(&self) -> EncoderConfig {
        EncoderConfig::new("ctrl.enc", self.t_ctrl, self.d_model)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut shapes = self.traj_encoder().param_shapes();
        shapes.push(("traj.anchors".to_string(), vec![self.vocab_k, d]));
        for m in TRAJ_HEAD_NAMES {
            shapes.push((format!("traj.g_{m}_w"), vec![d, d]));
            shapes.push((format!("traj.g_{m}_b"), vec![d]));
            shapes.push((format!("traj.bias_{m}"), vec![self.vocab_k]));
        }
        shapes.extend(self.ctrl_encoder().param_shapes());
        shapes.extend(mlp_param_shapes("ctrl.brake", d, d, 2));
        shapes.extend(mlp_param_shapes("ctrl.throttle", d, d, THROTTLE_BINS));
        shapes.extend(mlp_param_shapes("ctrl.steer", d, d, STEER_BINS));
        shapes
    }

    pub fn init_params(&self, params: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for (name, shape) in self.param_shapes() {
            params.init_param(&name, shape, rng);
        }
    }
}

/// Per-anchor scores: softmax imitation plus sigmoid metric estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajHeadOutput {
    pub s_im: Vec<f64>,
    pub s_col: Vec<f64>,
    pub s_slk: Vec<f64>,
    pub s_ep: Vec<f64>,
}

impl TrajHeadOutput {
    pub fn k(&self) -> usize {
        self.s_im.len()
    }
}

pub struct TrajTape {
    enc_tape: EncoderTape,
    head_tapes: Vec<LinearTape>,
    head_outputs: Vec<Vec<f64>>,
    k: usize,
    d: usize,
}

/// Score every anchor against the scene: anchor embeddings dotted with a
/// per-metric transform of the attention feature, plus per-anchor bias.
pub fn traj_forward(
    params: &ParamStore,
    tokens: &SceneTokens,
    cfg: &HeadsConfig,
) -> Result<(TrajHeadOutput, TrajTape), NnError> {
    let d = cfg.d_model;
    let k = cfg.vocab_k;
    let (feat, enc_tape) = encoder_forward(params, tokens, &cfg.traj_encoder())?;
    let anchors = params.get_checked("traj.anchors", &[k, d])?;

    let mut logits_all = Vec::with_capacity(4);
    let mut head_tapes = Vec::with_capacity(4);
    let mut head_outputs = Vec::with_capacity(4);
    for m in TRAJ_HEAD_NAMES {
        let (g, tape) = linear_forward(
            params,
            &format!("traj.g_{m}_w"),
            &format!("traj.g_{m}_b"),
            &feat,
        )?;
        let bias = params.get_checked(&format!("traj.bias_{m}"), &[k])?;
        let mut logits = Vec::with_capacity(k);
        for i in 0..k {
            let row = &anchors.data[i * d..(i + 1) * d];
            logits.push(row.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() + bias.data[i]);
        }
        logits_all.push(logits);
        head_tapes.push(tape);
        head_outputs.push(g);
    }

    let out = TrajHeadOutput {
        s_im: softmax(&logits_all[0]),
        s_col: logits_all[1].iter().map(|l| sigmoid(*l)).collect(),
        s_slk: logits_all[2].iter().map(|l| sigmoid(*l)).collect(),
        s_ep: logits_all[3].iter().map(|l| sigmoid(*l)).collect(),
    };
    Ok((
        out,
        TrajTape {
            enc_tape,
            head_tapes,
            head_outputs,
            k,
            d,
        },
    ))
}

/// L_traj = L_im + L_kd: imitation cross-entropy plus binary cross-entropy
/// over the three metric heads. Scores are clamped before logs.
pub fn traj_loss(out: &TrajHeadOutput, labels: &MetricScores) -> Result<f64, HeadsError> {
    let k = out.k();
    if labels.y_imitation.len() != k {
        return Err(HeadsError::LabelMismatch {
            expected: k,
            got: labels.y_imitation.len(),
        });
    }
    let l_im: f64 = -out
        .s_im
        .iter()
        .zip(&labels.y_imitation)
        .map(|(s, y)| y * clamped_ln(*s))
        .sum::<f64>();
    let bce = |s: &[f64], hat: &[bool]| -> f64 {
        s.iter()
            .zip(hat)
            .map(|(si, h)| {
                let y = f64::from(*h);
                -(y * clamped_ln(*si) + (1.0 - y) * clamped_ln(1.0 - *si))
            })
            .sum()
    };
    let l_kd = bce(&out.s_col, &labels.col) + bce(&out.s_slk, &labels.slk) + bce(&out.s_ep, &labels.ep);
    Ok(l_im + l_kd)
}

/// Backpropagate traj_loss to every trajectory-head parameter.
pub fn traj_loss_backward(
    params: &ParamStore,
    out: &TrajHeadOutput,
    labels: &MetricScores,
    tape: TrajTape,
    grads: &mut Gradients,
) -> Result<(), HeadsError> {
    let k = tape.k;
    let d = tape.d;
    if labels.y_imitation.len() != k {
        return Err(HeadsError::LabelMismatch {
            expected: k,
            got: labels.y_imitation.len(),
        });
    }
    // d loss / d logits per head.
    let d_im = softmax_ce_logit_grad(&out.s_im, &labels.y_imitation);
    let bce_grad = |s: &[f64], hat: &[bool]| -> Vec<f64> {
        s.iter()
            .zip(hat)
            .map(|(si, h)| {
                if in_clamp_range(*si) {
                    si - f64::from(*h)
                } else {
                    0.0
                }
            })
            .collect()
    };
    let d_logits = [
        d_im,
        bce_grad(&out.s_col, &labels.col),
        bce_grad(&out.s_slk, &labels.slk),
        bce_grad(&out.s_ep, &labels.ep),
    ];

    let anchors = params.get("traj.anchors")?;
    let mut d_feat_total = vec![0.0; d];
    let mut d_anchors = vec![0.0; k * d];
    let mut tape = tape;
    for (h, m) in TRAJ_HEAD_NAMES.iter().enumerate() {
        let dl = &d_logits[h];
        accumulate(grads, &format!("traj.bias_{m}"), k, |g| {
            for i in 0..k {
                g[i] += dl[i];
            }
        });
        let g_vec = &tape.head_outputs[h];
        let mut d_g = vec![0.0; d];
        for i in 0..k {
            let row = &anchors.data[i * d..(i + 1) * d];
            for j in 0..d {
                d_anchors[i * d + j] += dl[i] * g_vec[j];
                d_g[j] += dl[i] * row[j];
            }
        }
        let d_feat = linear_backward(params, &tape.head_tapes[h], &d_g, grads)?;
        for (t, v) in d_feat_total.iter_mut().zip(&d_feat) {
            *t += v;
        }
    }
    accumulate(grads, "traj.anchors", k * d, |g| {
        for (gi, da) in g.iter_mut().zip(&d_anchors) {
            *gi += da;
        }
    });
    encoder_backward(params, &mut tape.enc_tape, &d_feat_total, grads)?;
    Ok(())
}

/// Combination weights for the metric heads at selection time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub col: f64,
    pub slk: f64,
    pub ep: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        Self {
            col: 1.0,
            slk: 1.0,
            ep: 1.0,
        }
    }
}

impl MetricWeights {
    pub fn zero() -> Self {
        Self {
            col: 0.0,
            slk: 0.0,
            ep: 0.0,
        }
    }
}

/// Pick the anchor maximizing log s_im + Σ_m w_m log s_m. Ties resolve to
/// the lowest index. Weights of zero reduce to pure imitation.
pub fn select_trajectory(
    out: &TrajHeadOutput,
    vocab: &TrajectoryVocabulary,
    weights: &MetricWeights,
) -> (Trajectory, usize) {
    assert_eq!(out.k(), vocab.anchors.len());
    let mut best_idx = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..out.k() {
        let score = clamped_ln(out.s_im[i])
            + weights.col * clamped_ln(out.s_col[i])
            + weights.slk * clamped_ln(out.s_slk[i])
            + weights.ep * clamped_ln(out.s_ep[i]);
        if score > best_score {
            best_score = score;
            best_idx = i;
        }
    }
    (vocab.anchors[best_idx].clone(), best_idx)
}

// ---------------------------------------------------------------------------
// Control head
// ---------------------------------------------------------------------------

/// Per-step classification logits for each control signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrlStepLogits {
    pub brake: Vec<f64>,
    pub throttle: Vec<f64>,
    pub steer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrlHeadOutput {
    pub steps: Vec<CtrlStepLogits>,
}

pub struct CtrlTape {
    enc_tape: EncoderTape,
    mlp_tapes: Vec<[MlpTape; 3]>,
    d: usize,
}

/// t_ctrl learned queries attend to the scene; three per-signal MLP heads
/// classify each step.
pub fn ctrl_forward(
    params: &ParamStore,
    tokens: &SceneTokens,
    cfg: &HeadsConfig,
) -> Result<(CtrlHeadOutput, CtrlTape), NnError> {
    let d = cfg.d_model;
    let (feat, enc_tape) = encoder_forward(params, tokens, &cfg.ctrl_encoder())?;
    let mut steps = Vec::with_capacity(cfg.t_ctrl);
    let mut mlp_tapes = Vec::with_capacity(cfg.t_ctrl);
    for q in 0..cfg.t_ctrl {
        let f = &feat[q * d..(q + 1) * d];
        let (brake, tb) = mlp_forward(params, "ctrl.brake", f)?;
        let (throttle, tt) = mlp_forward(params, "ctrl.throttle", f)?;
        let (steer, ts) = mlp_forward(params, "ctrl.steer", f)?;
        steps.push(CtrlStepLogits {
            brake,
            throttle,
            steer,
        });
        mlp_tapes.push([tb, tt, ts]);
    }
    Ok((CtrlHeadOutput { steps }, CtrlTape { enc_tape, mlp_tapes, d }))
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, x) in v.iter().enumerate() {
        if *x > best_v {
            best_v = *x;
            best = i;
        }
    }
    best
}

/// Per-step argmax per head, mapped to bin centers. Ties pick the lowest
/// bin index.
pub fn decode_controls(out: &CtrlHeadOutput) -> ControlSequence {
    let controls: Vec<ControlTuple> = out
        .steps
        .iter()
        .map(|s| {
            DiscreteControl {
                brake_class: argmax_lowest(&s.brake) as u8,
                throttle_bin: argmax_lowest(&s.throttle) as u8,
                steer_bin: argmax_lowest(&s.steer) as u8,
            }
            .to_control()
        })
        .collect();
    ControlSequence::new(controls, PLAN_HZ)
}

/// Binary focal term (1−p)^γ · (−ln p̂) for the probability assigned to the
/// correct class.
fn focal_term(p_correct: f64, gamma: f64) -> f64 {
    (1.0 - p_correct).powf(gamma) * (-clamped_ln(p_correct))
}

/// Focal loss on brake, plain cross-entropy on throttle and steer, summed
/// over the t_ctrl steps. `gamma` must be 0 (plain CE) or >= 1.
pub fn ctrl_loss(out: &CtrlHeadOutput, expert: &[DiscreteControl], gamma: f64) -> f64 {
    assert!(gamma == 0.0 || gamma >= 1.0, "focal gamma must be 0 or >= 1");
    assert_eq!(out.steps.len(), expert.len(), "expert length must equal t_ctrl");
    let mut total = 0.0;
    for (s, e) in out.steps.iter().zip(expert) {
        let p_brake = softmax(&s.brake);
        total += focal_term(p_brake[e.brake_class as usize], gamma);
        let p_th = softmax(&s.throttle);
        total += -clamped_ln(p_th[e.throttle_bin as usize]);
        let p_st = softmax(&s.steer);
        total += -clamped_ln(p_st[e.steer_bin as usize]);
    }
    total
}

/// d focal / d logits through the softmax.
fn focal_logit_grad(p: &[f64], target: usize, gamma: f64) -> Vec<f64> {
    let pt = p[target];
    let one_minus = 1.0 - pt;
    // dL/dp_t, accounting for the log clamp.
    let mut dl_dpt = 0.0;
    if gamma > 0.0 && one_minus > 0.0 {
        dl_dpt += -gamma * one_minus.powf(gamma - 1.0) * (-clamped_ln(pt));
    }
    if in_clamp_range(pt) {
        dl_dpt += -one_minus.powf(gamma) / pt;
    }
    // softmax jacobian with a single nonzero upstream component.
    p.iter()
        .enumerate()
        .map(|(j, pj)| {
            let delta = if j == target { 1.0 } else { 0.0 };
            dl_dpt * pt * (delta - pj)
        })
        .collect()
}

fn ce_logit_grad(p: &[f64], target: usize) -> Vec<f64> {
    if !in_clamp_range(p[target]) {
        return vec![0.0; p.len()];
    }
    p.iter()
        .enumerate()
        .map(|(j, pj)| pj - if j == target { 1.0 } else { 0.0 })
        .collect()
}

/// Backpropagate ctrl_loss to every control-head parameter.
pub fn ctrl_loss_backward(
    params: &ParamStore,
    out: &CtrlHeadOutput,
    expert: &[DiscreteControl],
    gamma: f64,
    tape: CtrlTape,
    grads: &mut Gradients,
) -> Result<(), HeadsError> {
    assert_eq!(out.steps.len(), expert.len());
    let d = tape.d;
    let mut tape = tape;
    let mut d_feat = vec![0.0; out.steps.len() * d];
    for (q, (s, e)) in out.steps.iter().zip(expert).enumerate() {
        let p_brake = softmax(&s.brake);
        let d_brake = focal_logit_grad(&p_brake, e.brake_class as usize, gamma);
        let p_th = softmax(&s.throttle);
        let d_th = ce_logit_grad(&p_th, e.throttle_bin as usize);
        let p_st = softmax(&s.steer);
        let d_st = ce_logit_grad(&p_st, e.steer_bin as usize);

        let df_b = mlp_backward(params, &tape.mlp_tapes[q][0], &d_brake, grads)?;
        let df_t = mlp_backward(params, &tape.mlp_tapes[q][1], &d_th, grads)?;
        let df_s = mlp_backward(params, &tape.mlp_tapes[q][2], &d_st, grads)?;
        for i in 0..d {
            d_feat[q * d + i] += df_b[i] + df_t[i] + df_s[i];
        }
    }
    encoder_backward(params, &mut tape.enc_tape, &d_feat, grads)?;
    Ok(())
}
