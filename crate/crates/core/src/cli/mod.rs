//! Run configuration, command implementations, and report emission.
//!
//! Every output file embeds the effective config hash and seed; identical
//! configuration and seed reproduce outputs byte for byte.

pub mod render;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffusion::{
    dp_loss, dp_loss_backward, encode_controls, make_schedule, DiffusionConfig, DiffusionSchedule,
};
use crate::geom::{Polyline, Vec2};
use crate::heads::{
    build_vocabulary, ctrl_forward, ctrl_loss, ctrl_loss_backward, decode_controls,
    select_trajectory, traj_forward, traj_loss, traj_loss_backward, HeadsConfig, MetricWeights,
    TrajectoryVocabulary,
};
use crate::kinematics::{ControlSequence, Trajectory, SIM_HZ};
use crate::nn::{
    load_checkpoint, optimizer_step, save_checkpoint, AdamWHyper, CheckpointMeta, Gradients,
    ParamStore,
};
use crate::refine::{AblationMode, PlanConfig, Planner, SamplerKind};
use crate::simloop::{
    bundled_suite, collect_demos, eval_suite, load_demos, run_episode, save_episode_log,
    suite_report, training_suite, DemoRecord, EpisodeConfig, EpisodeLog, ExpertParams, Policy,
    SuiteReport, TimedPath,
};
use crate::teachers::{label_vocabulary, MetricScores, SceneGeometry, TeacherParams};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Heads(#[from] crate::heads::HeadsError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Sim(#[from] crate::simloop::SimError),
    #[error(transparent)]
    Teachers(#[from] crate::teachers::TeacherError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error(transparent)]
    Refine(#[from] crate::refine::RefineError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub vocab_k: usize,
    pub t_ctrl: usize,
    pub t_dp: usize,
    pub dp_hidden: usize,
    pub t_embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sampler: String,
    pub ddim_steps: usize,
    pub n_proposals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerSection {
    pub mode: String,
    pub tau: usize,
    pub weight_col: f64,
    pub weight_slk: f64,
    pub weight_ep: f64,
    pub postprocess: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub focal_gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub demos_train: String,
    pub demos_val: String,
    pub vocab: String,
    pub checkpoint: String,
}

/// The full run configuration. Files must spell out every key; defaults
/// exist only through `default-config` emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub planner: PlannerSection,
    pub training: TrainingSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn default_config() -> Self {
        Self {
            run: RunSection {
                seed: 0,
                out_dir: "out".to_string(),
            },
            model: ModelSection {
                d_model: 64,
                vocab_k: 256,
                t_ctrl: 6,
                t_dp: 20,
                dp_hidden: 128,
                t_embed_dim: 32,
            },
            diffusion: DiffusionSection {
                steps: 100,
                beta_min: 1e-4,
                beta_max: 0.02,
                sampler: "ddpm".to_string(),
                ddim_steps: 20,
                n_proposals: 10,
            },
            planner: PlannerSection {
                mode: "full".to_string(),
                tau: 2,
                weight_col: 1.0,
                weight_slk: 1.0,
                weight_ep: 1.0,
                postprocess: true,
            },
            training: TrainingSection {
                epochs: 30,
                batch_size: 64,
                learning_rate: 2e-4,
                weight_decay: 0.01,
                focal_gamma: 2.0,
            },
            paths: PathsSection {
                demos_train: "out/demos_train.jsonl".to_string(),
                demos_val: "out/demos_val.jsonl".to_string(),
                vocab: "out/vocab.json".to_string(),
                checkpoint: "out/checkpoint.hynx".to_string(),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |msg: &str| Err(CliError::Invalid(msg.to_string()));
        if self.model.vocab_k < 2 || self.model.vocab_k > 4096 {
            return fail("model.vocab_k must be in 2..=4096");
        }
        if self.model.t_ctrl < 1 || self.model.t_dp < 1 {
            return fail("model.t_ctrl and model.t_dp must be >= 1");
        }
        if self.model.d_model < 2 || self.model.t_embed_dim % 2 != 0 {
            return fail("model.d_model must be >= 2 and t_embed_dim even");
        }
        if self.diffusion.steps < 1 {
            return fail("diffusion.steps must be >= 1");
        }
        if !(self.diffusion.beta_min > 0.0
            && self.diffusion.beta_min <= self.diffusion.beta_max
            && self.diffusion.beta_max < 1.0)
        {
            return fail("diffusion betas must satisfy 0 < beta_min <= beta_max < 1");
        }
        if self.sampler().is_none() {
            return fail("diffusion.sampler must be one of {ddpm, ddim}");
        }
        if self.diffusion.ddim_steps < 1 || self.diffusion.ddim_steps > self.diffusion.steps {
            return fail("diffusion.ddim_steps must be in 1..=diffusion.steps");
        }
        if self.diffusion.n_proposals < 1 {
            return fail("diffusion.n_proposals must be >= 1");
        }
        if self.mode().is_none() && self.planner.mode != "expert" {
            return fail("planner.mode must be one of {traj, traj+ctrl, full, expert}");
        }
        if self.planner.tau < 1 || self.planner.tau > 4 {
            return fail("planner.tau must be in 1..=4");
        }
        if self.planner.weight_col < 0.0
            || self.planner.weight_slk < 0.0
            || self.planner.weight_ep < 0.0
        {
            return fail("planner metric weights must be >= 0");
        }
        if self.training.batch_size < 1 {
            return fail("training.batch_size must be >= 1");
        }
        if self.training.learning_rate <= 0.0 {
            return fail("training.learning_rate must be > 0");
        }
        if self.training.focal_gamma != 0.0 && self.training.focal_gamma < 1.0 {
            return fail("training.focal_gamma must be 0 or >= 1");
        }
        Ok(())
    }

    /// Stable hash of the effective configuration (first 16 hex chars of a
    /// SHA-256 over the canonical JSON form).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn mode(&self) -> Option<AblationMode> {
        AblationMode::parse(&self.planner.mode)
    }

    pub fn sampler(&self) -> Option<SamplerKind> {
        match self.diffusion.sampler.as_str() {
            "ddpm" => Some(SamplerKind::Ddpm),
            "ddim" => Some(SamplerKind::Ddim),
            _ => None,
        }
    }

    pub fn heads_config(&self) -> HeadsConfig {
        HeadsConfig {
            d_model: self.model.d_model,
            vocab_k: self.model.vocab_k,
            t_ctrl: self.model.t_ctrl,
        }
    }

    pub fn diffusion_config(&self) -> DiffusionConfig {
        DiffusionConfig {
            t_dp: self.model.t_dp,
            d_model: self.model.d_model,
            hidden: self.model.dp_hidden,
            t_embed_dim: self.model.t_embed_dim,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, CliError> {
        Ok(make_schedule(
            self.diffusion.steps,
            self.diffusion.beta_min,
            self.diffusion.beta_max,
        )?)
    }

    pub fn weights(&self) -> MetricWeights {
        MetricWeights {
            col: self.planner.weight_col,
            slk: self.planner.weight_slk,
            ep: self.planner.weight_ep,
        }
    }

    pub fn plan_config(&self, mode: AblationMode) -> PlanConfig {
        let mut pc = PlanConfig::new(mode, self.heads_config(), self.diffusion_config());
        pc.sampler = self.sampler().unwrap_or(SamplerKind::Ddpm);
        pc.ddim_steps = self.diffusion.ddim_steps;
        pc.n_proposals = self.diffusion.n_proposals;
        pc.tau = self.planner.tau;
        pc.weights = self.weights();
        pc.postprocess_enabled = self.planner.postprocess;
        pc
    }

    /// Seed all model parameters for this configuration.
    pub fn init_params(&self) -> ParamStore {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.run.seed);
        self.heads_config().init_params(&mut params, &mut rng);
        self.diffusion_config().init_params(&mut params, &mut rng);
        params
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        Path::new(&self.run.out_dir).join(name)
    }
}

// ---------------------------------------------------------------------------
// collect
// ---------------------------------------------------------------------------

/// Seeds for the held-out demo split, disjoint from training and evaluation.
const VAL_SEEDS: [u64; 3] = [200, 201, 202];

pub struct CollectSummary {
    pub train_frames: usize,
    pub val_frames: usize,
}

/// Collect expert demonstrations: the training suite into `demos_train`, a
/// seed-disjoint held-out suite into `demos_val`.
pub fn cmd_collect(cfg: &RunConfig) -> Result<CollectSummary, CliError> {
    std::fs::create_dir_all(&cfg.run.out_dir)?;
    let hash = cfg.hash();
    let ep_cfg = EpisodeConfig::new(&hash, cfg.run.seed);
    let expert = ExpertParams::default();
    let train = collect_demos(
        &training_suite(),
        &cfg.paths.demos_train,
        &ep_cfg,
        &expert,
        cfg.model.t_ctrl,
        cfg.model.t_dp,
    )?;
    let val = collect_demos(
        &bundled_suite(&VAL_SEEDS),
        &cfg.paths.demos_val,
        &ep_cfg,
        &expert,
        cfg.model.t_ctrl,
        cfg.model.t_dp,
    )?;
    Ok(CollectSummary {
        train_frames: train.frames,
        val_frames: val.frames,
    })
}

// ---------------------------------------------------------------------------
// gen-vocab
// ---------------------------------------------------------------------------

pub fn cmd_gen_vocab(cfg: &RunConfig) -> Result<TrajectoryVocabulary, CliError> {
    if !Path::new(&cfg.paths.demos_train).exists() {
        return Err(CliError::MissingInput(format!(
            "demo dataset {} (run `collect` first)",
            cfg.paths.demos_train
        )));
    }
    let (_, records) = load_demos(&cfg.paths.demos_train)?;
    let demos: Vec<Trajectory> = records.iter().map(|r| r.expert_traj.clone()).collect();
    let vocab = build_vocabulary(&demos, cfg.model.vocab_k, cfg.run.seed)?;
    vocab.save(&cfg.paths.vocab)?;
    Ok(vocab)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_traj: f64,
    pub l_ctrl: f64,
    pub l_dp: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct TrainSummary {
    pub curve: Vec<EpochStats>,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

fn frame_route(record: &DemoRecord) -> Polyline {
    Polyline::new(
        record
            .scene
            .route
            .iter()
            .map(|&(x, y)| Vec2::new(x, y))
            .collect(),
    )
}

/// Precompute per-frame teacher labels for a fixed vocabulary.
pub fn compute_labels(
    records: &[DemoRecord],
    vocab: &TrajectoryVocabulary,
) -> Result<Vec<MetricScores>, CliError> {
    let vehicle = crate::kinematics::VehicleParams::default();
    let teacher = TeacherParams::default();
    records
        .iter()
        .map(|r| {
            let route = frame_route(r);
            let scene = SceneGeometry {
                agents: &r.scene.agents,
                lanes: &r.scene.lanes,
                route: &route,
            };
            Ok(label_vocabulary(
                &vocab.anchors,
                &r.expert_traj,
                &scene,
                &vehicle,
                &teacher,
            )?)
        })
        .collect()
}

/// Joint training of the three heads with the summed loss. Single-threaded
/// and deterministic given the seed.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    for (path, hint) in [
        (&cfg.paths.demos_train, "collect"),
        (&cfg.paths.vocab, "gen-vocab"),
    ] {
        if !Path::new(path).exists() {
            return Err(CliError::MissingInput(format!(
                "{path} (run `{hint}` first)"
            )));
        }
    }
    std::fs::create_dir_all(&cfg.run.out_dir)?;
    let (_, records) = load_demos(&cfg.paths.demos_train)?;
    if records.is_empty() {
        return Err(CliError::MissingInput("demo dataset is empty".to_string()));
    }
    let vocab = TrajectoryVocabulary::load(&cfg.paths.vocab)?;
    if vocab.anchors.len() != cfg.model.vocab_k {
        return Err(CliError::Invalid(format!(
            "vocabulary K {} does not match config K {}",
            vocab.anchors.len(),
            cfg.model.vocab_k
        )));
    }
    let labels = compute_labels(&records, &vocab)?;
    let schedule = cfg.schedule()?;
    let heads_cfg = cfg.heads_config();
    let dp_cfg = cfg.diffusion_config();
    let hash = cfg.hash();
    let meta = CheckpointMeta {
        seed: cfg.run.seed,
        config_hash: hash.clone(),
    };

    let mut params = cfg.init_params();
    let n = records.len();
    let batches_per_epoch = n.div_ceil(cfg.training.batch_size);
    let hyper = AdamWHyper::new(
        cfg.training.learning_rate,
        cfg.training.weight_decay,
        (cfg.training.epochs * batches_per_epoch) as u64,
    );

    let checkpoint = PathBuf::from(&cfg.paths.checkpoint);
    let best_checkpoint = checkpoint.with_extension("best.hynx");
    save_checkpoint(&checkpoint, &params, &meta)?;
    save_checkpoint(&best_checkpoint, &params, &meta)?;

    let mut curve = Vec::with_capacity(cfg.training.epochs);
    let mut best_total = f64::INFINITY;
    let mut dp_rng = ChaCha8Rng::seed_from_u64(cfg.run.seed.wrapping_add(0xD1FF));
    for epoch in 0..cfg.training.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.run.seed.wrapping_add(1 + epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut sums = (0.0, 0.0, 0.0);
        for (batch_idx, batch) in order.chunks(cfg.training.batch_size).enumerate() {
            let mut grads = Gradients::new();
            let mut batch_traj = 0.0;
            let mut batch_ctrl = 0.0;
            let mut batch_dp = 0.0;
            for &i in batch {
                let r = &records[i];
                let (t_out, t_tape) = traj_forward(&params, &r.tokens, &heads_cfg)?;
                batch_traj += traj_loss(&t_out, &labels[i])?;
                traj_loss_backward(&params, &t_out, &labels[i], t_tape, &mut grads)?;

                let (c_out, c_tape) = ctrl_forward(&params, &r.tokens, &heads_cfg)?;
                batch_ctrl += ctrl_loss(&c_out, &r.expert_ctrl_2hz, cfg.training.focal_gamma);
                ctrl_loss_backward(
                    &params,
                    &c_out,
                    &r.expert_ctrl_2hz,
                    cfg.training.focal_gamma,
                    c_tape,
                    &mut grads,
                )?;

                let x0 = encode_controls(&ControlSequence::new(
                    r.expert_ctrl_10hz.clone(),
                    SIM_HZ,
                ));
                let (l_dp, dp_tape) =
                    dp_loss(&params, &x0, &r.tokens, &schedule, &mut dp_rng, &dp_cfg)?;
                batch_dp += l_dp;
                dp_loss_backward(&params, dp_tape, &mut grads)?;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            let batch_total = (batch_traj + batch_ctrl + batch_dp) * scale;
            if !batch_total.is_finite() {
                return Err(CliError::NanLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            optimizer_step(&mut params, &grads, &hyper)?;
            sums.0 += batch_traj;
            sums.1 += batch_ctrl;
            sums.2 += batch_dp;
        }
        let stats = EpochStats {
            epoch,
            l_traj: sums.0 / n as f64,
            l_ctrl: sums.1 / n as f64,
            l_dp: sums.2 / n as f64,
            total: (sums.0 + sums.1 + sums.2) / n as f64,
            lr: hyper.lr_at(params.step),
        };
        if stats.total < best_total {
            best_total = stats.total;
            save_checkpoint(&best_checkpoint, &params, &meta)?;
        }
        curve.push(stats);
    }
    save_checkpoint(&checkpoint, &params, &meta)?;

    // loss curve: one row per epoch
    let curve_path = cfg.out_path("loss_curve.csv");
    let mut f = std::fs::File::create(&curve_path)?;
    writeln!(f, "epoch,l_traj,l_ctrl,l_dp,total,lr,config_hash,seed")?;
    for s in &curve {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            s.epoch, s.l_traj, s.l_ctrl, s.l_dp, s.total, s.lr, hash, cfg.run.seed
        )?;
    }
    Ok(TrainSummary {
        curve,
        checkpoint,
        best_checkpoint,
    })
}

// ---------------------------------------------------------------------------
// eval-open
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpenLoopRow {
    pub family: String,
    pub frames: usize,
    pub mean_l2: f64,
    pub col_agreement: f64,
    pub slk_agreement: f64,
    pub ep_agreement: f64,
    pub brake_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpenLoopReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<OpenLoopRow>,
    pub overall: OpenLoopRow,
}

/// Open-loop evaluation on held-out frames: trajectory selection L2 against
/// the expert future, teacher-score agreement, and per-step brake accuracy.
pub fn cmd_eval_open(cfg: &RunConfig, checkpoint: &Path) -> Result<OpenLoopReport, CliError> {
    if !Path::new(&cfg.paths.demos_val).exists() {
        return Err(CliError::MissingInput(format!(
            "held-out demos {} (run `collect` first)",
            cfg.paths.demos_val
        )));
    }
    let (params, _meta) = load_checkpoint(checkpoint)?;
    let vocab = TrajectoryVocabulary::load(&cfg.paths.vocab)?;
    let (_, records) = load_demos(&cfg.paths.demos_val)?;
    if records.is_empty() {
        return Err(CliError::MissingInput("held-out demo set is empty".to_string()));
    }
    let labels = compute_labels(&records, &vocab)?;
    let heads_cfg = cfg.heads_config();
    let weights = cfg.weights();

    struct Acc {
        frames: usize,
        l2: f64,
        agree: [f64; 3],
        anchor_count: usize,
        brake_hits: usize,
        brake_total: usize,
    }
    impl Acc {
        fn new() -> Self {
            Self {
                frames: 0,
                l2: 0.0,
                agree: [0.0; 3],
                anchor_count: 0,
                brake_hits: 0,
                brake_total: 0,
            }
        }
    }
    let mut by_family: BTreeMap<String, Acc> = BTreeMap::new();

    for (r, label) in records.iter().zip(&labels) {
        let family = crate::simloop::scenario_family(&r.scenario_id);
        let acc = by_family.entry(family).or_insert_with(Acc::new);
        let (out, _) = traj_forward(&params, &r.tokens, &heads_cfg)?;
        let (selected, _) = select_trajectory(&out, &vocab, &weights);
        acc.l2 += crate::refine::l2_distance(&selected, &r.expert_traj)?;
        for i in 0..out.k() {
            acc.agree[0] += f64::from((out.s_col[i] >= 0.5) == label.col[i]);
            acc.agree[1] += f64::from((out.s_slk[i] >= 0.5) == label.slk[i]);
            acc.agree[2] += f64::from((out.s_ep[i] >= 0.5) == label.ep[i]);
        }
        acc.anchor_count += out.k();

        let (ctrl_out, _) = ctrl_forward(&params, &r.tokens, &heads_cfg)?;
        let decoded = decode_controls(&ctrl_out);
        for (pred, expert) in decoded.controls.iter().zip(&r.expert_ctrl_2hz) {
            acc.brake_hits += usize::from(u8::from(pred.brake) == expert.brake_class);
            acc.brake_total += 1;
        }
        acc.frames += 1;
    }

    let to_row = |family: &str, acc: &Acc| OpenLoopRow {
        family: family.to_string(),
        frames: acc.frames,
        mean_l2: acc.l2 / acc.frames.max(1) as f64,
        col_agreement: acc.agree[0] / acc.anchor_count.max(1) as f64,
        slk_agreement: acc.agree[1] / acc.anchor_count.max(1) as f64,
        ep_agreement: acc.agree[2] / acc.anchor_count.max(1) as f64,
        brake_accuracy: acc.brake_hits as f64 / acc.brake_total.max(1) as f64,
    };
    let rows: Vec<OpenLoopRow> = by_family.iter().map(|(f, a)| to_row(f, a)).collect();
    let mut overall = Acc::new();
    for acc in by_family.values() {
        overall.frames += acc.frames;
        overall.l2 += acc.l2;
        for i in 0..3 {
            overall.agree[i] += acc.agree[i];
        }
        overall.anchor_count += acc.anchor_count;
        overall.brake_hits += acc.brake_hits;
        overall.brake_total += acc.brake_total;
    }
    let report = OpenLoopReport {
        config_hash: cfg.hash(),
        seed: cfg.run.seed,
        overall: to_row("overall", &overall),
        rows,
    };

    std::fs::create_dir_all(&cfg.run.out_dir)?;
    let csv_path = cfg.out_path("eval_open.csv");
    let mut f = std::fs::File::create(&csv_path)?;
    writeln!(
        f,
        "family,frames,mean_l2,col_agreement,slk_agreement,ep_agreement,brake_accuracy,config_hash,seed"
    )?;
    for row in report.rows.iter().chain(std::iter::once(&report.overall)) {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            row.family,
            row.frames,
            row.mean_l2,
            row.col_agreement,
            row.slk_agreement,
            row.ep_agreement,
            row.brake_accuracy,
            report.config_hash,
            report.seed
        )?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// run-closed
// ---------------------------------------------------------------------------

pub struct ClosedLoopSummary {
    pub report: SuiteReport,
    pub logs: Vec<EpisodeLog>,
}

fn run_episodes_parallel(
    jobs: Vec<(String, crate::world::Scenario, Option<TimedPath>)>,
    planner: Option<&Planner>,
    expert: &ExpertParams,
    hash: &str,
    seed: u64,
    workers: usize,
) -> Vec<EpisodeLog> {
    let workers = workers.max(1).min(jobs.len().max(1));
    let mut results: Vec<Option<EpisodeLog>> = vec![None; jobs.len()];
    let chunk = jobs.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, jobs_chunk) in jobs.chunks(chunk).enumerate() {
            let handle = scope.spawn(move || {
                let mut out = Vec::with_capacity(jobs_chunk.len());
                for (offset, (id, scenario, reference)) in jobs_chunk.iter().enumerate() {
                    let mut ep_cfg = EpisodeConfig::new(hash, seed);
                    ep_cfg.reference = reference.clone();
                    let policy = match planner {
                        Some(p) => Policy::Planner(p),
                        None => Policy::Expert(expert),
                    };
                    out.push((w * chunk + offset, run_episode(id, scenario, &policy, &ep_cfg)));
                }
                out
            });
            handles.push(handle);
        }
        for handle in handles {
            for (idx, log) in handle.join().expect("episode worker panicked") {
                results[idx] = Some(log);
            }
        }
    });
    results.into_iter().map(|l| l.expect("episode missing")).collect()
}

/// Run the bundled evaluation suite closed-loop under the configured mode.
/// The expert runs first on every scenario to provide reference paths (and
/// is itself the evaluated policy in `expert` mode).
pub fn cmd_run_closed(
    cfg: &RunConfig,
    checkpoint: &Path,
    workers: usize,
) -> Result<ClosedLoopSummary, CliError> {
    std::fs::create_dir_all(&cfg.run.out_dir)?;
    let hash = cfg.hash();
    let expert = ExpertParams::default();
    let suite = eval_suite();

    // expert pass: references for the open-loop L2 metric
    let expert_jobs: Vec<(String, crate::world::Scenario, Option<TimedPath>)> = suite
        .iter()
        .map(|(id, s)| (id.clone(), s.clone(), None))
        .collect();
    let expert_logs =
        run_episodes_parallel(expert_jobs, None, &expert, &hash, cfg.run.seed, workers);
    let references: Vec<TimedPath> = expert_logs.iter().map(TimedPath::from_log).collect();

    let mode_name = cfg.planner.mode.clone();
    let logs = if mode_name == "expert" {
        // re-score expert logs against their own paths
        expert_logs
            .iter()
            .zip(&references)
            .zip(&suite)
            .map(|((log, reference), (_, scenario))| {
                let mut log = log.clone();
                log.outcome = crate::simloop::episode_metrics(&log, scenario, Some(reference));
                log
            })
            .collect()
    } else {
        let mode = cfg
            .mode()
            .ok_or_else(|| CliError::Invalid(format!("unknown mode {mode_name}")))?;
        let (params, _) = load_checkpoint(checkpoint)?;
        let vocab = TrajectoryVocabulary::load(&cfg.paths.vocab)?;
        let planner = Planner {
            params,
            vocab,
            schedule: cfg.schedule()?,
            config: cfg.plan_config(mode),
        };
        let jobs: Vec<(String, crate::world::Scenario, Option<TimedPath>)> = suite
            .iter()
            .zip(references)
            .map(|((id, s), reference)| (id.clone(), s.clone(), Some(reference)))
            .collect();
        run_episodes_parallel(jobs, Some(&planner), &expert, &hash, cfg.run.seed, workers)
    };

    for log in &logs {
        let path = cfg.out_path(&format!("episode_{}_{}.jsonl", log.mode, log.scenario_id));
        save_episode_log(path, log)?;
    }
    let report = suite_report(&logs, &hash, cfg.run.seed, &mode_name);
    std::fs::write(cfg.out_path("suite_report.csv"), report.to_csv())?;
    std::fs::write(
        cfg.out_path("suite_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(ClosedLoopSummary { report, logs })
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Rebuild the aggregate table from saved episode logs.
pub fn cmd_report(cfg: &RunConfig, logs_dir: &Path) -> Result<SuiteReport, CliError> {
    let mut logs = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(logs_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "jsonl")
                && p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("episode_"))
        })
        .collect();
    entries.sort();
    for path in entries {
        logs.push(crate::simloop::load_episode_log(&path)?);
    }
    if logs.is_empty() {
        return Err(CliError::MissingInput(format!(
            "no episode_*.jsonl logs in {}",
            logs_dir.display()
        )));
    }
    let mode = logs[0].mode.clone();
    let report = suite_report(&logs, &cfg.hash(), cfg.run.seed, &mode);
    std::fs::create_dir_all(&cfg.run.out_dir)?;
    std::fs::write(cfg.out_path("suite_report.csv"), report.to_csv())?;
    std::fs::write(
        cfg.out_path("suite_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_and_validates() {
        let cfg = RunConfig::default_config();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(cfg.hash(), parsed.hash());
    }

    #[test]
    fn missing_keys_rejected() {
        let text = RunConfig::default_config().to_toml();
        let without_seed = text.replacen("seed = 0", "", 1);
        assert!(toml::from_str::<RunConfig>(&without_seed).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = RunConfig::default_config().to_toml();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut cfg = RunConfig::default_config();
        cfg.planner.tau = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default_config();
        cfg.planner.mode = "bogus".to_string();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default_config();
        cfg.diffusion.sampler = "euler".to_string();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default_config();
        cfg.model.vocab_k = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default_config();
        cfg.model.vocab_k = 5000;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_config() {
        let a = RunConfig::default_config();
        let mut b = a.clone();
        b.run.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.planner.tau = 3;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn mode_strings_accepted() {
        for (s, ok) in [
            ("traj", true),
            ("traj+ctrl", true),
            ("full", true),
            ("expert", true),
            ("hybrid", false),
        ] {
            let mut cfg = RunConfig::default_config();
            cfg.planner.mode = s.to_string();
            assert_eq!(cfg.validate().is_ok(), ok, "mode {s}");
        }
    }
}
