//! Diffusion policy over normalized control sequences: DDPM training and
//! DDPM/DDIM sampling of N smooth 10 Hz proposals conditioned on the scene
//! feature.
//!
//! Proposals use independent counter-based RNG streams, so growing N keeps
//! the earlier proposals bitwise identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{ControlSequence, SIM_HZ};
use crate::nn::{
    encoder_backward, encoder_forward, mlp_backward, mlp_forward, mlp_param_shapes,
    sinusoidal_embedding, EncoderConfig, EncoderTape, Gradients, MlpTape, NnError, ParamStore,
};
use crate::world::{ControlTuple, SceneTokens};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid beta range: need 0 < beta_min <= beta_max < 1")]
    InvalidBetaRange,
    #[error("schedule needs at least 1 step")]
    NoSteps,
    #[error("ddim steps must satisfy 1 <= steps <= T_d, got {0}")]
    InvalidDdimSteps(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Linear-beta noise schedule with precomputed cumulative products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// β_t for 1-based t.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t for t in 0..=T_d, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// Build a linear beta schedule over T_d steps.
pub fn make_schedule(t_d: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule, DiffusionError> {
    if t_d < 1 {
        return Err(DiffusionError::NoSteps);
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(DiffusionError::InvalidBetaRange);
    }
    let betas: Vec<f64> = (0..t_d)
        .map(|i| {
            if t_d == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (t_d - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_d);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// A control sequence normalized to [−1, 1] per channel:
/// brake ±1, throttle 2·th−1, steer as-is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedControlSeq {
    pub t_dp: usize,
    /// Row-major [step][channel: brake, throttle, steer].
    pub values: Vec<f64>,
}

impl NormalizedControlSeq {
    pub fn dim(&self) -> usize {
        self.t_dp * 3
    }
}

/// Normalize a 10 Hz control sequence into diffusion space.
pub fn encode_controls(seq: &ControlSequence) -> NormalizedControlSeq {
    assert_eq!(seq.frequency_hz, SIM_HZ, "diffusion operates on 10 Hz sequences");
    let values = seq
        .controls
        .iter()
        .flat_map(|c| {
            [
                if c.brake { 1.0 } else { -1.0 },
                2.0 * c.throttle - 1.0,
                c.steer,
            ]
        })
        .collect();
    NormalizedControlSeq {
        t_dp: seq.controls.len(),
        values,
    }
}

/// Map a normalized sequence back to controls. The brake boundary at 0 maps
/// to braking.
pub fn decode_proposal(x: &NormalizedControlSeq) -> ControlSequence {
    let controls = (0..x.t_dp)
        .map(|t| {
            let b = x.values[3 * t] >= 0.0;
            let th = ((x.values[3 * t + 1] + 1.0) / 2.0).clamp(0.0, 1.0);
            let st = x.values[3 * t + 2].clamp(-1.0, 1.0);
            ControlTuple::new(b, th, st)
        })
        .collect();
    ControlSequence::new(controls, SIM_HZ)
}

/// Forward-process sample x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
pub fn q_sample(x0: &[f64], t: usize, noise: &[f64], sched: &DiffusionSchedule) -> Vec<f64> {
    assert!(t >= 1 && t <= sched.steps());
    assert_eq!(x0.len(), noise.len());
    let ab = sched.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(noise).map(|(x, n)| sa * x + sn * n).collect()
}

/// Model dimensions for the noise predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionConfig {
    pub t_dp: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub t_embed_dim: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_dp: 20,
            d_model: 64,
            hidden: 128,
            t_embed_dim: 32,
        }
    }
}

impl DiffusionConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig::new("dp.enc", 1, self.d_model)
    }

    pub fn predictor_in_dim(&self) -> usize {
        self.t_dp * 3 + self.t_embed_dim + self.d_model
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = self.encoder().param_shapes();
        shapes.extend(mlp_param_shapes(
            "dp.pred",
            self.predictor_in_dim(),
            self.hidden,
            self.t_dp * 3,
        ));
        shapes
    }

    pub fn init_params(&self, params: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for (name, shape) in self.param_shapes() {
            params.init_param(&name, shape, rng);
        }
    }
}

/// Predict the injected noise from (x_t, timestep embedding, scene feature).
pub fn noise_pred(
    params: &ParamStore,
    x_t: &[f64],
    t: usize,
    scene_feat: &[f64],
    cfg: &DiffusionConfig,
) -> Result<(Vec<f64>, MlpTape), NnError> {
    let mut input = Vec::with_capacity(cfg.predictor_in_dim());
    input.extend_from_slice(x_t);
    input.extend_from_slice(&sinusoidal_embedding(t as f64, cfg.t_embed_dim));
    input.extend_from_slice(scene_feat);
    mlp_forward(params, "dp.pred", &input)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub struct DpTape {
    enc_tape: EncoderTape,
    pred_tape: MlpTape,
    eps: Vec<f64>,
    eps_hat: Vec<f64>,
    x_dim: usize,
    t_embed_dim: usize,
}

/// One denoising training term: sample t and ε, diffuse the expert sequence,
/// and score the noise prediction with MSE.
pub fn dp_loss(
    params: &ParamStore,
    x0: &NormalizedControlSeq,
    tokens: &SceneTokens,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
    cfg: &DiffusionConfig,
) -> Result<(f64, DpTape), NnError> {
    let t = rng.gen_range(1..=sched.steps());
    let eps: Vec<f64> = (0..x0.dim()).map(|_| rng.sample(StandardNormal)).collect();
    let x_t = q_sample(&x0.values, t, &eps, sched);
    let (feat, enc_tape) = encoder_forward(params, tokens, &cfg.encoder())?;
    let (eps_hat, pred_tape) = noise_pred(params, &x_t, t, &feat, cfg)?;
    let loss = mse(&eps_hat, &eps);
    Ok((
        loss,
        DpTape {
            enc_tape,
            pred_tape,
            eps,
            eps_hat,
            x_dim: x0.dim(),
            t_embed_dim: cfg.t_embed_dim,
        },
    ))
}

/// Backpropagate the MSE through the predictor and the scene encoder.
pub fn dp_loss_backward(
    params: &ParamStore,
    tape: DpTape,
    grads: &mut Gradients,
) -> Result<(), NnError> {
    let n = tape.eps.len() as f64;
    let d_out: Vec<f64> = tape
        .eps_hat
        .iter()
        .zip(&tape.eps)
        .map(|(p, e)| 2.0 * (p - e) / n)
        .collect();
    let mut tape = tape;
    let d_input = mlp_backward(params, &tape.pred_tape, &d_out, grads)?;
    // input layout: [x_t | t-embedding | scene feature]; only the scene
    // feature flows back into parameters.
    let feat_grad = &d_input[tape.x_dim + tape.t_embed_dim..];
    encoder_backward(params, &mut tape.enc_tape, feat_grad, grads)?;
    Ok(())
}

fn proposal_rng(seed: u64, proposal: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(proposal as u64 + 1);
    rng
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn clamp_unit(mut x: Vec<f64>) -> Vec<f64> {
    for v in &mut x {
        *v = v.clamp(-1.0, 1.0);
    }
    x
}

/// Ancestral DDPM sampling of N proposals. The scene feature is computed
/// once and shared across denoising iterations.
pub fn ddpm_sample(
    params: &ParamStore,
    tokens: &SceneTokens,
    n: usize,
    sched: &DiffusionSchedule,
    cfg: &DiffusionConfig,
    seed: u64,
) -> Result<Vec<NormalizedControlSeq>, NnError> {
    assert!(n >= 1);
    let (feat, _) = encoder_forward(params, tokens, &cfg.encoder())?;
    let dim = cfg.t_dp * 3;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = proposal_rng(seed, i);
        let mut x = randn(&mut rng, dim);
        for t in (1..=sched.steps()).rev() {
            let (eps_hat, _) = noise_pred(params, &x, t, &feat, cfg)?;
            let beta = sched.beta(t);
            let alpha = sched.alpha(t);
            let ab = sched.alpha_bar(t);
            let coeff = beta / (1.0 - ab).sqrt();
            let inv_sqrt_alpha = 1.0 / alpha.sqrt();
            let mut mean: Vec<f64> = x
                .iter()
                .zip(&eps_hat)
                .map(|(xi, ei)| inv_sqrt_alpha * (xi - coeff * ei))
                .collect();
            if t > 1 {
                let z = randn(&mut rng, dim);
                let sigma = beta.sqrt();
                for (m, zi) in mean.iter_mut().zip(&z) {
                    *m += sigma * zi;
                }
            }
            x = mean;
        }
        out.push(NormalizedControlSeq {
            t_dp: cfg.t_dp,
            values: clamp_unit(x),
        });
    }
    Ok(out)
}

/// Deterministic DDIM sampling (η = 0) on an evenly spaced timestep
/// subsequence.
pub fn ddim_sample(
    params: &ParamStore,
    tokens: &SceneTokens,
    n: usize,
    sched: &DiffusionSchedule,
    steps: usize,
    cfg: &DiffusionConfig,
    seed: u64,
) -> Result<Vec<NormalizedControlSeq>, DiffusionError> {
    assert!(n >= 1);
    if steps < 1 || steps > sched.steps() {
        return Err(DiffusionError::InvalidDdimSteps(steps));
    }
    let t_d = sched.steps();
    let mut taus: Vec<usize> = Vec::with_capacity(steps);
    for k in 1..=steps {
        let mut tau = ((k * t_d) as f64 / steps as f64).round() as usize;
        if let Some(&prev) = taus.last() {
            tau = tau.max(prev + 1);
        }
        taus.push(tau.min(t_d));
    }
    let (feat, _) = encoder_forward(params, tokens, &cfg.encoder())?;
    let dim = cfg.t_dp * 3;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = proposal_rng(seed, i);
        let mut x = randn(&mut rng, dim);
        for k in (0..taus.len()).rev() {
            let t = taus[k];
            let t_prev = if k > 0 { taus[k - 1] } else { 0 };
            let ab_t = sched.alpha_bar(t);
            let ab_prev = sched.alpha_bar(t_prev);
            let (eps_hat, _) = noise_pred(params, &x, t, &feat, cfg)?;
            let x0_pred: Vec<f64> = x
                .iter()
                .zip(&eps_hat)
                .map(|(xi, ei)| (xi - (1.0 - ab_t).sqrt() * ei) / ab_t.sqrt())
                .collect();
            x = x0_pred
                .iter()
                .zip(&eps_hat)
                .map(|(x0i, ei)| ab_prev.sqrt() * x0i + (1.0 - ab_prev).sqrt() * ei)
                .collect();
        }
        out.push(NormalizedControlSeq {
            t_dp: cfg.t_dp,
            values: clamp_unit(x),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{NavCommand, TokenizerConfig, VehicleState};

    // Frozen product evaluation for the default 100-step linear schedule.
    // (First-order e^{−Σβ} ≈ 0.366; the exact product is below it.)
    const ALPHA_BAR_100: f64 = 0.3635632480554922;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.steps(), 1);
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_alpha_bar_product() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        // independent product evaluation via log-sum
        let oracle: f64 = (0..100)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 99.0)).ln())
            .sum::<f64>()
            .exp();
        assert!((s.alpha_bar(100) - oracle).abs() < 1e-12);
        assert!((s.alpha_bar(100) - ALPHA_BAR_100).abs() < 1e-12);
        assert!((s.alpha_bar(100) - 0.366).abs() < 3e-3);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        for t in 1..100 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
        assert!(s.alpha_bar(1) > 0.999);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(matches!(
            make_schedule(10, 0.0, 0.02),
            Err(DiffusionError::InvalidBetaRange)
        ));
        assert!(matches!(
            make_schedule(10, 0.3, 0.2),
            Err(DiffusionError::InvalidBetaRange)
        ));
        assert!(matches!(make_schedule(0, 1e-4, 0.02), Err(DiffusionError::NoSteps)));
    }

    #[test]
    fn q_sample_near_x0_at_small_t() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = vec![0.5; 6];
        let noise = vec![1.0; 6];
        let xt = q_sample(&x0, 1, &noise, &s);
        let bound = (1.0 - s.alpha_bar(1)).sqrt() + 1e-4;
        for (x, o) in xt.iter().zip(&x0) {
            assert!((x - o).abs() <= bound);
        }
    }

    #[test]
    fn q_sample_approaches_noise_at_large_t() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = vec![0.9; 4];
        let noise = vec![-1.3; 4];
        let xt = q_sample(&x0, 100, &noise, &s);
        // √ᾱ·x0 + √(1−ᾱ)·ε with ᾱ ≈ 0.364
        let expected = ALPHA_BAR_100.sqrt() * 0.9 + (1.0 - ALPHA_BAR_100).sqrt() * -1.3;
        for x in &xt {
            assert!((x - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn q_sample_monte_carlo_variance() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let t = 50;
        let ab = s.alpha_bar(t);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 10_000;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            // x0 ~ U(−1, 1): Var = 1/3
            let x0 = vec![rng.gen_range(-1.0..1.0)];
            let noise = vec![rng.sample::<f64, _>(StandardNormal)];
            samples.push(q_sample(&x0, t, &noise, &s)[0]);
        }
        let mean: f64 = samples.iter().sum::<f64>() / n as f64;
        let var: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let expected = ab / 3.0 + (1.0 - ab);
        assert!(
            (var - expected).abs() / expected < 0.05,
            "variance {var} vs expected {expected}"
        );
    }

    fn tokens() -> SceneTokens {
        let ego = VehicleState::new(0.0, 0.0, 0.0, 4.0);
        crate::world::tokenize_scene(&ego, &[], &[], NavCommand::Follow, &TokenizerConfig::default())
    }

    fn tiny_cfg() -> DiffusionConfig {
        DiffusionConfig {
            t_dp: 4,
            d_model: 8,
            hidden: 16,
            t_embed_dim: 8,
        }
    }

    fn init_store(cfg: &DiffusionConfig, seed: u64) -> ParamStore {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.init_params(&mut params, &mut rng);
        params
    }

    #[test]
    fn oracle_injection_gives_zero_loss() {
        let eps = vec![0.3, -0.2, 1.4, 0.0];
        assert_eq!(mse(&eps, &eps), 0.0);
    }

    #[test]
    fn zero_predictor_loss_is_unit_variance() {
        // ε̂ ≡ 0 makes the loss mean(ε²) ≈ 1 over many draws.
        let cfg = tiny_cfg();
        let mut params = ParamStore::new();
        for (name, shape) in cfg.param_shapes() {
            params.insert(&name, crate::nn::Tensor::zeros(shape));
        }
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let toks = tokens();
        let x0 = NormalizedControlSeq {
            t_dp: cfg.t_dp,
            values: vec![0.25; cfg.t_dp * 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 3000;
        let mut total = 0.0;
        for _ in 0..n {
            let (l, _) = dp_loss(&params, &x0, &toks, &sched, &mut rng, &cfg).unwrap();
            total += l;
        }
        let mean = total / n as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean loss {mean}");
    }

    #[test]
    fn dp_loss_gradients_pass_finite_differences() {
        let cfg = tiny_cfg();
        let mut params = init_store(&cfg, 41);
        let sched = make_schedule(20, 1e-4, 0.02).unwrap();
        let toks = tokens();
        let x0 = NormalizedControlSeq {
            t_dp: cfg.t_dp,
            values: (0..cfg.t_dp * 3).map(|i| (i as f64 / 10.0).sin() * 0.5).collect(),
        };
        // freeze the sampled (t, ε) by reseeding identically per evaluation
        let loss = |p: &ParamStore| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            dp_loss(p, &x0, &toks, &sched, &mut rng, &cfg).unwrap().0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (_, tape) = dp_loss(&params, &x0, &toks, &sched, &mut rng, &cfg).unwrap();
        let mut grads = Gradients::new();
        dp_loss_backward(&params, tape, &mut grads).unwrap();
        let report = crate::nn::grad_check(&mut params, &loss, &grads, 1e-5, 1e-4);
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn ddpm_shapes_and_determinism() {
        let cfg = tiny_cfg();
        let params = init_store(&cfg, 43);
        let sched = make_schedule(10, 1e-4, 0.02).unwrap();
        let toks = tokens();
        let a = ddpm_sample(&params, &toks, 3, &sched, &cfg, 5).unwrap();
        let b = ddpm_sample(&params, &toks, 3, &sched, &cfg, 5).unwrap();
        assert_eq!(a.len(), 3);
        for s in &a {
            assert_eq!(s.values.len(), cfg.t_dp * 3);
            assert!(s.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_eq!(a, b);
        let c = ddpm_sample(&params, &toks, 3, &sched, &cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn growing_n_preserves_earlier_proposals() {
        let cfg = tiny_cfg();
        let params = init_store(&cfg, 47);
        let sched = make_schedule(10, 1e-4, 0.02).unwrap();
        let toks = tokens();
        let five = ddpm_sample(&params, &toks, 5, &sched, &cfg, 11).unwrap();
        let ten = ddpm_sample(&params, &toks, 10, &sched, &cfg, 11).unwrap();
        assert_eq!(&ten[..5], &five[..]);
        // ddim shares the stream layout
        let d5 = ddim_sample(&params, &toks, 5, &sched, 5, &cfg, 11).unwrap();
        let d10 = ddim_sample(&params, &toks, 10, &sched, 5, &cfg, 11).unwrap();
        assert_eq!(&d10[..5], &d5[..]);
    }

    #[test]
    fn ddim_full_steps_and_determinism() {
        let cfg = tiny_cfg();
        let params = init_store(&cfg, 53);
        let sched = make_schedule(10, 1e-4, 0.02).unwrap();
        let toks = tokens();
        let a = ddim_sample(&params, &toks, 2, &sched, 10, &cfg, 3).unwrap();
        let b = ddim_sample(&params, &toks, 2, &sched, 10, &cfg, 3).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert_eq!(s.values.len(), cfg.t_dp * 3);
        }
        assert!(matches!(
            ddim_sample(&params, &toks, 1, &sched, 11, &cfg, 3),
            Err(DiffusionError::InvalidDdimSteps(11))
        ));
    }

    #[test]
    fn decode_boundary_conventions() {
        let x = NormalizedControlSeq {
            t_dp: 1,
            values: vec![0.0, 0.0, 0.0],
        };
        let seq = decode_proposal(&x);
        assert!(seq.controls[0].brake); // boundary ≥ 0 brakes
        assert!((seq.controls[0].throttle - 0.5).abs() < 1e-15);
        assert_eq!(seq.controls[0].steer, 0.0);

        let y = NormalizedControlSeq {
            t_dp: 1,
            values: vec![-1.0, -1.0, 0.0],
        };
        let seq = decode_proposal(&y);
        assert!(!seq.controls[0].brake);
        assert_eq!(seq.controls[0].throttle, 0.0);
        assert_eq!(seq.controls[0].steer, 0.0);
    }

    #[test]
    fn encode_decode_idempotent_on_decoded_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let x = NormalizedControlSeq {
                t_dp: 5,
                values: (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            };
            let once = decode_proposal(&x);
            let twice = decode_proposal(&encode_controls(&once));
            assert_eq!(once, twice);
        }
    }
}
