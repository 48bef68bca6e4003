//! Minimal differentiable building blocks: parameter store, linear layers,
//! one masked cross-attention encoder, a two-layer MLP, analytic backward
//! passes, a central finite-difference gradient checker, and a
//! decoupled-weight-decay adaptive optimizer with cosine-annealed learning
//! rate.
//!
//! Everything is 64-bit and allocation-simple; the model scale here does not
//! justify more machinery, and explicit gradients keep the finite-difference
//! contract checkable.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::world::{SceneTokens, TOKEN_DIM};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// A named dense array of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Accumulated parameter gradients, keyed by parameter name.
pub type Gradients = BTreeMap<String, Vec<f64>>;

pub fn accumulate(grads: &mut Gradients, name: &str, len: usize, f: impl FnOnce(&mut [f64])) {
    let entry = grads
        .entry(name.to_string())
        .or_insert_with(|| vec![0.0; len]);
    f(entry);
}

/// Named parameters plus per-parameter optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    opt_m: BTreeMap<String, Vec<f64>>,
    opt_v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter initialized uniform(−a, a), a = √(6/(fan_in+fan_out)).
    /// Rank-1 parameters are treated as biases and start at zero.
    pub fn init_param(&mut self, name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) {
        let n: usize = shape.iter().product();
        let data = if shape.len() < 2 {
            vec![0.0; n]
        } else {
            let fan_out = shape[0];
            let fan_in: usize = shape[1..].iter().product();
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        };
        self.params.insert(name.to_string(), Tensor { shape, data });
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.params.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.params
            .get(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_checked(&self, name: &str, expected: &[usize]) -> Result<&Tensor, NnError> {
        let t = self.get(name)?;
        if t.shape != expected {
            return Err(NnError::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                got: t.shape.clone(),
            });
        }
        Ok(t)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn total_len(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

// ---------------------------------------------------------------------------
// Linear layer
// ---------------------------------------------------------------------------

/// y = W x + b for W: [out, in], recording x for backward.
pub fn linear_forward(
    params: &ParamStore,
    w_name: &str,
    b_name: &str,
    x: &[f64],
) -> Result<(Vec<f64>, LinearTape), NnError> {
    let w = params.get(w_name)?;
    if w.shape.len() != 2 || w.shape[1] != x.len() {
        return Err(NnError::ShapeMismatch {
            name: w_name.to_string(),
            expected: vec![w.shape.first().copied().unwrap_or(0), x.len()],
            got: w.shape.clone(),
        });
    }
    let out = w.shape[0];
    let b = params.get_checked(b_name, &[out])?;
    let mut y = b.data.clone();
    for o in 0..out {
        let row = &w.data[o * x.len()..(o + 1) * x.len()];
        y[o] += row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
    }
    Ok((
        y,
        LinearTape {
            w_name: w_name.to_string(),
            b_name: b_name.to_string(),
            x: x.to_vec(),
            out,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct LinearTape {
    w_name: String,
    b_name: String,
    x: Vec<f64>,
    out: usize,
}

/// Accumulate dW = dy ⊗ x and db = dy; returns dx.
pub fn linear_backward(
    params: &ParamStore,
    tape: &LinearTape,
    dy: &[f64],
    grads: &mut Gradients,
) -> Result<Vec<f64>, NnError> {
    debug_assert_eq!(dy.len(), tape.out);
    let n_in = tape.x.len();
    accumulate(grads, &tape.w_name, tape.out * n_in, |g| {
        for o in 0..tape.out {
            for i in 0..n_in {
                g[o * n_in + i] += dy[o] * tape.x[i];
            }
        }
    });
    accumulate(grads, &tape.b_name, tape.out, |g| {
        for o in 0..tape.out {
            g[o] += dy[o];
        }
    });
    let w = params.get(&tape.w_name)?;
    let mut dx = vec![0.0; n_in];
    for o in 0..tape.out {
        for i in 0..n_in {
            dx[i] += w.data[o * n_in + i] * dy[o];
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Two-layer MLP with ReLU
// ---------------------------------------------------------------------------

pub fn mlp_param_shapes(prefix: &str, n_in: usize, hidden: usize, n_out: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.l1_w"), vec![hidden, n_in]),
        (format!("{prefix}.l1_b"), vec![hidden]),
        (format!("{prefix}.l2_w"), vec![n_out, hidden]),
        (format!("{prefix}.l2_b"), vec![n_out]),
    ]
}

pub fn mlp_forward(
    params: &ParamStore,
    prefix: &str,
    x: &[f64],
) -> Result<(Vec<f64>, MlpTape), NnError> {
    let (z1, t1) = linear_forward(params, &format!("{prefix}.l1_w"), &format!("{prefix}.l1_b"), x)?;
    let h: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    let (y, t2) = linear_forward(params, &format!("{prefix}.l2_w"), &format!("{prefix}.l2_b"), &h)?;
    Ok((y, MlpTape { t1, t2, z1 }))
}

#[derive(Debug, Clone)]
pub struct MlpTape {
    t1: LinearTape,
    t2: LinearTape,
    z1: Vec<f64>,
}

pub fn mlp_backward(
    params: &ParamStore,
    tape: &MlpTape,
    dy: &[f64],
    grads: &mut Gradients,
) -> Result<Vec<f64>, NnError> {
    let dh = linear_backward(params, &tape.t2, dy, grads)?;
    let dz1: Vec<f64> = dh
        .iter()
        .zip(&tape.z1)
        .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
        .collect();
    linear_backward(params, &tape.t1, &dz1, grads)
}

// ---------------------------------------------------------------------------
// Masked cross-attention encoder
// ---------------------------------------------------------------------------

/// Layout of one encoder: learned queries attend to embedded scene tokens,
/// followed by a two-layer feedforward head per query.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub prefix: String,
    pub token_dim: usize,
    pub d_model: usize,
    pub n_queries: usize,
}

impl EncoderConfig {
    pub fn new(prefix: &str, n_queries: usize, d_model: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            token_dim: TOKEN_DIM,
            d_model,
            n_queries,
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let p = &self.prefix;
        let d = self.d_model;
        vec![
            (format!("{p}.tok_w"), vec![d, self.token_dim]),
            (format!("{p}.tok_b"), vec![d]),
            (format!("{p}.queries"), vec![self.n_queries, d]),
            (format!("{p}.key_w"), vec![d, d]),
            (format!("{p}.key_b"), vec![d]),
            (format!("{p}.val_w"), vec![d, d]),
            (format!("{p}.val_b"), vec![d]),
            (format!("{p}.ff1_w"), vec![d, d]),
            (format!("{p}.ff1_b"), vec![d]),
            (format!("{p}.ff2_w"), vec![d, d]),
            (format!("{p}.ff2_b"), vec![d]),
        ]
    }
}

/// Forward intermediates for one encoder pass. Consumed by exactly one
/// backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTape {
    cfg: EncoderConfig,
    rows: Vec<Vec<f64>>,
    valid: Vec<usize>,
    embedded: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    alphas: Vec<Vec<f64>>,
    ff_tapes: Vec<MlpTape>,
    consumed: bool,
}

impl EncoderTape {
    /// Attention weights over valid tokens for one query.
    pub fn attention_weights(&self, query: usize) -> &[f64] {
        &self.alphas[query]
    }
}

/// Run the encoder over scene tokens. Masked tokens contribute nothing; with
/// every token masked the context is zero and the output reduces to the
/// feedforward of a zero vector.
pub fn encoder_forward(
    params: &ParamStore,
    tokens: &SceneTokens,
    cfg: &EncoderConfig,
) -> Result<(Vec<f64>, EncoderTape), NnError> {
    let (rows, mask) = tokens.rows();
    encoder_forward_rows(params, rows, &mask, cfg)
}

pub fn encoder_forward_rows(
    params: &ParamStore,
    rows: Vec<Vec<f64>>,
    mask: &[bool],
    cfg: &EncoderConfig,
) -> Result<(Vec<f64>, EncoderTape), NnError> {
    let p = &cfg.prefix;
    let d = cfg.d_model;
    let queries = params.get_checked(&format!("{p}.queries"), &[cfg.n_queries, d])?;
    let valid: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.then_some(i))
        .collect();

    let mut embedded = Vec::with_capacity(valid.len());
    let mut keys = Vec::with_capacity(valid.len());
    let mut values = Vec::with_capacity(valid.len());
    for &j in &valid {
        if rows[j].len() != cfg.token_dim {
            return Err(NnError::ShapeMismatch {
                name: format!("{p}.tok_w input"),
                expected: vec![cfg.token_dim],
                got: vec![rows[j].len()],
            });
        }
        let (e, _) = linear_forward(params, &format!("{p}.tok_w"), &format!("{p}.tok_b"), &rows[j])?;
        let (k, _) = linear_forward(params, &format!("{p}.key_w"), &format!("{p}.key_b"), &e)?;
        let (v, _) = linear_forward(params, &format!("{p}.val_w"), &format!("{p}.val_b"), &e)?;
        embedded.push(e);
        keys.push(k);
        values.push(v);
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut features = Vec::with_capacity(cfg.n_queries * d);
    let mut alphas = Vec::with_capacity(cfg.n_queries);
    let mut ff_tapes = Vec::with_capacity(cfg.n_queries);
    for q in 0..cfg.n_queries {
        let qvec = &queries.data[q * d..(q + 1) * d];
        let alpha = if keys.is_empty() {
            Vec::new()
        } else {
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| k.iter().zip(qvec).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        };
        let mut ctx = vec![0.0; d];
        for (a, v) in alpha.iter().zip(&values) {
            for (c, vi) in ctx.iter_mut().zip(v) {
                *c += a * vi;
            }
        }
        let (feat, ff_tape) = mlp_forward_named(
            params,
            &format!("{p}.ff1_w"),
            &format!("{p}.ff1_b"),
            &format!("{p}.ff2_w"),
            &format!("{p}.ff2_b"),
            &ctx,
        )?;
        features.extend_from_slice(&feat);
        alphas.push(alpha);
        ff_tapes.push(ff_tape);
    }

    Ok((
        features,
        EncoderTape {
            cfg: cfg.clone(),
            rows,
            valid,
            embedded,
            keys,
            values,
            alphas,
            ff_tapes,
            consumed: false,
        },
    ))
}

fn mlp_forward_named(
    params: &ParamStore,
    w1: &str,
    b1: &str,
    w2: &str,
    b2: &str,
    x: &[f64],
) -> Result<(Vec<f64>, MlpTape), NnError> {
    let (z1, t1) = linear_forward(params, w1, b1, x)?;
    let h: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    let (y, t2) = linear_forward(params, w2, b2, &h)?;
    Ok((y, MlpTape { t1, t2, z1 }))
}

/// Backpropagate `out_grad` (length n_queries·d_model) through the encoder.
/// The tape is single-use.
pub fn encoder_backward(
    params: &ParamStore,
    tape: &mut EncoderTape,
    out_grad: &[f64],
    grads: &mut Gradients,
) -> Result<(), NnError> {
    if tape.consumed {
        return Err(NnError::TapeConsumed);
    }
    tape.consumed = true;
    let cfg = tape.cfg.clone();
    let p = &cfg.prefix;
    let d = cfg.d_model;
    debug_assert_eq!(out_grad.len(), cfg.n_queries * d);
    let queries = params.get(&format!("{p}.queries"))?;
    let scale = 1.0 / (d as f64).sqrt();

    let n_tok = tape.valid.len();
    let mut d_keys = vec![vec![0.0; d]; n_tok];
    let mut d_values = vec![vec![0.0; d]; n_tok];
    let mut d_queries = vec![0.0; cfg.n_queries * d];

    for q in 0..cfg.n_queries {
        let dfeat = &out_grad[q * d..(q + 1) * d];
        let dctx = mlp_backward(params, &tape.ff_tapes[q], dfeat, grads)?;
        let alpha = &tape.alphas[q];
        if alpha.is_empty() {
            continue;
        }
        // dα_j = dctx · v_j ; softmax jacobian back to scores.
        let dalpha: Vec<f64> = tape
            .values
            .iter()
            .map(|v| v.iter().zip(&dctx).map(|(vi, g)| vi * g).sum::<f64>())
            .collect();
        let inner: f64 = dalpha.iter().zip(alpha).map(|(da, a)| da * a).sum();
        let dscores: Vec<f64> = dalpha
            .iter()
            .zip(alpha)
            .map(|(da, a)| a * (da - inner))
            .collect();
        let qvec = &queries.data[q * d..(q + 1) * d];
        for (j, ds) in dscores.iter().enumerate() {
            for i in 0..d {
                d_keys[j][i] += ds * scale * qvec[i];
                d_queries[q * d + i] += ds * scale * tape.keys[j][i];
            }
        }
        for (j, a) in alpha.iter().enumerate() {
            for i in 0..d {
                d_values[j][i] += a * dctx[i];
            }
        }
    }

    accumulate(grads, &format!("{p}.queries"), cfg.n_queries * d, |g| {
        for (gi, dq) in g.iter_mut().zip(&d_queries) {
            *gi += dq;
        }
    });

    // Token projections: rebuild the small linear tapes and push gradients
    // down to the raw rows.
    for (j_local, &j_row) in tape.valid.iter().enumerate() {
        let e = &tape.embedded[j_local];
        let key_tape = LinearTape {
            w_name: format!("{p}.key_w"),
            b_name: format!("{p}.key_b"),
            x: e.clone(),
            out: d,
        };
        let val_tape = LinearTape {
            w_name: format!("{p}.val_w"),
            b_name: format!("{p}.val_b"),
            x: e.clone(),
            out: d,
        };
        let mut de = linear_backward(params, &key_tape, &d_keys[j_local], grads)?;
        let de_v = linear_backward(params, &val_tape, &d_values[j_local], grads)?;
        for (a, b) in de.iter_mut().zip(&de_v) {
            *a += b;
        }
        let tok_tape = LinearTape {
            w_name: format!("{p}.tok_w"),
            b_name: format!("{p}.tok_b"),
            x: tape.rows[j_row].clone(),
            out: d,
        };
        linear_backward(params, &tok_tape, &de, grads)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compare analytic gradients against central finite differences for every
/// element of every parameter. `loss_fn` must be a pure function of the
/// store's parameter values.
pub fn grad_check(
    params: &mut ParamStore,
    loss_fn: &dyn Fn(&ParamStore) -> f64,
    analytic: &Gradients,
    h: f64,
    tol: f64,
) -> GradCheckReport {
    assert!(h > 0.0);
    let names: Vec<String> = params.names().cloned().collect();
    let mut per_param = BTreeMap::new();
    let mut max_rel: f64 = 0.0;
    for name in names {
        let n = params.get(&name).unwrap().len();
        let zero = vec![0.0; n];
        let ana = analytic.get(&name).unwrap_or(&zero);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = params.get(&name).unwrap().data[i];
            params.get_mut(&name).unwrap().data[i] = orig + h;
            let lp = loss_fn(params);
            params.get_mut(&name).unwrap().data[i] = orig - h;
            let lm = loss_fn(params);
            params.get_mut(&name).unwrap().data[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let denom = ana[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((ana[i] - numeric).abs() / denom);
        }
        max_rel = max_rel.max(worst);
        per_param.insert(name, worst);
    }
    GradCheckReport {
        per_param,
        max_rel_error: max_rel,
        tolerance: tol,
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Hyperparameters for the decoupled-weight-decay adaptive-moment update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Cosine annealing horizon in steps; 0 disables the schedule.
    pub total_steps: u64,
}

impl AdamWHyper {
    pub fn new(lr: f64, weight_decay: f64, total_steps: u64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            total_steps,
        }
    }

    /// Learning rate for 1-based step `step` under cosine annealing.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        let progress = ((step - 1) as f64 / self.total_steps as f64).clamp(0.0, 1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One optimizer step over every parameter with a gradient entry.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &Gradients,
    hyper: &AdamWHyper,
) -> Result<(), NnError> {
    for (name, g) in grads {
        if !params.params.contains_key(name) {
            return Err(NnError::MissingParam(name.clone()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteGradient(name.clone()));
        }
    }
    params.step += 1;
    let t = params.step;
    let lr = hyper.lr_at(t);
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for (name, g) in grads {
        let n = g.len();
        let m = params
            .opt_m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        let v = params
            .opt_v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        let theta = &mut params.params.get_mut(name).unwrap().data;
        for i in 0..n {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * theta[i]);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sinusoidal timestep embedding (shared with the diffusion head)
// ---------------------------------------------------------------------------

pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "HYNX", version, per-tensor records
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"HYNX";
const CHECKPOINT_VERSION: u32 = 1;

/// Write tensors in name order: name length + name, rank, dims, raw
/// little-endian 64-bit values. Bit-exact round trip.
pub fn save_tensors(path: impl AsRef<Path>, tensors: &BTreeMap<String, Tensor>) -> Result<(), NnError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>, NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], NnError> {
        if *pos + n > bytes.len() {
            return Err(NnError::BadCheckpoint("truncated file".to_string()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(NnError::BadCheckpoint("bad magic".to_string()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(NnError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let mut tensors = BTreeMap::new();
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| NnError::BadCheckpoint("non-utf8 tensor name".to_string()))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        tensors.insert(name, Tensor { shape, data });
    }
    Ok(tensors)
}

/// Checkpoint metadata carried as `meta.*` tensor records.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ParamStore,
    meta: &CheckpointMeta,
) -> Result<(), NnError> {
    let mut tensors = params.params.clone();
    tensors.insert(
        "meta.seed".to_string(),
        Tensor {
            shape: vec![1],
            data: vec![meta.seed as f64],
        },
    );
    let hash_bytes: Vec<f64> = meta.config_hash.bytes().map(|b| b as f64).collect();
    tensors.insert(
        "meta.config_hash".to_string(),
        Tensor {
            shape: vec![hash_bytes.len()],
            data: hash_bytes,
        },
    );
    save_tensors(path, &tensors)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, CheckpointMeta), NnError> {
    let tensors = load_tensors(path)?;
    let mut params = ParamStore::new();
    let mut seed = 0u64;
    let mut config_hash = String::new();
    for (name, t) in tensors {
        if name == "meta.seed" {
            seed = t.data.first().copied().unwrap_or(0.0) as u64;
        } else if name == "meta.config_hash" {
            config_hash = t.data.iter().map(|v| *v as u8 as char).collect();
        } else {
            params.params.insert(name, t);
        }
    }
    Ok((params, CheckpointMeta { seed, config_hash }))
}
