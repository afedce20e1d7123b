//! Forward graph builders: content/instruction encoders, duration heads,
//! the duration adapter, stream selection, and the fusion Transformer
//! backbone. Every function appends to a caller-owned tape so training,
//! checking and inference share one code path.

use crate::error::{Error, Result};
use crate::model::{FusionMode, ModelConfig, StagedParams};
use crate::tasks::{Alignment, TaskId, TaskSpec, Units, INSTRUCTION_ROWS, SYMBOL_VOCAB};
use crate::tensor::{Tape, Tensor, TensorId};

const LN_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10000.0;
/// Gradient scale on duration-predictor inputs, keeping duration losses
/// from dominating the shared encoders.
pub const DURATION_GRAD_SCALE: f64 = 0.1;

// ── Content and instruction encoding ─────────────────────────────────────

/// Unit sequence to content embeddings `[N, embed]`. Symbols and event
/// tokens are table lookups; noisy frames go through a linear projection.
pub fn encode_content(
    tape: &mut Tape,
    staged: &StagedParams,
    task: TaskId,
    units: &Units,
    cfg: &ModelConfig,
) -> Result<TensorId> {
    if units.is_empty() {
        return Err(Error::Contract("empty unit sequence".into()));
    }
    if units.len() > cfg.max_units {
        return Err(Error::Contract(format!(
            "{} units exceed max_units {}",
            units.len(),
            cfg.max_units
        )));
    }
    match (task, units) {
        (TaskId::TaCopy, Units::Symbols(symbols)) => {
            if let Some(&bad) = symbols.iter().find(|&&k| k >= SYMBOL_VOCAB) {
                return Err(Error::Config(format!("symbol {bad} out of vocabulary")));
            }
            tape.embedding_lookup(staged.id("enc.sym.table")?, symbols)
        }
        (TaskId::TaDenoise, Units::Frames(frames)) => {
            if frames.shape[1] != cfg.latent_dim {
                return Err(Error::Contract(format!(
                    "frame units have width {}, latent_dim is {}",
                    frames.shape[1], cfg.latent_dim
                )));
            }
            let x = tape.constant(frames.clone());
            let proj = tape.matmul(x, staged.id("enc.frame.w")?)?;
            tape.add(proj, staged.id("enc.frame.b")?)
        }
        (TaskId::NtaEvents, Units::Events(events)) => {
            tape.embedding_lookup(staged.id("enc.evt.table")?, events)
        }
        (task, _) => Err(Error::Contract(format!(
            "unit kind does not match task {}",
            task.name()
        ))),
    }
}

/// Single-head cross-attention from content rows to the selected
/// instruction embedding, residual-added: output shape equals `c`'s.
pub fn fuse_instruction(
    tape: &mut Tape,
    staged: &StagedParams,
    c: TensorId,
    vocab_id: usize,
    instruction: usize,
) -> Result<TensorId> {
    if instruction >= INSTRUCTION_ROWS {
        return Err(Error::Config(format!(
            "instruction {instruction} out of range (vocab rows {INSTRUCTION_ROWS})"
        )));
    }
    let table = staged.id(&format!("instr.{vocab_id}.table"))?;
    let i_row = tape.embedding_lookup(table, &[instruction])?;
    let d = tape.shape(c)[1];
    let q = tape.matmul(c, staged.id("adapter.wq")?)?;
    let k = tape.matmul(i_row, staged.id("adapter.wk")?)?;
    let v = tape.matmul(i_row, staged.id("adapter.wv")?)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax_lastdim(scaled)?;
    let ctx = tape.matmul(attn, v)?;
    let out = tape.matmul(ctx, staged.id("adapter.wo")?)?;
    tape.add(out, c)
}

// ── Duration prediction and expansion ────────────────────────────────────

/// Per-unit log-duration head (TA) or pooled clip head (NTA). Returns the
/// clip-duration estimate in frames and, for TA, the per-unit log
/// predictions `[N, 1]`. Inputs pass through a gradient scale so duration
/// losses only weakly steer the encoders.
pub fn predict_durations(
    tape: &mut Tape,
    staged: &StagedParams,
    c_i: TensorId,
    alignment: Alignment,
) -> Result<(TensorId, Option<TensorId>)> {
    let x = tape.scaled_gradient(c_i, DURATION_GRAD_SCALE)?;
    match alignment {
        Alignment::TimeAligned => {
            let h0 = tape.matmul(x, staged.id("dur.seq.fc1")?)?;
            let h1 = tape.add(h0, staged.id("dur.seq.b1")?)?;
            let h = tape.gelu(h1)?;
            let l0 = tape.matmul(h, staged.id("dur.seq.fc2")?)?;
            let log_d_s = tape.add(l0, staged.id("dur.seq.b2")?)?;
            let per_unit = tape.exp(log_d_s)?;
            let d_c = tape.sum(per_unit)?;
            Ok((d_c, Some(log_d_s)))
        }
        Alignment::NonTimeAligned => {
            let n = tape.shape(x)[0];
            let ones = tape.constant(Tensor::full(&[1, n], 1.0));
            let pooled_sum = tape.matmul(ones, x)?;
            let pooled = tape.scale(pooled_sum, 1.0 / n as f64)?;
            let h0 = tape.matmul(pooled, staged.id("dur.clip.fc1")?)?;
            let h1 = tape.add(h0, staged.id("dur.clip.b1")?)?;
            let h = tape.gelu(h1)?;
            let r0 = tape.matmul(h, staged.id("dur.clip.fc2")?)?;
            let raw = tape.add(r0, staged.id("dur.clip.b2")?)?;
            let e = tape.exp(raw)?;
            let d_c = tape.reshape(e, &[1])?;
            Ok((d_c, None))
        }
    }
}

/// Repeat row i of `c_i` for `d_s[i]` consecutive frames. The gather keeps
/// rows bit-exact and scatter-adds gradients back per source row.
pub fn duration_adapt(tape: &mut Tape, c_i: TensorId, d_s: &[usize]) -> Result<TensorId> {
    let n = tape.shape(c_i)[0];
    if d_s.len() != n {
        return Err(Error::Duration(format!(
            "{} durations for {} content rows",
            d_s.len(),
            n
        )));
    }
    if d_s.is_empty() {
        return Err(Error::Duration("empty duration vector".into()));
    }
    if let Some(i) = d_s.iter().position(|&d| d == 0) {
        return Err(Error::Duration(format!("duration of unit {i} is 0")));
    }
    let mut indices = Vec::with_capacity(d_s.iter().sum());
    for (i, &d) in d_s.iter().enumerate() {
        indices.extend(std::iter::repeat_n(i, d));
    }
    tape.embedding_lookup(c_i, &indices)
}

/// Content pipeline: encode units, fuse the instruction, run the duration
/// heads, and expand with caller-chosen durations (ground truth during
/// training, predictions or overrides at inference).
pub struct Conditioning {
    pub c_i: TensorId,
    pub c_i_t: TensorId,
    pub d_c_hat: TensorId,
    pub log_d_s_hat: Option<TensorId>,
    pub n_units: usize,
}

pub fn build_conditioning(
    tape: &mut Tape,
    staged: &StagedParams,
    cfg: &ModelConfig,
    spec: &TaskSpec,
    units: &Units,
    instruction: usize,
    d_s_expand: &[usize],
) -> Result<Conditioning> {
    let c = encode_content(tape, staged, spec.id, units, cfg)?;
    let c_i = fuse_instruction(tape, staged, c, spec.instruction_vocab_id, instruction)?;
    let (d_c_hat, log_d_s_hat) = predict_durations(tape, staged, c_i, spec.alignment)?;
    let c_i_t = duration_adapt(tape, c_i, d_s_expand)?;
    Ok(Conditioning { c_i, c_i_t, d_c_hat, log_d_s_hat, n_units: units.len() })
}

// ── Stream selection ─────────────────────────────────────────────────────

/// Conditioning as the backbone sees it. `Null` is the unconditional
/// branch: both streams come from the learnable dummies.
pub enum Condition {
    Real { c_i: TensorId, c_i_t: TensorId, alignment: Alignment },
    Null,
}

fn expand_dummy(tape: &mut Tape, staged: &StagedParams, t_frames: usize) -> Result<TensorId> {
    let dummy = staged.id("dummy.c_i_t")?;
    tape.embedding_lookup(dummy, &vec![0; t_frames])
}

fn concat_rows(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    let at = tape.transpose(a)?;
    let bt = tape.transpose(b)?;
    let cat = tape.concat_lastdim(&[at, bt])?;
    tape.transpose(cat)
}

/// Zero-pad or truncate a row sequence to exactly `t_frames` rows.
fn fit_rows(tape: &mut Tape, x: TensorId, t_frames: usize) -> Result<TensorId> {
    let (rows, cols) = (tape.shape(x)[0], tape.shape(x)[1]);
    if rows == t_frames {
        return Ok(x);
    }
    if rows > t_frames {
        let xt = tape.transpose(x)?;
        let cut = tape.slice_lastdim(xt, 0, t_frames)?;
        return tape.transpose(cut);
    }
    let pad = tape.constant(Tensor::zeros(&[t_frames - rows, cols]));
    concat_rows(tape, x, pad)
}

fn require_rows(tape: &Tape, x: TensorId, t_frames: usize, what: &str) -> Result<()> {
    let rows = tape.shape(x)[0];
    if rows != t_frames {
        return Err(Error::Contract(format!(
            "{what} has {rows} rows, expected {t_frames}"
        )));
    }
    Ok(())
}

/// Pick the cross-attention context and the additive stream for one
/// forward pass. The additive stream is `None` where the mode injects
/// nothing (and the backbone applies the InputOnly stream once itself).
pub fn select_streams(
    tape: &mut Tape,
    staged: &StagedParams,
    cfg: &ModelConfig,
    cond: &Condition,
    t_frames: usize,
) -> Result<(TensorId, Option<TensorId>)> {
    let (c_i, c_i_t, alignment) = match cond {
        Condition::Null => {
            let ci = staged.id("dummy.c_i")?;
            let cit = expand_dummy(tape, staged, t_frames)?;
            (ci, cit, None)
        }
        Condition::Real { c_i, c_i_t, alignment } => (*c_i, *c_i_t, Some(*alignment)),
    };
    match cfg.fusion_mode {
        FusionMode::Dual | FusionMode::InputOnly => match alignment {
            Some(Alignment::TimeAligned) => {
                require_rows(tape, c_i_t, t_frames, "time-aligned stream")?;
                Ok((staged.id("dummy.c_i")?, Some(c_i_t)))
            }
            Some(Alignment::NonTimeAligned) => {
                let f = expand_dummy(tape, staged, t_frames)?;
                Ok((c_i, Some(f)))
            }
            None => Ok((c_i, Some(c_i_t))),
        },
        FusionMode::Double => {
            let f = fit_rows(tape, c_i_t, t_frames)?;
            Ok((c_i, Some(f)))
        }
        FusionMode::CrossAttnOnly => {
            let k = concat_rows(tape, c_i, c_i_t)?;
            Ok((k, None))
        }
    }
}

// ── Timestep conditioning ────────────────────────────────────────────────

/// Sinusoidal flow-time features through the shared 2-layer MLP: `[1, D]`.
pub fn time_embedding(
    tape: &mut Tape,
    staged: &StagedParams,
    cfg: &ModelConfig,
    tau: f64,
) -> Result<TensorId> {
    let half = cfg.embed_size / 2;
    let angles: Vec<f64> = (0..half)
        .map(|i| tau * ROPE_BASE.powf(i as f64 / half as f64))
        .collect();
    let a = tape.constant(Tensor::new(&[1, half], angles)?);
    let s = tape.sin(a)?;
    let c = tape.cos(a)?;
    let emb = tape.concat_lastdim(&[s, c])?;
    let h0 = tape.matmul(emb, staged.id("time.fc1")?)?;
    let h1 = tape.add(h0, staged.id("time.b1")?)?;
    let h = tape.gelu(h1)?;
    let t0 = tape.matmul(h, staged.id("time.fc2")?)?;
    tape.add(t0, staged.id("time.b2")?)
}

/// Per-block modulation vectors, each `[1, D]`.
pub struct BlockAdaln {
    pub gamma_sa: TensorId,
    pub beta_sa: TensorId,
    pub alpha_sa: TensorId,
    pub gamma_ffn: TensorId,
    pub beta_ffn: TensorId,
    pub alpha_ffn: TensorId,
}

pub fn adaln_params(
    tape: &mut Tape,
    staged: &StagedParams,
    cfg: &ModelConfig,
    block: usize,
    t_emb: TensorId,
) -> Result<BlockAdaln> {
    let d = cfg.embed_size;
    let h0 = tape.matmul(t_emb, staged.id(&format!("blocks.{block}.adaln.fc1"))?)?;
    let h1 = tape.add(h0, staged.id(&format!("blocks.{block}.adaln.b1"))?)?;
    let h = tape.gelu(h1)?;
    let o0 = tape.matmul(h, staged.id(&format!("blocks.{block}.adaln.fc2"))?)?;
    let out = tape.add(o0, staged.id(&format!("blocks.{block}.adaln.b2"))?)?;
    let mut slots = Vec::with_capacity(6);
    for i in 0..6 {
        slots.push(tape.slice_lastdim(out, i * d, (i + 1) * d)?);
    }
    Ok(BlockAdaln {
        gamma_sa: slots[0],
        beta_sa: slots[1],
        alpha_sa: slots[2],
        gamma_ffn: slots[3],
        beta_ffn: slots[4],
        alpha_ffn: slots[5],
    })
}

// ── Attention ────────────────────────────────────────────────────────────

/// Host-precomputed rotary tables for one sequence length: `[T, head/2]`
/// cosines and sines of position times the inverse frequencies.
pub struct RopeTables {
    cos: Tensor,
    sin: Tensor,
}

impl RopeTables {
    pub fn new(t_frames: usize, head_dim: usize) -> RopeTables {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(t_frames * half);
        let mut sin = Vec::with_capacity(t_frames * half);
        for pos in 0..t_frames {
            for i in 0..half {
                let theta = pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        RopeTables {
            cos: Tensor::new(&[t_frames, half], cos).unwrap(),
            sin: Tensor::new(&[t_frames, half], sin).unwrap(),
        }
    }
}

/// Half-split rotary rotation of one head's rows by their positions.
fn apply_rope(tape: &mut Tape, x: TensorId, rt: &RopeTables) -> Result<TensorId> {
    let hd = tape.shape(x)[1];
    let half = hd / 2;
    let cos = tape.constant(rt.cos.clone());
    let sin = tape.constant(rt.sin.clone());
    let x1 = tape.slice_lastdim(x, 0, half)?;
    let x2 = tape.slice_lastdim(x, half, hd)?;
    let x1c = tape.mul(x1, cos)?;
    let x2s = tape.mul(x2, sin)?;
    let r1 = tape.sub(x1c, x2s)?;
    let x2c = tape.mul(x2, cos)?;
    let x1s = tape.mul(x1, sin)?;
    let r2 = tape.add(x2c, x1s)?;
    tape.concat_lastdim(&[r1, r2])
}

struct AttnWeights {
    wq: TensorId,
    wk: TensorId,
    wv: TensorId,
    wo: TensorId,
}

fn attn_weights(staged: &StagedParams, prefix: &str) -> Result<AttnWeights> {
    Ok(AttnWeights {
        wq: staged.id(&format!("{prefix}.wq"))?,
        wk: staged.id(&format!("{prefix}.wk"))?,
        wv: staged.id(&format!("{prefix}.wv"))?,
        wo: staged.id(&format!("{prefix}.wo"))?,
    })
}

/// Multi-head scaled-dot attention; rotary tables, when given, rotate Q
/// and K per head (self-attention only; context rows carry no position).
fn multi_head_attention(
    tape: &mut Tape,
    q_in: TensorId,
    kv_in: TensorId,
    w: &AttnWeights,
    heads: usize,
    rope: Option<&RopeTables>,
) -> Result<TensorId> {
    let d = tape.shape(q_in)[1];
    let hd = d / heads;
    let q = tape.matmul(q_in, w.wq)?;
    let k = tape.matmul(kv_in, w.wk)?;
    let v = tape.matmul(kv_in, w.wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let mut qh = tape.slice_lastdim(q, lo, hi)?;
        let mut kh = tape.slice_lastdim(k, lo, hi)?;
        let vh = tape.slice_lastdim(v, lo, hi)?;
        if let Some(rt) = rope {
            qh = apply_rope(tape, qh, rt)?;
            kh = apply_rope(tape, kh, rt)?;
        }
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let scaled = tape.scale(logits, 1.0 / (hd as f64).sqrt())?;
        let attn = tape.softmax_lastdim(scaled)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_lastdim(&outs)?;
    tape.matmul(cat, w.wo)
}

// ── Fusion block and backbone ────────────────────────────────────────────

/// Modulated normalization `gamma * LN(a) + beta`.
fn modulated_norm(
    tape: &mut Tape,
    a: TensorId,
    gamma: TensorId,
    beta: TensorId,
) -> Result<TensorId> {
    let ln = tape.layer_norm(a, LN_EPS)?;
    let g = tape.mul(ln, gamma)?;
    tape.add(g, beta)
}

/// Gated residual around a sub-layer output: `tanh(1 - alpha) * f + skip`.
fn gated_residual(
    tape: &mut Tape,
    f_out: TensorId,
    skip: TensorId,
    alpha: TensorId,
) -> Result<TensorId> {
    let d = tape.shape(alpha)[1];
    let one = tape.constant(Tensor::full(&[1, d], 1.0));
    let gap = tape.sub(one, alpha)?;
    let gate = tape.tanh(gap)?;
    let gated = tape.mul(f_out, gate)?;
    tape.add(gated, skip)
}

/// One backbone block: modulated self-attention, additive fusion,
/// cross-attention with plain residual, modulated FFN. The gated residuals
/// skip from the modulated-normalized input, not the raw input.
pub fn dual_fusion_block(
    tape: &mut Tape,
    staged: &StagedParams,
    cfg: &ModelConfig,
    block: usize,
    a: TensorId,
    k_ctx: TensorId,
    f_ctx: Option<TensorId>,
    adaln: &BlockAdaln,
    rope: Option<&RopeTables>,
) -> Result<TensorId> {
    let sa_w = attn_weights(staged, &format!("blocks.{block}.sa"))?;
    let ca_w = attn_weights(staged, &format!("blocks.{block}.ca"))?;

    let a_norm = modulated_norm(tape, a, adaln.gamma_sa, adaln.beta_sa)?;
    let sa = multi_head_attention(tape, a_norm, a_norm, &sa_w, cfg.num_heads, rope)?;
    let mut a = gated_residual(tape, sa, a_norm, adaln.alpha_sa)?;

    if let Some(f) = f_ctx {
        require_rows(tape, f, tape.shape(a)[0], "additive stream")?;
        a = tape.add(a, f)?;
    }

    let ca = multi_head_attention(tape, a, k_ctx, &ca_w, cfg.num_heads, None)?;
    a = tape.add(ca, a)?;

    let a_norm2 = modulated_norm(tape, a, adaln.gamma_ffn, adaln.beta_ffn)?;
    let h0 = tape.matmul(a_norm2, staged.id(&format!("blocks.{block}.ffn.fc1"))?)?;
    let h1 = tape.add(h0, staged.id(&format!("blocks.{block}.ffn.b1"))?)?;
    let h = tape.gelu(h1)?;
    let f0 = tape.matmul(h, staged.id(&format!("blocks.{block}.ffn.fc2"))?)?;
    let ffn = tape.add(f0, staged.id(&format!("blocks.{block}.ffn.b2"))?)?;
    gated_residual(tape, ffn, a_norm2, adaln.alpha_ffn)
}

/// Velocity field `[T, latent] -> [T, latent]` at flow time `tau` under the
/// given conditioning and the config's fusion mode.
pub fn backbone_velocity(
    tape: &mut Tape,
    staged: &StagedParams,
    cfg: &ModelConfig,
    z_tau: TensorId,
    tau: f64,
    cond: &Condition,
) -> Result<TensorId> {
    let t_frames = tape.shape(z_tau)[0];
    if t_frames > cfg.max_frames {
        return Err(Error::Contract(format!(
            "{t_frames} frames exceed max_frames {}",
            cfg.max_frames
        )));
    }
    if tape.shape(z_tau)[1] != cfg.latent_dim {
        return Err(Error::Contract(format!(
            "latent width {} does not match config latent_dim {}",
            tape.shape(z_tau)[1],
            cfg.latent_dim
        )));
    }
    let t_emb = time_embedding(tape, staged, cfg, tau)?;
    let (k_ctx, f_ctx) = select_streams(tape, staged, cfg, cond, t_frames)?;

    let p0 = tape.matmul(z_tau, staged.id("in_proj.w")?)?;
    let mut a = tape.add(p0, staged.id("in_proj.b")?)?;
    if cfg.fusion_mode == FusionMode::InputOnly {
        if let Some(f) = f_ctx {
            a = tape.add(a, f)?;
        }
    }
    let rope = RopeTables::new(t_frames, cfg.head_dim());
    for b in 0..cfg.depth {
        let adaln = adaln_params(tape, staged, cfg, b, t_emb)?;
        let f_b = if cfg.fusion_mode == FusionMode::InputOnly { None } else { f_ctx };
        a = dual_fusion_block(tape, staged, cfg, b, a, k_ctx, f_b, &adaln, Some(&rope))?;
    }
    let o0 = tape.matmul(a, staged.id("out_proj.w")?)?;
    tape.add(o0, staged.id("out_proj.b")?)
}

// ── Tests ────────────────────────────────────────────────────────────────
