//! Forward graph of the hybrid decoder, built on a [`Tape`] so the same code
//! serves inference, importance capture and training.

use std::collections::{BTreeMap, BTreeSet};

use super::checkpoint::{AttnLayerParams, Checkpoint, FfnLayerParams, MambaLayerParams};
use super::config::{LayerKind, ModelConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Chunk length of the selective scan in the default forward path.
pub const DEFAULT_SCAN_CHUNK: usize = 16;

/// A `[batch, seq]` block of token ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch * seq != ids.len() || seq == 0 || batch == 0 {
            return Err(shape_err("TokenBatch", format!("{batch}×{seq} from {} ids", ids.len())));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(shape_err("TokenBatch", "rows of unequal length"));
        }
        Self::new(rows.len(), seq, rows.concat())
    }

    pub fn single(ids: &[usize]) -> Result<Self> {
        Self::new(1, ids.len(), ids.to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// Layers replaced by identity on the residual stream (norm and mixer skipped).
    pub skip_layers: BTreeSet<usize>,
    /// Overrides the RMS denominator of every `d_model`-wide norm; the
    /// embedding-channel masking oracle sets it to the number of kept channels.
    pub norm_channels: Option<usize>,
    /// `Some(len)` runs the chunked scan, `None` the sequential recurrence.
    pub scan_chunk: Option<usize>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            skip_layers: BTreeSet::new(),
            norm_channels: None,
            scan_chunk: Some(DEFAULT_SCAN_CHUNK),
        }
    }
}

impl ForwardOptions {
    pub fn skipping(layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            skip_layers: layers.into_iter().collect(),
            ..Self::default()
        }
    }
}

/// Checkpoint tensors placed on a tape.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn load<T: Scalar>(tape: &mut Tape<T>, ckpt: &Checkpoint<T>, trainable: bool) -> Self {
        let vars = ckpt
            .tensors()
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    /// Wraps tape nodes already created by the caller.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no parameter `{name}` on tape")))
    }

    fn layer(&self, i: usize, name: &str) -> Result<Var> {
        self.get(&format!("layers.{i}.{name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Handles to the nodes the importance estimators read.
pub struct ForwardGraph {
    pub logits: Var,
    /// `(layer, δ(X·W1ᵀ))` for every evaluated FFN layer.
    pub ffn_hidden: Vec<(usize, Var)>,
    /// Outputs of every evaluated `d_model`-wide norm, the final norm last.
    pub norm_outputs: Vec<Var>,
    /// `(layer, X·W_x)` for every evaluated Mamba layer.
    pub mamba_x: Vec<(usize, Var)>,
}

/// FFN block on tape: returns `(δ(X·W1ᵀ)·W2, δ(X·W1ᵀ))`.
pub fn ffn_block<T: Scalar>(tape: &mut Tape<T>, x: Var, w1: Var, w2: Var) -> Result<(Var, Var)> {
    let pre = tape.matmul_nt(x, w1)?;
    let hidden = tape.squared_relu(pre);
    Ok((tape.matmul(hidden, w2)?, hidden))
}

/// Attention weights on tape, in `[w_q, w_k, w_v, w_out]` order.
pub fn attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: [Var; 4],
    n_q_heads: usize,
    n_kv_heads: usize,
) -> Result<Var> {
    let q = tape.matmul(x, w[0])?;
    let k = tape.matmul(x, w[1])?;
    let v = tape.matmul(x, w[2])?;
    let heads = tape.gqa_attention(q, k, v, n_q_heads, n_kv_heads)?;
    tape.matmul(heads, w[3])
}

/// Mamba-2 weights on tape.
#[derive(Clone, Copy)]
pub struct MambaVars {
    pub w_x: Var,
    pub w_z: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_dt: Var,
    pub conv_x: Var,
    pub conv_b: Var,
    pub conv_c: Var,
    pub a_log: Var,
    pub d_skip: Var,
    pub gate_norm: Var,
    pub w_o: Var,
}

/// Mamba-2 mixer: projections → causal conv + SiLU on (x, B, C) → selective
/// scan → per-head gated RMSNorm with SiLU(z) → output projection.
/// Returns `(output, X·W_x)`.
pub fn mamba_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &MambaVars,
    groups: usize,
    eps: T,
    scan_chunk: Option<usize>,
) -> Result<(Var, Var)> {
    let xs = tape.matmul(x, p.w_x)?;
    let z = tape.matmul(x, p.w_z)?;
    let bs = tape.matmul(x, p.w_b)?;
    let cs = tape.matmul(x, p.w_c)?;
    let dt_raw = tape.matmul(x, p.w_dt)?;
    let dt = tape.softplus(dt_raw);

    let xc = tape.causal_conv1d(xs, p.conv_x)?;
    let xc = tape.silu(xc);
    let bc = tape.causal_conv1d(bs, p.conv_b)?;
    let bc = tape.silu(bc);
    let cc = tape.causal_conv1d(cs, p.conv_c)?;
    let cc = tape.silu(cc);

    let y = tape.selective_scan(xc, dt, p.a_log, bc, cc, p.d_skip, groups, scan_chunk)?;
    let gate = tape.silu(z);
    let gated = tape.mul(y, gate)?;
    let heads = tape.value(p.a_log).len();
    let head_dim = tape.value(gated).last_dim() / heads.max(1);
    let normed = tape.rmsnorm_grouped(gated, p.gate_norm, eps, head_dim, None)?;
    Ok((tape.matmul(normed, p.w_o)?, xs))
}

fn mamba_vars(params: &ParamVars, i: usize) -> Result<MambaVars> {
    Ok(MambaVars {
        w_x: params.layer(i, "w_x")?,
        w_z: params.layer(i, "w_z")?,
        w_b: params.layer(i, "w_b")?,
        w_c: params.layer(i, "w_c")?,
        w_dt: params.layer(i, "w_dt")?,
        conv_x: params.layer(i, "conv_x")?,
        conv_b: params.layer(i, "conv_b")?,
        conv_c: params.layer(i, "conv_c")?,
        a_log: params.layer(i, "a_log")?,
        d_skip: params.layer(i, "d_skip")?,
        gate_norm: params.layer(i, "gate_norm")?,
        w_o: params.layer(i, "w_o")?,
    })
}

/// Embedding → pre-norm residual stack → final norm → output head.
pub fn build_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    params: &ParamVars,
    tokens: &TokenBatch,
    opts: &ForwardOptions,
) -> Result<ForwardGraph> {
    let eps = T::of(cfg.norm_eps);
    let d = cfg.d_model;
    let embed = params.get("embed")?;
    let mut h = tape.gather(embed, &tokens.ids, &[tokens.batch, tokens.seq])?;
    let mut ffn_hidden = Vec::new();
    let mut norm_outputs = Vec::new();
    let mut mamba_x = Vec::new();

    for (i, &kind) in cfg.pattern.kinds().iter().enumerate() {
        if opts.skip_layers.contains(&i) {
            continue;
        }
        let normed = tape.rmsnorm_grouped(h, params.layer(i, "norm")?, eps, d, opts.norm_channels)?;
        norm_outputs.push(normed);
        let out = match kind {
            LayerKind::Ffn => {
                let (out, hidden) = ffn_block(tape, normed, params.layer(i, "w1")?, params.layer(i, "w2")?)?;
                ffn_hidden.push((i, hidden));
                out
            }
            LayerKind::Attention => {
                let w = [
                    params.layer(i, "w_q")?,
                    params.layer(i, "w_k")?,
                    params.layer(i, "w_v")?,
                    params.layer(i, "w_out")?,
                ];
                attention_block(tape, normed, w, cfg.n_q_heads, cfg.n_kv_heads)?
            }
            LayerKind::Mamba => {
                let vars = mamba_vars(params, i)?;
                let (out, xs) = mamba_block(tape, normed, &vars, cfg.mamba_groups, eps, opts.scan_chunk)?;
                mamba_x.push((i, xs));
                out
            }
        };
        h = tape.add(h, out)?;
    }

    if cfg.n_layers() > 0 {
        let normed = tape.rmsnorm_grouped(h, params.get("final_norm")?, eps, d, opts.norm_channels)?;
        norm_outputs.push(normed);
        h = normed;
    }
    let head = if cfg.tied_embeddings {
        embed
    } else {
        params.get("head")?
    };
    let logits = tape.matmul_nt(h, head)?;
    Ok(ForwardGraph {
        logits,
        ffn_hidden,
        norm_outputs,
        mamba_x,
    })
}

/// Logits `[batch, seq, vocab]` for a token batch.
pub fn model_forward<T: Scalar>(tokens: &TokenBatch, ckpt: &Checkpoint<T>) -> Result<Tensor<T>> {
    model_forward_with(tokens, ckpt, &ForwardOptions::default())
}

pub fn model_forward_with<T: Scalar>(
    tokens: &TokenBatch,
    ckpt: &Checkpoint<T>,
    opts: &ForwardOptions,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let params = ParamVars::load(&mut tape, ckpt, false);
    let g = build_forward(&mut tape, ckpt.config(), &params, tokens, opts)?;
    Ok(tape.value(g.logits).clone())
}

fn expect_3d<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<()> {
    if x.rank() != 3 {
        return Err(shape_err(op, format!("expected [batch, seq, d_model], got {:?}", x.shape())));
    }
    Ok(())
}

/// `δ(X·W1ᵀ)·W2` on a `[b, s, d_model]` input (no residual).
pub fn ffn_forward<T: Scalar>(x: &Tensor<T>, p: &FfnLayerParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (w1, w2) = (tape.constant(p.w1.clone()), tape.constant(p.w2.clone()));
    let (out, _) = ffn_block(&mut tape, xv, w1, w2)?;
    Ok(tape.value(out).clone())
}

/// Causal GQA mixer on a `[b, s, d_model]` input (no residual, no positions).
pub fn gqa_attention_forward<T: Scalar>(x: &Tensor<T>, p: &AttnLayerParams<T>) -> Result<Tensor<T>> {
    expect_3d(x, "gqa_attention_forward")?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = [
        tape.constant(p.w_q.clone()),
        tape.constant(p.w_k.clone()),
        tape.constant(p.w_v.clone()),
        tape.constant(p.w_out.clone()),
    ];
    let out = attention_block(&mut tape, xv, w, p.n_q_heads, p.n_kv_heads)?;
    Ok(tape.value(out).clone())
}

/// Mamba-2 mixer on a `[b, s, d_model]` input (no residual).
pub fn mamba2_forward<T: Scalar>(x: &Tensor<T>, p: &MambaLayerParams<T>) -> Result<Tensor<T>> {
    mamba2_forward_with(x, p, Some(DEFAULT_SCAN_CHUNK))
}

pub fn mamba2_forward_with<T: Scalar>(
    x: &Tensor<T>,
    p: &MambaLayerParams<T>,
    scan_chunk: Option<usize>,
) -> Result<Tensor<T>> {
    expect_3d(x, "mamba2_forward")?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut c = |t: &Tensor<T>| tape.constant(t.clone());
    let vars = MambaVars {
        w_x: c(&p.w_x),
        w_z: c(&p.w_z),
        w_b: c(&p.w_b),
        w_c: c(&p.w_c),
        w_dt: c(&p.w_dt),
        conv_x: c(&p.conv_x),
        conv_b: c(&p.conv_b),
        conv_c: c(&p.conv_c),
        a_log: c(&p.a_log),
        d_skip: c(&p.d_skip),
        gate_norm: c(&p.gate_norm),
        w_o: c(&p.w_o),
    };
    let (out, _) = mamba_block(&mut tape, xv, &vars, p.groups, T::of(p.eps), scan_chunk)?;
    Ok(tape.value(out).clone())
}
