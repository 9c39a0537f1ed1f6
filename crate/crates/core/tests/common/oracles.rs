//! Masking and brute-force oracles for pruning and importance.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use nanolab::importance::CalibrationSet;
use nanolab::kernels::{self, ScanDims, ScanInputs};
use nanolab::model::{model_forward_with, Checkpoint, ForwardOptions, LayerKind, TokenBatch};
use nanolab::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use super::rng;

fn complement(n: usize, keep: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| !keep.contains(i)).collect()
}

fn zero_along(t: &Tensor<f64>, axis: usize, drop: &[usize]) -> Tensor<f64> {
    let keep: Vec<usize> = complement(t.shape()[axis], drop);
    t.zero_outside(axis, &keep).unwrap()
}

fn edit(ckpt: &mut Checkpoint<f64>, name: &str, f: impl Fn(&Tensor<f64>) -> Tensor<f64>) {
    let t = f(ckpt.get(name).unwrap());
    ckpt.set(name, t).unwrap();
}

/// Dropped neurons get zero `W1` rows, so their squared-ReLU output is zero.
pub fn mask_ffn(ckpt: &Checkpoint<f64>, keep: &BTreeMap<usize, Vec<usize>>) -> Checkpoint<f64> {
    let mut out = ckpt.clone();
    for (l, k) in keep {
        edit(&mut out, &format!("layers.{l}.w1"), |t| t.zero_outside(0, k).unwrap());
    }
    out
}

/// Dropped channels are zeroed in the embedding, every norm gain and every
/// residual-writing projection, so they stay zero along the whole residual
/// stream. The forward must then use the kept count as the RMS denominator.
pub fn mask_embedding(ckpt: &Checkpoint<f64>, keep: &[usize]) -> Checkpoint<f64> {
    let d = ckpt.config().d_model;
    let drop = complement(d, keep);
    let mut out = ckpt.clone();
    let names: Vec<String> = ckpt.tensors().keys().cloned().collect();
    for name in names {
        let leaf = name.rsplit('.').next().unwrap().to_string();
        match leaf.as_str() {
            "embed" => edit(&mut out, &name, |t| zero_along(t, 1, &drop)),
            "norm" | "final_norm" => edit(&mut out, &name, |t| zero_along(t, 0, &drop)),
            "w_o" | "w_out" | "w2" => edit(&mut out, &name, |t| zero_along(t, 1, &drop)),
            _ => {}
        }
    }
    out
}

pub fn masked_embedding_options(keep: &[usize]) -> ForwardOptions {
    ForwardOptions {
        norm_channels: Some(keep.len()),
        ..ForwardOptions::default()
    }
}

/// Dropped heads get zero `W_O` rows; the per-head gated norm keeps the other
/// heads' outputs untouched.
pub fn mask_mamba_heads(ckpt: &Checkpoint<f64>, keep: &BTreeMap<usize, Vec<Vec<usize>>>) -> Checkpoint<f64> {
    let p = ckpt.config().mamba_head_dim;
    let mut out = ckpt.clone();
    for (l, groups) in keep {
        let channels: Vec<usize> = groups.concat().iter().flat_map(|&h| h * p..(h + 1) * p).collect();
        edit(&mut out, &format!("layers.{l}.w_o"), |t| t.zero_outside(0, &channels).unwrap());
    }
    out
}

/// Random sorted keep set of size `k` out of `n`.
pub fn random_keep(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(seed));
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    keep
}

/// Random per-group head keep sets with `per_group` heads in each group.
pub fn random_head_keep(heads: usize, groups: usize, per_group: usize, seed: u64) -> Vec<Vec<usize>> {
    let hpg = heads / groups;
    (0..groups)
        .map(|g| {
            random_keep(hpg, per_group, seed * 31 + g as u64)
                .into_iter()
                .map(|h| g * hpg + h)
                .collect()
        })
        .collect()
}

pub fn random_calibration(n: usize, seq: usize, vocab: usize, seed: u64) -> CalibrationSet {
    let mut r = rng(seed);
    let seqs = (0..n).map(|_| (0..seq).map(|_| r.gen_range(0..vocab)).collect()).collect();
    CalibrationSet::new(seed, seqs).unwrap()
}

/// All calibration sequences as one batch.
pub fn whole_batch(calib: &CalibrationSet) -> TokenBatch {
    TokenBatch::from_rows(&calib.sequences).unwrap()
}

/// Mean squared logit difference between the full model and the model with
/// `skip` bypassed, from two independent forward passes.
pub fn two_pass_mse(ckpt: &Checkpoint<f64>, calib: &CalibrationSet, skip: &BTreeSet<usize>) -> f64 {
    let tokens = whole_batch(calib);
    let full = model_forward_with(&tokens, ckpt, &ForwardOptions::default()).unwrap();
    let cut = model_forward_with(&tokens, ckpt, &ForwardOptions::skipping(skip.iter().copied())).unwrap();
    let mut sum = 0.0;
    for (a, b) in full.data().iter().zip(cut.data()) {
        sum += (a - b) * (a - b);
    }
    sum / full.len() as f64
}

/// Greedy removal by exhaustively scoring every single-layer removal at each
/// step with [`two_pass_mse`].
pub fn brute_force_removal(ckpt: &Checkpoint<f64>, calib: &CalibrationSet, target: usize) -> Vec<(usize, f64)> {
    let n = ckpt.config().n_layers();
    let mut removed = BTreeSet::new();
    let mut order = Vec::new();
    while n - removed.len() > target {
        let scored: Vec<(usize, f64)> = (0..n)
            .filter(|i| !removed.contains(i))
            .map(|i| {
                let mut s = removed.clone();
                s.insert(i);
                (i, two_pass_mse(ckpt, calib, &s))
            })
            .collect();
        let min = scored.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        let pick = *scored.iter().find(|x| x.1 == min).unwrap();
        removed.insert(pick.0);
        order.push(pick);
    }
    order
}

pub fn kinds_of(ckpt: &Checkpoint<f64>) -> Vec<LayerKind> {
    ckpt.config().pattern.kinds().to_vec()
}

/// Plain RMSNorm of one row.
pub fn ref_rmsnorm(x: &[f64], gamma: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gamma).map(|(v, g)| v * inv * g).collect()
}

/// Hybrid toy used by the equivalence checks: six layers (one attention), width 8.
pub fn equivalence_model(seed: u64) -> Checkpoint<f64> {
    let cfg = super::toy_config(6, 1, 8, 11);
    super::random_ckpt(cfg, seed)
}

fn max_gap(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b).unwrap()
}

/// Drops a random quarter of every FFN layer's neurons; returns the largest
/// logit gap between the pruned and the masked model.
pub fn ffn_prune_gap(seed: u64) -> f64 {
    let ckpt = equivalence_model(seed);
    let cfg = ckpt.config().clone();
    let keep: BTreeMap<usize, Vec<usize>> = cfg
        .pattern
        .positions(LayerKind::Ffn)
        .into_iter()
        .map(|l| (l, random_keep(cfg.d_ffn, cfg.d_ffn * 3 / 4, seed + l as u64)))
        .collect();
    let pruned = nanolab::pruner::prune_ffn(&ckpt, &keep).unwrap();
    let tokens = super::random_tokens(2, 7, cfg.vocab_size, seed);
    let a = model_forward_with(&tokens, &pruned, &ForwardOptions::default()).unwrap();
    let b = model_forward_with(&tokens, &mask_ffn(&ckpt, &keep), &ForwardOptions::default()).unwrap();
    max_gap(&a, &b)
}

pub fn embedding_prune_gap(seed: u64) -> f64 {
    let ckpt = equivalence_model(seed);
    let cfg = ckpt.config().clone();
    let keep = random_keep(cfg.d_model, 5, seed);
    let pruned = nanolab::pruner::prune_embedding(&ckpt, &keep).unwrap();
    let tokens = super::random_tokens(2, 7, cfg.vocab_size, seed);
    let a = model_forward_with(&tokens, &pruned, &ForwardOptions::default()).unwrap();
    let b = model_forward_with(&tokens, &mask_embedding(&ckpt, &keep), &masked_embedding_options(&keep)).unwrap();
    max_gap(&a, &b)
}

pub fn mamba_prune_gap(seed: u64) -> f64 {
    let ckpt = equivalence_model(seed);
    let cfg = ckpt.config().clone();
    let keep: BTreeMap<usize, Vec<Vec<usize>>> = cfg
        .pattern
        .positions(LayerKind::Mamba)
        .into_iter()
        .map(|l| (l, random_head_keep(cfg.mamba_heads, cfg.mamba_groups, 1, seed + l as u64)))
        .collect();
    let pruned = nanolab::pruner::prune_mamba_heads(&ckpt, &keep).unwrap();
    let tokens = super::random_tokens(2, 7, cfg.vocab_size, seed);
    let a = model_forward_with(&tokens, &pruned, &ForwardOptions::default()).unwrap();
    let b = model_forward_with(&tokens, &mask_mamba_heads(&ckpt, &keep), &ForwardOptions::default()).unwrap();
    max_gap(&a, &b)
}

/// Compares the library's iterative removal with the exhaustive oracle on a
/// random 4-layer toy. Returns whether orders and MSE values agree exactly.
pub fn layer_order_matches_brute_force(seed: u64) -> bool {
    let cfg = super::toy_config(4, 1, 8, 11);
    let ckpt = super::random_ckpt(cfg, seed);
    let calib = random_calibration(5, 6, 11, seed);
    let lib = nanolab::importance::layer_importance_iterative(&ckpt, &calib, 1).unwrap();
    lib == brute_force_removal(&ckpt, &calib, 1)
}

/// Largest gap between the chunked scan (chunks 1, 3, 4, 16, 64) and the
/// step-by-step recurrence on random inputs.
pub fn scan_chunk_gap(seed: u64) -> f64 {
    let mut r = rng(100 + seed);
    let dims = ScanDims {
        batch: 2,
        seq: 5 + 7 * (seed % 6) as usize,
        heads: 4,
        head_dim: 3,
        groups: 2,
        state: 4,
    };
    let (b, s, h, p, g, n) = (dims.batch, dims.seq, dims.heads, dims.head_dim, dims.groups, dims.state);
    let t = |shape: &[usize], lo, hi, r: &mut _| Tensor::<f64>::uniform(shape, lo, hi, r).into_data();
    let x = t(&[b, s, h * p], -1.0, 1.0, &mut r);
    let dt = t(&[b, s, h], 0.01, 1.5, &mut r);
    let a_log = t(&[h], -1.0, 1.5, &mut r);
    let bm = t(&[b, s, g * n], -1.0, 1.0, &mut r);
    let cm = t(&[b, s, g * n], -1.0, 1.0, &mut r);
    let d = t(&[h], -1.0, 1.0, &mut r);
    let inp = || ScanInputs {
        x: &x,
        dt: &dt,
        a_log: &a_log,
        b: &bm,
        c: &cm,
        d: &d,
    };
    let seq = kernels::selective_scan_sequential(inp(), dims);
    [1, 3, 4, 16, 64]
        .into_iter()
        .map(|chunk| {
            let ch = kernels::selective_scan_chunked(inp(), dims, chunk);
            seq.iter().zip(&ch).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}
