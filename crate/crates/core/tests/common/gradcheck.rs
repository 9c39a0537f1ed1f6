//! Finite-difference checks for every differentiable tape op, each over five
//! random shapes (64-bit, central differences with h = 1e-4).
#![allow(dead_code)]

use nanolab::autodiff::Tape;
use nanolab::model::{build_forward, Checkpoint, ForwardOptions, ParamVars};
use nanolab::Tensor;
use rand::Rng;

use super::{fd_check, random_tokens, rng, toy_config};

pub const FD_STEP: f64 = 1e-4;
pub const SHAPES_PER_OP: u64 = 5;

fn u(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Values bounded away from zero (for ops with a kink at the origin).
fn away_from_zero(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    let t = Tensor::<f64>::uniform(shape, 0.1, 1.0, r);
    t.map(|v| if r_sign(v) { v } else { -v })
}

fn r_sign(v: f64) -> bool {
    // deterministic pseudo-sign from the mantissa
    (v.to_bits() >> 20) & 1 == 0
}

type Check = fn(u64) -> f64;

pub fn all_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("matmul", matmul),
        ("matmul_nt", matmul_nt),
        ("add", add),
        ("mul", mul),
        ("scale_sum_reshape", scale_sum_reshape),
        ("squared_relu", squared_relu),
        ("silu", silu),
        ("softplus", softplus),
        ("rmsnorm", rmsnorm),
        ("gather", gather),
        ("causal_softmax", causal_softmax),
        ("gqa_attention", gqa_attention),
        ("causal_conv1d", causal_conv1d),
        ("selective_scan", selective_scan),
        ("cross_entropy", cross_entropy),
        ("forward_kl", forward_kl),
        ("model_forward", model_forward),
    ]
}

/// Worst relative error of one op over [`SHAPES_PER_OP`] random shapes.
pub fn worst_over_shapes(check: Check) -> f64 {
    (0..SHAPES_PER_OP).map(check).fold(0.0, f64::max)
}

fn dims(seed: u64) -> (rand_chacha::ChaCha8Rng, [usize; 4]) {
    let mut r = rng(seed * 7919 + 1);
    let d = [r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5)];
    (r, d)
}

pub fn matmul(seed: u64) -> f64 {
    let (mut r, [b, m, k, n]) = dims(seed);
    let inputs = [u(&[b, m, k], &mut r), u(&[k, n], &mut r)];
    fd_check(&inputs, seed, FD_STEP, |t, v| t.matmul(v[0], v[1]))
}

pub fn matmul_nt(seed: u64) -> f64 {
    let (mut r, [b, m, k, n]) = dims(seed);
    let inputs = [u(&[b, m, k], &mut r), u(&[n, k], &mut r)];
    fd_check(&inputs, seed, FD_STEP, |t, v| t.matmul_nt(v[0], v[1]))
}

pub fn add(seed: u64) -> f64 {
    let (mut r, [b, m, k, _]) = dims(seed);
    let inputs = [u(&[b, m, k], &mut r), u(&[b, m, k], &mut r)];
    fd_check(&inputs, seed, FD_STEP, |t, v| t.add(v[0], v[1]))
}

pub fn mul(seed: u64) -> f64 {
    let (mut r, [b, m, k, _]) = dims(seed);
    let inputs = [u(&[b, m, k], &mut r), u(&[b, m, k], &mut r)];
    fd_check(&inputs, seed, FD_STEP, |t, v| {
        // reuse an input twice to exercise gradient accumulation
        let p = t.mul(v[0], v[1])?;
        t.mul(p, v[0])
    })
}

pub fn scale_sum_reshape(seed: u64) -> f64 {
    let (mut r, [b, m, k, _]) = dims(seed);
    let inputs = [u(&[b, m, k], &mut r)];
    fd_check(&inputs, seed, FD_STEP, |t, v| {
        let s = t.scale(v[0], -1.7);
        let s = t.reshape(s, &[b * m * k])?;
        let sq = t.mul(s, s)?;
        Ok(t.sum(sq))
    })
}

pub fn squared_relu(seed: u64) -> f64 {
    let (mut r, [b, m, k, _]) = dims(seed);
    let inputs = [away_from_zero(&[b, m, k], &mut r)];
    fd_check(&inputs, seed, FD_STEP, |t, v| Ok(t.squared_relu(v[0])))
}

pub fn silu(seed: u64) -> f64 {
    let (mut r, [b, m, k, _]) = dims(seed);
    let inputs = [u(&[b, m, k], &mut r).scale(3.0)];
    fd_check(&inputs, seed, FD_STEP, |t, v| Ok(t.silu(v[0])))
}

pub fn softplus(seed: u64) -> f64 {
    let (mut r, [b, m, k, _]) = dims(seed);
    let inputs = [u(&[b, m, k], &mut r).scale(3.0)];
    fd_check(&inputs, seed, FD_STEP, |t, v| Ok(t.softplus(v[0])))
}

pub fn rmsnorm(seed: u64) -> f64 {
    let (mut r, [b, m, g, groups]) = dims(seed);
    let d = g * groups;
    let inputs = [u(&[b, m, d], &mut r), u(&[d], &mut r)];
    let denom = if seed.is_multiple_of(2) { None } else { Some(g + 1) };
    fd_check(&inputs, seed, FD_STEP, move |t, v| t.rmsnorm_grouped(v[0], v[1], 1e-5, g, denom))
}

pub fn gather(seed: u64) -> f64 {
    let (mut r, [b, s, vocab, d]) = dims(seed);
    let ids: Vec<usize> = (0..b * s).map(|_| r.gen_range(0..vocab)).collect();
    let inputs = [u(&[vocab, d], &mut r)];
    fd_check(&inputs, seed, FD_STEP, move |t, v| t.gather(v[0], &ids, &[b, s]))
}

pub fn causal_softmax(seed: u64) -> f64 {
    let (mut r, [b, s, _, _]) = dims(seed);
    let inputs = [u(&[b, s, s], &mut r).scale(2.0)];
    fd_check(&inputs, seed, FD_STEP, |t, v| t.causal_softmax(v[0]))
}

pub fn gqa_attention(seed: u64) -> f64 {
    let (mut r, [b, s, kv, hd]) = dims(seed);
    let nq = kv * (1 + (seed as usize % 2));
    let inputs = [
        u(&[b, s, nq * hd], &mut r),
        u(&[b, s, kv * hd], &mut r),
        u(&[b, s, kv * hd], &mut r),
    ];
    fd_check(&inputs, seed, FD_STEP, move |t, v| t.gqa_attention(v[0], v[1], v[2], nq, kv))
}

pub fn causal_conv1d(seed: u64) -> f64 {
    let (mut r, [b, s, c, w]) = dims(seed);
    let inputs = [u(&[b, s + 1, c], &mut r), u(&[c, w], &mut r)];
    fd_check(&inputs, seed, FD_STEP, |t, v| t.causal_conv1d(v[0], v[1]))
}

pub fn selective_scan(seed: u64) -> f64 {
    let (mut r, [b, s, p, n]) = dims(seed);
    let groups = 1 + seed as usize % 2;
    let heads = 2 * groups;
    let s = s + 2;
    let inputs = [
        u(&[b, s, heads * p], &mut r),
        Tensor::uniform(&[b, s, heads], 0.05, 1.0, &mut r),
        u(&[heads], &mut r),
        u(&[b, s, groups * n], &mut r),
        u(&[b, s, groups * n], &mut r),
        u(&[heads], &mut r),
    ];
    let chunk = if seed.is_multiple_of(2) { Some(2) } else { None };
    fd_check(&inputs, seed, FD_STEP, move |t, v| {
        t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], groups, chunk)
    })
}

pub fn cross_entropy(seed: u64) -> f64 {
    let (mut r, [b, s, vocab, _]) = dims(seed);
    let vocab = vocab + 1;
    let targets: Vec<usize> = (0..b * s).map(|_| r.gen_range(0..vocab)).collect();
    let inputs = [u(&[b, s, vocab], &mut r).scale(2.0)];
    fd_check(&inputs, seed, FD_STEP, move |t, v| t.cross_entropy(v[0], &targets))
}

pub fn forward_kl(seed: u64) -> f64 {
    let (mut r, [b, s, vocab, _]) = dims(seed);
    let vocab = vocab + 1;
    let teacher = u(&[b, s, vocab], &mut r).scale(2.0);
    let inputs = [u(&[b, s, vocab], &mut r).scale(2.0)];
    fd_check(&inputs, seed, FD_STEP, move |t, v| t.forward_kl(v[0], &teacher))
}

/// Whole-model gradient with respect to every checkpoint tensor.
pub fn model_forward(seed: u64) -> f64 {
    let n_layers = 3 + seed as usize % 2;
    let mut cfg = toy_config(n_layers, 1, 4, 5);
    cfg.d_ffn = 3;
    cfg.n_q_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.attn_head_dim = 2;
    cfg.mamba_heads = 2;
    cfg.mamba_head_dim = 2;
    cfg.mamba_groups = 1;
    cfg.mamba_state_dim = 2;
    cfg.conv_window = 2;
    let ckpt = Checkpoint::<f64>::random(cfg.clone(), 0.7, &mut rng(seed)).unwrap();
    let names: Vec<String> = ckpt.tensors().keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = ckpt.tensors().values().cloned().collect();
    let tokens = random_tokens(2, 3, cfg.vocab_size, seed);
    let targets: Vec<usize> = tokens.ids.iter().map(|&i| (i + 1) % cfg.vocab_size).collect();
    let opts = ForwardOptions {
        scan_chunk: Some(2),
        ..ForwardOptions::default()
    };
    fd_check(&inputs, seed, FD_STEP, move |t: &mut Tape<f64>, v| {
        let params = ParamVars::from_pairs(names.iter().cloned().zip(v.iter().copied()));
        let g = build_forward(t, &cfg, &params, &tokens, &opts)?;
        t.cross_entropy(g.logits, &targets)
    })
}
