//! Shared oracles for the integration suites. Nothing here calls into the
//! backward pass it checks.
#![allow(dead_code)]

pub mod budget_oracle;
pub mod fp8_oracle;
pub mod gradcheck;
pub mod oracles;

use nanolab::autodiff::{Tape, Var};
use nanolab::model::{Checkpoint, LayerPattern, ModelConfig, TokenBatch};
use nanolab::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, tiny).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Builds `f` on a fresh tape from `inputs` and reduces the output to a scalar
/// with a fixed random projection (`Σ out ⊙ R`) unless it already is one.
fn scalar_loss(
    inputs: &[Tensor<f64>],
    projection: &mut Option<Tensor<f64>>,
    seed: u64,
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("graph builds");
    if tape.value(out).len() == 1 {
        return (tape, vars, out);
    }
    let shape = tape.value(out).shape().to_vec();
    let r = projection
        .get_or_insert_with(|| Tensor::uniform(&shape, -1.0, 1.0, &mut rng(seed ^ 0x5eed)))
        .clone();
    let rv = tape.constant(r);
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod);
    (tape, vars, loss)
}

/// Central finite differences (step `h`) against the tape gradient for every
/// element of every input. Returns the worst relative error over inputs.
pub fn fd_check(
    inputs: &[Tensor<f64>],
    seed: u64,
    h: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let mut proj = None;
    let (tape, vars, loss) = scalar_loss(inputs, &mut proj, seed, &f);
    let analytic = tape.grad(loss, &vars).unwrap();
    let eval = |xs: &[Tensor<f64>], proj: &mut Option<Tensor<f64>>| {
        let (t, _, l) = scalar_loss(xs, proj, seed, &f);
        t.value(l).item().unwrap()
    };
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; x.len()];
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + h;
            let up = eval(&xs, &mut proj);
            xs[i].data_mut()[j] = x.data()[j] - h;
            let down = eval(&xs, &mut proj);
            numeric[j] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err(analytic[i].data(), &numeric));
    }
    worst
}

/// Tiny hybrid config: `n_layers` with `n_attn` attention layers, width `d`.
pub fn toy_config(n_layers: usize, n_attn: usize, d: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        pattern: LayerPattern::build(n_layers, n_attn).unwrap(),
        d_model: d,
        d_ffn: 2 * d,
        n_q_heads: 4,
        n_kv_heads: 2,
        attn_head_dim: 4,
        mamba_heads: 4,
        mamba_head_dim: 4,
        mamba_groups: 2,
        mamba_state_dim: 3,
        conv_window: 3,
        vocab_size: vocab,
        tied_embeddings: false,
        norm_eps: 1e-5,
    }
}

pub fn random_ckpt(cfg: ModelConfig, seed: u64) -> Checkpoint<f64> {
    Checkpoint::random(cfg, 0.5, &mut rng(seed)).unwrap()
}

pub fn random_tokens(batch: usize, seq: usize, vocab: usize, seed: u64) -> TokenBatch {
    let mut r = rng(seed);
    TokenBatch::new(batch, seq, (0..batch * seq).map(|_| r.gen_range(0..vocab)).collect()).unwrap()
}

/// Every file in `dir` with its bytes, sorted by name.
pub fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}
