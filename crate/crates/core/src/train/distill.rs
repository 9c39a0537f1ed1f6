use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::corpus::DataStreams;
use super::schedule::TrainConfig;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{build_forward, model_forward, Checkpoint, ForwardOptions, ParamVars, TokenBatch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean over positions of `KL(softmax(teacher) ‖ softmax(student))`.
pub fn kd_loss<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<f64> {
    student.expect_same_shape(teacher, "kd_loss")?;
    if student.is_empty() {
        return Err(crate::error::shape_err("kd_loss", "empty logits"));
    }
    Ok(kernels::forward_kl(student.data(), teacher.data(), student.last_dim()).0.as_f64())
}

#[derive(Clone, Copy, Debug)]
pub enum Objective<'a, T> {
    /// Next-token cross-entropy on the data.
    NextToken,
    /// Forward KL against a frozen teacher's logits.
    Distill(&'a Checkpoint<T>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Tokens consumed up to and including this step.
    pub tokens: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn log_to_jsonl(log: &[LogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub struct TrainOutcome<T> {
    pub model: Checkpoint<T>,
    pub log: Vec<LogRecord>,
}

/// Loss and gradients of `objective` on one batch.
pub fn loss_and_grads<T: Scalar>(
    model: &Checkpoint<T>,
    objective: Objective<'_, T>,
    inputs: &TokenBatch,
    targets: &[usize],
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let teacher_logits = match objective {
        Objective::Distill(t) => Some(model_forward(inputs, t)?),
        Objective::NextToken => None,
    };
    let mut tape = Tape::new();
    let params = ParamVars::load(&mut tape, model, true);
    let g = build_forward(&mut tape, model.config(), &params, inputs, &ForwardOptions::default())?;
    let loss = match &teacher_logits {
        Some(t) => tape.forward_kl(g.logits, t)?,
        None => tape.cross_entropy(g.logits, targets)?,
    };
    let value = tape.value(loss).item()?.as_f64();
    let mut grads = tape.backward(loss)?;
    let grads = params.iter().map(|(name, &v)| (name.clone(), grads.take(v))).collect();
    Ok((value, grads))
}

fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) {
    let sq: f64 = grads.values().flat_map(|g| g.data()).map(|&x| x.as_f64() * x.as_f64()).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let c = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
}

/// Runs every stage of `cfg` on `model`. Update `i` (0-based) uses the
/// schedule's rate at step `i + 1`, so the last update runs at `lr_min`.
pub fn train_run<T: Scalar>(
    model: Checkpoint<T>,
    objective: Objective<'_, T>,
    data: &DataStreams<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if let Objective::Distill(t) = objective {
        if t.config().vocab_size != model.config().vocab_size {
            return Err(Error::Config(format!(
                "teacher vocab {} differs from student vocab {}",
                t.config().vocab_size,
                model.config().vocab_size
            )));
        }
    }
    let schedule = cfg.schedule();
    let adam = AdamConfig {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::new();
    let mut current = model;
    let mut log = Vec::with_capacity(cfg.total_steps());
    let mut step = 0;
    let mut tokens = 0u64;
    for stage in &cfg.stages {
        let rows = cfg.rows_per_step(stage);
        for _ in 0..cfg.stage_steps(stage) {
            let (inputs, targets) = data.sample(rows, stage.seq_len, cfg.mix_fraction, &mut rng)?;
            let (loss, mut grads) = loss_and_grads(&current, objective, &inputs, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let lr = schedule.lr(step + 1);
            adam_step(current.tensors_mut(), &grads, &mut state, lr, &adam)?;
            if current.tensors().values().any(|t| !t.all_finite()) {
                return Err(Error::Diverged { step, loss: f64::NAN });
            }
            tokens += (rows * stage.seq_len) as u64;
            log.push(LogRecord { step, tokens, lr, loss });
            step += 1;
        }
    }
    Ok(TrainOutcome { model: current, log })
}

/// Knowledge distillation of `student` from a frozen `teacher`.
pub fn distill_run<T: Scalar>(
    teacher: &Checkpoint<T>,
    student: Checkpoint<T>,
    data: &DataStreams<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    train_run(student, Objective::Distill(teacher), data, cfg, seed)
}

/// Plain language-model training.
pub fn train_lm<T: Scalar>(
    model: Checkpoint<T>,
    data: &DataStreams<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    train_run(model, Objective::NextToken, data, cfg, seed)
}

/// Consecutive `seq_len + 1` windows of `tokens`, at most `max_windows`.
fn eval_windows(tokens: &[usize], seq_len: usize, max_windows: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if seq_len == 0 || tokens.len() < seq_len + 1 {
        return Err(Error::Invalid(format!("{} eval tokens cannot fill a window of {}", tokens.len(), seq_len + 1)));
    }
    Ok((0..)
        .map(|w| w * seq_len)
        .take_while(|&s| s + seq_len < tokens.len())
        .take(max_windows)
        .map(|s| (tokens[s..s + seq_len].to_vec(), tokens[s + 1..s + seq_len + 1].to_vec()))
        .collect())
}

const EVAL_ROWS: usize = 16;

/// Mean next-token cross-entropy over held-out windows.
pub fn eval_ce<T: Scalar>(model: &Checkpoint<T>, tokens: &[usize], seq_len: usize, max_windows: usize) -> Result<f64> {
    let windows = eval_windows(tokens, seq_len, max_windows)?;
    let mut total = 0.0;
    for chunk in windows.chunks(EVAL_ROWS) {
        let rows: Vec<Vec<usize>> = chunk.iter().map(|(x, _)| x.clone()).collect();
        let targets: Vec<usize> = chunk.iter().flat_map(|(_, y)| y.iter().copied()).collect();
        let logits = model_forward(&TokenBatch::from_rows(&rows)?, model)?;
        let (loss, _) = kernels::cross_entropy(logits.data(), &targets, logits.last_dim());
        total += loss.as_f64() * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Mean forward KL to `teacher` over held-out windows.
pub fn eval_kd<T: Scalar>(
    student: &Checkpoint<T>,
    teacher: &Checkpoint<T>,
    tokens: &[usize],
    seq_len: usize,
    max_windows: usize,
) -> Result<f64> {
    let windows = eval_windows(tokens, seq_len, max_windows)?;
    let mut total = 0.0;
    for chunk in windows.chunks(EVAL_ROWS) {
        let rows: Vec<Vec<usize>> = chunk.iter().map(|(x, _)| x.clone()).collect();
        let batch = TokenBatch::from_rows(&rows)?;
        total += kd_loss(&model_forward(&batch, student)?, &model_forward(&batch, teacher)?)? * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}
