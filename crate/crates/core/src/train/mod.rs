//! Training: warmup-stable-decay schedule, AdamW, next-token and logit
//! distillation loops, synthetic data and checkpoint interpolation.

pub mod adam;
pub mod corpus;
pub mod distill;
pub mod schedule;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use corpus::{synthetic_corpus, CorpusPair, DataStreams, TextCorpus};
pub use distill::{
    distill_run, eval_ce, eval_kd, kd_loss, log_to_jsonl, loss_and_grads, train_lm, train_run, LogRecord, Objective,
    TrainOutcome,
};
pub use schedule::{wsd_lr, Stage, TrainConfig, WsdSchedule};

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::scalar::Scalar;

/// `(1 − α)·a + α·b` for every tensor; `α = 0` and `α = 1` return the inputs
/// exactly.
pub fn merge_checkpoints<T: Scalar>(a: &Checkpoint<T>, b: &Checkpoint<T>, alpha: f64) -> Result<Checkpoint<T>> {
    if a.config() != b.config() {
        return Err(Error::Config("cannot merge checkpoints with different configs".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("merge alpha {alpha} outside [0, 1]")));
    }
    let (wa, wb) = (T::of(1.0 - alpha), T::of(alpha));
    let tensors = a
        .tensors()
        .iter()
        .map(|(name, ta)| {
            let tb = b.get(name)?;
            Ok((name.clone(), ta.zip_map(tb, |x, y| wa * x + wb * y)?))
        })
        .collect::<Result<_>>()?;
    Checkpoint::new(a.config().clone(), tensors)
}
