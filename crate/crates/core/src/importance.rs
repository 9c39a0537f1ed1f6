//! Forward-only importance estimation over a calibration set: iterative layer
//! removal by logit MSE, FFN neurons, embedding channels and Mamba heads.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{build_forward, model_forward_with, Checkpoint, ForwardOptions, LayerKind, ParamVars, TokenBatch};
use crate::scalar::Scalar;

/// Sequences scored per forward pass.
const CALIB_BATCH: usize = 8;

/// Fixed-length token sequences used for scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub seed: u64,
    pub seq_len: usize,
    pub sequences: Vec<Vec<usize>>,
}

impl CalibrationSet {
    pub fn new(seed: u64, sequences: Vec<Vec<usize>>) -> Result<Self> {
        let seq_len = sequences.first().map_or(0, Vec::len);
        if sequences.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        if seq_len == 0 || sequences.iter().any(|s| s.len() != seq_len) {
            return Err(Error::Invalid("calibration sequences must share a positive length".into()));
        }
        Ok(Self {
            seed,
            seq_len,
            sequences,
        })
    }

    /// `n` windows of `seq_len` tokens drawn from `corpus` at seeded offsets.
    pub fn sample(corpus: &[usize], n: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if corpus.len() < seq_len || seq_len == 0 {
            return Err(Error::Invalid(format!(
                "corpus of {} tokens cannot supply windows of {seq_len}",
                corpus.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = corpus.len() - seq_len + 1;
        let sequences = (0..n)
            .map(|_| {
                let start = rng.gen_range(0..span);
                corpus[start..start + seq_len].to_vec()
            })
            .collect();
        Self::new(seed, sequences)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn batches(&self) -> Vec<TokenBatch> {
        self.sequences
            .chunks(CALIB_BATCH)
            .map(|rows| TokenBatch::from_rows(rows).expect("validated on construction"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// `(1/n)·Σ|a|`
    Mean,
    /// `sqrt(Σ a²)`
    #[default]
    L2,
}

impl Aggregation {
    fn add(self, acc: &mut f64, v: f64) {
        match self {
            Self::Mean => *acc += v.abs(),
            Self::L2 => *acc += v * v,
        }
    }

    fn finish(self, acc: f64, n: usize) -> f64 {
        match self {
            Self::Mean => acc / n.max(1) as f64,
            Self::L2 => acc.sqrt(),
        }
    }
}

/// Scores of one Mamba layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaHeadScores {
    /// `f_h`: l2 over the head's aggregated channel block.
    pub head_scores: Vec<f64>,
    /// `s_d`: l2 over heads of the aggregated activations, per head channel.
    pub channel_scores: Vec<f64>,
    /// Per group, global head indices sorted from least to most important.
    pub rankings: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub aggregation: Aggregation,
    /// `(original layer index, mse)` in removal order.
    pub layer_removal_order: Vec<(usize, f64)>,
    /// FFN layer index → score per hidden neuron.
    pub ffn_scores: BTreeMap<usize, Vec<f64>>,
    pub channel_scores: Vec<f64>,
    /// Mamba layer index → head scores and group rankings.
    pub mamba_head_scores: BTreeMap<usize, MambaHeadScores>,
}

impl ImportanceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn width_scores(&self) -> WidthScores {
        WidthScores {
            ffn: self.ffn_scores.clone(),
            channels: self.channel_scores.clone(),
            mamba: self.mamba_head_scores.clone(),
        }
    }
}

fn logits_per_batch<T: Scalar>(
    ckpt: &Checkpoint<T>,
    batches: &[TokenBatch],
    opts: &ForwardOptions,
) -> Result<Vec<Vec<f64>>> {
    batches
        .par_iter()
        .map(|b| {
            let logits = model_forward_with(b, ckpt, opts)?;
            Ok(logits.data().iter().map(|v| v.as_f64()).collect())
        })
        .collect()
}

/// Mean over every logit of the squared difference, accumulated in one running
/// sum in batch-major, row-major order.
fn mse(reference: &[Vec<f64>], other: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in reference.iter().zip(other) {
        for (x, y) in a.iter().zip(b) {
            sum += (x - y) * (x - y);
        }
        n += a.len();
    }
    sum / n.max(1) as f64
}

/// MSE between full-model logits and logits with `skip` layers bypassed.
pub fn layer_removal_mse<T: Scalar>(ckpt: &Checkpoint<T>, calib: &CalibrationSet, skip: &BTreeSet<usize>) -> Result<f64> {
    let batches = calib.batches();
    let full = logits_per_batch(ckpt, &batches, &ForwardOptions::default())?;
    let skipped = logits_per_batch(ckpt, &batches, &ForwardOptions::skipping(skip.iter().copied()))?;
    Ok(mse(&full, &skipped))
}

/// Removes layers one at a time until `target_depth` remain, each time taking
/// the layer whose removal (on top of those already removed) changes the full
/// model's logits least. Ties go to the lower index.
pub fn layer_importance_iterative<T: Scalar>(
    ckpt: &Checkpoint<T>,
    calib: &CalibrationSet,
    target_depth: usize,
) -> Result<Vec<(usize, f64)>> {
    layer_importance_iterative_with(ckpt, calib, target_depth, None)
}

/// As [`layer_importance_iterative`]; attention layers become ineligible once
/// only `min_attention` of them remain.
pub fn layer_importance_iterative_with<T: Scalar>(
    ckpt: &Checkpoint<T>,
    calib: &CalibrationSet,
    target_depth: usize,
    min_attention: Option<usize>,
) -> Result<Vec<(usize, f64)>> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let cfg = ckpt.config();
    let n = cfg.n_layers();
    if target_depth >= n {
        return Err(Error::Invalid(format!("target depth {target_depth} must be below {n} layers")));
    }
    let kinds = cfg.pattern.kinds();
    let batches = calib.batches();
    let full = logits_per_batch(ckpt, &batches, &ForwardOptions::default())?;
    let mut removed = BTreeSet::new();
    let mut order = Vec::with_capacity(n - target_depth);
    while n - removed.len() > target_depth {
        let attn_left = (0..n)
            .filter(|i| !removed.contains(i) && kinds[*i] == LayerKind::Attention)
            .count();
        let protect_attn = min_attention.is_some_and(|m| attn_left <= m);
        let candidates: Vec<usize> = (0..n)
            .filter(|i| !removed.contains(i))
            .filter(|&i| !(protect_attn && kinds[i] == LayerKind::Attention))
            .collect();
        if candidates.is_empty() {
            return Err(Error::Invalid("no removable layer left under the attention floor".into()));
        }
        let mut best: Option<(usize, f64)> = None;
        for c in candidates {
            let mut skip = removed.clone();
            skip.insert(c);
            let logits = logits_per_batch(ckpt, &batches, &ForwardOptions::skipping(skip))?;
            let e = mse(&full, &logits);
            if best.is_none_or(|(_, b)| e < b) {
                best = Some((c, e));
            }
        }
        let (idx, e) = best.expect("at least one candidate");
        removed.insert(idx);
        order.push((idx, e));
    }
    Ok(order)
}

/// Width scores gathered in one pass over the calibration set.
#[derive(Clone, Debug, PartialEq)]
pub struct WidthScores {
    pub ffn: BTreeMap<usize, Vec<f64>>,
    pub channels: Vec<f64>,
    pub mamba: BTreeMap<usize, MambaHeadScores>,
}

#[derive(Default)]
struct Accumulators {
    ffn: BTreeMap<usize, Vec<f64>>,
    /// one accumulator vector per norm, in forward order
    norms: Vec<Vec<f64>>,
    mamba: BTreeMap<usize, Vec<f64>>,
    positions: usize,
}

fn accumulate_batch<T: Scalar>(ckpt: &Checkpoint<T>, batch: &TokenBatch, agg: Aggregation) -> Result<Accumulators> {
    let mut tape = Tape::new();
    let params = ParamVars::load(&mut tape, ckpt, false);
    let g = build_forward(&mut tape, ckpt.config(), &params, batch, &ForwardOptions::default())?;
    let fold = |t: &crate::Tensor<T>| {
        let width = t.last_dim();
        let mut acc = vec![0.0; width];
        for row in t.data().chunks(width) {
            for (a, v) in acc.iter_mut().zip(row) {
                agg.add(a, v.as_f64());
            }
        }
        acc
    };
    Ok(Accumulators {
        ffn: g.ffn_hidden.iter().map(|&(l, v)| (l, fold(tape.value(v)))).collect(),
        norms: g.norm_outputs.iter().map(|&v| fold(tape.value(v))).collect(),
        mamba: g.mamba_x.iter().map(|&(l, v)| (l, fold(tape.value(v)))).collect(),
        positions: batch.batch * batch.seq,
    })
}

fn merge_into(total: &mut Accumulators, part: Accumulators) {
    fn add_vec(dst: &mut Vec<f64>, src: Vec<f64>) {
        if dst.is_empty() {
            *dst = src;
        } else {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }
    for (l, v) in part.ffn {
        add_vec(total.ffn.entry(l).or_default(), v);
    }
    for (l, v) in part.mamba {
        add_vec(total.mamba.entry(l).or_default(), v);
    }
    if total.norms.is_empty() {
        total.norms = part.norms;
    } else {
        for (dst, src) in total.norms.iter_mut().zip(part.norms) {
            add_vec(dst, src);
        }
    }
    total.positions += part.positions;
}

/// FFN neuron, embedding channel and Mamba head scores in a single pass.
pub fn width_importance<T: Scalar>(ckpt: &Checkpoint<T>, calib: &CalibrationSet, agg: Aggregation) -> Result<WidthScores> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let parts: Vec<Accumulators> = calib
        .batches()
        .par_iter()
        .map(|b| accumulate_batch(ckpt, b, agg))
        .collect::<Result<_>>()?;
    let mut total = Accumulators::default();
    for p in parts {
        merge_into(&mut total, p);
    }
    let n = total.positions;
    let finish = |v: Vec<f64>| v.into_iter().map(|a| agg.finish(a, n)).collect::<Vec<_>>();

    let ffn = total.ffn.into_iter().map(|(l, v)| (l, finish(v))).collect();

    let mut channels = vec![0.0; ckpt.config().d_model];
    for norm in total.norms {
        for (c, s) in channels.iter_mut().zip(finish(norm)) {
            *c += s;
        }
    }

    let cfg = ckpt.config();
    let mamba = total
        .mamba
        .into_iter()
        .map(|(l, v)| {
            let block = finish(v);
            (l, mamba_scores_from_block(&block, cfg.mamba_heads, cfg.mamba_head_dim, cfg.mamba_groups))
        })
        .collect();

    Ok(WidthScores { ffn, channels, mamba })
}

/// Head and channel scores from an aggregated `[heads, head_dim]` block.
pub fn mamba_scores_from_block(block: &[f64], heads: usize, head_dim: usize, groups: usize) -> MambaHeadScores {
    let head_scores: Vec<f64> = (0..heads)
        .map(|h| block[h * head_dim..(h + 1) * head_dim].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let channel_scores = (0..head_dim)
        .map(|d| (0..heads).map(|h| block[h * head_dim + d].powi(2)).sum::<f64>().sqrt())
        .collect();
    let per_group = heads / groups.max(1);
    let rankings = (0..groups)
        .map(|g| {
            let mut idx: Vec<usize> = (g * per_group..(g + 1) * per_group).collect();
            // stable sort keeps the lower index first on ties
            idx.sort_by(|&a, &b| head_scores[a].total_cmp(&head_scores[b]));
            idx
        })
        .collect();
    MambaHeadScores {
        head_scores,
        channel_scores,
        rankings,
    }
}

pub fn ffn_neuron_importance<T: Scalar>(
    ckpt: &Checkpoint<T>,
    calib: &CalibrationSet,
    agg: Aggregation,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    Ok(width_importance(ckpt, calib, agg)?.ffn)
}

pub fn embedding_channel_importance<T: Scalar>(
    ckpt: &Checkpoint<T>,
    calib: &CalibrationSet,
    agg: Aggregation,
) -> Result<Vec<f64>> {
    Ok(width_importance(ckpt, calib, agg)?.channels)
}

pub fn mamba_head_importance<T: Scalar>(
    ckpt: &Checkpoint<T>,
    calib: &CalibrationSet,
    agg: Aggregation,
) -> Result<BTreeMap<usize, MambaHeadScores>> {
    Ok(width_importance(ckpt, calib, agg)?.mamba)
}

/// Full report: removal order down to `target_depth` (if given) and all width
/// scores.
pub fn importance_report<T: Scalar>(
    ckpt: &Checkpoint<T>,
    calib: &CalibrationSet,
    agg: Aggregation,
    target_depth: Option<usize>,
    min_attention: Option<usize>,
) -> Result<ImportanceReport> {
    let layer_removal_order = match target_depth {
        Some(d) => layer_importance_iterative_with(ckpt, calib, d, min_attention)?,
        None => Vec::new(),
    };
    let w = width_importance(ckpt, calib, agg)?;
    Ok(ImportanceReport {
        aggregation: agg,
        layer_removal_order,
        ffn_scores: w.ffn,
        channel_scores: w.channels,
        mamba_head_scores: w.mamba,
    })
}

/// Indices of the `k` highest scores, ascending. Among equal scores the lower
/// index is kept.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = idx.into_iter().take(k).collect();
    keep.sort_unstable();
    keep
}

/// The `keep` most important heads of every group, per group, ascending.
pub fn keep_heads_from_rankings(rankings: &[Vec<usize>], keep: usize) -> Vec<Vec<usize>> {
    rankings
        .iter()
        .map(|r| {
            let mut k: Vec<usize> = r[r.len().saturating_sub(keep)..].to_vec();
            k.sort_unstable();
            k
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_rejects_empty_and_ragged() {
        assert!(matches!(CalibrationSet::new(0, vec![]), Err(Error::EmptyCalibration)));
        assert!(CalibrationSet::new(0, vec![vec![1, 2], vec![1]]).is_err());
    }

    #[test]
    fn calibration_sampling_is_seeded() {
        let corpus: Vec<usize> = (0..100).map(|i| i % 7).collect();
        let a = CalibrationSet::sample(&corpus, 5, 10, 3).unwrap();
        let b = CalibrationSet::sample(&corpus, 5, 10, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.batches().len(), 1);
    }

    #[test]
    fn aggregation_modes() {
        let (mut m, mut l) = (0.0, 0.0);
        for v in [3.0, -4.0] {
            Aggregation::Mean.add(&mut m, v);
            Aggregation::L2.add(&mut l, v);
        }
        assert_eq!(Aggregation::Mean.finish(m, 2), 3.5);
        assert_eq!(Aggregation::L2.finish(l, 2), 5.0);
    }

    #[test]
    fn head_rankings_break_ties_low_first() {
        // 2 groups × 2 heads, head_dim 1
        let s = mamba_scores_from_block(&[1.0, 1.0, 3.0, 0.5], 4, 1, 2);
        assert_eq!(s.rankings, vec![vec![0, 1], vec![3, 2]]);
        assert_eq!(keep_heads_from_rankings(&s.rankings, 1), vec![vec![1], vec![2]]);
    }

    #[test]
    fn top_k_prefers_lower_index_on_ties() {
        assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
    }
}
