//! Structural pruning: depth, FFN neurons, embedding channels and Mamba heads.
//! Every transform yields a checkpoint whose forward pass equals the original
//! with the removed components masked out.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::importance::{keep_heads_from_rankings, top_k_indices, WidthScores};
use crate::model::{Checkpoint, LayerKind, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Attention layers kept by depth pruning unless the caller says otherwise.
pub const DEFAULT_MIN_ATTENTION: usize = 4;

fn split_layer_name(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("layers.")?;
    let (idx, leaf) = rest.split_once('.')?;
    Some((idx.parse().ok()?, leaf))
}

fn check_keep(what: &str, keep: &[usize], bound: usize) -> Result<()> {
    if keep.is_empty() {
        return Err(Error::Invalid(format!("{what}: keep set is empty")));
    }
    if let Some(&bad) = keep.iter().find(|&&i| i >= bound) {
        return Err(Error::Invalid(format!("{what}: index {bad} out of range for {bound}")));
    }
    if keep.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(format!("{what}: keep indices must be sorted and unique")));
    }
    Ok(())
}

/// Deletes the layers in `remove` and renumbers the rest. The result must keep
/// at least one attention layer if the original had any.
pub fn prune_layers<T: Scalar>(ckpt: &Checkpoint<T>, remove: &BTreeSet<usize>) -> Result<Checkpoint<T>> {
    prune_layers_protected(ckpt, remove, 1)
}

/// As [`prune_layers`], requiring `min(min_attention, original count)`
/// attention layers to survive.
pub fn prune_layers_protected<T: Scalar>(
    ckpt: &Checkpoint<T>,
    remove: &BTreeSet<usize>,
    min_attention: usize,
) -> Result<Checkpoint<T>> {
    let cfg = ckpt.config();
    let new_cfg = cfg.without_layers(remove)?;
    let before = cfg.pattern.count(LayerKind::Attention);
    let after = new_cfg.pattern.count(LayerKind::Attention);
    if after < min_attention.min(before) {
        return Err(Error::Invalid(format!(
            "pruning would leave {after} attention layers, at least {} required",
            min_attention.min(before)
        )));
    }
    let renumber: BTreeMap<usize, usize> = (0..cfg.n_layers())
        .filter(|i| !remove.contains(i))
        .enumerate()
        .map(|(new, old)| (old, new))
        .collect();
    let (_, tensors) = ckpt.clone().into_parts();
    let tensors = tensors
        .into_iter()
        .filter_map(|(name, t)| match split_layer_name(&name) {
            Some((i, leaf)) => renumber.get(&i).map(|n| (format!("layers.{n}.{leaf}"), t)),
            None => Some((name, t)),
        })
        .collect();
    Checkpoint::new(new_cfg, tensors)
}

/// Keeps the listed hidden neurons of every FFN layer (rows of `W1` and `W2`).
/// All FFN layers must keep the same number of neurons.
pub fn prune_ffn<T: Scalar>(ckpt: &Checkpoint<T>, keep: &BTreeMap<usize, Vec<usize>>) -> Result<Checkpoint<T>> {
    let cfg = ckpt.config();
    let ffn_layers = cfg.pattern.positions(LayerKind::Ffn);
    if keep.keys().copied().collect::<Vec<_>>() != ffn_layers {
        return Err(Error::Invalid(format!(
            "keep sets given for layers {:?}, FFN layers are {ffn_layers:?}",
            keep.keys().collect::<Vec<_>>()
        )));
    }
    let width = keep.values().next().map_or(cfg.d_ffn, Vec::len);
    for (l, k) in keep {
        check_keep(&format!("ffn layer {l}"), k, cfg.d_ffn)?;
        if k.len() != width {
            return Err(Error::Invalid("every FFN layer must keep the same number of neurons".into()));
        }
    }
    let new_cfg = ModelConfig {
        d_ffn: width,
        ..cfg.clone()
    };
    let (_, mut tensors) = ckpt.clone().into_parts();
    for (l, k) in keep {
        for leaf in ["w1", "w2"] {
            let name = format!("layers.{l}.{leaf}");
            let t = tensors[&name].select(0, k)?;
            tensors.insert(name, t);
        }
    }
    Checkpoint::new(new_cfg, tensors)
}

/// Axis of `d_model` in a tensor of the given leaf name, if it has one.
fn d_model_axis(name: &str) -> Option<usize> {
    let leaf = split_layer_name(name).map_or(name, |(_, l)| l);
    match leaf {
        "embed" | "head" => Some(1),
        "norm" | "final_norm" => Some(0),
        "w_x" | "w_z" | "w_b" | "w_c" | "w_dt" | "w_q" | "w_k" | "w_v" => Some(0),
        "w_o" | "w_out" | "w1" | "w2" => Some(1),
        _ => None,
    }
}

/// Config after keeping `n_keep` embedding channels.
pub fn embedding_pruned_config(cfg: &ModelConfig, n_keep: usize) -> ModelConfig {
    ModelConfig {
        d_model: n_keep,
        ..cfg.clone()
    }
}

/// Keeps the listed `d_model` channels in every tensor that carries that axis.
/// Norm gammas are sliced, not rescaled.
pub fn prune_embedding<T: Scalar>(ckpt: &Checkpoint<T>, keep: &[usize]) -> Result<Checkpoint<T>> {
    let cfg = ckpt.config();
    check_keep("embedding channels", keep, cfg.d_model)?;
    let new_cfg = embedding_pruned_config(cfg, keep.len());
    let (_, tensors) = ckpt.clone().into_parts();
    let tensors = tensors
        .into_iter()
        .map(|(name, t)| {
            let t = match d_model_axis(&name) {
                Some(axis) => t.select(axis, keep)?,
                None => t,
            };
            Ok((name, t))
        })
        .collect::<Result<_>>()?;
    Checkpoint::new(new_cfg, tensors)
}

/// Config after keeping `per_group` heads in each Mamba group.
pub fn mamba_pruned_config(cfg: &ModelConfig, per_group: usize) -> ModelConfig {
    ModelConfig {
        mamba_heads: per_group * cfg.mamba_groups,
        ..cfg.clone()
    }
}

/// Keeps, in every Mamba layer, the listed heads of each group (global head
/// indices). Every group of every layer must keep the same number of heads.
///
/// Trimmed per head: columns of `W_x`, `W_z`, `W_dt`; rows of the x-stream
/// conv kernel; `A_log`, `D`; gated-norm channels; rows of `W_O`. The shared
/// B/C projections are untouched.
pub fn prune_mamba_heads<T: Scalar>(ckpt: &Checkpoint<T>, keep: &BTreeMap<usize, Vec<Vec<usize>>>) -> Result<Checkpoint<T>> {
    let cfg = ckpt.config();
    let mamba_layers = cfg.pattern.positions(LayerKind::Mamba);
    if keep.keys().copied().collect::<Vec<_>>() != mamba_layers {
        return Err(Error::Invalid(format!(
            "keep sets given for layers {:?}, Mamba layers are {mamba_layers:?}",
            keep.keys().collect::<Vec<_>>()
        )));
    }
    let per_group_total = cfg.heads_per_group();
    let mut per_group = None;
    for (l, groups) in keep {
        if groups.len() != cfg.mamba_groups {
            return Err(Error::Invalid(format!(
                "layer {l}: {} keep lists for {} groups",
                groups.len(),
                cfg.mamba_groups
            )));
        }
        for (g, heads) in groups.iter().enumerate() {
            let lo = g * per_group_total;
            check_keep(&format!("layer {l} group {g}"), heads, lo + per_group_total)?;
            if heads[0] < lo {
                return Err(Error::Invalid(format!("layer {l}: head {} is not in group {g}", heads[0])));
            }
            if *per_group.get_or_insert(heads.len()) != heads.len() {
                return Err(Error::Invalid(
                    "unequal per-group head counts; every group must keep the same number".into(),
                ));
            }
        }
    }
    let new_cfg = mamba_pruned_config(cfg, per_group.unwrap_or(per_group_total));
    let p = cfg.mamba_head_dim;
    let (_, mut tensors) = ckpt.clone().into_parts();
    for (l, groups) in keep {
        let heads: Vec<usize> = groups.concat();
        let channels: Vec<usize> = heads.iter().flat_map(|&h| h * p..(h + 1) * p).collect();
        let mut apply = |leaf: &str, axis: usize, idx: &[usize]| -> Result<()> {
            let name = format!("layers.{l}.{leaf}");
            let t: Tensor<T> = tensors[&name].select(axis, idx)?;
            tensors.insert(name, t);
            Ok(())
        };
        apply("w_x", 1, &channels)?;
        apply("w_z", 1, &channels)?;
        apply("w_dt", 1, &heads)?;
        apply("conv_x", 0, &channels)?;
        apply("a_log", 0, &heads)?;
        apply("d_skip", 0, &heads)?;
        apply("gate_norm", 0, &channels)?;
        apply("w_o", 0, &channels)?;
    }
    Checkpoint::new(new_cfg, tensors)
}

/// The same neuron keep set for every FFN layer.
pub fn uniform_ffn_keep(cfg: &ModelConfig, keep: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    cfg.pattern
        .positions(LayerKind::Ffn)
        .into_iter()
        .map(|l| (l, keep.to_vec()))
        .collect()
}

/// Shrinks `ckpt` to the widths of `target` using importance scores computed
/// on `ckpt`: top FFN neurons per layer, top heads per Mamba group, top
/// embedding channels. Depth and every other field must already match.
pub fn prune_to_widths<T: Scalar>(ckpt: &Checkpoint<T>, scores: &WidthScores, target: &ModelConfig) -> Result<Checkpoint<T>> {
    let cfg = ckpt.config();
    let reshaped = ModelConfig {
        d_model: cfg.d_model,
        d_ffn: cfg.d_ffn,
        mamba_heads: cfg.mamba_heads,
        ..target.clone()
    };
    if &reshaped != cfg {
        return Err(Error::Invalid("target differs from the checkpoint in more than d_model, d_ffn and mamba_heads".into()));
    }
    if target.d_model > cfg.d_model || target.d_ffn > cfg.d_ffn || target.mamba_heads > cfg.mamba_heads {
        return Err(Error::Invalid(format!(
            "target widths ({}, {}, {}) exceed the checkpoint's ({}, {}, {})",
            target.d_model, target.d_ffn, target.mamba_heads, cfg.d_model, cfg.d_ffn, cfg.mamba_heads
        )));
    }
    let mut out = ckpt.clone();
    if target.d_ffn < cfg.d_ffn {
        let keep = scores
            .ffn
            .iter()
            .map(|(&l, s)| (l, top_k_indices(s, target.d_ffn)))
            .collect();
        out = prune_ffn(&out, &keep)?;
    }
    if target.mamba_heads < cfg.mamba_heads {
        if !target.mamba_heads.is_multiple_of(cfg.mamba_groups.max(1)) {
            return Err(Error::Invalid(format!(
                "{} Mamba heads do not split over {} groups",
                target.mamba_heads, cfg.mamba_groups
            )));
        }
        let per_group = target.mamba_heads / cfg.mamba_groups;
        let keep = scores
            .mamba
            .iter()
            .map(|(&l, m)| (l, keep_heads_from_rankings(&m.rankings, per_group)))
            .collect();
        out = prune_mamba_heads(&out, &keep)?;
    }
    if target.d_model < cfg.d_model {
        out = prune_embedding(&out, &top_k_indices(&scores.channels, target.d_model))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerPattern;
    use rand::SeedableRng;

    fn toy() -> Checkpoint<f64> {
        let cfg = ModelConfig {
            pattern: LayerPattern::build(5, 1).unwrap(),
            d_model: 6,
            d_ffn: 5,
            n_q_heads: 2,
            n_kv_heads: 1,
            attn_head_dim: 3,
            mamba_heads: 4,
            mamba_head_dim: 2,
            mamba_groups: 2,
            mamba_state_dim: 2,
            conv_window: 2,
            vocab_size: 7,
            tied_embeddings: false,
            norm_eps: 1e-5,
        };
        Checkpoint::random(cfg, 0.5, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn removing_nothing_is_identity() {
        let c = toy();
        assert_eq!(prune_layers(&c, &BTreeSet::new()).unwrap(), c);
        let all: Vec<usize> = (0..6).collect();
        assert_eq!(prune_embedding(&c, &all).unwrap(), c);
        let ffn_all: Vec<usize> = (0..5).collect();
        assert_eq!(prune_ffn(&c, &uniform_ffn_keep(c.config(), &ffn_all)).unwrap(), c);
    }

    #[test]
    fn layer_renumbering_keeps_tensors() {
        let c = toy();
        // pattern M F A F M → drop layer 1
        let p = prune_layers(&c, &BTreeSet::from([1])).unwrap();
        assert_eq!(p.config().n_layers(), 4);
        assert_eq!(p.layer(1, "w_q").unwrap(), c.layer(2, "w_q").unwrap());
        assert!(prune_layers(&c, &(0..5).collect()).is_err());
        assert!(prune_layers(&c, &BTreeSet::from([2])).is_err(), "last attention layer protected");
    }

    #[test]
    fn keep_set_validation() {
        let c = toy();
        assert!(prune_embedding(&c, &[]).is_err());
        assert!(prune_embedding(&c, &[0, 6]).is_err());
        assert!(prune_embedding(&c, &[2, 1]).is_err());
        let keep = BTreeMap::from([(0, vec![vec![0], vec![2, 3]]), (4, vec![vec![0], vec![2]])]);
        assert!(prune_mamba_heads(&c, &keep).is_err());
        let cross = BTreeMap::from([(0, vec![vec![2], vec![3]]), (4, vec![vec![0], vec![2]])]);
        assert!(prune_mamba_heads(&c, &cross).is_err());
    }
}
