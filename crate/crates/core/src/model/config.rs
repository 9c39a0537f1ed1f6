use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Mamba,
    Attention,
    Ffn,
}

impl LayerKind {
    pub fn symbol(self) -> char {
        match self {
            LayerKind::Mamba => 'M',
            LayerKind::Attention => 'A',
            LayerKind::Ffn => 'F',
        }
    }
}

/// Per-layer kinds of a hybrid stack, bottom to top.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerPattern(Vec<LayerKind>);

impl LayerPattern {
    pub fn new(kinds: Vec<LayerKind>) -> Self {
        Self(kinds)
    }

    /// Evenly dispersed attention at `round((i + ½)·n_layers / n_attn)` (ties
    /// round down), every other slot alternating Mamba, FFN, Mamba, ...
    pub fn build(n_layers: usize, n_attn: usize) -> Result<Self> {
        if n_attn > n_layers {
            return Err(Error::Config(format!(
                "{n_attn} attention layers do not fit in {n_layers} layers"
            )));
        }
        let mut attn = BTreeSet::new();
        for i in 0..n_attn {
            let pos = ((i as f64 + 0.5) * n_layers as f64 / n_attn as f64 - 0.5).ceil() as usize;
            attn.insert(pos.min(n_layers - 1));
        }
        let mut kinds = Vec::with_capacity(n_layers);
        let mut next_mamba = true;
        for l in 0..n_layers {
            if attn.contains(&l) {
                kinds.push(LayerKind::Attention);
            } else {
                kinds.push(if next_mamba { LayerKind::Mamba } else { LayerKind::Ffn });
                next_mamba = !next_mamba;
            }
        }
        Ok(Self(kinds))
    }

    pub fn kinds(&self) -> &[LayerKind] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.0.iter().filter(|&&k| k == kind).count()
    }

    pub fn positions(&self, kind: LayerKind) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i] == kind).collect()
    }

    pub fn without(&self, remove: &BTreeSet<usize>) -> Self {
        Self(
            self.0
                .iter()
                .enumerate()
                .filter(|(i, _)| !remove.contains(i))
                .map(|(_, &k)| k)
                .collect(),
        )
    }
}

impl fmt::Display for LayerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|k| write!(f, "{}", k.symbol()))
    }
}

/// Full architectural description of a hybrid decoder.
///
/// The Mamba inner width is `mamba_heads · mamba_head_dim`; it is stored as a
/// head count rather than an expansion factor because width pruning changes
/// `d_model` and the head count independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub pattern: LayerPattern,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub attn_head_dim: usize,
    pub mamba_heads: usize,
    pub mamba_head_dim: usize,
    pub mamba_groups: usize,
    pub mamba_state_dim: usize,
    pub conv_window: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub tied_embeddings: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

/// Widths shared by the full-size constructors.
#[derive(Clone, Copy, Debug)]
pub struct HybridDims {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub mamba_expand: usize,
    pub mamba_head_dim: usize,
    pub mamba_groups: usize,
    pub mamba_state_dim: usize,
    pub conv_window: usize,
}

impl ModelConfig {
    /// Builds a config whose Mamba inner width is `expand · d_model` and whose
    /// attention head dim is `d_model / n_q_heads`.
    pub fn from_expand(pattern: LayerPattern, dims: HybridDims, vocab_size: usize) -> Result<Self> {
        let inner = dims.mamba_expand * dims.d_model;
        if dims.mamba_head_dim == 0 || !inner.is_multiple_of(dims.mamba_head_dim) {
            return Err(Error::Config(format!(
                "mamba inner width {inner} not divisible by head dim {}",
                dims.mamba_head_dim
            )));
        }
        if dims.n_q_heads == 0 || !dims.d_model.is_multiple_of(dims.n_q_heads) {
            return Err(Error::Config("d_model must be divisible by n_q_heads".into()));
        }
        let cfg = Self {
            pattern,
            d_model: dims.d_model,
            d_ffn: dims.d_ffn,
            n_q_heads: dims.n_q_heads,
            n_kv_heads: dims.n_kv_heads,
            attn_head_dim: dims.d_model / dims.n_q_heads,
            mamba_heads: inner / dims.mamba_head_dim,
            mamba_head_dim: dims.mamba_head_dim,
            mamba_groups: dims.mamba_groups,
            mamba_state_dim: dims.mamba_state_dim,
            conv_window: dims.conv_window,
            vocab_size,
            tied_embeddings: false,
            norm_eps: default_eps(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The 12B base: 62 layers (28 Mamba / 6 attention / 28 FFN), width 5120,
    /// FFN 20480, GQA 40/8, Mamba groups 8, state 128, head dim 64, expand 2,
    /// conv window 4.
    pub fn nano_12b_base(vocab_size: usize) -> Self {
        Self::from_expand(
            LayerPattern::build(62, 6).expect("62 ≥ 6"),
            HybridDims {
                d_model: 5120,
                d_ffn: 20480,
                n_q_heads: 40,
                n_kv_heads: 8,
                mamba_expand: 2,
                mamba_head_dim: 64,
                mamba_groups: 8,
                mamba_state_dim: 128,
                conv_window: 4,
            },
            vocab_size,
        )
        .expect("valid 12B config")
    }

    /// A compressed candidate at the 56-layer / 4-attention depth with the
    /// 128-head (head dim 80) Mamba layout the width search operates on.
    pub fn nano_candidate(d_model: usize, d_ffn: usize, mamba_heads: usize, vocab_size: usize) -> Self {
        Self {
            pattern: LayerPattern::build(56, 4).expect("56 ≥ 4"),
            d_model,
            d_ffn,
            n_q_heads: 40,
            n_kv_heads: 8,
            attn_head_dim: 128,
            mamba_heads,
            mamba_head_dim: 80,
            mamba_groups: 8,
            mamba_state_dim: 128,
            conv_window: 4,
            vocab_size,
            tied_embeddings: false,
            norm_eps: default_eps(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.pattern.len()
    }

    pub fn mamba_inner(&self) -> usize {
        self.mamba_heads * self.mamba_head_dim
    }

    pub fn heads_per_group(&self) -> usize {
        self.mamba_heads / self.mamba_groups.max(1)
    }

    /// Channels that pass through the causal convolution: x, B and C streams.
    pub fn conv_channels(&self) -> usize {
        self.mamba_inner() + 2 * self.mamba_groups * self.mamba_state_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 {
            return fail("d_model must be positive".into());
        }
        if self.pattern.count(LayerKind::Attention) > 0 {
            if self.n_q_heads == 0 || self.n_kv_heads == 0 || self.attn_head_dim == 0 {
                return fail("attention heads and head dim must be positive".into());
            }
            if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
                return fail(format!(
                    "n_q_heads {} not divisible by n_kv_heads {}",
                    self.n_q_heads, self.n_kv_heads
                ));
            }
        }
        if self.pattern.count(LayerKind::Mamba) > 0 {
            if self.mamba_groups == 0 || self.mamba_heads == 0 || self.mamba_head_dim == 0 {
                return fail("mamba heads, head dim and groups must be positive".into());
            }
            if !self.mamba_heads.is_multiple_of(self.mamba_groups) {
                return fail(format!(
                    "{} mamba heads do not split evenly into {} groups",
                    self.mamba_heads, self.mamba_groups
                ));
            }
            if self.mamba_state_dim == 0 || self.conv_window == 0 {
                return fail("mamba state dim and conv window must be positive".into());
            }
        }
        if self.pattern.count(LayerKind::Ffn) > 0 && self.d_ffn == 0 {
            return fail("d_ffn must be at least 1".into());
        }
        if !(self.norm_eps >= 0.0) {
            return fail("norm_eps must be non-negative".into());
        }
        Ok(())
    }

    /// Same widths, layers at `remove` deleted.
    pub fn without_layers(&self, remove: &BTreeSet<usize>) -> Result<Self> {
        if let Some(&bad) = remove.iter().find(|&&i| i >= self.n_layers()) {
            return Err(Error::Invalid(format!("layer {bad} out of range for {} layers", self.n_layers())));
        }
        if remove.len() == self.n_layers() && !remove.is_empty() {
            return Err(Error::Invalid("cannot remove every layer".into()));
        }
        Ok(Self {
            pattern: self.pattern.without(remove),
            ..self.clone()
        })
    }

    /// Ordered `(name, shape)` list of every tensor a checkpoint must hold.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![("embed".to_string(), vec![self.vocab_size, d])];
        for (i, &kind) in self.pattern.kinds().iter().enumerate() {
            for (name, shape) in self.layer_schema(kind) {
                out.push((format!("layers.{i}.{name}"), shape));
            }
        }
        if self.n_layers() > 0 {
            out.push(("final_norm".to_string(), vec![d]));
        }
        if !self.tied_embeddings {
            out.push(("head".to_string(), vec![self.vocab_size, d]));
        }
        out
    }

    /// Tensor names (relative to `layers.{i}.`) and shapes of one layer.
    pub fn layer_schema(&self, kind: LayerKind) -> Vec<(&'static str, Vec<usize>)> {
        let d = self.d_model;
        let mut v = vec![("norm", vec![d])];
        match kind {
            LayerKind::Mamba => {
                let di = self.mamba_inner();
                let gn = self.mamba_groups * self.mamba_state_dim;
                let h = self.mamba_heads;
                let k = self.conv_window;
                v.extend([
                    ("w_x", vec![d, di]),
                    ("w_z", vec![d, di]),
                    ("w_b", vec![d, gn]),
                    ("w_c", vec![d, gn]),
                    ("w_dt", vec![d, h]),
                    ("conv_x", vec![di, k]),
                    ("conv_b", vec![gn, k]),
                    ("conv_c", vec![gn, k]),
                    ("a_log", vec![h]),
                    ("d_skip", vec![h]),
                    ("gate_norm", vec![di]),
                    ("w_o", vec![di, d]),
                ]);
            }
            LayerKind::Attention => {
                let qw = self.n_q_heads * self.attn_head_dim;
                let kw = self.n_kv_heads * self.attn_head_dim;
                v.extend([
                    ("w_q", vec![d, qw]),
                    ("w_k", vec![d, kw]),
                    ("w_v", vec![d, kw]),
                    ("w_out", vec![qw, d]),
                ]);
            }
            LayerKind::Ffn => {
                v.extend([("w1", vec![self.d_ffn, d]), ("w2", vec![self.d_ffn, d])]);
            }
        }
        v
    }

    pub fn layer_param_count(&self, kind: LayerKind) -> u64 {
        self.layer_schema(kind)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }
}

/// Exact parameter count: the sum of all tensor extents in the schema.
pub fn count_params(config: &ModelConfig) -> u64 {
    config
        .schema()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() as u64)
        .sum()
}
