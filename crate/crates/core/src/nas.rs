//! Inference memory model for hybrid decoders and enumeration of pruned
//! architectures that fit a byte budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_params, LayerKind, LayerPattern, ModelConfig};

pub const GIB: f64 = (1u64 << 30) as f64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub weight_bytes: u64,
    pub kv_cache_bytes: u64,
    pub ssm_state_bytes: u64,
    pub total_bytes: u64,
    pub seq_len: u64,
    pub batch: u64,
    pub bytes_per_elem: u64,
}

impl MemoryEstimate {
    pub fn total_gib(&self) -> f64 {
        self.total_bytes as f64 / GIB
    }
}

/// Weights plus the KV cache of the attention layers plus the recurrent and
/// convolution state of the Mamba layers. Activation workspace is excluded.
pub fn estimate_memory(cfg: &ModelConfig, seq_len: u64, batch: u64, bytes_per_elem: u64) -> MemoryEstimate {
    let n_attn = cfg.pattern.count(LayerKind::Attention) as u64;
    let n_mamba = cfg.pattern.count(LayerKind::Mamba) as u64;
    let weight_bytes = count_params(cfg) * bytes_per_elem;
    let kv_cache_bytes = 2 * n_attn * cfg.n_kv_heads as u64 * cfg.attn_head_dim as u64 * seq_len * batch * bytes_per_elem;
    let per_layer_state = (cfg.mamba_heads * cfg.mamba_head_dim * cfg.mamba_state_dim) as u64
        + (cfg.conv_window * cfg.conv_channels()) as u64;
    let ssm_state_bytes = n_mamba * batch * per_layer_state * bytes_per_elem;
    MemoryEstimate {
        weight_bytes,
        kv_cache_bytes,
        ssm_state_bytes,
        total_bytes: weight_bytes + kv_cache_bytes + ssm_state_bytes,
        seq_len,
        batch,
        bytes_per_elem,
    }
}

/// `gpu_bytes · (1 − buffer_fraction) − reserved_bytes`.
pub fn derive_budget(gpu_bytes: f64, buffer_fraction: f64, reserved_bytes: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&buffer_fraction) {
        return Err(Error::Invalid(format!("buffer fraction {buffer_fraction} outside [0, 1)")));
    }
    let budget = gpu_bytes * (1.0 - buffer_fraction) - reserved_bytes;
    if budget < 0.0 {
        return Err(Error::NegativeBudget(budget));
    }
    Ok(budget)
}

/// Axes of the width/depth grid around a base architecture. Depths other than
/// the base depth get a freshly placed pattern with the base's attention count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub base: ModelConfig,
    pub depths: Vec<usize>,
    pub d_models: Vec<usize>,
    pub d_ffns: Vec<usize>,
    pub mamba_heads: Vec<usize>,
}

impl SearchSpace {
    /// Depth 52–56, width 4480–5120 (step 320), FFN 13440–20480 (step 320),
    /// Mamba heads 112–128 (step 8) around the 56-layer candidate layout.
    pub fn nano_12b(vocab_size: usize) -> Self {
        Self {
            base: ModelConfig::nano_candidate(5120, 20480, 128, vocab_size),
            depths: (52..=56).collect(),
            d_models: (4480..=5120).step_by(320).collect(),
            d_ffns: (13440..=20480).step_by(320).collect(),
            mamba_heads: (112..=128).step_by(8).collect(),
        }
    }

    pub fn grid_size(&self) -> usize {
        self.depths.len() * self.d_models.len() * self.d_ffns.len() * self.mamba_heads.len()
    }

    fn pattern_for(&self, depth: usize) -> Result<LayerPattern> {
        if depth == self.base.n_layers() {
            Ok(self.base.pattern.clone())
        } else {
            LayerPattern::build(depth, self.base.pattern.count(LayerKind::Attention).min(depth))
        }
    }

    /// Every grid point, depth-major.
    pub fn configs(&self) -> Result<Vec<ModelConfig>> {
        if self.depths.is_empty() || self.d_models.is_empty() || self.d_ffns.is_empty() || self.mamba_heads.is_empty() {
            return Err(Error::Invalid("search space axes must be non-empty".into()));
        }
        let mut out = Vec::with_capacity(self.grid_size());
        for &depth in &self.depths {
            let pattern = self.pattern_for(depth)?;
            for &d_model in &self.d_models {
                for &d_ffn in &self.d_ffns {
                    for &mamba_heads in &self.mamba_heads {
                        let cfg = ModelConfig {
                            pattern: pattern.clone(),
                            d_model,
                            d_ffn,
                            mamba_heads,
                            ..self.base.clone()
                        };
                        cfg.validate()?;
                        out.push(cfg);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: ModelConfig,
    pub memory: MemoryEstimate,
}

/// Grid points whose estimated memory fits `budget_bytes`, in ranking order.
pub fn enumerate_candidates(
    space: &SearchSpace,
    budget_bytes: f64,
    seq_len: u64,
    batch: u64,
    bytes_per_elem: u64,
) -> Result<Vec<Candidate>> {
    let feasible = space
        .configs()?
        .into_iter()
        .map(|config| {
            let memory = estimate_memory(&config, seq_len, batch, bytes_per_elem);
            Candidate { config, memory }
        })
        .filter(|c| c.memory.total_bytes as f64 <= budget_bytes)
        .collect();
    Ok(sort_candidates(feasible))
}

fn sort_candidates(mut cands: Vec<Candidate>) -> Vec<Candidate> {
    cands.sort_by(|a, b| {
        b.memory
            .total_bytes
            .cmp(&a.memory.total_bytes)
            .then(b.config.d_model.cmp(&a.config.d_model))
            .then(b.config.d_ffn.cmp(&a.config.d_ffn))
    });
    cands
}

/// The `k` candidates with the largest memory footprint (ties: larger
/// `d_model`, then larger `d_ffn`, then input order).
pub fn rank_candidates(cands: &[Candidate], k: usize) -> Result<Vec<Candidate>> {
    if k == 0 {
        return Err(Error::Invalid("top-k needs k ≥ 1".into()));
    }
    let mut sorted = sort_candidates(cands.to_vec());
    sorted.truncate(k);
    Ok(sorted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub budget_bytes: f64,
    pub grid_size: usize,
    pub candidates: Vec<Candidate>,
}
