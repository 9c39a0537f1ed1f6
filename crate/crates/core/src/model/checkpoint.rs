use std::collections::BTreeMap;

use rand::Rng;

use super::config::{LayerKind, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named weights of one model; holds exactly the tensors its config's schema
/// requires.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let schema = config.schema();
        if schema.len() != tensors.len() {
            let expected: std::collections::BTreeSet<_> = schema.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<_> = tensors.keys().filter(|k| !expected.contains(k.as_str())).collect();
            let missing: Vec<_> = expected.iter().filter(|k| !tensors.contains_key(**k)).collect();
            return Err(Error::Config(format!(
                "checkpoint tensors do not match schema: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (name, shape) in &schema {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, schema requires {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    /// Random initialisation suited to training from scratch.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let depth_scale = 1.0 / (2.0 * config.n_layers().max(1) as f64).sqrt();
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.schema() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let t = match leaf {
                "norm" | "final_norm" | "gate_norm" | "d_skip" => Tensor::full(&shape, T::one()),
                "a_log" => {
                    let h = shape[0];
                    let data = (0..h)
                        .map(|i| T::of((1.0 + 7.0 * i as f64 / (h.max(2) - 1) as f64).ln()))
                        .collect();
                    Tensor::new(shape, data)?
                }
                "embed" => Tensor::uniform(&shape, -1.0, 1.0, rng),
                "head" | "w1" => {
                    let a = 1.0 / (shape[1] as f64).sqrt();
                    Tensor::uniform(&shape, -a, a, rng)
                }
                "conv_x" | "conv_b" | "conv_c" => {
                    let a = 1.0 / (shape[1] as f64).sqrt();
                    Tensor::uniform(&shape, -a, a, rng)
                }
                "w_o" | "w_out" | "w2" => {
                    let a = depth_scale / (shape[0] as f64).sqrt();
                    Tensor::uniform(&shape, -a, a, rng)
                }
                _ => {
                    let a = 1.0 / (shape[0] as f64).sqrt();
                    Tensor::uniform(&shape, -a, a, rng)
                }
            };
            tensors.insert(name, t);
        }
        Self::new(config, tensors)
    }

    /// Every tensor drawn i.i.d. uniform in `[-scale, scale]`, norms and skip
    /// scales around one. Used by the equivalence tests.
    pub fn random<R: Rng + ?Sized>(config: ModelConfig, scale: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.schema() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let t = match leaf {
                "norm" | "final_norm" | "gate_norm" | "d_skip" => Tensor::uniform(&shape, 0.5, 1.5, rng),
                "a_log" => Tensor::uniform(&shape, -1.0, 1.0, rng),
                _ => Tensor::uniform(&shape, -scale, scale, rng),
            };
            tensors.insert(name, t);
        }
        Self::new(config, tensors)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    /// In-place access for optimizers; callers must keep every shape.
    pub(crate) fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.tensors
    }

    pub fn into_parts(self) -> (ModelConfig, BTreeMap<String, Tensor<T>>) {
        (self.config, self.tensors)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no tensor named `{name}`")))
    }

    pub fn layer(&self, layer: usize, name: &str) -> Result<&Tensor<T>> {
        self.get(&format!("layers.{layer}.{name}"))
    }

    /// Replaces a tensor in place; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("no tensor named `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Invalid(format!(
                "shape change for `{name}`: {:?} -> {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn num_params(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    fn expect_kind(&self, layer: usize, kind: LayerKind) -> Result<()> {
        match self.config.pattern.kinds().get(layer) {
            Some(&k) if k == kind => Ok(()),
            other => Err(Error::Invalid(format!("layer {layer} is {other:?}, expected {kind:?}"))),
        }
    }

    pub fn ffn_params(&self, layer: usize) -> Result<FfnLayerParams<T>> {
        self.expect_kind(layer, LayerKind::Ffn)?;
        Ok(FfnLayerParams {
            w1: self.layer(layer, "w1")?.clone(),
            w2: self.layer(layer, "w2")?.clone(),
        })
    }

    pub fn attn_params(&self, layer: usize) -> Result<AttnLayerParams<T>> {
        self.expect_kind(layer, LayerKind::Attention)?;
        Ok(AttnLayerParams {
            w_q: self.layer(layer, "w_q")?.clone(),
            w_k: self.layer(layer, "w_k")?.clone(),
            w_v: self.layer(layer, "w_v")?.clone(),
            w_out: self.layer(layer, "w_out")?.clone(),
            n_q_heads: self.config.n_q_heads,
            n_kv_heads: self.config.n_kv_heads,
        })
    }

    pub fn mamba_params(&self, layer: usize) -> Result<MambaLayerParams<T>> {
        self.expect_kind(layer, LayerKind::Mamba)?;
        let g = |n| self.layer(layer, n).cloned();
        Ok(MambaLayerParams {
            w_x: g("w_x")?,
            w_z: g("w_z")?,
            w_b: g("w_b")?,
            w_c: g("w_c")?,
            w_dt: g("w_dt")?,
            conv_x: g("conv_x")?,
            conv_b: g("conv_b")?,
            conv_c: g("conv_c")?,
            a_log: g("a_log")?,
            d_skip: g("d_skip")?,
            gate_norm: g("gate_norm")?,
            w_o: g("w_o")?,
            groups: self.config.mamba_groups,
            eps: self.config.norm_eps,
        })
    }
}

/// `W1, W2: [d_ffn, d_model]`; the block computes `δ(X·W1ᵀ)·W2`.
#[derive(Clone, Debug)]
pub struct FfnLayerParams<T> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AttnLayerParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_out: Tensor<T>,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
}

#[derive(Clone, Debug)]
pub struct MambaLayerParams<T> {
    pub w_x: Tensor<T>,
    pub w_z: Tensor<T>,
    pub w_b: Tensor<T>,
    pub w_c: Tensor<T>,
    pub w_dt: Tensor<T>,
    pub conv_x: Tensor<T>,
    pub conv_b: Tensor<T>,
    pub conv_c: Tensor<T>,
    pub a_log: Tensor<T>,
    pub d_skip: Tensor<T>,
    pub gate_norm: Tensor<T>,
    pub w_o: Tensor<T>,
    pub groups: usize,
    pub eps: f64,
}
