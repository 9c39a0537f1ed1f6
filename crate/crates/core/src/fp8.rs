//! E4M3 emulation with blockwise scaling: 128×128 blocks for weights, 1×128
//! tiles for activations.
//!
//! The E4M3 variant has no infinities: exponent bias 7, three mantissa bits,
//! largest finite magnitude 448, and `S.1111.111` as the only NaN encoding.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::model::{Checkpoint, LayerKind, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const E4M3_MAX: f64 = 448.0;
pub const BLOCK: usize = 128;
const MAX_CODE: u8 = 0x7E;
const NAN_CODE: u8 = 0x7F;

/// Value of an E4M3 byte.
pub fn e4m3_decode(code: u8) -> f64 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = ((code >> 3) & 0x0F) as i32;
    let man = (code & 0x07) as f64;
    if code & 0x7F == NAN_CODE {
        return f64::NAN;
    }
    let mag = if exp == 0 {
        man / 8.0 * 2f64.powi(-6)
    } else {
        (1.0 + man / 8.0) * 2f64.powi(exp - 7)
    };
    sign * mag
}

/// Non-negative finite E4M3 values, indexed by code `0x00..=0x7E`.
fn positive_table() -> &'static [f64; 127] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[f64; 127]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|c| e4m3_decode(c as u8)))
}

/// Round to the nearest E4M3 value, ties to the even code. Magnitudes beyond
/// 448 saturate; NaN maps to the NaN code.
pub fn e4m3_round(x: f64) -> u8 {
    if x.is_nan() {
        return NAN_CODE;
    }
    let sign = if x.is_sign_negative() { 0x80 } else { 0x00 };
    let a = x.abs();
    if a >= E4M3_MAX {
        return sign | MAX_CODE;
    }
    let table = positive_table();
    // first code whose value is ≥ a
    let hi = table.partition_point(|&v| v < a);
    if table[hi] == a {
        return sign | hi as u8;
    }
    let lo = hi - 1;
    let (dl, dh) = (a - table[lo], table[hi] - a);
    let code = if dl < dh {
        lo
    } else if dh < dl {
        hi
    } else if lo % 2 == 0 {
        lo
    } else {
        hi
    };
    sign | code as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    /// 128×128 blocks over the `[rows, last_dim]` view.
    WeightBlock,
    /// 1×128 tiles along each row.
    ActivationTile,
}

impl QuantMode {
    fn block_rows(self) -> usize {
        match self {
            Self::WeightBlock => BLOCK,
            Self::ActivationTile => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBlockTensor {
    pub shape: Vec<usize>,
    pub mode: QuantMode,
    pub codes: Vec<u8>,
    /// One per block, blocks in row-major order over the block grid.
    pub scales: Vec<f64>,
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&cols, lead)) => (lead.iter().product(), cols),
        None => (1, 1),
    }
}

/// Block grid `(block rows, block cols)` for a shape and mode.
pub fn block_grid(shape: &[usize], mode: QuantMode) -> (usize, usize) {
    let (rows, cols) = matrix_dims(shape);
    (rows.div_ceil(mode.block_rows()), cols.div_ceil(BLOCK))
}

impl QuantizedBlockTensor {
    fn for_each_block(&self, mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>)) {
        let (rows, cols) = matrix_dims(&self.shape);
        let br = self.mode.block_rows();
        let (gr, gc) = block_grid(&self.shape, self.mode);
        for bi in 0..gr {
            for bj in 0..gc {
                let r = bi * br..((bi + 1) * br).min(rows);
                let c = bj * BLOCK..((bj + 1) * BLOCK).min(cols);
                let mut idx = r.flat_map(move |i| c.clone().map(move |j| i * cols + j));
                f(bi * gc + bj, &mut idx);
            }
        }
    }

    pub fn dequantize<T: Scalar>(&self) -> Tensor<T> {
        let mut data = vec![T::zero(); self.codes.len()];
        self.for_each_block(|b, idx| {
            let s = self.scales[b];
            for i in idx {
                data[i] = T::of(e4m3_decode(self.codes[i]) * s);
            }
        });
        Tensor::new(self.shape.clone(), data).expect("shape preserved")
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        let (gr, gc) = block_grid(&self.shape, self.mode);
        if self.codes.len() != n || self.scales.len() != gr * gc {
            return Err(Error::Format(format!(
                "quantized tensor {:?}: {} codes, {} scales",
                self.shape,
                self.codes.len(),
                self.scales.len()
            )));
        }
        if self.codes.iter().any(|&c| c & 0x7F == NAN_CODE) || self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Format("quantized tensor holds NaN codes or non-positive scales".into()));
        }
        Ok(())
    }
}

/// Per block: `scale = max|x| / 448` (1 for an all-zero block), `code =
/// round(x / scale)`.
pub fn quantize<T: Scalar>(t: &Tensor<T>, mode: QuantMode) -> Result<QuantizedBlockTensor> {
    if !t.all_finite() {
        return Err(Error::Invalid("cannot quantize non-finite values".into()));
    }
    let (gr, gc) = block_grid(t.shape(), mode);
    let mut q = QuantizedBlockTensor {
        shape: t.shape().to_vec(),
        mode,
        codes: vec![0; t.len()],
        scales: vec![1.0; gr * gc],
    };
    let x: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
    let mut codes = std::mem::take(&mut q.codes);
    let mut scales = std::mem::take(&mut q.scales);
    q.for_each_block(|b, idx| {
        let idx: Vec<usize> = idx.collect();
        let amax = idx.iter().map(|&i| x[i].abs()).fold(0.0, f64::max);
        let s = if amax > 0.0 { amax / E4M3_MAX } else { 1.0 };
        scales[b] = s;
        for i in idx {
            codes[i] = e4m3_round(x[i] / s);
        }
    });
    q.codes = codes;
    q.scales = scales;
    Ok(q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub max_abs_err: f64,
    /// ‖approx − exact‖_F / ‖exact‖_F, or the absolute norm when `exact` is zero.
    pub rel_frobenius_err: f64,
}

impl ErrorStats {
    pub fn between<T: Scalar>(approx: &Tensor<T>, exact: &Tensor<T>) -> Result<Self> {
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        let mut max_abs: f64 = 0.0;
        if approx.shape() != exact.shape() {
            return Err(shape_err("error_stats", format!("{:?} vs {:?}", approx.shape(), exact.shape())));
        }
        for (a, e) in approx.data().iter().zip(exact.data()) {
            let (a, e) = (a.as_f64(), e.as_f64());
            diff2 += (a - e) * (a - e);
            norm2 += e * e;
            max_abs = max_abs.max((a - e).abs());
        }
        Ok(Self {
            max_abs_err: max_abs,
            rel_frobenius_err: if norm2 > 0.0 { (diff2 / norm2).sqrt() } else { diff2.sqrt() },
        })
    }
}

pub struct MatmulSim<T> {
    pub output: Tensor<T>,
    pub exact: Tensor<T>,
    pub error: ErrorStats,
}

/// `A·B` with `A` (`[.., k]`) quantized in activation tiles and `B` (`[k, n]`)
/// in weight blocks, both dequantized and multiplied in full precision.
pub fn fp8_matmul_sim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<MatmulSim<T>> {
    if b.rank() != 2 || a.rank() == 0 || a.last_dim() != b.shape()[0] {
        return Err(shape_err("fp8_matmul_sim", format!("{:?} · {:?}", a.shape(), b.shape())));
    }
    let aq = quantize(a, QuantMode::ActivationTile)?.dequantize::<T>();
    let bq = quantize(b, QuantMode::WeightBlock)?.dequantize::<T>();
    let (m, k, n) = (a.rows(), a.last_dim(), b.shape()[1]);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().expect("rank ≥ 1") = n;
    let output = Tensor::new(shape.clone(), kernels::matmul_nn(aq.data(), bq.data(), m, k, n))?;
    let exact = Tensor::new(shape, kernels::matmul_nn(a.data(), b.data(), m, k, n))?;
    let error = ErrorStats::between(&output, &exact)?;
    Ok(MatmulSim { output, exact, error })
}

/// Linear-layer weights of a model in execution order, output head last.
pub fn linear_layer_names(cfg: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    for (i, kind) in cfg.pattern.kinds().iter().enumerate() {
        let leaves: &[&str] = match kind {
            LayerKind::Mamba => &["w_x", "w_z", "w_b", "w_c", "w_dt", "w_o"],
            LayerKind::Attention => &["w_q", "w_k", "w_v", "w_out"],
            LayerKind::Ffn => &["w1", "w2"],
        };
        out.extend(leaves.iter().map(|l| format!("layers.{i}.{l}")));
    }
    if !cfg.tied_embeddings {
        out.push("head".into());
    }
    out
}

/// The first `first` and last `last` linear layers, kept in full precision.
pub fn skip_list(cfg: &ModelConfig, first: usize, last: usize) -> BTreeSet<String> {
    let names = linear_layer_names(cfg);
    let n = names.len();
    names
        .into_iter()
        .enumerate()
        .filter(|(i, _)| *i < first || *i + last >= n)
        .map(|(_, s)| s)
        .collect()
}

/// A checkpoint tensor either kept as is or stored in E4M3.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor<T> {
    Full(Tensor<T>),
    Fp8(QuantizedBlockTensor),
}

impl<T: Scalar> StoredTensor<T> {
    pub fn shape(&self) -> &[usize] {
        match self {
            Self::Full(t) => t.shape(),
            Self::Fp8(q) => &q.shape,
        }
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        match self {
            Self::Full(t) => t.clone(),
            Self::Fp8(q) => q.dequantize(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorQuantReport {
    pub name: String,
    pub quantized: bool,
    pub error: ErrorStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub skipped: Vec<String>,
    pub tensors: Vec<TensorQuantReport>,
}

/// Quantizes every linear-layer weight not in `skip` with 128×128 blocks;
/// everything else passes through untouched.
pub fn quantize_checkpoint<T: Scalar>(
    ckpt: &Checkpoint<T>,
    skip: &BTreeSet<String>,
) -> Result<(BTreeMap<String, StoredTensor<T>>, QuantizeReport)> {
    let linear: BTreeSet<String> = linear_layer_names(ckpt.config()).into_iter().collect();
    let mut stored = BTreeMap::new();
    let mut tensors = Vec::new();
    for (name, t) in ckpt.tensors() {
        if linear.contains(name) && !skip.contains(name) {
            let q = quantize(t, QuantMode::WeightBlock)?;
            let error = ErrorStats::between(&q.dequantize::<T>(), t)?;
            tensors.push(TensorQuantReport {
                name: name.clone(),
                quantized: true,
                error,
            });
            stored.insert(name.clone(), StoredTensor::Fp8(q));
        } else {
            stored.insert(name.clone(), StoredTensor::Full(t.clone()));
        }
    }
    let report = QuantizeReport {
        skipped: skip.iter().filter(|s| linear.contains(*s)).cloned().collect(),
        tensors,
    };
    Ok((stored, report))
}

/// Rebuilds a full-precision checkpoint from stored tensors.
pub fn materialize<T: Scalar>(config: ModelConfig, stored: &BTreeMap<String, StoredTensor<T>>) -> Result<Checkpoint<T>> {
    Checkpoint::new(config, stored.iter().map(|(k, v)| (k.clone(), v.to_tensor())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landmarks() {
        assert_eq!(e4m3_decode(0x00), 0.0);
        assert_eq!(e4m3_decode(0x7E), 448.0);
        assert_eq!(e4m3_decode(0x01), 2f64.powi(-9));
        assert_eq!(e4m3_decode(0x08), 2f64.powi(-6));
        assert!(e4m3_decode(0x7F).is_nan() && e4m3_decode(0xFF).is_nan());
        assert_eq!(e4m3_round(3.0), 0x44);
        assert_eq!(e4m3_decode(e4m3_round(3.0)), 3.0);
        assert_eq!(e4m3_round(1e9), 0x7E);
        assert_eq!(e4m3_round(-1e9), 0xFE);
    }

    #[test]
    fn ties_go_to_even_codes() {
        // 1.0 = 0x38, 1.125 = 0x39, 1.25 = 0x3A
        assert_eq!(e4m3_round(1.0625), 0x38);
        assert_eq!(e4m3_round(1.1875), 0x3A);
        // 384 = 0x7C, 416 = 0x7D, 448 = 0x7E
        assert_eq!(e4m3_round(400.0), 0x7C);
        assert_eq!(e4m3_round(432.0), 0x7E);
    }

    #[test]
    fn zero_block_has_unit_scale() {
        let q = quantize(&Tensor::<f64>::zeros(&[3, 200]), QuantMode::ActivationTile).unwrap();
        assert!(q.codes.iter().all(|&c| c == 0));
        assert_eq!(q.scales, vec![1.0; 6]);
    }

    #[test]
    fn skip_list_takes_both_ends() {
        let cfg = ModelConfig::nano_candidate(64, 64, 8, 10);
        let names = linear_layer_names(&cfg);
        let s = skip_list(&cfg, 4, 4);
        assert_eq!(s.len(), 8);
        assert!(s.contains(&names[0]) && s.contains("head"));
        assert!(!s.contains(&names[4]));
    }
}
