//! Reverse-mode differentiation over the kernels in [`crate::kernels`].
//!
//! A [`Tape`] records every operation in evaluation order, so node ids are a
//! valid topological order by construction. A tape is single-writer; build a
//! fresh one per forward pass.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, AttnDims, ScanDims, ScanInputs};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    SquaredRelu(Var),
    Silu(Var),
    Softplus(Var),
    RmsNorm { x: Var, gamma: Var, group: usize, denom: Option<usize>, inv: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    CausalSoftmax { x: Var, s: usize },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<T> },
    Conv1d { x: Var, w: Var, batch: usize, seq: usize },
    Scan { x: Var, dt: Var, a_log: Var, b: Var, c: Var, d: Var, dims: ScanDims },
    CrossEntropy { logits: Var, grad: Vec<T> },
    ForwardKl { student: Var, grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves that require them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape if it did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn out_shape(prefix: &[usize], last: usize) -> Vec<usize> {
    let mut s = prefix[..prefix.len().saturating_sub(1)].to_vec();
    s.push(last);
    s
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `a[.., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let k = va.last_dim();
        if vb.rank() != 2 || vb.shape()[0] != k || va.rank() == 0 {
            return Err(shape_err("matmul", format!("{:?} · {:?}", va.shape(), vb.shape())));
        }
        let (m, n) = (va.rows(), vb.shape()[1]);
        let data = kernels::matmul_nn(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(out_shape(va.shape(), n), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a[.., k] · b[n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let k = va.last_dim();
        if vb.rank() != 2 || vb.shape()[1] != k || va.rank() == 0 {
            return Err(shape_err("matmul_nt", format!("{:?} · {:?}ᵀ", va.shape(), vb.shape())));
        }
        let (m, n) = (va.rows(), vb.shape()[0]);
        let data = kernels::matmul_nt(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(out_shape(va.shape(), n), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulNt { a, b, m, k, n }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn squared_relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::squared_relu);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SquaredRelu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::silu);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::softplus);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Softplus(a), rg)
    }

    /// RMSNorm along the last axis.
    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        self.rmsnorm_grouped(x, gamma, eps, d, None)
    }

    /// RMSNorm over consecutive groups of `group` channels of the last axis.
    /// `denom` replaces the group size as the mean's denominator.
    pub fn rmsnorm_grouped(
        &mut self,
        x: Var,
        gamma: Var,
        eps: T,
        group: usize,
        denom: Option<usize>,
    ) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gamma));
        let d = vx.last_dim();
        if vg.shape() != [d] || group == 0 || d % group != 0 {
            return Err(shape_err(
                "rmsnorm",
                format!("x {:?}, gamma {:?}, group {group}", vx.shape(), vg.shape()),
            ));
        }
        let (data, inv) = kernels::rmsnorm(vx.data(), vg.data(), eps, group, denom)?;
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, gamma]);
        Ok(self.push(
            value,
            Op::RmsNorm {
                x,
                gamma,
                group,
                denom,
                inv,
            },
            rg,
        ))
    }

    /// Row lookup `table[ids[i], :]`, shaped `[*ids_shape, d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err("gather", format!("table {:?}, ids {ids_shape:?}", vt.shape())));
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange { id, vocab: rows });
            }
            data.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the last axis of `[.., s, s]` with a causal mask.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let r = vx.rank();
        if r < 2 || vx.shape()[r - 1] != vx.shape()[r - 2] {
            return Err(shape_err("causal_softmax", format!("{:?}", vx.shape())));
        }
        let s = vx.shape()[r - 1];
        let value = Tensor::new(vx.shape().to_vec(), kernels::causal_softmax(vx.data(), s))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::CausalSoftmax { x, s }, rg))
    }

    /// Causal grouped-query attention over projected `q [b,s,n_q·hd]`,
    /// `k`, `v [b,s,n_kv·hd]`. Output is the concatenated heads.
    pub fn gqa_attention(&mut self, q: Var, k: Var, v: Var, n_q: usize, n_kv: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let bad = || {
            shape_err(
                "gqa_attention",
                format!("q {:?}, k {:?}, v {:?}, heads {n_q}/{n_kv}", vq.shape(), vk.shape(), vv.shape()),
            )
        };
        if vq.rank() != 3 || vk.shape() != vv.shape() || vk.rank() != 3 || n_q == 0 || n_kv == 0 {
            return Err(bad());
        }
        let (batch, seq, qw) = (vq.shape()[0], vq.shape()[1], vq.shape()[2]);
        if !n_q.is_multiple_of(n_kv) || qw % n_q != 0 || vk.shape()[..2] != [batch, seq] {
            return Err(bad());
        }
        let head_dim = qw / n_q;
        if vk.shape()[2] != n_kv * head_dim {
            return Err(bad());
        }
        let dims = AttnDims {
            batch,
            seq,
            n_q,
            n_kv,
            head_dim,
        };
        let (out, probs) = kernels::gqa_attention(vq.data(), vk.data(), vv.data(), dims);
        let value = Tensor::new(vec![batch, seq, qw], out)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            },
            rg,
        ))
    }

    /// Depthwise causal convolution of `x [b,s,c]` with kernels `w [c,width]`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 3 || vw.rank() != 2 || vw.shape()[0] != vx.shape()[2] {
            return Err(shape_err("causal_conv1d", format!("x {:?}, w {:?}", vx.shape(), vw.shape())));
        }
        let (batch, seq, ch) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let width = vw.shape()[1];
        let data = kernels::causal_conv1d(vx.data(), vw.data(), batch, seq, ch, width);
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(value, Op::Conv1d { x, w, batch, seq }, rg))
    }

    /// Selective scan (see [`kernels::selective_scan_chunked`]). `chunk = None`
    /// evaluates the plain sequential recurrence.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        dt: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d: Var,
        groups: usize,
        chunk: Option<usize>,
    ) -> Result<Var> {
        let dims = {
            let (vx, vdt, va, vb, vc, vd) = (
                self.value(x),
                self.value(dt),
                self.value(a_log),
                self.value(b),
                self.value(c),
                self.value(d),
            );
            let bad = || {
                shape_err(
                    "selective_scan",
                    format!(
                        "x {:?}, dt {:?}, a_log {:?}, B {:?}, C {:?}, D {:?}, groups {groups}",
                        vx.shape(),
                        vdt.shape(),
                        va.shape(),
                        vb.shape(),
                        vc.shape(),
                        vd.shape()
                    ),
                )
            };
            if vx.rank() != 3 || vdt.rank() != 3 || vb.rank() != 3 || groups == 0 {
                return Err(bad());
            }
            let (batch, seq) = (vx.shape()[0], vx.shape()[1]);
            let heads = vdt.shape()[2];
            if heads == 0
                || heads % groups != 0
                || vx.shape()[2] % heads != 0
                || vb.shape()[2] % groups != 0
                || vdt.shape()[..2] != [batch, seq]
                || vb.shape()[..2] != [batch, seq]
                || vc.shape() != vb.shape()
                || va.shape() != [heads]
                || vd.shape() != [heads]
            {
                return Err(bad());
            }
            ScanDims {
                batch,
                seq,
                heads,
                head_dim: vx.shape()[2] / heads,
                groups,
                state: vb.shape()[2] / groups,
            }
        };
        let inp = self.scan_inputs(x, dt, a_log, b, c, d);
        let data = match chunk {
            Some(len) => kernels::selective_scan_chunked(inp, dims, len),
            None => kernels::selective_scan_sequential(inp, dims),
        };
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, dt, a_log, b, c, d]);
        Ok(self.push(
            value,
            Op::Scan {
                x,
                dt,
                a_log,
                b,
                c,
                d,
                dims,
            },
            rg,
        ))
    }

    fn scan_inputs(&self, x: Var, dt: Var, a_log: Var, b: Var, c: Var, d: Var) -> ScanInputs<'_, T> {
        ScanInputs {
            x: self.value(x).data(),
            dt: self.value(dt).data(),
            a_log: self.value(a_log).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: self.value(d).data(),
        }
    }

    /// Mean token cross-entropy of `logits [.., vocab]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let vocab = vl.last_dim();
        if vl.rows() != targets.len() || targets.is_empty() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?}, {} targets", vl.shape(), targets.len()),
            ));
        }
        if let Some(&id) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        let (loss, grad) = kernels::cross_entropy(vl.data(), targets, vocab);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, grad }, rg))
    }

    /// Mean over positions of `KL(softmax(teacher) ‖ softmax(student))`.
    /// The teacher is a plain tensor and never receives a gradient.
    pub fn forward_kl(&mut self, student: Var, teacher: &Tensor<T>) -> Result<Var> {
        let vs = self.value(student);
        vs.expect_same_shape(teacher, "forward_kl")?;
        if vs.is_empty() {
            return Err(shape_err("forward_kl", "empty logits"));
        }
        let (loss, grad) = kernels::forward_kl(vs.data(), teacher.data(), vs.last_dim());
        let rg = self.any_grad(&[student]);
        Ok(self.push(Tensor::scalar(loss), Op::ForwardKl { student, grad }, rg))
    }

    /// Gradients of scalar `loss` with respect to every leaf requiring one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(&node.op, &node.value, g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// `grad(loss, params)`: gradients for the given leaves, zeros for unused ones.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        let g = self.backward(loss)?;
        Ok(params.iter().map(|&p| g.wrt(p)).collect())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(data) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.value(v).shape().to_vec(), data)?);
            }
        }
        Ok(())
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    let da = kernels::matmul_nt(gd, self.value(b).data(), m, n, k);
                    self.accumulate(grads, a, da)?;
                }
                if self.requires_grad(b) {
                    let db = kernels::matmul_tn(self.value(a).data(), gd, k, m, n);
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    let da = kernels::matmul_nn(gd, self.value(b).data(), m, n, k);
                    self.accumulate(grads, a, da)?;
                }
                if self.requires_grad(b) {
                    let db = kernels::matmul_tn(gd, self.value(a).data(), n, m, k);
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, gd.to_vec())?;
                self.accumulate(grads, b, gd.to_vec())?;
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect())?;
                self.accumulate(grads, b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect())?;
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, gd.iter().map(|&g| g * c).collect())?,
            &Op::Sum(a) => {
                let g0 = gd[0];
                self.accumulate(grads, a, vec![g0; self.value(a).len()])?;
            }
            &Op::Reshape(a) => self.accumulate(grads, a, g.into_data())?,
            &Op::SquaredRelu(a) => {
                let x = self.value(a).data();
                let dx = gd.iter().zip(x).map(|(&g, &x)| g * kernels::squared_relu_grad(x)).collect();
                self.accumulate(grads, a, dx)?;
            }
            &Op::Silu(a) => {
                let x = self.value(a).data();
                let dx = gd.iter().zip(x).map(|(&g, &x)| g * kernels::silu_grad(x)).collect();
                self.accumulate(grads, a, dx)?;
            }
            &Op::Softplus(a) => {
                let x = self.value(a).data();
                let dx = gd.iter().zip(x).map(|(&g, &x)| g * kernels::sigmoid(x)).collect();
                self.accumulate(grads, a, dx)?;
            }
            Op::RmsNorm {
                x,
                gamma,
                group,
                denom,
                inv,
            } => {
                let (dx, dgamma) = kernels::rmsnorm_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    inv,
                    gd,
                    *group,
                    *denom,
                );
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, dgamma)?;
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let d = vt.shape()[1];
                let mut dt = vec![T::zero(); vt.len()];
                for (i, &id) in ids.iter().enumerate() {
                    for (acc, &gv) in dt[id * d..(id + 1) * d].iter_mut().zip(&gd[i * d..(i + 1) * d]) {
                        *acc += gv;
                    }
                }
                self.accumulate(grads, *table, dt)?;
            }
            &Op::CausalSoftmax { x, s } => {
                let dx = kernels::causal_softmax_backward(out.data(), gd, s);
                self.accumulate(grads, x, dx)?;
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (dq, dk, dv) = kernels::gqa_attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    gd,
                    *dims,
                );
                self.accumulate(grads, *q, dq)?;
                self.accumulate(grads, *k, dk)?;
                self.accumulate(grads, *v, dv)?;
            }
            &Op::Conv1d { x, w, batch, seq } => {
                let vw = self.value(w);
                let (ch, width) = (vw.shape()[0], vw.shape()[1]);
                let (dx, dw) =
                    kernels::causal_conv1d_backward(self.value(x).data(), vw.data(), gd, batch, seq, ch, width);
                self.accumulate(grads, x, dx)?;
                self.accumulate(grads, w, dw)?;
            }
            &Op::Scan {
                x,
                dt,
                a_log,
                b,
                c,
                d,
                dims,
            } => {
                let sg = kernels::selective_scan_backward(self.scan_inputs(x, dt, a_log, b, c, d), gd, dims);
                self.accumulate(grads, x, sg.x)?;
                self.accumulate(grads, dt, sg.dt)?;
                self.accumulate(grads, a_log, sg.a_log)?;
                self.accumulate(grads, b, sg.b)?;
                self.accumulate(grads, c, sg.c)?;
                self.accumulate(grads, d, sg.d)?;
            }
            Op::CrossEntropy { logits, grad } => {
                let s = gd[0];
                self.accumulate(grads, *logits, grad.iter().map(|&v| v * s).collect())?;
            }
            Op::ForwardKl { student, grad } => {
                let s = gd[0];
                self.accumulate(grads, *student, grad.iter().map(|&v| v * s).collect())?;
            }
        }
        Ok(())
    }
}

/// Forward-only convenience: `max(0, x)²` elementwise.
pub fn squared_relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(kernels::squared_relu)
}

/// Forward-only convenience: RMSNorm along the last axis.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (xv, gv) = (tape.constant(x.clone()), tape.constant(gamma.clone()));
    let y = tape.rmsnorm(xv, gv, eps)?;
    Ok(tape.value(y).clone())
}
