//! Slice-level forward and backward kernels.
//!
//! Everything here works on flat row-major buffers; shape bookkeeping lives in
//! [`crate::autodiff`]. Each backward kernel is the exact adjoint of its
//! forward counterpart.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Below this many multiply-adds a matmul runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 18;

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn for_each_row<T: Scalar>(out: &mut [T], n: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if n == 0 {
        return;
    }
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `C[m,n] = A[m,k] · B[k,n]`.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for_each_row(&mut c, n, m * n * k, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            axpy(aip, &b[p * n..(p + 1) * n], row);
        }
    });
    c
}

/// `C[m,n] = A[m,k] · B[n,k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for_each_row(&mut c, n, m * n * k, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, cij) in row.iter_mut().enumerate() {
            *cij = dot(ai, &b[j * k..(j + 1) * k]);
        }
    });
    c
}

/// `C[m,n] = A[k,m]ᵀ · B[k,n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for_each_row(&mut c, n, m * n * k, |i, row| {
        for p in 0..k {
            axpy(a[p * m + i], &b[p * n..(p + 1) * n], row);
        }
    });
    c
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn squared_relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x * x
    } else {
        T::zero()
    }
}

#[inline]
pub fn squared_relu_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::of(2.0) * x
    } else {
        T::zero()
    }
}

/// RMS normalisation over consecutive groups of `group` elements of each row.
///
/// `gamma` has one entry per row element. `denom` overrides the mean's
/// denominator (the masked-channel oracle uses it); by default it is `group`.
/// Returns the output and one inverse RMS per group.
pub fn rmsnorm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    eps: T,
    group: usize,
    denom: Option<usize>,
) -> Result<(Vec<T>, Vec<T>)> {
    let d = gamma.len();
    let denom = T::of(denom.unwrap_or(group) as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / group.max(1));
    for (g, (xs, ys)) in x.chunks(group).zip(y.chunks_mut(group)).enumerate() {
        let ms = xs.iter().map(|&v| v * v).sum::<T>() / denom + eps;
        if ms <= T::zero() {
            return Err(Error::DegenerateNorm);
        }
        let r = T::one() / ms.sqrt();
        let off = (g * group) % d;
        for (i, (yi, &xi)) in ys.iter_mut().zip(xs).enumerate() {
            *yi = gamma[off + i] * xi * r;
        }
        inv.push(r);
    }
    Ok((y, inv))
}

/// Adjoint of [`rmsnorm`]; returns `(dx, dgamma)`.
pub fn rmsnorm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    inv: &[T],
    dy: &[T],
    group: usize,
    denom: Option<usize>,
) -> (Vec<T>, Vec<T>) {
    let d = gamma.len();
    let denom = T::of(denom.unwrap_or(group) as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); d];
    for (g, ((xs, dys), dxs)) in x
        .chunks(group)
        .zip(dy.chunks(group))
        .zip(dx.chunks_mut(group))
        .enumerate()
    {
        let r = inv[g];
        let off = (g * group) % d;
        let mut s = T::zero();
        for i in 0..xs.len() {
            s += gamma[off + i] * dys[i] * xs[i];
            dgamma[off + i] += dys[i] * xs[i] * r;
        }
        let c = r * r * r * s / denom;
        for i in 0..xs.len() {
            dxs[i] = r * gamma[off + i] * dys[i] - xs[i] * c;
        }
    }
    (dx, dgamma)
}

/// Row-wise softmax over `[.., s, s]` with a causal mask: row `t` only sees
/// columns `0..=t`; masked entries are exactly zero.
pub fn causal_softmax<T: Scalar>(x: &[T], s: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (r, (xr, yr)) in x.chunks(s).zip(y.chunks_mut(s)).enumerate() {
        let t = r % s;
        softmax_into(&xr[..=t], &mut yr[..=t]);
    }
    y
}

pub fn causal_softmax_backward<T: Scalar>(y: &[T], dy: &[T], s: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for (r, ((yr, dyr), dxr)) in y.chunks(s).zip(dy.chunks(s)).zip(dx.chunks_mut(s)).enumerate() {
        let t = r % s;
        let dotp: T = (0..=t).map(|u| yr[u] * dyr[u]).sum();
        for u in 0..=t {
            dxr[u] = yr[u] * (dyr[u] - dotp);
        }
    }
    dx
}

fn softmax_into<T: Scalar>(x: &[T], y: &mut [T]) {
    let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut z = T::zero();
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = (xi - m).exp();
        z += *yi;
    }
    for yi in y.iter_mut() {
        *yi /= z;
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Attention geometry shared by forward and backward.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub n_q: usize,
    pub n_kv: usize,
    pub head_dim: usize,
}

impl AttnDims {
    /// KV head serving query head `i`.
    #[inline]
    pub fn kv_head(&self, i: usize) -> usize {
        i * self.n_kv / self.n_q
    }
}

/// Causal grouped-query attention. Returns the concatenated head outputs
/// `[b, s, n_q·head_dim]` and the attention probabilities `[b, n_q, s, s]`.
pub fn gqa_attention<T: Scalar>(q: &[T], k: &[T], v: &[T], dims: AttnDims) -> (Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        seq,
        n_q,
        n_kv,
        head_dim: hd,
    } = dims;
    let qw = n_q * hd;
    let kw = n_kv * hd;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut out = vec![T::zero(); batch * seq * qw];
    let mut probs = vec![T::zero(); batch * n_q * seq * seq];
    let mut scores = vec![T::zero(); seq];
    for b in 0..batch {
        for i in 0..n_q {
            let j = dims.kv_head(i);
            for t in 0..seq {
                let qt = &q[(b * seq + t) * qw + i * hd..][..hd];
                for u in 0..=t {
                    let ku = &k[(b * seq + u) * kw + j * hd..][..hd];
                    scores[u] = dot(qt, ku) * scale;
                }
                let prow = &mut probs[((b * n_q + i) * seq + t) * seq..][..seq];
                softmax_into(&scores[..=t], &mut prow[..=t]);
                let ot = &mut out[(b * seq + t) * qw + i * hd..][..hd];
                for u in 0..=t {
                    let vu = &v[(b * seq + u) * kw + j * hd..][..hd];
                    axpy(prow[u], vu, ot);
                }
            }
        }
    }
    (out, probs)
}

/// Adjoint of [`gqa_attention`]; returns `(dq, dk, dv)`.
pub fn gqa_attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dims: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        seq,
        n_q,
        n_kv,
        head_dim: hd,
    } = dims;
    let qw = n_q * hd;
    let kw = n_kv * hd;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); seq];
    for b in 0..batch {
        for i in 0..n_q {
            let j = dims.kv_head(i);
            for t in 0..seq {
                let prow = &probs[((b * n_q + i) * seq + t) * seq..][..seq];
                let dot_t = &dout[(b * seq + t) * qw + i * hd..][..hd];
                let mut total = T::zero();
                for u in 0..=t {
                    let vu = &v[(b * seq + u) * kw + j * hd..][..hd];
                    let dp = dot(dot_t, vu);
                    ds[u] = dp;
                    total += prow[u] * dp;
                    axpy(prow[u], dot_t, &mut dv[(b * seq + u) * kw + j * hd..][..hd]);
                }
                let qt_off = (b * seq + t) * qw + i * hd;
                for u in 0..=t {
                    let g = prow[u] * (ds[u] - total) * scale;
                    let ku_off = (b * seq + u) * kw + j * hd;
                    for c in 0..hd {
                        dq[qt_off + c] += g * k[ku_off + c];
                        dk[ku_off + c] += g * q[qt_off + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Depthwise causal convolution: `y[b,t,c] = Σ_j w[c,j]·x[b, t-(K-1)+j, c]`.
pub fn causal_conv1d<T: Scalar>(x: &[T], w: &[T], batch: usize, seq: usize, ch: usize, width: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        for t in 0..seq {
            let yt = &mut y[(b * seq + t) * ch..][..ch];
            for j in 0..width {
                let Some(src) = (t + j + 1).checked_sub(width) else {
                    continue;
                };
                let xs = &x[(b * seq + src) * ch..][..ch];
                for c in 0..ch {
                    yt[c] += w[c * width + j] * xs[c];
                }
            }
        }
    }
    y
}

/// Adjoint of [`causal_conv1d`]; returns `(dx, dw)`.
pub fn causal_conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    batch: usize,
    seq: usize,
    ch: usize,
    width: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for b in 0..batch {
        for t in 0..seq {
            let dyt = &dy[(b * seq + t) * ch..][..ch];
            for j in 0..width {
                let Some(src) = (t + j + 1).checked_sub(width) else {
                    continue;
                };
                let off = (b * seq + src) * ch;
                for c in 0..ch {
                    dx[off + c] += w[c * width + j] * dyt[c];
                    dw[c * width + j] += x[off + c] * dyt[c];
                }
            }
        }
    }
    (dx, dw)
}

/// Mean cross-entropy over rows of `logits[rows, vocab]`; also returns the
/// gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &[T], targets: &[usize], vocab: usize) -> (T, Vec<T>) {
    let rows = targets.len();
    let inv_rows = T::one() / T::of(rows as f64);
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    for (r, &tgt) in targets.iter().enumerate() {
        let lr = &logits[r * vocab..][..vocab];
        let gr = &mut grad[r * vocab..][..vocab];
        log_softmax_row(lr, gr);
        loss -= gr[tgt];
        for g in gr.iter_mut() {
            *g = g.exp() * inv_rows;
        }
        gr[tgt] -= inv_rows;
    }
    (loss * inv_rows, grad)
}

/// Mean over rows of `KL(softmax(teacher) ‖ softmax(student))`, plus the
/// gradient with respect to the student logits.
pub fn forward_kl<T: Scalar>(student: &[T], teacher: &[T], vocab: usize) -> (T, Vec<T>) {
    let rows = student.len() / vocab.max(1);
    let inv_rows = T::one() / T::of(rows as f64);
    let mut grad = vec![T::zero(); student.len()];
    let mut lt = vec![T::zero(); vocab];
    let mut loss = T::zero();
    for r in 0..rows {
        let gr = &mut grad[r * vocab..][..vocab];
        log_softmax_row(&student[r * vocab..][..vocab], gr);
        log_softmax_row(&teacher[r * vocab..][..vocab], &mut lt);
        for c in 0..vocab {
            let pt = lt[c].exp();
            if pt > T::zero() {
                loss += pt * (lt[c] - gr[c]);
            }
            gr[c] = (gr[c].exp() - pt) * inv_rows;
        }
    }
    (loss * inv_rows, grad)
}

/// Geometry of the selective scan.
///
/// Channel layouts: `x`/`y` are `[batch, seq, heads·head_dim]` (head-major),
/// `dt` is `[batch, seq, heads]`, `B`/`C` are `[batch, seq, groups·state]`.
/// Heads are split into `groups` contiguous blocks sharing that group's B and C.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub groups: usize,
    pub state: usize,
}

impl ScanDims {
    #[inline]
    pub fn group_of(&self, h: usize) -> usize {
        h / (self.heads / self.groups)
    }
}

/// Borrowed inputs of one selective-scan evaluation.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub x: &'a [T],
    pub dt: &'a [T],
    pub a_log: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d: &'a [T],
}

/// Reference recurrence, one step at a time:
/// `h_t = ā_t·h_{t-1} + dt_t·x_t·B_tᵀ`, `y_t = h_t·C_t + D·x_t`,
/// with `ā_t = exp(-dt_t·exp(A_log))`.
pub fn selective_scan_sequential<T: Scalar>(inp: ScanInputs<'_, T>, dims: ScanDims) -> Vec<T> {
    let ScanDims {
        batch,
        seq,
        heads,
        head_dim: p_dim,
        groups,
        state: n_dim,
    } = dims;
    let xw = heads * p_dim;
    let bw = groups * n_dim;
    let mut y = vec![T::zero(); inp.x.len()];
    let mut h = vec![T::zero(); p_dim * n_dim];
    for b in 0..batch {
        for hd in 0..heads {
            let g = dims.group_of(hd);
            let rate = inp.a_log[hd].exp();
            h.iter_mut().for_each(|v| *v = T::zero());
            for t in 0..seq {
                let row = b * seq + t;
                let dt = inp.dt[row * heads + hd];
                let decay = (-dt * rate).exp();
                let xt = &inp.x[row * xw + hd * p_dim..][..p_dim];
                let bt = &inp.b[row * bw + g * n_dim..][..n_dim];
                let ct = &inp.c[row * bw + g * n_dim..][..n_dim];
                let yt = &mut y[row * xw + hd * p_dim..][..p_dim];
                for p in 0..p_dim {
                    let hp = &mut h[p * n_dim..][..n_dim];
                    let u = dt * xt[p];
                    for n in 0..n_dim {
                        hp[n] = decay * hp[n] + u * bt[n];
                    }
                    yt[p] = dot(hp, ct) + inp.d[hd] * xt[p];
                }
            }
        }
    }
    y
}

/// Chunked form of the same scan: within a chunk the output is a masked
/// quadratic form over positions (decay ratios from cumulative log-decays),
/// and only the chunk-boundary state is carried forward.
pub fn selective_scan_chunked<T: Scalar>(inp: ScanInputs<'_, T>, dims: ScanDims, chunk: usize) -> Vec<T> {
    let ScanDims {
        batch,
        seq,
        heads,
        head_dim: p_dim,
        groups,
        state: n_dim,
    } = dims;
    let chunk = chunk.max(1);
    let xw = heads * p_dim;
    let bw = groups * n_dim;
    let mut y = vec![T::zero(); inp.x.len()];
    let mut h0 = vec![T::zero(); p_dim * n_dim];
    let mut cum = vec![T::zero(); chunk];
    let mut bc = vec![T::zero(); chunk * chunk];
    for b in 0..batch {
        for hd in 0..heads {
            let g = dims.group_of(hd);
            let rate = inp.a_log[hd].exp();
            h0.iter_mut().for_each(|v| *v = T::zero());
            let mut start = 0;
            while start < seq {
                let len = chunk.min(seq - start);
                let row = |j: usize| b * seq + start + j;
                let mut acc = T::zero();
                for j in 0..len {
                    acc -= inp.dt[row(j) * heads + hd] * rate;
                    cum[j] = acc;
                }
                // B_i · C_j for i ≤ j
                for j in 0..len {
                    let cj = &inp.c[row(j) * bw + g * n_dim..][..n_dim];
                    for i in 0..=j {
                        let bi = &inp.b[row(i) * bw + g * n_dim..][..n_dim];
                        bc[j * chunk + i] = dot(bi, cj);
                    }
                }
                for j in 0..len {
                    let cj = &inp.c[row(j) * bw + g * n_dim..][..n_dim];
                    let carry = cum[j].exp();
                    let xj = &inp.x[row(j) * xw + hd * p_dim..][..p_dim];
                    let yj_off = row(j) * xw + hd * p_dim;
                    for p in 0..p_dim {
                        y[yj_off + p] = carry * dot(&h0[p * n_dim..][..n_dim], cj) + inp.d[hd] * xj[p];
                    }
                    for i in 0..=j {
                        let w = (cum[j] - cum[i]).exp() * inp.dt[row(i) * heads + hd] * bc[j * chunk + i];
                        let xi = &inp.x[row(i) * xw + hd * p_dim..][..p_dim];
                        axpy(w, xi, &mut y[yj_off..][..p_dim]);
                    }
                }
                let last = cum[len - 1];
                let carry = last.exp();
                h0.iter_mut().for_each(|v| *v *= carry);
                for i in 0..len {
                    let w = (last - cum[i]).exp() * inp.dt[row(i) * heads + hd];
                    let xi = &inp.x[row(i) * xw + hd * p_dim..][..p_dim];
                    let bi = &inp.b[row(i) * bw + g * n_dim..][..n_dim];
                    for p in 0..p_dim {
                        axpy(w * xi[p], bi, &mut h0[p * n_dim..][..n_dim]);
                    }
                }
                start += len;
            }
        }
    }
    y
}

/// Gradients of the selective scan with respect to each input.
pub struct ScanGrads<T> {
    pub x: Vec<T>,
    pub dt: Vec<T>,
    pub a_log: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

/// Adjoint of the scan. States are recomputed sequentially, then swept in
/// reverse with the running state adjoint `G_t = dy_t·C_tᵀ + ā_{t+1}·G_{t+1}`.
pub fn selective_scan_backward<T: Scalar>(inp: ScanInputs<'_, T>, dy: &[T], dims: ScanDims) -> ScanGrads<T> {
    let ScanDims {
        batch,
        seq,
        heads,
        head_dim: p_dim,
        groups,
        state: n_dim,
    } = dims;
    let xw = heads * p_dim;
    let bw = groups * n_dim;
    let pn = p_dim * n_dim;
    let mut grads = ScanGrads {
        x: vec![T::zero(); inp.x.len()],
        dt: vec![T::zero(); inp.dt.len()],
        a_log: vec![T::zero(); heads],
        b: vec![T::zero(); inp.b.len()],
        c: vec![T::zero(); inp.c.len()],
        d: vec![T::zero(); heads],
    };
    let mut states = vec![T::zero(); (seq + 1) * pn];
    let mut gstate = vec![T::zero(); pn];
    let mut decays = vec![T::zero(); seq];
    for b in 0..batch {
        for hd in 0..heads {
            let g = dims.group_of(hd);
            let rate = inp.a_log[hd].exp();
            let dskip = inp.d[hd];
            for t in 0..seq {
                let row = b * seq + t;
                let dt = inp.dt[row * heads + hd];
                let decay = (-dt * rate).exp();
                decays[t] = decay;
                let xt = &inp.x[row * xw + hd * p_dim..][..p_dim];
                let bt = &inp.b[row * bw + g * n_dim..][..n_dim];
                let (prev, next) = states.split_at_mut((t + 1) * pn);
                let prev = &prev[t * pn..];
                let next = &mut next[..pn];
                for p in 0..p_dim {
                    let u = dt * xt[p];
                    for n in 0..n_dim {
                        next[p * n_dim + n] = decay * prev[p * n_dim + n] + u * bt[n];
                    }
                }
            }
            gstate.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..seq).rev() {
                let row = b * seq + t;
                let dt = inp.dt[row * heads + hd];
                let decay = decays[t];
                let xo = row * xw + hd * p_dim;
                let bo = row * bw + g * n_dim;
                let xt = &inp.x[xo..][..p_dim];
                let bt = &inp.b[bo..][..n_dim];
                let ct = &inp.c[bo..][..n_dim];
                let dyt = &dy[xo..][..p_dim];
                let h_t = &states[(t + 1) * pn..][..pn];
                let h_prev = &states[t * pn..][..pn];
                // G_t (the carry from t+1 is already in gstate)
                for p in 0..p_dim {
                    axpy(dyt[p], ct, &mut gstate[p * n_dim..][..n_dim]);
                }
                let mut d_decay = T::zero();
                let mut d_dt = T::zero();
                for p in 0..p_dim {
                    let gp = &gstate[p * n_dim..][..n_dim];
                    axpy(dyt[p], &h_t[p * n_dim..][..n_dim], &mut grads.c[bo..][..n_dim]);
                    grads.d[hd] += dyt[p] * xt[p];
                    let gb = dot(gp, bt);
                    grads.x[xo + p] += dskip * dyt[p] + dt * gb;
                    axpy(dt * xt[p], gp, &mut grads.b[bo..][..n_dim]);
                    d_dt += gb * xt[p];
                    d_decay += dot(gp, &h_prev[p * n_dim..][..n_dim]);
                }
                // ∂ā/∂dt = -rate·ā, ∂ā/∂A_log = -dt·rate·ā
                d_dt -= d_decay * rate * decay;
                grads.dt[row * heads + hd] += d_dt;
                grads.a_log[hd] -= d_decay * dt * rate * decay;
                gstate.iter_mut().for_each(|v| *v *= decay);
            }
        }
    }
    grads
}
