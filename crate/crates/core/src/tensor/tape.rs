use std::f64::consts::{PI, SQRT_2};
use std::sync::atomic::{AtomicU32, Ordering};

use serde::{Deserialize, Serialize};

use super::kernels::{bmm, bmm_nt, bmm_tn, gemm, transpose};
use super::Tensor;
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// `a[m×k] · b[n×k]ᵀ`
    MatMulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    AddBias { x: usize, b: usize, d: usize },
    Mul { a: usize, b: usize },
    Affine { x: usize, scale: T },
    Relu { x: usize },
    Gelu { x: usize },
    Silu { x: usize },
    Norm { x: usize, gain: usize, bias: Option<usize>, kind: NormKind, d: usize, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: usize, ids: Vec<usize>, d: usize },
    SplitHeads { x: usize, batch: usize, seq: usize, heads: usize, hd: usize },
    MergeHeads { x: usize, batch: usize, seq: usize, heads: usize, hd: usize },
    Rope { x: usize, seq: usize, hd: usize, cos: Vec<T>, sin: Vec<T> },
    Scores { q: usize, k: usize, groups: usize, seq: usize, hd: usize, scale: T },
    AttnApply { p: usize, v: usize, groups: usize, seq: usize, hd: usize },
    CausalSoftmax { x: usize, seq: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T>, vocab: usize },
    Sum { x: usize },
    EntropyMean { p: usize, seq: usize, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-pass recording of tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` is a single reverse sweep.
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index()).and_then(Option::take)
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    x * half * (T::one() + (x / T::of(SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x / T::of(SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() / T::of((2.0 * PI).sqrt());
    cdf + x * pdf
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Exact-erf GELU on a scalar.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    gelu(x)
}

/// `x·sigmoid(x)` on a scalar.
pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(v.index())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            let bad = value.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::NonFinite {
                op: name,
                detail: format!("shape {:?}, first bad flat index {bad}", value.shape()),
            });
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { tape: self.id, idx })
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(config_err(format!("matmul shape mismatch {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::zero(); m * n];
        gemm(m, k, n, self.nodes[ai].value.data(), self.nodes[bi].value.data(), &mut c);
        let rg = self.rg(&[ai, bi]);
        self.push("matmul", Tensor::new([m, n], c)?, Op::MatMul { a: ai, b: bi, m, k, n }, rg)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(config_err(format!("matmul_nt shape mismatch {sa:?} x {sb:?}ᵀ")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let bt = transpose(n, k, self.nodes[bi].value.data());
        let mut c = vec![T::zero(); m * n];
        gemm(m, k, n, self.nodes[ai].value.data(), &bt, &mut c);
        let rg = self.rg(&[ai, bi]);
        self.push("matmul_nt", Tensor::new([m, n], c)?, Op::MatMulNt { a: ai, b: bi, m, k, n }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return Err(config_err(format!("add shape mismatch {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[ai, bi]);
        self.push("add", out, Op::Add { a: ai, b: bi }, rg)
    }

    /// Broadcast-adds a length-`d` vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.check(x)?, self.check(b)?);
        let (vx, vb) = (&self.nodes[xi].value, &self.nodes[bi].value);
        let d = vx.last_dim();
        if vb.numel() != d {
            return Err(config_err(format!("bias of length {} for last dim {d}", vb.numel())));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            row.iter_mut().zip(vb.data()).for_each(|(r, &bv)| *r += bv);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[xi, bi]);
        self.push("add_bias", out, Op::AddBias { x: xi, b: bi, d }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return Err(config_err(format!("mul shape mismatch {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[ai, bi]);
        self.push("mul", out, Op::Mul { a: ai, b: bi }, rg)
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let (s, c) = (T::of(scale), T::of(shift));
        let v = &self.nodes[xi].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| s * e + c).collect())?;
        let rg = self.rg(&[xi]);
        self.push("affine", out, Op::Affine { x: xi, scale: s }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |e| e.max(T::zero()), |xi| Op::Relu { x: xi })
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "gelu", gelu, |xi| Op::Gelu { x: xi })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "silu", silu_scalar, |xi| Op::Silu { x: xi })
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())?;
        let rg = self.rg(&[xi]);
        self.push(name, out, op(xi), rg)
    }

    /// Layer or RMS normalization over the last axis followed by the affine map.
    pub fn normalize(&mut self, x: Var, kind: NormKind, gain: Var, bias: Option<Var>, eps: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let gi = self.check(gain)?;
        let bi = bias.map(|b| self.check(b)).transpose()?;
        let vx = &self.nodes[xi].value;
        let d = vx.last_dim();
        if self.nodes[gi].value.numel() != d || bi.is_some_and(|b| self.nodes[b].value.numel() != d) {
            return Err(config_err(format!("norm affine parameters do not match width {d}")));
        }
        if kind == NormKind::RmsNorm && bi.is_some() {
            return Err(config_err("rms_norm takes no bias"));
        }
        let rows = vx.numel() / d;
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let out = &mut xhat[r * d..(r + 1) * d];
            match kind {
                NormKind::LayerNorm => {
                    let mean = row.iter().copied().sum::<T>() / dn;
                    let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dn;
                    let rs = T::one() / (var + eps).sqrt();
                    out.iter_mut().zip(row).for_each(|(o, &e)| *o = (e - mean) * rs);
                    rstd[r] = rs;
                }
                NormKind::RmsNorm => {
                    let ms = row.iter().map(|&e| e * e).sum::<T>() / dn;
                    let rs = T::one() / (ms + eps).sqrt();
                    out.iter_mut().zip(row).for_each(|(o, &e)| *o = e * rs);
                    rstd[r] = rs;
                }
            }
        }
        let g = self.nodes[gi].value.data();
        let b = bi.map(|b| self.nodes[b].value.data());
        let mut y = xhat.clone();
        for row in y.chunks_mut(d) {
            for (j, e) in row.iter_mut().enumerate() {
                *e = *e * g[j] + b.map_or(T::zero(), |b| b[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), y)?;
        let mut ids = vec![xi, gi];
        ids.extend(bi);
        let rg = self.rg(&ids);
        self.push("normalize", out, Op::Norm { x: xi, gain: gi, bias: bi, kind, d, xhat, rstd }, rg)
    }

    /// Gathers rows of a `V×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let vt = &self.nodes[ti].value;
        if vt.shape().len() != 2 {
            return Err(config_err("embedding table must be rank 2"));
        }
        let (vocab, d) = (vt.shape()[0], vt.shape()[1]);
        if let Some((pos, &bad)) = ids.iter().enumerate().find(|(_, &t)| t >= vocab) {
            return Err(Error::Data(format!("token id {bad} at position {pos} is outside vocab {vocab}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &t in ids {
            data.extend_from_slice(&vt.data()[t * d..(t + 1) * d]);
        }
        let out = Tensor::new([ids.len(), d], data)?;
        let rg = self.rg(&[ti]);
        self.push("embedding", out, Op::Embedding { table: ti, ids: ids.to_vec(), d }, rg)
    }

    /// `[batch·seq, heads·hd]` → `[batch·heads, seq, hd]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        let (rows, width) = (v.shape()[0], v.last_dim());
        if v.shape().len() != 2 || rows % batch != 0 || width % heads != 0 {
            return Err(config_err(format!("cannot split {:?} into {batch} sequences x {heads} heads", v.shape())));
        }
        let (seq, hd) = (rows / batch, width / heads);
        let src = v.data();
        let mut out = vec![T::zero(); v.numel()];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let dst = ((b * heads + h) * seq + i) * hd;
                    let s = (b * seq + i) * width + h * hd;
                    out[dst..dst + hd].copy_from_slice(&src[s..s + hd]);
                }
            }
        }
        let out = Tensor::new([batch * heads, seq, hd], out)?;
        let rg = self.rg(&[xi]);
        self.push("split_heads", out, Op::SplitHeads { x: xi, batch, seq, heads, hd }, rg)
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        let s = v.shape();
        if s.len() != 3 || s[0] % batch != 0 {
            return Err(config_err(format!("cannot merge {s:?} over {batch} sequences")));
        }
        let (heads, seq, hd) = (s[0] / batch, s[1], s[2]);
        let out = merge(v.data(), batch, heads, seq, hd);
        let out = Tensor::new([batch * seq, heads * hd], out)?;
        let rg = self.rg(&[xi]);
        self.push("merge_heads", out, Op::MergeHeads { x: xi, batch, seq, heads, hd }, rg)
    }

    /// Rotary embedding over consecutive coordinate pairs of `[groups, seq, hd]`.
    pub fn rope(&mut self, x: Var, base: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        let s = v.shape();
        if s.len() != 3 {
            return Err(config_err("rope expects [groups, seq, head_dim]"));
        }
        let (seq, hd) = (s[1], s[2]);
        if hd % 2 != 0 {
            return Err(config_err(format!("rope needs an even head dim, got {hd}")));
        }
        let (cos, sin) = rope_tables::<T>(seq, hd, base);
        let out = rotate(v.data(), seq, hd, &cos, &sin, false);
        let out = Tensor::new(s.to_vec(), out)?;
        let rg = self.rg(&[xi]);
        self.push("rope", out, Op::Rope { x: xi, seq, hd, cos, sin }, rg)
    }

    /// Per-group `scale · q kᵀ` for `q, k: [groups, seq, hd]`.
    pub fn attention_scores(&mut self, q: Var, k: Var, scale: f64) -> Result<Var> {
        let (qi, ki) = (self.check(q)?, self.check(k)?);
        let (sq, sk) = (self.nodes[qi].value.shape(), self.nodes[ki].value.shape());
        if sq.len() != 3 || sq != sk {
            return Err(config_err(format!("score shapes {sq:?} vs {sk:?}")));
        }
        let (groups, seq, hd) = (sq[0], sq[1], sq[2]);
        let scale = T::of(scale);
        let mut z = bmm_nt(groups, seq, hd, seq, self.nodes[qi].value.data(), self.nodes[ki].value.data());
        z.iter_mut().for_each(|e| *e *= scale);
        let out = Tensor::new([groups, seq, seq], z)?;
        let rg = self.rg(&[qi, ki]);
        self.push("attention_scores", out, Op::Scores { q: qi, k: ki, groups, seq, hd, scale }, rg)
    }

    /// Per-group `p · v` for `p: [groups, seq, seq]`, `v: [groups, seq, hd]`.
    pub fn attention_apply(&mut self, p: Var, v: Var) -> Result<Var> {
        let (pi, vi) = (self.check(p)?, self.check(v)?);
        let (sp, sv) = (self.nodes[pi].value.shape(), self.nodes[vi].value.shape());
        if sp.len() != 3 || sv.len() != 3 || sp[0] != sv[0] || sp[1] != sp[2] || sp[2] != sv[1] {
            return Err(config_err(format!("attention apply shapes {sp:?} vs {sv:?}")));
        }
        let (groups, seq, hd) = (sv[0], sv[1], sv[2]);
        let o = bmm(groups, seq, seq, hd, self.nodes[pi].value.data(), self.nodes[vi].value.data());
        let out = Tensor::new([groups, seq, hd], o)?;
        let rg = self.rg(&[pi, vi]);
        self.push("attention_apply", out, Op::AttnApply { p: pi, v: vi, groups, seq, hd }, rg)
    }

    /// Row-wise softmax restricted to the causal prefix `0..=i`; masked entries are exactly 0.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        let s = v.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(config_err(format!("causal softmax expects [groups, n, n], got {s:?}")));
        }
        let seq = s[1];
        let mut out = vec![T::zero(); v.numel()];
        for (row_idx, (orow, zrow)) in out.chunks_mut(seq).zip(v.data().chunks(seq)).enumerate() {
            let i = row_idx % seq;
            softmax_prefix(&zrow[..=i], &mut orow[..=i]);
        }
        let out = Tensor::new(s.to_vec(), out)?;
        let rg = self.rg(&[xi]);
        self.push("causal_softmax", out, Op::CausalSoftmax { x: xi, seq }, rg)
    }

    /// Mean token-level negative log-likelihood of `targets` under `logits: [rows, vocab]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let v = &self.nodes[li].value;
        if v.shape().len() != 2 || v.shape()[0] != targets.len() {
            return Err(config_err(format!("{} targets for logits {:?}", targets.len(), v.shape())));
        }
        let vocab = v.shape()[1];
        if let Some((pos, &bad)) = targets.iter().enumerate().find(|(_, &t)| t >= vocab) {
            return Err(Error::Data(format!("target {bad} at position {pos} is outside vocab {vocab}")));
        }
        let mut probs = vec![T::zero(); v.numel()];
        let mut total = 0.0f64;
        for ((row, prow), &t) in v.data().chunks(vocab).zip(probs.chunks_mut(vocab)).zip(targets) {
            let lse = softmax_prefix(row, prow);
            total += (lse - row[t]).f64();
        }
        let loss = T::of(total / targets.len() as f64);
        let rg = self.rg(&[li]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: li, targets: targets.to_vec(), probs, vocab },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.nodes[xi].value.data().iter().copied().sum::<T>();
        let rg = self.rg(&[xi]);
        self.push("sum", Tensor::scalar(s), Op::Sum { x: xi }, rg)
    }

    /// Mean over rows `i ≥ 1` of the causal-row Shannon entropy divided by `ln(i+1)`.
    pub fn normalized_entropy_mean(&mut self, p: Var) -> Result<Var> {
        let pi = self.check(p)?;
        let v = &self.nodes[pi].value;
        let s = v.shape();
        if s.len() != 3 || s[1] != s[2] || s[1] < 2 {
            return Err(config_err(format!("entropy expects [groups, n, n] with n >= 2, got {s:?}")));
        }
        let (groups, seq) = (s[0], s[1]);
        let count = groups * (seq - 1);
        let mut total = 0.0f64;
        for (row_idx, row) in v.data().chunks(seq).enumerate() {
            let i = row_idx % seq;
            if i == 0 {
                continue;
            }
            let h: f64 = row[..=i].iter().map(|&q| q.f64()).filter(|&q| q > 0.0).map(|q| -q * q.ln()).sum();
            total += h / ((i + 1) as f64).ln();
        }
        let out = Tensor::scalar(T::of(total / count as f64));
        let rg = self.rg(&[pi]);
        self.push("normalized_entropy_mean", out, Op::EntropyMean { p: pi, seq, count }, rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.check(loss)?;
        let node = &self.nodes[li];
        if node.value.numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar, got shape {:?}", node.value.shape())));
        }
        if !node.requires_grad {
            return Err(Error::Usage("output does not depend on any parameter that requires grad".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        // intermediate slots were consumed; only leaves remain populated
        Ok(Gradients { tape: self.id, grads })
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], to: usize, g: impl FnOnce() -> Vec<T>) {
        if self.nodes[to].requires_grad {
            accumulate(&mut grads[to], g());
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |j: usize| self.nodes[j].value.data();
        let out = val(i);
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                self.send(grads, a, || {
                    let bt = transpose(k, n, val(b));
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, &bt, &mut da);
                    da
                });
                self.send(grads, b, || {
                    let at = transpose(m, k, val(a));
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, &at, g, &mut db);
                    db
                });
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                self.send(grads, a, || {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, val(b), &mut da);
                    da
                });
                self.send(grads, b, || {
                    let gt = transpose(m, n, g);
                    let mut db = vec![T::zero(); n * k];
                    gemm(n, m, k, &gt, val(a), &mut db);
                    db
                });
            }
            &Op::Add { a, b } => {
                self.send(grads, a, || g.to_vec());
                self.send(grads, b, || g.to_vec());
            }
            &Op::AddBias { x, b, d } => {
                self.send(grads, x, || g.to_vec());
                self.send(grads, b, || {
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    db
                });
            }
            &Op::Mul { a, b } => {
                self.send(grads, a, || g.iter().zip(val(b)).map(|(&gi, &bv)| gi * bv).collect());
                self.send(grads, b, || g.iter().zip(val(a)).map(|(&gi, &av)| gi * av).collect());
            }
            &Op::Affine { x, scale } => self.send(grads, x, || g.iter().map(|&gi| gi * scale).collect()),
            &Op::Relu { x } => self.send(grads, x, || {
                g.iter().zip(val(x)).map(|(&gi, &xv)| if xv > T::zero() { gi } else { T::zero() }).collect()
            }),
            &Op::Gelu { x } => {
                self.send(grads, x, || g.iter().zip(val(x)).map(|(&gi, &xv)| gi * gelu_grad(xv)).collect())
            }
            &Op::Silu { x } => self.send(grads, x, || {
                g.iter()
                    .zip(val(x))
                    .map(|(&gi, &xv)| {
                        let s = sigmoid(xv);
                        gi * s * (T::one() + xv * (T::one() - s))
                    })
                    .collect()
            }),
            Op::Norm { x, gain, bias, kind, d, xhat, rstd } => {
                let (x, gain, d) = (*x, *gain, *d);
                let gv = val(gain);
                let dn = T::of(d as f64);
                self.send(grads, x, || {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((dxr, gr), xr)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let dxh: Vec<T> = gr.iter().zip(gv).map(|(&a, &w)| a * w).collect();
                        let mean_dxh = dxh.iter().copied().sum::<T>() / dn;
                        let mean_dot = dxh.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            let centered = match kind {
                                NormKind::LayerNorm => dxh[j] - mean_dxh,
                                NormKind::RmsNorm => dxh[j],
                            };
                            dxr[j] = rstd[r] * (centered - xr[j] * mean_dot);
                        }
                    }
                    dx
                });
                self.send(grads, gain, || {
                    let mut dg = vec![T::zero(); d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    dg
                });
                if let Some(b) = *bias {
                    self.send(grads, b, || {
                        let mut db = vec![T::zero(); d];
                        for gr in g.chunks(d) {
                            db.iter_mut().zip(gr).for_each(|(a, &r)| *a += r);
                        }
                        db
                    });
                }
            }
            Op::Embedding { table, ids, d } => {
                let d = *d;
                self.send(grads, *table, || {
                    let mut dt = vec![T::zero(); self.nodes[*table].value.numel()];
                    for (r, &t) in ids.iter().enumerate() {
                        dt[t * d..(t + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
                    }
                    dt
                });
            }
            &Op::SplitHeads { x, batch, seq, heads, hd } => {
                self.send(grads, x, || merge(g, batch, heads, seq, hd))
            }
            &Op::MergeHeads { x, batch, seq, heads, hd } => self.send(grads, x, || {
                let width = heads * hd;
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..batch {
                    for h in 0..heads {
                        for s in 0..seq {
                            let dst = ((b * heads + h) * seq + s) * hd;
                            let src = (b * seq + s) * width + h * hd;
                            dx[dst..dst + hd].copy_from_slice(&g[src..src + hd]);
                        }
                    }
                }
                dx
            }),
            Op::Rope { x, seq, hd, cos, sin } => self.send(grads, *x, || rotate(g, *seq, *hd, cos, sin, true)),
            &Op::Scores { q, k, groups, seq, hd, scale } => {
                self.send(grads, q, || {
                    let mut dq = bmm(groups, seq, seq, hd, g, val(k));
                    dq.iter_mut().for_each(|e| *e *= scale);
                    dq
                });
                self.send(grads, k, || {
                    let mut dk = bmm_tn(groups, seq, seq, hd, g, val(q));
                    dk.iter_mut().for_each(|e| *e *= scale);
                    dk
                });
            }
            &Op::AttnApply { p, v, groups, seq, hd } => {
                self.send(grads, p, || bmm_nt(groups, seq, hd, seq, g, val(v)));
                self.send(grads, v, || bmm_tn(groups, seq, seq, hd, val(p), g));
            }
            &Op::CausalSoftmax { x, seq } => self.send(grads, x, || {
                let mut dz = vec![T::zero(); g.len()];
                for (row_idx, ((dzr, gr), pr)) in dz.chunks_mut(seq).zip(g.chunks(seq)).zip(out.chunks(seq)).enumerate() {
                    let i = row_idx % seq;
                    let dot = gr[..=i].iter().zip(&pr[..=i]).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..=i {
                        dzr[j] = pr[j] * (gr[j] - dot);
                    }
                }
                dz
            }),
            Op::CrossEntropy { logits, targets, probs, vocab } => {
                let vocab = *vocab;
                self.send(grads, *logits, || {
                    let scale = g[0] / T::of(targets.len() as f64);
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * vocab + t] -= scale;
                    }
                    dl
                });
            }
            &Op::Sum { x } => self.send(grads, x, || vec![g[0]; self.nodes[x].value.numel()]),
            &Op::EntropyMean { p, seq, count } => self.send(grads, p, || {
                let pv = val(p);
                let mut dp = vec![T::zero(); pv.len()];
                let c = g[0] / T::of(count as f64);
                for (row_idx, (dr, pr)) in dp.chunks_mut(seq).zip(pv.chunks(seq)).enumerate() {
                    let i = row_idx % seq;
                    if i == 0 {
                        continue;
                    }
                    let norm = T::of(((i + 1) as f64).ln());
                    for j in 0..=i {
                        if pr[j] > T::zero() {
                            dr[j] = -c * (pr[j].ln() + T::one()) / norm;
                        }
                    }
                }
                dp
            }),
        }
    }
}

/// Stable softmax of `z` into `p`; returns the log-sum-exp.
fn softmax_prefix<T: Scalar>(z: &[T], p: &mut [T]) -> T {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (pj, &zj) in p.iter_mut().zip(z) {
        *pj = (zj - max).exp();
        sum += *pj;
    }
    p.iter_mut().for_each(|pj| *pj = *pj / sum);
    max + sum.ln()
}

fn merge<T: Scalar>(src: &[T], batch: usize, heads: usize, seq: usize, hd: usize) -> Vec<T> {
    let width = heads * hd;
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for h in 0..heads {
            for s in 0..seq {
                let from = ((b * heads + h) * seq + s) * hd;
                let to = (b * seq + s) * width + h * hd;
                out[to..to + hd].copy_from_slice(&src[from..from + hd]);
            }
        }
    }
    out
}

/// `cos`/`sin` tables of shape `[seq, hd/2]` with frequency `base^(-2j/hd)`.
pub(crate) fn rope_tables<T: Scalar>(seq: usize, hd: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = hd / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for pos in 0..seq {
        for j in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * j as f64 / hd as f64);
            cos.push(T::of(theta.cos()));
            sin.push(T::of(theta.sin()));
        }
    }
    (cos, sin)
}

fn rotate<T: Scalar>(x: &[T], seq: usize, hd: usize, cos: &[T], sin: &[T], inverse: bool) -> Vec<T> {
    let half = hd / 2;
    let mut out = vec![T::zero(); x.len()];
    for (r, (orow, xrow)) in out.chunks_mut(hd).zip(x.chunks(hd)).enumerate() {
        let pos = r % seq;
        for j in 0..half {
            let (c, s) = (cos[pos * half + j], sin[pos * half + j]);
            let s = if inverse { -s } else { s };
            let (a, b) = (xrow[2 * j], xrow[2 * j + 1]);
            orow[2 * j] = a * c - b * s;
            orow[2 * j + 1] = a * s + b * c;
        }
    }
    out
}
