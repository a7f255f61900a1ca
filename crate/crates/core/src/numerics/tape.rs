use std::collections::HashMap;

use super::kernels::gemm;
use super::{NumericsError, ParamId, ParamStore, Real, Result, Tensor};

/// Logit magnitude beyond which the binary cross-entropy saturates.
const BCE_LOGIT_CLIP: f64 = 30.0;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, b_trans: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Log { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<(Var, usize)> },
    GatherRows { a: Var, rows: Vec<usize> },
    Pick { a: Var, cols: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    SplitHeads { a: Var, b: usize, t: usize, heads: usize, dh: usize },
    MergeHeads { a: Var, b: usize, t: usize, heads: usize, dh: usize },
    BceWithLogits { z: Var, labels: Vec<T>, weights: Vec<T>, total_weight: T },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run gradient tape. Build a fresh tape for every step.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Every parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.get(*v).map(|g| (*p, g)))
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of a node's value as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(NumericsError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if !value.iter().all(|x| x.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.live()?;
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push("leaf", shape, t.into_data(), Op::Leaf, rg)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    /// Binds a stored parameter. Repeated calls with the same id return the
    /// same node, so shared parameters accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let t = store.get(id);
        let rg = !store.is_frozen(id);
        let v = self.leaf(Tensor::new(t.shape(), t.data().to_vec())?.with_requires_grad(rg))?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// A parameter bound without gradient tracking (evaluation passes).
    pub fn param_frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        self.constant(Tensor::new(t.shape(), t.data().to_vec())?)
    }

    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let t = self.tensor(a);
        self.constant(t)
    }

    /// `a[.., k] @ b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.nodes[a.0].value.len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push("matmul", shape, out, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// `a[.., k] @ b[n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(shape_err("matmul_nt", &sa, &sb));
        }
        let (n, k) = (sb[0], sb[1]);
        let m = self.nodes[a.0].value.len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push("matmul_nt", shape, out, Op::MatMulNt { a, b, m, k, n }, rg)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        self.live()?;
        let op = if b_trans { "bmm_nt" } else { "bmm" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err(op, &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if b_trans { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err(op, &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    b_trans,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(op, vec![batch, m, n], out, Op::Bmm { a, b, batch, m, k, n, b_trans }, rg)
    }

    /// Batched `a[B, m, k] @ b[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a[B, m, k] @ b[B, n, k]^T`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    /// `b`'s shape must equal `a`'s or be a trailing suffix of it.
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        self.live()?;
        self.broadcast_check(op, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.len();
        Ok(av.iter().enumerate().map(|(i, x)| f(*x, bv[i % nb])).collect())
    }

    /// Element-wise sum; `b` broadcasts over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push("sub", shape, out, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.live()?;
        let c = T::lit(c);
        let out = self.value(a).iter().map(|x| *x * c).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale { a, c }, rg)
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<usize> {
        match self.shape(a).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(NumericsError::Invalid {
                op,
                msg: format!("needs a non-empty last axis, got {:?}", self.shape(a)),
            }),
        }
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let d = self.last_dim("softmax", a)?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push("softmax", shape, out, Op::Softmax { a }, rg)
    }

    /// Log-softmax over the last axis via a stabilized log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let d = self.last_dim("log_softmax", a)?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|x| (*x - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax { a }, rg)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.live()?;
        let d = self.last_dim("layer_norm", x)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::lit(eps);
        let inv_d = T::lit(1.0 / d as f64);
        let rows = self.value(x).len() / d;
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        {
            let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv[j] + bv[j];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.live()?;
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, T::tanh, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, T::ln, Op::Log { a })
    }

    /// Rows of `table[V, H]` selected by `ids`, shaped `[prefix.., H]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        self.live()?;
        let st = self.shape(table).to_vec();
        if st.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", &st, prefix));
        }
        let (v, h) = (st[0], st[1]);
        let mut out = Vec::with_capacity(ids.len() * h);
        {
            let tv = self.value(table);
            for &id in ids {
                if id >= v {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "embedding",
                        index: id,
                        len: v,
                    });
                }
                out.extend_from_slice(&tv[id * h..(id + 1) * h]);
            }
        }
        let mut shape = prefix.to_vec();
        shape.push(h);
        let rg = self.rg(&[table]);
        self.push("embedding", shape, out, Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.live()?;
        let first = parts.first().ok_or(NumericsError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let s0 = self.shape(*first).to_vec();
        if s0.is_empty() {
            return Err(shape_err("concat", &s0, &s0));
        }
        let lead = &s0[..s0.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err("concat", &s0, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(*p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        let parts = parts.iter().copied().zip(widths).collect();
        self.push("concat", shape, out, Op::Concat { parts }, rg)
    }

    /// Views `a` as `[N, d]` (d = last axis) and selects `rows`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.live()?;
        let d = self.last_dim("gather_rows", a)?;
        let n = self.value(a).len() / d;
        let mut out = Vec::with_capacity(rows.len() * d);
        {
            let av = self.value(a);
            for &r in rows {
                if r >= n {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "gather_rows",
                        index: r,
                        len: n,
                    });
                }
                out.extend_from_slice(&av[r * d..(r + 1) * d]);
            }
        }
        let rg = self.rg(&[a]);
        self.push("gather_rows", vec![rows.len(), d], out, Op::GatherRows { a, rows: rows.to_vec() }, rg)
    }

    /// `out[i] = a[i, cols[i]]` for `a[n, V]`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        self.live()?;
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != cols.len() {
            return Err(shape_err("pick", &sa, &[cols.len()]));
        }
        let v = sa[1];
        let mut out = Vec::with_capacity(cols.len());
        {
            let av = self.value(a);
            for (i, &c) in cols.iter().enumerate() {
                if c >= v {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "pick",
                        index: c,
                        len: v,
                    });
                }
                out.push(av[i * v + c]);
            }
        }
        let rg = self.rg(&[a]);
        self.push("pick", vec![cols.len()], out, Op::Pick { a, cols: cols.to_vec() }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let s = self.value(a).iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push("sum", Vec::new(), vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(NumericsError::Invalid {
                op: "mean",
                msg: "empty input".into(),
            });
        }
        let s = self.value(a).iter().copied().sum::<T>() / T::lit(n as f64);
        let rg = self.rg(&[a]);
        self.push("mean", Vec::new(), vec![s], Op::Mean { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.live()?;
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a }, rg)
    }

    /// `[B, T, heads * dh] -> [B * heads, T, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        self.live()?;
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || heads == 0 || sa[2] % heads != 0 {
            return Err(shape_err("split_heads", &sa, &[heads]));
        }
        let (b, t, h) = (sa[0], sa[1], sa[2]);
        let dh = h / heads;
        let mut out = vec![T::zero(); b * t * h];
        {
            let av = self.value(a);
            for bi in 0..b {
                for ti in 0..t {
                    for hi in 0..heads {
                        let src = (bi * t + ti) * h + hi * dh;
                        let dst = ((bi * heads + hi) * t + ti) * dh;
                        out[dst..dst + dh].copy_from_slice(&av[src..src + dh]);
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push("split_heads", vec![b * heads, t, dh], out, Op::SplitHeads { a, b, t, heads, dh }, rg)
    }

    /// `[B * heads, T, dh] -> [B, T, heads * dh]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        self.live()?;
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || heads == 0 || sa[0] % heads != 0 {
            return Err(shape_err("merge_heads", &sa, &[heads]));
        }
        let (b, t, dh) = (sa[0] / heads, sa[1], sa[2]);
        let h = heads * dh;
        let mut out = vec![T::zero(); b * t * h];
        {
            let av = self.value(a);
            for bi in 0..b {
                for ti in 0..t {
                    for hi in 0..heads {
                        let dst = (bi * t + ti) * h + hi * dh;
                        let src = ((bi * heads + hi) * t + ti) * dh;
                        out[dst..dst + dh].copy_from_slice(&av[src..src + dh]);
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push("merge_heads", vec![b, t, h], out, Op::MergeHeads { a, b, t, heads, dh }, rg)
    }

    /// Weighted mean of sigmoid binary cross-entropy,
    /// `sum_i w_i * bce(z_i, y_i) / sum_i w_i`. Logits are clipped to ±30.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[T], weights: &[T]) -> Result<Var> {
        self.live()?;
        let n = self.value(z).len();
        if labels.len() != n || weights.len() != n {
            return Err(shape_err("bce_with_logits", self.shape(z), &[labels.len(), weights.len()]));
        }
        let total_weight: T = weights.iter().copied().sum();
        if total_weight <= T::zero() {
            return Err(NumericsError::Invalid {
                op: "bce_with_logits",
                msg: "no positions carry weight".into(),
            });
        }
        let clip = T::lit(BCE_LOGIT_CLIP);
        let mut acc = T::zero();
        for ((z, y), w) in self.value(z).iter().zip(labels).zip(weights) {
            if *w == T::zero() {
                continue;
            }
            let c = z.max(-clip).min(clip);
            let l = c.max(T::zero()) - c * *y + (-c.abs()).exp().ln_1p();
            acc += *w * l;
        }
        let loss = acc / total_weight;
        let rg = self.rg(&[z]);
        self.push(
            "bce_with_logits",
            Vec::new(),
            vec![loss],
            Op::BceWithLogits {
                z,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                total_weight,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape; a second call
    /// returns [`NumericsError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.live()?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }

        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(p, v)| (*p, *v)).collect();
        params.sort_by_key(|(p, _)| p.index());
        self.nodes.clear();
        self.params.clear();
        self.consumed = true;
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Allocates (or reuses) the gradient slot of `v`; None when `v` does
        // not need a gradient.
        fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm(m, n, k, g, false, &nodes[b.0].value, true, ga, true);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm(k, m, n, &nodes[a.0].value, true, g, false, gb, true);
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm(m, n, k, g, false, &nodes[b.0].value, false, ga, true);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm(n, m, k, g, true, &nodes[a.0].value, false, gb, true);
                }
            }
            Op::Bmm { a, b, batch, m, k, n, b_trans } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for bi in 0..*batch {
                        let gi = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        // da = g @ b^T, or g @ b when b was already transposed
                        gemm(m, n, k, gi, false, bb, !*b_trans, &mut ga[bi * m * k..(bi + 1) * m * k], true);
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for bi in 0..*batch {
                        let gi = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *b_trans {
                            // b stored [n, k]: db = g^T @ a
                            gemm(n, m, k, gi, true, ab, false, out, true);
                        } else {
                            gemm(k, m, n, ab, true, gi, false, out, true);
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let neg = matches!(node.op, Op::Sub { .. });
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    let nb = gb.len();
                    for (idx, x) in g.iter().enumerate() {
                        if neg {
                            gb[idx % nb] -= *x;
                        } else {
                            gb[idx % nb] += *x;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let nb = bv.len();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (idx, x) in g.iter().enumerate() {
                        ga[idx] += *x * bv[idx % nb];
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (idx, x) in g.iter().enumerate() {
                        gb[idx % nb] += *x * av[idx];
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (d, x) in ga.iter_mut().zip(g) {
                        *d += *x * *c;
                    }
                }
            }
            Op::Softmax { a } => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((gr, yr), dr) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(p, q)| *p * *q).sum();
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((gr, yr), dr) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..d {
                            dr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let gv = &nodes[gamma.0].value;
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let inv_d = T::lit(1.0 / d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() * inv_d;
                        let mean_dh = dxhat.iter().zip(hr).map(|(p, q)| *p * *q).sum::<T>() * inv_d;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let av = &nodes[a.0].value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, x), gi) in ga.iter_mut().zip(av).zip(g) {
                        *d += *gi * gelu_grad(*x);
                    }
                }
            }
            Op::Tanh { a } => {
                let y = &node.value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, yi), gi) in ga.iter_mut().zip(y).zip(g) {
                        *d += *gi * (T::one() - *yi * *yi);
                    }
                }
            }
            Op::Sigmoid { a } => {
                let y = &node.value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, yi), gi) in ga.iter_mut().zip(y).zip(g) {
                        *d += *gi * *yi * (T::one() - *yi);
                    }
                }
            }
            Op::Log { a } => {
                let av = &nodes[a.0].value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, x), gi) in ga.iter_mut().zip(av).zip(g) {
                        *d += *gi / *x;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let h = nodes[table.0].shape[1];
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * h..(id + 1) * h], &g[r * h..(r + 1) * h]);
                    }
                }
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|(_, w)| *w).sum();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for (p, w) in parts {
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows { a, rows } => {
                let d = node.shape[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::Pick { a, cols } => {
                let v = nodes[a.0].shape[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, c) in cols.iter().enumerate() {
                        ga[i * v + c] += g[i];
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let s = g[0] / T::lit(ga.len() as f64);
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::SplitHeads { a, b, t, heads, dh } => {
                let (b, t, heads, dh) = (*b, *t, *heads, *dh);
                let h = heads * dh;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for bi in 0..b {
                        for ti in 0..t {
                            for hi in 0..heads {
                                let src = (bi * t + ti) * h + hi * dh;
                                let dst = ((bi * heads + hi) * t + ti) * dh;
                                add_into(&mut ga[src..src + dh], &g[dst..dst + dh]);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { a, b, t, heads, dh } => {
                let (b, t, heads, dh) = (*b, *t, *heads, *dh);
                let h = heads * dh;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for bi in 0..b {
                        for ti in 0..t {
                            for hi in 0..heads {
                                let dst = (bi * t + ti) * h + hi * dh;
                                let src = ((bi * heads + hi) * t + ti) * dh;
                                add_into(&mut ga[src..src + dh], &g[dst..dst + dh]);
                            }
                        }
                    }
                }
            }
            Op::BceWithLogits { z, labels, weights, total_weight } => {
                let zv = &nodes[z.0].value;
                let clip = T::lit(BCE_LOGIT_CLIP);
                if let Some(gz) = slot(nodes, grads, *z) {
                    let s = g[0] / *total_weight;
                    for i in 0..zv.len() {
                        if weights[i] == T::zero() || zv[i].abs() > clip {
                            continue;
                        }
                        gz[i] += s * weights[i] * (sigmoid(zv[i]) - labels[i]);
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}
