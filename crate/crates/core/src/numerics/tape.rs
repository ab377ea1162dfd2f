use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{Real, Tensor, TensorError, LAYER_NORM_EPS};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBroadcast {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Sum {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
        smoothing: T,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records forward operations in execution order; [`Tape::backward`] walks
/// them in reverse and accumulates gradients into the leaves.
#[derive(Debug)]
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, new_shape)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::NoTape);
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node<T>, TensorError> {
        Ok(&self.nodes[self.idx(v)?])
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a tensor as a leaf; its buffer is shared, not copied.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data_arc().clone(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
            grad: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var, TensorError> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).expect("foreign variable").shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).expect("foreign variable").value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v).expect("foreign variable");
        Tensor::from_arc(n.shape.clone(), n.value.clone()).unwrap()
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).ok()?.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        let ok = sa.len() == 2 && sb.len() == 2 && sa[1] == if trans_b { sb[1] } else { sb[0] };
        if !ok {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if trans_b { sb[0] } else { sb[1] };
        let mut out = vec![T::zero(); m * n];
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if trans_b {
            matmul_nt(va, vb, &mut out, m, k, n);
        } else {
            matmul_nn(va, vb, &mut out, m, k, n);
        }
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: ai, b: bi, trans_b }, rg))
    }

    /// Batched product over the leading axis: `a[B,m,k] · b[B,k,n]`, or
    /// `a[B,m,k] · b[B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == if trans_b { sb[2] } else { sb[1] };
        if !ok {
            return Err(mismatch("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        for s in 0..batch {
            let a_s = &va[s * m * k..(s + 1) * m * k];
            let b_s = &vb[s * k * n..(s + 1) * k * n];
            let c_s = &mut out[s * m * n..(s + 1) * m * n];
            if trans_b {
                matmul_nt(a_s, b_s, c_s, m, k, n);
            } else {
                matmul_nn(a_s, b_s, c_s, m, k, n);
            }
        }
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(vec![batch, m, n], out, Op::BatchMatMul { a: ai, b: bi, trans_b }, rg))
    }

    /// Elementwise sum. `b` may also match the trailing dimensions of `a`,
    /// in which case it is broadcast over the leading ones.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        let rg = self.rg(ai) || self.rg(bi);
        if sa == sb {
            let out = self.nodes[ai]
                .value
                .iter()
                .zip(self.nodes[bi].value.iter())
                .map(|(&x, &y)| x + y)
                .collect();
            let shape = sa.clone();
            return Ok(self.push(shape, out, Op::Add { a: ai, b: bi }, rg));
        }
        if sb.len() < sa.len() && sa.ends_with(sb) {
            let vb = &self.nodes[bi].value;
            let out = self.nodes[ai]
                .value
                .chunks(vb.len())
                .flat_map(|row| row.iter().zip(vb.iter()).map(|(&x, &y)| x + y))
                .collect();
            let shape = sa.clone();
            return Ok(self.push(shape, out, Op::AddBroadcast { a: ai, b: bi }, rg));
        }
        Err(mismatch("add", sa, sb))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa != sb {
            return Err(mismatch("mul", sa, sb));
        }
        let out = self.nodes[ai]
            .value
            .iter()
            .zip(self.nodes[bi].value.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = sa.clone();
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(shape, out, Op::Mul { a: ai, b: bi }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.iter().map(|&x| x * factor).collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.rg(ai);
        Ok(self.push(shape, out, Op::Scale { a: ai, factor }, rg))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let mut acc = T::zero();
        for &x in self.nodes[ai].value.iter() {
            acc += x;
        }
        let rg = self.rg(ai);
        Ok(self.push(vec![1], vec![acc], Op::Sum { a: ai }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.rg(ai);
        Ok(self.push(shape, out, Op::Relu { a: ai }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let shape = self.nodes[ai].shape.clone();
        let width = *shape.last().unwrap();
        let mut out = self.nodes[ai].value.as_ref().clone();
        for row in out.chunks_mut(width) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let rg = self.rg(ai);
        Ok(self.push(shape, out, Op::Softmax { a: ai }, rg))
    }

    /// Normalizes each row over the last axis (epsilon [`LAYER_NORM_EPS`])
    /// then applies `gain` and `bias`, both shaped `[width]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let shape = self.nodes[xi].shape.clone();
        let width = *shape.last().unwrap();
        for p in [gi, bi] {
            if self.nodes[p].shape != [width] {
                return Err(mismatch("layer_norm", &shape, &self.nodes[p].shape));
            }
        }
        let eps = T::of(LAYER_NORM_EPS);
        let n = T::of(width as f64);
        let xv = &self.nodes[xi].value;
        let (g, b) = (&self.nodes[gi].value, &self.nodes[bi].value);
        let rows = xv.len() / width;
        let mut normalized = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(width) {
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean /= n;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                normalized.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of `table[V,d]`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let ti = self.idx(table)?;
        let shape = &self.nodes[ti].shape;
        if shape.len() != 2 || ids.is_empty() {
            return Err(mismatch("embedding", shape, &[ids.len()]));
        }
        let (v, d) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        let mut rows = Vec::with_capacity(ids.len());
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&self.nodes[ti].value[id * d..(id + 1) * d]);
            rows.push(id);
        }
        let rg = self.rg(ti);
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table: ti, ids: rows }, rg))
    }

    /// Mean token cross-entropy of `logits[n,V]` against `targets[n]`,
    /// skipping positions equal to `ignore`. With `smoothing > 0` the target
    /// distribution mixes in a uniform share.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        ignore: Option<u32>,
        smoothing: T,
    ) -> Result<Var, TensorError> {
        let li = self.idx(logits)?;
        let shape = &self.nodes[li].shape;
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(mismatch("cross_entropy", shape, &[targets.len()]));
        }
        let width = shape[1];
        let uniform = smoothing / T::of(width as f64);
        let x = &self.nodes[li].value;
        let mut probs = vec![T::zero(); x.len()];
        let mut resolved = Vec::with_capacity(targets.len());
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                resolved.push(None);
                continue;
            }
            let t = t as usize;
            if t >= width {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: width,
                });
            }
            let row = &x[r * width..(r + 1) * width];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for &v in row {
                z += (v - max).exp();
            }
            let lse = max + z.ln();
            let mut loss = -(T::one() - smoothing) * (row[t] - lse);
            if smoothing > T::zero() {
                let mut all = T::zero();
                for &v in row {
                    all += v - lse;
                }
                loss -= uniform * all;
            }
            total += loss;
            for (p, &v) in probs[r * width..(r + 1) * width].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            resolved.push(Some(t));
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::NoTargets);
        }
        let mean = total / T::of(count as f64);
        let rg = self.rg(li);
        Ok(self.push(
            vec![1],
            vec![mean],
            Op::CrossEntropy {
                logits: li,
                targets: resolved,
                probs,
                count,
                smoothing,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        if shape.iter().product::<usize>() != self.nodes[ai].value.len() || shape.contains(&0) {
            return Err(mismatch("reshape", &self.nodes[ai].shape, shape));
        }
        // shares the buffer
        let value = self.nodes[ai].value.clone();
        let rg = self.rg(ai);
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Reshape { a: ai },
            requires_grad: rg,
            grad: None,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let shape = &self.nodes[ai].shape;
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes
                .iter()
                .all(|&x| x < seen.len() && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(mismatch("permute", shape, axes));
        }
        let (out, new_shape) = permute_data(&self.nodes[ai].value, shape, axes);
        let rg = self.rg(ai);
        Ok(self.push(
            new_shape,
            out,
            Op::Permute {
                a: ai,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients are added to what
    /// is already there, so two calls without [`Tape::zero_grad`] double them.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[li].shape.clone()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=li).map(|_| None).collect();
        adj[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(buf) => add_into(buf, &g),
                    None => self.nodes[i].grad = Some(g),
                }
                continue;
            }
            for (j, gj) in self.local_grads(i, &g) {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut adj[j] {
                    Some(buf) => add_into(buf, &gj),
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |j: usize| -> &[T] { &self.nodes[j].value };
        let shp = |j: usize| -> &[usize] { &self.nodes[j].shape };
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = node.shape[1];
                let mut out = Vec::new();
                if self.rg(a) {
                    let mut da = vec![T::zero(); m * k];
                    if trans_b {
                        matmul_nn(g, val(b), &mut da, m, n, k);
                    } else {
                        matmul_nt(g, val(b), &mut da, m, n, k);
                    }
                    out.push((a, da));
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); k * n];
                    if trans_b {
                        matmul_tn(g, val(a), &mut db, n, m, k);
                    } else {
                        matmul_tn(val(a), g, &mut db, k, m, n);
                    }
                    out.push((b, db));
                }
                out
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let (batch, m, k) = (shp(a)[0], shp(a)[1], shp(a)[2]);
                let n = node.shape[2];
                let (va, vb) = (val(a), val(b));
                let mut out = Vec::new();
                if self.rg(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for s in 0..batch {
                        let g_s = &g[s * m * n..(s + 1) * m * n];
                        let b_s = &vb[s * k * n..(s + 1) * k * n];
                        let d_s = &mut da[s * m * k..(s + 1) * m * k];
                        if trans_b {
                            matmul_nn(g_s, b_s, d_s, m, n, k);
                        } else {
                            matmul_nt(g_s, b_s, d_s, m, n, k);
                        }
                    }
                    out.push((a, da));
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for s in 0..batch {
                        let g_s = &g[s * m * n..(s + 1) * m * n];
                        let a_s = &va[s * m * k..(s + 1) * m * k];
                        let d_s = &mut db[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            matmul_tn(g_s, a_s, d_s, n, m, k);
                        } else {
                            matmul_tn(a_s, g_s, d_s, k, m, n);
                        }
                    }
                    out.push((b, db));
                }
                out
            }
            &Op::Add { a, b } => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::AddBroadcast { a, b } => {
                let width = val(b).len();
                let mut db = vec![T::zero(); width];
                for row in g.chunks(width) {
                    add_into(&mut db, row);
                }
                vec![(a, g.to_vec()), (b, db)]
            }
            &Op::Mul { a, b } => {
                let da = g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect();
                let db = g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect();
                vec![(a, da), (b, db)]
            }
            &Op::Scale { a, factor } => vec![(a, g.iter().map(|&x| x * factor).collect())],
            &Op::Sum { a } => vec![(a, vec![g[0]; val(a).len()])],
            &Op::Relu { a } => {
                let da = g
                    .iter()
                    .zip(val(a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(a, da)]
            }
            &Op::Softmax { a } => {
                let width = *node.shape.last().unwrap();
                let mut da = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(width).zip(node.value.chunks(width)) {
                    let mut dot = T::zero();
                    for (&d, &y) in gr.iter().zip(yr) {
                        dot += d * y;
                    }
                    da.extend(gr.iter().zip(yr).map(|(&d, &y)| y * (d - dot)));
                }
                vec![(a, da)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let width = *node.shape.last().unwrap();
                let n = T::of(width as f64);
                let gv = val(gain);
                let mut dgain = vec![T::zero(); width];
                let mut dbias = vec![T::zero(); width];
                let mut dx = Vec::with_capacity(g.len());
                let mut dh = vec![T::zero(); width];
                for ((gr, hr), &inv) in g.chunks(width).zip(normalized.chunks(width)).zip(inv_std) {
                    let (mut sum_dh, mut sum_dh_h) = (T::zero(), T::zero());
                    for j in 0..width {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        dh[j] = gr[j] * gv[j];
                        sum_dh += dh[j];
                        sum_dh_h += dh[j] * hr[j];
                    }
                    for j in 0..width {
                        dx.push(inv / n * (n * dh[j] - sum_dh - hr[j] * sum_dh_h));
                    }
                }
                vec![(x, dx), (gain, dgain), (bias, dbias)]
            }
            Op::Embedding { table, ids } => {
                let d = shp(*table)[1];
                let mut dt = vec![T::zero(); val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
                vec![(*table, dt)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
                smoothing,
            } => {
                let width = shp(*logits)[1];
                let scale = g[0] / T::of(*count as f64);
                let uniform = *smoothing / T::of(width as f64);
                let on_target = T::one() - *smoothing;
                let mut dl = vec![T::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = &mut dl[r * width..(r + 1) * width];
                    for (j, d) in row.iter_mut().enumerate() {
                        let mut q = uniform;
                        if j == t {
                            q += on_target;
                        }
                        *d = (probs[r * width + j] - q) * scale;
                    }
                }
                vec![(*logits, dl)]
            }
            &Op::Reshape { a } => vec![(a, g.to_vec())],
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (da, _) = permute_data(g, &node.shape, &inverse);
                vec![(*a, da)]
            }
        }
    }
}
