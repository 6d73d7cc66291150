//! Define-by-run tape. Every op evaluates eagerly when it is recorded, so a
//! node's inputs always precede it and the backward sweep is a plain reverse
//! walk over the node list.

use std::collections::HashMap;

use crate::conv;
use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{broadcast_index_map, can_broadcast, split_axis, Tensor};

/// Lower bound applied to `log` inputs.
pub const LOG_FLOOR: f64 = 1e-12;
/// Lower bound applied to norms in [`Tape::l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Log(Var),
    LogSigmoid(Var),
    Exp(Var),
    Relu(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Broadcast(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    MaxAxis(Var, usize, Vec<usize>),
    Concat(Vec<Var>, usize),
    Embedding(Var, Vec<usize>),
    EmbeddingBag(Var, Option<Var>, Vec<usize>, usize),
    L2Normalize(Var, Vec<f64>),
    Conv2d(Var, Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of `root`. Ops evaluate as they are recorded, so this only
    /// validates the result.
    pub fn forward(&self, root: Var) -> Result<&Tensor> {
        let v = &self.nodes[root.0].value;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "forward" });
        }
        Ok(v)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a trainable leaf. Repeated calls for the same parameter
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("offset", a, |x| x + c, Op::Offset(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// Natural log with inputs clamped to at least [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    /// `ln σ(x)`, evaluated without forming `σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("log_sigmoid", a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::invalid("transpose", format!("need rank 2, got {sa:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Right-aligned broadcast where size-1 (or missing leading) dims repeat.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if !can_broadcast(&sa, shape) {
            return Err(Error::shape("broadcast", &sa, shape));
        }
        let src = self.value(a).data();
        let n = src.len();
        let data: Vec<f64> = if n == 1 {
            vec![src[0]; shape.iter().product()]
        } else if is_trailing(&sa, shape) {
            src.iter().copied().cycle().take(shape.iter().product()).collect()
        } else {
            broadcast_index_map(&sa, shape).iter().map(|&i| src[i]).collect()
        };
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push("broadcast", value, Op::Broadcast(a), &[a])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} out of range for {sa:?}")));
        }
        let (outer, n, inner) = split_axis(&sa, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push("sum_axis", value, Op::SumAxis(a, axis), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Maximum over `axis` (removed from the shape); ties pick the first index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || sa[axis] == 0 {
            return Err(Error::invalid("max_axis", format!("bad axis {axis} for {sa:?}")));
        }
        let (outer, n, inner) = split_axis(&sa, axis);
        let src = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    let v = src[(o * n + j) * inner + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        arg[slot] = j;
                    }
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push("max_axis", value, Op::MaxAxis(a, axis, arg), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push("concat", value, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Row gather: `table` is `[V, ...]`; the output has shape
    /// `index_shape ++ table.shape[1..]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.is_empty() {
            return Err(Error::invalid("embedding", "table must have rank >= 1"));
        }
        if index_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::invalid(
                "embedding",
                format!("index shape {index_shape:?} does not hold {} indices", indices.len()),
            ));
        }
        let rows = ts[0];
        let width: usize = ts[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("embedding", format!("index {bad} out of range for {rows} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = index_shape.to_vec();
        shape.extend_from_slice(&ts[1..]);
        let value = Tensor::new(shape, out)?;
        self.push("embedding", value, Op::Embedding(table, indices.to_vec()), &[table])
    }

    /// Sums of gathered rows: `table` is `[V, W]`, `indices` holds `bag`
    /// consecutive entries per output row, and `weights` (same count as
    /// `indices`) optionally scales each gathered row. Output is
    /// `out_shape ++ [W]`.
    pub fn embedding_bag(
        &mut self,
        table: Var,
        indices: &[usize],
        weights: Option<Var>,
        bag: usize,
        out_shape: &[usize],
    ) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::invalid("embedding_bag", format!("table must be rank 2, got {ts:?}")));
        }
        let rows_out: usize = out_shape.iter().product();
        if bag == 0 || rows_out * bag != indices.len() {
            return Err(Error::invalid(
                "embedding_bag",
                format!("{} indices do not fill {out_shape:?} bags of {bag}", indices.len()),
            ));
        }
        if let Some(w) = weights {
            if self.value(w).numel() != indices.len() {
                return Err(Error::shape("embedding_bag", self.shape(w), &[indices.len()]));
            }
        }
        let (rows, width) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("embedding_bag", format!("index {bad} out of range for {rows} rows")));
        }
        let src = self.value(table).data();
        let wv = weights.map(|w| self.value(w).data());
        let mut out = vec![0.0; rows_out * width];
        for (r, dst) in out.chunks_exact_mut(width).enumerate() {
            for k in r * bag..(r + 1) * bag {
                let row = &src[indices[k] * width..(indices[k] + 1) * width];
                match wv {
                    Some(w) => {
                        let c = w[k];
                        for (d, x) in dst.iter_mut().zip(row) {
                            *d += c * x;
                        }
                    }
                    None => add_into(dst, row),
                }
            }
        }
        let mut shape = out_shape.to_vec();
        shape.push(width);
        let value = Tensor::new(shape, out)?;
        let inputs: Vec<Var> = std::iter::once(table).chain(weights).collect();
        self.push(
            "embedding_bag",
            value,
            Op::EmbeddingBag(table, weights, indices.to_vec(), bag),
            &inputs,
        )
    }

    /// Divides each last-axis row by its L2 norm (floored at [`NORM_FLOOR`]).
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = *sa.last().ok_or_else(|| Error::invalid("l2_normalize", "scalar input"))?;
        let src = self.value(a).data();
        let mut norms = Vec::with_capacity(src.len() / d.max(1));
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d.max(1)) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms.push(n);
            out.extend(row.iter().map(|x| x / n));
        }
        let value = Tensor::new(sa, out)?;
        self.push("l2_normalize", value, Op::L2Normalize(a, norms), &[a])
    }

    /// Stride-1, zero-padded, size-preserving convolution.
    /// `input` is `[B,H,W,Ci]` and `weight` is `[k,k,Ci,Co]` with odd `k`.
    pub fn conv2d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sw[0] % 2 == 0 || sw[2] != si[3] {
            return Err(Error::shape("conv2d", &si, &sw));
        }
        let geom = conv::Geometry {
            batch: si[0],
            height: si[1],
            width: si[2],
            cin: si[3],
            k: sw[0],
            cout: sw[3],
        };
        let out = conv::forward(&geom, self.value(input).data(), self.value(weight).data());
        let value = Tensor::new(vec![si[0], si[1], si[2], sw[3]], out)?;
        self.push("conv2d", value, Op::Conv2d(input, weight), &[input, weight])
    }

    /// Softmax over the trailing `axes` dimensions taken jointly, with
    /// max subtraction.
    pub fn softmax(&mut self, a: Var, axes: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axes == 0 || axes > sa.len() {
            return Err(Error::invalid("softmax", format!("cannot take {axes} axes of {sa:?}")));
        }
        let group: usize = sa[sa.len() - axes..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(group.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|x| (x - m).exp()));
            let z: f64 = out[start..].iter().sum();
            for v in &mut out[start..] {
                *v /= z;
            }
        }
        let value = Tensor::new(sa, out)?;
        self.push("softmax", value, Op::Softmax(a, group), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let group = *sa.last().ok_or_else(|| Error::invalid("log_softmax", "scalar input"))?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(group.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let value = Tensor::new(sa, out)?;
        self.push("log_softmax", value, Op::LogSoftmax(a, group), &[a])
    }

    /// `∂root/∂p` for every parameter recorded on this tape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::with_capacity(self.params.len());

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                out.set(*id, Tensor::new(node.value.shape().to_vec(), g.to_vec())?);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.len(), |d| add_into(d, g));
                }
                if wants(*b) {
                    accumulate(grads, *b, g.len(), |d| add_into(d, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.len(), |d| add_into(d, g));
                }
                if wants(*b) {
                    accumulate(grads, *b, g.len(), |d| {
                        for (x, y) in d.iter_mut().zip(g) {
                            *x -= y;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    accumulate(grads, *a, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * vb[i];
                        }
                    });
                }
                if wants(*b) {
                    accumulate(grads, *b, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * va[i];
                        }
                    });
                }
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    accumulate(grads, *a, g.len(), |d| {
                        for i in 0..d.len() {
                            if va[i] >= vb[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                if wants(*b) {
                    accumulate(grads, *b, g.len(), |d| {
                        for i in 0..d.len() {
                            if va[i] < vb[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.len(), |d| {
                for (x, y) in d.iter_mut().zip(g) {
                    *x += c * y;
                }
            }),
            Op::Offset(a) | Op::Reshape(a) => accumulate(grads, *a, g.len(), |d| add_into(d, g)),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                accumulate(grads, *a, g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                })
            }
            Op::Log(a) => {
                let x = val(*a);
                accumulate(grads, *a, g.len(), |d| {
                    for i in 0..d.len() {
                        if x[i] > LOG_FLOOR {
                            d[i] += g[i] / x[i];
                        }
                    }
                })
            }
            Op::LogSigmoid(a) => {
                let x = val(*a);
                accumulate(grads, *a, g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * sigmoid(-x[i]);
                    }
                })
            }
            Op::Exp(a) => {
                let y = node.value.data();
                accumulate(grads, *a, g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                })
            }
            Op::Relu(a) => {
                let x = val(*a);
                accumulate(grads, *a, g.len(), |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::Abs(a) => {
                let x = val(*a);
                accumulate(grads, *a, g.len(), |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        } else if x[i] < 0.0 {
                            d[i] -= g[i];
                        }
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                accumulate(grads, *a, g.len(), |d| {
                    for i in 0..d.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let vb = val(*b);
                    accumulate(grads, *a, m * k, |d| gemm(m, n, k, g, false, vb, true, d, 1.0));
                }
                if wants(*b) {
                    let va = val(*a);
                    accumulate(grads, *b, k * n, |d| gemm(k, m, n, va, true, g, false, d, 1.0));
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                accumulate(grads, *a, m * n, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                })
            }
            Op::Broadcast(a) => {
                let sa = self.shape(*a);
                let n = self.nodes[a.0].value.numel();
                if n == 1 {
                    let total: f64 = g.iter().sum();
                    accumulate(grads, *a, 1, |d| d[0] += total)
                } else if is_trailing(sa, node.value.shape()) {
                    accumulate(grads, *a, n, |d| {
                        for chunk in g.chunks_exact(n) {
                            add_into(d, chunk);
                        }
                    })
                } else {
                    let map = broadcast_index_map(sa, node.value.shape());
                    accumulate(grads, *a, n, |d| {
                        for (o, &i) in map.iter().enumerate() {
                            d[i] += g[o];
                        }
                    })
                }
            }
            Op::SumAxis(a, axis) => {
                let sa = self.shape(*a);
                let (outer, n, inner) = split_axis(sa, *axis);
                accumulate(grads, *a, outer * n * inner, |d| {
                    for o in 0..outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            add_into(&mut d[(o * n + j) * inner..(o * n + j + 1) * inner], go);
                        }
                    }
                })
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].value.numel();
                accumulate(grads, *a, n, |d| {
                    for x in d.iter_mut() {
                        *x += g[0];
                    }
                })
            }
            Op::MaxAxis(a, axis, arg) => {
                let sa = self.shape(*a);
                let (outer, n, inner) = split_axis(sa, *axis);
                accumulate(grads, *a, outer * n * inner, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let slot = o * inner + i;
                            d[(o * n + arg[slot]) * inner + i] += g[slot];
                        }
                    }
                })
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if wants(p) {
                        accumulate(grads, p, outer * n * inner, |d| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                                add_into(&mut d[o * n * inner..(o + 1) * n * inner], src);
                            }
                        });
                    }
                    offset += n;
                }
            }
            Op::Embedding(table, indices) => {
                let ts = self.shape(*table);
                let width: usize = ts[1..].iter().product();
                let n = ts[0] * width;
                accumulate(grads, *table, n, |d| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut d[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                })
            }
            Op::EmbeddingBag(table, weights, indices, bag) => {
                let width = self.shape(*table)[1];
                let n = self.shape(*table)[0] * width;
                let wv = weights.map(|w| val(w));
                if wants(*table) {
                    accumulate(grads, *table, n, |d| {
                        for (r, go) in g.chunks_exact(width).enumerate() {
                            for k in r * bag..(r + 1) * bag {
                                let dst = &mut d[indices[k] * width..(indices[k] + 1) * width];
                                match wv {
                                    Some(w) => {
                                        let c = w[k];
                                        for (x, y) in dst.iter_mut().zip(go) {
                                            *x += c * y;
                                        }
                                    }
                                    None => add_into(dst, go),
                                }
                            }
                        }
                    });
                }
                if let Some(w) = *weights {
                    if wants(w) {
                        let tv = val(*table);
                        accumulate(grads, w, indices.len(), |d| {
                            for (r, go) in g.chunks_exact(width).enumerate() {
                                for k in r * bag..(r + 1) * bag {
                                    let row = &tv[indices[k] * width..(indices[k] + 1) * width];
                                    d[k] += row.iter().zip(go).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        });
                    }
                }
            }
            Op::L2Normalize(a, norms) => {
                let y = node.value.data();
                let dim = *self.shape(*a).last().unwrap_or(&1);
                accumulate(grads, *a, y.len(), |d| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let ys = &y[r * dim..(r + 1) * dim];
                        let gs = &g[r * dim..(r + 1) * dim];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..dim {
                            d[r * dim + j] += (gs[j] - ys[j] * dot) / nrm;
                        }
                    }
                })
            }
            Op::Conv2d(input, weight) => {
                let (si, sw) = (self.shape(*input), self.shape(*weight));
                let geom = conv::Geometry {
                    batch: si[0],
                    height: si[1],
                    width: si[2],
                    cin: si[3],
                    k: sw[0],
                    cout: sw[3],
                };
                let want_in = wants(*input);
                let want_w = wants(*weight);
                let mut d_in = want_in.then(|| vec![0.0; geom.input_len()]);
                let mut d_w = want_w.then(|| vec![0.0; geom.weight_len()]);
                conv::backward(
                    &geom,
                    val(*input),
                    val(*weight),
                    g,
                    d_in.as_deref_mut(),
                    d_w.as_deref_mut(),
                );
                if let Some(di) = d_in {
                    accumulate(grads, *input, di.len(), |d| add_into(d, &di));
                }
                if let Some(dw) = d_w {
                    accumulate(grads, *weight, dw.len(), |d| add_into(d, &dw));
                }
            }
            Op::Softmax(a, group) => {
                let y = node.value.data();
                accumulate(grads, *a, y.len(), |d| {
                    for (r, (ys, gs)) in y.chunks(*group).zip(g.chunks(*group)).enumerate() {
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..*group {
                            d[r * group + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a, group) => {
                let y = node.value.data();
                accumulate(grads, *a, y.len(), |d| {
                    for (r, (ys, gs)) in y.chunks(*group).zip(g.chunks(*group)).enumerate() {
                        let total: f64 = gs.iter().sum();
                        for j in 0..*group {
                            d[r * group + j] += gs[j] - ys[j].exp() * total;
                        }
                    }
                })
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn is_trailing(src: &[usize], dst: &[usize]) -> bool {
    src.len() <= dst.len() && dst[dst.len() - src.len()..] == *src
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}
