//! Reverse-mode tape.
//!
//! Every forward op appends a node holding its value and the inputs it was
//! computed from. Nodes are only ever appended, so the node list is already
//! in topological order and backward is a single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::{numel, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// How the right operand of a binary op maps onto the output.
#[derive(Debug, Clone)]
enum Bcast {
    Same,
    /// Right operand matches the trailing dims; index is `i % len`.
    Suffix(usize),
    /// Explicit source index per output element.
    Map(Vec<usize>),
}

impl Bcast {
    fn plan(out_shape: &[usize], src_shape: &[usize]) -> Result<Self> {
        if out_shape == src_shape {
            return Ok(Bcast::Same);
        }
        if src_shape.len() > out_shape.len() {
            return Err(dim_err!("cannot broadcast {:?} to {:?}", src_shape, out_shape));
        }
        let pad = out_shape.len() - src_shape.len();
        for (i, &s) in src_shape.iter().enumerate() {
            if s != 1 && s != out_shape[pad + i] {
                return Err(dim_err!("cannot broadcast {:?} to {:?}", src_shape, out_shape));
            }
        }
        // strip leading unit dims, then check for a pure suffix
        let trimmed: Vec<usize> = src_shape.iter().copied().skip_while(|&d| d == 1).collect();
        if out_shape.ends_with(&trimmed) {
            return Ok(Bcast::Suffix(numel(&trimmed)));
        }
        let rank = out_shape.len();
        let mut src_strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..src_shape.len()).rev() {
            src_strides[pad + i] = if src_shape[i] == 1 { 0 } else { acc };
            acc *= src_shape[i];
        }
        let total = numel(out_shape);
        let mut map = Vec::with_capacity(total);
        let mut index = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..total {
            map.push(src);
            for ax in (0..rank).rev() {
                index[ax] += 1;
                src += src_strides[ax];
                if index[ax] < out_shape[ax] {
                    break;
                }
                src -= src_strides[ax] * out_shape[ax];
                index[ax] = 0;
            }
        }
        Ok(Bcast::Map(map))
    }

    #[inline]
    fn src(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct MatLayout {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    trans_b: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, layout: MatLayout },
    Binary { kind: BinaryKind, a: Var, b: Var, bcast: Bcast },
    Expand { a: Var, bcast: Bcast },
    Scale { a: Var, factor: f64 },
    Sum { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Narrow { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
    Mse { pred: Var, target: Var },
    CdctBasis { psi: Var, n: usize },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Epsilon inside the layer normalization square root.
pub const LAYER_NORM_EPS: f64 = 1e-9;

/// Records a forward computation so that it can be differentiated.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            src += out_strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            src -= out_strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    map
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * PI);
    cdf + x * pdf
}

/// Value of a cosine basis row entry and its derivative in `psi`.
#[inline]
pub(crate) fn cdct_entry(k: usize, j: usize, psi: f64, n: usize) -> (f64, f64) {
    if k == 0 {
        (1.0 / libm::sqrt(n as f64), 0.0)
    } else {
        let scale = libm::sqrt(2.0 / n as f64);
        let w = (j as f64 + 0.5) * PI;
        (scale * libm::cos(w * psi), -scale * w * libm::sin(w * psi))
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Constant, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Constant, false)
    }

    /// Leaf for a stored parameter. Repeated calls for the same id return
    /// the same node, so fan-out accumulates through the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), t.requires_grad());
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    /// Matrix product over the last two axes.
    ///
    /// A 2-D operand is broadcast against a batched one; batched operands
    /// must agree on their leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err!("matmul needs rank >= 2, got {:?} and {:?}", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(dim_err!("matmul inner dimensions differ: {:?} x {:?}", sa, sb));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let (layout, out_shape) = if lead_b.is_empty() {
            // fold every leading axis of `a` into its rows
            let rows = numel(lead_a) * m;
            let mut shape = lead_a.to_vec();
            shape.extend([m, n]);
            (MatLayout { batch: 1, m: rows, k, n, a_batched: true, b_batched: false, trans_b }, shape)
        } else if lead_a.is_empty() {
            let mut shape = lead_b.to_vec();
            shape.extend([m, n]);
            (
                MatLayout { batch: numel(lead_b), m, k, n, a_batched: false, b_batched: true, trans_b },
                shape,
            )
        } else {
            if lead_a != lead_b {
                return Err(dim_err!("matmul batch axes differ: {:?} x {:?}", sa, sb));
            }
            let mut shape = lead_a.to_vec();
            shape.extend([m, n]);
            (
                MatLayout { batch: numel(lead_a), m, k, n, a_batched: true, b_batched: true, trans_b },
                shape,
            )
        };
        let MatLayout { batch, m, k, n, a_batched, b_batched, .. } = layout;
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for bi in 0..batch {
                let a_off = if a_batched { bi * m * k } else { 0 };
                let b_off = if b_batched { bi * k * n } else { 0 };
                let o = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    kernels::mm_nt(&av[a_off..a_off + m * k], &bv[b_off..b_off + n * k], o, m, k, n);
                } else {
                    kernels::mm(&av[a_off..a_off + m * k], &bv[b_off..b_off + k * n], o, m, k, n);
                }
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(out_shape, out, Op::MatMul { a, b, layout }, ng))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bcast = Bcast::plan(&shape, self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let out: Vec<f64> = match kind {
            BinaryKind::Add => av.iter().enumerate().map(|(i, x)| x + bv[bcast.src(i)]).collect(),
            BinaryKind::Sub => av.iter().enumerate().map(|(i, x)| x - bv[bcast.src(i)]).collect(),
            BinaryKind::Mul => av.iter().enumerate().map(|(i, x)| x * bv[bcast.src(i)]).collect(),
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Binary { kind, a, b, bcast }, ng))
    }

    /// `a + b`, with `b` broadcast to the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    /// `a - b`, with `b` broadcast to the shape of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Elementwise `a * b`, with `b` broadcast to the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Broadcasts `a` to `shape`; the backward rule sums over repeated axes.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let bcast = Bcast::plan(shape, self.shape(a))?;
        let av = self.value(a);
        let out: Vec<f64> = (0..numel(shape)).map(|i| av[bcast.src(i)]).collect();
        let ng = self.needs(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Expand { a, bcast }, ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a]);
        self.push(shape, out, Op::Scale { a, factor }, ng)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let ng = self.needs(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("invalid permutation {:?} for rank {}", perm, shape.len()));
        }
        let map = permute_map(&shape, perm);
        let av = self.value(a);
        let out = map.iter().map(|&s| av[s]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let ng = self.needs(&[a]);
        Ok(self.push(out_shape, out, Op::Permute { a, perm: perm.to_vec() }, ng))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!("narrow({axis}, {start}, {len}) out of range for {:?}", shape));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let av = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.needs(&[a]);
        Ok(self.push(out_shape, out, Op::Narrow { a, axis, start }, ng))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| dim_err!("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(dim_err!("concat axis {axis} out of range for {:?}", first));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(dim_err!("concat shapes {:?} and {:?} disagree", first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let ext = self.shape(*p)[axis];
                let v = self.value(*p);
                out.extend_from_slice(&v[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let ng = self.needs(parts);
        Ok(self.push(out_shape, out, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err!("softmax of a scalar"))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = libm::exp(*x - max);
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(shape, out, Op::Softmax { a }, ng))
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err!("layer_norm of a scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err!(
                "layer_norm affine shapes {:?}/{:?} do not match width {d}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a]);
        self.push(shape, out, Op::Gelu { a }, ng)
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(alloc::format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a]);
        Ok(self.push(shape, out, Op::Dropout { a, mask }, ng))
    }

    /// Mean squared error as a scalar node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(dim_err!("mse shapes {:?} vs {:?}", self.shape(pred), self.shape(target)));
        }
        let pv = self.value(pred);
        let tv = self.value(target);
        let s: f64 = pv.iter().zip(tv).map(|(p, t)| (p - t) * (p - t)).sum();
        let v = s / pv.len() as f64;
        let ng = self.needs(&[pred, target]);
        Ok(self.push(Vec::new(), vec![v], Op::Mse { pred, target }, ng))
    }

    /// Cosine basis `[k_max × n]` built from a frequency vector `psi`.
    ///
    /// Row 0 is the constant `1/√n` regardless of `psi[0]`; row `k` is
    /// `√(2/n)·cos((j+½)·π·psi[k])`.
    pub fn cdct_basis(&mut self, psi: Var, n: usize) -> Result<Var> {
        if self.shape(psi).len() != 1 || n == 0 {
            return Err(dim_err!("cdct_basis needs a 1-D psi and n > 0, got {:?}, n={n}", self.shape(psi)));
        }
        let pv = self.value(psi);
        let k_max = pv.len();
        let mut out = Vec::with_capacity(k_max * n);
        for (k, &p) in pv.iter().enumerate() {
            for j in 0..n {
                out.push(cdct_entry(k, j, p, n).0);
            }
        }
        let ng = self.needs(&[psi]);
        Ok(self.push(vec![k_max, n], out, Op::CdctBasis { psi, n }, ng))
    }

    /// Propagates gradients from the scalar `loss` into `params`.
    ///
    /// Gradients accumulate into the existing slots. After the call every
    /// parameter in the store has a populated gradient slot.
    pub fn backward(&self, loss: Var, params: &mut ParamStore) -> Result<()> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut adj, params)?;
        }
        for id in params.ids().collect::<Vec<_>>() {
            params.get_mut(id).ensure_grad();
        }
        Ok(())
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        params: &mut ParamStore,
    ) -> Result<()> {
        // accumulator for an input, or None if it does not need a gradient
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let n = &self.nodes[v.0];
                if n.needs_grad {
                    Some(adj[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => params.get_mut(*id).accumulate_grad(g)?,
            Op::MatMul { a, b, layout } => {
                let MatLayout { batch, m, k, n, a_batched, b_batched, trans_b } = *layout;
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(da) = slot!(*a) {
                    for bi in 0..batch {
                        let a_off = if a_batched { bi * m * k } else { 0 };
                        let b_off = if b_batched { bi * k * n } else { 0 };
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let out = &mut da[a_off..a_off + m * k];
                        if trans_b {
                            kernels::mm(gb, &bv[b_off..b_off + n * k], out, m, n, k);
                        } else {
                            kernels::mm_nt(gb, &bv[b_off..b_off + k * n], out, m, n, k);
                        }
                    }
                }
                if let Some(db) = slot!(*b) {
                    for bi in 0..batch {
                        let a_off = if a_batched { bi * m * k } else { 0 };
                        let b_off = if b_batched { bi * k * n } else { 0 };
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let out = &mut db[b_off..b_off + k * n];
                        if trans_b {
                            kernels::mm_tn(gb, &av[a_off..a_off + m * k], out, n, m, k);
                        } else {
                            kernels::mm_tn(&av[a_off..a_off + m * k], gb, out, k, m, n);
                        }
                    }
                }
            }
            Op::Binary { kind, a, b, bcast } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(da) = slot!(*a) {
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => {
                            da.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                        }
                        BinaryKind::Mul => {
                            for (i, d) in da.iter_mut().enumerate() {
                                *d += g[i] * bv[bcast.src(i)];
                            }
                        }
                    }
                }
                if let Some(db) = slot!(*b) {
                    match kind {
                        BinaryKind::Add => g.iter().enumerate().for_each(|(i, g)| db[bcast.src(i)] += g),
                        BinaryKind::Sub => g.iter().enumerate().for_each(|(i, g)| db[bcast.src(i)] -= g),
                        BinaryKind::Mul => {
                            g.iter().enumerate().for_each(|(i, g)| db[bcast.src(i)] += g * av[i])
                        }
                    }
                }
            }
            Op::Expand { a, bcast } => {
                if let Some(da) = slot!(*a) {
                    g.iter().enumerate().for_each(|(i, g)| da[bcast.src(i)] += g);
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = slot!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor);
                }
            }
            Op::Sum { a } => {
                if let Some(da) = slot!(*a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = slot!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Permute { a, perm } => {
                let map = permute_map(self.shape(*a), perm);
                if let Some(da) = slot!(*a) {
                    map.iter().zip(g).for_each(|(&s, g)| da[s] += g);
                }
            }
            Op::Narrow { a, axis, start } => {
                let (outer, extent, inner) = axis_split(self.shape(*a), *axis);
                let len = node.shape[*axis];
                if let Some(da) = slot!(*a) {
                    for o in 0..outer {
                        let base = (o * extent + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        da[base..base + len * inner].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let ext = self.shape(*p)[*axis];
                    if let Some(dp) = slot!(*p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            dp[o * ext * inner..(o + 1) * ext * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += ext;
                }
            }
            Op::Softmax { a } => {
                let d = *node.shape.last().expect("softmax rank >= 1");
                if let Some(da) = slot!(*a) {
                    for ((y, gy), dx) in
                        node.value.chunks_exact(d).zip(g.chunks_exact(d)).zip(da.chunks_exact_mut(d))
                    {
                        let dotp: f64 = y.iter().zip(gy).map(|(y, g)| y * g).sum();
                        for j in 0..d {
                            dx[j] += y[j] * (gy[j] - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = *node.shape.last().expect("layer_norm rank >= 1");
                let gv = self.value(*gain).to_vec();
                if let Some(dg) = slot!(*gain) {
                    for (h, gr) in xhat.chunks_exact(d).zip(g.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * h[j];
                        }
                    }
                }
                if let Some(db) = slot!(*bias) {
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(dx) = slot!(*x) {
                    let mut dh = vec![0.0; d];
                    for (r, ((h, gr), out)) in
                        xhat.chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate()
                    {
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            out[j] += inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a);
                if let Some(da) = slot!(*a) {
                    for i in 0..da.len() {
                        da[i] += g[i] * gelu_grad(av[i]);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(da) = slot!(*a) {
                    for i in 0..da.len() {
                        da[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let tv = self.value(*target);
                let c = 2.0 * g[0] / pv.len() as f64;
                if let Some(dp) = slot!(*pred) {
                    for i in 0..dp.len() {
                        dp[i] += c * (pv[i] - tv[i]);
                    }
                }
                if let Some(dt) = slot!(*target) {
                    for i in 0..dt.len() {
                        dt[i] -= c * (pv[i] - tv[i]);
                    }
                }
            }
            Op::CdctBasis { psi, n } => {
                let pv = self.value(*psi);
                if let Some(dpsi) = slot!(*psi) {
                    for (k, &p) in pv.iter().enumerate().skip(1) {
                        let row = &g[k * n..(k + 1) * n];
                        dpsi[k] += row.iter().enumerate().map(|(j, g)| g * cdct_entry(k, j, p, *n).1).sum::<f64>();
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        for (input, want) in [
            ([0.0, 0.0], [0.5, 0.5]),
            ([1000.0, 1000.0], [0.5, 0.5]),
            ([0.0, libm::log(3.0)], [0.25, 0.75]),
        ] {
            let x = tape.constant(&t(&[1, 2], &input));
            let y = tape.softmax(x).unwrap();
            assert!(close(tape.value(y), &want, 1e-15), "{:?}", tape.value(y));
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(&Tensor::full(&[2], 1.0));
        let b = tape.constant(&Tensor::zeros(&[2]));
        let x = tape.constant(&t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(close(tape.value(y), &[-1.0, 1.0], 1e-8));

        let g = tape.constant(&Tensor::full(&[4], 1.0));
        let b = tape.constant(&Tensor::zeros(&[4]));
        let x = tape.constant(&Tensor::full(&[4], 7.5));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_limits() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[3], &[0.0, 40.0, -40.0]));
        let y = tape.gelu(x);
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 40.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[100_000], 1.0));
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Parameter(_))));
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let v = tape.value(y);
        let survivors = v.iter().filter(|&&s| s != 0.0).count() as f64 / v.len() as f64;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        assert!(v.iter().all(|&s| s == 0.0 || s == 2.0));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let mut tape = Tape::new();
        let x = tape.param(&ps, id);
        let s = tape.sum(x);
        tape.backward(s, &mut ps).unwrap();
        assert_eq!(ps.get(id).grad().unwrap(), &[1.0; 6]);
    }

    #[test]
    fn scalar_linear_regression_gradient() {
        let (w0, x0, y0) = (1.5, 2.0, 0.5);
        let mut ps = ParamStore::new();
        let w = ps.add("w", t(&[1, 1], &[w0]));
        let mut tape = Tape::new();
        let wv = tape.param(&ps, w);
        let xv = tape.constant(&t(&[1, 1], &[x0]));
        let yv = tape.constant(&t(&[1, 1], &[y0]));
        let p = tape.matmul(wv, xv).unwrap();
        let loss = tape.mse(p, yv).unwrap();
        tape.backward(loss, &mut ps).unwrap();
        assert!((ps.get(w).grad().unwrap()[0] - 2.0 * x0 * (w0 * x0 - y0)).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Tensor::zeros(&[3]));
        let mut tape = Tape::new();
        let x = tape.param(&ps, id);
        assert!(matches!(tape.backward(x, &mut ps), Err(Error::Usage(_))));
    }

    #[test]
    fn replaying_backward_doubles_gradients() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", t(&[3], &[0.3, -1.2, 2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&ps, id);
        let y = tape.gelu(x);
        let y = tape.mul(y, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s, &mut ps).unwrap();
        let once = ps.get(id).grad().unwrap().to_vec();
        tape.backward(s, &mut ps).unwrap();
        let twice = ps.get(id).grad().unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn broadcast_plans() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3, 4]));
        let bias = tape.constant(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.add(a, bias).unwrap();
        assert_eq!(&tape.value(y)[4..8], &[1.0, 2.0, 3.0, 4.0]);
        let mid = tape.constant(&t(&[2, 1, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let y = tape.add(a, mid).unwrap();
        assert_eq!(&tape.value(y)[8..12], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&tape.value(y)[12..16], &[5.0, 6.0, 7.0, 8.0]);
        let bad = tape.constant(&Tensor::zeros(&[3, 3]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn permute_narrow_concat_shapes() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let a = tape.constant(&t(&[2, 3, 4], &data));
        let p = tape.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // out[j, i0, i1] = a[i0, i1, j]
        assert_eq!(tape.value(p)[6 + 3 + 2], data[12 + 2 * 4 + 1]);
        let n = tape.narrow(a, 1, 1, 2).unwrap();
        assert_eq!(tape.shape(n), &[2, 2, 4]);
        assert_eq!(tape.value(n)[0], 4.0);
        let c = tape.concat(&[n, a], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5, 4]);
        assert_eq!(tape.value(c)[8], 0.0);
        assert!(tape.permute(a, &[0, 0, 1]).is_err());
    }

    #[test]
    fn cdct_basis_dc_row_is_constant() {
        let mut tape = Tape::new();
        let psi = tape.constant(&t(&[3], &[0.37, 0.2, 0.9]));
        let b = tape.cdct_basis(psi, 5).unwrap();
        let v = tape.value(b);
        assert!(v[..5].iter().all(|&x| (x - 1.0 / libm::sqrt(5.0)).abs() < 1e-15));
    }
}
