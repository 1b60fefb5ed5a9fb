use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::{softmax_rows_into, ParamId, Params, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

/// Boolean attention mask; `true` marks an allowed (query, key) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Arc<Vec<bool>>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape("Mask::new", &[rows, cols], &[allowed.len()]));
        }
        Ok(Self {
            rows,
            cols,
            allowed: Arc::new(allowed),
        })
    }

    /// Lower-triangular mask: query `i` may see keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|x| x % n <= x / n).collect();
        Self {
            rows: n,
            cols: n,
            allowed: Arc::new(allowed),
        }
    }

    /// Every query may see exactly the keys flagged valid.
    pub fn key_padding(rows: usize, key_valid: &[bool]) -> Self {
        let cols = key_valid.len();
        let allowed = (0..rows).flat_map(|_| key_valid.iter().copied()).collect();
        Self {
            rows,
            cols,
            allowed: Arc::new(allowed),
        }
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape("Mask::and", &self.shape(), &other.shape()));
        }
        let allowed = self
            .allowed
            .iter()
            .zip(other.allowed.iter())
            .map(|(a, b)| *a && *b)
            .collect();
        Mask::new(self.rows, self.cols, allowed)
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// How [`Graph::cross_entropy`] reduces per-token losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Arc<Vec<T>>),
    Scale(usize, T),
    ScaleConst {
        scalar: usize,
        index: usize,
        c: Tensor<T>,
    },
    Relu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        shift: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<usize>),
    Sum(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        denom: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::ScaleConst { .. } => "scale_const",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::ConcatCols(_) => "concat_cols",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Reverse-mode gradient tape.
///
/// Every operation appends one node; [`Graph::backward`] walks the nodes in
/// reverse and accumulates gradients into everything that requires them.
/// A tape is single-threaded and short-lived: build one per forward pass.
pub struct Graph<'p, T: Scalar = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
    params: Option<&'p Params<T>>,
    bound: HashMap<ParamId, usize>,
    grads: Option<Vec<Option<Vec<T>>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: None,
            bound: HashMap::new(),
            grads: None,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// A tape whose [`Graph::param`] calls resolve against `params`.
    pub fn with_params(params: &'p Params<T>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Turns the per-operation NaN/Inf scan on or off (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `mark` (a previous [`Graph::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.bound.retain(|_, &mut idx| idx < mark);
        self.grads = None;
    }

    fn var(&self, idx: usize) -> Var {
        Var {
            tape: self.id,
            idx: idx as u32,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx as usize >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx as usize)
    }

    /// Value held by `v`. Panics if `v` came from another tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        let idx = self.idx(v).expect("variable belongs to this tape");
        &self.nodes[idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    fn any_grad(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is populated by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter from the attached store as a gradient leaf; repeated
    /// calls for the same id return the same variable.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&idx) = self.bound.get(&id) {
            return Ok(self.var(idx));
        }
        let params = self
            .params
            .ok_or_else(|| Error::invalid("graph has no parameter store attached"))?;
        if id.0 >= params.len() {
            return Err(Error::invalid(format!("unknown parameter id {}", id.0)));
        }
        let v = self.leaf(params.get(id).clone())?;
        let idx = v.idx as usize;
        self.nodes[idx].param = Some(id);
        self.bound.insert(id, idx);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let out = super::matmul(va, vb)?;
        let rg = self.any_grad(&[ia, ib]);
        self.push(out, Op::MatMul(ia, ib), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let (r, c) = va.dims2()?;
        let src = va.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.any_grad(&[ia]);
        self.push(Tensor::new(&[c, r], out)?, Op::Transpose(ia), rg)
    }

    fn same_shape(&self, op: &'static str, ia: usize, ib: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, ia: usize, ib: usize, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ia, ib)?;
        let out = self.zip_with(ia, ib, |x, y| x + y)?;
        let rg = self.any_grad(&[ia, ib]);
        self.push(out, Op::Add(ia, ib), rg)
    }

    /// Adds a `[n]` row vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(row)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (_, n) = va.dims2()?;
        if vb.shape() != [n] {
            return Err(Error::shape("add_row", va.shape(), vb.shape()));
        }
        let bias = vb.data();
        let data = va
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(bias).map(|(&x, &b)| x + b))
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.any_grad(&[ia, ib]);
        self.push(out, Op::AddRow(ia, ib), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ia, ib)?;
        let out = self.zip_with(ia, ib, |x, y| x * y)?;
        let rg = self.any_grad(&[ia, ib]);
        self.push(out, Op::Mul(ia, ib), rg)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if va.shape() != c.shape() {
            return Err(Error::shape("mul_const", va.shape(), c.shape()));
        }
        let data = va.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.any_grad(&[ia]);
        self.push(out, Op::MulConst(ia, Arc::new(c.data().to_vec())), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = T::from_f64(factor);
        let out = self.nodes[ia].value.map(|x| x * s);
        let rg = self.any_grad(&[ia]);
        self.push(out, Op::Scale(ia, s), rg)
    }

    /// `scalar[index] * c` for a constant tensor `c`; the gradient flows into
    /// the single selected element of `scalar`.
    pub fn scale_const(&mut self, scalar: Var, index: usize, c: &Tensor<T>) -> Result<Var> {
        let is = self.idx(scalar)?;
        let vs = &self.nodes[is].value;
        if index >= vs.len() {
            return Err(Error::invalid(format!(
                "scale_const index {index} out of range for shape {:?}",
                vs.shape()
            )));
        }
        let s = vs.data()[index];
        let out = c.map(|x| s * x);
        let rg = self.any_grad(&[is]);
        self.push(
            out,
            Op::ScaleConst {
                scalar: is,
                index,
                c: c.clone(),
            },
            rg,
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.any_grad(&[ia]);
        self.push(out, Op::Relu(ia), rg)
    }

    /// Row-wise softmax. Masked-out entries get exactly zero probability;
    /// a row with no allowed entry is an error.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let (r, c) = va.dims2()?;
        if let Some(m) = mask {
            if m.shape() != [r, c] {
                return Err(Error::shape("softmax_rows mask", va.shape(), &m.shape()));
            }
        }
        let data = softmax_rows_into(va.data(), mask.map(Mask::as_slice), r, c)?;
        let out = Tensor::new(&[r, c], data)?;
        let rg = self.any_grad(&[ia]);
        self.push(out, Op::Softmax(ia), rg)
    }

    /// Per-row normalization to zero mean and unit population variance,
    /// followed by `gain * x + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(shift)?);
        let vx = &self.nodes[ix].value;
        let (rows, d) = vx.dims2()?;
        for &i in &[ig, ib] {
            let s = self.nodes[i].value.shape();
            if s != [d] {
                return Err(Error::shape("layer_norm", vx.shape(), s));
            }
        }
        let (g, b) = (self.nodes[ig].value.data(), self.nodes[ib].value.data());
        let eps = T::from_f64(eps);
        let n = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(&[rows, d], out)?;
        let rg = self.any_grad(&[ix, ig, ib]);
        self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                shift: ib,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Selects rows of a `[vocab, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let vt = &self.nodes[it].value;
        let (rows, d) = vt.dims2()?;
        if ids.is_empty() {
            return Err(Error::invalid("gather with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange { id, size: rows });
            }
            out.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], out)?;
        let rg = self.any_grad(&[it]);
        self.push(
            out,
            Op::Gather {
                table: it,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idxs = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = idxs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let (rows, _) = self.nodes[*first].value.dims2()?;
        let mut widths = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let (r, c) = self.nodes[i].value.dims2()?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.nodes[*first].value.shape(), &[r, c]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idxs {
                out.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let out = Tensor::new(&[rows, total], out)?;
        let rg = self.any_grad(&idxs);
        self.push(out, Op::ConcatCols(idxs), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let total = self.nodes[ia].value.data().iter().copied().sum();
        let rg = self.any_grad(&[ia]);
        self.push(Tensor::scalar(total), Op::Sum(ia), rg)
    }

    /// Token-level cross-entropy of `[m, vocab]` logits against per-row
    /// targets; `None` rows are padding and contribute nothing.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        reduction: Reduction,
    ) -> Result<Var> {
        let il = self.idx(logits)?;
        let vl = &self.nodes[il].value;
        let (m, vocab) = vl.dims2()?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::AllPadding);
        }
        let probs = softmax_rows_into(vl.data(), None, m, vocab)?;
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, size: vocab });
            }
            let row = vl.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[t];
        }
        let denom = match reduction {
            Reduction::Mean => T::from_f64(count as f64),
            Reduction::Sum => T::one(),
        };
        let rg = self.any_grad(&[il]);
        self.push(
            Tensor::scalar(total / denom),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
                denom,
            },
            rg,
        )
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.idx(loss)?;
        if self.grads.is_some() {
            return Err(Error::BackwardAlreadyRun);
        }
        let loss_shape = self.nodes[il].value.shape();
        if self.nodes[il].value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[il].requires_grad {
            grads[il] = Some(vec![T::one()]);
        }
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[target].requires_grad {
                return;
            }
            let len = nodes[target].value.len();
            let slot = grads[target].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        };
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a].value, &nodes[b].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                acc(a, &mut |da| {
                    // dA = G · Bᵀ
                    for r in 0..m {
                        for p in 0..k {
                            let b_row = &vb.data()[p * n..(p + 1) * n];
                            let g_row = &g[r * n..(r + 1) * n];
                            da[r * k + p] += g_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                });
                acc(b, &mut |db| {
                    // dB = Aᵀ · G
                    for r in 0..m {
                        for p in 0..k {
                            let av = va.data()[r * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            &Op::Transpose(a) => {
                let (r, c) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                acc(a, &mut |da| {
                    for x in 0..r {
                        for y in 0..c {
                            da[x * c + y] += g[y * r + x];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                for t in [a, b] {
                    acc(t, &mut |d| add_assign(d, g));
                }
            }
            &Op::AddRow(a, b) => {
                let n = nodes[b].value.len();
                acc(a, &mut |d| add_assign(d, g));
                acc(b, &mut |db| {
                    for row in g.chunks(n) {
                        add_assign(db, row);
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                acc(a, &mut |d| {
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d += gv * y;
                    }
                });
                acc(b, &mut |d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(va) {
                        *d += gv * x;
                    }
                });
            }
            Op::MulConst(a, c) => acc(*a, &mut |d| {
                for ((d, &gv), &y) in d.iter_mut().zip(g).zip(c.iter()) {
                    *d += gv * y;
                }
            }),
            &Op::Scale(a, s) => acc(a, &mut |d| {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d += gv * s;
                }
            }),
            Op::ScaleConst { scalar, index, c } => acc(*scalar, &mut |d| {
                d[*index] += g.iter().zip(c.data()).map(|(&x, &y)| x * y).sum::<T>();
            }),
            &Op::Relu(a) => {
                let va = nodes[a].value.data();
                acc(a, &mut |d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(va) {
                        if x > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                acc(a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum::<T>();
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let gv = nodes[*gain].value.data();
                let d = gv.len();
                let n = T::from_f64(d as f64);
                acc(*gain, &mut |dg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*shift, &mut |ds| {
                    for gr in g.chunks(d) {
                        add_assign(ds, gr);
                    }
                });
                acc(*x, &mut |dx| {
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh = mean_dh / n;
                        mean_dh_h = mean_dh_h / n;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = nodes[*table].value.shape()[1];
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_assign(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.shape()[1];
                    acc(p, &mut |dp| {
                        for r in 0..rows {
                            add_assign(&mut dp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            &Op::Sum(a) => acc(a, &mut |d| {
                for v in d.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                denom,
            } => {
                let vocab = nodes[*logits].value.shape()[1];
                let scale = g[0] / *denom;
                acc(*logits, &mut |d| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..vocab {
                            d[r * vocab + j] += scale * probs[r * vocab + j];
                        }
                        d[r * vocab + t] -= scale;
                    }
                });
            }
        }
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`, if
    /// `v` requires one and was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let i = self.idx(v).ok()?;
        let g = self.grads.as_ref()?[i].as_ref()?;
        Tensor::new(self.nodes[i].value.shape(), g.clone()).ok()
    }

    /// Gradients of every bound parameter reached by the last backward pass.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let id = n.param?;
                let g = self.grads.as_ref()?[i].as_ref()?;
                Some((id, Tensor::new(n.value.shape(), g.clone()).ok()?))
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Clears gradients so that [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads = None;
    }
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
