//! Per-example reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar with respect to every non-frozen parameter that
//! was read into the tape.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn};
use super::{NnError, Tensor};

/// Handle of a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GroupMean(Var, usize),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        t.reshaped(vec![r, c]).expect("same element count")
    }
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let n = &self.nodes[v.0];
        match (&n.value, &n.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(as_matrix(t), Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let frozen = self.params.get(id).frozen;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: !frozen,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims_err(&self, what: &str, a: Var, b: Var) -> NnError {
        NnError::Dimension(format!(
            "{what}: shapes {:?} and {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        ))
    }

    /// `a[r x k] * b[k x c]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (r, k) = self.shape2(a);
        let (k2, c) = self.shape2(b);
        if k != k2 {
            return Err(self.dims_err("matmul", a, b));
        }
        let mut out = vec![0.0; r * c];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, r, k, c);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MatMul(a, b), ng))
    }

    /// `a[r x k] * b[c x k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (r, k) = self.shape2(a);
        let (c, k2) = self.shape2(b);
        if k != k2 {
            return Err(self.dims_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; r * c];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, r, k, c);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MatMulNT(a, b), ng))
    }

    /// `a[r x k]^T * b[r x c]`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (r, k) = self.shape2(a);
        let (r2, c) = self.shape2(b);
        if r != r2 {
            return Err(self.dims_err("matmul_tn", a, b));
        }
        let mut out = vec![0.0; k * c];
        gemm_tn(self.value(a).data(), self.value(b).data(), &mut out, r, k, c);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(k, c, out)?, Op::MatMulTN(a, b), ng))
    }

    fn zip_same(
        &mut self,
        what: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NnError> {
        if self.shape2(a) != self.shape2(b) {
            return Err(self.dims_err(what, a, b));
        }
        let (r, c) = self.shape2(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::matrix(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a single row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        let (r, c) = self.shape2(a);
        if self.value(row).len() != c {
            return Err(self.dims_err("add_row", a, row));
        }
        let rv = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(rv) {
                *x += y;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape2(a);
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let ng = self.needs(a);
        self.push(
            Tensor::matrix(r, c, data).expect("same shape"),
            Op::Scale(a, s),
            ng,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape2(a);
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(Tensor::matrix(r, c, data).expect("same shape"), Op::Relu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let (r, c) = self.shape2(a);
        let data = self.value(a).data().iter().map(|x| x.abs()).collect();
        let ng = self.needs(a);
        self.push(Tensor::matrix(r, c, data).expect("same shape"), Op::Abs(a), ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape2(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.needs(a);
        self.push(
            Tensor::matrix(r, c, data).expect("same shape"),
            Op::Softmax(a),
            ng,
        )
    }

    /// Row-wise layer normalization `gain * (x - mean) / sqrt(var + eps) + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var, NnError> {
        let (r, c) = self.shape2(x);
        if c < 2 {
            return Err(NnError::Dimension(format!(
                "layer_norm needs vectors of length >= 2, got {:?}",
                self.value(x).shape()
            )));
        }
        if self.value(gain).len() != c || self.value(shift).len() != c {
            return Err(self.dims_err("layer_norm gain/shift", x, gain));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + s[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(shift);
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = *parts
            .first()
            .ok_or_else(|| NnError::Dimension("concat of nothing".into()))?;
        let r = self.shape2(first).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape2(p);
            if pr != r {
                return Err(self.dims_err("concat_cols", first, p));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = *parts
            .first()
            .ok_or_else(|| NnError::Dimension("concat of nothing".into()))?;
        let c = self.shape2(first).1;
        let mut out = Vec::new();
        for &p in parts {
            if self.shape2(p).1 != c {
                return Err(self.dims_err("concat_rows", first, p));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (r, c) = self.shape2(a);
        if len == 0 || start + len > c {
            return Err(NnError::Dimension(format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::matrix(r, len, out)?, Op::SliceCols(a, start), ng))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NnError> {
        let (r, c) = self.shape2(a);
        if rows.is_empty() {
            return Err(NnError::Dimension("gather of zero rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(NnError::Dimension(format!("row {bad} out of {r} rows")));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(self.value(a).row(i));
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor::matrix(rows.len(), c, out)?,
            Op::GatherRows(a, rows.to_vec()),
            ng,
        ))
    }

    /// Mean over consecutive row groups of size `group`.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Result<Var, NnError> {
        let (r, c) = self.shape2(a);
        if group == 0 || r % group != 0 {
            return Err(NnError::Dimension(format!(
                "group_mean: {r} rows not divisible into groups of {group}"
            )));
        }
        let n = r / group;
        let mut out = vec![0.0; n * c];
        let data = self.value(a).data();
        for g in 0..n {
            let orow = &mut out[g * c..(g + 1) * c];
            for k in 0..group {
                let row = &data[(g * group + k) * c..(g * group + k + 1) * c];
                for (o, v) in orow.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o /= group as f64;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::GroupMean(a, group), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Tensor::from_vec(vec![s]), Op::Sum(a), ng)
    }

    /// Sum over rows of `-log softmax(logits[row])[target[row]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NnError> {
        let (r, c) = self.shape2(logits);
        if targets.len() != r {
            return Err(NnError::Dimension(format!(
                "cross_entropy: {r} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(NnError::Dimension(format!(
                "cross_entropy: target {t} out of {c} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
            softmax_in_place(row);
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::from_vec(vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Gradients of the scalar `loss` with respect to all non-frozen
    /// parameters read into this graph.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut out = Gradients::empty(self.params.len());
        if !self.needs(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::from_vec(vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let shaped = g.reshaped(self.params.value(*id).shape().to_vec())?;
                    match &mut out.slots[id.0] {
                        Some(acc) => acc.add_assign_scaled(&shaped, 1.0),
                        slot @ None => *slot = Some(shaped),
                    }
                }
                Op::MatMul(a, b) => {
                    let (r, k) = self.shape2(*a);
                    let c = self.shape2(*b).1;
                    if self.needs(*a) {
                        let mut da = vec![0.0; r * k];
                        gemm_nt(gd, self.value(*b).data(), &mut da, r, c, k);
                        self.acc(&mut grads, *a, &da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * c];
                        gemm_tn(self.value(*a).data(), gd, &mut db, r, k, c);
                        self.acc(&mut grads, *b, &db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    // y = a b^T; da = g b; db = g^T a
                    let (r, k) = self.shape2(*a);
                    let c = self.shape2(*b).0;
                    if self.needs(*a) {
                        let mut da = vec![0.0; r * k];
                        gemm_nn(gd, self.value(*b).data(), &mut da, r, c, k);
                        self.acc(&mut grads, *a, &da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; c * k];
                        gemm_tn(gd, self.value(*a).data(), &mut db, r, c, k);
                        self.acc(&mut grads, *b, &db);
                    }
                }
                Op::MatMulTN(a, b) => {
                    // y = a^T b; da = b g^T; db = a g
                    let (r, k) = self.shape2(*a);
                    let c = self.shape2(*b).1;
                    if self.needs(*a) {
                        let mut da = vec![0.0; r * k];
                        gemm_nt(self.value(*b).data(), gd, &mut da, r, c, k);
                        self.acc(&mut grads, *a, &da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; r * c];
                        gemm_nn(self.value(*a).data(), gd, &mut db, r, k, c);
                        self.acc(&mut grads, *b, &db);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, gd);
                    self.acc(&mut grads, *b, gd);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, gd);
                    if self.needs(*b) {
                        let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                        self.acc(&mut grads, *b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let da: Vec<f64> =
                            gd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                        self.acc(&mut grads, *a, &da);
                    }
                    if self.needs(*b) {
                        let db: Vec<f64> =
                            gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                        self.acc(&mut grads, *b, &db);
                    }
                }
                Op::AddRow(a, row) => {
                    self.acc(&mut grads, *a, gd);
                    if self.needs(*row) {
                        let c = self.shape2(*a).1;
                        let mut dr = vec![0.0; c];
                        for chunk in gd.chunks(c) {
                            for (d, v) in dr.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                        self.acc(&mut grads, *row, &dr);
                    }
                }
                Op::Scale(a, s) => {
                    let da: Vec<f64> = gd.iter().map(|v| v * s).collect();
                    self.acc(&mut grads, *a, &da);
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = gd
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, &da);
                }
                Op::Abs(a) => {
                    let da: Vec<f64> = gd
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -*g } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, &da);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax value").data();
                    let c = self.shape2(*a).1;
                    let mut da = vec![0.0; y.len()];
                    for ((drow, yrow), grow) in
                        da.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            drow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.acc(&mut grads, *a, &da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let (r, c) = self.shape2(*x);
                    let gv = self.value(*gain).data();
                    if self.needs(*gain) {
                        let mut dg = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                dg[j] += gd[i * c + j] * xhat[i * c + j];
                            }
                        }
                        self.acc(&mut grads, *gain, &dg);
                    }
                    if self.needs(*shift) {
                        let mut ds = vec![0.0; c];
                        for chunk in gd.chunks(c) {
                            for (d, v) in ds.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                        self.acc(&mut grads, *shift, &ds);
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..c {
                                let d = gd[i * c + j] * gv[j];
                                mean_d += d;
                                mean_dx += d * xhat[i * c + j];
                            }
                            mean_d /= c as f64;
                            mean_dx /= c as f64;
                            for j in 0..c {
                                let d = gd[i * c + j] * gv[j];
                                dx[i * c + j] =
                                    inv_std[i] * (d - mean_d - xhat[i * c + j] * mean_dx);
                            }
                        }
                        self.acc(&mut grads, *x, &dx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let r = self.shape2(parts[0]).0;
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.shape2(p).1;
                        if self.needs(p) {
                            let mut dp = Vec::with_capacity(r * pc);
                            for i in 0..r {
                                dp.extend_from_slice(&gd[i * total + offset..i * total + offset + pc]);
                            }
                            self.acc(&mut grads, p, &dp);
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.needs(p) {
                            self.acc(&mut grads, p, &gd[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape2(*a);
                    let len = g.cols();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c + start..i * c + start + len]
                            .copy_from_slice(&gd[i * len..(i + 1) * len]);
                    }
                    self.acc(&mut grads, *a, &da);
                }
                Op::GatherRows(a, rows) => {
                    let (r, c) = self.shape2(*a);
                    let mut da = vec![0.0; r * c];
                    for (k, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            da[i * c + j] += gd[k * c + j];
                        }
                    }
                    self.acc(&mut grads, *a, &da);
                }
                Op::GroupMean(a, group) => {
                    let (r, c) = self.shape2(*a);
                    let inv = 1.0 / *group as f64;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let gi = i / group;
                        for j in 0..c {
                            da[i * c + j] = gd[gi * c + j] * inv;
                        }
                    }
                    self.acc(&mut grads, *a, &da);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let da = vec![gd[0]; n];
                    self.acc(&mut grads, *a, &da);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = self.shape2(*logits).1;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * gd[0]).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        dl[i * c + t] -= gd[0];
                    }
                    self.acc(&mut grads, *logits, &dl);
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, d: &[f64]) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(d) {
                    *a += b;
                }
            }
            slot @ None => {
                let (r, c) = self.shape2(v);
                *slot = Some(Tensor::matrix(r, c, d.to_vec()).expect("gradient shape"));
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
