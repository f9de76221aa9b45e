//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! A forward pass records one node per primitive into an arena; `backward`
//! replays the arena in reverse, accumulating gradients. Node indices are
//! topologically ordered by construction, so the reverse sweep needs no
//! explicit graph traversal. The tape is intended to be built, differentiated
//! once, and dropped; gradients are zeroed at the start of every `backward`
//! call, so repeated calls do not accumulate across passes.

use crate::scalar::Scalar;
use crate::tensor::{mat_dims, matmul_into, matmul_nt_into, matmul_tn_into, ShapeError, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    /// `a @ b^T`
    MatmulNt(Var, Var),
    Add(Var, Var),
    /// `[m, n] + [n]`, broadcast over the leading axis
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `[m, n]` scaled per row by `[m]`
    MulRows(Var, Var),
    /// `[m, d] -> [m, B d]`: input replicated per basis function and scaled
    /// by the basis column, `out[i, l d + j] = x[i, j] * basis[i, l]`
    BasisExpand(Var, Var),
    /// multiplication by the constant held in `Node::scale`
    Scale(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Elu(Var),
    Softmax(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    /// single column extracted as a 1-D vector
    Col(Var, usize),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op,
    scale: F,
}

/// Wengert-style tape over tensors.
pub struct Tape<F: Scalar = f64> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op) -> Var {
        self.push_scaled(value, op, F::one())
    }

    fn push_scaled(&mut self, value: Tensor<F>, op: Op, scale: F) -> Var {
        self.nodes.push(Node { value, op, scale });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, value: F) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    /// `None` if `v` did not influence the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    // ---- primitives -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    /// `a @ b^T` with `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (m, k) = mat_dims(self.value(a), "matmul_nt")?;
        let (n, k2) = mat_dims(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(ShapeError::Incompatible {
                op: "matmul_nt",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            }
            .into());
        }
        let mut out = vec![F::zero(); m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatmulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let v = self.value(a).add(self.value(b))?;
        if self.value(a).shape() == self.value(b).shape() {
            Ok(self.push(v, Op::Add(a, b)))
        } else {
            Ok(self.push(v, Op::AddRow(a, b)))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(ShapeError::Incompatible {
                op: "sub",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            }
            .into());
        }
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(ShapeError::Incompatible {
                op: "mul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            }
            .into());
        }
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(ShapeError::Incompatible {
                op: "div",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            }
            .into());
        }
        if self.value(b).data().iter().any(|&x| x == F::zero()) {
            return Err(ShapeError::Domain {
                op: "div",
                detail: "division by zero".into(),
            }
            .into());
        }
        let v = self.value(a).zip(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    /// Scale row `i` of `x: [m, n]` by `s[i]` (`s: [m]`).
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var, TapeError> {
        let (m, n) = mat_dims(self.value(x), "mul_rows")?;
        if self.value(s).shape() != [m] {
            return Err(ShapeError::Incompatible {
                op: "mul_rows",
                left: self.value(x).shape().to_vec(),
                right: self.value(s).shape().to_vec(),
            }
            .into());
        }
        let sd = self.value(s).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let si = sd[i];
            out.extend(self.value(x).row(i).iter().map(|&v| v * si));
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MulRows(x, s)))
    }

    /// Fused basis expansion `[phi_1 . x | ... | phi_B . x]` used by
    /// varying-coefficient layers; `basis` is `[m, B]`.
    pub fn basis_expand(&mut self, x: Var, basis: Var) -> Result<Var, TapeError> {
        let (m, d) = mat_dims(self.value(x), "basis_expand")?;
        let (mb, nb) = mat_dims(self.value(basis), "basis_expand")?;
        if mb != m {
            return Err(ShapeError::Incompatible {
                op: "basis_expand",
                left: self.value(x).shape().to_vec(),
                right: self.value(basis).shape().to_vec(),
            }
            .into());
        }
        let mut out = Vec::with_capacity(m * nb * d);
        for i in 0..m {
            let xr = self.value(x).row(i);
            let br = self.value(basis).row(i);
            for &phi in br {
                out.extend(xr.iter().map(|&v| v * phi));
            }
        }
        let v = Tensor::new(vec![m, nb * d], out)?;
        Ok(self.push(v, Op::BasisExpand(x, basis)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).scale(c);
        self.push_scaled(v, Op::Scale(a), c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(F::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TapeError> {
        if self.value(a).data().iter().any(|&x| x <= F::zero()) {
            return Err(ShapeError::Domain {
                op: "log",
                detail: "argument must be strictly positive".into(),
            }
            .into());
        }
        let v = self.value(a).map(F::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(F::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = F::one();
        let v = self.value(a).map(|x| one / (one + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| {
            if x >= F::zero() {
                x
            } else {
                x.exp() - F::one()
            }
        });
        self.push(v, Op::Elu(a))
    }

    /// Softmax over `axis` of a 2-D tensor (1-D input acts as a single row).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TapeError> {
        let val = self.value(a);
        let (t, one_d) = if val.rank() == 1 {
            (
                Tensor::new(vec![1, val.numel()], val.data().to_vec())?,
                true,
            )
        } else {
            (val.clone(), false)
        };
        if t.rank() != 2 || axis > 1 {
            return Err(ShapeError::Axis {
                op: "softmax",
                axis,
                shape: val.shape().to_vec(),
            }
            .into());
        }
        let work = if axis == 0 { t.transpose()? } else { t };
        let (m, n) = (work.rows(), work.cols());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = work.row(i);
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (x - mx).exp();
                denom += *o;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= denom;
            }
        }
        let mut res = Tensor::new(vec![m, n], out)?;
        if axis == 0 {
            res = res.transpose()?;
        }
        if one_d {
            res = Tensor::from_vec(res.into_data());
        }
        Ok(self.push(res, Op::Softmax(a, axis)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = mat_dims(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(ShapeError::Incompatible {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                }
                .into());
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![m, total], out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = mat_dims(self.value(p), "concat_rows")?;
            if pn != n {
                return Err(ShapeError::Incompatible {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                }
                .into());
            }
            m += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TapeError> {
        let (m, n) = mat_dims(self.value(a), "slice_cols")?;
        if start + len > n {
            return Err(ShapeError::Slice {
                op: "slice_cols",
                start,
                len,
                shape: self.value(a).shape().to_vec(),
            }
            .into());
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        let v = Tensor::new(vec![m, len], out)?;
        Ok(self.push(v, Op::SliceCols(a, start, len)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TapeError> {
        let (m, n) = mat_dims(self.value(a), "slice_rows")?;
        if start + len > m {
            return Err(ShapeError::Slice {
                op: "slice_rows",
                start,
                len,
                shape: self.value(a).shape().to_vec(),
            }
            .into());
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let v = Tensor::new(vec![len, n], out)?;
        Ok(self.push(v, Op::SliceRows(a, start, len)))
    }

    /// Column `j` of a 2-D tensor as a 1-D vector.
    pub fn col(&mut self, a: Var, j: usize) -> Result<Var, TapeError> {
        let (m, n) = mat_dims(self.value(a), "col")?;
        if j >= n {
            return Err(ShapeError::Slice {
                op: "col",
                start: j,
                len: 1,
                shape: self.value(a).shape().to_vec(),
            }
            .into());
        }
        let out: Vec<F> = (0..m).map(|i| self.value(a).get2(i, j)).collect();
        Ok(self.push(Tensor::from_vec(out), Op::Col(a, j)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// Row sums of a 2-D tensor, returned as `[m]`.
    pub fn row_sums(&mut self, a: Var) -> Result<Var, TapeError> {
        let (m, _) = mat_dims(self.value(a), "row_sums")?;
        let out: Vec<F> = (0..m)
            .map(|i| self.value(a).row(i).iter().copied().sum())
            .collect();
        Ok(self.push(Tensor::from_vec(out), Op::RowSums(a)))
    }

    /// Sum of squared differences, reduced to a scalar.
    pub fn sq_err(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.sum(sq))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients from any previous call are
    /// discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<(), TapeError> {
        if !self.nodes[loss.0].value.is_scalar_shape() {
            return Err(TapeError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        self.grads[loss.0] = Some(Tensor::new(seed_shape, vec![F::one()])?);

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Tensor<F>) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, ci) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *gi += *ci;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor<F>) -> Result<(), TapeError> {
        // ops are matched by value-free metadata; node values are read immutably
        let scale = self.nodes[idx].scale;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                // da = g @ b^T via an explicit transpose: the copy is small
                // (b is usually a parameter) and the product then runs on the
                // vectorizable kernel
                let bt = self.value(b).transpose()?;
                let mut da = vec![F::zero(); m * k];
                matmul_into(g.data(), bt.data(), m, n, k, &mut da);
                let mut db = vec![F::zero(); k * n];
                matmul_tn_into(self.value(a).data(), g.data(), k, m, n, &mut db);
                self.accumulate(a, Tensor::new(vec![m, k], da)?);
                self.accumulate(b, Tensor::new(vec![k, n], db)?);
            }
            Op::MatmulNt(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).rows();
                // y = a b^T: da = g b, db = g^T a
                let mut da = vec![F::zero(); m * k];
                matmul_into(g.data(), self.value(b).data(), m, n, k, &mut da);
                let mut db = vec![F::zero(); n * k];
                matmul_tn_into(g.data(), self.value(a).data(), n, m, k, &mut db);
                self.accumulate(a, Tensor::new(vec![m, k], da)?);
                self.accumulate(b, Tensor::new(vec![n, k], db)?);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::AddRow(a, b) => {
                let (a, b) = (*a, *b);
                let n = self.value(b).numel();
                let mut db = vec![F::zero(); n];
                for (j, &gv) in g.data().iter().enumerate() {
                    db[j % n] += gv;
                }
                self.accumulate(a, g.clone());
                self.accumulate(b, Tensor::from_vec(db));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                let neg = g.map(|x| -x);
                self.accumulate(b, neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.mul(self.value(b))?;
                let db = g.mul(self.value(a))?;
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.zip(self.value(b), "div", |gv, bv| gv / bv)?;
                let y = &self.nodes[idx].value;
                // d/db (a/b) = -y/b
                let mut db = g.clone();
                for ((d, &yv), &bv) in db
                    .data_mut()
                    .iter_mut()
                    .zip(y.data())
                    .zip(self.value(b).data())
                {
                    *d = -(*d) * yv / bv;
                }
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::MulRows(x, s) => {
                let (x, s) = (*x, *s);
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let sd = self.value(s).data().to_vec();
                let mut dx = Vec::with_capacity(m * n);
                let mut ds = vec![F::zero(); m];
                for i in 0..m {
                    let xr = self.value(x).row(i);
                    let gr = &g.data()[i * n..(i + 1) * n];
                    for (&gv, &xv) in gr.iter().zip(xr) {
                        ds[i] += gv * xv;
                    }
                    dx.extend(gr.iter().map(|&gv| gv * sd[i]));
                }
                self.accumulate(x, Tensor::new(vec![m, n], dx)?);
                self.accumulate(s, Tensor::from_vec(ds));
            }
            Op::BasisExpand(x, basis) => {
                let (x, basis) = (*x, *basis);
                let (m, d) = (self.value(x).rows(), self.value(x).cols());
                let nb = self.value(basis).cols();
                let mut dx = vec![F::zero(); m * d];
                let mut dbasis = vec![F::zero(); m * nb];
                for i in 0..m {
                    let xr = self.value(x).row(i);
                    let br = self.value(basis).row(i);
                    let gr = &g.data()[i * nb * d..(i + 1) * nb * d];
                    let dxr = &mut dx[i * d..(i + 1) * d];
                    for (l, &phi) in br.iter().enumerate() {
                        let gblock = &gr[l * d..(l + 1) * d];
                        let mut acc = F::zero();
                        for ((dxj, &gj), &xj) in dxr.iter_mut().zip(gblock).zip(xr) {
                            *dxj += gj * phi;
                            acc += gj * xj;
                        }
                        dbasis[i * nb + l] = acc;
                    }
                }
                self.accumulate(x, Tensor::new(vec![m, d], dx)?);
                self.accumulate(basis, Tensor::new(vec![m, nb], dbasis)?);
            }
            Op::Scale(a) => {
                let a = *a;
                let da = g.scale(scale);
                self.accumulate(a, da);
            }
            Op::Exp(a) => {
                let a = *a;
                let da = g.mul(&self.nodes[idx].value)?;
                self.accumulate(a, da);
            }
            Op::Log(a) => {
                let a = *a;
                let da = g.zip(self.value(a), "log", |gv, xv| gv / xv)?;
                self.accumulate(a, da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let da = g.zip(&self.nodes[idx].value, "tanh", |gv, yv| {
                    gv * (F::one() - yv * yv)
                })?;
                self.accumulate(a, da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let da = g.zip(&self.nodes[idx].value, "sigmoid", |gv, yv| {
                    gv * yv * (F::one() - yv)
                })?;
                self.accumulate(a, da);
            }
            Op::Elu(a) => {
                let a = *a;
                let da = g.zip(&self.nodes[idx].value, "elu", |gv, yv| {
                    if yv >= F::zero() {
                        gv
                    } else {
                        gv * (yv + F::one())
                    }
                })?;
                self.accumulate(a, da);
            }
            Op::Softmax(a, axis) => {
                let (a, axis) = (*a, *axis);
                let y = self.nodes[idx].value.clone();
                let da = softmax_backward(&y, g, axis)?;
                self.accumulate(a, da);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let m = g.rows();
                let mut start = 0;
                for p in parts {
                    let pn = self.value(p).cols();
                    let mut dp = Vec::with_capacity(m * pn);
                    for i in 0..m {
                        dp.extend_from_slice(&g.row(i)[start..start + pn]);
                    }
                    self.accumulate(p, Tensor::new(vec![m, pn], dp)?);
                    start += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let n = g.cols();
                let mut start = 0;
                for p in parts {
                    let pm = self.value(p).rows();
                    let dp = g.data()[start * n..(start + pm) * n].to_vec();
                    self.accumulate(p, Tensor::new(vec![pm, n], dp)?);
                    start += pm;
                }
            }
            Op::SliceCols(a, cstart, clen) => {
                let (a, cstart, clen) = (*a, *cstart, *clen);
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                let mut da = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let gr = &g.data()[i * clen..(i + 1) * clen];
                    da.data_mut()[i * n + cstart..i * n + cstart + clen].copy_from_slice(gr);
                }
                self.accumulate(a, da);
            }
            Op::SliceRows(a, rstart, rlen) => {
                let (a, rstart, rlen) = (*a, *rstart, *rlen);
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                let mut da = Tensor::zeros(&[m, n]);
                da.data_mut()[rstart * n..(rstart + rlen) * n].copy_from_slice(g.data());
                self.accumulate(a, da);
            }
            Op::Col(a, j) => {
                let (a, j) = (*a, *j);
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                let mut da = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    da.data_mut()[i * n + j] = g.data()[i];
                }
                self.accumulate(a, da);
            }
            Op::Sum(a) => {
                let a = *a;
                let da = Tensor::full(self.value(a).shape(), g.item());
                self.accumulate(a, da);
            }
            Op::Mean(a) => {
                let a = *a;
                let n = F::from_f64_const(self.value(a).numel() as f64);
                let da = Tensor::full(self.value(a).shape(), g.item() / n);
                self.accumulate(a, da);
            }
            Op::RowSums(a) => {
                let a = *a;
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                let mut da = Vec::with_capacity(m * n);
                for i in 0..m {
                    let gv = g.data()[i];
                    da.extend(std::iter::repeat_n(gv, n));
                }
                self.accumulate(a, Tensor::new(vec![m, n], da)?);
            }
        }
        Ok(())
    }
}

fn softmax_backward<F: Scalar>(
    y: &Tensor<F>,
    g: &Tensor<F>,
    axis: usize,
) -> Result<Tensor<F>, ShapeError> {
    let one_d = y.rank() == 1;
    let reshape = |t: &Tensor<F>| -> Result<Tensor<F>, ShapeError> {
        if one_d {
            Tensor::new(vec![1, t.numel()], t.data().to_vec())
        } else {
            Ok(t.clone())
        }
    };
    let (mut y2, mut g2) = (reshape(y)?, reshape(g)?);
    if axis == 0 && !one_d {
        y2 = y2.transpose()?;
        g2 = g2.transpose()?;
    }
    let (m, n) = (y2.rows(), y2.cols());
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let yr = y2.row(i);
        let gr = &g2.data()[i * n..(i + 1) * n];
        let inner: F = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
        for ((o, &yv), &gv) in out[i * n..(i + 1) * n].iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - inner);
        }
    }
    let mut res = Tensor::new(vec![m, n], out)?;
    if axis == 0 && !one_d {
        res = res.transpose()?;
    }
    if one_d {
        res = Tensor::from_vec(res.into_data());
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 33) as f64) / (u32::MAX as f64) - 0.5
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn elu_definition() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.0, -1.0, 0.0]));
        let y = tape.elu(x);
        let d = tape.value(y).data();
        assert_eq!(d[0], 2.0);
        assert!((d[1] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap());
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(p).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn grad_of_sum_of_squares_is_two_p() {
        let mut tape = Tape::<f64>::new();
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let p = tape.leaf(Tensor::from_vec(vals.clone()));
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        for (g, v) in tape.grad(p).unwrap().data().iter().zip(&vals) {
            assert!((g - 2.0 * v).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(p),
            Err(TapeError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(vec![3.0]));
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let g1 = tape.grad(p).unwrap().data()[0];
        tape.backward(loss).unwrap();
        let g2 = tape.grad(p).unwrap().data()[0];
        assert_eq!(g1, g2);
    }

    /// Two-layer ELU MLP scalar loss against central finite differences.
    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut state = 7u64;
        let w1v: Vec<f64> = (0..12).map(|_| lcg(&mut state)).collect();
        let b1v: Vec<f64> = (0..4).map(|_| lcg(&mut state)).collect();
        let w2v: Vec<f64> = (0..4).map(|_| lcg(&mut state)).collect();
        let xv: Vec<f64> = (0..6).map(|_| lcg(&mut state)).collect();

        let eval = |w1: &[f64], b1: &[f64], w2: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::new(vec![2, 3], xv.clone()).unwrap());
            let w1 = tape.leaf(Tensor::new(vec![3, 4], w1.to_vec()).unwrap());
            let b1 = tape.leaf(Tensor::from_vec(b1.to_vec()));
            let w2 = tape.leaf(Tensor::new(vec![4, 1], w2.to_vec()).unwrap());
            let h = tape.matmul(x, w1).unwrap();
            let h = tape.add(h, b1).unwrap();
            let h = tape.elu(h);
            let o = tape.matmul(h, w2).unwrap();
            let sq = tape.mul(o, o).unwrap();
            let loss = tape.sum(sq);
            tape.value(loss).item()
        };

        // analytic gradients
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], xv.clone()).unwrap());
        let w1 = tape.leaf(Tensor::new(vec![3, 4], w1v.clone()).unwrap());
        let b1 = tape.leaf(Tensor::from_vec(b1v.clone()));
        let w2 = tape.leaf(Tensor::new(vec![4, 1], w2v.clone()).unwrap());
        let h0 = tape.matmul(x, w1).unwrap();
        let h1 = tape.add(h0, b1).unwrap();
        let h2 = tape.elu(h1);
        let o = tape.matmul(h2, w2).unwrap();
        let sq = tape.mul(o, o).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();

        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let tol = 1e-3 * fd.abs().max(analytic.abs()) + 1e-6;
            assert!(
                (analytic - fd).abs() <= tol,
                "analytic {analytic} vs fd {fd}"
            );
        };
        for i in 0..w1v.len() {
            let mut p = w1v.clone();
            p[i] += h;
            let plus = eval(&p, &b1v, &w2v);
            p[i] -= 2.0 * h;
            let minus = eval(&p, &b1v, &w2v);
            check(tape.grad(w1).unwrap().data()[i], plus, minus);
        }
        for i in 0..b1v.len() {
            let mut p = b1v.clone();
            p[i] += h;
            let plus = eval(&w1v, &p, &w2v);
            p[i] -= 2.0 * h;
            let minus = eval(&w1v, &p, &w2v);
            check(tape.grad(b1).unwrap().data()[i], plus, minus);
        }
        for i in 0..w2v.len() {
            let mut p = w2v.clone();
            p[i] += h;
            let plus = eval(&w1v, &b1v, &p);
            p[i] -= 2.0 * h;
            let minus = eval(&w1v, &b1v, &p);
            check(tape.grad(w2).unwrap().data()[i], plus, minus);
        }
    }

    #[test]
    fn output_shapes_are_pure_functions_of_input_shapes() {
        // table-driven: (op, input shapes) -> output shape
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[3, 4]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        let c = tape.leaf(Tensor::zeros(&[3, 4]));
        let v = tape.leaf(Tensor::zeros(&[4]));
        let s = tape.leaf(Tensor::zeros(&[3]));
        let cases: Vec<(Var, Vec<usize>)> = vec![
            (tape.matmul(a, b).unwrap(), vec![3, 2]),
            (tape.add(a, c).unwrap(), vec![3, 4]),
            (tape.add(a, v).unwrap(), vec![3, 4]),
            (tape.mul_rows(a, s).unwrap(), vec![3, 4]),
            (tape.concat_cols(&[a, c]).unwrap(), vec![3, 8]),
            (tape.concat_rows(&[a, c]).unwrap(), vec![6, 4]),
            (tape.slice_cols(a, 1, 2).unwrap(), vec![3, 2]),
            (tape.col(a, 0).unwrap(), vec![3]),
            (tape.row_sums(a).unwrap(), vec![3]),
            (tape.sum(a), vec![]),
            (tape.mean(a), vec![]),
            (tape.softmax(a, 1).unwrap(), vec![3, 4]),
        ];
        for (var, expect) in cases {
            assert_eq!(tape.value(var).shape(), expect.as_slice());
        }
    }
}
