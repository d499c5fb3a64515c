//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends a node holding its output value and the variables
//! it read. [`Tape::backward`] walks the nodes in reverse record order and
//! accumulates adjoints, so a variable used several times receives the sum of
//! the contributions from each use.
//!
//! Matrices are rank-2 and row-major. Weights follow the `out × in`
//! convention: a batch of row vectors `X` is projected with
//! [`Tape::matmul_nt`] as `X · Wᵀ`.

use crate::tensor::{check_shape, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p, T> {
    Borrowed(&'p [T]),
    Owned(Vec<T>),
}

impl<T> Value<'_, T> {
    fn as_slice(&self) -> &[T] {
        match self {
            Value::Borrowed(s) => s,
            Value::Owned(v) => v,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Mean { src: Var, axis: usize },
    SumAll(Var),
    Reshape(Var),
    Clamp { src: Var, lo: f64, hi: f64 },
    MaskedSoftmax(Var),
    WeightedSumRows { w: Var, rows: Var },
    Gather { table: Var, ids: Vec<usize>, skip: Option<usize> },
    MaskRows { src: Var, keep: Vec<bool> },
    BceWithLogits { logit: Var, label: f64 },
}

struct Node<'p, T> {
    shape: Vec<usize>,
    value: Value<'p, T>,
    op: Op,
    needs_grad: bool,
}

/// Records operations on values of type `T` for one forward pass.
///
/// A tape is confined to one thread. Leaves may borrow parameter storage for
/// the lifetime `'p`, so many tapes can share one read-only parameter set.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Sum that does not depend on the order of `vals`.
fn canonical_sum<T: Scalar>(vals: &mut [T]) -> T {
    vals.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    vals.iter().fold(T::zero(), |acc, &x| acc + x)
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => (shape[..shape.len() - 1].iter().product(), *shape.last().unwrap()),
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Removes and returns the gradient buffer of `v`.
    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Adds the gradient of `v` (if any) into `tensor`'s gradient slot.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<(), TensorError> {
        match self.get(v) {
            Some(g) => {
                let g: Vec<f32> = g.iter().map(|x| x.as_f32()).collect();
                tensor.accumulate_grad(&g)
            }
            None => Ok(()),
        }
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Single value of a one-element variable.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn leaf_check(shape: &[usize], len: usize) -> Result<(), TensorError> {
        let n = check_shape(shape)?;
        if n != len {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len,
            });
        }
        Ok(())
    }

    /// Trainable leaf borrowing its storage.
    pub fn param(&mut self, data: &'p [T], shape: &[usize]) -> Result<Var, TensorError> {
        Self::leaf_check(shape, data.len())?;
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value: Value::Borrowed(data),
            op: Op::Leaf,
            needs_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf owning its storage.
    pub fn param_owned(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var, TensorError> {
        Self::leaf_check(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true))
    }

    /// Non-trainable input.
    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var, TensorError> {
        Self::leaf_check(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Var, TensorError> {
        let n = check_shape(shape)?;
        self.constant(vec![T::zero(); n], shape)
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    /// `a[r×c] · b[c×k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2(a, "matmul")?;
        let (c2, k) = self.rank2(b, "matmul")?;
        if c != c2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); r * k];
        for i in 0..r {
            let orow = &mut out[i * k..(i + 1) * k];
            for p in 0..c {
                let x = av[i * c + p];
                let brow = &bv[p * k..(p + 1) * k];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o = *o + x * y;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![r, k], out, Op::MatMul(a, b), ng))
    }

    /// `a[r×c] · b[k×c]ᵀ`; rank-1 `b` is read as a single row.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2(a, "matmul_nt")?;
        let (k, c2) = dims2(self.shape(b));
        if c != c2 || self.shape(b).len() > 2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(r * k);
        for i in 0..r {
            let arow = &av[i * c..(i + 1) * c];
            for j in 0..k {
                let brow = &bv[j * c..(j + 1) * c];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc = acc + x * y;
                }
                out.push(acc);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![r, k], out, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2(a, "transpose")?;
        let av = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "hadamard")?;
        Ok(self.zip_with(a, b, Op::Hadamard(a, b), |x, y| x * y))
    }

    /// Adds a bias vector (any shape with `cols` elements) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = dims2(self.shape(a));
        if self.value(bias).len() != c {
            return Err(shape_err("add_row", self.shape(a), self.shape(bias)));
        }
        let (av, bv) = (self.value(a), self.value(bias));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(av[i * c..(i + 1) * c].iter().zip(bv).map(|(&x, &y)| x + y));
        }
        let ng = self.ng(a) || self.ng(bias);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddRow(a, bias), ng))
    }

    /// Multiplies row `i` of `a` by `w[i]`; `w` has one element per row.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var, TensorError> {
        let (r, c) = dims2(self.shape(a));
        if self.value(w).len() != r {
            return Err(shape_err("scale_rows", self.shape(a), self.shape(w)));
        }
        let (av, wv) = (self.value(a), self.value(w));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(av[i * c..(i + 1) * c].iter().map(|&x| x * wv[i]));
        }
        let ng = self.ng(a) || self.ng(w);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::ScaleRows(a, w), ng))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let out: Vec<T> = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let st = T::of(s);
        self.map(a, Op::Scale(a, s), |x| x * st)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), |x| x.abs())
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        self.map(a, Op::Clamp { src: a, lo, hi }, |x| x.max(l).min(h))
    }

    /// Concatenates rank-1 or rank-2 variables along `axis` (0 = rows, 1 = columns).
    /// Rank-1 inputs are read as single rows.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::EmptyShape(vec![]))?;
        let all_rank1 = parts.iter().all(|&p| self.shape(p).len() == 1);
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| dims2(self.shape(p))).collect();
        let out = match axis {
            0 => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(shape_err("concat", self.shape(first), self.shape(parts[1])));
                }
                let rows: usize = dims.iter().map(|d| d.0).sum();
                let mut v = Vec::with_capacity(rows * c);
                for &p in parts {
                    v.extend_from_slice(self.value(p));
                }
                (vec![rows, c], v)
            }
            1 => {
                let r = dims[0].0;
                if let Some(bad) = parts.iter().find(|&&p| dims2(self.shape(p)).0 != r) {
                    return Err(shape_err("concat", self.shape(first), self.shape(*bad)));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut v = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for (&p, d) in parts.iter().zip(&dims) {
                        v.extend_from_slice(&self.value(p)[i * d.1..(i + 1) * d.1]);
                    }
                }
                let shape = if all_rank1 { vec![cols] } else { vec![r, cols] };
                (shape, v)
            }
            _ => return Err(shape_err("concat", self.shape(first), &[axis])),
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            out.0,
            out.1,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Contiguous block `[start, start+len)` along `axis` of a rank-2 variable.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.rank2(a, "slice")?;
        let limit = if axis == 0 { r } else { c };
        if len == 0 || start + len > limit || axis > 1 {
            return Err(shape_err("slice", self.shape(a), &[axis, start, len]));
        }
        let av = self.value(a);
        let (shape, out) = if axis == 0 {
            (vec![len, c], av[start * c..(start + len) * c].to_vec())
        } else {
            let mut v = Vec::with_capacity(r * len);
            for i in 0..r {
                v.extend_from_slice(&av[i * c + start..i * c + start + len]);
            }
            (vec![r, len], v)
        };
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::Slice { src: a, axis, start }, ng))
    }

    /// Mean over `axis` of a rank-2 variable, keeping the reduced axis with
    /// size one. A rank-1 variable reduces to shape `[1]`.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let (r, c) = dims2(&shape);
        let av = self.value(a);
        let (out_shape, out) = match (shape.len(), axis) {
            (1, 0) => (vec![1], vec![av.iter().copied().sum::<T>() / T::of(c as f64)]),
            (2, 0) => {
                let mut v = vec![T::zero(); c];
                for i in 0..r {
                    for (o, &x) in v.iter_mut().zip(&av[i * c..(i + 1) * c]) {
                        *o = *o + x;
                    }
                }
                let n = T::of(r as f64);
                (vec![1, c], v.into_iter().map(|x| x / n).collect())
            }
            (2, 1) => {
                let n = T::of(c as f64);
                let v = (0..r)
                    .map(|i| av[i * c..(i + 1) * c].iter().copied().sum::<T>() / n)
                    .collect();
                (vec![r, 1], v)
            }
            _ => return Err(shape_err("mean_axis", &shape, &[axis])),
        };
        let ng = self.ng(a);
        Ok(self.push(out_shape, out, Op::Mean { src: a, axis }, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::SumAll(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n = check_shape(shape)?;
        if n != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let v = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), ng))
    }

    /// Row-wise softmax over the last axis restricted to `mask`; masked slots
    /// are exactly zero. `mask` has one flag per element.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let shape = self.shape(logits).to_vec();
        let (r, c) = dims2(&shape);
        if mask.len() != r * c {
            return Err(shape_err("masked_softmax", &shape, &[mask.len()]));
        }
        let lv = self.value(logits);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &lv[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(None, |acc: Option<T>, x| Some(acc.map_or(x, |a| a.max(x))))
                .ok_or(TensorError::DegenerateMask { row: i })?;
            let o = &mut out[i * c..(i + 1) * c];
            let mut exps = Vec::with_capacity(c);
            for j in 0..c {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    exps.push(o[j]);
                }
            }
            let total = canonical_sum(&mut exps);
            for x in o.iter_mut() {
                *x = *x / total;
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(shape, out, Op::MaskedSoftmax(logits), ng))
    }

    /// `Σ_j w_j · rows_j` for weights `w` (`[1×n]` or `[n]`) and `rows`
    /// (`[n×d]`), giving `[1×d]`. Each column is summed in value order, so
    /// permuting the rows together with their weights gives identical bits.
    pub fn weighted_sum_rows(&mut self, w: Var, rows: Var) -> Result<Var, TensorError> {
        let (n, d) = self.rank2(rows, "weighted_sum_rows")?;
        if self.value(w).len() != n {
            return Err(shape_err("weighted_sum_rows", self.shape(w), self.shape(rows)));
        }
        let (wv, rv) = (self.value(w), self.value(rows));
        let mut terms = Vec::with_capacity(n);
        let out = (0..d)
            .map(|c| {
                terms.clear();
                terms.extend((0..n).map(|j| wv[j] * rv[j * d + c]));
                canonical_sum(&mut terms)
            })
            .collect();
        let ng = self.ng(w) || self.ng(rows);
        Ok(self.push(vec![1, d], out, Op::WeightedSumRows { w, rows }, ng))
    }

    /// Gathers rows `ids` of a `[V×d]` table. Row `skip` (padding) receives
    /// no gradient.
    pub fn gather_rows(
        &mut self,
        table: Var,
        ids: &[usize],
        skip: Option<usize>,
    ) -> Result<Var, TensorError> {
        let (v, d) = self.rank2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(TensorError::EmptyShape(vec![0, d]));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, len: v });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                skip,
            },
            ng,
        ))
    }

    /// Replaces rows with `keep[i] == false` by exact zeros.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var, TensorError> {
        let (r, c) = dims2(self.shape(a));
        if keep.len() != r {
            return Err(shape_err("mask_rows", self.shape(a), &[keep.len()]));
        }
        if keep.iter().all(|&k| k) {
            return Ok(a);
        }
        let av = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in (0..r).filter(|&i| keep[i]) {
            out[i * c..(i + 1) * c].copy_from_slice(&av[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::MaskRows {
                src: a,
                keep: keep.to_vec(),
            },
            ng,
        ))
    }

    /// Binary cross-entropy of `σ(logit)` against `label ∈ [0,1]`, computed
    /// from the logit for stability.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Result<Var, TensorError> {
        if self.value(logit).len() != 1 {
            return Err(shape_err("bce_with_logits", self.shape(logit), &[1]));
        }
        let z = self.scalar(logit);
        let y = T::of(label);
        let loss = z.max(T::zero()) - y * z + (T::one() + (-z.abs()).exp()).ln();
        let ng = self.ng(logit);
        Ok(self.push(vec![1], vec![loss], Op::BceWithLogits { logit, label }, ng))
    }

    /// Replays the tape in reverse from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.nodes.is_empty() {
            return Ok(Gradients { grads: Vec::new() });
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::UnknownVar(loss.0));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.as_slice();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (r, c) = dims2(self.shape(a));
                let k = dims2(self.shape(b)).1;
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..r {
                        for p in 0..c {
                            let mut s = T::zero();
                            for j in 0..k {
                                s = s + g[i * k + j] * bv[p * k + j];
                            }
                            ga[i * c + p] = ga[i * c + p] + s;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..r {
                        for p in 0..c {
                            let x = av[i * c + p];
                            for j in 0..k {
                                gb[p * k + j] = gb[p * k + j] + x * g[i * k + j];
                            }
                        }
                    }
                }
            }
            &Op::MatMulNt(a, b) => {
                let (r, c) = dims2(self.shape(a));
                let k = dims2(self.shape(b)).0;
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..r {
                        let garow = &mut ga[i * c..(i + 1) * c];
                        for j in 0..k {
                            let gij = g[i * k + j];
                            for (o, &w) in garow.iter_mut().zip(&bv[j * c..(j + 1) * c]) {
                                *o = *o + gij * w;
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..r {
                        let arow = &av[i * c..(i + 1) * c];
                        for j in 0..k {
                            let gij = g[i * k + j];
                            for (o, &x) in gb[j * c..(j + 1) * c].iter_mut().zip(arow) {
                                *o = *o + gij * x;
                            }
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = dims2(self.shape(a));
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(o, &x)| *o = *o - x);
                }
            }
            &Op::AddRow(a, bias) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
                }
                if let Some(gb) = self.acc(grads, bias) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, &x)| *o = *o + x);
                    }
                }
            }
            &Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, &x), &w) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + x * w;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((o, &x), &w) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + x * w;
                    }
                }
            }
            &Op::ScaleRows(a, w) => {
                let (r, c) = dims2(self.shape(a));
                let (av, wv) = (self.value(a), self.value(w));
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[i * c + j] * wv[i];
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, w) {
                    for i in 0..r {
                        let mut s = T::zero();
                        for j in 0..c {
                            s = s + g[i * c + j] * av[i * c + j];
                        }
                        gw[i] = gw[i] + s;
                    }
                }
            }
            &Op::Scale(a, s) => {
                let s = T::of(s);
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x * s);
                }
            }
            &Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, &x), &t) in ga.iter_mut().zip(g).zip(y) {
                        *o = *o + x * (T::one() - t * t);
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, &x), &s) in ga.iter_mut().zip(g).zip(y) {
                        *o = *o + x * s * (T::one() - s);
                    }
                }
            }
            &Op::Abs(a) => {
                let av = self.value(a);
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, &x), &v) in ga.iter_mut().zip(g).zip(av) {
                        let sign = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *o = *o + x * sign;
                    }
                }
            }
            &Op::Clamp { src, lo, hi } => {
                let (l, h) = (T::of(lo), T::of(hi));
                let av = self.value(src);
                if let Some(ga) = self.acc(grads, src) {
                    for ((o, &x), &v) in ga.iter_mut().zip(g).zip(av) {
                        if v >= l && v <= h {
                            *o = *o + x;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let dims: Vec<(usize, usize)> =
                    parts.iter().map(|&p| dims2(self.shape(p))).collect();
                if *axis == 0 {
                    let mut off = 0;
                    for (&p, d) in parts.iter().zip(&dims) {
                        let n = d.0 * d.1;
                        if let Some(gp) = self.acc(grads, p) {
                            gp.iter_mut()
                                .zip(&g[off..off + n])
                                .for_each(|(o, &x)| *o = *o + x);
                        }
                        off += n;
                    }
                } else {
                    let r = dims[0].0;
                    let total: usize = dims.iter().map(|d| d.1).sum();
                    let mut col = 0;
                    for (&p, d) in parts.iter().zip(&dims) {
                        if let Some(gp) = self.acc(grads, p) {
                            for i in 0..r {
                                let src = &g[i * total + col..i * total + col + d.1];
                                gp[i * d.1..(i + 1) * d.1]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(o, &x)| *o = *o + x);
                            }
                        }
                        col += d.1;
                    }
                }
            }
            &Op::Slice { src, axis, start } => {
                let (r, c) = dims2(self.shape(src));
                let (_, len) = dims2(&node.shape);
                if let Some(ga) = self.acc(grads, src) {
                    if axis == 0 {
                        ga[start * c..start * c + g.len()]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(o, &x)| *o = *o + x);
                    } else {
                        for i in 0..r {
                            ga[i * c + start..i * c + start + len]
                                .iter_mut()
                                .zip(&g[i * len..(i + 1) * len])
                                .for_each(|(o, &x)| *o = *o + x);
                        }
                    }
                }
            }
            &Op::Mean { src, axis } => {
                let shape = self.shape(src);
                let rank = shape.len();
                let (r, c) = dims2(shape);
                if let Some(ga) = self.acc(grads, src) {
                    match (rank, axis) {
                        (1, _) => {
                            let s = g[0] / T::of(c as f64);
                            ga.iter_mut().for_each(|o| *o = *o + s);
                        }
                        (_, 0) => {
                            let n = T::of(r as f64);
                            for i in 0..r {
                                for j in 0..c {
                                    ga[i * c + j] = ga[i * c + j] + g[j] / n;
                                }
                            }
                        }
                        _ => {
                            let n = T::of(c as f64);
                            for i in 0..r {
                                for j in 0..c {
                                    ga[i * c + j] = ga[i * c + j] + g[i] / n;
                                }
                            }
                        }
                    }
                }
            }
            &Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|o| *o = *o + g[0]);
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
                }
            }
            &Op::MaskedSoftmax(a) => {
                let (r, c) = dims2(&node.shape);
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Gather { table, ids, skip } => {
                let d = dims2(self.shape(*table)).1;
                if let Some(gt) = self.acc(grads, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        if Some(id) == *skip {
                            continue;
                        }
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[row * d..(row + 1) * d])
                            .for_each(|(o, &x)| *o = *o + x);
                    }
                }
            }
            Op::MaskRows { src, keep } => {
                let c = dims2(&node.shape).1;
                if let Some(ga) = self.acc(grads, *src) {
                    for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
                        ga[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(o, &x)| *o = *o + x);
                    }
                }
            }
            &Op::WeightedSumRows { w, rows } => {
                let (n, d) = dims2(self.shape(rows));
                let (wv, rv) = (self.value(w), self.value(rows));
                if let Some(gw) = self.acc(grads, w) {
                    for j in 0..n {
                        let mut s = T::zero();
                        for c in 0..d {
                            s = s + g[c] * rv[j * d + c];
                        }
                        gw[j] = gw[j] + s;
                    }
                }
                if let Some(gr) = self.acc(grads, rows) {
                    for j in 0..n {
                        for c in 0..d {
                            gr[j * d + c] = gr[j * d + c] + wv[j] * g[c];
                        }
                    }
                }
            }
            &Op::BceWithLogits { logit, label } => {
                let z = self.scalar(logit);
                if let Some(gz) = self.acc(grads, logit) {
                    gz[0] = gz[0] + g[0] * (sigmoid(z) - T::of(label));
                }
            }
        }
    }
}
