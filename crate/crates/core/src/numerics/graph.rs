//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding
//! its output value. [`Graph::backward`] walks the record in reverse and
//! returns [`Gradients`] for every parameter that requires one. Parameter
//! values are borrowed from a [`ParamStore`] and never copied into the tape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::{all_finite, lit, Scalar, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gamma: Var,
        inv_rms: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    MeanPool {
        x: Var,
        factor: usize,
    },
    RelPosBias {
        table: Var,
        buckets: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    // Empty for parameter nodes; their values live in the store.
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar = f32> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T = f32> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    /// Gradient with respect to an intermediate value, if it was reached.
    pub fn node(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in &self.params {
            store.get_mut(*id).accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / cols, cols)
}

// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

// Eight independent accumulators so the reduction vectorises.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, ar) = (a.chunks_exact(8), a.chunks_exact(8).remainder());
    let br = b.chunks_exact(8).remainder();
    for (x, y) in ac.zip(b.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

// out[m×k] += a[m×n] · b[k×n]ᵀ
fn gemm_nt_acc<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot = dot(arow, brow);
            out[i * k + p] = out[i * k + p] + dot;
        }
    }
}

// out[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b),
        None => *dst = Some(src.to_vec()),
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
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

    pub fn data(&self, v: Var) -> &[T] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &self.nodes[v.0].data,
        }
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.data(v).to_vec()).expect("graph values are well-formed")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.data(v)[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !all_finite(&data) {
            return Err(Error::Numeric(format!("output of {}", op_name(&op))));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let t = self.params.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: Vec::new(),
            op: Op::Param(id),
            needs_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(m, k, n, self.data(a), self.data(b), &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x.max(T::zero())).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (_, c) = rows_cols(&shape);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.needs(a);
        self.push(shape, out, Op::Softmax(a), ng)
    }

    /// `y = gamma * x / sqrt(mean(x^2) + eps)` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::Parameter(format!("rms_norm eps must be positive, got {eps:?}")));
        }
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&shape);
        if self.shape(gamma) != [d] {
            return Err(shape_err("rms_norm", &shape, self.shape(gamma)));
        }
        let dt: T = lit(d as f64);
        let (xs, gs) = (self.data(x), self.data(gamma));
        let mut out = Vec::with_capacity(xs.len());
        let mut inv_rms = Vec::with_capacity(rows);
        for row in xs.chunks(d) {
            let ms: T = row.iter().map(|&v| v * v).sum::<T>() / dt;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(gs).map(|(&v, &g)| g * v * r));
        }
        let ng = self.needs(x) || self.needs(gamma);
        self.push(shape, out, Op::RmsNorm { x, gamma, inv_rms }, ng)
    }

    /// Gathers rows of a `[rows × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err("embedding", &ts, &[ids.len()]));
        }
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup of an empty id sequence".into()));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let data = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary { id, vocab });
            }
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", &s, &[2]));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push(vec![n, m], out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(a).len() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let out = self.data(a).to_vec();
        let ng = self.needs(a);
        self.push(shape.to_vec(), out, Op::Reshape(a), ng)
    }

    /// Stacks 2-D inputs with equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let d = self.shape(first)[self.shape(first).len() - 1];
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(shape_err("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(vec![rows, d], out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Averages consecutive groups of `factor` rows; a trailing partial group
    /// averages the rows it has.
    pub fn mean_pool_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Parameter("pooling factor must be positive".into()));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("mean_pool_rows", &s, &[factor]));
        }
        let (t, d) = (s[0], s[1]);
        let out_rows = t.div_ceil(factor);
        let src = self.data(x);
        let mut out = vec![T::zero(); out_rows * d];
        for (o, group) in src.chunks(factor * d).enumerate() {
            let n: T = lit((group.len() / d) as f64);
            for row in group.chunks(d) {
                for (acc, &v) in out[o * d..(o + 1) * d].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            out[o * d..(o + 1) * d].iter_mut().for_each(|v| *v = *v / n);
        }
        let ng = self.needs(x);
        self.push(vec![out_rows, d], out, Op::MeanPool { x, factor }, ng)
    }

    /// Expands a `[n_buckets × heads]` table into a `[heads × tq × tk]` bias
    /// using precomputed bucket ids laid out row-major over `tq × tk`.
    pub fn relpos_bias(&mut self, table: Var, buckets: &[usize], tq: usize, tk: usize) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || buckets.len() != tq * tk {
            return Err(shape_err("relpos_bias", &ts, &[tq, tk]));
        }
        let (nb, heads) = (ts[0], ts[1]);
        let data = self.data(table);
        let mut out = vec![T::zero(); heads * tq * tk];
        for (pos, &b) in buckets.iter().enumerate() {
            if b >= nb {
                return Err(Error::Vocabulary { id: b, vocab: nb });
            }
            for h in 0..heads {
                out[h * tq * tk + pos] = data[b * heads + h];
            }
        }
        let ng = self.needs(table);
        self.push(
            vec![heads, tq, tk],
            out,
            Op::RelPosBias {
                table,
                buckets: buckets.to_vec(),
            },
            ng,
        )
    }

    /// Scaled dot-product attention over `heads` column blocks.
    ///
    /// `q` is `[tq × d]`, `k` and `v` are `[tk × d]`, `mask` is row-major
    /// `[tq × tk]` with `true` meaning the key is visible. `bias`, when
    /// given, is `[heads × tq × tk]` and is added to the scores.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mask: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(shape_err("attention", &sq, &sk));
        }
        let (tq, d, tk) = (sq[0], sq[1], sk[0]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Parameter(format!("{heads} heads do not divide width {d}")));
        }
        if mask.len() != tq * tk {
            return Err(shape_err("attention mask", &[tq, tk], &[mask.len()]));
        }
        if let Some(b) = bias {
            if self.shape(b) != [heads, tq, tk] {
                return Err(shape_err("attention bias", self.shape(b), &[heads, tq, tk]));
            }
        }
        if let Some(row) = (0..tq).find(|&i| !mask[i * tk..(i + 1) * tk].iter().any(|&m| m)) {
            return Err(Error::AttentionDegeneracy { row });
        }
        let dh = d / heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let bd = bias.map(|b| self.data(b));
        let mut probs = vec![T::zero(); heads * tq * tk];
        let mut out = vec![T::zero(); tq * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let qi = &qd[i * d + off..i * d + off + dh];
                let prow = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                for j in 0..tk {
                    if mask[i * tk + j] {
                        let kj = &kd[j * d + off..j * d + off + dh];
                        let mut s: T = dot(qi, kj) * scale;
                        if let Some(bd) = bd {
                            s = s + bd[(h * tq + i) * tk + j];
                        }
                        prow[j] = s;
                    } else {
                        prow[j] = T::neg_infinity();
                    }
                }
                softmax_in_place(prow);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..tk {
                    let p = prow[j];
                    if p == T::zero() {
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o = *o + p * x;
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v) || bias.is_some_and(|b| self.needs(b));
        self.push(
            vec![tq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Mean next-token cross-entropy over positions whose mask is on.
    ///
    /// Row `t` of `logits` is scored against `targets[t]`. Masked rows
    /// contribute nothing to the value or the gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(shape_err("cross_entropy", &s, &[targets.len(), mask.len()]));
        }
        let vocab = s[1];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        for (t, (&target, &on)) in targets.iter().zip(mask).enumerate() {
            if !on {
                continue;
            }
            if target >= vocab {
                return Err(Error::Vocabulary { id: target, vocab });
            }
            let row = &ld[t * vocab..(t + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total = total + (lse - row[target]);
            for (p, &x) in probs[t * vocab..(t + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / lit::<T>(count as f64);
        let ng = self.needs(logits);
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.data(a).iter().copied().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.data(loss).len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if node.needs_grad {
                    let g = grads[idx]
                        .clone()
                        .unwrap_or_else(|| vec![T::zero(); self.params.get(id).len()]);
                    if !all_finite(&g) {
                        return Err(Error::Numeric(format!(
                            "gradient of {}",
                            self.params.name(id)
                        )));
                    }
                    params.push((id, g));
                }
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm_nt_acc(m, n, k, g, self.data(*b), ga);
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm_tn_acc(m, k, n, self.data(*a), g, gb);
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.needs(p) {
                        add_into(&mut grads[p.0], g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d: Vec<T> = g.iter().zip(self.data(*b)).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.needs(*b) {
                    let d: Vec<T> = g.iter().zip(self.data(*a)).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<T> = g.iter().map(|&x| x * *c).collect();
                add_into(&mut grads[a.0], &d);
            }
            Op::Relu(a) => {
                let d: Vec<T> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                    .collect();
                add_into(&mut grads[a.0], &d);
            }
            Op::Softmax(a) => {
                let (_, c) = rows_cols(&node.shape);
                let mut d = vec![T::zero(); g.len()];
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(node.data.chunks(c)) {
                    let dot = dot(grow, yrow);
                    for ((o, &gy), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *o = y * (gy - dot);
                    }
                }
                add_into(&mut grads[a.0], &d);
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let (_, dim) = rows_cols(&node.shape);
                let dt: T = lit(dim as f64);
                let (xs, gs) = (self.data(*x), self.data(*gamma));
                if self.needs(*gamma) {
                    let mut dg = vec![T::zero(); dim];
                    for ((xrow, grow), &r) in xs.chunks(dim).zip(g.chunks(dim)).zip(inv_rms) {
                        for ((acc, &xv), &gy) in dg.iter_mut().zip(xrow).zip(grow) {
                            *acc = *acc + gy * xv * r;
                        }
                    }
                    add_into(&mut grads[gamma.0], &dg);
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xs.len()];
                    for (((dxrow, xrow), grow), &r) in
                        dx.chunks_mut(dim).zip(xs.chunks(dim)).zip(g.chunks(dim)).zip(inv_rms)
                    {
                        let dot: T = grow
                            .iter()
                            .zip(gs)
                            .zip(xrow)
                            .map(|((&gy, &gm), &xv)| gy * gm * xv)
                            .sum();
                        let coef = r * r * r * dot / dt;
                        for (((o, &gy), &gm), &xv) in dxrow.iter_mut().zip(grow).zip(gs).zip(xrow) {
                            *o = r * gm * gy - xv * coef;
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                let gt = slot(grads, *table, self.data(*table).len());
                for (row, &id) in ids.iter().enumerate() {
                    for (o, &x) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]) {
                        *o = *o + x;
                    }
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (node.shape[0], node.shape[1]);
                let mut d = vec![T::zero(); g.len()];
                for j in 0..n {
                    for i in 0..m {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                add_into(&mut grads[a.0], &d);
            }
            Op::Reshape(a) => add_into(&mut grads[a.0], g),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    if self.needs(p) {
                        add_into(&mut grads[p.0], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::MeanPool { x, factor } => {
                let s = self.shape(*x);
                let (t, d) = (s[0], s[1]);
                let gx = slot(grads, *x, t * d);
                for r in 0..t {
                    let o = r / factor;
                    let group = (*factor).min(t - o * factor);
                    let n: T = lit(group as f64);
                    for c in 0..d {
                        gx[r * d + c] = gx[r * d + c] + g[o * d + c] / n;
                    }
                }
            }
            Op::RelPosBias { table, buckets } => {
                let heads = node.shape[0];
                let plane = buckets.len();
                let gt = slot(grads, *table, self.data(*table).len());
                for (pos, &b) in buckets.iter().enumerate() {
                    for h in 0..heads {
                        gt[b * heads + h] = gt[b * heads + h] + g[h * plane + pos];
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *bias, *heads, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = self.shape(*logits)[1];
                let scale = g[0] / lit::<T>(*count as f64);
                let gl = slot(grads, *logits, probs.len());
                for (t, (&target, &on)) in targets.iter().zip(mask).enumerate() {
                    if !on {
                        continue;
                    }
                    let row = &mut gl[t * vocab..(t + 1) * vocab];
                    for (o, &p) in row.iter_mut().zip(&probs[t * vocab..(t + 1) * vocab]) {
                        *o = *o + scale * p;
                    }
                    row[target] = row[target] - scale;
                }
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.data(*a).len()];
                add_into(&mut grads[a.0], &d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (tq, d) = (self.shape(q)[0], self.shape(q)[1]);
        let tk = self.shape(k)[0];
        let dh = d / heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![T::zero(); tq * d];
        let mut dk = vec![T::zero(); tk * d];
        let mut dv = vec![T::zero(); tk * d];
        let mut dscores = vec![T::zero(); heads * tq * tk];
        let mut dp = vec![T::zero(); tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let prow = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let gi = &g[i * d + off..i * d + off + dh];
                for j in 0..tk {
                    let p = prow[j];
                    if p == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    dp[j] = dot(gi, vj);
                    for (o, &x) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                        *o = *o + p * x;
                    }
                }
                let dot = dot(prow, &dp);
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..tk {
                    let p = prow[j];
                    if p == T::zero() {
                        continue;
                    }
                    let ds = p * (dp[j] - dot);
                    dscores[(h * tq + i) * tk + j] = ds;
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let c = ds * scale;
                    for (o, &x) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                        *o = *o + c * x;
                    }
                    for (o, &x) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                        *o = *o + c * x;
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                add_into(&mut grads[var.0], &d);
            }
        }
        if let Some(b) = bias {
            if self.needs(b) {
                add_into(&mut grads[b.0], &dscores);
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = if x.is_finite() { (*x - max).exp() } else { T::zero() };
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Softmax(_) => "softmax",
        Op::RmsNorm { .. } => "rms_norm",
        Op::Embedding { .. } => "embedding",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::ConcatRows(_) => "concat_rows",
        Op::MeanPool { .. } => "mean_pool_rows",
        Op::RelPosBias { .. } => "relpos_bias",
        Op::Attention { .. } => "attention",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(_) => "sum",
    }
}
