//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation evaluates
//! eagerly, stores its output and whatever it needs for the backward pass,
//! and returns a [`Var`] handle. Node indices are assigned in execution
//! order, so walking the arena backwards visits nodes in reverse
//! topological order.
//!
//! Row-wise operations accept either a matrix `[rows, cols]` or a vector
//! `[cols]`; a vector behaves as a single row and the output keeps its rank.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Clamp applied to probabilities inside [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    ScaleBy(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Var, Var),
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Scatter {
        base: Var,
        idx: Vec<usize>,
        rows: Var,
    },
    SegmentMean {
        x: Var,
        seg: Vec<usize>,
        counts: Vec<usize>,
    },
    Softmax(Var),
    Attend {
        keys: Var,
        queries: Var,
        dummy: Var,
        sets: Vec<Vec<usize>>,
        weights: Vec<Vec<F>>,
    },
    Tucker3 {
        core: Var,
        a: Var,
        b: Var,
        c: Var,
    },
    TuckerProject {
        core: Var,
        a: Var,
        b: Var,
    },
    RowDot(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    Bce {
        probs: Var,
        labels: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Append-only record of executed operations.
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    bound: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softmax_in_place<F: Scalar>(v: &mut [F]) {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in v.iter_mut() {
        *x = *x / total;
    }
}

/// Shape of a row-wise output with `cols` columns, keeping vector rank.
fn row_shape(like: &[usize], cols: usize) -> Vec<usize> {
    if like.len() <= 1 {
        vec![cols]
    } else {
        vec![like[0], cols]
    }
}

/// Shape of a one-value-per-row output.
fn per_row_shape(like: &[usize]) -> Vec<usize> {
    if like.len() <= 1 {
        Vec::new()
    } else {
        vec![like[0]]
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf whose gradient can be read back with [`Tape::grad`].
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that is not meant to be differentiated.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a registered parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.bound.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplication by a single-element node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", "scale must hold one value"));
        }
        let c = self.value(s).item();
        let out = self.value(a).map(|x| x * c);
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    /// `x · wᵀ + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs.is_empty() || xs.len() > 2 || xs[xs.len() - 1] != ws[1] {
            return Err(Error::shape("linear", format!("x {xs:?} with w {ws:?}")));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(Error::shape("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let shape = row_shape(xs, n_out);
        let (xv, wv) = (self.value(x), self.value(w));
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * n_out);
        for r in 0..rows {
            let xr = &xv.data()[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let mut acc = dot(xr, &wv.data()[o * n_in..(o + 1) * n_in]);
                if let Some(b) = b {
                    acc = acc + self.value(b).data()[o];
                }
                out.push(acc);
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// `a · bᵀ`, e.g. scores of every row of `a` against every candidate row of `b`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(F::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(F::zero()));
        self.push(out, Op::Relu(a))
    }

    /// Row-wise concatenation along the trailing axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty()
            || sa.len() != sb.len()
            || sa.len() > 2
            || (sa.len() == 2 && sa[0] != sb[0])
        {
            return Err(Error::shape("concat", format!("{sa:?} vs {sb:?}")));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (va, vb) = (self.value(a), self.value(b));
        let rows = va.rows();
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        let out = Tensor::new(&row_shape(&sa, ca + cb), out)?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Selects rows of a matrix: `[n, d] -> [idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("gather_rows", format!("table {s:?}")));
        }
        let d = s[1];
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(&[idx.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Copy of `base` with row `idx[k]` replaced by row `k` of `rows`.
    pub fn scatter_rows(&mut self, base: Var, idx: &[usize], rows: Var) -> Result<Var> {
        let (sb, sr) = (self.shape(base).to_vec(), self.shape(rows).to_vec());
        let mut seen = vec![false; sb.first().copied().unwrap_or(0)];
        let valid = sb.len() == 2
            && sr.len() == 2
            && sb[1] == sr[1]
            && sr[0] == idx.len()
            && idx
                .iter()
                .all(|&i| i < sb[0] && !std::mem::replace(&mut seen[i], true));
        if !valid {
            return Err(Error::shape(
                "scatter_rows",
                format!(
                    "base {sb:?}, rows {sr:?}, {} distinct indices required",
                    idx.len()
                ),
            ));
        }
        let mut out = self.value(base).clone();
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.value(rows).row(k));
        }
        Ok(self.push(
            out,
            Op::Scatter {
                base,
                idx: idx.to_vec(),
                rows,
            },
        ))
    }

    /// Mean of the rows of `x` grouped by `seg`; empty segments yield zeros.
    pub fn segment_mean(&mut self, x: Var, seg: &[usize], n_seg: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != seg.len() || seg.iter().any(|&g| g >= n_seg) {
            return Err(Error::shape("segment_mean", format!("x {s:?}")));
        }
        let d = s[1];
        let mut counts = vec![0usize; n_seg];
        let mut out = Tensor::zeros(&[n_seg, d]);
        for (r, &g) in seg.iter().enumerate() {
            counts[g] += 1;
            let src = self.value(x).row(r).to_vec();
            for (o, v) in out.row_mut(g).iter_mut().zip(src) {
                *o = *o + v;
            }
        }
        for (g, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = F::one() / F::of(c as f64);
                out.row_mut(g).iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                seg: seg.to_vec(),
                counts,
            },
        ))
    }

    /// Softmax over a vector, or over each row of a matrix (max-shifted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() || s.len() > 2 {
            return Err(Error::shape("softmax", format!("{s:?}")));
        }
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Attention pooling over sets of key rows.
    ///
    /// For row `b`, with members `m ∈ sets[b]`, the weights are
    /// `softmax_m(keys[m] · queries[b])` and the output is `Σ_m w_m keys[m]`.
    /// Rows with an empty set take the value of `dummy`.
    pub fn attend(
        &mut self,
        keys: Var,
        queries: Var,
        dummy: Var,
        sets: &[Vec<usize>],
    ) -> Result<Var> {
        let (sk, sq, sd) = (self.shape(keys), self.shape(queries), self.shape(dummy));
        let d = sq.last().copied().unwrap_or(0);
        let rows = if sq.len() == 1 {
            1
        } else {
            sq.first().copied().unwrap_or(0)
        };
        let ok = sk.len() == 2
            && sk[1] == d
            && (sq.len() == 1 || sq.len() == 2)
            && sd == [d]
            && sets.len() == rows
            && sets.iter().flatten().all(|&m| m < sk[0]);
        if !ok {
            return Err(Error::shape(
                "attend",
                format!(
                    "keys {sk:?}, queries {sq:?}, dummy {sd:?}, {} sets",
                    sets.len()
                ),
            ));
        }
        let out_shape = sq.to_vec();
        let (kv, qv, dv) = (self.value(keys), self.value(queries), self.value(dummy));
        let mut out = Vec::with_capacity(rows * d);
        let mut weights = Vec::with_capacity(rows);
        for (b, set) in sets.iter().enumerate() {
            if set.is_empty() {
                out.extend_from_slice(dv.data());
                weights.push(Vec::new());
                continue;
            }
            let q = qv.row(b);
            let mut w: Vec<F> = set.iter().map(|&m| dot(kv.row(m), q)).collect();
            softmax_in_place(&mut w);
            let mut acc = vec![F::zero(); d];
            for (&m, &wm) in set.iter().zip(&w) {
                for (a, &k) in acc.iter_mut().zip(kv.row(m)) {
                    *a = *a + wm * k;
                }
            }
            out.extend(acc);
            weights.push(w);
        }
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            out,
            Op::Attend {
                keys,
                queries,
                dummy,
                sets: sets.to_vec(),
                weights,
            },
        ))
    }

    fn check_tucker(&self, op: &'static str, core: Var, vs: &[Var]) -> Result<usize> {
        let sc = self.shape(core);
        let d = sc.first().copied().unwrap_or(0);
        let first = self.shape(vs[0]);
        let ok = sc.len() == 3
            && sc.iter().all(|&x| x == d)
            && (first.len() == 1 || first.len() == 2)
            && first.last() == Some(&d)
            && vs.iter().all(|&v| self.shape(v) == first);
        if !ok {
            return Err(Error::shape(op, format!("core {sc:?}, operand {first:?}")));
        }
        Ok(d)
    }

    /// Three-mode product `Σ_{i,j,k} W[i,j,k]·a[i]·b[j]·c[k]`, one value per row.
    pub fn tucker3(&mut self, core: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let d = self.check_tucker("tucker3", core, &[a, b, c])?;
        let shape = per_row_shape(self.shape(a));
        let (w, av, bv, cv) = (
            self.value(core).data(),
            self.value(a),
            self.value(b),
            self.value(c),
        );
        let mut out = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let (ar, br, cr) = (av.row(r), bv.row(r), cv.row(r));
            let mut acc = F::zero();
            for i in 0..d {
                for j in 0..d {
                    let base = (i * d + j) * d;
                    for k in 0..d {
                        acc = acc + w[base + k] * ar[i] * br[j] * cr[k];
                    }
                }
            }
            out.push(acc);
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Tucker3 { core, a, b, c }))
    }

    /// Contracts the first two modes: `v[k] = Σ_{i,j} W[i,j,k]·a[i]·b[j]`.
    ///
    /// Scoring `v` against many third-mode operands with [`Tape::matmul_t`]
    /// equals [`Tape::tucker3`] for each of them.
    pub fn tucker_project(&mut self, core: Var, a: Var, b: Var) -> Result<Var> {
        let d = self.check_tucker("tucker_project", core, &[a, b])?;
        let shape = self.shape(a).to_vec();
        let (w, av, bv) = (self.value(core).data(), self.value(a), self.value(b));
        let mut out = Vec::with_capacity(av.len());
        for r in 0..av.rows() {
            let (ar, br) = (av.row(r), bv.row(r));
            let mut acc = vec![F::zero(); d];
            for i in 0..d {
                for j in 0..d {
                    let coef = ar[i] * br[j];
                    let base = (i * d + j) * d;
                    for (k, o) in acc.iter_mut().enumerate() {
                        *o = *o + coef * w[base + k];
                    }
                }
            }
            out.extend(acc);
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::TuckerProject { core, a, b }))
    }

    /// Row-wise inner product.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let s = self.shape(a);
        if s.is_empty() || s.len() > 2 {
            return Err(Error::shape("row_dot", format!("{s:?}")));
        }
        let shape = per_row_shape(s);
        let (va, vb) = (self.value(a), self.value(b));
        let out = (0..va.rows()).map(|r| dot(va.row(r), vb.row(r))).collect();
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    /// Same values under a new shape of equal size.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = Tensor::new(shape, self.value(a).data().to_vec())
            .map_err(|_| Error::shape("reshape", format!("{:?} to {shape:?}", self.shape(a))))?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: F = v.data().iter().copied().sum();
        let m = s / F::of(v.len().max(1) as f64);
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let s: F = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let m = s / F::of(va.len().max(1) as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b)))
    }

    /// Mean softmax cross-entropy of each logit row against its target index.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let v = self.value(logits);
        if s.is_empty() || s.len() > 2 || v.rows() != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} targets", targets.len()),
            ));
        }
        if targets.iter().any(|&t| t >= v.cols()) {
            return Err(Error::shape("cross_entropy", "target index out of range"));
        }
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = v.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            total = total + (lse - row[t]);
        }
        let out = total / F::of(targets.len().max(1) as f64);
        Ok(self.push(
            Tensor::scalar(out),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    /// Probabilities are clamped into `[ε, 1-ε]` with `ε = BCE_EPS`.
    pub fn bce(&mut self, probs: Var, labels: &[F]) -> Result<Var> {
        let v = self.value(probs);
        if v.len() != labels.len() {
            return Err(Error::shape(
                "bce",
                format!("{} probabilities, {} labels", v.len(), labels.len()),
            ));
        }
        let eps = F::of(BCE_EPS);
        let total: F = v
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.max(eps).min(F::one() - eps);
                -(y * p.ln() + (F::one() - y) * (F::one() - p).ln())
            })
            .sum();
        let out = total / F::of(labels.len().max(1) as f64);
        Ok(self.push(
            Tensor::scalar(out),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Propagates `∂loss/∂node` to every node that `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<F>) {
        for (&id, &v) in &self.bound {
            if let Some(g) = self.grad(v) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }

    /// [`Tape::backward`] followed by [`Tape::accumulate_param_grads`].
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        self.backward(loss)?;
        self.accumulate_param_grads(store);
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor<F>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let like = |v: Var, data: Vec<F>| Tensor::new(val(v).shape(), data).expect("shape");
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(
                    *a,
                    like(*a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect()),
                );
                acc(
                    *b,
                    like(*b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect()),
                );
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * *c)),
            Op::ScaleBy(a, s) => {
                let c = val(*s).item();
                let ds: F = gd.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).sum();
                acc(*a, g.map(|x| x * c));
                acc(*s, like(*s, vec![ds]));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n_out, n_in) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                let mut dx = vec![F::zero(); xv.len()];
                let mut dw = vec![F::zero(); wv.len()];
                let mut db = vec![F::zero(); n_out];
                for r in 0..rows {
                    let xr = &xv.data()[r * n_in..(r + 1) * n_in];
                    let dxr = &mut dx[r * n_in..(r + 1) * n_in];
                    for o in 0..n_out {
                        let go = gd[r * n_out + o];
                        if go == F::zero() {
                            continue;
                        }
                        db[o] = db[o] + go;
                        let wr = &wv.data()[o * n_in..(o + 1) * n_in];
                        let dwr = &mut dw[o * n_in..(o + 1) * n_in];
                        for k in 0..n_in {
                            dxr[k] = dxr[k] + go * wr[k];
                            dwr[k] = dwr[k] + go * xr[k];
                        }
                    }
                }
                acc(*x, like(*x, dx));
                acc(*w, like(*w, dw));
                if let Some(b) = b {
                    acc(*b, like(*b, db));
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(
                    *a,
                    like(
                        *a,
                        gd.iter()
                            .zip(y)
                            .map(|(&g, &y)| g * y * (F::one() - y))
                            .collect(),
                    ),
                );
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(
                    *a,
                    like(
                        *a,
                        gd.iter()
                            .zip(y)
                            .map(|(&g, &y)| g * (F::one() - y * y))
                            .collect(),
                    ),
                );
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(
                    *a,
                    like(
                        *a,
                        gd.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                            .collect(),
                    ),
                );
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (val(*a).cols(), val(*b).cols());
                let mut da = Vec::with_capacity(val(*a).len());
                let mut db = Vec::with_capacity(val(*b).len());
                for r in 0..g.rows() {
                    let row = g.row(r);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..ca + cb]);
                }
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::Gather { table, idx } => {
                let mut dt = Tensor::zeros(val(*table).shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (t, &x) in dt.row_mut(i).iter_mut().zip(g.row(k)) {
                        *t = *t + x;
                    }
                }
                acc(*table, dt);
            }
            Op::Scatter { base, idx, rows } => {
                let mut db = g.clone();
                let mut dr = Tensor::zeros(val(*rows).shape());
                for (k, &i) in idx.iter().enumerate() {
                    dr.row_mut(k).copy_from_slice(g.row(i));
                    db.row_mut(i).fill(F::zero());
                }
                acc(*base, db);
                acc(*rows, dr);
            }
            Op::SegmentMean { x, seg, counts } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                for (r, &s) in seg.iter().enumerate() {
                    let inv = F::one() / F::of(counts[s] as f64);
                    for (t, &x) in dx.row_mut(r).iter_mut().zip(g.row(s)) {
                        *t = x * inv;
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - s);
                    }
                }
                acc(*a, dx);
            }
            Op::Attend {
                keys,
                queries,
                dummy,
                sets,
                weights,
            } => {
                let (kv, qv) = (val(*keys), val(*queries));
                let mut dk = Tensor::zeros(kv.shape());
                let mut dq = Tensor::zeros(qv.shape());
                let mut dd = Tensor::zeros(val(*dummy).shape());
                for (b, (set, w)) in sets.iter().zip(weights).enumerate() {
                    let gb = g.row(b);
                    if set.is_empty() {
                        dd.add_assign(&Tensor::vector(gb.to_vec()));
                        continue;
                    }
                    // ∂/∂w_m = keys[m]·g ; softmax Jacobian gives ∂/∂logit_m
                    let dw: Vec<F> = set.iter().map(|&m| dot(kv.row(m), gb)).collect();
                    let mean = dot(w, &dw);
                    let q = qv.row(b).to_vec();
                    for ((&m, &wm), &dwm) in set.iter().zip(w).zip(&dw) {
                        let dl = wm * (dwm - mean);
                        let krow = kv.row(m).to_vec();
                        for (t, (&gv, &qv)) in dk.row_mut(m).iter_mut().zip(gb.iter().zip(&q)) {
                            *t = *t + wm * gv + dl * qv;
                        }
                        for (t, &kx) in dq.row_mut(b).iter_mut().zip(&krow) {
                            *t = *t + dl * kx;
                        }
                    }
                }
                acc(*keys, dk);
                acc(*queries, dq);
                acc(*dummy, dd);
            }
            Op::Tucker3 { core, a, b, c } => {
                let d = val(*a).cols();
                let w = val(*core).data();
                let (av, bv, cv) = (val(*a), val(*b), val(*c));
                let mut dw = vec![F::zero(); w.len()];
                let (mut da, mut db, mut dc) = (
                    Tensor::zeros(av.shape()),
                    Tensor::zeros(bv.shape()),
                    Tensor::zeros(cv.shape()),
                );
                for r in 0..av.rows() {
                    let gr = gd[r];
                    let (ar, br, cr) = (av.row(r), bv.row(r), cv.row(r));
                    let mut dar = vec![F::zero(); d];
                    let mut dbr = vec![F::zero(); d];
                    let mut dcr = vec![F::zero(); d];
                    for i in 0..d {
                        for j in 0..d {
                            let base = (i * d + j) * d;
                            let wij = &w[base..base + d];
                            let wc = dot(wij, cr);
                            dar[i] = dar[i] + br[j] * wc;
                            dbr[j] = dbr[j] + ar[i] * wc;
                            let coef = ar[i] * br[j];
                            let gcoef = gr * coef;
                            for k in 0..d {
                                dcr[k] = dcr[k] + coef * wij[k];
                                dw[base + k] = dw[base + k] + gcoef * cr[k];
                            }
                        }
                    }
                    for (t, x) in da.row_mut(r).iter_mut().zip(dar) {
                        *t = gr * x;
                    }
                    for (t, x) in db.row_mut(r).iter_mut().zip(dbr) {
                        *t = gr * x;
                    }
                    for (t, x) in dc.row_mut(r).iter_mut().zip(dcr) {
                        *t = gr * x;
                    }
                }
                acc(*core, like(*core, dw));
                acc(*a, da);
                acc(*b, db);
                acc(*c, dc);
            }
            Op::TuckerProject { core, a, b } => {
                let d = val(*a).cols();
                let w = val(*core).data();
                let (av, bv) = (val(*a), val(*b));
                let mut dw = vec![F::zero(); w.len()];
                let (mut da, mut db) = (Tensor::zeros(av.shape()), Tensor::zeros(bv.shape()));
                for r in 0..av.rows() {
                    let (ar, br, gr) = (av.row(r), bv.row(r), g.row(r));
                    let mut dar = vec![F::zero(); d];
                    let mut dbr = vec![F::zero(); d];
                    for i in 0..d {
                        for j in 0..d {
                            let base = (i * d + j) * d;
                            let wij = &w[base..base + d];
                            let wg = dot(wij, gr);
                            dar[i] = dar[i] + br[j] * wg;
                            dbr[j] = dbr[j] + ar[i] * wg;
                            let coef = ar[i] * br[j];
                            for (t, &gk) in dw[base..base + d].iter_mut().zip(gr) {
                                *t = *t + coef * gk;
                            }
                        }
                    }
                    da.row_mut(r).copy_from_slice(&dar);
                    db.row_mut(r).copy_from_slice(&dbr);
                }
                acc(*core, like(*core, dw));
                acc(*a, da);
                acc(*b, db);
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut da = Tensor::zeros(va.shape());
                let mut db = Tensor::zeros(vb.shape());
                for r in 0..va.rows() {
                    let gr = gd[r];
                    for (t, &y) in da.row_mut(r).iter_mut().zip(vb.row(r)) {
                        *t = gr * y;
                    }
                    for (t, &x) in db.row_mut(r).iter_mut().zip(va.row(r)) {
                        *t = gr * x;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Reshape(a) => acc(*a, like(*a, gd.to_vec())),
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), gd[0])),
            Op::Mean(a) => {
                let n = F::of(val(*a).len().max(1) as f64);
                acc(*a, Tensor::full(val(*a).shape(), gd[0] / n));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let k = F::of(2.0) * gd[0] / F::of(va.len().max(1) as f64);
                let da: Vec<F> = va.iter().zip(vb).map(|(&x, &y)| k * (x - y)).collect();
                let db: Vec<F> = da.iter().map(|&x| -x).collect();
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::CrossEntropy { logits, targets } => {
                let v = val(*logits);
                let scale = gd[0] / F::of(targets.len().max(1) as f64);
                let mut dl = v.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = dl.row_mut(r);
                    softmax_in_place(row);
                    row[t] = row[t] - F::one();
                    row.iter_mut().for_each(|x| *x = *x * scale);
                }
                acc(*logits, dl);
            }
            Op::Bce { probs, labels } => {
                let eps = F::of(BCE_EPS);
                let scale = gd[0] / F::of(labels.len().max(1) as f64);
                let dp = val(*probs)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p <= eps || p >= F::one() - eps {
                            F::zero()
                        } else {
                            scale * (p - y) / (p * (F::one() - p))
                        }
                    })
                    .collect();
                acc(*probs, like(*probs, dp));
            }
        }
    }
}
