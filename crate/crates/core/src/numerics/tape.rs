//! Reverse-mode differentiation over a flat, append-only operation record.
//!
//! Every operation pushes one node holding its output value plus whatever it
//! needs for the backward pass. Nodes are only ever referenced by [`Var`]
//! handles into the same tape, so the record is topologically ordered by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Gradients are kept only for leaves created with [`Tape::param`]. Calling
//! `backward` twice without [`Tape::zero_grads`] accumulates into those leaf
//! gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::{axis_layout, softmax_row, softmax_strided};
use crate::numerics::{Scalar, Tensor};

/// Additive bias for attention slots that may not be attended to.
pub const ATTENTION_MASK_VALUE: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, S),
    MaskMul {
        x: Var,
        mask: Vec<S>,
    },
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
        count: usize,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, S)>),
    NormalizeRows {
        x: Var,
        norms: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
    op: Op<S>,
}

/// Single-owner computation record.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a parameter leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, inputs: &[Var], op: Op<S>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, requires_grad, op)
    }

    /// `a · b` (or `a · bᵀ` when `trans_b`); `a` may have leading batch axes.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("rhs shape {:?}", bv.shape()),
            ));
        }
        let (k, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if av.cols() != k {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape()),
            ));
        }
        let m = av.rows();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = n;
        let mut out = Tensor::zeros(&shape);
        let b_strides = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        S::gemm(
            m,
            k,
            n,
            S::one(),
            av.data(),
            (k as isize, 1),
            bv.data(),
            b_strides,
            S::zero(),
            out.data_mut(),
            (n as isize, 1),
        );
        Ok(self.push(out, &[a, b], Op::MatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.numel() != c {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        Ok(self.push(out, &[x, bias], Op::AddBias { x, bias }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * c);
        self.push(out, &[x], Op::Scale(x, c))
    }

    /// Multiplies by a constant, same-size mask.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<S>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(Error::shape(
                "mask_mul",
                format!("mask of {} for {:?}", mask.len(), xv.shape()),
            ));
        }
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, &[x], Op::MaskMul { x, mask }))
    }

    /// Zeroes every row whose flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.rows() {
            return Err(Error::shape(
                "mask_rows",
                format!("{} flags for {:?}", keep.len(), xv.shape()),
            ));
        }
        let c = xv.cols();
        let mask = keep
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { S::one() } else { S::zero() }, c))
            .collect();
        self.mask_mul(x, mask)
    }

    /// Inverted dropout. Identity (no node) outside training or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64_lossy(1.0 / (1.0 - rate));
        let mask = (0..self.value(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.mask_mul(x, mask)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.max(S::zero()));
        self.push(out, &[x], Op::Relu(x))
    }

    /// Row-wise layer normalization with affine `gain`/`bias` of size `cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "affine {:?}/{:?} for {:?}",
                    gv.shape(),
                    bv.shape(),
                    xv.shape()
                ),
            ));
        }
        let eps = S::from_f64_lossy(eps);
        let n = S::from_usize(c).expect("width fits");
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(gv.data()[j] * h + bv.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = axis_layout(xv.shape(), axis)?;
        let mut out = xv.clone();
        softmax_strided(out.data_mut(), outer, len, inner);
        Ok(self.push(
            out,
            &[x],
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Selects rows of `src` (flattened over leading axes) into a `[idx.len(), cols]` tensor.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (rows, c) = (sv.rows(), sv.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index(format!("row {i} of a {rows}-row tensor")));
            }
            data.extend_from_slice(sv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(
            out,
            &[src],
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` hold `batch * seq_len` rows of width `d`; row `b * seq_len + t`
    /// is position `t` of sequence `b`. Query `i` attends to keys `j <= i` only;
    /// among those, keys with `key_valid[b * seq_len + j]` false receive an
    /// additive [`ATTENTION_MASK_VALUE`] before the softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        key_valid: &[bool],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let rows = qv.rows();
        if seq_len == 0 || rows % seq_len != 0 || key_valid.len() != rows {
            return Err(Error::shape(
                "attention",
                format!(
                    "{rows} rows, seq_len {seq_len}, {} mask flags",
                    key_valid.len()
                ),
            ));
        }
        let batch = rows / seq_len;
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).expect("width fits").sqrt();
        let masked = S::from_f64_lossy(ATTENTION_MASK_VALUE);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let t = seq_len;
        let mut probs = vec![S::zero(); batch * heads * t * t];
        let mut out = vec![S::zero(); rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qd[(b * t + i) * d + off..][..dh];
                    let p = &mut probs[((b * heads + h) * t + i) * t..][..t];
                    // Later keys get exactly zero weight, so even a query with
                    // every visible key padded never sees the future.
                    let visible = &mut p[..=i];
                    for (j, pj) in visible.iter_mut().enumerate() {
                        let kj = &kd[(b * t + j) * d + off..][..dh];
                        let mut s = dot(qi, kj) * scale;
                        if !key_valid[b * t + j] {
                            s = s + masked;
                        }
                        *pj = s;
                    }
                    softmax_row(visible);
                    let oi = &mut out[(b * t + i) * d + off..][..dh];
                    for (j, &pj) in visible.iter().enumerate() {
                        let vj = &vd[(b * t + j) * d + off..][..dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o = *o + pj * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(qv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
        ))
    }

    /// Mean negative log-softmax probability of the target column, over rows
    /// whose target is `Some`. Fused log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        if targets.len() != lv.rows() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {:?}", targets.len(), lv.shape()),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (row, target) in probs.chunks_mut(c).zip(targets) {
            let Some(t) = *target else { continue };
            if t >= c {
                return Err(Error::Index(format!("target {t} with {c} classes")));
            }
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total += (lse - row[t]).as_f64();
            count += 1;
            softmax_row(row);
        }
        if count == 0 {
            return Err(Error::Contract("cross_entropy with no targets".into()));
        }
        let loss = Tensor::scalar(S::from_f64_lossy(total / count as f64));
        Ok(self.push(
            loss,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// `Σ coeff_i · term_i` over one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Result<Var> {
        let mut total = S::zero();
        for &(v, c) in terms {
            total = total + self.value(v).item()? * c;
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Tensor::scalar(total),
            &inputs,
            Op::WeightedSum(terms.to_vec()),
        ))
    }

    /// Scales each row to unit L2 norm (with a 1e-12 guard).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let guard = S::from_f64_lossy(1e-12);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = (row.iter().map(|&v| v * v).sum::<S>() + guard).sqrt();
            norms.push(n);
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        self.push(out, &[x], Op::NormalizeRows { x, norms })
    }

    /// Back-propagates from a one-element `loss`, adding into the gradients of
    /// every parameter leaf it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        lv.check_finite("loss")?;
        let mut scratch: Vec<Option<Vec<S>>> = Vec::new();
        scratch.resize_with(loss.0 + 1, || None);
        scratch[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &x)| *a = *a + x),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut scratch);
        }
        Ok(())
    }

    fn slot<'a>(&self, scratch: &'a mut [Option<Vec<S>>], v: Var) -> Option<&'a mut Vec<S>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(scratch[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[S], scratch: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if let Some(ga) = self.slot(scratch, *a) {
                    // dA = dC · Bᵀ
                    let bt = if *trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        g,
                        (n as isize, 1),
                        bv.data(),
                        bt,
                        S::one(),
                        ga,
                        (k as isize, 1),
                    );
                }
                if let Some(gb) = self.slot(scratch, *b) {
                    if *trans_b {
                        // dB[n,k] = dCᵀ · A
                        S::gemm(
                            n,
                            m,
                            k,
                            S::one(),
                            g,
                            (1, n as isize),
                            av.data(),
                            (k as isize, 1),
                            S::one(),
                            gb,
                            (k as isize, 1),
                        );
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        S::gemm(
                            k,
                            m,
                            n,
                            S::one(),
                            av.data(),
                            (1, k as isize),
                            g,
                            (n as isize, 1),
                            S::one(),
                            gb,
                            (n as isize, 1),
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(scratch, v) {
                        add_into(s, g);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(s) = self.slot(scratch, *x) {
                    add_into(s, g);
                }
                let c = node.value.cols();
                if let Some(s) = self.slot(scratch, *bias) {
                    for row in g.chunks(c) {
                        add_into(s, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(scratch, *a) {
                    for ((o, &gi), &y) in s.iter_mut().zip(g).zip(bv) {
                        *o = *o + gi * y;
                    }
                }
                if let Some(s) = self.slot(scratch, *b) {
                    for ((o, &gi), &x) in s.iter_mut().zip(g).zip(av) {
                        *o = *o + gi * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = self.slot(scratch, *x) {
                    for (o, &gi) in s.iter_mut().zip(g) {
                        *o = *o + gi * *c;
                    }
                }
            }
            Op::MaskMul { x, mask } => {
                if let Some(s) = self.slot(scratch, *x) {
                    for ((o, &gi), &m) in s.iter_mut().zip(g).zip(mask) {
                        *o = *o + gi * m;
                    }
                }
            }
            Op::Relu(x) => {
                let out = node.value.data();
                if let Some(s) = self.slot(scratch, *x) {
                    for ((o, &gi), &y) in s.iter_mut().zip(g).zip(out) {
                        if y > S::zero() {
                            *o = *o + gi;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gv = self.value(*gain).data();
                let n = S::from_usize(c).expect("width fits");
                if let Some(s) = self.slot(scratch, *x) {
                    let mut dxhat = vec![S::zero(); c];
                    for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<S>() / n;
                        let mean_dh = dxhat.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<S>() / n;
                        let out = &mut s[r * c..(r + 1) * c];
                        for j in 0..c {
                            out[j] = out[j] + inv_std[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
                if let Some(s) = self.slot(scratch, *gain) {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            s[j] = s[j] + grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(s) = self.slot(scratch, *bias) {
                    for grow in g.chunks(c) {
                        add_into(s, grow);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                if let Some(s) = self.slot(scratch, *x) {
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let base = o * len * inner + ii;
                            let dot = (0..*len)
                                .map(|j| y[base + j * inner] * g[base + j * inner])
                                .sum::<S>();
                            for j in 0..*len {
                                let at = base + j * inner;
                                s[at] = s[at] + y[at] * (g[at] - dot);
                            }
                        }
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let c = node.value.cols();
                if let Some(s) = self.slot(scratch, *src) {
                    for (r, &row) in idx.iter().enumerate() {
                        add_into(&mut s[row * c..(row + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, *seq_len, probs, scratch),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = self.value(*logits).cols();
                let coef = g[0] / S::from_usize(*count).expect("count fits");
                if let Some(s) = self.slot(scratch, *logits) {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let out = &mut s[r * c..(r + 1) * c];
                        for (j, o) in out.iter_mut().enumerate() {
                            let onehot = if j == t { S::one() } else { S::zero() };
                            *o = *o + coef * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(scratch, *x) {
                    s.iter_mut().for_each(|o| *o = *o + g[0]);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if let Some(s) = self.slot(scratch, v) {
                        s[0] = s[0] + g[0] * c;
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(s) = self.slot(scratch, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let d = dot(yr, gr);
                        for j in 0..c {
                            s[r * c + j] = s[r * c + j] + (gr[j] - yr[j] * d) / n;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[S],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        t: usize,
        probs: &[S],
        scratch: &mut [Option<Vec<S>>],
    ) {
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let d = self.value(q).cols();
        let rows = self.value(q).rows();
        let batch = rows / t;
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).expect("width fits").sqrt();

        // dS[b, h, i, j]: gradient w.r.t. the pre-softmax scores.
        let mut dscores = vec![S::zero(); probs.len()];
        let mut dv = vec![S::zero(); rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let at = ((b * heads + h) * t + i) * t;
                    let p = &probs[at..at + t];
                    let gi = &g[(b * t + i) * d + off..][..dh];
                    let ds = &mut dscores[at..at + t];
                    for j in 0..t {
                        let vj = &vd[(b * t + j) * d + off..][..dh];
                        ds[j] = dot(gi, vj);
                        let dvj = &mut dv[(b * t + j) * d + off..][..dh];
                        for (o, &x) in dvj.iter_mut().zip(gi) {
                            *o = *o + p[j] * x;
                        }
                    }
                    let inner = dot(p, ds);
                    for j in 0..t {
                        ds[j] = p[j] * (ds[j] - inner);
                    }
                }
            }
        }
        if let Some(s) = self.slot(scratch, v) {
            add_into(s, &dv);
        }
        if let Some(s) = self.slot(scratch, q) {
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..t {
                        let ds = &dscores[((b * heads + h) * t + i) * t..][..t];
                        let out = &mut s[(b * t + i) * d + off..][..dh];
                        for (j, &w) in ds.iter().enumerate() {
                            let kj = &kd[(b * t + j) * d + off..][..dh];
                            for (o, &x) in out.iter_mut().zip(kj) {
                                *o = *o + scale * w * x;
                            }
                        }
                    }
                }
            }
        }
        if let Some(s) = self.slot(scratch, k) {
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..t {
                        let ds = &dscores[((b * heads + h) * t + i) * t..][..t];
                        let qi = &qd[(b * t + i) * d + off..][..dh];
                        for (j, &w) in ds.iter().enumerate() {
                            let out = &mut s[(b * t + j) * d + off..][..dh];
                            for (o, &x) in out.iter_mut().zip(qi) {
                                *o = *o + scale * w * x;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

fn add_into<S: Scalar>(acc: &mut [S], g: &[S]) {
    for (a, &x) in acc.iter_mut().zip(g) {
        *a = *a + x;
    }
}
