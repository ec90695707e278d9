//! Wengert-list reverse-mode differentiation.
//!
//! Each operation on a [`Var`] appends a node holding its value and whatever
//! the backward rule needs. [`Tape::backward`] walks the list once in reverse.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use super::kernels::{
    gelu_grad_scalar, gelu_scalar, layer_norm_parts, log_sigmoid_scalar, matmul_into,
    sigmoid_scalar, softmax_in_place,
};
use super::{Float, ParamId, ParamStore, PrecisionMode, Tensor};
use crate::error::{JetError, Result};

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: usize,
        b: usize,
        mode: PrecisionMode,
    },
    Add {
        x: usize,
        y: usize,
    },
    AddBroadcast {
        x: usize,
        y: usize,
    },
    Mul {
        x: usize,
        y: usize,
    },
    Scale {
        x: usize,
        c: F,
    },
    AddConst {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    LogSigmoid {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    Square {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Attention {
        qkv: usize,
        heads: usize,
        probs: Vec<F>,
    },
    SliceLast {
        x: usize,
        start: usize,
    },
    RightConst {
        x: usize,
        matrix: Arc<Tensor<F>>,
    },
    LeftConst {
        x: usize,
        matrix: Arc<Tensor<F>>,
    },
    SumAll {
        x: usize,
    },
    SumPerBatch {
        x: usize,
    },
    Reshape {
        x: usize,
    },
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
}

/// Recording of one forward computation.
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
    first_non_finite: RefCell<Option<&'static str>>,
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F> {
    tape: &'t Tape<F>,
    id: usize,
}

/// Gradients of every node with respect to the loss passed to backward.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient with respect to `var`, or `None` if the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            first_non_finite: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, name: &'static str) -> Var<'_, F> {
        if !value.all_finite() {
            self.first_non_finite.borrow_mut().get_or_insert(name);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A constant input. Its gradient is still reported by backward.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Snapshot a parameter onto the tape. Backward accumulates into its grad.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<'_, F> {
        self.push(store.value(id).clone(), Op::Param(id), "param")
    }

    /// Fails if any recorded value so far was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match *self.first_non_finite.borrow() {
            Some(op) => Err(JetError::numeric(
                None,
                format!("non-finite value produced by {op}"),
            )),
            None => Ok(()),
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// `store` (not overwritten); all node gradients are returned.
    pub fn backward(&self, loss: Var<'_, F>, store: &mut ParamStore<F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(JetError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), F::one()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| -> &Tensor<F> { &nodes[i].value };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Param(pid) => {
                    store.accumulate_grad(*pid, &g)?;
                    grads[id] = Some(g);
                    continue;
                }
                &Op::MatMul { a, b, mode } => {
                    let (av, bv) = (val(a), val(b));
                    let (k, n) = (bv.shape()[0], bv.shape()[1]);
                    let m = av.numel() / k.max(1);
                    let bt = bv.transpose()?;
                    let mut ga = vec![F::zero(); m * k];
                    matmul_into(g.data(), bt.data(), &mut ga, m, n, k, mode);
                    let mut gb = vec![F::zero(); k * n];
                    let (ad, gd) = (av.data(), g.data());
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (acc, &gv) in row.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                                *acc += aip * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, a, Tensor::new(av.shape(), ga)?);
                    accumulate(&mut grads, b, Tensor::new(bv.shape(), gb)?);
                }
                &Op::Add { x, y } => {
                    accumulate(&mut grads, x, g.clone());
                    accumulate(&mut grads, y, g);
                }
                &Op::AddBroadcast { x, y } => {
                    let yshape = val(y).shape().to_vec();
                    let inner = val(y).numel();
                    let mut gy = vec![F::zero(); inner];
                    for chunk in g.data().chunks(inner) {
                        for (acc, &v) in gy.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, y, Tensor::new(&yshape, gy)?);
                    accumulate(&mut grads, x, g);
                }
                &Op::Mul { x, y } => {
                    let gx = g.zip_map(val(y), |a, b| a * b)?;
                    let gy = g.zip_map(val(x), |a, b| a * b)?;
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, y, gy);
                }
                &Op::Scale { x, c } => accumulate(&mut grads, x, g.map(|v| v * c)),
                &Op::AddConst { x } => accumulate(&mut grads, x, g),
                &Op::Sigmoid { x } => {
                    let gx = g.zip_map(&node.value, |gv, s| gv * s * (F::one() - s))?;
                    accumulate(&mut grads, x, gx);
                }
                &Op::LogSigmoid { x } => {
                    // d/dx log σ(x) = 1 - σ(x) = σ(-x)
                    let gx = g.zip_map(val(x), |gv, xv| gv * sigmoid_scalar(-xv))?;
                    accumulate(&mut grads, x, gx);
                }
                &Op::Gelu { x } => {
                    let gx = g.zip_map(val(x), |gv, xv| gv * gelu_grad_scalar(xv))?;
                    accumulate(&mut grads, x, gx);
                }
                &Op::Square { x } => {
                    let two = F::of(2.0);
                    let gx = g.zip_map(val(x), |gv, xv| gv * two * xv)?;
                    accumulate(&mut grads, x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let w = val(gain).numel();
                    let wf = F::from_usize(w).unwrap();
                    let gd = val(gain).data();
                    let mut gx = vec![F::zero(); g.numel()];
                    let mut ggain = vec![F::zero(); w];
                    let mut gbias = vec![F::zero(); w];
                    for (r, (grow, hrow)) in g.data().chunks(w).zip(xhat.chunks(w)).enumerate() {
                        let mut mean_d = F::zero();
                        let mut mean_dh = F::zero();
                        for j in 0..w {
                            let d = grow[j] * gd[j];
                            mean_d += d;
                            mean_dh += d * hrow[j];
                            ggain[j] += grow[j] * hrow[j];
                            gbias[j] += grow[j];
                        }
                        mean_d /= wf;
                        mean_dh /= wf;
                        for j in 0..w {
                            let d = grow[j] * gd[j];
                            gx[r * w + j] = rstd[r] * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                    accumulate(&mut grads, x, Tensor::new(g.shape(), gx)?);
                    accumulate(&mut grads, gain, Tensor::new(&[w], ggain)?);
                    accumulate(&mut grads, bias, Tensor::new(&[w], gbias)?);
                }
                Op::Attention { qkv, heads, probs } => {
                    let gq = attention_backward(val(*qkv), *heads, probs, &g)?;
                    accumulate(&mut grads, *qkv, gq);
                }
                &Op::SliceLast { x, start } => {
                    let xv = val(x);
                    let (wx, wy) = (xv.last_dim(), g.last_dim());
                    let mut gx = vec![F::zero(); xv.numel()];
                    for (dst, src) in gx.chunks_mut(wx).zip(g.data().chunks(wy)) {
                        dst[start..start + wy].copy_from_slice(src);
                    }
                    accumulate(&mut grads, x, Tensor::new(xv.shape(), gx)?);
                }
                Op::RightConst { x, matrix } => {
                    let (k, n) = (matrix.shape()[0], matrix.shape()[1]);
                    let mt = matrix.transpose()?;
                    let m = g.numel() / n.max(1);
                    let mut gx = vec![F::zero(); m * k];
                    matmul_into(g.data(), mt.data(), &mut gx, m, n, k, PrecisionMode::Full);
                    accumulate(&mut grads, *x, Tensor::new(val(*x).shape(), gx)?);
                }
                Op::LeftConst { x, matrix } => {
                    let xv = val(*x);
                    let (r, k) = (matrix.shape()[0], matrix.shape()[1]);
                    let w = xv.last_dim();
                    let batches = xv.numel() / (k * w).max(1);
                    let mt = matrix.transpose()?;
                    let mut gx = vec![F::zero(); xv.numel()];
                    for b in 0..batches {
                        matmul_into(
                            mt.data(),
                            &g.data()[b * r * w..(b + 1) * r * w],
                            &mut gx[b * k * w..(b + 1) * k * w],
                            k,
                            r,
                            w,
                            PrecisionMode::Full,
                        );
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape(), gx)?);
                }
                &Op::SumAll { x } => {
                    let gv = g.item();
                    accumulate(&mut grads, x, Tensor::full(val(x).shape(), gv));
                }
                &Op::SumPerBatch { x } => {
                    let xv = val(x);
                    let inner = xv.numel() / xv.shape()[0].max(1);
                    let gx = g
                        .data()
                        .iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv, inner))
                        .collect();
                    accumulate(&mut grads, x, Tensor::new(xv.shape(), gx)?);
                }
                &Op::Reshape { x } => {
                    let shape = val(x).shape().to_vec();
                    accumulate(&mut grads, x, g.reshape(&shape)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<F: Float>(grads: &mut [Option<Tensor<F>>], id: usize, g: Tensor<F>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<'t, F: Float> Var<'t, F> {
    pub fn value(&self) -> Rc<Tensor<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t, F>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars recorded on different tapes"
        );
    }

    /// `self · rhs` with `rhs` rank 2; leading axes of `self` act as rows.
    pub fn matmul(self, rhs: Var<'t, F>, mode: PrecisionMode) -> Result<Self> {
        self.same_tape(&rhs);
        let out = super::matmul(&self.value(), &rhs.value(), mode)?;
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                mode,
            },
            "matmul",
        ))
    }

    pub fn add(self, rhs: Var<'t, F>) -> Result<Self> {
        self.same_tape(&rhs);
        let out = self.value().zip_map(&rhs.value(), |a, b| a + b)?;
        Ok(self.tape.push(
            out,
            Op::Add {
                x: self.id,
                y: rhs.id,
            },
            "add",
        ))
    }

    /// Add `rhs` whose shape is a suffix of `self`'s, repeated over the
    /// leading axes (biases, position embeddings).
    pub fn add_broadcast(self, rhs: Var<'t, F>) -> Result<Self> {
        self.same_tape(&rhs);
        let (x, y) = (self.value(), rhs.value());
        let ys = y.shape();
        if ys.len() > x.rank() || x.shape()[x.rank() - ys.len()..] != *ys {
            return Err(JetError::shape(
                "add_broadcast",
                format!("{:?} + {:?}", x.shape(), ys),
            ));
        }
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(y.numel().max(1)) {
            for (d, &v) in chunk.iter_mut().zip(y.data()) {
                *d += v;
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.tape.push(
            out,
            Op::AddBroadcast {
                x: self.id,
                y: rhs.id,
            },
            "add_broadcast",
        ))
    }

    pub fn mul(self, rhs: Var<'t, F>) -> Result<Self> {
        self.same_tape(&rhs);
        let out = self.value().zip_map(&rhs.value(), |a, b| a * b)?;
        Ok(self.tape.push(
            out,
            Op::Mul {
                x: self.id,
                y: rhs.id,
            },
            "mul",
        ))
    }

    pub fn scale(self, c: F) -> Self {
        let out = self.value().map(|v| v * c);
        self.tape.push(out, Op::Scale { x: self.id, c }, "scale")
    }

    pub fn add_const(self, c: F) -> Self {
        let out = self.value().map(|v| v + c);
        self.tape
            .push(out, Op::AddConst { x: self.id }, "add_const")
    }

    pub fn sigmoid(self) -> Self {
        let out = self.value().map(sigmoid_scalar);
        self.tape.push(out, Op::Sigmoid { x: self.id }, "sigmoid")
    }

    pub fn log_sigmoid(self) -> Self {
        let out = self.value().map(log_sigmoid_scalar);
        self.tape
            .push(out, Op::LogSigmoid { x: self.id }, "log_sigmoid")
    }

    pub fn gelu(self) -> Self {
        let out = self.value().map(gelu_scalar);
        self.tape.push(out, Op::Gelu { x: self.id }, "gelu")
    }

    pub fn square(self) -> Self {
        let out = self.value().map(|v| v * v);
        self.tape.push(out, Op::Square { x: self.id }, "square")
    }

    pub fn layer_norm(self, gain: Var<'t, F>, bias: Var<'t, F>, eps: F) -> Result<Self> {
        let parts = layer_norm_parts(&self.value(), &gain.value(), &bias.value(), eps)?;
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat: parts.xhat,
            rstd: parts.rstd,
        };
        Ok(self.tape.push(parts.y, op, "layer_norm"))
    }

    /// Multi-head scaled dot-product self-attention over packed `[B, T, 3W]`
    /// query/key/value projections. Returns `[B, T, W]`.
    pub fn attention(self, heads: usize) -> Result<Self> {
        let (out, probs) = attention_forward(&self.value(), heads)?;
        Ok(self.tape.push(
            out,
            Op::Attention {
                qkv: self.id,
                heads,
                probs,
            },
            "attention",
        ))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Self> {
        let x = self.value();
        let w = x.last_dim();
        if start + len > w {
            return Err(JetError::shape(
                "slice_last",
                format!("{start}..{} of width {w}", start + len),
            ));
        }
        let data: Vec<F> = x
            .data()
            .chunks(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(&shape, data)?;
        Ok(self
            .tape
            .push(out, Op::SliceLast { x: self.id, start }, "slice_last"))
    }

    /// `self · matrix` for a frozen `[K, N]` matrix, accumulated in full precision.
    pub fn matmul_const(self, matrix: Arc<Tensor<F>>) -> Result<Self> {
        let out = super::matmul(&self.value(), &matrix, PrecisionMode::Full)?;
        Ok(self
            .tape
            .push(out, Op::RightConst { x: self.id, matrix }, "matmul_const"))
    }

    /// `matrix · x_b` for every leading slice `x_b` of shape `[K, W]`, with a
    /// frozen `[R, K]` matrix, accumulated in full precision.
    pub fn left_matmul_const(self, matrix: Arc<Tensor<F>>) -> Result<Self> {
        let x = self.value();
        let out = left_matmul(&matrix, &x)?;
        Ok(self.tape.push(
            out,
            Op::LeftConst { x: self.id, matrix },
            "left_matmul_const",
        ))
    }

    pub fn sum(self) -> Self {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::SumAll { x: self.id }, "sum")
    }

    /// Sum everything but the leading axis: `[B, ...] -> [B]`.
    pub fn sum_per_batch(self) -> Result<Self> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(JetError::shape("sum_per_batch", "scalar input"));
        }
        let b = x.shape()[0];
        let inner = x.numel() / b.max(1);
        let data = x
            .data()
            .chunks(inner.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let out = Tensor::new(&[b], data)?;
        Ok(self
            .tape
            .push(out, Op::SumPerBatch { x: self.id }, "sum_per_batch"))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape { x: self.id }, "reshape"))
    }
}

/// `matrix · x_b` for every `[K, W]` slice `x_b` of `x`, in full precision.
pub fn left_matmul<F: Float>(matrix: &Tensor<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    if matrix.rank() != 2 || x.rank() < 2 {
        return Err(JetError::shape(
            "left_matmul",
            format!("{:?} . {:?}", matrix.shape(), x.shape()),
        ));
    }
    let (r, k) = (matrix.shape()[0], matrix.shape()[1]);
    let w = x.last_dim();
    if x.shape()[x.rank() - 2] != k {
        return Err(JetError::shape(
            "left_matmul",
            format!("{:?} . {:?}", matrix.shape(), x.shape()),
        ));
    }
    let batches = x.numel() / (k * w).max(1);
    let mut out = vec![F::zero(); batches * r * w];
    for b in 0..batches {
        matmul_into(
            matrix.data(),
            &x.data()[b * k * w..(b + 1) * k * w],
            &mut out[b * r * w..(b + 1) * r * w],
            r,
            k,
            w,
            PrecisionMode::Full,
        );
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = r;
    Tensor::new(&shape, out)
}

struct AttnDims {
    batches: usize,
    tokens: usize,
    width: usize,
    head_dim: usize,
}

fn attn_dims<F: Float>(qkv: &Tensor<F>, heads: usize) -> Result<AttnDims> {
    if qkv.rank() != 3 || !qkv.last_dim().is_multiple_of(3) {
        return Err(JetError::shape(
            "attention",
            format!("expected [B, T, 3W], got {:?}", qkv.shape()),
        ));
    }
    let width = qkv.last_dim() / 3;
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(JetError::config(format!(
            "width {width} not divisible by {heads} heads"
        )));
    }
    Ok(AttnDims {
        batches: qkv.shape()[0],
        tokens: qkv.shape()[1],
        width,
        head_dim: width / heads,
    })
}

// Copy one head's q, k and v out of the packed projection.
fn head_slices<F: Float>(qkv: &[F], d: &AttnDims, b: usize, h: usize) -> [Vec<F>; 3] {
    let row = 3 * d.width;
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (part, buf) in out.iter_mut().enumerate() {
        buf.reserve(d.tokens * d.head_dim);
        for t in 0..d.tokens {
            let base = (b * d.tokens + t) * row + part * d.width + h * d.head_dim;
            buf.extend_from_slice(&qkv[base..base + d.head_dim]);
        }
    }
    out
}

fn attention_forward<F: Float>(qkv: &Tensor<F>, heads: usize) -> Result<(Tensor<F>, Vec<F>)> {
    let d = attn_dims(qkv, heads)?;
    let (t, dh) = (d.tokens, d.head_dim);
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut out = vec![F::zero(); d.batches * t * d.width];
    let mut probs = vec![F::zero(); d.batches * heads * t * t];
    for b in 0..d.batches {
        for h in 0..heads {
            let [q, k, v] = head_slices(qkv.data(), &d, b, h);
            let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                for j in 0..t {
                    let mut s = F::zero();
                    for c in 0..dh {
                        s += q[i * dh + c] * k[j * dh + c];
                    }
                    row[j] = s * scale;
                }
                softmax_in_place(row);
                let o =
                    &mut out[(b * t + i) * d.width + h * dh..(b * t + i) * d.width + (h + 1) * dh];
                for j in 0..t {
                    let pij = row[j];
                    for c in 0..dh {
                        o[c] += pij * v[j * dh + c];
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[d.batches, t, d.width], out)?, probs))
}

fn attention_backward<F: Float>(
    qkv: &Tensor<F>,
    heads: usize,
    probs: &[F],
    g: &Tensor<F>,
) -> Result<Tensor<F>> {
    let d = attn_dims(qkv, heads)?;
    let (t, dh, w) = (d.tokens, d.head_dim, d.width);
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut gqkv = vec![F::zero(); qkv.numel()];
    let gd = g.data();
    let mut dp = vec![F::zero(); t * t];
    for b in 0..d.batches {
        for h in 0..heads {
            let [q, k, v] = head_slices(qkv.data(), &d, b, h);
            let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
            let go = |i: usize, c: usize| gd[(b * t + i) * w + h * dh + c];
            let gidx =
                |i: usize, part: usize, c: usize| (b * t + i) * 3 * w + part * w + h * dh + c;
            // dV = Pᵀ dO and dP = dO Vᵀ
            for i in 0..t {
                for j in 0..t {
                    let pij = p[i * t + j];
                    let mut acc = F::zero();
                    for c in 0..dh {
                        let g_ic = go(i, c);
                        gqkv[gidx(j, 2, c)] += pij * g_ic;
                        acc += g_ic * v[j * dh + c];
                    }
                    dp[i * t + j] = acc;
                }
            }
            // dS = P ⊙ (dP - rowsum(dP ⊙ P)), then dQ = dS K, dK = dSᵀ Q, both scaled.
            for i in 0..t {
                let dot: F = (0..t).map(|j| dp[i * t + j] * p[i * t + j]).sum();
                for j in 0..t {
                    let ds = p[i * t + j] * (dp[i * t + j] - dot) * scale;
                    for c in 0..dh {
                        gqkv[gidx(i, 0, c)] += ds * k[j * dh + c];
                        gqkv[gidx(j, 1, c)] += ds * q[i * dh + c];
                    }
                }
            }
        }
    }
    Tensor::new(qkv.shape(), gqkv)
}

/// Attention probabilities for inspection: `[B, heads, T, T]`.
pub fn attention_probabilities<F: Float>(qkv: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
    let d = attn_dims(qkv, heads)?;
    let (_, probs) = attention_forward(qkv, heads)?;
    Tensor::new(&[d.batches, heads, d.tokens, d.tokens], probs)
}
