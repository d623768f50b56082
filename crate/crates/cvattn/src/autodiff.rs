//! Reverse-mode automatic differentiation over complex tensors.
//!
//! Gradients follow the real-composite convention: every node's gradient is
//! stored as a `CTensor` whose `re`/`im` parts hold dLoss/d(re) and
//! dLoss/d(im) of that node. Losses are real scalars, so non-holomorphic maps
//! (abs, sgn, real/imaginary projection) fit the same bookkeeping as the
//! holomorphic ones.
//!
//! Ops are an explicit enum rather than closures: the backward sweep visits
//! nodes in strictly decreasing index order and accumulates parameter
//! gradients in binding order, which keeps training bit-reproducible.

use std::collections::HashMap;
use std::sync::Arc;

use crate::ctensor::{cmatmul, conv1d, conv1d_backward, softmax_rows, CTensor, ConvGeom};
use crate::error::{CvError, Result};
use crate::norm::{self, LnCache};
use crate::scalar::Scalar;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    /// Multiply by a real constant.
    ScaleReal(NodeId, T),
    /// Add a constant tensor (positional encodings, additive masks).
    AddConst(NodeId, Arc<CTensor<T>>),
    /// x (n x m) + bias (1 x m) broadcast over rows.
    AddRowBroadcast(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Hermitian(NodeId),
    RealPart(NodeId),
    ImagPart(NodeId),
    /// Complexify(a, b) = a + i*b for real-valued a, b.
    Complexify(NodeId, NodeId),
    Abs(NodeId),
    Sgn(NodeId),
    SoftmaxRows(NodeId),
    CRelu(NodeId),
    Dropout {
        x: NodeId,
        keep: Arc<Vec<bool>>,
        scale: T,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    MeanRows(NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
    },
    ComplexLn {
        x: NodeId,
        alpha: NodeId,
        gamma: NodeId,
        delta: NodeId,
        beta: NodeId,
        eps: T,
        cache: Arc<LnCache<T>>,
    },
    RealLn {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        cache: Arc<LnCache<T>>,
    },
    BceWithLogits {
        x: NodeId,
        targets: Arc<CTensor<T>>,
    },
    /// Scalar probe sum_i (wre_i * re_i + wim_i * im_i); the gradient-check
    /// harness uses it to reduce arbitrary outputs to a real scalar.
    WeightedSumReal {
        x: NodeId,
        wre: Arc<Vec<T>>,
        wim: Arc<Vec<T>>,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: CTensor<T>,
    op: Op<T>,
}

/// Define-by-run computation graph. Values are computed eagerly as ops are
/// recorded; `backward` replays the record in reverse.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(NodeId, ParamId)>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &CTensor<T> {
        &self.nodes[id.0].value
    }

    /// Real part of a single-element node (loss values).
    pub fn scalar(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value.re()[0]
    }

    fn push(&mut self, value: CTensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input: gradients flow into it but are not bound anywhere.
    pub fn leaf(&mut self, value: CTensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Parameter input; the node is memoized so each parameter appears once
    /// per tape and its gradient accumulates in a single slot.
    pub fn param(&mut self, store: &ParamStore<T>, pid: ParamId) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&pid.0) {
            return id;
        }
        let id = self.push(store.get(pid).value.clone(), Op::Leaf);
        self.bindings.push((id, pid));
        self.param_nodes.insert(pid.0, id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).neg();
        self.push(v, Op::Neg(a))
    }

    pub fn scale_real(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::ScaleReal(a, s))
    }

    pub fn add_const(&mut self, a: NodeId, c: Arc<CTensor<T>>) -> Result<NodeId> {
        let v = self.value(a).add(&c)?;
        Ok(self.push(v, Op::AddConst(a, c)))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let b = self.value(bias);
        if b.ndim() != 2 || b.rows() != 1 || b.cols() != x.cols() {
            return Err(CvError::ShapeMismatch {
                context: "add_row_broadcast",
                expected: format!("[1, {}]", x.cols()),
                got: format!("{:?}", b.shape()),
            });
        }
        let (n, m) = (x.rows(), x.cols());
        let mut v = x.clone();
        for i in 0..n {
            for j in 0..m {
                v.re_mut()[i * m + j] = v.re()[i * m + j] + b.re()[j];
                v.im_mut()[i * m + j] = v.im()[i * m + j] + b.im()[j];
            }
        }
        Ok(self.push(v, Op::AddRowBroadcast(a, bias)))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul_elem(self.value(b))?;
        Ok(self.push(v, Op::MulElem(a, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = cmatmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn hermitian(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).hermitian();
        self.push(v, Op::Hermitian(a))
    }

    pub fn real_part(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = CTensor::from_re(x.shape(), x.re().to_vec()).expect("same shape");
        self.push(v, Op::RealPart(a))
    }

    pub fn imag_part(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = CTensor::from_re(x.shape(), x.im().to_vec()).expect("same shape");
        self.push(v, Op::ImagPart(a))
    }

    pub fn complexify(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(CvError::ShapeMismatch {
                context: "complexify",
                expected: format!("{:?}", x.shape()),
                got: format!("{:?}", y.shape()),
            });
        }
        debug_assert!(x.max_abs_im() == T::zero() && y.max_abs_im() == T::zero());
        let v = CTensor::new(x.shape(), x.re().to_vec(), y.re().to_vec())?;
        Ok(self.push(v, Op::Complexify(a, b)))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).cabs();
        self.push(v, Op::Abs(a))
    }

    pub fn sgn(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).csgn();
        self.push(v, Op::Sgn(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = softmax_rows(self.value(a))?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    pub fn crelu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let re = x.re().iter().map(|&v| v.max(T::zero())).collect();
        let im = x.im().iter().map(|&v| v.max(T::zero())).collect();
        let v = CTensor::new(x.shape(), re, im).expect("same shape");
        self.push(v, Op::CRelu(a))
    }

    /// Inverted dropout: kept elements are scaled by 1/(1-p), dropped
    /// elements are zeroed in both components.
    pub fn dropout(&mut self, a: NodeId, keep: Arc<Vec<bool>>, keep_prob: T) -> Result<NodeId> {
        let x = self.value(a);
        if keep.len() != x.len() {
            return Err(CvError::ShapeMismatch {
                context: "dropout mask",
                expected: format!("{} elements", x.len()),
                got: format!("{}", keep.len()),
            });
        }
        let scale = T::one() / keep_prob;
        let mut v = x.clone();
        for i in 0..v.len() {
            if keep[i] {
                v.re_mut()[i] = v.re()[i] * scale;
                v.im_mut()[i] = v.im()[i] * scale;
            } else {
                v.re_mut()[i] = T::zero();
                v.im_mut()[i] = T::zero();
            }
        }
        Ok(self.push(v, Op::Dropout { x: a, keep, scale }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CvError::InvalidArgument("concat_cols of zero parts".into()));
        }
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = CTensor::zeros(&[n, total]);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            if x.rows() != n {
                return Err(CvError::ShapeMismatch {
                    context: "concat_cols",
                    expected: format!("{n} rows"),
                    got: format!("{}", x.rows()),
                });
            }
            let m = x.cols();
            for i in 0..n {
                for j in 0..m {
                    v.re_mut()[i * total + off + j] = x.re()[i * m + j];
                    v.im_mut()[i * total + off + j] = x.im()[i * m + j];
                }
            }
            off += m;
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        let (n, m) = (x.rows(), x.cols());
        if start + len > m {
            return Err(CvError::InvalidArgument(format!(
                "slice_cols {start}..{} out of {m} columns",
                start + len
            )));
        }
        let mut v = CTensor::zeros(&[n, len]);
        for i in 0..n {
            for j in 0..len {
                v.re_mut()[i * len + j] = x.re()[i * m + start + j];
                v.im_mut()[i * len + j] = x.im()[i * m + start + j];
            }
        }
        Ok(self.push(v, Op::SliceCols { x: a, start, len }))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (n, m) = (x.rows(), x.cols());
        let inv = T::one() / T::from_f64(n as f64);
        let mut v = CTensor::zeros(&[1, m]);
        for i in 0..n {
            for j in 0..m {
                v.re_mut()[j] = v.re()[j] + x.re()[i * m + j] * inv;
                v.im_mut()[j] = v.im()[j] + x.im()[i * m + j] * inv;
            }
        }
        self.push(v, Op::MeanRows(a))
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, geom: ConvGeom) -> Result<NodeId> {
        let v = conv1d(self.value(x), self.value(w), &geom)?;
        Ok(self.push(v, Op::Conv1d { x, w, geom }))
    }

    pub fn complex_layer_norm(
        &mut self,
        x: NodeId,
        alpha: NodeId,
        gamma: NodeId,
        delta: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<NodeId> {
        let (v, cache) = norm::complex_ln_forward(
            self.value(x),
            self.value(alpha),
            self.value(gamma),
            self.value(delta),
            self.value(beta),
            eps,
        )?;
        Ok(self.push(
            v,
            Op::ComplexLn {
                x,
                alpha,
                gamma,
                delta,
                beta,
                eps,
                cache: Arc::new(cache),
            },
        ))
    }

    pub fn real_layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (v, cache) = norm::real_ln_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            v,
            Op::RealLn {
                x,
                gamma,
                beta,
                eps,
                cache: Arc::new(cache),
            },
        ))
    }

    /// Numerically stable binary cross-entropy with logits, averaged over all
    /// elements: mean(max(x,0) - x*t + ln(1 + exp(-|x|))).
    pub fn bce_with_logits(&mut self, x: NodeId, targets: Arc<CTensor<T>>) -> Result<NodeId> {
        let logits = self.value(x);
        if logits.shape() != targets.shape() {
            return Err(CvError::ShapeMismatch {
                context: "bce_with_logits",
                expected: format!("{:?}", logits.shape()),
                got: format!("{:?}", targets.shape()),
            });
        }
        let n = T::from_f64(logits.len() as f64);
        let mut acc = T::zero();
        for i in 0..logits.len() {
            let x = logits.re()[i];
            let t = targets.re()[i];
            acc = acc + x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
        }
        let v = CTensor::from_re(&[1], vec![acc / n])?;
        Ok(self.push(v, Op::BceWithLogits { x, targets }))
    }

    pub fn weighted_sum_real(&mut self, x: NodeId, wre: Arc<Vec<T>>, wim: Arc<Vec<T>>) -> Result<NodeId> {
        let t = self.value(x);
        if wre.len() != t.len() || wim.len() != t.len() {
            return Err(CvError::ShapeMismatch {
                context: "weighted_sum_real",
                expected: format!("{} weights", t.len()),
                got: format!("{}/{}", wre.len(), wim.len()),
            });
        }
        let mut acc = T::zero();
        for i in 0..t.len() {
            acc = acc + wre[i] * t.re()[i] + wim[i] * t.im()[i];
        }
        let v = CTensor::from_re(&[1], vec![acc])?;
        Ok(self.push(v, Op::WeightedSumReal { x, wre, wim }))
    }

    /// Reverse sweep from a real scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(CvError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<CTensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(CTensor::from_re(lv.shape(), vec![T::one()])?);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { g: grads })
    }

    fn accumulate_inputs(
        &self,
        idx: usize,
        g: &CTensor<T>,
        grads: &mut [Option<CTensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.neg());
            }
            Op::Neg(a) => acc(grads, *a, g.neg()),
            Op::ScaleReal(a, s) => acc(grads, *a, g.scale(*s)),
            Op::AddConst(a, _) => acc(grads, *a, g.clone()),
            Op::AddRowBroadcast(a, bias) => {
                acc(grads, *a, g.clone());
                let (n, m) = (g.rows(), g.cols());
                let mut gb = CTensor::zeros(&[1, m]);
                for i in 0..n {
                    for j in 0..m {
                        gb.re_mut()[j] = gb.re()[j] + g.re()[i * m + j];
                        gb.im_mut()[j] = gb.im()[j] + g.im()[i * m + j];
                    }
                }
                acc(grads, *bias, gb);
            }
            Op::MulElem(a, b) => {
                let ga = g.mul_elem(&self.value(*b).conj())?;
                let gb = g.mul_elem(&self.value(*a).conj())?;
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Matmul(a, b) => {
                let ga = cmatmul(g, &self.value(*b).hermitian())?;
                let gb = cmatmul(&self.value(*a).hermitian(), g)?;
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Hermitian(a) => acc(grads, *a, g.hermitian()),
            Op::RealPart(a) => {
                let da = CTensor::from_re(self.value(*a).shape(), g.re().to_vec())?;
                acc(grads, *a, da);
            }
            Op::ImagPart(a) => {
                let shape = self.value(*a).shape().to_vec();
                let da = CTensor::new(&shape, vec![T::zero(); g.len()], g.re().to_vec())?;
                acc(grads, *a, da);
            }
            Op::Complexify(a, b) => {
                let da = CTensor::from_re(g.shape(), g.re().to_vec())?;
                let db = CTensor::from_re(g.shape(), g.im().to_vec())?;
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                let r = &node.value;
                let mut da = CTensor::zeros(x.shape());
                for i in 0..x.len() {
                    let m = r.re()[i];
                    if m > T::zero() {
                        da.re_mut()[i] = g.re()[i] * x.re()[i] / m;
                        da.im_mut()[i] = g.re()[i] * x.im()[i] / m;
                    }
                }
                acc(grads, *a, da);
            }
            Op::Sgn(a) => {
                let z = self.value(*a);
                let mut da = CTensor::zeros(z.shape());
                for i in 0..z.len() {
                    let (x, y) = z.at(i);
                    let r2 = x * x + y * y;
                    if r2 > T::zero() {
                        let r3 = r2 * r2.sqrt();
                        let (gr, gi) = g.at(i);
                        da.re_mut()[i] = (gr * y * y - gi * x * y) / r3;
                        da.im_mut()[i] = (gi * x * x - gr * x * y) / r3;
                    }
                }
                acc(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (n, m) = (y.rows(), y.cols());
                let mut da = CTensor::zeros(y.shape());
                for i in 0..n {
                    let yr = &y.re()[i * m..(i + 1) * m];
                    let gr = &g.re()[i * m..(i + 1) * m];
                    let mut dot = T::zero();
                    for j in 0..m {
                        dot = dot + yr[j] * gr[j];
                    }
                    for j in 0..m {
                        da.re_mut()[i * m + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, da);
            }
            Op::CRelu(a) => {
                let x = self.value(*a);
                let mut da = CTensor::zeros(x.shape());
                for i in 0..x.len() {
                    if x.re()[i] > T::zero() {
                        da.re_mut()[i] = g.re()[i];
                    }
                    if x.im()[i] > T::zero() {
                        da.im_mut()[i] = g.im()[i];
                    }
                }
                acc(grads, *a, da);
            }
            Op::Dropout { x, keep, scale } => {
                let mut da = CTensor::zeros(g.shape());
                for i in 0..g.len() {
                    if keep[i] {
                        da.re_mut()[i] = g.re()[i] * *scale;
                        da.im_mut()[i] = g.im()[i] * *scale;
                    }
                }
                acc(grads, *x, da);
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let m = self.value(p).cols();
                    let mut dp = CTensor::zeros(&[n, m]);
                    for i in 0..n {
                        for j in 0..m {
                            dp.re_mut()[i * m + j] = g.re()[i * total + off + j];
                            dp.im_mut()[i * m + j] = g.im()[i * total + off + j];
                        }
                    }
                    acc(grads, p, dp);
                    off += m;
                }
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let mut da = CTensor::zeros(&[n, m]);
                for i in 0..n {
                    for j in 0..*len {
                        da.re_mut()[i * m + start + j] = g.re()[i * len + j];
                        da.im_mut()[i * m + start + j] = g.im()[i * len + j];
                    }
                }
                acc(grads, *x, da);
            }
            Op::MeanRows(a) => {
                let xv = self.value(*a);
                let (n, m) = (xv.rows(), xv.cols());
                let inv = T::one() / T::from_f64(n as f64);
                let mut da = CTensor::zeros(&[n, m]);
                for i in 0..n {
                    for j in 0..m {
                        da.re_mut()[i * m + j] = g.re()[j] * inv;
                        da.im_mut()[i * m + j] = g.im()[j] * inv;
                    }
                }
                acc(grads, *a, da);
            }
            Op::Conv1d { x, w, geom } => {
                let (gx, gw) = conv1d_backward(self.value(*x), self.value(*w), geom, g);
                acc(grads, *x, gx);
                acc(grads, *w, gw.reshaped(self.value(*w).shape())?);
            }
            Op::ComplexLn {
                x,
                alpha,
                gamma,
                delta,
                beta,
                eps,
                cache,
            } => {
                let out = norm::complex_ln_backward(
                    self.value(*x),
                    self.value(*alpha),
                    self.value(*gamma),
                    self.value(*delta),
                    *eps,
                    cache,
                    g,
                )?;
                acc(grads, *x, out.gx);
                acc(grads, *alpha, out.galpha);
                acc(grads, *gamma, out.ggamma);
                acc(grads, *delta, out.gdelta);
                acc(grads, *beta, out.gbeta);
            }
            Op::RealLn {
                x,
                gamma,
                beta: beta_id,
                eps,
                cache,
            } => {
                let (gx, ggamma, gbeta) =
                    norm::real_ln_backward(self.value(*x), self.value(*gamma), *eps, cache, g)?;
                acc(grads, *x, gx);
                acc(grads, *gamma, ggamma);
                acc(grads, *beta_id, gbeta);
            }
            Op::BceWithLogits { x, targets } => {
                let logits = self.value(*x);
                let n = T::from_f64(logits.len() as f64);
                let seed = g.re()[0];
                let mut da = CTensor::zeros(logits.shape());
                for i in 0..logits.len() {
                    let xv = logits.re()[i];
                    let sig = T::one() / (T::one() + (-xv).exp());
                    da.re_mut()[i] = seed * (sig - targets.re()[i]) / n;
                }
                acc(grads, *x, da);
            }
            Op::WeightedSumReal { x, wre, wim } => {
                let seed = g.re()[0];
                let shape = self.value(*x).shape().to_vec();
                let re = wre.iter().map(|&w| w * seed).collect();
                let im = wim.iter().map(|&w| w * seed).collect();
                acc(grads, *x, CTensor::new(&shape, re, im)?);
            }
        }
        Ok(())
    }

    /// Add this tape's parameter gradients into the store, in binding order.
    pub fn merge_param_grads(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for &(node, pid) in &self.bindings {
            if let Some(g) = grads.get(node) {
                let p = store.get_mut(pid);
                for i in 0..g.len() {
                    p.grad.re_mut()[i] = p.grad.re()[i] + g.re()[i];
                    if !p.is_real {
                        p.grad.im_mut()[i] = p.grad.im()[i] + g.im()[i];
                    }
                }
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<CTensor<T>>], id: NodeId, delta: CTensor<T>) {
    match &mut grads[id.0] {
        Some(g) => {
            for i in 0..delta.len() {
                g.re_mut()[i] = g.re()[i] + delta.re()[i];
                g.im_mut()[i] = g.im()[i] + delta.im()[i];
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads<T: Scalar> {
    g: Vec<Option<CTensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&CTensor<T>> {
        self.g.get(id.0).and_then(|o| o.as_ref())
    }
}

/// Named trainable tensor. `is_real` parameters ignore their imaginary slots
/// entirely: initialization, gradients and optimizer state touch `re` only.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: CTensor<T>,
    pub grad: CTensor<T>,
    pub is_real: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: CTensor<T>, is_real: bool) -> ParamId {
        let grad = CTensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            is_real,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = CTensor::zeros(p.value.shape());
        }
    }

    /// Number of trainable real scalars: complex parameters count twice per
    /// element, real parameters once.
    pub fn n_scalars(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.value.len() * if p.is_real { 1 } else { 2 })
            .sum()
    }
}

/// How many coordinates the finite-difference check perturbs per parameter.
#[derive(Debug, Clone, Copy)]
pub enum CheckMode {
    /// Every real coordinate of every parameter.
    All,
    /// A fixed random subset per parameter tensor (for full-model checks).
    Sampled { per_tensor: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Central-difference verification of a scalar loss built by `build`.
///
/// `build` must be deterministic given the store contents. Relative error is
/// |analytic - fd| / max(|analytic|, |fd|, floor).
pub fn grad_check<T, F>(
    store: &mut ParamStore<T>,
    mut build: F,
    mode: CheckMode,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<(Tape<T>, NodeId)>,
{
    use rand::Rng;
    use rand::SeedableRng;

    store.zero_grads();
    let (tape, loss) = build(store)?;
    let grads = tape.backward(loss)?;
    tape.merge_param_grads(&grads, store);

    // (param, flat index, imaginary?) coordinates to probe
    let mut coords: Vec<(usize, usize, bool)> = Vec::new();
    match mode {
        CheckMode::All => {
            for (i, p) in store.params.iter().enumerate() {
                for j in 0..p.value.len() {
                    coords.push((i, j, false));
                    if !p.is_real {
                        coords.push((i, j, true));
                    }
                }
            }
        }
        CheckMode::Sampled { per_tensor, seed } => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for (i, p) in store.params.iter().enumerate() {
                let n = p.value.len();
                for _ in 0..per_tensor.min(n) {
                    let j = rng.gen_range(0..n);
                    let im = !p.is_real && rng.gen_bool(0.5);
                    coords.push((i, j, im));
                }
            }
        }
    }

    let hs = T::from_f64(h);
    let mut max_rel_err = 0.0f64;
    let mut worst = String::from("(none)");
    for &(pi, j, im) in &coords {
        let analytic = {
            let p = &store.params[pi];
            if im {
                p.grad.im()[j].to_f64()
            } else {
                p.grad.re()[j].to_f64()
            }
        };
        let mut eval_at = |store: &mut ParamStore<T>, delta: T| -> Result<f64> {
            {
                let p = &mut store.params[pi];
                if im {
                    p.value.im_mut()[j] = p.value.im()[j] + delta;
                } else {
                    p.value.re_mut()[j] = p.value.re()[j] + delta;
                }
            }
            let (t, l) = build(store)?;
            let v = t.scalar(l).to_f64();
            let p = &mut store.params[pi];
            if im {
                p.value.im_mut()[j] = p.value.im()[j] - delta;
            } else {
                p.value.re_mut()[j] = p.value.re()[j] - delta;
            }
            Ok(v)
        };
        let up = eval_at(store, hs)?;
        let down = eval_at(store, -hs)?;
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor);
        if rel > max_rel_err {
            max_rel_err = rel;
            let p = &store.params[pi];
            worst = format!(
                "{}[{j}].{} analytic {analytic:.6e} fd {fd:.6e}",
                p.name,
                if im { "im" } else { "re" }
            );
        }
    }
    Ok(GradCheckReport {
        checked: coords.len(),
        max_rel_err,
        worst,
    })
}
