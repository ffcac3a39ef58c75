//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] owns every intermediate value. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] just walks it in reverse.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kernels::{self, Dims4, KernelDims};
use crate::tensor::{split_axis, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Sub,
    Relu,
    Square,
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize by the batch's own per-channel moments.
    Train { eps: T },
    /// Normalize by fixed running moments.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

#[derive(Debug)]
enum Op<T> {
    Leaf { trainable: bool },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Binary { op: ElementwiseOp, a: Var, b: Var },
    Relu(Var),
    Square(Var),
    Scale(Var, T),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Var, pad: (usize, usize) },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        var: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    AvgPool2(Var),
    ConvTranspose2 { x: Var, w: Var, b: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct GradMap<T> {
    grads: IndexMap<Var, Tensor<T>>,
}

impl<T: Real> GradMap<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(&v, t)| (v, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.shift_remove(&v)
    }
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records everything needed for [`backward`](Self::backward).
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// An inference-only graph: [`free`](Self::free) releases values eagerly
    /// and `backward` is unavailable.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { trainable: true })
    }

    /// A constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { trainable: false })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0]
            .value
            .as_ref()
            .unwrap_or_else(|| panic!("value of node {} was freed", v.0))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Drops an intermediate value in a no-grad graph. No-op when recording.
    pub fn free(&mut self, v: Var) {
        if !self.record && !matches!(self.nodes[v.0].op, Op::Leaf { .. }) {
            self.nodes[v.0].value = None;
        }
    }

    /// Moves a value out of a no-grad graph, cloning when recording.
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        if self.record {
            self.value(v).clone()
        } else {
            self.nodes[v.0].value.take().expect("value already taken")
        }
    }

    /// Per-channel `(mean, biased variance)` seen by a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mean,
                var,
                train: true,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    fn dims4(&self, v: Var) -> Result<Dims4> {
        let (n, c, h, w) = self.value(v).dims4()?;
        Ok(Dims4::new(n, c, h, w))
    }

    // ---------------------------------------------------------------- ops

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty { op: "concat" })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!(
                "concat: axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries of `input` along `axis` starting at `start`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid(format!(
                "slice: [{start}, {}) out of range on axis {axis} of {s:?}",
                start + len
            )));
        }
        let (outer, size, inner) = split_axis(&s, axis);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { input, axis, start }))
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (ElementwiseOp::Relu, None) => Ok(self.relu(a)),
            (ElementwiseOp::Square, None) => Ok(self.square(a)),
            (ElementwiseOp::Add | ElementwiseOp::Mul | ElementwiseOp::Sub, Some(b)) => {
                self.binary(op, a, b)
            }
            _ => Err(Error::invalid(format!(
                "elementwise {op:?}: wrong operand count"
            ))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    fn binary(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match op {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
            _ => unreachable!(),
        };
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.is_scalar() {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        Ok(self.push(out, Op::Binary { op, a, b }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let zero = T::zero();
        let out = self.value(a).map(|x| if x > zero { x } else { zero });
        self.push(out, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = T::from_usize(t.numel()).expect("count");
        let out = Tensor::scalar(t.sum() / n);
        self.push(out, Op::Mean(a))
    }

    /// Stride-1 "same" convolution; even kernels put the extra zero on the
    /// trailing side of each axis.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let d = self.dims4(x)?;
        let kd = self.kernel_dims(w)?;
        if kd.inp != d.c {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: kd.inp,
                got: d.c,
            });
        }
        self.check_bias(b, kd.out, "conv2d")?;
        let pad = (kernels::same_pad_lead(kd.kt), kernels::same_pad_lead(kd.kf));
        let y = kernels::conv2d_same(
            self.value(x).data(),
            d,
            self.value(w).data(),
            kd,
            Some(self.value(b).data()),
            pad,
        );
        let out = Tensor::from_parts(vec![d.n, kd.out, d.h, d.w], y);
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }))
    }

    fn kernel_dims(&self, w: Var) -> Result<KernelDims> {
        match *self.shape(w) {
            [out, inp, kt, kf] => Ok(KernelDims { out, inp, kt, kf }),
            ref s => Err(Error::invalid(format!("kernel must be 4-d, got {s:?}"))),
        }
    }

    fn check_bias(&self, b: Var, out: usize, op: &'static str) -> Result<()> {
        if self.shape(b) != [out] {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![out],
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<Var> {
        let d = self.dims4(x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [d.c] {
                return Err(Error::ChannelMismatch {
                    op: "batch_norm",
                    expected: self.shape(p)[0],
                    got: d.c,
                });
            }
        }
        let xs = self.value(x).data();
        let (mean, var, eps, train) = match mode {
            BnMode::Train { eps } => {
                let (m, v) = kernels::channel_moments(xs, d);
                (m, v, eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != d.c || var.len() != d.c {
                    return Err(Error::ChannelMismatch {
                        op: "batch_norm",
                        expected: mean.len(),
                        got: d.c,
                    });
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = kernels::affine_normalize(
            xs,
            d,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::from_parts(vec![d.n, d.c, d.h, d.w], y);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                inv_std,
                train,
            },
        ))
    }

    /// 2×2 average pooling, stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let d = self.dims4(x)?;
        if d.h % 2 != 0 || d.w % 2 != 0 {
            return Err(Error::invalid(format!(
                "down_sample: frames ({}) and bins ({}) must both be even",
                d.h, d.w
            )));
        }
        let y = kernels::avg_pool2(self.value(x).data(), d);
        let out = Tensor::from_parts(vec![d.n, d.c, d.h / 2, d.w / 2], y);
        Ok(self.push(out, Op::AvgPool2(x)))
    }

    /// 2×2 stride-2 transposed convolution; kernel is `(out, in, 2, 2)`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let d = self.dims4(x)?;
        let kd = self.kernel_dims(w)?;
        if kd.kt != 2 || kd.kf != 2 {
            return Err(Error::invalid(format!(
                "up_sample: kernel must be 2x2, got {}x{}",
                kd.kt, kd.kf
            )));
        }
        if kd.inp != d.c {
            return Err(Error::ChannelMismatch {
                op: "up_sample",
                expected: kd.inp,
                got: d.c,
            });
        }
        self.check_bias(b, kd.out, "up_sample")?;
        let y = kernels::conv_transpose2(
            self.value(x).data(),
            d,
            self.value(w).data(),
            kd.out,
            self.value(b).data(),
        );
        let out = Tensor::from_parts(vec![d.n, kd.out, 2 * d.h, 2 * d.w], y);
        Ok(self.push(out, Op::ConvTranspose2 { x, w, b }))
    }

    // ----------------------------------------------------------- backward

    /// Gradients of the scalar `root` with respect to every trainable leaf.
    /// Leaves that do not influence `root` get zeros.
    pub fn backward(&self, root: Var) -> Result<GradMap<T>> {
        if !self.record {
            return Err(Error::invalid("backward on a no-grad graph"));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::invalid(format!(
                "backward: root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf { .. } = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, g, &mut grads);
        }
        let mut out = IndexMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { trainable: true } = node.op {
                let shape = self.value(Var(i)).shape().to_vec();
                let g = match grads.get_mut(i).and_then(Option::take) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                };
                out.insert(Var(i), g);
            }
        }
        Ok(GradMap { grads: out })
    }

    fn backprop_node(&self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let out_shape = self.value(Var(i)).shape();
        match &self.nodes[i].op {
            Op::Leaf { .. } => unreachable!(),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g[base..base + len * inner]);
                    }
                    accumulate(grads, v, part);
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let (outer, size, inner) = split_axis(in_shape, *axis);
                let len = out_shape[*axis];
                let mut full = vec![T::zero(); in_shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * size + start) * inner;
                    let src = o * len * inner;
                    full[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(grads, *input, full);
            }
            Op::Binary { op, a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ga, gb): (Vec<T>, Vec<T>) = match op {
                    ElementwiseOp::Add => (g.clone(), g),
                    ElementwiseOp::Sub => (g.clone(), g.iter().map(|&x| -x).collect()),
                    ElementwiseOp::Mul => (
                        broadcast_mul(&g, tb.data()),
                        broadcast_mul(&g, ta.data()),
                    ),
                    _ => unreachable!(),
                };
                accumulate(grads, *a, reduce_to(ga, ta.numel()));
                accumulate(grads, *b, reduce_to(gb, tb.numel()));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let zero = T::zero();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > zero { g } else { zero })
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two = T::one() + T::one();
                let d = g.iter().zip(x).map(|(&g, &x)| two * x * g).collect();
                accumulate(grads, *a, d);
            }
            Op::Scale(a, s) => {
                let d = g.iter().map(|&g| g * *s).collect();
                accumulate(grads, *a, d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let share = g[0] / T::from_usize(n).expect("count");
                accumulate(grads, *a, vec![share; n]);
            }
            Op::Conv2d { x, w, b, pad } => {
                let d = self.dims4(*x).expect("recorded");
                let kd = self.kernel_dims(*w).expect("recorded");
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let gw = kernels::conv2d_weight_grad(xs, d, &g, kd, *pad);
                let out_d = Dims4::new(d.n, kd.out, d.h, d.w);
                let gb = kernels::channel_sums(&g, out_d);
                if self.wants_grad(*x) {
                    let gx = kernels::conv2d_input_grad(&g, d, ws, kd, *pad);
                    accumulate(grads, *x, gx);
                }
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
                ..
            } => {
                let d = self.dims4(*x).expect("recorded");
                let xs = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let (sum_dy, sum_dy_xhat) = kernels::bn_reductions(xs, &g, d, mean, inv_std);
                if self.wants_grad(*x) {
                    let gx = if *train {
                        kernels::bn_train_input_grad(xs, &g, d, mean, inv_std, gam, &sum_dy, &sum_dy_xhat)
                    } else {
                        kernels::bn_eval_input_grad(&g, d, inv_std, gam)
                    };
                    accumulate(grads, *x, gx);
                }
                accumulate(grads, *gamma, sum_dy_xhat);
                accumulate(grads, *beta, sum_dy);
            }
            Op::AvgPool2(x) => {
                let d = self.dims4(*x).expect("recorded");
                accumulate(grads, *x, kernels::avg_pool2_backward(&g, d));
            }
            Op::ConvTranspose2 { x, w, b } => {
                let d = self.dims4(*x).expect("recorded");
                let kd = self.kernel_dims(*w).expect("recorded");
                let (gx, gw, gb) = kernels::conv_transpose2_backward(
                    self.value(*x).data(),
                    d,
                    self.value(*w).data(),
                    kd.out,
                    &g,
                );
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
        }
    }

    /// False for constant leaves, whose gradient would be discarded anyway.
    fn wants_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf { trainable: false })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_mul<T: Real>(g: &[T], other: &[T]) -> Vec<T> {
    if other.len() == 1 {
        let o = other[0];
        g.iter().map(|&x| x * o).collect()
    } else {
        g.iter().zip(other).map(|(&x, &o)| x * o).collect()
    }
}

/// Sums a broadcast gradient back down to a scalar operand.
fn reduce_to<T: Real>(g: Vec<T>, numel: usize) -> Vec<T> {
    if numel == 1 && g.len() != 1 {
        vec![g.into_iter().sum()]
    } else {
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn concat_layout_and_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[5., 6.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(g.shape(c), &[2, 3]);

        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = g.concat(&[x], 0).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let p = g.constant(Tensor::zeros(&[2, 3]));
        let q = g.constant(Tensor::zeros(&[2, 5]));
        let r = g.concat(&[p, q], 1).unwrap();
        assert_eq!(g.shape(r), &[2, 8]);
    }

    #[test]
    fn concat_rejects_bad_input() {
        let mut g: Graph<f64> = Graph::new();
        assert!(matches!(g.concat(&[], 0), Err(Error::Empty { .. })));
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        match g.concat(&[a, b], 1) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.elementwise(ElementwiseOp::Relu, x, None).unwrap();
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);

        let z = g.constant(Tensor::zeros(&[3]));
        let s = g.elementwise(ElementwiseOp::Add, x, Some(z)).unwrap();
        assert_eq!(g.value(s), g.value(x));

        let a = g.constant(t(&[1], &[3.]));
        let b = g.constant(t(&[1], &[1.]));
        let d = g.sub(a, b).unwrap();
        let sq = g.square(d);
        assert_eq!(g.value(sq).data(), &[4.]);

        let m = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.add(x, m).is_err());
    }

    #[test]
    fn mean_and_its_adjoint() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[2., 4.]));
        let m = g.mean(a);
        assert_eq!(g.value(m).item(), 3.0);

        let ones = g.param(Tensor::ones(&[4, 4]));
        let m = g.mean(ones);
        assert_eq!(g.value(m).item(), 1.0);
        let grads = g.backward(m).unwrap();
        assert!(grads.get(ones).unwrap().data().iter().all(|&x| x == 1.0 / 16.0));
    }

    #[test]
    fn backward_square_and_detached_leaf() {
        let mut g = Graph::new();
        let w = g.param(t(&[1], &[3.]));
        let unused = g.param(t(&[2], &[1., 1.]));
        let sq = g.square(w);
        let root = g.mean(sq);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.]);
        assert_eq!(grads.get(unused).unwrap().data(), &[0., 0.]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1., 2.]));
        let sq = g.square(w);
        assert!(g.backward(sq).is_err());
    }

    #[test]
    fn concat_backward_splits_exactly() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_fn(&[2, 2, 3], |i| i as f64 * 0.1));
        let b = g.param(Tensor::from_fn(&[2, 1, 3], |i| i as f64 * -0.3));
        let c = g.concat(&[a, b], 1).unwrap();
        let w = g.constant(Tensor::from_fn(&[2, 3, 3], |i| (i as f64).sin()));
        let prod = g.mul(c, w).unwrap();
        let root = g.mean(prod);
        let grads = g.backward(root).unwrap();
        // Output gradient is w / 18; re-concatenating the pieces must give it back.
        let mut g2 = Graph::new();
        let ga = g2.constant(grads.get(a).unwrap().clone());
        let gb = g2.constant(grads.get(b).unwrap().clone());
        let joined = g2.concat(&[ga, gb], 1).unwrap();
        let want: Vec<f64> = g.value(w).data().iter().map(|x| x * (1.0 / 18.0)).collect();
        assert_eq!(g2.value(joined).data(), &want[..]);
    }

    #[test]
    fn scalar_broadcast_is_the_only_broadcast() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1., 2., 3.]));
        let s = g.param(t(&[1], &[2.]));
        let y = g.mul(x, s).unwrap();
        assert_eq!(g.value(y).data(), &[2., 4., 6.]);
        let root = g.mean(y);
        let grads = g.backward(root).unwrap();
        assert!((grads.get(s).unwrap().item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn no_grad_graph_frees_values() {
        let mut g: Graph<f32> = Graph::no_grad();
        let x = g.constant(Tensor::ones(&[4]));
        let y = g.relu(x);
        let z = g.square(y);
        g.free(y);
        assert_eq!(g.value(z).data(), &[1.0; 4]);
        assert!(g.backward(z).is_err());
    }
}
