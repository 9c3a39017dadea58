//! Reverse-mode automatic differentiation over a flat op tape.
//!
//! Every op eagerly computes its value and records how to push gradients back
//! to its inputs. `Tape::backward` walks the records in reverse creation order,
//! which is a valid topological order because inputs always precede outputs.

use std::cell::{Ref, RefCell};

use crate::kernels::{self, ConvGeom};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    AddScalar(usize),
    MulConst(usize, Tensor<F>),
    Bias { x: usize, b: usize, per_sample: bool },
    ScaleChannels { x: usize, s: usize },
    Conv { x: usize, w: usize, geom: ConvGeom },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Square(usize),
    MatMul(usize, usize),
    Reshape(usize),
    Narrow { x: usize, start: usize },
    MaxPool { x: usize, arg: Vec<u32> },
    GlobalAvgPool(usize),
    Sum(usize),
    SumPerSample(usize),
    Mean(usize),
    SoftmaxXent { logits: usize, probs: Tensor<F>, targets: Tensor<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recording of a computation.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros if `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var<'_, F>) -> Tensor<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable input.
    pub fn param(&self, t: &Tensor<F>) -> Var<'_, F> {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&self, t: Tensor<F>) -> Var<'_, F> {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted but which is not a model parameter.
    pub fn input(&self, t: Tensor<F>) -> Var<'_, F> {
        self.push(t, Op::Leaf, true)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass seeded with d(loss)/d(loss) = 1. `loss` must hold one element.
    pub fn backward(&self, loss: Var<'_, F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward from non-scalar");
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), F::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            // keep interior gradients available for inspection
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn acc<F: Scalar>(nodes: &[Node<F>], grads: &mut [Option<Tensor<F>>], id: usize, t: Tensor<F>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn backprop_node<F: Scalar>(nodes: &[Node<F>], node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, g.clone());
            acc(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, g.clone());
            acc(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                acc(nodes, grads, *a, g.zip_map(val(*b), |gv, bv| gv * bv));
            }
            if rg(*b) {
                acc(nodes, grads, *b, g.zip_map(val(*a), |gv, av| gv * av));
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            acc(nodes, grads, *a, g.map(|v| v * s));
        }
        Op::AddScalar(a) => acc(nodes, grads, *a, g.clone()),
        Op::MulConst(a, m) => {
            let md = m.data();
            let ml = md.len();
            let data = g.data().iter().enumerate().map(|(i, &v)| v * md[i % ml]).collect();
            acc(nodes, grads, *a, Tensor::new(g.shape(), data));
        }
        Op::Bias { x, b, per_sample } => {
            acc(nodes, grads, *x, g.clone());
            if rg(*b) {
                let n = g.dim(0);
                let c = g.dim(1);
                let inner: usize = g.shape()[2..].iter().product();
                let mut db = Tensor::zeros(val(*b).shape());
                let dbd = db.data_mut();
                for i in 0..n {
                    for ch in 0..c {
                        let s: F = g.data()[(i * c + ch) * inner..(i * c + ch + 1) * inner].iter().copied().sum();
                        let slot = if *per_sample { i * c + ch } else { ch };
                        dbd[slot] += s;
                    }
                }
                acc(nodes, grads, *b, db);
            }
        }
        Op::ScaleChannels { x, s } => {
            let n = g.dim(0);
            let c = g.dim(1);
            let inner: usize = g.shape()[2..].iter().product();
            let sv = val(*s).data();
            if rg(*x) {
                let mut dx = g.clone();
                for (blk, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                    let f = sv[blk];
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                acc(nodes, grads, *x, dx);
            }
            if rg(*s) {
                let xv = val(*x).data();
                let mut ds = Tensor::zeros(&[n, c]);
                for (blk, d) in ds.data_mut().iter_mut().enumerate() {
                    let r = blk * inner..(blk + 1) * inner;
                    *d = g.data()[r.clone()].iter().zip(&xv[r]).map(|(&a, &b)| a * b).sum();
                }
                acc(nodes, grads, *s, ds);
            }
        }
        Op::Conv { x, w, geom } => {
            let n = val(*x).dim(0);
            let mut dx = rg(*x).then(|| Tensor::zeros(val(*x).shape()));
            let mut dw = rg(*w).then(|| Tensor::zeros(val(*w).shape()));
            kernels::conv2d_backward(
                val(*x).data(),
                val(*w).data(),
                g.data(),
                n,
                geom,
                dx.as_mut().map(|t| t.data_mut()),
                dw.as_mut().map(|t| t.data_mut()),
            );
            if let Some(dx) = dx {
                acc(nodes, grads, *x, dx);
            }
            if let Some(dw) = dw {
                acc(nodes, grads, *w, dw);
            }
        }
        Op::Relu(a) => {
            let d = g.zip_map(&node.value, |gv, y| if y > F::zero() { gv } else { F::zero() });
            acc(nodes, grads, *a, d);
        }
        Op::Tanh(a) => {
            let d = g.zip_map(&node.value, |gv, y| gv * (F::one() - y * y));
            acc(nodes, grads, *a, d);
        }
        Op::Sigmoid(a) => {
            let d = g.zip_map(&node.value, |gv, y| gv * y * (F::one() - y));
            acc(nodes, grads, *a, d);
        }
        Op::Exp(a) => {
            let d = g.zip_map(&node.value, |gv, y| gv * y);
            acc(nodes, grads, *a, d);
        }
        Op::Square(a) => {
            let two = F::lit(2.0);
            let d = g.zip_map(val(*a), |gv, x| gv * two * x);
            acc(nodes, grads, *a, d);
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, k, m) = (av.dim(0), av.dim(1), bv.dim(1));
            if rg(*a) {
                let mut da = Tensor::zeros(&[n, k]);
                gemm(g.data(), false, bv.data(), true, n, m, k, da.data_mut(), false);
                acc(nodes, grads, *a, da);
            }
            if rg(*b) {
                let mut db = Tensor::zeros(&[k, m]);
                gemm(av.data(), true, g.data(), false, k, n, m, db.data_mut(), false);
                acc(nodes, grads, *b, db);
            }
        }
        Op::Reshape(a) => {
            acc(nodes, grads, *a, g.clone().reshape(val(*a).shape()));
        }
        Op::Narrow { x, start } => {
            let xs = val(*x).shape();
            let n = xs[0];
            let c = xs[1];
            let len = g.dim(1);
            let inner: usize = xs[2..].iter().product();
            let mut dx = Tensor::zeros(xs);
            for i in 0..n {
                let dst = (i * c + start) * inner;
                let src = i * len * inner;
                dx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            acc(nodes, grads, *x, dx);
        }
        Op::MaxPool { x, arg } => {
            let mut dx = Tensor::zeros(val(*x).shape());
            let d = dx.data_mut();
            for (&gi, &ai) in g.data().iter().zip(arg) {
                d[ai as usize] += gi;
            }
            acc(nodes, grads, *x, dx);
        }
        Op::GlobalAvgPool(x) => {
            let xs = val(*x).shape();
            let hw: usize = xs[2..].iter().product();
            let inv = F::one() / F::lit(hw as f64);
            let mut dx = Tensor::zeros(xs);
            for (blk, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                let v = g.data()[blk] * inv;
                chunk.iter_mut().for_each(|d| *d = v);
            }
            acc(nodes, grads, *x, dx);
        }
        Op::Sum(x) => {
            acc(nodes, grads, *x, Tensor::full(val(*x).shape(), g.item()));
        }
        Op::Mean(x) => {
            let n = val(*x).numel();
            acc(nodes, grads, *x, Tensor::full(val(*x).shape(), g.item() / F::lit(n as f64)));
        }
        Op::SumPerSample(x) => {
            let xs = val(*x).shape();
            let inner: usize = xs[1..].iter().product();
            let mut dx = Tensor::zeros(xs);
            for (i, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                let v = g.data()[i];
                chunk.iter_mut().for_each(|d| *d = v);
            }
            acc(nodes, grads, *x, dx);
        }
        Op::SoftmaxXent {
            logits,
            probs,
            targets,
        } => {
            let c = probs.dim(1);
            let mut dz = Tensor::zeros(probs.shape());
            for (i, row) in dz.data_mut().chunks_mut(c).enumerate() {
                let t = &targets.data()[i * c..(i + 1) * c];
                let p = &probs.data()[i * c..(i + 1) * c];
                let mass: F = t.iter().copied().sum();
                let gi = g.data()[i];
                for j in 0..c {
                    row[j] = gi * (mass * p[j] - t[j]);
                }
            }
            acc(nodes, grads, *logits, dz);
        }
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<F>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        self.value().clone()
    }

    fn rg(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn unary(&self, f: impl Fn(F) -> F, op: Op<F>) -> Self {
        let v = self.value().map(f);
        self.tape.push(v, op, self.rg())
    }

    fn binary(&self, o: Self, f: impl Fn(F, F) -> F, op: Op<F>) -> Self {
        let v = self.value().zip_map(&o.value(), f);
        self.tape.push(v, op, self.rg() || o.rg())
    }

    pub fn add(&self, o: Self) -> Self {
        self.binary(o, |a, b| a + b, Op::Add(self.id, o.id))
    }

    pub fn sub(&self, o: Self) -> Self {
        self.binary(o, |a, b| a - b, Op::Sub(self.id, o.id))
    }

    pub fn mul(&self, o: Self) -> Self {
        self.binary(o, |a, b| a * b, Op::Mul(self.id, o.id))
    }

    pub fn scale(&self, s: f64) -> Self {
        let s = F::lit(s);
        self.unary(|v| v * s, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        let c = F::lit(c);
        self.unary(|v| v + c, Op::AddScalar(self.id))
    }

    /// Multiply by a constant of the same shape, or of the trailing shape
    /// (broadcast over the leading axis).
    pub fn mul_const(&self, m: &Tensor<F>) -> Self {
        let v = {
            let x = self.value();
            let ml = m.numel();
            assert!(
                ml == x.numel() || ml == x.inner_len(),
                "mul_const: {:?} does not broadcast to {:?}",
                m.shape(),
                x.shape()
            );
            let md = m.data();
            let data = x.data().iter().enumerate().map(|(i, &v)| v * md[i % ml]).collect();
            Tensor::new(x.shape(), data)
        };
        self.tape.push(v, Op::MulConst(self.id, m.clone()), self.rg())
    }

    /// Adds a per-channel bias `[C]` or per-sample-per-channel bias `[N, C]` to `[N, C, ...]`.
    pub fn add_bias(&self, b: Self) -> Self {
        let (v, per_sample) = {
            let x = self.value();
            let bv = b.value();
            let n = x.dim(0);
            let c = x.dim(1);
            let inner: usize = x.shape()[2..].iter().product();
            let per_sample = match bv.shape() {
                [bc] if *bc == c => false,
                [bn, bc] if *bn == n && *bc == c => true,
                s => panic!("add_bias: bias shape {s:?} incompatible with {:?}", x.shape()),
            };
            let mut y = x.clone();
            for (blk, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
                let bi = if per_sample { blk } else { blk % c };
                let bval = bv.data()[bi];
                chunk.iter_mut().for_each(|v| *v += bval);
            }
            (y, per_sample)
        };
        let rg = self.rg() || b.rg();
        self.tape.push(
            v,
            Op::Bias {
                x: self.id,
                b: b.id,
                per_sample,
            },
            rg,
        )
    }

    /// Multiplies `[N, C, ...]` by per-sample-per-channel factors `[N, C]`.
    pub fn scale_channels(&self, s: Self) -> Self {
        let v = {
            let x = self.value();
            let sv = s.value();
            assert_eq!(sv.shape(), &x.shape()[..2], "scale_channels shape mismatch");
            let inner: usize = x.shape()[2..].iter().product();
            let mut y = x.clone();
            for (blk, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
                let f = sv.data()[blk];
                chunk.iter_mut().for_each(|v| *v *= f);
            }
            y
        };
        let rg = self.rg() || s.rg();
        self.tape.push(v, Op::ScaleChannels { x: self.id, s: s.id }, rg)
    }

    /// 2-D convolution of `[N, C_in, H, W]` with weights `[C_out, C_in, k, k]`.
    pub fn conv2d(&self, w: Self, stride: usize, pad: usize) -> Self {
        let (v, geom) = {
            let x = self.value();
            let wv = w.value();
            assert_eq!(x.rank(), 4, "conv2d input must be NCHW");
            assert_eq!(wv.rank(), 4, "conv2d weight must be [out, in, k, k]");
            assert_eq!(wv.dim(1), x.dim(1), "conv2d channel mismatch");
            assert_eq!(wv.dim(2), wv.dim(3), "conv2d kernel must be square");
            let geom = ConvGeom {
                c_in: x.dim(1),
                h: x.dim(2),
                w: x.dim(3),
                c_out: wv.dim(0),
                k: wv.dim(2),
                stride,
                pad,
            };
            let n = x.dim(0);
            let y = kernels::conv2d_forward(x.data(), wv.data(), n, &geom);
            (Tensor::new(&[n, geom.c_out, geom.out_h(), geom.out_w()], y), geom)
        };
        let rg = self.rg() || w.rg();
        self.tape.push(v, Op::Conv { x: self.id, w: w.id, geom }, rg)
    }

    pub fn relu(&self) -> Self {
        self.unary(|v| v.max(F::zero()), Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Self {
        self.unary(|v| v.tanh(), Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Self {
        self.unary(|v| F::one() / (F::one() + (-v).exp()), Op::Sigmoid(self.id))
    }

    pub fn exp(&self) -> Self {
        self.unary(|v| v.exp(), Op::Exp(self.id))
    }

    pub fn square(&self) -> Self {
        self.unary(|v| v * v, Op::Square(self.id))
    }

    /// `[N, K] x [K, M]`.
    pub fn matmul(&self, w: Self) -> Self {
        let v = {
            let a = self.value();
            let b = w.value();
            assert_eq!(a.rank(), 2);
            assert_eq!(b.rank(), 2);
            assert_eq!(a.dim(1), b.dim(0), "matmul inner dimension mismatch");
            let (n, k, m) = (a.dim(0), a.dim(1), b.dim(1));
            let mut y = Tensor::zeros(&[n, m]);
            gemm(a.data(), false, b.data(), false, n, k, m, y.data_mut(), false);
            y
        };
        let rg = self.rg() || w.rg();
        self.tape.push(v, Op::MatMul(self.id, w.id), rg)
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        let v = self.value().clone().reshape(shape);
        self.tape.push(v, Op::Reshape(self.id), self.rg())
    }

    /// Flattens everything but the leading axis.
    pub fn flatten(&self) -> Self {
        let (n, inner) = {
            let v = self.value();
            (v.dim(0), v.inner_len())
        };
        self.reshape(&[n, inner])
    }

    /// Slice along axis 1.
    pub fn narrow(&self, start: usize, len: usize) -> Self {
        let v = self.value().narrow1(start, len);
        self.tape.push(v, Op::Narrow { x: self.id, start }, self.rg())
    }

    pub fn max_pool2(&self) -> Self {
        let (v, arg) = {
            let x = self.value();
            let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
            let (y, arg) = kernels::max_pool2_forward(x.data(), n, c, h, w);
            (Tensor::new(&[n, c, h / 2, w / 2], y), arg)
        };
        self.tape.push(v, Op::MaxPool { x: self.id, arg }, self.rg())
    }

    /// Mean over spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self) -> Self {
        let v = {
            let x = self.value();
            let hw: usize = x.shape()[2..].iter().product();
            let inv = F::one() / F::lit(hw as f64);
            let data = x.data().chunks(hw).map(|c| c.iter().copied().sum::<F>() * inv).collect();
            Tensor::new(&x.shape()[..2], data)
        };
        self.tape.push(v, Op::GlobalAvgPool(self.id), self.rg())
    }

    pub fn sum(&self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::Sum(self.id), self.rg())
    }

    pub fn mean(&self) -> Self {
        let v = {
            let x = self.value();
            Tensor::scalar(x.sum() / F::lit(x.numel() as f64))
        };
        self.tape.push(v, Op::Mean(self.id), self.rg())
    }

    /// `[N, ...] -> [N]`.
    pub fn sum_per_sample(&self) -> Self {
        let v = {
            let x = self.value();
            let inner = x.inner_len();
            let data = x.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
            Tensor::new(&[x.dim(0)], data)
        };
        self.tape.push(v, Op::SumPerSample(self.id), self.rg())
    }

    /// Per-row cross-entropy `-Σ_j t_j log softmax(z)_j` for logits `[N, C]`
    /// against (possibly soft) targets `[N, C]`. Returns `[N]`.
    pub fn softmax_cross_entropy(&self, targets: &Tensor<F>) -> Self {
        let (v, probs) = {
            let z = self.value();
            assert_eq!(z.shape(), targets.shape(), "cross-entropy target shape mismatch");
            let c = z.dim(1);
            let mut probs = Tensor::zeros(z.shape());
            let mut loss = Vec::with_capacity(z.dim(0));
            for (i, row) in z.data().chunks(c).enumerate() {
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let se: F = row.iter().map(|&v| (v - mx).exp()).sum();
                let lse = mx + se.ln();
                let t = &targets.data()[i * c..(i + 1) * c];
                let mut l = F::zero();
                for j in 0..c {
                    let lp = row[j] - lse;
                    probs.data_mut()[i * c + j] = lp.exp();
                    if t[j] != F::zero() {
                        l -= t[j] * lp;
                    }
                }
                loss.push(l);
            }
            (Tensor::new(&[z.dim(0)], loss), probs)
        };
        self.tape.push(
            v,
            Op::SoftmaxXent {
                logits: self.id,
                probs,
                targets: targets.clone(),
            },
            self.rg(),
        )
    }
}
