//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a single-element output walks the record in reverse
//! and returns gradients for every tracked leaf. The operation set is the one
//! needed by the flow, the classifiers and the attacks; batch-major layout
//! (`[n, ...]`) is assumed by the per-sample reductions.

use std::cell::{Ref, RefCell};
use std::ops;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn, Slice};

use crate::real::Real;

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

struct Node<T: Real> {
    value: ArrayD<T>,
    op: Op<T>,
    tracked: bool,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    Offset(usize),
    AddAlong { x: usize, b: usize, axis: usize },
    MulAlong { x: usize, b: usize, axis: usize },
    AddScalar { x: usize, s: usize },
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize, pad: usize },
    ChannelMix { x: usize, w: usize },
    LuWeight { lower: usize, upper: usize, log_s: usize, perm: Vec<usize>, sign: Vec<T> },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Clamp { x: usize, lo: T, hi: T },
    Reshape(usize),
    SpaceToDepth(usize),
    DepthToSpace(usize),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { a: usize, b: usize, axis: usize },
    SumPerSample(usize),
    SumAll(usize),
    LogSoftmax(usize),
    Gather { x: usize, index: Vec<usize> },
    GlobalAvgPool(usize),
    AvgPool2(usize),
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    /// Leaf whose gradient is wanted.
    pub fn var(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    fn unary(&self, a: usize, op: Op<T>, f: impl FnOnce(&ArrayD<T>) -> ArrayD<T>) -> Var<'_, T> {
        let value = f(&self.nodes.borrow()[a].value);
        let tracked = self.tracked(&[a]);
        self.push(value, op, tracked)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op<T>,
        f: impl FnOnce(&ArrayD<T>, &ArrayD<T>) -> ArrayD<T>,
    ) -> Var<'_, T> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        let tracked = self.tracked(&[a, b]);
        self.push(value, op, tracked)
    }

    /// Gradients of the single-element `output` with respect to every tracked
    /// node.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward() needs a single-element output"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(ArrayD::from_elem(nodes[output.id].value.raw_dim(), T::one()));
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].tracked {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, g, &mut grads);
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when `v` does not influence the output.
    pub fn wrt(&mut self, v: Var<'_, T>) -> ArrayD<T> {
        match self.grads.get_mut(v.id).and_then(|g| g.take()) {
            Some(g) => g,
            None => ArrayD::zeros(v.value().raw_dim()),
        }
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<ArrayD<T>>],
    id: usize,
    g: ArrayD<T>,
) {
    if !nodes[id].tracked {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[id].value.shape());
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], id: usize, g: ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
    let val = |i: usize| &nodes[i].value;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *b, g.clone());
            accumulate(nodes, grads, *a, g);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *b, g.mapv(|v| -v));
            accumulate(nodes, grads, *a, g);
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, &g * val(*b));
            accumulate(nodes, grads, *b, &g * val(*a));
        }
        Op::Neg(a) => accumulate(nodes, grads, *a, g.mapv(|v| -v)),
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(nodes, grads, *a, g.mapv(|v| v * c))
        }
        Op::Offset(a) => accumulate(nodes, grads, *a, g),
        Op::AddAlong { x, b, axis } => {
            accumulate(nodes, grads, *b, sum_to_axis(&g, *axis).into_dyn());
            accumulate(nodes, grads, *x, g);
        }
        Op::MulAlong { x, b, axis } => {
            let bv = along(val(*b), val(*x).ndim(), *axis);
            let gb = sum_to_axis(&(&g * val(*x)), *axis);
            accumulate(nodes, grads, *b, gb.into_dyn());
            accumulate(nodes, grads, *x, &g * &bv);
        }
        Op::AddScalar { x, s } => {
            let total = g.sum();
            accumulate(nodes, grads, *s, ArrayD::from_elem(val(*s).raw_dim(), total));
            accumulate(nodes, grads, *x, g);
        }
        Op::MatMul(a, b) => {
            let g2 = g.into_dimensionality::<Ix2>().expect("2-D");
            let a2 = val(*a).view().into_dimensionality::<Ix2>().expect("2-D");
            let b2 = val(*b).view().into_dimensionality::<Ix2>().expect("2-D");
            accumulate(nodes, grads, *a, g2.dot(&b2.t()).into_dyn());
            accumulate(nodes, grads, *b, a2.t().dot(&g2).into_dyn());
        }
        Op::Conv2d { x, w, pad } => {
            let xs = val(*x).shape().to_vec();
            let ws = val(*w).shape().to_vec();
            let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (o, k) = (ws[0], ws[2]);
            let g2 = to_channel_major(&g);
            if nodes[*w].tracked {
                let cols = im2col(val(*x), k, *pad);
                let dw = g2.dot(&cols.t());
                accumulate(
                    nodes,
                    grads,
                    *w,
                    dw.into_shape_with_order(IxDyn(&ws)).expect("weight shape"),
                );
            }
            if nodes[*x].tracked {
                let w2 = val(*w)
                    .view()
                    .into_shape_with_order((o, c * k * k))
                    .expect("weight rows");
                let dcols = w2.t().dot(&g2);
                accumulate(nodes, grads, *x, col2im(&dcols, [n, c, h, wd], k, *pad));
            }
        }
        Op::ChannelMix { x, w } => {
            let xs = val(*x).shape().to_vec();
            let g2 = to_channel_major(&g);
            let w2 = val(*w).view().into_dimensionality::<Ix2>().expect("2-D");
            if nodes[*w].tracked {
                let x2 = to_channel_major(val(*x));
                accumulate(nodes, grads, *w, g2.dot(&x2.t()).into_dyn());
            }
            if nodes[*x].tracked {
                let dx2 = w2.t().dot(&g2);
                accumulate(nodes, grads, *x, from_channel_major(dx2, &xs));
            }
        }
        Op::LuWeight { lower, upper, log_s, perm, sign } => {
            let c = perm.len();
            let g2 = g.into_dimensionality::<Ix2>().expect("2-D");
            // W = P L B with B = U + diag(sign * exp(log_s)); dM = P^T dW.
            let mut dm = Array2::<T>::zeros((c, c));
            for (i, &p) in perm.iter().enumerate() {
                dm.row_mut(p).assign(&g2.row(i));
            }
            let (l, b) = lu_factors(val(*lower), val(*upper), val(*log_s), sign);
            let dl = dm.dot(&b.t());
            let db = l.t().dot(&dm);
            let mut gl = Array2::<T>::zeros((c, c));
            let mut gu = Array2::<T>::zeros((c, c));
            let mut gs = Array1::<T>::zeros(c);
            let ls = val(*log_s);
            for i in 0..c {
                for j in 0..c {
                    if j < i {
                        gl[[i, j]] = dl[[i, j]];
                    } else if j > i {
                        gu[[i, j]] = db[[i, j]];
                    }
                }
                gs[i] = db[[i, i]] * sign[i] * ls[[i]].exp();
            }
            accumulate(nodes, grads, *lower, gl.into_dyn());
            accumulate(nodes, grads, *upper, gu.into_dyn());
            accumulate(nodes, grads, *log_s, gs.into_dyn());
        }
        Op::Relu(a) => {
            let mut d = g;
            d.zip_mut_with(val(*a), |d, &x| {
                if x <= T::zero() {
                    *d = T::zero()
                }
            });
            accumulate(nodes, grads, *a, d)
        }
        Op::Tanh(a) => {
            let mut d = g;
            d.zip_mut_with(out, |d, &y| *d *= T::one() - y * y);
            accumulate(nodes, grads, *a, d)
        }
        Op::Sigmoid(a) => {
            let mut d = g;
            d.zip_mut_with(out, |d, &y| *d *= y * (T::one() - y));
            accumulate(nodes, grads, *a, d)
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, &g * out),
        Op::Log(a) => accumulate(nodes, grads, *a, &g / val(*a)),
        Op::Square(a) => {
            let two = T::of(2.0);
            let mut d = g;
            d.zip_mut_with(val(*a), |d, &x| *d *= two * x);
            accumulate(nodes, grads, *a, d)
        }
        Op::Clamp { x, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            let mut d = g;
            d.zip_mut_with(val(*x), |d, &v| {
                if v < lo || v > hi {
                    *d = T::zero()
                }
            });
            accumulate(nodes, grads, *x, d)
        }
        Op::Reshape(a) => {
            let shape = val(*a).raw_dim();
            let g = g.as_standard_layout().into_owned();
            accumulate(nodes, grads, *a, g.into_shape_with_order(shape).expect("reshape back"))
        }
        Op::SpaceToDepth(a) => accumulate(nodes, grads, *a, depth_to_space(&g)),
        Op::DepthToSpace(a) => accumulate(nodes, grads, *a, space_to_depth(&g)),
        Op::Narrow { x, axis, start } => {
            let mut d = ArrayD::zeros(val(*x).raw_dim());
            let len = g.shape()[*axis];
            d.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                .assign(&g);
            accumulate(nodes, grads, *x, d)
        }
        Op::Concat { a, b, axis } => {
            let split = val(*a).shape()[*axis];
            let ga = g.slice_axis(Axis(*axis), Slice::from(..split)).to_owned();
            let gb = g.slice_axis(Axis(*axis), Slice::from(split..)).to_owned();
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::SumPerSample(a) => {
            let shape = val(*a).shape().to_vec();
            let mut d = ArrayD::zeros(IxDyn(&shape));
            for (mut row, &gi) in d.outer_iter_mut().zip(g.iter()) {
                row.fill(gi);
            }
            accumulate(nodes, grads, *a, d)
        }
        Op::SumAll(a) => {
            let gi = *g.iter().next().expect("scalar");
            accumulate(nodes, grads, *a, ArrayD::from_elem(val(*a).raw_dim(), gi))
        }
        Op::LogSoftmax(a) => {
            let mut d = g;
            for (mut drow, yrow) in d.outer_iter_mut().zip(out.outer_iter()) {
                let total: T = drow.iter().copied().sum();
                drow.zip_mut_with(&yrow, |dv, &y| *dv -= y.exp() * total);
            }
            accumulate(nodes, grads, *a, d)
        }
        Op::Gather { x, index } => {
            let mut d = ArrayD::zeros(val(*x).raw_dim());
            for (i, (&k, &gi)) in index.iter().zip(g.iter()).enumerate() {
                d[[i, k]] += gi;
            }
            accumulate(nodes, grads, *x, d)
        }
        Op::GlobalAvgPool(a) => {
            let s = val(*a).shape().to_vec();
            let inv = T::one() / T::of((s[2] * s[3]) as f64);
            let mut d = ArrayD::zeros(IxDyn(&s));
            for ni in 0..s[0] {
                for ci in 0..s[1] {
                    let v = g[[ni, ci]] * inv;
                    d.slice_mut(ndarray::s![ni, ci, .., ..]).fill(v);
                }
            }
            accumulate(nodes, grads, *a, d)
        }
        Op::AvgPool2(a) => {
            let s = val(*a).shape().to_vec();
            let quarter = T::of(0.25);
            let mut d = ArrayD::zeros(IxDyn(&s));
            for ni in 0..s[0] {
                for ci in 0..s[1] {
                    for i in 0..s[2] {
                        for j in 0..s[3] {
                            d[[ni, ci, i, j]] = g[[ni, ci, i / 2, j / 2]] * quarter;
                        }
                    }
                }
            }
            accumulate(nodes, grads, *a, d)
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Ref<'t, ArrayD<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_array(&self) -> ArrayD<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// First (and only) element; for scalar outputs.
    pub fn item(&self) -> T {
        *self.value().iter().next().expect("non-empty")
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn same_shape(&self, other: &Var<'t, T>, what: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{what}: operand shapes differ");
    }

    pub fn add(self, o: Var<'t, T>) -> Var<'t, T> {
        self.same_shape(&o, "add");
        self.tape.binary(self.id, o.id, Op::Add(self.id, o.id), |a, b| a + b)
    }

    pub fn sub(self, o: Var<'t, T>) -> Var<'t, T> {
        self.same_shape(&o, "sub");
        self.tape.binary(self.id, o.id, Op::Sub(self.id, o.id), |a, b| a - b)
    }

    pub fn mul(self, o: Var<'t, T>) -> Var<'t, T> {
        self.same_shape(&o, "mul");
        self.tape.binary(self.id, o.id, Op::Mul(self.id, o.id), |a, b| a * b)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Neg(self.id), |a| a.mapv(|v| -v))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |a| a.mapv(|v| v * c))
    }

    pub fn offset(self, c: T) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Offset(self.id), |a| a.mapv(|v| v + c))
    }

    /// Adds the 1-D `b` along `axis` (bias per channel / feature).
    pub fn add_along(self, b: Var<'t, T>, axis: usize) -> Var<'t, T> {
        let op = Op::AddAlong { x: self.id, b: b.id, axis };
        self.tape.binary(self.id, b.id, op, |x, b| x + &along(b, x.ndim(), axis))
    }

    /// Multiplies by the 1-D `b` along `axis`.
    pub fn mul_along(self, b: Var<'t, T>, axis: usize) -> Var<'t, T> {
        let op = Op::MulAlong { x: self.id, b: b.id, axis };
        self.tape.binary(self.id, b.id, op, |x, b| x * &along(b, x.ndim(), axis))
    }

    /// Adds a single-element `s` to every entry.
    pub fn add_scalar(self, s: Var<'t, T>) -> Var<'t, T> {
        let op = Op::AddScalar { x: self.id, s: s.id };
        self.tape.binary(self.id, s.id, op, |x, s| {
            let sv = *s.iter().next().expect("scalar");
            x.mapv(|v| v + sv)
        })
    }

    pub fn matmul(self, o: Var<'t, T>) -> Var<'t, T> {
        self.tape.binary(self.id, o.id, Op::MatMul(self.id, o.id), |a, b| {
            let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
            let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
            a2.dot(&b2).into_dyn()
        })
    }

    /// Stride-1 convolution with zero padding `pad`; `self` is `[n,c,h,w]`,
    /// `weight` is `[o,c,k,k]`.
    pub fn conv2d(self, weight: Var<'t, T>, pad: usize) -> Var<'t, T> {
        let op = Op::Conv2d { x: self.id, w: weight.id, pad };
        self.tape.binary(self.id, weight.id, op, |x, w| conv2d_forward(x, w, pad))
    }

    /// Mixes channels (axis 1) with the `[o, c]` matrix `weight`.
    pub fn channel_mix(self, weight: Var<'t, T>) -> Var<'t, T> {
        let op = Op::ChannelMix { x: self.id, w: weight.id };
        self.tape.binary(self.id, weight.id, op, |x, w| {
            let w2 = w.view().into_dimensionality::<Ix2>().expect("2-D mixing matrix");
            let mut shape = x.shape().to_vec();
            let y2 = w2.dot(&to_channel_major(x));
            shape[1] = w2.nrows();
            from_channel_major(y2, &shape)
        })
    }

    pub fn relu(self) -> Var<'t, T> {
        self.tape
            .unary(self.id, Op::Relu(self.id), |a| a.mapv(|v| v.max(T::zero())))
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Tanh(self.id), |a| a.mapv(|v| v.tanh()))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Sigmoid(self.id), |a| a.mapv(sigmoid))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Exp(self.id), |a| a.mapv(|v| v.exp()))
    }

    pub fn ln(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Log(self.id), |a| a.mapv(|v| v.ln()))
    }

    pub fn square(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::Square(self.id), |a| a.mapv(|v| v * v))
    }

    /// Elementwise clamp; gradient passes where the input lies in `[lo, hi]`.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        let op = Op::Clamp { x: self.id, lo, hi };
        self.tape.unary(self.id, op, |a| a.mapv(|v| v.max(lo).min(hi)))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let shape = shape.to_vec();
        self.tape.unary(self.id, Op::Reshape(self.id), |a| {
            a.as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&shape))
                .expect("reshape: element count mismatch")
        })
    }

    /// `[n,c,h,w] -> [n,4c,h/2,w/2]`.
    pub fn space_to_depth(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::SpaceToDepth(self.id), space_to_depth)
    }

    /// Inverse of [`Var::space_to_depth`].
    pub fn depth_to_space(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::DepthToSpace(self.id), depth_to_space)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let op = Op::Narrow { x: self.id, axis, start };
        self.tape.unary(self.id, op, |a| {
            a.slice_axis(Axis(axis), Slice::from(start..start + len))
                .as_standard_layout()
                .into_owned()
        })
    }

    pub fn concat(self, o: Var<'t, T>, axis: usize) -> Var<'t, T> {
        let op = Op::Concat { a: self.id, b: o.id, axis };
        self.tape.binary(self.id, o.id, op, |a, b| {
            ndarray::concatenate(Axis(axis), &[a.view(), b.view()]).expect("concat shapes")
        })
    }

    /// Sum over every axis except the leading batch axis: `[n, ...] -> [n]`.
    pub fn sum_per_sample(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::SumPerSample(self.id), |a| {
            Array1::from_iter(a.outer_iter().map(|r| r.sum())).into_dyn()
        })
    }

    /// Sum of all entries as a 0-d tensor.
    pub fn sum(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::SumAll(self.id), |a| {
            ArrayD::from_elem(IxDyn(&[]), a.sum())
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    /// Row-wise log-softmax of a `[n, k]` tensor.
    pub fn log_softmax(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::LogSoftmax(self.id), |a| {
            let mut out = a.clone();
            for mut row in out.outer_iter_mut() {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                row.mapv_inplace(|v| v - lse);
            }
            out
        })
    }

    /// Picks `self[i, index[i]]` from a `[n, k]` tensor.
    pub fn gather(self, index: &[usize]) -> Var<'t, T> {
        let op = Op::Gather {
            x: self.id,
            index: index.to_vec(),
        };
        self.tape.unary(self.id, op, |a| {
            Array1::from_iter(index.iter().enumerate().map(|(i, &k)| a[[i, k]])).into_dyn()
        })
    }

    /// `[n,c,h,w] -> [n,c]` spatial mean.
    pub fn global_avg_pool(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::GlobalAvgPool(self.id), |a| {
            let s = a.shape();
            let inv = T::one() / T::of((s[2] * s[3]) as f64);
            let mut out = ArrayD::zeros(IxDyn(&[s[0], s[1]]));
            for ni in 0..s[0] {
                for ci in 0..s[1] {
                    out[[ni, ci]] = a.slice(ndarray::s![ni, ci, .., ..]).sum() * inv;
                }
            }
            out
        })
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(self) -> Var<'t, T> {
        self.tape.unary(self.id, Op::AvgPool2(self.id), |a| {
            let s = a.shape();
            let quarter = T::of(0.25);
            let mut out = ArrayD::zeros(IxDyn(&[s[0], s[1], s[2] / 2, s[3] / 2]));
            for ni in 0..s[0] {
                for ci in 0..s[1] {
                    for i in 0..s[2] / 2 {
                        for j in 0..s[3] / 2 {
                            out[[ni, ci, i, j]] = (a[[ni, ci, 2 * i, 2 * j]]
                                + a[[ni, ci, 2 * i, 2 * j + 1]]
                                + a[[ni, ci, 2 * i + 1, 2 * j]]
                                + a[[ni, ci, 2 * i + 1, 2 * j + 1]])
                                * quarter;
                        }
                    }
                }
            }
            out
        })
    }
}

/// Invertible 1x1 mixing matrix `W = P L (U + diag(sign * exp(log_s)))`.
///
/// Only the strictly lower part of `lower` and the strictly upper part of
/// `upper` are used; the unit diagonal of `L` is implicit.
pub fn lu_weight<'t, T: Real>(
    lower: Var<'t, T>,
    upper: Var<'t, T>,
    log_s: Var<'t, T>,
    perm: &[usize],
    sign: &[T],
) -> Var<'t, T> {
    let tape = lower.tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let (l, b) = lu_factors(
            &nodes[lower.id].value,
            &nodes[upper.id].value,
            &nodes[log_s.id].value,
            sign,
        );
        permute_rows(&l.dot(&b), perm).into_dyn()
    };
    let tracked = tape.tracked(&[lower.id, upper.id, log_s.id]);
    let op = Op::LuWeight {
        lower: lower.id,
        upper: upper.id,
        log_s: log_s.id,
        perm: perm.to_vec(),
        sign: sign.to_vec(),
    };
    tape.push(value, op, tracked)
}

/// Row `i` of the result is row `perm[i]` of `m`.
pub fn permute_rows<T: Real>(m: &Array2<T>, perm: &[usize]) -> Array2<T> {
    let mut out = Array2::zeros(m.raw_dim());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(i).assign(&m.row(p));
    }
    out
}

/// Unit-lower `L` and `U + diag(sign * exp(log_s))` from raw parameters.
pub fn lu_factors<T: Real>(
    lower: &ArrayD<T>,
    upper: &ArrayD<T>,
    log_s: &ArrayD<T>,
    sign: &[T],
) -> (Array2<T>, Array2<T>) {
    let c = sign.len();
    let mut l = Array2::<T>::zeros((c, c));
    let mut b = Array2::<T>::zeros((c, c));
    for i in 0..c {
        for j in 0..c {
            if j < i {
                l[[i, j]] = lower[[i, j]];
            } else if j > i {
                b[[i, j]] = upper[[i, j]];
            }
        }
        l[[i, i]] = T::one();
        b[[i, i]] = sign[i] * log_s[[i]].exp();
    }
    (l, b)
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn along<T: Real>(b: &ArrayD<T>, ndim: usize, axis: usize) -> ArrayD<T> {
    let mut shape = vec![1; ndim];
    shape[axis] = b.len();
    b.to_shape(IxDyn(&shape)).expect("1-D operand").into_owned()
}

fn sum_to_axis<T: Real>(g: &ArrayD<T>, axis: usize) -> Array1<T> {
    let mut acc = g.clone();
    for a in (0..g.ndim()).rev() {
        if a != axis {
            acc = acc.sum_axis(Axis(a));
        }
    }
    acc.into_dimensionality().expect("1-D")
}

/// `[n, c, rest...] -> [c, n * prod(rest)]`.
fn to_channel_major<T: Real>(x: &ArrayD<T>) -> Array2<T> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let p: usize = s[2..].iter().product();
    let v = x.as_standard_layout().into_owned().into_shape_with_order((n, c, p)).expect("contiguous");
    v.permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, n * p))
        .expect("channel-major")
}

fn from_channel_major<T: Real>(y: Array2<T>, shape: &[usize]) -> ArrayD<T> {
    let (n, c) = (shape[0], shape[1]);
    let p: usize = shape[2..].iter().product();
    y.into_shape_with_order((c, n, p))
        .expect("channel-major")
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("batch-major")
}

fn im2col<T: Real>(x: &ArrayD<T>, k: usize, pad: usize) -> Array2<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let cols = n * h * w;
    let mut out = vec![T::zero(); c * k * k * cols];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let base = ((ci * k + ki) * k + kj) * cols;
                for ni in 0..n {
                    for i in 0..h {
                        let si = i as isize + ki as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let src = ((ni * c + ci) * h + si as usize) * w;
                        let dst = base + (ni * h + i) * w;
                        for j in 0..w {
                            let sj = j as isize + kj as isize - pad as isize;
                            if sj >= 0 && sj < w as isize {
                                out[dst + j] = xs[src + sj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, cols), out).expect("im2col shape")
}

fn col2im<T: Real>(cols: &Array2<T>, shape: [usize; 4], k: usize, pad: usize) -> ArrayD<T> {
    let [n, c, h, w] = shape;
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().expect("standard layout");
    let ncols = n * h * w;
    let mut out = vec![T::zero(); n * c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let base = ((ci * k + ki) * k + kj) * ncols;
                for ni in 0..n {
                    for i in 0..h {
                        let si = i as isize + ki as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let dst = ((ni * c + ci) * h + si as usize) * w;
                        let src = base + (ni * h + i) * w;
                        for j in 0..w {
                            let sj = j as isize + kj as isize - pad as isize;
                            if sj >= 0 && sj < w as isize {
                                out[dst + sj as usize] += cs[src + j];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out).expect("col2im shape")
}

fn conv2d_forward<T: Real>(x: &ArrayD<T>, w: &ArrayD<T>, pad: usize) -> ArrayD<T> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be [n,c,h,w]");
    assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
    let (n, h, wd) = (xs[0], xs[2], xs[3]);
    let (o, c, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(h + 2 * pad + 1, h + k, "only 'same' convolutions are supported");
    let cols = im2col(x, k, pad);
    let w2 = w.view().into_shape_with_order((o, c * k * k)).expect("weight rows");
    let y2 = w2.dot(&cols);
    from_channel_major(y2, &[n, o, h, wd])
}

/// Squeeze: each 2x2 spatial block becomes 4 channels; output channel
/// `4 * c + 2 * di + dj` holds input channel `c` at offset `(di, dj)`.
pub fn space_to_depth<T: Real>(x: &ArrayD<T>) -> ArrayD<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let v = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[n, c, h / 2, 2, w / 2, 2]))
        .expect("even spatial dims");
    v.permuted_axes(IxDyn(&[0, 1, 3, 5, 2, 4]))
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[n, c * 4, h / 2, w / 2]))
        .expect("squeeze")
}

pub fn depth_to_space<T: Real>(x: &ArrayD<T>) -> ArrayD<T> {
    let s = x.shape();
    let (n, c4, h, w) = (s[0], s[1], s[2], s[3]);
    let c = c4 / 4;
    let v = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[n, c, 2, 2, h, w]))
        .expect("channels divisible by 4");
    v.permuted_axes(IxDyn(&[0, 1, 4, 2, 5, 3]))
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[n, c, h * 2, w * 2]))
        .expect("unsqueeze")
}

impl<'t, T: Real> ops::Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, o: Self) -> Self::Output {
        Var::add(self, o)
    }
}

impl<'t, T: Real> ops::Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, o: Self) -> Self::Output {
        Var::sub(self, o)
    }
}

impl<'t, T: Real> ops::Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, o: Self) -> Self::Output {
        Var::mul(self, o)
    }
}

impl<'t, T: Real> ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}
