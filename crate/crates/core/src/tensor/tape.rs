use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Backward rule of a user-defined op: receives the input values and the
/// upstream gradient, returns one optional gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

enum Op<T: Real> {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    UpsampleNearest { x: usize, factor: usize },
    ResizeNearest { x: usize, oh: usize, ow: usize },
    AvgPool2 { x: usize },
    GridSample { x: usize, flow: usize },
    ConcatChannels { parts: Vec<(usize, usize)> },
    SliceChannels { x: usize, start: usize },
    StackBatch { parts: Vec<(usize, usize)> },
    SliceBatch { x: usize, start: usize },
    RepeatBatch { x: usize, times: usize },
    LeakyRelu { x: usize, slope: T },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulChannels { x: usize, w: usize },
    Scale { x: usize, s: T },
    AddScalar { x: usize },
    Abs { x: usize },
    Sqrt { x: usize },
    Ln { x: usize },
    Square { x: usize },
    Clamp { x: usize, lo: T, hi: T },
    Sum { x: usize },
    WeightedSetMean { xs: Vec<usize>, ws: Vec<usize> },
    ViewMean { x: usize, w: Option<usize>, views: usize },
    ChannelNormalize { x: usize, norms: Vec<T> },
    Custom { inputs: Vec<usize>, backward: CustomBackward<T> },
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation graph for one forward pass.
///
/// Nodes are appended in evaluation order, so [`Tape::backward`] can walk
/// them in reverse without a topological sort.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input: gradients are accumulated for it.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn check_same_tape(&self, vars: &[Var<'_, T>]) {
        for v in vars {
            assert!(std::ptr::eq(self, v.tape), "vars from different tapes mixed");
        }
    }

    /// Records a user-defined op whose forward value was computed outside the tape.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t, T>], value: Tensor<T>, backward: CustomBackward<T>) -> Var<'t, T> {
        self.check_same_tape(inputs);
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.needs(&ids);
        self.push(value, Op::Custom { inputs: ids, backward }, rg)
    }

    /// Mean of `xs[i] * ws[i]` over the set, divided by the set size.
    ///
    /// `xs` are `[N, C, H, W]`, `ws` are `[N, 1, H, W]` and broadcast over channels.
    pub fn weighted_set_mean<'t>(&'t self, xs: &[Var<'t, T>], ws: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if xs.is_empty() {
            return Err(Error::EmptySet("weighted_set_mean"));
        }
        if xs.len() != ws.len() {
            return Err(Error::contract("weighted_set_mean", format!("{} features vs {} weights", xs.len(), ws.len())));
        }
        self.check_same_tape(xs);
        self.check_same_tape(ws);
        let first = self.value(xs[0].id);
        let [n, c, h, w] = first.dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(xs.len()).unwrap();
        let mut out = vec![T::zero(); n * c * hw];
        for (x, wt) in xs.iter().zip(ws) {
            let xv = self.value(x.id);
            let wv = self.value(wt.id);
            if xv.shape() != first.shape() || wv.shape() != [n, 1, h, w] {
                return Err(Error::contract(
                    "weighted_set_mean",
                    format!("feature {:?} / weight {:?} vs {:?}", xv.shape(), wv.shape(), first.shape()),
                ));
            }
            for b in 0..n {
                let wrow = &wv.data()[b * hw..(b + 1) * hw];
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let xs = &xv.data()[base..base + hw];
                    for ((o, &xi), &wi) in out[base..base + hw].iter_mut().zip(xs).zip(wrow) {
                        *o += wi * xi;
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let ids: Vec<usize> = xs.iter().chain(ws).map(|v| v.id).collect();
        let rg = self.needs(&ids);
        let op = Op::WeightedSetMean { xs: xs.iter().map(|v| v.id).collect(), ws: ws.iter().map(|v| v.id).collect() };
        Ok(self.push(Tensor::new(first.shape().to_vec(), out)?, op, rg))
    }

    /// Concatenates along the channel axis in argument order.
    pub fn concat_channels<'t>(&'t self, xs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = xs.first().ok_or(Error::EmptySet("concat_channels"))?;
        self.check_same_tape(xs);
        let [n, _, h, w] = first.value().dims4()?;
        let hw = h * w;
        let mut parts = Vec::with_capacity(xs.len());
        let mut total = 0;
        for x in xs {
            let [xn, xc, xh, xw] = x.value().dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::contract(
                    "concat_channels",
                    format!("{:?} does not match batch/spatial dims of {:?}", x.shape(), first.shape()),
                ));
            }
            parts.push((x.id, xc));
            total += xc;
        }
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for x in xs {
                let v = x.value();
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        let rg = self.needs(&ids);
        Ok(self.push(Tensor::new(vec![n, total, h, w], out)?, Op::ConcatChannels { parts }, rg))
    }

    /// Concatenates along the batch axis.
    pub fn stack_batch<'t>(&'t self, xs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        self.check_same_tape(xs);
        let values: Vec<Rc<Tensor<T>>> = xs.iter().map(|x| x.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::stack_batch(&refs)?;
        let parts = xs.iter().zip(&values).map(|(x, v)| (x.id, v.shape()[0])).collect();
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        let rg = self.needs(&ids);
        Ok(self.push(out, Op::StackBatch { parts }, rg))
    }

    /// Backpropagates from a scalar (single-element) output.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract("backward", format!("loss must be scalar, got {:?}", nodes[loss.id].value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Adds `delta` into the gradient slot of `id`, allocating it on first use.
fn accum<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Tensor<T>>], id: usize) -> Option<&'g mut [T]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[id].value.shape().to_vec()));
    }
    slot.as_mut().map(|t| t.data_mut())
}

fn add_into<T: Real>(dst: Option<&mut [T]>, src: impl Iterator<Item = T>) {
    if let Some(dst) = dst {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

fn backward_node<T: Real>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let out = &nodes[id].value;
    let gd = g.data();
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            // Borrow three distinct slots at once by taking them out.
            let mut gx = take_slot(nodes, grads, *x);
            let mut gw = take_slot(nodes, grads, *w);
            let mut gb = take_slot(nodes, grads, *b);
            kernels::conv2d_backward(
                geom,
                val(*x).data(),
                val(*w).data(),
                gd,
                gx.as_mut().map(|t| t.data_mut()),
                gw.as_mut().map(|t| t.data_mut()),
                gb.as_mut().map(|t| t.data_mut()),
            );
            put_slot(grads, *x, gx);
            put_slot(grads, *w, gw);
            put_slot(grads, *b, gb);
        }
        Op::UpsampleNearest { x, factor } => {
            let dims = val(*x).dims4().unwrap();
            if let Some(gx) = accum(nodes, grads, *x) {
                kernels::upsample_nearest_backward(gd, dims, *factor, gx);
            }
        }
        Op::ResizeNearest { x, oh, ow } => {
            let dims = val(*x).dims4().unwrap();
            if let Some(gx) = accum(nodes, grads, *x) {
                kernels::resize_nearest_backward(gd, dims, *oh, *ow, gx);
            }
        }
        Op::AvgPool2 { x } => {
            let dims = val(*x).dims4().unwrap();
            if let Some(gx) = accum(nodes, grads, *x) {
                kernels::avg_pool2_backward(gd, dims, gx);
            }
        }
        Op::GridSample { x, flow } => {
            let dims = val(*x).dims4().unwrap();
            let mut gx = take_slot(nodes, grads, *x);
            let mut gf = take_slot(nodes, grads, *flow);
            kernels::grid_sample_backward(
                val(*x).data(),
                val(*flow).data(),
                dims,
                gd,
                gx.as_mut().map(|t| t.data_mut()),
                gf.as_mut().map(|t| t.data_mut()),
            );
            put_slot(grads, *x, gx);
            put_slot(grads, *flow, gf);
        }
        Op::ConcatChannels { parts } => {
            let [n, total, h, w] = out.dims4().unwrap();
            let hw = h * w;
            let mut offset = 0;
            for &(pid, c) in parts {
                if let Some(gp) = accum(nodes, grads, pid) {
                    for b in 0..n {
                        let src = &gd[(b * total + offset) * hw..(b * total + offset + c) * hw];
                        for (d, s) in gp[b * c * hw..(b + 1) * c * hw].iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
                offset += c;
            }
        }
        Op::SliceChannels { x, start } => {
            let [n, c, h, w] = val(*x).dims4().unwrap();
            let len = out.shape()[1];
            let hw = h * w;
            if let Some(gx) = accum(nodes, grads, *x) {
                for b in 0..n {
                    let dst = &mut gx[(b * c + start) * hw..(b * c + start + len) * hw];
                    for (d, s) in dst.iter_mut().zip(&gd[b * len * hw..(b + 1) * len * hw]) {
                        *d += *s;
                    }
                }
            }
        }
        Op::StackBatch { parts } => {
            let plane: usize = out.shape()[1..].iter().product();
            let mut offset = 0;
            for &(pid, n) in parts {
                add_into(accum(nodes, grads, pid), gd[offset * plane..(offset + n) * plane].iter().copied());
                offset += n;
            }
        }
        Op::SliceBatch { x, start } => {
            let plane: usize = out.shape()[1..].iter().product();
            if let Some(gx) = accum(nodes, grads, *x) {
                for (d, s) in gx[start * plane..start * plane + gd.len()].iter_mut().zip(gd) {
                    *d += *s;
                }
            }
        }
        Op::RepeatBatch { x, times } => {
            let plane: usize = out.shape()[1..].iter().product();
            if let Some(gx) = accum(nodes, grads, *x) {
                for (i, chunk) in gd.chunks(plane).enumerate() {
                    let b = i / times;
                    for (d, s) in gx[b * plane..(b + 1) * plane].iter_mut().zip(chunk) {
                        *d += *s;
                    }
                }
            }
        }
        Op::LeakyRelu { x, slope } => {
            let xv = val(*x).data();
            add_into(
                accum(nodes, grads, *x),
                gd.iter().zip(xv).map(|(&g, &v)| if v > T::zero() { g } else { g * *slope }),
            );
        }
        Op::Sigmoid { x } => {
            let y = out.data();
            add_into(accum(nodes, grads, *x), gd.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)));
        }
        Op::Tanh { x } => {
            let y = out.data();
            add_into(accum(nodes, grads, *x), gd.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)));
        }
        Op::Add { a, b } => {
            add_into(accum(nodes, grads, *a), gd.iter().copied());
            add_into(accum(nodes, grads, *b), gd.iter().copied());
        }
        Op::Sub { a, b } => {
            add_into(accum(nodes, grads, *a), gd.iter().copied());
            add_into(accum(nodes, grads, *b), gd.iter().map(|&v| -v));
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            add_into(accum(nodes, grads, *a), gd.iter().zip(bv).map(|(&g, &v)| g * v));
            add_into(accum(nodes, grads, *b), gd.iter().zip(av).map(|(&g, &v)| g * v));
        }
        Op::MulChannels { x, w } => {
            let [n, c, h, wd] = val(*x).dims4().unwrap();
            let hw = h * wd;
            let (xv, wv) = (val(*x).data(), val(*w).data());
            if let Some(gx) = accum(nodes, grads, *x) {
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for p in 0..hw {
                            gx[base + p] += gd[base + p] * wv[b * hw + p];
                        }
                    }
                }
            }
            if let Some(gw) = accum(nodes, grads, *w) {
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for p in 0..hw {
                            gw[b * hw + p] += gd[base + p] * xv[base + p];
                        }
                    }
                }
            }
        }
        Op::Scale { x, s } => add_into(accum(nodes, grads, *x), gd.iter().map(|&v| v * *s)),
        Op::AddScalar { x } => add_into(accum(nodes, grads, *x), gd.iter().copied()),
        Op::Abs { x } => {
            let xv = val(*x).data();
            add_into(
                accum(nodes, grads, *x),
                gd.iter().zip(xv).map(|(&g, &v)| {
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
            );
        }
        Op::Sqrt { x } => {
            let y = out.data();
            let two = T::from_f64c(2.0);
            // d sqrt(x) at x = 0 is taken as 0 so that a zero spread has a zero gradient.
            add_into(
                accum(nodes, grads, *x),
                gd.iter().zip(y).map(|(&g, &s)| if s > T::zero() { g / (two * s) } else { T::zero() }),
            );
        }
        Op::Ln { x } => {
            let xv = val(*x).data();
            add_into(accum(nodes, grads, *x), gd.iter().zip(xv).map(|(&g, &v)| g / v));
        }
        Op::Square { x } => {
            let xv = val(*x).data();
            let two = T::from_f64c(2.0);
            add_into(accum(nodes, grads, *x), gd.iter().zip(xv).map(|(&g, &v)| g * two * v));
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x).data();
            add_into(
                accum(nodes, grads, *x),
                gd.iter().zip(xv).map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() }),
            );
        }
        Op::Sum { x } => {
            let g0 = gd[0];
            add_into(accum(nodes, grads, *x), std::iter::repeat(g0));
        }
        Op::WeightedSetMean { xs, ws } => {
            let [n, c, h, w] = out.dims4().unwrap();
            let hw = h * w;
            let inv = T::one() / T::from_usize(xs.len()).unwrap();
            for (&xi, &wi) in xs.iter().zip(ws) {
                let (xv, wv) = (val(xi).data(), val(wi).data());
                if let Some(gx) = accum(nodes, grads, xi) {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for p in 0..hw {
                                gx[base + p] += gd[base + p] * wv[b * hw + p] * inv;
                            }
                        }
                    }
                }
                if let Some(gw) = accum(nodes, grads, wi) {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for p in 0..hw {
                                gw[b * hw + p] += gd[base + p] * xv[base + p] * inv;
                            }
                        }
                    }
                }
            }
        }
        Op::ViewMean { x, w, views } => {
            let [bn, c, h, wd] = val(*x).dims4().unwrap();
            let hw = h * wd;
            let inv = T::one() / T::from_usize(*views).unwrap();
            let xv = val(*x).data();
            let wv = w.map(|w| val(w).data());
            if let Some(gx) = accum(nodes, grads, *x) {
                for i in 0..bn {
                    let b = i / views;
                    for ch in 0..c {
                        let src = (i * c + ch) * hw;
                        let dst = (b * c + ch) * hw;
                        for p in 0..hw {
                            let wt = wv.map_or(T::one(), |wv| wv[i * hw + p]);
                            gx[src + p] += gd[dst + p] * wt * inv;
                        }
                    }
                }
            }
            if let Some(wid) = w {
                if let Some(gw) = accum(nodes, grads, *wid) {
                    for i in 0..bn {
                        let b = i / views;
                        for ch in 0..c {
                            let src = (i * c + ch) * hw;
                            let dst = (b * c + ch) * hw;
                            for p in 0..hw {
                                gw[i * hw + p] += gd[dst + p] * xv[src + p] * inv;
                            }
                        }
                    }
                }
            }
        }
        Op::ChannelNormalize { x, norms } => {
            let dims = val(*x).dims4().unwrap();
            if let Some(gx) = accum(nodes, grads, *x) {
                kernels::channel_normalize_backward(out.data(), norms, dims, gd, gx);
            }
        }
        Op::Custom { inputs, backward } => {
            let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            let input_grads = backward(&values, g);
            for (&i, gi) in inputs.iter().zip(input_grads) {
                if let Some(gi) = gi {
                    add_into(accum(nodes, grads, i), gi.data().iter().copied());
                }
            }
        }
    }
}

fn take_slot<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize) -> Option<Tensor<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].take().unwrap_or_else(|| Tensor::zeros(nodes[id].value.shape().to_vec())))
}

fn put_slot<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, g: Option<Tensor<T>>) {
    if g.is_some() {
        grads[id] = g;
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes mixed");
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let v = self.value().map(f);
        let rg = self.requires_grad();
        self.tape.push(v, op, rg)
    }

    fn binary(&self, other: &Var<'t, T>, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        self.same(other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::contract(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(Tensor::new(a.shape().to_vec(), data)?, op, rg))
    }

    /// 2-D cross-correlation with bias; `w` is `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&self, w: &Var<'t, T>, b: &Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.same(w);
        self.same(b);
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let geom = ConvGeom::new(xv.shape(), wv.shape(), bv.shape(), stride, pad)?;
        let out = kernels::conv2d_forward(&geom, xv.data(), wv.data(), bv.data());
        let rg = self.tape.needs(&[self.id, w.id, b.id]);
        let t = Tensor::new(vec![geom.n, geom.cout, geom.oh, geom.ow], out)?;
        Ok(self.tape.push(t, Op::Conv2d { x: self.id, w: w.id, b: b.id, geom }, rg))
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'t, T>> {
        if factor < 1 {
            return Err(Error::contract("upsample_nearest", "factor must be >= 1"));
        }
        let xv = self.value();
        let dims = xv.dims4()?;
        let out = kernels::upsample_nearest_forward(xv.data(), dims, factor);
        let t = Tensor::new(vec![dims[0], dims[1], dims[2] * factor, dims[3] * factor], out)?;
        Ok(self.tape.push(t, Op::UpsampleNearest { x: self.id, factor }, self.requires_grad()))
    }

    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Result<Var<'t, T>> {
        if oh == 0 || ow == 0 {
            return Err(Error::contract("resize_nearest", "output size must be >= 1"));
        }
        let xv = self.value();
        let dims = xv.dims4()?;
        if (dims[2], dims[3]) == (oh, ow) {
            return Ok(*self);
        }
        let out = kernels::resize_nearest_forward(xv.data(), dims, oh, ow);
        let t = Tensor::new(vec![dims[0], dims[1], oh, ow], out)?;
        Ok(self.tape.push(t, Op::ResizeNearest { x: self.id, oh, ow }, self.requires_grad()))
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let dims = xv.dims4()?;
        if dims[2] % 2 != 0 || dims[3] % 2 != 0 {
            return Err(Error::Config(format!("avg_pool2 needs even spatial dims, got {}x{}", dims[2], dims[3])));
        }
        let out = kernels::avg_pool2_forward(xv.data(), dims);
        let t = Tensor::new(vec![dims[0], dims[1], dims[2] / 2, dims[3] / 2], out)?;
        Ok(self.tape.push(t, Op::AvgPool2 { x: self.id }, self.requires_grad()))
    }

    /// Bilinear warp by a pixel-offset flow field `[N, 2, H, W]` (x offset, y offset).
    pub fn grid_sample(&self, flow: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same(flow);
        let (xv, fv) = (self.value(), flow.value());
        let dims = xv.dims4()?;
        if fv.shape() != [dims[0], 2, dims[2], dims[3]] {
            return Err(Error::contract("grid_sample", format!("flow {:?} for input {:?}", fv.shape(), xv.shape())));
        }
        let out = kernels::grid_sample_forward(xv.data(), fv.data(), dims);
        let rg = self.tape.needs(&[self.id, flow.id]);
        Ok(self.tape.push(Tensor::new(dims.to_vec(), out)?, Op::GridSample { x: self.id, flow: flow.id }, rg))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let [n, c, h, w] = xv.dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::contract("slice_channels", format!("{start}+{len} of {c} channels")));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&xv.data()[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let t = Tensor::new(vec![n, len, h, w], out)?;
        Ok(self.tape.push(t, Op::SliceChannels { x: self.id, start }, self.requires_grad()))
    }

    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let t = self.value().batch_slice(start, len)?;
        Ok(self.tape.push(t, Op::SliceBatch { x: self.id, start }, self.requires_grad()))
    }

    /// Repeats every batch item `times` times consecutively.
    pub fn repeat_batch(&self, times: usize) -> Result<Var<'t, T>> {
        if times == 0 {
            return Err(Error::contract("repeat_batch", "times must be >= 1"));
        }
        let xv = self.value();
        let mut shape = xv.shape().to_vec();
        let plane: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(xv.numel() * times);
        for chunk in xv.data().chunks(plane) {
            for _ in 0..times {
                out.extend_from_slice(chunk);
            }
        }
        shape[0] *= times;
        Ok(self.tape.push(Tensor::new(shape, out)?, Op::RepeatBatch { x: self.id, times }, self.requires_grad()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::contract("leaky_relu", format!("slope {slope} outside [0, 1)")));
        }
        let s = T::from_f64c(slope);
        Ok(self.unary(Op::LeakyRelu { x: self.id, slope: s }, |v| if v > T::zero() { v } else { v * s }))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(Op::Sigmoid { x: self.id }, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(Op::Tanh { x: self.id }, |v| v.tanh())
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add { a: self.id, b: other.id }, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub { a: self.id, b: other.id }, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul { a: self.id, b: other.id }, |a, b| a * b)
    }

    /// Multiplies `[N, C, H, W]` by a per-pixel `[N, 1, H, W]` factor.
    pub fn mul_channels(&self, w: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same(w);
        let (xv, wv) = (self.value(), w.value());
        let [n, c, h, wd] = xv.dims4()?;
        if wv.shape() != [n, 1, h, wd] {
            return Err(Error::contract("mul_channels", format!("{:?} by {:?}", xv.shape(), wv.shape())));
        }
        let hw = h * wd;
        let mut out = xv.data().to_vec();
        for b in 0..n {
            let wrow = &wv.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for (o, &wi) in out[base..base + hw].iter_mut().zip(wrow) {
                    *o *= wi;
                }
            }
        }
        let rg = self.tape.needs(&[self.id, w.id]);
        Ok(self.tape.push(Tensor::new(xv.shape().to_vec(), out)?, Op::MulChannels { x: self.id, w: w.id }, rg))
    }

    pub fn scale(&self, s: f64) -> Var<'t, T> {
        let s = T::from_f64c(s);
        self.unary(Op::Scale { x: self.id, s }, |v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t, T> {
        let s = T::from_f64c(s);
        self.unary(Op::AddScalar { x: self.id }, |v| v + s)
    }

    pub fn abs(&self) -> Var<'t, T> {
        self.unary(Op::Abs { x: self.id }, |v| v.abs())
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        self.unary(Op::Sqrt { x: self.id }, |v| v.sqrt())
    }

    pub fn ln(&self) -> Var<'t, T> {
        self.unary(Op::Ln { x: self.id }, |v| v.ln())
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(Op::Square { x: self.id }, |v| v * v)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::from_f64c(lo), T::from_f64c(hi));
        self.unary(Op::Clamp { x: self.id, lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum { x: self.id }, self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Averages groups of `views` consecutive batch items, optionally weighting
    /// each by a `[N, 1, H, W]` map. The divisor is always `views`.
    pub fn view_mean(&self, weights: Option<&Var<'t, T>>, views: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let [bn, c, h, w] = xv.dims4()?;
        if views == 0 {
            return Err(Error::EmptySet("view_mean"));
        }
        if bn % views != 0 {
            return Err(Error::contract("view_mean", format!("batch {bn} not a multiple of {views} views")));
        }
        let hw = h * w;
        let wv = match weights {
            Some(wt) => {
                self.same(wt);
                let wv = wt.value();
                if wv.shape() != [bn, 1, h, w] {
                    return Err(Error::contract("view_mean", format!("weights {:?} for {:?}", wv.shape(), xv.shape())));
                }
                Some(wv)
            }
            None => None,
        };
        let inv = T::one() / T::from_usize(views).unwrap();
        let mut out = vec![T::zero(); bn / views * c * hw];
        for i in 0..bn {
            let b = i / views;
            for ch in 0..c {
                let src = &xv.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                let dst = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                match &wv {
                    Some(wv) => {
                        let wrow = &wv.data()[i * hw..(i + 1) * hw];
                        for ((d, &s), &wi) in dst.iter_mut().zip(src).zip(wrow) {
                            *d += wi * s;
                        }
                    }
                    None => {
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut ids = vec![self.id];
        ids.extend(weights.map(|w| w.id));
        let rg = self.tape.needs(&ids);
        let t = Tensor::new(vec![bn / views, c, h, w], out)?;
        Ok(self.tape.push(t, Op::ViewMean { x: self.id, w: weights.map(|w| w.id), views }, rg))
    }

    pub fn channel_normalize(&self, eps: f64) -> Result<Var<'t, T>> {
        let xv = self.value();
        let dims = xv.dims4()?;
        let (out, norms) = kernels::channel_normalize_forward(xv.data(), dims, T::from_f64c(eps));
        let t = Tensor::new(dims.to_vec(), out)?;
        Ok(self.tape.push(t, Op::ChannelNormalize { x: self.id, norms }, self.requires_grad()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = tape.leaf(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.value().data(), &[2.0; 9]);

        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(Tensor::full(vec![1, 1, 2, 2], 1.0));
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.value().data(), &[10.0]);
    }

    #[test]
    fn upsample_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 1, 1], &[5.0]));
        assert_eq!(x.upsample_nearest(1).unwrap().value().data(), &[5.0]);
        let y = x.upsample_nearest(2).unwrap();
        assert_eq!(y.value().data(), &[5.0; 4]);
        let grads = tape.backward(y.sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
        assert!(x.upsample_nearest(0).is_err());
    }

    #[test]
    fn resize_examples() {
        let tape = Tape::<f64>::new();
        let board: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64 + 10.0 * i as f64).collect();
        let x = tape.constant(t(&[1, 1, 4, 4], &board));
        assert_eq!(x.resize_nearest(4, 4).unwrap().value().data(), &board[..]);
        let y = x.resize_nearest(2, 2).unwrap();
        // top-left sample of each 2x2 cell
        let expect: Vec<f64> = [0, 2, 8, 10].iter().map(|&i| board[i]).collect();
        assert_eq!(y.value().data(), &expect[..]);
        let one = tape.constant(t(&[1, 1, 1, 1], &[3.0]));
        assert_eq!(one.resize_nearest(3, 3).unwrap().value().data(), &[3.0; 9]);
    }

    #[test]
    fn concat_routes_gradients() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[1, 2, 1, 2], &[3.0, 4.0, 5.0, 6.0]));
        let single = tape.concat_channels(&[a]).unwrap();
        assert_eq!(single.value().data(), a.value().data());
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let weights = tape.constant(t(&[1, 3, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let grads = tape.backward(c.mul(&weights).unwrap().sum()).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
        let bad = tape.leaf(t(&[1, 1, 2, 1], &[0.0, 0.0]));
        assert!(tape.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn activation_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[-1.0]));
        assert_eq!(x.leaky_relu(0.1).unwrap().value().item(), -0.1);
        assert!(x.leaky_relu(1.0).is_err());
        let z = tape.leaf(t(&[1], &[0.0]));
        assert_eq!(z.sigmoid().value().item(), 0.5);
    }

    #[test]
    fn weighted_set_mean_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[1, 2, 1, 1], &[1.0, 2.0]));
        let b = tape.leaf(t(&[1, 2, 1, 1], &[3.0, 6.0]));
        let one = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let zero = tape.constant(t(&[1, 1, 1, 1], &[0.0]));
        assert_eq!(tape.weighted_set_mean(&[a], &[one]).unwrap().value().data(), &[1.0, 2.0]);
        let ab = tape.weighted_set_mean(&[a, b], &[one, one]).unwrap().value();
        let ba = tape.weighted_set_mean(&[b, a], &[one, one]).unwrap().value();
        assert_eq!(ab.data(), &[2.0, 4.0]);
        assert!(ab.max_abs_diff(&ba) <= 1e-6);
        let half = tape.weighted_set_mean(&[a, b], &[one, zero]).unwrap().value();
        assert_eq!(half.data(), &[0.5, 1.0]);
        assert!(matches!(tape.weighted_set_mean(&[], &[]), Err(Error::EmptySet(_))));
    }

    #[test]
    fn view_mean_matches_list_form() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[1, 1, 1, 2], &[5.0, 7.0]));
        let wa = tape.leaf(t(&[1, 1, 1, 2], &[0.5, 1.0]));
        let wb = tape.leaf(t(&[1, 1, 1, 2], &[0.25, 0.0]));
        let list = tape.weighted_set_mean(&[a, b], &[wa, wb]).unwrap();
        let stacked = tape.stack_batch(&[a, b]).unwrap();
        let wstacked = tape.stack_batch(&[wa, wb]).unwrap();
        let vm = stacked.view_mean(Some(&wstacked), 2).unwrap();
        assert_eq!(list.value().data(), vm.value().data());
    }

    #[test]
    fn sqrt_gradient_at_zero_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.0, 4.0]));
        let grads = tape.backward(x.sqrt().sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.25]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let grads = tape.backward(x.mul(&c).unwrap().sum()).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    }
}
