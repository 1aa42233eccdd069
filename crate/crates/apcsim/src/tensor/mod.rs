//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Tensors are immutable row-major arrays. A tensor is either detached
//! (plain data, no gradient tracking) or attached to a [`Tape`]. Operations
//! on attached tensors record a backward rule; [`Tensor::backward`] replays
//! the tape in reverse topological order and returns a [`Gradients`] store
//! holding d(loss)/d(node) for every reachable node, leaves included.
//!
//! The tape is confined to one thread; detached evaluation is pure and may
//! be sharded freely.

mod linalg;
mod loss;

pub use linalg::{conv2d, conv_out_dims, im2col};

use crate::error::{Error, Result};
use crate::num::Element;
use rand::Rng;
use std::cell::RefCell;
use std::rc::Rc;

type BackFn<T> = Box<dyn Fn(&[T], &mut Gradients<T>)>;

struct Node<T: Element> {
    back: Option<BackFn<T>>,
    #[allow(dead_code)]
    len: usize,
}

pub(crate) struct TapeInner<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> TapeInner<T> {
    fn push(&self, len: usize, back: Option<BackFn<T>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { back, len });
        nodes.len() - 1
    }
}

/// Records the computation graph for one differentiation pass.
pub struct Tape<T: Element> {
    inner: Rc<TapeInner<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
            }),
        }
    }

    /// Creates a differentiable leaf (a tensor with `requires_grad`).
    pub fn leaf(&self, data: Vec<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
        check_shape(&data, &shape)?;
        let node = self.inner.push(data.len(), None);
        Ok(Tensor {
            data: Rc::new(data),
            shape,
            node: Some(node),
            tape: Some(self.inner.clone()),
        })
    }

    /// Attaches an existing detached tensor as a leaf on this tape.
    pub fn watch(&self, t: &Tensor<T>) -> Tensor<T> {
        let node = self.inner.push(t.numel(), None);
        Tensor {
            data: t.data.clone(),
            shape: t.shape.clone(),
            node: Some(node),
            tape: Some(self.inner.clone()),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.nodes.borrow().len()
    }
}

/// Accumulated gradients, indexed by tape node.
pub struct Gradients<T: Element> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    fn new(n: usize) -> Self {
        Gradients {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    pub(crate) fn slot_mut(&mut self, id: usize, len: usize) -> &mut [T] {
        if self.slots[id].is_none() {
            self.slots[id] = Some(vec![T::zero(); len]);
        }
        self.slots[id].as_mut().unwrap()
    }

    /// Gradient of the loss with respect to `t`, if `t` participated.
    pub fn wrt(&self, t: &Tensor<T>) -> Option<&[T]> {
        t.node.and_then(|id| self.slots[id].as_deref())
    }
}

/// Dense n-dimensional array, row-major, optionally on a tape.
pub struct Tensor<T: Element> {
    pub(crate) data: Rc<Vec<T>>,
    pub(crate) shape: Vec<usize>,
    pub(crate) node: Option<usize>,
    pub(crate) tape: Option<Rc<TapeInner<T>>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            data: self.data.clone(),
            shape: self.shape.clone(),
            node: self.node,
            tape: self.tape.clone(),
        }
    }
}

impl<T: Element> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("attached", &self.node.is_some())
            .finish()
    }
}

fn check_shape<T>(data: &[T], shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if data.len() != n {
        return Err(Error::contract(format!(
            "data length {} does not match shape {:?} (numel {})",
            data.len(),
            shape,
            n
        )));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: Vec<usize>) -> Result<Self> {
        check_shape(&data, &shape)?;
        Ok(Tensor {
            data: Rc::new(data),
            shape,
            node: None,
            tape: None,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            data: Rc::new(vec![v]),
            shape: vec![],
            node: None,
            tape: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            data: Rc::new(vec![T::zero(); n]),
            shape,
            node: None,
            tape: None,
        }
    }

    pub fn filled(v: T, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            data: Rc::new(vec![v; n]),
            shape,
            node: None,
            tape: None,
        }
    }

    pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::standard_normal(rng)).collect();
        Tensor {
            data: Rc::new(data),
            shape,
            node: None,
            tape: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Drops the tape connection; the values are kept.
    pub fn detach(&self) -> Tensor<T> {
        Tensor {
            data: self.data.clone(),
            shape: self.shape.clone(),
            node: None,
            tape: None,
        }
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    fn result(
        tape: Option<Rc<TapeInner<T>>>,
        data: Vec<T>,
        shape: Vec<usize>,
        back: impl FnOnce() -> BackFn<T>,
    ) -> Tensor<T> {
        match tape {
            None => Tensor {
                data: Rc::new(data),
                shape,
                node: None,
                tape: None,
            },
            Some(tape) => {
                let node = tape.push(data.len(), Some(back()));
                Tensor {
                    data: Rc::new(data),
                    shape,
                    node: Some(node),
                    tape: Some(tape),
                }
            }
        }
    }

    /// Runs reverse-mode differentiation from this scalar.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        let (tape, node) = match (&self.tape, self.node) {
            (Some(t), Some(n)) => (t, n),
            _ => {
                return Err(Error::contract(
                    "backward on a tensor that is not attached to a tape",
                ))
            }
        };
        let nodes = tape.nodes.borrow();
        let mut grads = Gradients::new(nodes.len());
        grads.slot_mut(node, 1)[0] = T::one();
        // Node ids are a topological order by construction, so one reverse
        // sweep visits each node exactly once.
        for id in (0..=node).rev() {
            if grads.slots[id].is_none() {
                continue;
            }
            if let Some(back) = &nodes[id].back {
                let gout = grads.slots[id].take().unwrap();
                back(&gout, &mut grads);
                grads.slots[id] = Some(gout);
            }
        }
        Ok(grads)
    }
}

// ---------------------------------------------------------------------------
// Broadcasting machinery
// ---------------------------------------------------------------------------

pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for d in 0..nd {
        let ea = if d < nd - a.len() { 1 } else { a[d - (nd - a.len())] };
        let eb = if d < nd - b.len() { 1 } else { b[d - (nd - b.len())] };
        out[d] = if ea == eb || eb == 1 {
            ea
        } else if ea == 1 {
            eb
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Row-major strides of `shape` viewed as `out`, with 0 on broadcast axes.
pub(crate) fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        let od = nd - shape.len() + d;
        strides[od] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every element of `out_shape` with the flat offsets into the two
/// broadcast inputs.
pub(crate) fn for_each_bcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    let nd = out_shape.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
}

fn merged_tape<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Option<Rc<TapeInner<T>>>> {
    match (&a.tape, &b.tape) {
        (None, None) => Ok(None),
        (Some(t), None) | (None, Some(t)) => Ok(Some(t.clone())),
        (Some(ta), Some(tb)) => {
            if Rc::ptr_eq(ta, tb) {
                Ok(Some(ta.clone()))
            } else {
                Err(Error::contract("operands belong to different tapes"))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

impl<T: Element> Tensor<T> {
    fn binary_map(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        fwd: impl Fn(T, T) -> T,
        ga: impl Fn(T, T, T) -> T + 'static,
        gb: impl Fn(T, T, T) -> T + 'static,
    ) -> Result<Tensor<T>> {
        let out_shape = broadcast_shape(op, &self.shape, &other.shape)?;
        let sa = bcast_strides(&self.shape, &out_shape);
        let sb = bcast_strides(&other.shape, &out_shape);
        let n: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); n];
        let same = self.shape == other.shape;
        if same {
            for i in 0..n {
                out[i] = fwd(self.data[i], other.data[i]);
            }
        } else {
            for_each_bcast(&out_shape, &sa, &sb, |o, ia, ib| {
                out[o] = fwd(self.data[ia], other.data[ib]);
            });
        }
        let tape = merged_tape(self, other)?;
        let (na, nb) = (self.node, other.node);
        let (adata, bdata) = (self.data.clone(), other.data.clone());
        let (alen, blen) = (self.numel(), other.numel());
        let oshape = out_shape.clone();
        Ok(Tensor::result(tape, out, out_shape, move || {
            Box::new(move |gout, grads| {
                if let Some(na) = na {
                    let slot = grads.slot_mut(na, alen);
                    for_each_bcast(&oshape, &sa, &sb, |o, ia, ib| {
                        slot[ia] += ga(adata[ia], bdata[ib], gout[o]);
                    });
                }
                if let Some(nb) = nb {
                    let slot = grads.slot_mut(nb, blen);
                    for_each_bcast(&oshape, &sa, &sb, |o, ia, ib| {
                        slot[ib] += gb(adata[ia], bdata[ib], gout[o]);
                    });
                }
            })
        }))
    }

    fn unary_map(
        &self,
        fwd: impl Fn(T) -> T,
        // back(x, y, gout) -> grad contribution for x
        back: impl Fn(T, T, T) -> T + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = self.data.iter().map(|&x| fwd(x)).collect();
        let tape = self.tape.clone();
        let node = self.node;
        let xdata = self.data.clone();
        let ydata = Rc::new(out.clone());
        let len = self.numel();
        Tensor::result(tape, out, self.shape.clone(), move || {
            Box::new(move |gout, grads| {
                if let Some(node) = node {
                    let slot = grads.slot_mut(node, len);
                    for i in 0..len {
                        slot[i] += back(xdata[i], ydata[i], gout[i]);
                    }
                }
            })
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_map(other, "add", |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_map(other, "sub", |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_map(other, "mul", |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_map(
            other,
            "div",
            |a, b| a / b,
            |_, b, g| g / b,
            |a, b, g| -g * a / (b * b),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary_map(|x| -x, |_, _, g| -g)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary_map(|x| x.exp(), |_, y, g| g * y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary_map(|x| x.ln(), |x, _, g| g / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary_map(|x| x.sqrt(), |_, y, g| g / (T::two() * y))
    }

    pub fn powf(&self, p: T) -> Tensor<T> {
        self.unary_map(|x| x.powf(p), move |x, _, g| g * p * x.powf(p - T::one()))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary_map(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _, g| if x > T::zero() { g } else { T::zero() },
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes on the closed interval.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.unary_map(
            move |x| x.max(lo).min(hi),
            move |x, _, g| {
                if x >= lo && x <= hi {
                    g
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Round half away from zero with a straight-through gradient.
    pub fn ste_round(&self) -> Tensor<T> {
        self.unary_map(|x| x.round(), |_, _, g| g)
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.unary_map(move |x| x * c, move |_, _, g| g * c)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary_map(move |x| x + c, |_, _, g| g)
    }

    pub fn recip(&self) -> Tensor<T> {
        self.unary_map(|x| x.recip(), |_, y, g| -g * y * y)
    }
}

// ---------------------------------------------------------------------------
// Shape operations and reductions
// ---------------------------------------------------------------------------

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        let tape = self.tape.clone();
        let node = self.node;
        let len = self.numel();
        Ok(Tensor::result(
            tape,
            self.data.as_ref().clone(),
            shape,
            move || {
                Box::new(move |gout, grads| {
                    if let Some(node) = node {
                        let slot = grads.slot_mut(node, len);
                        for i in 0..len {
                            slot[i] += gout[i];
                        }
                    }
                })
            },
        ))
    }

    pub fn broadcast_to(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let merged = broadcast_shape("broadcast_to", &self.shape, &shape)?;
        if merged != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        let sa = bcast_strides(&self.shape, &shape);
        let sb = vec![0usize; shape.len()];
        let n: usize = shape.iter().product();
        let mut out = vec![T::zero(); n];
        for_each_bcast(&shape, &sa, &sb, |o, ia, _| out[o] = self.data[ia]);
        let tape = self.tape.clone();
        let node = self.node;
        let len = self.numel();
        let oshape = shape.clone();
        Ok(Tensor::result(tape, out, shape, move || {
            Box::new(move |gout, grads| {
                if let Some(node) = node {
                    let slot = grads.slot_mut(node, len);
                    for_each_bcast(&oshape, &sa, &sb, |o, ia, _| slot[ia] += gout[o]);
                }
            })
        }))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let total: T = self.data.iter().copied().sum();
        let tape = self.tape.clone();
        let node = self.node;
        let len = self.numel();
        Tensor::result(tape, vec![total], vec![], move || {
            Box::new(move |gout, grads| {
                if let Some(node) = node {
                    let slot = grads.slot_mut(node, len);
                    for s in slot.iter_mut() {
                        *s += gout[0];
                    }
                }
            })
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_usize_(self.numel());
        self.sum_all().scale(T::one() / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        if axis >= self.shape.len() {
            return Err(Error::contract(format!(
                "sum_axis: axis {} out of range for shape {:?}",
                axis, self.shape
            )));
        }
        let (outer, mid, inner) = split_axis(&self.shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        let mut out_shape = self.shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let tape = self.tape.clone();
        let node = self.node;
        let len = self.numel();
        Ok(Tensor::result(tape, out, out_shape, move || {
            Box::new(move |gout, grads| {
                if let Some(node) = node {
                    let slot = grads.slot_mut(node, len);
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i in 0..inner {
                                slot[base + i] += gout[o * inner + i];
                            }
                        }
                    }
                }
            })
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let m = T::from_usize_(self.shape[axis]);
        Ok(self.sum_axis(axis, keepdim)?.scale(T::one() / m))
    }

    /// Max along `axis`; gradient routes to the first maximal element.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        if axis >= self.shape.len() {
            return Err(Error::contract(format!(
                "max_axis: axis {} out of range for shape {:?}",
                axis, self.shape
            )));
        }
        let (outer, mid, inner) = split_axis(&self.shape, axis);
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    let v = self.data[base + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = base + i;
                    }
                }
            }
        }
        let mut out_shape = self.shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let tape = self.tape.clone();
        let node = self.node;
        let len = self.numel();
        Ok(Tensor::result(tape, out, out_shape, move || {
            Box::new(move |gout, grads| {
                if let Some(node) = node {
                    let slot = grads.slot_mut(node, len);
                    for (k, &src) in arg.iter().enumerate() {
                        slot[src] += gout[k];
                    }
                }
            })
        }))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape.to_vec()).unwrap()
    }

    #[test]
    fn backward_identity_grad_is_one() {
        let tape = Tape::new();
        let x = tape.leaf(vec![3.0], vec![]).unwrap();
        let grads = x.backward().unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 3.0], vec![3]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        let grads = loss.backward().unwrap();
        let g = grads.wrt(&x).unwrap();
        assert_eq!(g, &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2]).unwrap();
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_add_and_grad_reduction() {
        let tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], vec![2]).unwrap(); // broadcast over rows
        let b = t(&[10.0, 20.0, 30.0, 40.0], &[2, 2]);
        let y = b.add(&a).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 31.0, 42.0]);
        let loss = y.sum_all();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.wrt(&a).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn incompatible_broadcast_is_an_error() {
        let a = t(&[1.0, 2.0, 3.0], &[3]);
        let b = t(&[1.0, 2.0], &[2]);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn ste_round_half_away_from_zero() {
        let x = t(&[2.4, -2.5, 2.5, 3.0, -0.4], &[5]);
        let y = x.ste_round();
        assert_eq!(y.data(), &[2.0, -3.0, 3.0, 3.0, 0.0]);
        // idempotent
        assert_eq!(y.ste_round().data(), y.data());
    }

    #[test]
    fn ste_round_gradient_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(vec![2.4, -2.5, 7.0], vec![3]).unwrap();
        let loss = x.ste_round().sum_all();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn clamp_gradient_masks_outside() {
        let tape = Tape::new();
        let x = tape.leaf(vec![-1.0, 0.5, 2.0], vec![3]).unwrap();
        let loss = x.clamp(0.0, 1.0).sum_all();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sum_and_max_axis() {
        let x = t(&[1.0, 5.0, 2.0, 4.0, 3.0, 6.0], &[2, 3]);
        assert_eq!(x.sum_axis(1, false).unwrap().data(), &[8.0, 13.0]);
        assert_eq!(x.sum_axis(0, false).unwrap().data(), &[5.0, 8.0, 8.0]);
        assert_eq!(x.max_axis(1, false).unwrap().data(), &[5.0, 6.0]);
    }

    #[test]
    fn max_axis_routes_gradient_to_argmax() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 5.0, 2.0, 4.0], vec![2, 2]).unwrap();
        let loss = x.max_axis(1, false).unwrap().sum_all();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn reshape_and_broadcast_roundtrip() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2]).unwrap();
        let y = x
            .reshape(vec![2, 1])
            .unwrap()
            .broadcast_to(vec![2, 3])
            .unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        let grads = y.sum_all().backward().unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn exp_log_sqrt_analytic_grads() {
        let tape = Tape::new();
        let x = tape.leaf(vec![0.7, 1.3], vec![2]).unwrap();
        let y = x.exp().ln().sqrt(); // sqrt(x)
        let grads = y.sum_all().backward().unwrap();
        let g = grads.wrt(&x).unwrap();
        for (i, &xv) in [0.7, 1.3].iter().enumerate() {
            assert_abs_diff_eq!(g[i], 0.5 / f64::sqrt(xv), epsilon = 1e-12);
        }
    }

    #[test]
    fn detached_ops_do_not_grow_tape() {
        let tape: Tape<f64> = Tape::new();
        let _leaf = tape.leaf(vec![1.0], vec![]).unwrap();
        let before = tape.num_nodes();
        let a = t(&[1.0, 2.0], &[2]);
        let _ = a.mul(&a).unwrap().sum_all();
        assert_eq!(tape.num_nodes(), before);
    }

    #[test]
    fn grad_accumulates_when_tensor_reused() {
        let tape = Tape::new();
        let x = tape.leaf(vec![3.0], vec![]).unwrap();
        let y = x.add(&x).unwrap(); // 2x
        let z = y.mul(&x).unwrap(); // 2x^2, dz/dx = 4x = 12
        let grads = z.backward().unwrap();
        assert_abs_diff_eq!(grads.wrt(&x).unwrap()[0], 12.0, epsilon = 1e-12);
    }
}
