//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! Values are 64-bit floats in row-major order. Every operation runs eagerly
//! and records its inputs, so a [`Tensor`] doubles as a node in an acyclic
//! computation graph. Calling [`Tensor::backward`] on a scalar walks that
//! graph once in reverse creation order and accumulates `d loss / d node`
//! into the gradient of every node that requires one.
//!
//! There is no implicit broadcasting except scalar-with-tensor for the
//! elementwise ops; everything else must match shapes exactly and fails
//! loudly otherwise.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Extents of a dense tensor. Rank 0 (no dims) is a scalar holding one
/// element; a zero extent anywhere makes the tensor empty.
#[derive(Clone, PartialEq, Eq, Debug, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn scalar() -> Shape {
        Shape(Vec::new())
    }

    pub fn new(dims: impl Into<Vec<usize>>) -> Shape {
        Shape(dims.into())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Product of the extents; the empty product makes scalars hold one.
    pub fn element_count(&self) -> usize {
        self.0.iter().product()
    }
}

impl From<&[usize]> for Shape {
    fn from(dims: &[usize]) -> Shape {
        Shape(dims.to_vec())
    }
}

impl From<Vec<usize>> for Shape {
    fn from(dims: Vec<usize>) -> Shape {
        Shape(dims)
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(dims: [usize; N]) -> Shape {
        Shape(dims.to_vec())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_node_id() -> u64 {
    NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed)
}

/// The operation that produced a node, kept for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Add,
    Sub,
    Mul,
    Matmul,
    Neg,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sum,
    Mean,
    Norm2,
    Concat { axis: usize },
    Reshape,
    Clamp { lo: f64, hi: f64 },
}

struct OpRecord {
    op: Op,
    inputs: Vec<Tensor>,
}

struct TensorData {
    id: u64,
    shape: Shape,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    record: Option<OpRecord>,
}

/// A dense float tensor participating in a computation graph.
///
/// Cloning is cheap: a `Tensor` is a shared handle onto one graph node, so
/// a parameter held by a model and by its optimizer is the same storage.
/// Graphs are single-threaded; independent graphs may live on independent
/// threads.
#[derive(Clone)]
pub struct Tensor {
    data: Rc<RefCell<TensorData>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.data.borrow();
        f.debug_struct("Tensor")
            .field("id", &d.id)
            .field("shape", &d.shape)
            .field("value", &d.value)
            .field("requires_grad", &d.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn from_parts(
        value: Vec<f64>,
        shape: Shape,
        requires_grad: bool,
        record: Option<OpRecord>,
    ) -> Tensor {
        Tensor {
            data: Rc::new(RefCell::new(TensorData {
                id: fresh_node_id(),
                shape,
                value,
                grad: None,
                requires_grad,
                record,
            })),
        }
    }

    /// Builds a leaf node from raw data. The data length must equal the
    /// element count of `shape`.
    pub fn from_vec(
        data: Vec<f64>,
        shape: impl Into<Shape>,
        requires_grad: bool,
    ) -> Result<Tensor> {
        let shape = shape.into();
        if data.len() != shape.element_count() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                detail: format!(
                    "{} values do not fill shape {} ({} elements)",
                    data.len(),
                    shape,
                    shape.element_count()
                ),
            });
        }
        Ok(Tensor::from_parts(data, shape, requires_grad, None))
    }

    /// A rank-0 constant that does not require gradient.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_parts(vec![v], Shape::scalar(), false, None)
    }

    pub fn zeros(shape: impl Into<Shape>) -> Tensor {
        let shape = shape.into();
        let n = shape.element_count();
        Tensor::from_parts(vec![0.0; n], shape, false, None)
    }

    pub fn ones(shape: impl Into<Shape>) -> Tensor {
        let shape = shape.into();
        let n = shape.element_count();
        Tensor::from_parts(vec![1.0; n], shape, false, None)
    }

    pub fn id(&self) -> u64 {
        self.data.borrow().id
    }

    pub fn shape(&self) -> Shape {
        self.data.borrow().shape.clone()
    }

    pub fn element_count(&self) -> usize {
        self.data.borrow().shape.element_count()
    }

    pub fn requires_grad(&self) -> bool {
        self.data.borrow().requires_grad
    }

    /// Copy of the value buffer, row-major.
    pub fn values(&self) -> Vec<f64> {
        self.data.borrow().value.clone()
    }

    /// The single element of a scalar or one-element tensor.
    ///
    /// Panics when the tensor holds any other number of elements.
    pub fn item(&self) -> f64 {
        let d = self.data.borrow();
        assert!(
            d.value.len() == 1,
            "item() on tensor with {} elements",
            d.value.len()
        );
        d.value[0]
    }

    /// Copy of the accumulated gradient, if a backward pass reached this
    /// node (or `zero_grad` materialized it).
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.data.borrow().grad.clone()
    }

    /// Resets the gradient to a zero buffer matching the value shape.
    pub fn zero_grad(&self) {
        let mut d = self.data.borrow_mut();
        let n = d.value.len();
        d.grad = Some(vec![0.0; n]);
    }

    /// Drops the gradient buffer entirely.
    pub fn clear_grad(&self) {
        self.data.borrow_mut().grad = None;
    }

    pub(crate) fn set_values(&self, values: Vec<f64>) {
        let mut d = self.data.borrow_mut();
        assert_eq!(values.len(), d.value.len(), "set_values length mismatch");
        d.value = values;
    }

    pub(crate) fn update_values(&self, f: impl FnOnce(&mut [f64])) {
        let mut d = self.data.borrow_mut();
        f(&mut d.value);
    }

    fn value_ref(&self) -> Ref<'_, TensorData> {
        self.data.borrow()
    }

    /// A leaf copy of this tensor's value, cut off from the graph:
    /// gradients never flow through the result back to `self`.
    pub fn detach(&self) -> Tensor {
        let d = self.data.borrow();
        Tensor::from_parts(d.value.clone(), d.shape.clone(), false, None)
    }

    // ----- elementwise binary ops (scalar-with-tensor broadcast only) -----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, Op::Mul, "mul", |a, b| a * b)
    }

    fn binary_elementwise(
        &self,
        other: &Tensor,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, b) = (self.value_ref(), other.value_ref());
        let out_shape = broadcast_shape(name, &a.shape, &b.shape)?;
        let n = out_shape.element_count();
        let mut value = Vec::with_capacity(n);
        for i in 0..n {
            let av = if a.shape.rank() == 0 { a.value[0] } else { a.value[i] };
            let bv = if b.shape.rank() == 0 { b.value[0] } else { b.value[i] };
            value.push(f(av, bv));
        }
        let requires = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(Tensor::from_parts(
            value,
            out_shape,
            requires,
            Some(OpRecord {
                op,
                inputs: vec![self.clone(), other.clone()],
            }),
        ))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.value_ref(), other.value_ref());
        let (ad, bd) = (a.shape.dims(), b.shape.dims());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            let err = Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            };
            return Err(err);
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let value = matmul_flat(&a.value, &b.value, m, k, n);
        let requires = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(Tensor::from_parts(
            value,
            Shape::new(vec![m, n]),
            requires,
            Some(OpRecord {
                op: Op::Matmul,
                inputs: vec![self.clone(), other.clone()],
            }),
        ))
    }

    // ----- unary ops -----

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let d = self.value_ref();
        let value: Vec<f64> = d.value.iter().map(|&x| f(x)).collect();
        let shape = d.shape.clone();
        let requires = d.requires_grad;
        drop(d);
        Tensor::from_parts(
            value,
            shape,
            requires,
            Some(OpRecord {
                op,
                inputs: vec![self.clone()],
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg, |x| -x)
    }

    /// Elementwise max(0, x). The gradient at exactly 0 is defined as 0.
    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, sigmoid_stable)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp)
    }

    /// Natural logarithm. Out-of-domain inputs produce IEEE results
    /// (-inf, NaN) rather than errors; the fitting loop surfaces them.
    pub fn log(&self) -> Tensor {
        self.unary(Op::Log, f64::ln)
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient is 1 inside the
    /// interval (bounds included) and 0 outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(Op::Clamp { lo, hi }, |x| x.clamp(lo, hi))
    }

    // ----- reductions -----

    fn reduce(&self, op: Op, v: f64) -> Tensor {
        let requires = self.requires_grad();
        Tensor::from_parts(
            vec![v],
            Shape::scalar(),
            requires,
            Some(OpRecord {
                op,
                inputs: vec![self.clone()],
            }),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let v = self.value_ref().value.iter().sum();
        self.reduce(Op::Sum, v)
    }

    /// Arithmetic mean of all elements, as a scalar. Empty tensors yield
    /// the IEEE 0/0.
    pub fn mean(&self) -> Tensor {
        let d = self.value_ref();
        let v = d.value.iter().sum::<f64>() / d.value.len() as f64;
        drop(d);
        self.reduce(Op::Mean, v)
    }

    /// Euclidean (p = 2) norm of all elements, as a scalar. The norm of
    /// the zero vector is 0 with gradient 0.
    pub fn norm2(&self) -> Tensor {
        let d = self.value_ref();
        let v = d.value.iter().map(|x| x * x).sum::<f64>().sqrt();
        drop(d);
        self.reduce(Op::Norm2, v)
    }

    /// Reinterprets the element buffer under a new shape with the same
    /// element count.
    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Tensor> {
        let shape = shape.into();
        let d = self.value_ref();
        if shape.element_count() != d.value.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                detail: format!("cannot view {} as {}", d.shape, shape),
            });
        }
        let value = d.value.clone();
        let requires = d.requires_grad;
        drop(d);
        Ok(Tensor::from_parts(
            value,
            shape,
            requires,
            Some(OpRecord {
                op: Op::Reshape,
                inputs: vec![self.clone()],
            }),
        ))
    }

    // ----- backward -----

    /// Accumulates `d self / d node` into the gradient of every reachable
    /// node that requires one. `self` must hold exactly one element.
    /// Repeated calls add up, so two losses may be backpropagated
    /// separately.
    pub fn backward(&self) -> Result<()> {
        if self.element_count() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(),
            });
        }

        // Reachable set, then reverse creation order. Inputs are always
        // created before their outputs, so descending id is a valid
        // reverse-topological order.
        let mut reachable: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(node) = stack.pop() {
            let id = node.id();
            if reachable.contains_key(&id) {
                continue;
            }
            if let Some(rec) = &node.data.borrow().record {
                stack.extend(rec.inputs.iter().cloned());
            }
            reachable.insert(id, node);
        }
        let mut order: Vec<Tensor> = reachable.into_values().collect();
        order.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut adjoints: HashMap<u64, Vec<f64>> = HashMap::new();
        adjoints.insert(self.id(), vec![1.0]);

        for node in order {
            let Some(adj) = adjoints.remove(&node.id()) else {
                continue;
            };
            let d = node.data.borrow();
            // When the output does not require grad, no input does either.
            if !d.requires_grad {
                continue;
            }
            drop(d);
            {
                let mut d = node.data.borrow_mut();
                let n = d.value.len();
                let grad = d.grad.get_or_insert_with(|| vec![0.0; n]);
                for (g, a) in grad.iter_mut().zip(adj.iter()) {
                    *g += a;
                }
            }
            let d = node.data.borrow();
            if let Some(rec) = &d.record {
                let contributions = propagate(rec, &d, &adj);
                for (input, contrib) in rec.inputs.iter().zip(contributions) {
                    let entry = adjoints
                        .entry(input.id())
                        .or_insert_with(|| vec![0.0; contrib.len()]);
                    for (e, c) in entry.iter_mut().zip(contrib.iter()) {
                        *e += c;
                    }
                }
            }
        }
        Ok(())
    }
}

/// A named tensor that requires gradient; the unit optimizers update.
#[derive(Clone)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Result<Parameter> {
        if !tensor.requires_grad() {
            return Err(Error::Contract(
                "parameters must require gradient".into(),
            ));
        }
        Ok(Parameter {
            name: name.into(),
            tensor,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

impl fmt::Debug for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Parameter({:?}, {:?})", self.name, self.tensor)
    }
}

/// Resets every parameter's gradient to a zero buffer.
pub fn zero_grad(params: &[Parameter]) {
    for p in params {
        p.tensor().zero_grad();
    }
}

/// Concatenates tensors of equal rank along `axis`; all other extents
/// must agree.
pub fn concat(inputs: &[Tensor], axis: usize) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::InvalidShape {
            op: "concat",
            detail: "no inputs".into(),
        });
    }
    let first = inputs[0].shape();
    if axis >= first.rank() {
        return Err(Error::InvalidShape {
            op: "concat",
            detail: format!("axis {axis} out of range for shape {first}"),
        });
    }
    let mut axis_total = 0;
    for t in inputs {
        let s = t.shape();
        let compatible = s.rank() == first.rank()
            && s.dims()
                .iter()
                .zip(first.dims())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first,
                rhs: s,
            });
        }
        axis_total += s.dims()[axis];
    }
    let mut out_dims = first.dims().to_vec();
    out_dims[axis] = axis_total;
    let out_shape = Shape::new(out_dims);

    let outer: usize = first.dims()[..axis].iter().product();
    let inner: usize = first.dims()[axis + 1..].iter().product();
    let mut value = vec![0.0; out_shape.element_count()];
    let out_row = axis_total * inner;
    let mut start = 0;
    for t in inputs {
        let d = t.value_ref();
        let block = d.shape.dims()[axis] * inner;
        for o in 0..outer {
            let src = &d.value[o * block..(o + 1) * block];
            value[o * out_row + start..o * out_row + start + block].copy_from_slice(src);
        }
        start += block;
    }
    let requires = inputs.iter().any(Tensor::requires_grad);
    Ok(Tensor::from_parts(
        value,
        out_shape,
        requires,
        Some(OpRecord {
            op: Op::Concat { axis },
            inputs: inputs.to_vec(),
        }),
    ))
}

fn broadcast_shape(op: &'static str, a: &Shape, b: &Shape) -> Result<Shape> {
    if a == b {
        Ok(a.clone())
    } else if a.rank() == 0 {
        Ok(b.clone())
    } else if b.rank() == 0 {
        Ok(a.clone())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.clone(),
            rhs: b.clone(),
        })
    }
}

fn matmul_flat(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Given the adjoint of an op's output, produce one contribution buffer
/// per input, in input order.
fn propagate(rec: &OpRecord, out: &TensorData, adj: &[f64]) -> Vec<Vec<f64>> {
    // Contribution for one side of an elementwise op: `full` has the
    // output shape; a rank-0 input receives the total instead.
    let collapse = |input: &Tensor, full: Vec<f64>| -> Vec<f64> {
        if input.shape() == out.shape {
            full
        } else {
            vec![full.iter().sum()]
        }
    };
    let side_value = |input: &Tensor, i: usize| -> f64 {
        let d = input.value_ref();
        if d.shape.rank() == 0 {
            d.value[0]
        } else {
            d.value[i]
        }
    };

    match rec.op {
        Op::Add => {
            let a = collapse(&rec.inputs[0], adj.to_vec());
            let b = collapse(&rec.inputs[1], adj.to_vec());
            vec![a, b]
        }
        Op::Sub => {
            let a = collapse(&rec.inputs[0], adj.to_vec());
            let b = collapse(&rec.inputs[1], adj.iter().map(|g| -g).collect());
            vec![a, b]
        }
        Op::Mul => {
            let full_a: Vec<f64> = adj
                .iter()
                .enumerate()
                .map(|(i, g)| g * side_value(&rec.inputs[1], i))
                .collect();
            let full_b: Vec<f64> = adj
                .iter()
                .enumerate()
                .map(|(i, g)| g * side_value(&rec.inputs[0], i))
                .collect();
            vec![
                collapse(&rec.inputs[0], full_a),
                collapse(&rec.inputs[1], full_b),
            ]
        }
        Op::Matmul => {
            let a = rec.inputs[0].value_ref();
            let b = rec.inputs[1].value_ref();
            let m = a.shape.dims()[0];
            let k = a.shape.dims()[1];
            let n = b.shape.dims()[1];
            // dA = G B^T, dB = A^T G
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for j in 0..k {
                    let mut acc = 0.0;
                    for p in 0..n {
                        acc += adj[i * n + p] * b.value[j * n + p];
                    }
                    da[i * k + j] = acc;
                }
            }
            let mut db = vec![0.0; k * n];
            for i in 0..k {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..m {
                        acc += a.value[i + p * k] * adj[p * n + j];
                    }
                    db[i * n + j] = acc;
                }
            }
            vec![da, db]
        }
        Op::Neg => vec![adj.iter().map(|g| -g).collect()],
        Op::Relu => {
            let x = rec.inputs[0].value_ref();
            vec![adj
                .iter()
                .zip(x.value.iter())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect()]
        }
        Op::Sigmoid => {
            let y = &out.value;
            vec![adj
                .iter()
                .zip(y.iter())
                .map(|(g, &s)| g * s * (1.0 - s))
                .collect()]
        }
        Op::Tanh => {
            let y = &out.value;
            vec![adj
                .iter()
                .zip(y.iter())
                .map(|(g, &t)| g * (1.0 - t * t))
                .collect()]
        }
        Op::Exp => {
            let y = &out.value;
            vec![adj.iter().zip(y.iter()).map(|(g, &e)| g * e).collect()]
        }
        Op::Log => {
            let x = rec.inputs[0].value_ref();
            vec![adj
                .iter()
                .zip(x.value.iter())
                .map(|(g, &v)| g / v)
                .collect()]
        }
        Op::Clamp { lo, hi } => {
            let x = rec.inputs[0].value_ref();
            vec![adj
                .iter()
                .zip(x.value.iter())
                .map(|(g, &v)| if v < lo || v > hi { 0.0 } else { *g })
                .collect()]
        }
        Op::Sum => {
            let n = rec.inputs[0].element_count();
            vec![vec![adj[0]; n]]
        }
        Op::Mean => {
            let n = rec.inputs[0].element_count();
            vec![vec![adj[0] / n as f64; n]]
        }
        Op::Norm2 => {
            let x = rec.inputs[0].value_ref();
            let norm = out.value[0];
            if norm == 0.0 {
                vec![vec![0.0; x.value.len()]]
            } else {
                vec![x.value.iter().map(|&v| adj[0] * v / norm).collect()]
            }
        }
        Op::Concat { axis } => {
            let first = rec.inputs[0].shape();
            let outer: usize = first.dims()[..axis].iter().product();
            let inner: usize = first.dims()[axis + 1..].iter().product();
            let axis_total: usize =
                rec.inputs.iter().map(|t| t.shape().dims()[axis]).sum();
            let out_row = axis_total * inner;
            let mut start = 0;
            let mut contribs = Vec::with_capacity(rec.inputs.len());
            for t in &rec.inputs {
                let block = t.shape().dims()[axis] * inner;
                let mut c = vec![0.0; t.element_count()];
                for o in 0..outer {
                    c[o * block..(o + 1) * block].copy_from_slice(
                        &adj[o * out_row + start..o * out_row + start + block],
                    );
                }
                start += block;
                contribs.push(c);
            }
            contribs
        }
        Op::Reshape => vec![adj.to_vec()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(data: &[f64], shape: impl Into<Shape>) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, true).unwrap()
    }

    fn constant(data: &[f64], shape: impl Into<Shape>) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, false).unwrap()
    }

    /// Central finite differences of `f` at `point`.
    fn finite_diff(f: impl Fn(&[f64]) -> f64, point: &[f64], eps: f64) -> Vec<f64> {
        let mut grads = Vec::with_capacity(point.len());
        let mut probe = point.to_vec();
        for i in 0..point.len() {
            probe[i] = point[i] + eps;
            let plus = f(&probe);
            probe[i] = point[i] - eps;
            let minus = f(&probe);
            probe[i] = point[i];
            grads.push((plus - minus) / (2.0 * eps));
        }
        grads
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected) {
            let rel = (a - e).abs() / a.abs().max(e.abs()).max(1.0);
            assert!(rel < tol, "{a} vs {e} (rel {rel})");
        }
    }

    #[test]
    fn from_vec_builds_leaves() {
        let t = constant(&[1.0, 2.0, 3.0, 4.0], [2, 2]);
        assert_eq!(t.values(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.shape(), Shape::new(vec![2, 2]));
        assert!(!t.requires_grad());
        assert!(t.grad().is_none());

        let empty = constant(&[], [0]);
        assert_eq!(empty.element_count(), 0);

        let scalar = leaf(&[5.0], []);
        assert_eq!(scalar.item(), 5.0);
        assert!(scalar.requires_grad());
    }

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::from_vec(vec![1.0, 2.0], [3], false).unwrap_err();
        assert!(err.to_string().contains("from_vec"), "{err}");
    }

    #[test]
    fn norm2_of_three_four_is_five() {
        assert_eq!(constant(&[3.0, 4.0], [1, 2]).norm2().item(), 5.0);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(Tensor::scalar(0.0).sigmoid().item(), 0.5);
    }

    #[test]
    fn matmul_identity() {
        let a = constant(&[1.0, 2.0, 3.0, 4.0], [2, 2]);
        let eye = constant(&[1.0, 0.0, 0.0, 1.0], [2, 2]);
        assert_eq!(a.matmul(&eye).unwrap().values(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let a = constant(&[1.0, 2.0], [1, 2]);
        let b = constant(&[1.0, 2.0], [1, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[1, 2]"), "{msg}");
    }

    #[test]
    fn elementwise_shape_mismatch_names_op() {
        let a = constant(&[1.0, 2.0], [2]);
        let b = constant(&[1.0, 2.0, 3.0], [3]);
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn detach_is_a_value_copy_without_grad() {
        let x = leaf(&[1.5], []);
        let d = x.detach();
        assert_eq!(d.item(), 1.5);
        assert!(!d.requires_grad());

        // backward through f(detach(x)) leaves x untouched
        let loss = d.mul(&d).unwrap();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn detach_blocks_one_branch_only() {
        // f(x) = x^2 through the live branch, g(detach(x)) = 3 * stop(x).
        // The gradient of x must equal that of f alone: 2x.
        let x = leaf(&[1.7], []);
        let f = x.mul(&x).unwrap();
        let g = x.detach().mul(&Tensor::scalar(3.0)).unwrap();
        f.add(&g).unwrap().backward().unwrap();

        let fd = finite_diff(|p| p[0] * p[0], &[1.7], 1e-6);
        assert_close(&x.grad().unwrap(), &fd, 1e-6);
    }

    #[test]
    fn backward_square() {
        let x = leaf(&[3.0], []);
        x.mul(&x).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let w = leaf(&[1.0, 2.0, 3.0, 4.0], [2, 2]);
        w.mul(&w).unwrap().sum().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn backward_sigmoid_dot_matches_finite_differences() {
        let mut rng = 0x2f9u64;
        let mut next = move || {
            // xorshift, plenty for test points
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng as f64 / u64::MAX as f64) * 2.0 - 1.0
        };
        for _ in 0..20 {
            let wv: Vec<f64> = (0..3).map(|_| next()).collect();
            let xv: Vec<f64> = (0..3).map(|_| next()).collect();
            let w = leaf(&wv, [1, 3]);
            let x = constant(&xv, [3, 1]);
            w.matmul(&x).unwrap().sum().sigmoid().backward().unwrap();

            let fd = finite_diff(
                |p| {
                    let dot: f64 = p.iter().zip(&xv).map(|(a, b)| a * b).sum();
                    1.0 / (1.0 + (-dot).exp())
                },
                &wv,
                1e-6,
            );
            assert_close(&w.grad().unwrap(), &fd, 1e-6);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let x = leaf(&[1.0, 2.0], [2]);
        assert!(matches!(
            x.backward().unwrap_err(),
            Error::NonScalarLoss { .. }
        ));
    }

    #[test]
    fn zero_grad_resets_and_is_idempotent() {
        let p = Parameter::new("w", leaf(&[2.0], [])).unwrap();
        let params = [p.clone()];

        zero_grad(&params); // fresh parameters: no error
        assert_eq!(p.tensor().grad().unwrap(), vec![0.0]);

        let t = p.tensor();
        t.mul(t).unwrap().backward().unwrap();
        assert_eq!(p.tensor().grad().unwrap(), vec![4.0]);
        zero_grad(&params);
        assert_eq!(p.tensor().grad().unwrap(), vec![0.0]);

        // backward, zero_grad, backward equals a single backward
        t.mul(t).unwrap().backward().unwrap();
        assert_eq!(p.tensor().grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_like_a_sum() {
        let x = leaf(&[0.8], []);
        let l1 = x.mul(&x).unwrap();
        let l2 = x.exp();
        l1.backward().unwrap();
        l2.backward().unwrap();
        let accumulated = x.grad().unwrap()[0];

        let y = leaf(&[0.8], []);
        let sum = y.mul(&y).unwrap().add(&y.exp()).unwrap();
        sum.backward().unwrap();
        let joint = y.grad().unwrap()[0];

        assert!((accumulated - joint).abs() < 1e-12);
    }

    #[test]
    fn scalar_broadcast_values_and_grads() {
        let t = leaf(&[1.0, 2.0, 3.0], [3]);
        let s = leaf(&[2.0], []);

        let out = t.mul(&s).unwrap();
        assert_eq!(out.values(), vec![2.0, 4.0, 6.0]);
        out.sum().backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(s.grad().unwrap(), vec![6.0]); // sum of the tensor side

        let shifted = s.sub(&t).unwrap(); // scalar on the left
        assert_eq!(shifted.values(), vec![1.0, 0.0, -1.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let x = leaf(&[-1.0, 0.0, 2.0], [3]);
        x.relu().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn norm2_of_zero_vector_has_zero_gradient() {
        let x = leaf(&[0.0, 0.0], [2]);
        let n = x.norm2();
        assert_eq!(n.item(), 0.0);
        n.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn concat_roundtrips_values_and_grads() {
        let a = leaf(&[1.0, 2.0], [1, 2]);
        let b = leaf(&[3.0, 4.0, 5.0, 6.0], [2, 2]);
        let joined = concat(&[a.clone(), b.clone()], 0).unwrap();
        assert_eq!(joined.shape(), Shape::new(vec![3, 2]));
        assert_eq!(joined.values(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let weights = constant(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [3, 2]);
        joined.mul(&weights).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 4.0, 5.0, 6.0]);

        // axis 1
        let c = leaf(&[1.0, 2.0], [2, 1]);
        let d = leaf(&[3.0, 4.0], [2, 1]);
        let wide = concat(&[c, d], 1).unwrap();
        assert_eq!(wide.values(), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn reshape_preserves_order_and_grads() {
        let x = leaf(&[1.0, 2.0, 3.0, 4.0], [2, 2]);
        let flat = x.reshape([4]).unwrap();
        assert_eq!(flat.values(), vec![1.0, 2.0, 3.0, 4.0]);
        let weights = constant(&[1.0, 10.0, 100.0, 1000.0], [4]);
        flat.mul(&weights).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 10.0, 100.0, 1000.0]);

        assert!(x.reshape([3]).is_err());
    }

    #[test]
    fn node_ids_order_topologically() {
        let a = leaf(&[1.0], []);
        let b = a.exp();
        let c = b.add(&a).unwrap();
        assert!(a.id() < b.id() && b.id() < c.id());
    }

    #[test]
    fn clamp_gradient_masks_outside_bounds() {
        let x = leaf(&[-1.0, 0.5, 2.0], [3]);
        let y = x.clamp(0.0, 1.0);
        assert_eq!(y.values(), vec![0.0, 0.5, 1.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn parameters_must_require_grad() {
        assert!(Parameter::new("w", Tensor::scalar(1.0)).is_err());
    }
}
