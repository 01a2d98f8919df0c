//! Minimal dense-tensor arithmetic with reverse-mode automatic
//! differentiation.
//!
//! A [`Tape`] records every operation in topological order; tensors are plain
//! indices into the tape ([`TensorRef`]), so a whole forward/backward graph is
//! confined to one tape and one worker. 64-bit floats throughout. No
//! broadcasting beyond suffix-shaped right-hand sides in `add_b` / `mul_b`.

mod params;

pub use params::{load_weights, save_weights, ParamStore};

use std::cell::RefCell;

use crate::error::{CogError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddB(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulB(usize, usize),
    Div(usize, usize),
    Atan2(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Neg(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Concat { axis: usize, parts: Vec<usize> },
    Slice { parent: usize, axis: usize, start: usize },
    Reshape(usize),
    RepeatRows(usize, usize),
    TileRows(usize, usize),
    Softmax(usize),
    LayerNorm(usize),
    Relu(usize),
    Tanh(usize),
    Logistic(usize),
    Exp(usize),
    Sqrt(usize),
    MaxPool { parent: usize, argmax: Vec<usize> },
    Mean(usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation graph. Append-only; parents always precede children,
/// so reverse id order is a valid topological order for backprop.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Split a shape at `axis` into (outer, dim, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, dim, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorRef {
        // non-finite values are allowed to propagate: training detects
        // divergence from the loss value rather than panicking mid-graph
        debug_assert_eq!(data.len(), numel(&shape), "data length must match shape");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        TensorRef(nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn shape(&self, t: TensorRef) -> Vec<usize> {
        self.nodes.borrow()[t.0].shape.clone()
    }

    pub fn data(&self, t: TensorRef) -> Vec<f64> {
        self.nodes.borrow()[t.0].data.clone()
    }

    pub fn scalar_value(&self, t: TensorRef) -> f64 {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[t.0].data.len(), 1);
        nodes[t.0].data[0]
    }

    // -- leaves ------------------------------------------------------------

    pub fn leaf(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> TensorRef {
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> TensorRef {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&self, v: f64) -> TensorRef {
        self.constant(vec![1], vec![v])
    }

    // -- elementwise -------------------------------------------------------

    fn check_same_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[a.0].shape != nodes[b.0].shape {
            return Err(CogError::ShapeMismatch {
                op,
                lhs: nodes[a.0].shape.clone(),
                rhs: nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn binary(
        &self,
        op_name: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorRef> {
        self.check_same_shape(op_name, a, b)?;
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let nb = &nodes[b.0];
            (
                na.shape.clone(),
                na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        Ok(self.push(shape, data, self.rg(&[a.0, b.0]), op))
    }

    pub fn add(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&self, y: TensorRef, x: TensorRef) -> Result<TensorRef> {
        self.binary("atan2", y, x, |yy, xx| yy.atan2(xx), Op::Atan2(y.0, x.0))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (leading-batch
    /// expansion).
    pub fn add_b(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.broadcast_binary("add_b", a, b, |x, y| x + y, Op::AddB(a.0, b.0))
    }

    /// `a * b` with suffix broadcasting, as [`Tape::add_b`].
    pub fn mul_b(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.broadcast_binary("mul_b", a, b, |x, y| x * y, Op::MulB(a.0, b.0))
    }

    fn broadcast_binary(
        &self,
        op_name: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorRef> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let nb = &nodes[b.0];
            if na.shape.len() < nb.shape.len() || !na.shape.ends_with(&nb.shape) {
                return Err(CogError::ShapeMismatch {
                    op: op_name,
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let m = nb.data.len();
            let data = na
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, nb.data[i % m]))
                .collect();
            (na.shape.clone(), data)
        };
        Ok(self.push(shape, data, self.rg(&[a.0, b.0]), op))
    }

    pub fn scale(&self, a: TensorRef, c: f64) -> TensorRef {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.shape.clone(), na.data.iter().map(|&x| x * c).collect())
        };
        self.push(shape, data, self.rg(&[a.0]), Op::Scale(a.0, c))
    }

    pub fn add_scalar(&self, a: TensorRef, c: f64) -> TensorRef {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.shape.clone(), na.data.iter().map(|&x| x + c).collect())
        };
        self.push(shape, data, self.rg(&[a.0]), Op::AddScalar(a.0))
    }

    pub fn neg(&self, a: TensorRef) -> TensorRef {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.shape.clone(), na.data.iter().map(|&x| -x).collect())
        };
        self.push(shape, data, self.rg(&[a.0]), Op::Neg(a.0))
    }

    fn unary(&self, a: TensorRef, f: impl Fn(f64) -> f64, op: Op) -> TensorRef {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.shape.clone(), na.data.iter().map(|&x| f(x)).collect())
        };
        self.push(shape, data, self.rg(&[a.0]), op)
    }

    pub fn relu(&self, a: TensorRef) -> TensorRef {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&self, a: TensorRef) -> TensorRef {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn logistic(&self, a: TensorRef) -> TensorRef {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Logistic(a.0))
    }

    pub fn exp(&self, a: TensorRef) -> TensorRef {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn sqrt(&self, a: TensorRef) -> TensorRef {
        self.unary(a, f64::sqrt, Op::Sqrt(a.0))
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, k, n, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let nb = &nodes[b.0];
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(CogError::ShapeMismatch {
                    op: "matmul",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let (m, k) = (na.shape[0], na.shape[1]);
            let n = nb.shape[1];
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = na.data[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &nb.data[p * n..(p + 1) * n];
                    let crow = &mut data[i * n..(i + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
            (m, k, n, data)
        };
        let _ = k;
        Ok(self.push(vec![m, n], data, self.rg(&[a.0, b.0]), Op::Matmul(a.0, b.0)))
    }

    pub fn transpose(&self, a: TensorRef) -> Result<TensorRef> {
        let (r, c, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.len() != 2 {
                return Err(CogError::ShapeMismatch {
                    op: "transpose",
                    lhs: na.shape.clone(),
                    rhs: vec![],
                });
            }
            let (r, c) = (na.shape[0], na.shape[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = na.data[i * c + j];
                }
            }
            (r, c, data)
        };
        Ok(self.push(vec![c, r], data, self.rg(&[a.0]), Op::Transpose(a.0)))
    }

    // -- structure ---------------------------------------------------------

    pub fn reshape(&self, a: TensorRef, shape: Vec<usize>) -> Result<TensorRef> {
        let data = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if numel(&shape) != na.data.len() {
                return Err(CogError::ShapeMismatch {
                    op: "reshape",
                    lhs: na.shape.clone(),
                    rhs: shape.clone(),
                });
            }
            na.data.clone()
        };
        Ok(self.push(shape, data, self.rg(&[a.0]), Op::Reshape(a.0)))
    }

    pub fn concat(&self, parts: &[TensorRef], axis: usize) -> Result<TensorRef> {
        assert!(!parts.is_empty(), "concat needs at least one part");
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0];
            let rank = first.shape.len();
            if axis >= rank {
                return Err(CogError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: vec![axis],
                });
            }
            let mut total_dim = 0;
            for p in parts {
                let np = &nodes[p.0];
                if np.shape.len() != rank
                    || np.shape[..axis] != first.shape[..axis]
                    || np.shape[axis + 1..] != first.shape[axis + 1..]
                {
                    return Err(CogError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape.clone(),
                        rhs: np.shape.clone(),
                    });
                }
                total_dim += np.shape[axis];
            }
            let mut shape = first.shape.clone();
            shape[axis] = total_dim;
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut data = vec![0.0; numel(&shape)];
            for o in 0..outer {
                let mut offset = 0;
                for p in parts {
                    let np = &nodes[p.0];
                    let dim = np.shape[axis];
                    let src = &np.data[o * dim * inner..(o + 1) * dim * inner];
                    let dst_start = o * total_dim * inner + offset * inner;
                    data[dst_start..dst_start + dim * inner].copy_from_slice(src);
                    offset += dim;
                }
            }
            (shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            shape,
            data,
            self.rg(&ids),
            Op::Concat { axis, parts: ids },
        ))
    }

    pub fn slice(&self, a: TensorRef, axis: usize, start: usize, len: usize) -> Result<TensorRef> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if axis >= na.shape.len() || start + len > na.shape[axis] {
                return Err(CogError::ShapeMismatch {
                    op: "slice",
                    lhs: na.shape.clone(),
                    rhs: vec![axis, start, len],
                });
            }
            let (outer, dim, inner) = axis_split(&na.shape, axis);
            let mut shape = na.shape.clone();
            shape[axis] = len;
            let mut data = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = o * dim * inner + start * inner;
                let dst = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&na.data[src..src + len * inner]);
            }
            (shape, data)
        };
        Ok(self.push(
            shape,
            data,
            self.rg(&[a.0]),
            Op::Slice {
                parent: a.0,
                axis,
                start,
            },
        ))
    }

    /// Row `i` of a rank-2 tensor, as a `1 x c` tensor.
    pub fn row(&self, a: TensorRef, i: usize) -> Result<TensorRef> {
        self.slice(a, 0, i, 1)
    }

    /// Repeat each row of a rank-2 tensor `k` times: `(r, c) -> (r*k, c)`.
    pub fn repeat_rows(&self, a: TensorRef, k: usize) -> Result<TensorRef> {
        let (r, c, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.len() != 2 {
                return Err(CogError::ShapeMismatch {
                    op: "repeat_rows",
                    lhs: na.shape.clone(),
                    rhs: vec![k],
                });
            }
            let (r, c) = (na.shape[0], na.shape[1]);
            let mut data = Vec::with_capacity(r * k * c);
            for i in 0..r {
                for _ in 0..k {
                    data.extend_from_slice(&na.data[i * c..(i + 1) * c]);
                }
            }
            (r, c, data)
        };
        Ok(self.push(vec![r * k, c], data, self.rg(&[a.0]), Op::RepeatRows(a.0, k)))
    }

    /// Stack `k` copies of a rank-2 tensor: `(r, c) -> (r*k, c)`.
    pub fn tile_rows(&self, a: TensorRef, k: usize) -> Result<TensorRef> {
        let (r, c, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.len() != 2 {
                return Err(CogError::ShapeMismatch {
                    op: "tile_rows",
                    lhs: na.shape.clone(),
                    rhs: vec![k],
                });
            }
            let (r, c) = (na.shape[0], na.shape[1]);
            let mut data = Vec::with_capacity(r * k * c);
            for _ in 0..k {
                data.extend_from_slice(&na.data);
            }
            (r, c, data)
        };
        Ok(self.push(vec![r * k, c], data, self.rg(&[a.0]), Op::TileRows(a.0, k)))
    }

    // -- normalization and reductions --------------------------------------

    /// Softmax along the last axis.
    pub fn softmax(&self, a: TensorRef) -> TensorRef {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let cols = *na.shape.last().expect("softmax needs rank >= 1");
            let mut data = na.data.clone();
            for chunk in data.chunks_mut(cols) {
                let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in chunk.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in chunk.iter_mut() {
                    *v /= sum;
                }
            }
            (na.shape.clone(), data)
        };
        self.push(shape, data, self.rg(&[a.0]), Op::Softmax(a.0))
    }

    const LN_EPS: f64 = 1e-5;

    /// Layer normalization along the last axis (no affine terms; compose with
    /// `mul_b` / `add_b` for gain and bias).
    pub fn layer_norm(&self, a: TensorRef) -> TensorRef {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let cols = *na.shape.last().expect("layer_norm needs rank >= 1");
            let mut data = na.data.clone();
            for chunk in data.chunks_mut(cols) {
                let mean = chunk.iter().sum::<f64>() / cols as f64;
                let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                let denom = (var + Self::LN_EPS).sqrt();
                for v in chunk.iter_mut() {
                    *v = (*v - mean) / denom;
                }
            }
            (na.shape.clone(), data)
        };
        self.push(shape, data, self.rg(&[a.0]), Op::LayerNorm(a.0))
    }

    /// Max over `axis`, removing it. Gradient routes to the first maximal
    /// index on ties.
    pub fn max_pool(&self, a: TensorRef, axis: usize) -> Result<TensorRef> {
        let (shape, data, argmax) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if axis >= na.shape.len() {
                return Err(CogError::ShapeMismatch {
                    op: "max_pool",
                    lhs: na.shape.clone(),
                    rhs: vec![axis],
                });
            }
            let (outer, dim, inner) = axis_split(&na.shape, axis);
            let mut shape = na.shape.clone();
            shape.remove(axis);
            let mut data = vec![f64::NEG_INFINITY; outer * inner];
            let mut argmax = vec![0usize; outer * inner];
            for o in 0..outer {
                for d in 0..dim {
                    for i in 0..inner {
                        let v = na.data[o * dim * inner + d * inner + i];
                        let out_idx = o * inner + i;
                        if v > data[out_idx] {
                            data[out_idx] = v;
                            argmax[out_idx] = o * dim * inner + d * inner + i;
                        }
                    }
                }
            }
            (shape, data, argmax)
        };
        Ok(self.push(
            shape,
            data,
            self.rg(&[a.0]),
            Op::MaxPool {
                parent: a.0,
                argmax,
            },
        ))
    }

    pub fn mean(&self, a: TensorRef) -> TensorRef {
        let v = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            na.data.iter().sum::<f64>() / na.data.len() as f64
        };
        self.push(vec![1], vec![v], self.rg(&[a.0]), Op::Mean(a.0))
    }

    pub fn sum(&self, a: TensorRef) -> TensorRef {
        let v = self.nodes.borrow()[a.0].data.iter().sum::<f64>();
        self.push(vec![1], vec![v], self.rg(&[a.0]), Op::Sum(a.0))
    }

    // -- composites --------------------------------------------------------

    /// `softmax(q k^T / sqrt(d)) v` for rank-2 `q (m,d)`, `k (n,d)`,
    /// `v (n,e)`. Built from primitives, so it differentiates for free.
    pub fn scaled_dot_product_attention(
        &self,
        q: TensorRef,
        k: TensorRef,
        v: TensorRef,
    ) -> Result<TensorRef> {
        let d = self.shape(q)[1];
        let kt = self.transpose(k)?;
        let scores = self.scale(self.matmul(q, kt)?, 1.0 / (d as f64).sqrt());
        let weights = self.softmax(scores);
        self.matmul(weights, v)
    }

    /// `x w + b` for `x (n, d_in)`, `w (d_in, d_out)`, `b (d_out)`.
    pub fn linear(&self, x: TensorRef, w: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.add_b(self.matmul(x, w)?, b)
    }

    // -- backward ----------------------------------------------------------

    /// Reverse-mode accumulation from a scalar loss. Returns per-node
    /// gradients for every `requires_grad` node reachable from the loss.
    pub fn backward(&self, loss: TensorRef) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].data.len() != 1 {
            return Err(CogError::Invariant(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |pid: usize, update: &dyn Fn(&mut Vec<f64>)| {
                if !nodes[pid].requires_grad {
                    return;
                }
                let slot = grads[pid].get_or_insert_with(|| vec![0.0; nodes[pid].data.len()]);
                update(slot);
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, &|ga| add_assign(ga, &g));
                    acc(*b, &|gb| add_assign(gb, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|ga| add_assign(ga, &g));
                    acc(*b, &|gb| sub_assign(gb, &g));
                }
                Op::AddB(a, b) => {
                    acc(*a, &|ga| add_assign(ga, &g));
                    let m = nodes[*b].data.len();
                    acc(*b, &|gb| {
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % m] += gv;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (da, db) = (&nodes[*a].data, &nodes[*b].data);
                    acc(*a, &|ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * db[i];
                        }
                    });
                    acc(*b, &|gb| {
                        for i in 0..g.len() {
                            gb[i] += g[i] * da[i];
                        }
                    });
                }
                Op::MulB(a, b) => {
                    let (da, db) = (&nodes[*a].data, &nodes[*b].data);
                    let m = db.len();
                    acc(*a, &|ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * db[i % m];
                        }
                    });
                    acc(*b, &|gb| {
                        for i in 0..g.len() {
                            gb[i % m] += g[i] * da[i];
                        }
                    });
                }
                Op::Div(a, b) => {
                    let (da, db) = (&nodes[*a].data, &nodes[*b].data);
                    acc(*a, &|ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] / db[i];
                        }
                    });
                    acc(*b, &|gb| {
                        for i in 0..g.len() {
                            gb[i] -= g[i] * da[i] / (db[i] * db[i]);
                        }
                    });
                }
                Op::Atan2(y, x) => {
                    let (dy, dx) = (&nodes[*y].data, &nodes[*x].data);
                    acc(*y, &|gy| {
                        for i in 0..g.len() {
                            let r2 = dx[i] * dx[i] + dy[i] * dy[i];
                            gy[i] += g[i] * dx[i] / r2;
                        }
                    });
                    acc(*x, &|gx| {
                        for i in 0..g.len() {
                            let r2 = dx[i] * dx[i] + dy[i] * dy[i];
                            gx[i] -= g[i] * dy[i] / r2;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, &|ga| {
                        for i in 0..g.len() {
                            ga[i] += c * g[i];
                        }
                    });
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    acc(*a, &|ga| add_assign(ga, &g));
                }
                Op::Neg(a) => {
                    acc(*a, &|ga| sub_assign(ga, &g));
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let n = nodes[*b].shape[1];
                    let (da, db) = (&nodes[*a].data, &nodes[*b].data);
                    // dA += g B^T
                    acc(*a, &|ga| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * db[p * n + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    });
                    // dB += A^T g
                    acc(*b, &|gb| {
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += da[i * k + p] * g[i * n + j];
                                }
                                gb[p * n + j] += s;
                            }
                        }
                    });
                }
                Op::Transpose(a) => {
                    let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    acc(*a, &|ga| {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Concat { axis, parts } => {
                    let shape = &node.shape;
                    let (outer, total_dim, inner) = axis_split(shape, *axis);
                    let mut offset = 0;
                    for &pid in parts {
                        let dim = nodes[pid].shape[*axis];
                        let off = offset;
                        acc(pid, &|gp| {
                            for o in 0..outer {
                                for d in 0..dim {
                                    let src = o * total_dim * inner + (off + d) * inner;
                                    let dst = o * dim * inner + d * inner;
                                    for i in 0..inner {
                                        gp[dst + i] += g[src + i];
                                    }
                                }
                            }
                        });
                        offset += dim;
                    }
                }
                Op::Slice { parent, axis, start } => {
                    let pshape = &nodes[*parent].shape;
                    let (outer, dim, inner) = axis_split(pshape, *axis);
                    let len = node.shape[*axis];
                    acc(*parent, &|gp| {
                        for o in 0..outer {
                            for d in 0..len {
                                let dst = o * dim * inner + (start + d) * inner;
                                let src = o * len * inner + d * inner;
                                for i in 0..inner {
                                    gp[dst + i] += g[src + i];
                                }
                            }
                        }
                    });
                }
                Op::RepeatRows(a, k) => {
                    let c = nodes[*a].shape[1];
                    let r = nodes[*a].shape[0];
                    acc(*a, &|ga| {
                        for i in 0..r {
                            for rep in 0..*k {
                                let src = (i * k + rep) * c;
                                for j in 0..c {
                                    ga[i * c + j] += g[src + j];
                                }
                            }
                        }
                    });
                }
                Op::TileRows(a, k) => {
                    let len = nodes[*a].data.len();
                    acc(*a, &|ga| {
                        for rep in 0..*k {
                            for i in 0..len {
                                ga[i] += g[rep * len + i];
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = &node.data;
                    let cols = *node.shape.last().unwrap();
                    acc(*a, &|ga| {
                        for (row, (gch, ych)) in g.chunks(cols).zip(y.chunks(cols)).enumerate() {
                            let dot: f64 = gch.iter().zip(ych).map(|(&gv, &yv)| gv * yv).sum();
                            for j in 0..cols {
                                ga[row * cols + j] += ych[j] * (gch[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm(a) => {
                    let x = &nodes[*a].data;
                    let y = &node.data;
                    let cols = *node.shape.last().unwrap();
                    acc(*a, &|ga| {
                        for row in 0..x.len() / cols {
                            let xr = &x[row * cols..(row + 1) * cols];
                            let yr = &y[row * cols..(row + 1) * cols];
                            let gr = &g[row * cols..(row + 1) * cols];
                            let mean = xr.iter().sum::<f64>() / cols as f64;
                            let var =
                                xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                            let denom = (var + Self::LN_EPS).sqrt();
                            let g_mean = gr.iter().sum::<f64>() / cols as f64;
                            let gy_mean = gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum::<f64>()
                                / cols as f64;
                            for j in 0..cols {
                                ga[row * cols + j] +=
                                    (gr[j] - g_mean - yr[j] * gy_mean) / denom;
                            }
                        }
                    });
                }
                Op::Relu(a) => {
                    let x = &nodes[*a].data;
                    acc(*a, &|ga| {
                        for i in 0..g.len() {
                            if x[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = &node.data;
                    acc(*a, &|ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                Op::Logistic(a) => {
                    let y = &node.data;
                    acc(*a, &|ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = &node.data;
                    acc(*a, &|ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * y[i];
                        }
                    });
                }
                Op::Sqrt(a) => {
                    let y = &node.data;
                    acc(*a, &|ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * 0.5 / y[i];
                        }
                    });
                }
                Op::MaxPool { parent, argmax, .. } => {
                    acc(*parent, &|gp| {
                        for (out_idx, &src_idx) in argmax.iter().enumerate() {
                            gp[src_idx] += g[out_idx];
                        }
                    });
                }
                Op::Mean(a) => {
                    let n = nodes[*a].data.len() as f64;
                    acc(*a, &|ga| {
                        for v in ga.iter_mut() {
                            *v += g[0] / n;
                        }
                    });
                }
                Op::Sum(a) => {
                    acc(*a, &|ga| {
                        for v in ga.iter_mut() {
                            *v += g[0];
                        }
                    });
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`; zeros if the node was unreachable.
    pub fn get(&self, tape: &Tape, t: TensorRef) -> Vec<f64> {
        self.grads[t.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; tape.data(t).len()])
    }
}
