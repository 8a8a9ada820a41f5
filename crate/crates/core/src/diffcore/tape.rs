use std::cell::{Ref, RefCell};
use std::fmt;

use super::broadcast::{broadcast_map, broadcast_shape, src};
use super::tensor::Tensor;
use crate::error::{HitError, Result};

/// Norm below which [`Var::normalize_last`] switches to the fallback axis.
pub const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Scale(f64),
    Shift(f64),
    Relu,
    Square,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Sin,
    Cos,
    Sqrt,
}

enum Op {
    Leaf,
    Binary { kind: Binary, a: usize, b: usize },
    Unary { kind: Unary, x: usize },
    MatMul { a: usize, b: usize },
    BatchMatMul { a: usize, b: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    Broadcast { x: usize },
    SumAxis { x: usize, axis: usize },
    MaxAxis { x: usize, argmax: Vec<usize> },
    LogSumExp { x: usize },
    Softmax { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    StraightThrough { x: usize },
    Normalize { x: usize, norms: Vec<f64> },
    RotationZyx { x: usize },
    PoolMean { x: usize, assign: Vec<usize>, counts: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// A tape is single-threaded; independent tapes share nothing.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not require grad or is not
    /// reachable from the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf, e.g. a model parameter.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = xs
            .first()
            .ok_or_else(|| HitError::dim("concat of zero tensors"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(HitError::dim(format!(
                "concat axis {} out of range for {:?}",
                axis, base
            )));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for x in xs {
            let s = x.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(HitError::dim(format!(
                    "concat along axis {} of {:?} and {:?}",
                    axis, base, s
                )));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for x in xs {
                    let v = &nodes[x.id].value;
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
        }
        let rg = xs.iter().any(|x| self.rg(x.id));
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.iter().map(|x| x.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Reverse-mode pass from `loss`. A non-scalar `loss` is seeded with
    /// ones, i.e. the gradient of its sum.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.id].requires_grad {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.requires_grad {
                backprop_node(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(nodes.iter()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Gradients { grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_broadcast(
    g: &[f64],
    map: &Option<Vec<usize>>,
    shape: &[usize],
    f: impl Fn(usize) -> f64,
) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let data = out.data_mut();
    for (i, gi) in g.iter().enumerate() {
        data[src(map, i)] += gi * f(i);
    }
    out
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let out_shape = node.value.shape();
            let ma = broadcast_map(av.shape(), out_shape);
            let mb = broadcast_map(bv.shape(), out_shape);
            let (ad, bd) = (av.data(), bv.data());
            if nodes[*a].requires_grad {
                let ga = match kind {
                    Binary::Add | Binary::Sub => reduce_broadcast(gd, &ma, av.shape(), |_| 1.0),
                    Binary::Mul => reduce_broadcast(gd, &ma, av.shape(), |i| bd[src(&mb, i)]),
                    Binary::Div => {
                        reduce_broadcast(gd, &ma, av.shape(), |i| 1.0 / bd[src(&mb, i)])
                    }
                };
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = match kind {
                    Binary::Add => reduce_broadcast(gd, &mb, bv.shape(), |_| 1.0),
                    Binary::Sub => reduce_broadcast(gd, &mb, bv.shape(), |_| -1.0),
                    Binary::Mul => reduce_broadcast(gd, &mb, bv.shape(), |i| ad[src(&ma, i)]),
                    Binary::Div => reduce_broadcast(gd, &mb, bv.shape(), |i| {
                        let bi = bd[src(&mb, i)];
                        -ad[src(&ma, i)] / (bi * bi)
                    }),
                };
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Unary { kind, x } => {
            let xd = nodes[*x].value.data();
            let yd = node.value.data();
            let local = |i: usize| -> f64 {
                match kind {
                    Unary::Neg => -1.0,
                    Unary::Scale(c) => *c,
                    Unary::Shift(_) => 1.0,
                    Unary::Relu => {
                        if xd[i] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Unary::Square => 2.0 * xd[i],
                    Unary::Exp => yd[i],
                    Unary::Log => 1.0 / xd[i],
                    Unary::Sigmoid => sigmoid_grad(xd[i]),
                    Unary::Softplus => sigmoid(xd[i]),
                    Unary::Sin => xd[i].cos(),
                    Unary::Cos => -xd[i].sin(),
                    Unary::Sqrt => 0.5 / yd[i],
                }
            };
            let data = gd.iter().enumerate().map(|(i, gi)| gi * local(i)).collect();
            let gx = Tensor::new(node.value.shape(), data).expect("same shape");
            accumulate(nodes, grads, *x, gx);
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[*a].requires_grad {
                let mut ga = Tensor::zeros(&[m, k]);
                matmul_nt(gd, bv.data(), m, n, k, ga.data_mut());
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = Tensor::zeros(&[k, n]);
                matmul_tn(av.data(), gd, m, k, n, gb.data_mut());
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::BatchMatMul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
            if nodes[*a].requires_grad {
                let mut ga = Tensor::zeros(av.shape());
                let gad = ga.data_mut();
                for t in 0..bs {
                    matmul_nt(
                        &gd[t * m * n..(t + 1) * m * n],
                        &bv.data()[t * k * n..(t + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut gad[t * m * k..(t + 1) * m * k],
                    );
                }
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = Tensor::zeros(bv.shape());
                let gbd = gb.data_mut();
                for t in 0..bs {
                    matmul_tn(
                        &av.data()[t * m * k..(t + 1) * m * k],
                        &gd[t * m * n..(t + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut gbd[t * k * n..(t + 1) * k * n],
                    );
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Transpose { x } => {
            let gx = transpose_last2(g);
            accumulate(nodes, grads, *x, gx);
        }
        Op::Reshape { x } => {
            let gx = g.clone().reshaped(nodes[*x].value.shape()).expect("reshape");
            accumulate(nodes, grads, *x, gx);
        }
        Op::Broadcast { x } => {
            let xs = nodes[*x].value.shape();
            let map = broadcast_map(xs, node.value.shape());
            let gx = reduce_broadcast(gd, &map, xs, |_| 1.0);
            accumulate(nodes, grads, *x, gx);
        }
        Op::SumAxis { x, axis } => {
            let xs = nodes[*x].value.shape();
            let (outer, len, inner) = split_axis(xs, *axis);
            let mut gx = Tensor::zeros(xs);
            let gxd = gx.data_mut();
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        gxd[(o * len + a) * inner + i] = gd[o * inner + i];
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::MaxAxis { x, argmax, .. } => {
            let mut gx = Tensor::zeros(nodes[*x].value.shape());
            let gxd = gx.data_mut();
            for (i, &src_idx) in argmax.iter().enumerate() {
                gxd[src_idx] += gd[i];
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::LogSumExp { x } => {
            let xv = &nodes[*x].value;
            let h = *xv.shape().last().expect("rank >= 1");
            let yd = node.value.data();
            let data = xv
                .data()
                .iter()
                .enumerate()
                .map(|(i, &xi)| gd[i / h] * (xi - yd[i / h]).exp())
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), data).expect("shape"));
        }
        Op::Softmax { x } => {
            let y = &node.value;
            let n = *y.shape().last().expect("rank >= 1");
            let yd = y.data();
            let mut data = vec![0.0; yd.len()];
            for r in 0..yd.len() / n {
                let row = r * n..(r + 1) * n;
                let dot: f64 = yd[row.clone()].iter().zip(&gd[row.clone()]).map(|(a, b)| a * b).sum();
                for i in row {
                    data[i] = yd[i] * (gd[i] - dot);
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(y.shape(), data).expect("shape"));
        }
        Op::Concat { xs, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total_len = out_shape[*axis] * inner;
            let mut offset = 0;
            for &xid in xs {
                let xsh = nodes[xid].value.shape();
                let len = xsh[*axis] * inner;
                if nodes[xid].requires_grad {
                    let mut gx = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        let start = o * total_len + offset;
                        gx.extend_from_slice(&gd[start..start + len]);
                    }
                    accumulate(nodes, grads, xid, Tensor::new(xsh, gx).expect("shape"));
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = nodes[*x].value.shape();
            let (outer, len, inner) = split_axis(xs, *axis);
            let out_len = node.value.shape()[*axis];
            let mut gx = Tensor::zeros(xs);
            let gxd = gx.data_mut();
            for o in 0..outer {
                for a in 0..out_len {
                    for i in 0..inner {
                        gxd[(o * len + start + a) * inner + i] = gd[(o * out_len + a) * inner + i];
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::StraightThrough { x } => {
            accumulate(nodes, grads, *x, g.clone());
        }
        Op::Normalize { x, norms } => {
            let y = node.value.data();
            let k = *node.value.shape().last().expect("rank >= 1");
            let mut data = vec![0.0; y.len()];
            for (r, &norm) in norms.iter().enumerate() {
                if norm < NORMALIZE_EPS {
                    continue;
                }
                let row = r * k..(r + 1) * k;
                let dot: f64 = y[row.clone()].iter().zip(&gd[row.clone()]).map(|(a, b)| a * b).sum();
                for i in row {
                    data[i] = (gd[i] - y[i] * dot) / norm;
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(node.value.shape(), data).expect("shape"));
        }
        Op::RotationZyx { x } => {
            let xv = &nodes[*x].value;
            let n = xv.shape()[0];
            let mut data = vec![0.0; n * 3];
            for r in 0..n {
                let e = &xv.data()[r * 3..r * 3 + 3];
                let d = rotation_zyx_partials(e[0], e[1], e[2]);
                let gr = &gd[r * 9..r * 9 + 9];
                for a in 0..3 {
                    data[r * 3 + a] = d[a].iter().zip(gr).map(|(p, q)| p * q).sum();
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), data).expect("shape"));
        }
        Op::PoolMean { x, assign, counts } => {
            let xv = &nodes[*x].value;
            let d = xv.shape()[1];
            let mut data = vec![0.0; xv.len()];
            for (p, &cell) in assign.iter().enumerate() {
                let inv = 1.0 / counts[cell] as f64;
                for j in 0..d {
                    data[p * d + j] = gd[cell * d + j] * inv;
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), data).expect("shape"));
        }
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x k] += g[m x n] * b[k x n]^T`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k x n] += a[m x k]^T * g[m x n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let r = s.len();
    let (m, n) = (s[r - 2], s[r - 1]);
    let batch = t.len() / (m * n);
    let mut out_shape = s.to_vec();
    out_shape.swap(r - 2, r - 1);
    let mut data = vec![0.0; t.len()];
    let d = t.data();
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                data[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    Tensor::new(&out_shape, data).expect("shape")
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid'(x)` evaluated as `e^-|x| / (1 + e^-|x|)^2`, which stays
/// nonzero where `sigmoid(x)` rounds to 1.
pub fn sigmoid_grad(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

type Mat3 = [[f64; 3]; 3];

fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn rot_x(r: f64) -> (Mat3, Mat3) {
    let (s, c) = r.sin_cos();
    (
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]],
    )
}

fn rot_y(p: f64) -> (Mat3, Mat3) {
    let (s, c) = p.sin_cos();
    (
        [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]],
    )
}

fn rot_z(y: f64) -> (Mat3, Mat3) {
    let (s, c) = y.sin_cos();
    (
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]],
    )
}

/// Rotation `Rz(yaw) * Ry(pitch) * Rx(roll)` (intrinsic Z-Y-X) for angles
/// given as `(roll, pitch, yaw)`.
pub fn rotation_zyx(roll: f64, pitch: f64, yaw: f64) -> Mat3 {
    let (rx, _) = rot_x(roll);
    let (ry, _) = rot_y(pitch);
    let (rz, _) = rot_z(yaw);
    mat3_mul(&rz, &mat3_mul(&ry, &rx))
}

/// Partial derivatives of the flattened rotation matrix w.r.t. roll, pitch
/// and yaw.
fn rotation_zyx_partials(roll: f64, pitch: f64, yaw: f64) -> [[f64; 9]; 3] {
    let (rx, drx) = rot_x(roll);
    let (ry, dry) = rot_y(pitch);
    let (rz, drz) = rot_z(yaw);
    let flat = |m: Mat3| -> [f64; 9] {
        let mut f = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                f[i * 3 + j] = m[i][j];
            }
        }
        f
    };
    [
        flat(mat3_mul(&rz, &mat3_mul(&ry, &drx))),
        flat(mat3_mul(&rz, &mat3_mul(&dry, &rx))),
        flat(mat3_mul(&drz, &mat3_mul(&ry, &rx))),
    ]
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a one-element result.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let ma = broadcast_map(a.shape(), &shape);
            let mb = broadcast_map(b.shape(), &shape);
            let (ad, bd) = (a.data(), b.data());
            let n: usize = shape.iter().product();
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            };
            let data = (0..n).map(|i| f(ad[src(&ma, i)], bd[src(&mb, i)])).collect();
            Tensor::new(&shape, data)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let value = {
            let x = self.value();
            x.map(|v| match kind {
                Unary::Neg => -v,
                Unary::Scale(c) => c * v,
                Unary::Shift(c) => v + c,
                Unary::Relu => v.max(0.0),
                Unary::Square => v * v,
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::Sigmoid => sigmoid(v),
                Unary::Softplus => softplus(v),
                Unary::Sin => v.sin(),
                Unary::Cos => v.cos(),
                Unary::Sqrt => v.sqrt(),
            })
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::Unary { kind, x: self.id }, rg)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Unary::Scale(c))
    }

    pub fn shift(self, c: f64) -> Var<'t> {
        self.unary(Unary::Shift(c))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Unary::Log)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Unary::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Unary::Cos)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    /// Forward identity; contributes nothing to gradients.
    pub fn stop_gradient(self) -> Var<'t> {
        let value = self.value().clone();
        self.tape.push(value, Op::Leaf, false)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(HitError::dim(format!(
                    "matmul of {:?} and {:?}",
                    sa, sb
                )));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = Tensor::zeros(&[m, n]);
            matmul_nn(a.data(), b.data(), m, k, n, out.data_mut());
            out
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// Batched product `[B x m x k] * [B x k x n] -> [B x m x n]`.
    pub fn batch_matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(HitError::dim(format!(
                    "batch_matmul of {:?} and {:?}",
                    sa, sb
                )));
            }
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = Tensor::zeros(&[bs, m, n]);
            let od = out.data_mut();
            for t in 0..bs {
                matmul_nn(
                    &a.data()[t * m * k..(t + 1) * m * k],
                    &b.data()[t * k * n..(t + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut od[t * m * n..(t + 1) * m * n],
                );
            }
            out
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            value,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            if x.rank() < 2 {
                return Err(HitError::dim(format!("transpose of {:?}", x.shape())));
            }
            transpose_last2(&x)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Transpose { x: self.id }, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().clone().reshaped(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape { x: self.id }, rg))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let out = broadcast_shape(x.shape(), shape)?;
            if out != shape {
                return Err(HitError::dim(format!(
                    "cannot broadcast {:?} to {:?}",
                    x.shape(),
                    shape
                )));
            }
            let map = broadcast_map(x.shape(), shape);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| x.data()[src(&map, i)]).collect();
            Tensor::new(shape, data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Broadcast { x: self.id }, rg))
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        let r = self.value().rank();
        if axis >= r {
            return Err(HitError::dim(format!(
                "axis {} out of range for {:?}",
                axis,
                self.shape()
            )));
        }
        Ok(())
    }

    /// Sum over `axis`, removing it.
    pub fn reduce_sum(self, axis: usize) -> Result<Var<'t>> {
        self.check_axis(axis)?;
        let value = {
            let x = self.value();
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            let xd = x.data();
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += xd[(o * len + a) * inner + i];
                    }
                }
            }
            Tensor::new(&shape, data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::SumAxis { x: self.id, axis }, rg))
    }

    pub fn reduce_mean(self, axis: usize) -> Result<Var<'t>> {
        let len = self.shape()[axis.min(self.value().rank().saturating_sub(1))];
        let s = self.reduce_sum(axis)?;
        Ok(s.scale(1.0 / len as f64))
    }

    /// Max over `axis`; ties resolve to the lowest index, which alone
    /// receives the gradient.
    pub fn reduce_max(self, axis: usize) -> Result<Var<'t>> {
        self.check_axis(axis)?;
        let (value, argmax) = {
            let x = self.value();
            let (outer, len, inner) = split_axis(x.shape(), axis);
            if len == 0 {
                return Err(HitError::dim("reduce_max over an empty axis"));
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            let xd = x.data();
            let mut data = vec![0.0; outer * inner];
            let mut argmax = vec![0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = (o * len) * inner + i;
                    for a in 1..len {
                        let idx = (o * len + a) * inner + i;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    data[o * inner + i] = xd[best];
                    argmax[o * inner + i] = best;
                }
            }
            (Tensor::new(&shape, data)?, argmax)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::MaxAxis {
                x: self.id,
                argmax,
            },
            rg,
        ))
    }

    /// Min over `axis` with lowest-index ties.
    pub fn reduce_min(self, axis: usize) -> Result<Var<'t>> {
        Ok(self.neg().reduce_max(axis)?.neg())
    }

    pub fn sum_all(self) -> Var<'t> {
        let n = self.value().len();
        self.reshape(&[n])
            .and_then(|v| v.reduce_sum(0))
            .expect("flattened sum")
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Stabilized `log(sum(exp(x)))` over the last axis.
    pub fn logsumexp(self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let h = match x.shape().last() {
                Some(&h) if h > 0 => h,
                _ => {
                    return Err(HitError::dim(format!(
                        "logsumexp over an empty last axis of {:?}",
                        x.shape()
                    )))
                }
            };
            let mut shape = x.shape().to_vec();
            shape.pop();
            let data = x
                .data()
                .chunks(h)
                .map(|row| {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if m == f64::NEG_INFINITY {
                        return m;
                    }
                    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
                })
                .collect();
            Tensor::new(&shape, data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::LogSumExp { x: self.id }, rg))
    }

    /// Row-wise softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let n = match x.shape().last() {
                Some(&n) if n > 0 => n,
                _ => {
                    return Err(HitError::dim(format!(
                        "softmax over an empty last axis of {:?}",
                        x.shape()
                    )))
                }
            };
            if x.data().iter().any(|v| v.is_nan()) {
                return Err(HitError::Numeric("NaN input to softmax".into()));
            }
            let mut data = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let start = data.len();
                let mut sum = 0.0;
                for v in row {
                    let e = (v - m).exp();
                    sum += e;
                    data.push(e);
                }
                for e in &mut data[start..] {
                    *e /= sum;
                }
            }
            Tensor::new(x.shape(), data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Softmax { x: self.id }, rg))
    }

    /// Sub-range `range` of `axis`.
    pub fn slice(self, axis: usize, range: std::ops::Range<usize>) -> Result<Var<'t>> {
        self.check_axis(axis)?;
        let value = {
            let x = self.value();
            let (outer, len, inner) = split_axis(x.shape(), axis);
            if range.start > range.end || range.end > len {
                return Err(HitError::dim(format!(
                    "slice {:?} of axis {} with length {}",
                    range, axis, len
                )));
            }
            let out_len = range.end - range.start;
            let mut shape = x.shape().to_vec();
            shape[axis] = out_len;
            let mut data = Vec::with_capacity(outer * out_len * inner);
            for o in 0..outer {
                let s = (o * len + range.start) * inner;
                data.extend_from_slice(&x.data()[s..s + out_len * inner]);
            }
            Tensor::new(&shape, data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Slice {
                x: self.id,
                axis,
                start: range.start,
            },
            rg,
        ))
    }

    /// Straight-through one-hot over the last axis: the forward value is
    /// exactly one-hot at the argmax (lowest index on ties) and the backward
    /// pass is the identity onto `self`. Equivalent to
    /// `self + stop_gradient(onehot - self)` without the rounding of the sum.
    pub fn straight_through_onehot(self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let n = match x.shape().last() {
                Some(&n) if n > 0 => n,
                _ => return Err(HitError::dim("straight-through over an empty axis")),
            };
            let mut data = vec![0.0; x.len()];
            for (r, row) in x.data().chunks(n).enumerate() {
                data[r * n + argmax(row)] = 1.0;
            }
            Tensor::new(x.shape(), data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::StraightThrough { x: self.id }, rg))
    }

    /// L2-normalizes each slice of the last axis. Slices with norm below
    /// [`NORMALIZE_EPS`] become the first unit axis and pass no gradient.
    pub fn normalize_last(self) -> Result<Var<'t>> {
        let (value, norms) = {
            let x = self.value();
            let k = match x.shape().last() {
                Some(&k) if k > 0 => k,
                _ => return Err(HitError::dim("normalize over an empty axis")),
            };
            let mut data = Vec::with_capacity(x.len());
            let mut norms = Vec::with_capacity(x.len() / k);
            for row in x.data().chunks(k) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                norms.push(norm);
                if norm < NORMALIZE_EPS {
                    data.push(1.0);
                    data.extend(std::iter::repeat_n(0.0, k - 1));
                } else {
                    data.extend(row.iter().map(|v| v / norm));
                }
            }
            (Tensor::new(x.shape(), data)?, norms)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Normalize { x: self.id, norms }, rg))
    }

    /// Maps `[N x 3]` Euler angles `(roll, pitch, yaw)` to `[N x 3 x 3]`
    /// rotation matrices `Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn rotation_zyx(self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            if x.rank() != 2 || x.shape()[1] != 3 {
                return Err(HitError::dim(format!(
                    "rotation_zyx expects [N x 3], got {:?}",
                    x.shape()
                )));
            }
            let n = x.shape()[0];
            let mut data = Vec::with_capacity(n * 9);
            for e in x.data().chunks(3) {
                let r = rotation_zyx(e[0], e[1], e[2]);
                for row in r {
                    data.extend_from_slice(&row);
                }
            }
            Tensor::new(&[n, 3, 3], data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::RotationZyx { x: self.id }, rg))
    }

    /// Averages rows of `[M x D]` into `cells` groups. `members[c]` lists the
    /// rows of cell `c` in the order they are summed; empty cells yield the
    /// zero row.
    pub fn pool_mean(self, members: &[Vec<usize>]) -> Result<Var<'t>> {
        let (value, assign, counts) = {
            let x = self.value();
            if x.rank() != 2 {
                return Err(HitError::dim(format!("pool_mean of {:?}", x.shape())));
            }
            let (m, d) = (x.shape()[0], x.shape()[1]);
            let mut assign = vec![usize::MAX; m];
            let mut counts = vec![0; members.len()];
            let mut data = vec![0.0; members.len() * d];
            for (c, rows) in members.iter().enumerate() {
                counts[c] = rows.len();
                if rows.is_empty() {
                    continue;
                }
                let out = &mut data[c * d..(c + 1) * d];
                for &r in rows {
                    if r >= m || assign[r] != usize::MAX {
                        return Err(HitError::dim(format!(
                            "pool_mean row {} out of range or assigned twice",
                            r
                        )));
                    }
                    assign[r] = c;
                    for (o, v) in out.iter_mut().zip(x.row(r)) {
                        *o += v;
                    }
                }
                let inv = rows.len() as f64;
                for o in out.iter_mut() {
                    *o /= inv;
                }
            }
            if assign.contains(&usize::MAX) {
                return Err(HitError::dim("pool_mean leaves a row unassigned"));
            }
            (Tensor::new(&[members.len(), d], data)?, assign, counts)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::PoolMean {
                x: self.id,
                assign,
                counts,
            },
            rg,
        ))
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
