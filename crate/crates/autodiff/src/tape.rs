//! Recording tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the inputs
//! its backward rule needs. Node order is a topological order, so the
//! backward pass is a single reverse sweep over the node list.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    broadcast_shapes, broadcast_strides, contiguous_strides, for_each_broadcast, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, inv_std: Vec<f64>, xhat: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Embedding { table: Var, indices: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Select { x: Var, axis: usize, index: usize },
    Expand(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node shapes are valid")
    }

    /// Gradient of the last backward pass with respect to `v`, if it was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Records an input tensor. It takes part in differentiation iff it
    /// carries a gradient buffer.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Records a trainable parameter; its gradient lands in the store on
    /// [`ParamStore::accumulate`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true)
    }

    // ---------------------------------------------------------------- matmul

    /// Batched matrix product `[..., p, q] x [..., q, r] -> [..., p, r]` with
    /// broadcast leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..plan.batch {
            let (ao, bo, co) = plan.offsets(i);
            gemm(
                plan.p, plan.q, plan.r,
                &ad[ao..], plan.q as isize, 1,
                &bd[bo..], plan.r as isize, 1,
                0.0,
                &mut out[co..], plan.r as isize, 1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(plan.out_shape, out, Op::MatMul(a, b), rg))
    }

    // ------------------------------------------------------- elementwise ops

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = if sa == sb { sa.clone() } else { broadcast_shapes(name, &sa, &sb)? };
        let (ad, bd) = (self.data(a), self.data(b));
        let out = if sa == sb {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            let (ast, bst) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
            for_each_broadcast(&out_shape, &ast, &bst, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
            out
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// `max(x, floor)`. The gradient is exactly zero where `x < floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| if v < floor { floor } else { v }, Op::ClampMin(x, floor))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = pairwise_sum(self.data(x));
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = pairwise_sum(d) / d.len() as f64;
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Mean(x), rg)
    }

    // ------------------------------------------------------ neural net pieces

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(xd[base + k * inner]);
                }
                let mut z = 0.0;
                for k in 0..len {
                    let e = (xd[base + k * inner] - mx).exp();
                    out[base + k * inner] = e;
                    z += e;
                }
                for k in 0..len {
                    out[base + k * inner] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TensorError::Config(format!("layer norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / n;
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gd[j] + bd[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, inv_std, xhat }, rg))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`. Returns `x`
    /// itself when not training or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!("dropout rate must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        Ok(self.push(shape, out, Op::Dropout { x, mask }, rg))
    }

    /// Gathers rows of a `[vocab, d]` table, producing `[indices.len(), d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], column: &str) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                msg: format!("table must be 2-D, got {shape:?}"),
            });
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Lookup { column: column.to_string(), index: bad, vocab });
        }
        if indices.is_empty() {
            return Err(TensorError::InvalidShape { op: "embedding", msg: "no indices".into() });
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![indices.len(), d], out, Op::Embedding { table, indices: indices.to_vec() }, rg))
    }

    // ------------------------------------------------------- shape plumbing

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() || shape.contains(&0) {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape(x).to_vec(), rhs: shape.to_vec() });
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                msg: format!("axes {axes:?} are not a permutation for shape {shape:?}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut out = vec![0.0; self.data(x).len()];
        permute_copy(self.data(x), &shape, axes, &mut out, false);
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape { op: "concat", msg: format!("axis {axis} out of range for {base:?}") });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = vec![0.0; out_shape.iter().product()];
        let mut offset = 0;
        for &v in inputs {
            let len = self.shape(v)[axis];
            let d = self.data(v);
            for o in 0..outer {
                let src = &d[o * len * inner..(o + 1) * len * inner];
                let dst = o * total * inner + offset * inner;
                out[dst..dst + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out_shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Picks one index along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "select",
                msg: format!("index {index} on axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * len + index) * inner;
            out.extend_from_slice(&d[start..start + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Select { x, axis, index }, rg))
    }

    /// Broadcasts `x` to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if broadcast_shapes("expand", &xs, shape)? != shape {
            return Err(TensorError::Shape { op: "expand", lhs: xs, rhs: shape.to_vec() });
        }
        let xst = broadcast_strides(&xs, shape);
        let zero = vec![0; shape.len()];
        let d = self.data(x);
        let mut out = vec![0.0; shape.iter().product()];
        for_each_broadcast(shape, &xst, &zero, |o, ix, _| out[o] = d[ix]);
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Expand(x), rg))
    }

    // -------------------------------------------------------------- backward

    /// Computes gradients of the scalar `loss` with respect to every node
    /// that requires grad. Gradients from a previous pass on this tape are
    /// discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backward_node(idx, &g);
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        let data = |v: Var| nodes[v.0].data.as_slice();
        let shape = |v: Var| nodes[v.0].shape.as_slice();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let plan = MatmulPlan::new(shape(a), shape(b)).expect("validated in forward");
                if let Some(ga) = acc(nodes, grads, a) {
                    for i in 0..plan.batch {
                        let (ao, bo, co) = plan.offsets(i);
                        gemm(
                            plan.p, plan.r, plan.q,
                            &g[co..], plan.r as isize, 1,
                            &data(b)[bo..], 1, plan.r as isize,
                            1.0,
                            &mut ga[ao..], plan.q as isize, 1,
                        );
                    }
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    for i in 0..plan.batch {
                        let (ao, bo, co) = plan.offsets(i);
                        gemm(
                            plan.q, plan.p, plan.r,
                            &data(a)[ao..], 1, plan.q as isize,
                            &g[co..], plan.r as isize, 1,
                            1.0,
                            &mut gb[bo..], plan.r as isize, 1,
                        );
                    }
                }
            }
            Op::Add(a, b) => binary_backward(nodes, grads, idx, *a, *b, g, |g, _, _| (g, g)),
            Op::Sub(a, b) => binary_backward(nodes, grads, idx, *a, *b, g, |g, _, _| (g, -g)),
            Op::Mul(a, b) => binary_backward(nodes, grads, idx, *a, *b, g, |g, x, y| (g * y, g * x)),
            Op::Div(a, b) => {
                binary_backward(nodes, grads, idx, *a, *b, g, |g, x, y| (g / y, -g * x / (y * y)))
            }
            Op::Scale(x, c) => {
                let c = *c;
                unary_backward(nodes, grads, idx, *x, g, |g, _, _| g * c)
            }
            Op::AddScalar(x) => unary_backward(nodes, grads, idx, *x, g, |g, _, _| g),
            Op::Relu(x) => unary_backward(nodes, grads, idx, *x, g, |g, v, _| if v > 0.0 { g } else { 0.0 }),
            Op::Exp(x) => unary_backward(nodes, grads, idx, *x, g, |g, _, y| g * y),
            Op::Log(x) => unary_backward(nodes, grads, idx, *x, g, |g, v, _| g / v),
            Op::Square(x) => unary_backward(nodes, grads, idx, *x, g, |g, v, _| 2.0 * v * g),
            Op::Softplus(x) => unary_backward(nodes, grads, idx, *x, g, |g, v, _| g * sigmoid(v)),
            Op::ClampMin(x, floor) => {
                let floor = *floor;
                unary_backward(nodes, grads, idx, *x, g, |g, v, _| if v < floor { 0.0 } else { g })
            }
            Op::Sum(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = data(*x).len() as f64;
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0] / n);
                }
            }
            Op::Softmax { x, axis } => {
                let y = &node.data;
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                if let Some(gx) = acc(nodes, grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                            for k in 0..len {
                                let p = base + k * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, inv_std, xhat } => {
                let n = *node.shape.last().expect("non-scalar");
                let rows = inv_std.len();
                if let Some(gg) = acc(nodes, grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *beta) {
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g[r * n + j];
                        }
                    }
                }
                let gamma_d = data(*gamma);
                if let Some(gx) = acc(nodes, grads, *x) {
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let d = g[r * n + j] * gamma_d[j];
                            dxhat[j] = d;
                            s1 += d;
                            s2 += d * xhat[r * n + j];
                        }
                        for j in 0..n {
                            gx[r * n + j] += inv_std[r] / nf * (nf * dxhat[j] - s1 - xhat[r * n + j] * s2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((o, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let d = shape(*table)[1];
                if let Some(gt) = acc(nodes, grads, *table) {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
                }
            }
            Op::Permute { x, axes } => {
                let in_shape = shape(*x);
                if let Some(gx) = acc(nodes, grads, *x) {
                    // scatter back through the same index mapping
                    permute_copy(g, in_shape, axes, gx, true);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = shape(v)[*axis];
                    if let Some(gv) = acc(nodes, grads, v) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (dst, s) in gv[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                            {
                                *dst += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Select { x, axis, index } => {
                let (outer, len, inner) = split_axis(shape(*x), *axis);
                if let Some(gx) = acc(nodes, grads, *x) {
                    for o in 0..outer {
                        let start = (o * len + index) * inner;
                        for k in 0..inner {
                            gx[start + k] += g[o * inner + k];
                        }
                    }
                }
            }
            Op::Expand(x) => {
                let xst = broadcast_strides(shape(*x), &node.shape);
                let zero = vec![0; node.shape.len()];
                if let Some(gx) = acc(nodes, grads, *x) {
                    for_each_broadcast(&node.shape, &xst, &zero, |o, ix, _| gx[ix] += g[o]);
                }
            }
        }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn unary_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    idx: usize,
    x: Var,
    g: &[f64],
    f: impl Fn(f64, f64, f64) -> f64,
) {
    let (xd, yd) = (&nodes[x.0].data, &nodes[idx].data);
    if let Some(gx) = acc(nodes, grads, x) {
        for i in 0..gx.len() {
            gx[i] += f(g[i], xd[i], yd[i]);
        }
    }
}

fn binary_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    idx: usize,
    a: Var,
    b: Var,
    g: &[f64],
    f: impl Fn(f64, f64, f64) -> (f64, f64),
) {
    let out_shape = &nodes[idx].shape;
    let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
    if nodes[a.0].shape == *out_shape && nodes[b.0].shape == *out_shape {
        if let Some(ga) = acc(nodes, grads, a) {
            for i in 0..g.len() {
                ga[i] += f(g[i], ad[i], bd[i]).0;
            }
        }
        if let Some(gb) = acc(nodes, grads, b) {
            for i in 0..g.len() {
                gb[i] += f(g[i], ad[i], bd[i]).1;
            }
        }
        return;
    }
    let ast = broadcast_strides(&nodes[a.0].shape, out_shape);
    let bst = broadcast_strides(&nodes[b.0].shape, out_shape);
    if let Some(ga) = acc(nodes, grads, a) {
        for_each_broadcast(out_shape, &ast, &bst, |o, ia, ib| ga[ia] += f(g[o], ad[ia], bd[ib]).0);
    }
    if let Some(gb) = acc(nodes, grads, b) {
        for_each_broadcast(out_shape, &ast, &bst, |o, ia, ib| gb[ib] += f(g[o], ad[ia], bd[ib]).1);
    }
}

impl ParamStore {
    /// Adds the gradients of the tape's parameter nodes to the stored
    /// gradient buffers. Repeated calls accumulate.
    pub fn accumulate(&mut self, tape: &Tape) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = tape.grads.get(i).and_then(|g| g.as_ref()) {
                    let t = self.get_mut(id);
                    if let Some(buf) = t.grad_mut() {
                        buf.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                    }
                }
            }
        }
    }
}

struct MatmulPlan {
    batch: usize,
    p: usize,
    q: usize,
    r: usize,
    out_shape: Vec<usize>,
    batch_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || TensorError::Shape { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (p, q) = (a[a.len() - 2], a[a.len() - 1]);
        let (q2, r) = (b[b.len() - 2], b[b.len() - 1]);
        if q != q2 {
            return Err(err());
        }
        let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch_shape = broadcast_shapes("matmul", ab, bb).map_err(|_| err())?;
        let a_strides = broadcast_strides(ab, &batch_shape).iter().map(|s| s * p * q).collect();
        let b_strides = broadcast_strides(bb, &batch_shape).iter().map(|s| s * q * r).collect();
        let mut out_shape = batch_shape.clone();
        out_shape.extend([p, r]);
        Ok(Self {
            batch: batch_shape.iter().product(),
            p,
            q,
            r,
            out_shape,
            batch_shape,
            a_strides,
            b_strides,
        })
    }

    /// Offsets of batch element `i` into a, b and the output.
    fn offsets(&self, mut i: usize) -> (usize, usize, usize) {
        let co = i * self.p * self.r;
        let (mut ao, mut bo) = (0, 0);
        for d in (0..self.batch_shape.len()).rev() {
            let k = i % self.batch_shape[d];
            i /= self.batch_shape[d];
            ao += k * self.a_strides[d];
            bo += k * self.b_strides[d];
        }
        (ao, bo, co)
    }
}

/// `c = a * b + beta * c` for an `m x k` by `k x n` product with explicit
/// row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize, k: usize, n: usize,
    a: &[f64], rsa: isize, csa: isize,
    b: &[f64], rsb: isize, csb: isize,
    beta: f64,
    c: &mut [f64], rsc: isize, csc: isize,
) {
    let last = |rs: isize, cs: isize, rows: usize, cols: usize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs
    };
    assert!(last(rsa, csa, m, k) < a.len() as isize);
    assert!(last(rsb, csb, k, n) < b.len() as isize);
    assert!(last(rsc, csc, m, n) < c.len() as isize);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), rsc, csc,
        );
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Copies `src` (shape `in_shape`) into the permuted layout, or with
/// `reverse` scatters a permuted-layout buffer back, accumulating.
fn permute_copy(src: &[f64], in_shape: &[usize], axes: &[usize], dst: &mut [f64], reverse: bool) {
    let in_strides = contiguous_strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    // stride in the input buffer for a step along each output axis
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; out_shape.len()];
    for_each_broadcast(&out_shape, &step, &zero, |o, i, _| {
        if reverse {
            dst[i] += src[o];
        } else {
            dst[o] = src[i];
        }
    });
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Pairwise summation; fixed reduction order regardless of caller.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
