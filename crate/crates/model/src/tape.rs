//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! Every operation appends a node holding its value; `backward` sweeps the
//! nodes in reverse insertion order, which is a valid topological order
//! because inputs always precede their consumers.

use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation with a hand-written gradient, used for fused kernels.
pub trait CustomOp {
    /// Gradients with respect to each input, given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterRows(Var, Rc<Vec<usize>>),
    LeakyRelu(Var, f64),
    Elu(Var),
    Exp(Var),
    Square(Var),
    HeadDot(Var, Var, usize),
    SegmentSoftmax(Var, Rc<Vec<usize>>, usize),
    HeadScale(Var, Var, usize),
    HeadMean(Var, usize),
    Column(Var, usize),
    ConcatCols(Vec<Var>),
    WrapDegrees(Var),
    DotConst(Var, Rc<Vec<f64>>),
    Sum(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(node, id)| self.grads[node].as_ref().map(|g| (id, g)))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Wraps degrees into `(-180, 180]`.
pub fn wrap_degrees(d: f64) -> f64 {
    let r = d.to_radians();
    r.sin().atan2(r.cos()).to_degrees()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf whose gradient is reported by `backward`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(va.rows, vb.cols);
        gemm(1.0, va, false, vb, false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a + 1·bias` with `bias` a single row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let vb = self.value(bias);
        assert_eq!(vb.rows, 1, "bias must be a row vector");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols, vb.cols, "bias width mismatch");
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&vb.data) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRow(a, bias), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, w: Rc<Vec<f64>>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), w.len(), "constant length mismatch");
        let out = Tensor::from_vec(
            va.rows,
            va.cols,
            va.data.iter().zip(w.iter()).map(|(x, y)| x * y).collect(),
        );
        let ng = self.ng(a);
        self.push(out, Op::MulConst(a, w), ng)
    }

    /// `a · scale + shift` elementwise (scale and shift constant).
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let s = self.scale(a, scale);
        if shift == 0.0 {
            return s;
        }
        let rows = self.value(s).rows;
        let cols = self.value(s).cols;
        let c = self.constant(Tensor::filled(rows, cols, shift));
        self.add(s, c)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(idx.len(), va.cols);
        for (e, &i) in idx.iter().enumerate() {
            out.row_mut(e).copy_from_slice(va.row(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    /// Sums row `e` of `a` into output row `idx[e]`.
    pub fn scatter_rows(&mut self, a: Var, idx: Rc<Vec<usize>>, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows, idx.len(), "scatter index length mismatch");
        let mut out = Tensor::zeros(n, va.cols);
        for (e, &i) in idx.iter().enumerate() {
            for (o, x) in out.row_mut(i).iter_mut().zip(va.row(e)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::ScatterRows(a, idx), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        let ng = self.ng(a);
        self.push(out, Op::Elu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    /// Per-head dot product: `z` is `E × (H·D)`, `att` is `1 × (H·D)`; output `E × H`.
    pub fn head_dot(&mut self, z: Var, att: Var, heads: usize) -> Var {
        let (vz, va) = (self.value(z), self.value(att));
        let d = vz.cols / heads;
        assert_eq!(va.cols, vz.cols, "attention vector width mismatch");
        let mut out = Tensor::zeros(vz.rows, heads);
        for e in 0..vz.rows {
            let row = vz.row(e);
            for h in 0..heads {
                out.data[e * heads + h] = row[h * d..(h + 1) * d]
                    .iter()
                    .zip(&va.data[h * d..(h + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        let ng = self.ng(z) || self.ng(att);
        self.push(out, Op::HeadDot(z, att, heads), ng)
    }

    /// Softmax of each column over rows sharing the same segment id.
    pub fn segment_softmax(&mut self, scores: Var, seg: Rc<Vec<usize>>, n_seg: usize) -> Var {
        let vs = self.value(scores);
        let cols = vs.cols;
        let mut max = Tensor::filled(n_seg, cols, f64::NEG_INFINITY);
        for (e, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                let m = &mut max.data[s * cols + c];
                *m = m.max(vs.data[e * cols + c]);
            }
        }
        let mut out = Tensor::zeros(vs.rows, cols);
        let mut denom = Tensor::zeros(n_seg, cols);
        for (e, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                let x = (vs.data[e * cols + c] - max.data[s * cols + c]).exp();
                out.data[e * cols + c] = x;
                denom.data[s * cols + c] += x;
            }
        }
        for (e, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                out.data[e * cols + c] /= denom.data[s * cols + c];
            }
        }
        let ng = self.ng(scores);
        self.push(out, Op::SegmentSoftmax(scores, seg, n_seg), ng)
    }

    /// Scales head block `h` of each row of `msg` by `alpha[row, h]`.
    pub fn head_scale(&mut self, msg: Var, alpha: Var, heads: usize) -> Var {
        let (vm, va) = (self.value(msg), self.value(alpha));
        let d = vm.cols / heads;
        let mut out = vm.clone();
        for e in 0..vm.rows {
            for h in 0..heads {
                let w = va.data[e * heads + h];
                for x in &mut out.data[e * vm.cols + h * d..e * vm.cols + (h + 1) * d] {
                    *x *= w;
                }
            }
        }
        let ng = self.ng(msg) || self.ng(alpha);
        self.push(out, Op::HeadScale(msg, alpha, heads), ng)
    }

    /// Mean over `heads` equal-width column blocks.
    pub fn head_mean(&mut self, a: Var, heads: usize) -> Var {
        let va = self.value(a);
        let d = va.cols / heads;
        let mut out = Tensor::zeros(va.rows, d);
        for r in 0..va.rows {
            for h in 0..heads {
                for j in 0..d {
                    out.data[r * d + j] += va.data[r * va.cols + h * d + j] / heads as f64;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::HeadMean(a, heads), ng)
    }

    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let va = self.value(a);
        let out = Tensor::from_vec(va.rows, 1, (0..va.rows).map(|r| va.get(r, j)).collect());
        let ng = self.ng(a);
        self.push(out, Op::Column(a, j), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + vp.cols].copy_from_slice(vp.row(r));
            }
            off += vp.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Shortest-arc wrap of degree differences; gradient is taken as 1.
    pub fn wrap_degrees(&mut self, a: Var) -> Var {
        let out = self.value(a).map(wrap_degrees);
        let ng = self.ng(a);
        self.push(out, Op::WrapDegrees(a), ng)
    }

    /// `Σ a ⊙ w` as a 1×1 tensor.
    pub fn dot_const(&mut self, a: Var, w: Rc<Vec<f64>>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), w.len(), "weight length mismatch");
        let s = va.data.iter().zip(w.iter()).map(|(x, y)| x * y).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::DotConst(a, w), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Appends a node whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(output, Op::Custom(inputs.to_vec(), op), ng)
    }

    /// Branch taken by every piecewise operation: the sign of each LeakyReLU
    /// and ELU input and the turns removed by each angle wrap. Two evaluations
    /// with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<i64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu(a, _) | Op::Elu(a) => {
                    out.extend(self.value(a).data.iter().map(|&x| i64::from(x > 0.0)));
                }
                Op::WrapDegrees(a) => {
                    out.extend(
                        self.value(a)
                            .data
                            .iter()
                            .map(|&x| ((x - wrap_degrees(x)) / 360.0).round() as i64),
                    );
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut params = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(id) = node.op {
                params.push((idx, id));
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        params.reverse();
        Gradients { grads, params }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(va.rows, va.cols);
                    gemm(1.0, g, false, vb, true, 0.0, &mut ga);
                    send(*a, ga, grads);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(vb.rows, vb.cols);
                    gemm(1.0, va, true, g, false, 0.0, &mut gb);
                    send(*b, gb, grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    send(*a, g.zip_map(vb, |x, y| x * y), grads);
                }
                if self.ng(*b) {
                    send(*b, g.zip_map(va, |x, y| x * y), grads);
                }
            }
            Op::AddRow(a, bias) => {
                send(*a, g.clone(), grads);
                if self.ng(*bias) {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    send(*bias, gb, grads);
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|x| c * x), grads),
            Op::MulConst(a, w) => {
                let t = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(w.iter()).map(|(x, y)| x * y).collect(),
                );
                send(*a, t, grads);
            }
            Op::GatherRows(a, idx) => {
                let va = self.value(*a);
                let mut ga = Tensor::zeros(va.rows, va.cols);
                for (e, &i) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(e)) {
                        *o += x;
                    }
                }
                send(*a, ga, grads);
            }
            Op::ScatterRows(a, idx) => {
                let mut ga = Tensor::zeros(idx.len(), g.cols);
                for (e, &i) in idx.iter().enumerate() {
                    ga.row_mut(e).copy_from_slice(g.row(i));
                }
                send(*a, ga, grads);
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(*a);
                send(*a, g.zip_map(va, |x, y| if y > 0.0 { x } else { slope * x }), grads);
            }
            Op::Elu(a) => {
                let va = self.value(*a);
                let t = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&va.data)
                        .zip(&out.data)
                        .map(|((gx, x), o)| if *x > 0.0 { *gx } else { gx * (o + 1.0) })
                        .collect(),
                );
                send(*a, t, grads);
            }
            Op::Exp(a) => send(*a, g.zip_map(out, |x, y| x * y), grads),
            Op::Square(a) => {
                let va = self.value(*a);
                send(*a, g.zip_map(va, |x, y| 2.0 * x * y), grads);
            }
            Op::HeadDot(z, att, heads) => {
                let (vz, va) = (self.value(*z), self.value(*att));
                let d = vz.cols / heads;
                if self.ng(*z) {
                    let mut gz = Tensor::zeros(vz.rows, vz.cols);
                    for e in 0..vz.rows {
                        for h in 0..*heads {
                            let ge = g.data[e * heads + h];
                            for j in h * d..(h + 1) * d {
                                gz.data[e * vz.cols + j] = ge * va.data[j];
                            }
                        }
                    }
                    send(*z, gz, grads);
                }
                if self.ng(*att) {
                    let mut ga = Tensor::zeros(1, va.cols);
                    for e in 0..vz.rows {
                        for h in 0..*heads {
                            let ge = g.data[e * heads + h];
                            for j in h * d..(h + 1) * d {
                                ga.data[j] += ge * vz.data[e * vz.cols + j];
                            }
                        }
                    }
                    send(*att, ga, grads);
                }
            }
            Op::SegmentSoftmax(s, seg, n_seg) => {
                let cols = out.cols;
                let mut dot = Tensor::zeros(*n_seg, cols);
                for (e, &sg) in seg.iter().enumerate() {
                    for c in 0..cols {
                        dot.data[sg * cols + c] += out.data[e * cols + c] * g.data[e * cols + c];
                    }
                }
                let mut gs = Tensor::zeros(out.rows, cols);
                for (e, &sg) in seg.iter().enumerate() {
                    for c in 0..cols {
                        let k = e * cols + c;
                        gs.data[k] = out.data[k] * (g.data[k] - dot.data[sg * cols + c]);
                    }
                }
                send(*s, gs, grads);
            }
            Op::HeadScale(msg, alpha, heads) => {
                let (vm, va) = (self.value(*msg), self.value(*alpha));
                let d = vm.cols / heads;
                if self.ng(*msg) {
                    let mut gm = g.clone();
                    for e in 0..vm.rows {
                        for h in 0..*heads {
                            let w = va.data[e * heads + h];
                            for x in &mut gm.data[e * vm.cols + h * d..e * vm.cols + (h + 1) * d] {
                                *x *= w;
                            }
                        }
                    }
                    send(*msg, gm, grads);
                }
                if self.ng(*alpha) {
                    let mut ga = Tensor::zeros(va.rows, va.cols);
                    for e in 0..vm.rows {
                        for h in 0..*heads {
                            let lo = e * vm.cols + h * d;
                            ga.data[e * heads + h] = g.data[lo..lo + d]
                                .iter()
                                .zip(&vm.data[lo..lo + d])
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    send(*alpha, ga, grads);
                }
            }
            Op::HeadMean(a, heads) => {
                let va = self.value(*a);
                let d = g.cols;
                let mut ga = Tensor::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    for h in 0..*heads {
                        for j in 0..d {
                            ga.data[r * va.cols + h * d + j] = g.data[r * d + j] / *heads as f64;
                        }
                    }
                }
                send(*a, ga, grads);
            }
            Op::Column(a, j) => {
                let va = self.value(*a);
                let mut ga = Tensor::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    ga.data[r * va.cols + j] = g.data[r];
                }
                send(*a, ga, grads);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let vp = self.value(p);
                    if self.ng(p) {
                        let mut gp = Tensor::zeros(vp.rows, vp.cols);
                        for r in 0..vp.rows {
                            gp.row_mut(r)
                                .copy_from_slice(&g.data[r * g.cols + off..r * g.cols + off + vp.cols]);
                        }
                        send(p, gp, grads);
                    }
                    off += vp.cols;
                }
            }
            Op::WrapDegrees(a) => send(*a, g.clone(), grads),
            Op::DotConst(a, w) => {
                let va = self.value(*a);
                let s = g.item();
                send(
                    *a,
                    Tensor::from_vec(va.rows, va.cols, w.iter().map(|x| s * x).collect()),
                    grads,
                );
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                send(*a, Tensor::filled(va.rows, va.cols, g.item()), grads);
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                for (&v, gi) in inputs.iter().zip(op.backward(&values, out, g)) {
                    if let Some(gi) = gi {
                        send(v, gi, grads);
                    }
                }
            }
        }
    }
}
