//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]; node ids are
//! assigned in execution order, so walking ids downwards from the loss is a
//! valid reverse topological order. A tape supports exactly one
//! [`Tape::backward`] call; build a fresh tape for every forward pass.
//!
//! Broadcasting is limited to a right operand whose shape is a suffix of the
//! left operand's shape, or a single-element right operand.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value: value.with_grad(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Abs,
    Relu,
    Sigmoid,
    /// `ln(1 + e^x)`, evaluated as `max(x, 0) + ln(1 + e^-|x|)`.
    Softplus,
}

/// Geometry of a 2-D cross-correlation over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Reshape { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Unary { x: usize, kind: UnaryKind },
    Sum { x: usize },
    SumAxis { x: usize, outer: usize, len: usize, inner: usize },
    Softmax { x: usize, outer: usize, len: usize, inner: usize, scale: f64 },
    Concat { parts: Vec<(usize, usize)>, outer: usize, inner: usize },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    Gather { x: usize, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
    consumed: Cell<bool>,
    tracking: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    tracked: Vec<bool>,
    params: HashMap<String, usize>,
}

impl Gradients {
    /// Gradient for a grad-enabled leaf; zeros if the loss does not depend
    /// on it. `None` for non-leaf or untracked nodes.
    pub fn wrt(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.by_id(v.id)
    }

    pub fn param(&self, name: &str) -> Option<Vec<f64>> {
        self.params.get(name).and_then(|&id| self.by_id(id))
    }

    fn by_id(&self, id: usize) -> Option<Vec<f64>> {
        if id >= self.tracked.len() || !self.tracked[id] {
            return None;
        }
        Some(match &self.leaves[id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[id]],
        })
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Right operand broadcasts into left when equal, single-element, or a
/// trailing suffix of the left shape.
fn broadcastable(big: &[usize], small: &[usize]) -> bool {
    let small_len: usize = small.iter().product();
    if big == small || small_len == 1 {
        return true;
    }
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            consumed: Cell::new(false),
            tracking: true,
        }
    }

    /// A tape that never records gradient requirements; `backward` on it
    /// yields no leaf gradients. Used for inference.
    pub fn inference() -> Self {
        Tape {
            tracking: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            requires_grad: requires_grad && self.tracking,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by `backward`.
    pub fn variable(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Bind a named parameter. Binding the same name twice returns the
    /// same leaf, so shared weights accumulate a single gradient.
    pub fn param(&self, p: &Param) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(&p.name) {
            return Var { tape: self, id };
        }
        let v = self.push(
            p.value.shape().to_vec(),
            p.value.data().to_vec(),
            Op::Leaf,
            p.value.grad_enabled(),
        );
        self.params.borrow_mut().insert(p.name.clone(), v.id);
        v
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let nodes = self.nodes.borrow();
        let base = &nodes[first.id].shape;
        if axis >= base.len() {
            return Err(Error::dim("concat", base, &[axis]));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &nodes[p.id].shape;
            if s.len() != base.len()
                || s.iter()
                    .zip(base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::dim("concat", base, s));
            }
            extents.push((p.id, s[axis]));
        }
        let (outer, _, inner) = split_axis(base, axis);
        let total: usize = extents.iter().map(|e| e.1).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(id, len) in &extents {
                let src = &nodes[id].data;
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let ids: Vec<usize> = extents.iter().map(|e| e.0).collect();
        let rg = ids.iter().any(|&i| nodes[i].requires_grad);
        drop(nodes);
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                parts: extents,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Cross-correlation of `x: [C, H, W]` with `w: [O, C, kh, kw]` plus
    /// per-channel bias `b: [O]`.
    pub fn conv2d<'t>(
        &'t self,
        x: Var<'t>,
        w: Var<'t>,
        b: Var<'t>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let xs = &nodes[x.id].shape;
        let ws = &nodes[w.id].shape;
        let bs = &nodes[b.id].shape;
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::dim("conv2d", xs, ws));
        }
        if bs.as_slice() != [ws[0]] {
            return Err(Error::dim("conv2d bias", ws, bs));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (in_ch, in_h, in_w) = (xs[0], xs[1], xs[2]);
        let (out_ch, kh, kw) = (ws[0], ws[2], ws[3]);
        let ph = in_h + 2 * pad;
        let pw = in_w + 2 * pad;
        if ph < kh || pw < kw {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {ph}x{pw}"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output size is not integral: input {in_h}x{in_w}, kernel {kh}x{kw}, \
                 stride {stride}, padding {pad}"
            )));
        }
        let geom = ConvGeom {
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        };
        let data = conv_forward(&nodes[x.id].data, &nodes[w.id].data, &nodes[b.id].data, &geom);
        let rg = [x.id, w.id, b.id].iter().any(|&i| nodes[i].requires_grad);
        drop(nodes);
        Ok(self.push(
            vec![geom.out_ch, geom.out_h, geom.out_w],
            data,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: b.id,
                geom,
            },
            rg,
        ))
    }

    /// `out[i] = x.flat[indices[i]]`, shaped as `shape`. The gradient
    /// scatters back onto the selected elements.
    pub fn gather<'t>(
        &'t self,
        x: Var<'t>,
        indices: Vec<usize>,
        shape: Vec<usize>,
    ) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let src = &nodes[x.id].data;
        if shape.iter().product::<usize>() != indices.len() || shape.contains(&0) {
            return Err(Error::dim("gather", &shape, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim("gather index", &[bad], &[src.len()]));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let rg = nodes[x.id].requires_grad;
        drop(nodes);
        Ok(self.push(shape, data, Op::Gather { x: x.id, indices }, rg))
    }

    /// Fingerprint of every piecewise choice made so far: relu and abs
    /// input signs and gather indices. Two passes with equal fingerprints
    /// lie on the same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{DefaultHasher, Hash, Hasher};
        let nodes = self.nodes.borrow();
        let mut h = DefaultHasher::new();
        for (id, node) in nodes.iter().enumerate() {
            match &node.op {
                Op::Unary {
                    x,
                    kind: UnaryKind::Relu | UnaryKind::Abs,
                } => {
                    id.hash(&mut h);
                    for v in &nodes[*x].data {
                        (*v > 0.0).hash(&mut h);
                        (*v == 0.0).hash(&mut h);
                    }
                }
                Op::Gather { indices, .. } => {
                    id.hash(&mut h);
                    indices.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Run the reverse pass from a single-element `loss`.
    ///
    /// A tape can be differentiated only once; a second call is a contract
    /// error.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, node, id, &g, &mut grads);
        }
        let tracked = nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .collect();
        let lens = nodes.iter().map(|n| n.data.len()).collect();
        Ok(Gradients {
            leaves: grads,
            lens,
            tracked,
            params: self.params.borrow().clone(),
        })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
        slot @ None => *slot = Some(g),
    }
}

/// Sum a full-size gradient down to a broadcast operand of length `small`.
fn reduce_broadcast(g: &[f64], small: usize) -> Vec<f64> {
    if g.len() == small {
        return g.to_vec();
    }
    let mut out = vec![0.0; small];
    for chunk in g.chunks(small) {
        out.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.out_ch * g.out_h * g.out_w];
    let plane = g.out_h * g.out_w;
    for o in 0..g.out_ch {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.in_ch {
            let src = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            let ker = &w[(o * g.in_ch + c) * g.kh * g.kw..(o * g.in_ch + c + 1) * g.kh * g.kw];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = ker[ky * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                *d += wv * srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
fn conv_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let plane = g.out_h * g.out_w;
    let db = (0..g.out_ch)
        .map(|o| gout[o * plane..(o + 1) * plane].iter().sum())
        .collect();
    let in_plane = g.in_h * g.in_w;
    for o in 0..g.out_ch {
        let go = &gout[o * plane..(o + 1) * plane];
        for c in 0..g.in_ch {
            let src = &x[c * in_plane..(c + 1) * in_plane];
            let kbase = (o * g.in_ch + c) * g.kh * g.kw;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[kbase + ky * g.kw + kx];
                    let mut acc = 0.0;
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let row = iy as usize * g.in_w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            let gv = go[oy * g.out_w + ox];
                            acc += gv * src[row + ix as usize];
                            dx[c * in_plane + row + ix as usize] += gv * wv;
                        }
                    }
                    dw[kbase + ky * g.kw + kx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary_forward(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Exp => x.exp(),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Softplus => softplus(x),
    }
}

/// Derivative given the input `x` and output `y`.
fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -1.0,
        UnaryKind::Exp => y,
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Softplus => sigmoid(x),
    }
}

fn propagate(nodes: &[Node], node: &Node, _id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if nodes[a].requires_grad {
                let bt = transpose_raw(&nodes[b].data, k, n);
                accumulate(nodes, grads, a, matmul_raw(g, &bt, m, n, k));
            }
            if nodes[b].requires_grad {
                let at = transpose_raw(&nodes[a].data, m, k);
                accumulate(nodes, grads, b, matmul_raw(&at, g, k, m, n));
            }
        }
        &Op::Transpose { x, rows, cols } => {
            accumulate(nodes, grads, x, transpose_raw(g, cols, rows));
        }
        &Op::Reshape { x } => accumulate(nodes, grads, x, g.to_vec()),
        &Op::Add { a, b } => {
            accumulate(nodes, grads, a, g.to_vec());
            if nodes[b].requires_grad {
                accumulate(nodes, grads, b, reduce_broadcast(g, nodes[b].data.len()));
            }
        }
        &Op::Sub { a, b } => {
            accumulate(nodes, grads, a, g.to_vec());
            if nodes[b].requires_grad {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(nodes, grads, b, reduce_broadcast(&neg, nodes[b].data.len()));
            }
        }
        &Op::Mul { a, b } => {
            let ad = &nodes[a].data;
            let bd = &nodes[b].data;
            let bl = bd.len();
            if nodes[a].requires_grad {
                let ga = g.iter().enumerate().map(|(i, v)| v * bd[i % bl]).collect();
                accumulate(nodes, grads, a, ga);
            }
            if nodes[b].requires_grad {
                let full: Vec<f64> = g.iter().zip(ad).map(|(v, x)| v * x).collect();
                accumulate(nodes, grads, b, reduce_broadcast(&full, bl));
            }
        }
        &Op::Scale { x, c } => {
            accumulate(nodes, grads, x, g.iter().map(|v| v * c).collect());
        }
        &Op::Unary { x, kind } => {
            let xd = &nodes[x].data;
            let gx = g
                .iter()
                .zip(xd)
                .zip(&node.data)
                .map(|((gv, &xv), &yv)| gv * unary_derivative(kind, xv, yv))
                .collect();
            accumulate(nodes, grads, x, gx);
        }
        &Op::Sum { x } => {
            accumulate(nodes, grads, x, vec![g[0]; nodes[x].data.len()]);
        }
        &Op::SumAxis { x, outer, len, inner } => {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(nodes, grads, x, gx);
        }
        &Op::Softmax { x, outer, len, inner, scale } => {
            let y = &node.data;
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum::<f64>() / scale;
                    for l in 0..len {
                        gx[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, x, gx);
        }
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(pid, len) in parts {
                if nodes[pid].requires_grad {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[start..start + len * inner]);
                    }
                    accumulate(nodes, grads, pid, gp);
                }
                offset += len;
            }
        }
        &Op::Conv2d { x, w, b, ref geom } => {
            let (dx, dw, db) = conv_backward(&nodes[x].data, &nodes[w].data, g, geom);
            accumulate(nodes, grads, x, dx);
            accumulate(nodes, grads, w, dw);
            accumulate(nodes, grads, b, db);
        }
        Op::Gather { x, indices } => {
            let mut gx = vec![0.0; nodes[*x].data.len()];
            for (gv, &i) in g.iter().zip(indices) {
                gx[i] += gv;
            }
            accumulate(nodes, grads, *x, gx);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    /// Copy out the current value as a standalone tensor.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node shape is consistent")
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let nodes = self.tape.nodes.borrow();
        let (sa, sb) = (&nodes[self.id].shape, &nodes[other.id].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&nodes[self.id].data, &nodes[other.id].data, m, k, n);
        drop(nodes);
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            vec![m, n],
            data,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Transpose of a rank-2 value.
    pub fn t(self) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let s = &nodes[self.id].shape;
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[2]));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = transpose_raw(&nodes[self.id].data, rows, cols);
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            vec![cols, rows],
            data,
            Op::Transpose {
                x: self.id,
                rows,
                cols,
            },
            rg,
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if shape.contains(&0) || shape.iter().product::<usize>() != n.data.len() {
            return Err(Error::dim("reshape", &n.shape, &shape));
        }
        let data = n.data.clone();
        let rg = n.requires_grad;
        drop(nodes);
        Ok(self.tape.push(shape, data, Op::Reshape { x: self.id }, rg))
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if !broadcastable(&a.shape, &b.shape) {
            return Err(Error::dim(name, &a.shape, &b.shape));
        }
        let bl = b.data.len();
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[i % bl]))
            .collect();
        let shape = a.shape.clone();
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        Ok(self.tape.push(shape, data, op(self.id, other.id), rg))
    }

    /// Elementwise sum; either operand may be the broadcast one.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (big, small) = self.order_for_broadcast(other);
        big.binary(small, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise difference; only the right operand may broadcast.
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise product; either operand may be the broadcast one.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (big, small) = self.order_for_broadcast(other);
        big.binary(small, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn order_for_broadcast(self, other: Var<'t>) -> (Var<'t>, Var<'t>) {
        if self.len() < other.len() {
            (other, self)
        } else {
            (self, other)
        }
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.shape.clone(),
                n.data.iter().map(|v| v * c).collect(),
                n.requires_grad,
            )
        };
        self.tape.push(shape, data, Op::Scale { x: self.id, c }, rg)
    }

    pub fn unary(self, kind: UnaryKind) -> Var<'t> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.shape.clone(),
                n.data.iter().map(|&v| unary_forward(kind, v)).collect(),
                n.requires_grad,
            )
        };
        self.tape.push(shape, data, Op::Unary { x: self.id, kind }, rg)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryKind::Abs)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(UnaryKind::Softplus)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Var<'t> {
        let (data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.data.iter().sum::<f64>(), n.requires_grad)
        };
        self.tape.push(Vec::new(), vec![data], Op::Sum { x: self.id }, rg)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if axis >= n.shape.len() {
            return Err(Error::dim("sum_axis", &n.shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&n.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &n.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = n.shape.clone();
        shape.remove(axis);
        let rg = n.requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            data,
            Op::SumAxis {
                x: self.id,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Softmax along `axis` with max-subtraction. Non-finite input is a
    /// domain error.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_scaled(axis, 1.0)
    }

    /// `scale * softmax(x)`, evaluated as `e_j * (scale / Σe)` so that
    /// equal logits give exactly `scale / n`.
    pub fn softmax_scaled(self, axis: usize, scale: f64) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if axis >= n.shape.len() {
            return Err(Error::dim("softmax", &n.shape, &[axis]));
        }
        if let Some(bad) = n.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "softmax",
                detail: format!("non-finite logit {bad}"),
            });
        }
        let (outer, len, inner) = split_axis(&n.shape, axis);
        let mut data = vec![0.0; n.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| n.data[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (n.data[idx(l)] - max).exp();
                    data[idx(l)] = e;
                    total += e;
                }
                if scale == 1.0 {
                    for l in 0..len {
                        data[idx(l)] /= total;
                    }
                } else {
                    let factor = scale / total;
                    for l in 0..len {
                        data[idx(l)] *= factor;
                    }
                }
            }
        }
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            data,
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
                scale,
            },
            rg,
        ))
    }
}
