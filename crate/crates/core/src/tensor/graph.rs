use rand::Rng;

use super::conv::ConvGeom;
use super::gemm::{gemm, Layout};
use super::{Float, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Float),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Affine { input: Var, weight: Var, bias: Var },
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    Dropout { input: Var, mask: Vec<Float> },
    BceWithLogits { logits: Var, targets: Vec<Float> },
    Gather { input: Var, rows: Vec<usize> },
    CenterOnAnchors { input: Var, group: usize, anchors: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn finite(op: &'static str, data: &[Float]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Numerically stable logistic function.
#[inline]
pub(crate) fn stable_sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, inputs: &[Var]) -> Result<Var> {
        finite(op, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op: node_op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(Float, Float) -> Float, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(op, out, node, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: Float) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect());
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: Float = t.data().iter().sum::<Float>() / t.numel() as Float;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| v.max(0.0)).collect());
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| stable_sigmoid(v)).collect());
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(shape_err("reshape", format!("{:?} cannot become {shape:?}", t.shape())));
        }
        let out = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[n, c, h, w] = t.shape() else {
            return Err(shape_err("avg_pool2", format!("expected [N,C,H,W], got {:?}", t.shape())));
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(TensorError::Config { op: "avg_pool2", detail: format!("{h}×{w} is smaller than 2×2") });
        }
        let src = t.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for (plane, dst) in out.chunks_mut(oh * ow).enumerate() {
            let p = &src[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x0) = (2 * oy, 2 * ox);
                    dst[oy * ow + ox] = 0.25 * (p[y * w + x0] + p[y * w + x0 + 1] + p[(y + 1) * w + x0] + p[(y + 1) * w + x0 + 1]);
                }
            }
        }
        self.push("avg_pool2", Tensor::from_parts(vec![n, c, oh, ow], out), Op::AvgPool2(x), &[x])
    }

    /// Mean over the spatial extent: `[N,C,H,W] → [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[n, c, h, w] = t.shape() else {
            return Err(shape_err("global_avg_pool", format!("expected [N,C,H,W], got {:?}", t.shape())));
        };
        let inv = 1.0 / (h * w) as Float;
        let out = t.data().chunks(h * w).map(|p| p.iter().sum::<Float>() * inv).collect();
        self.push("global_avg_pool", Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool(x), &[x])
    }

    /// `input · weight + bias`, with bias broadcast over rows.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ti, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        let (&[n, d], &[dw, m]) = (ti.shape(), tw.shape()) else {
            return Err(shape_err("affine", format!("expected [N,D]·[D,M], got {:?}·{:?}", ti.shape(), tw.shape())));
        };
        if d != dw {
            return Err(shape_err("affine", format!("inner dimensions differ: {d} vs {dw}")));
        }
        if tb.shape() != [m] {
            return Err(shape_err("affine", format!("bias must be [{m}], got {:?}", tb.shape())));
        }
        let mut out: Vec<Float> = (0..n).flat_map(|_| tb.data().iter().copied()).collect();
        gemm(1.0, ti.data(), Layout::row_major(n, d), tw.data(), Layout::row_major(d, m), 1.0, &mut out, Layout::row_major(n, m));
        self.push("affine", Tensor::from_parts(vec![n, m], out), Op::Affine { input, weight, bias }, &[input, weight, bias])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ti, tk, tb) = (self.value(input), self.value(kernel), self.value(bias));
        let geom = ConvGeom::new(ti.shape(), tk.shape(), tb.shape(), stride, padding)?;
        let out = geom.forward(ti.data(), tk.data(), tb.data());
        self.push("conv2d", Tensor::from_parts(geom.out_shape(), out), Op::Conv2d { input, kernel, bias, geom }, &[input, kernel, bias])
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: Float, rng: &mut R, training: bool) -> Result<Var> {
        check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).shape(), rate, rng)?;
        self.dropout_with_mask(x, &mask)
    }

    /// Multiply by a precomputed mask (entries 0 or `1/(1-rate)`).
    pub fn dropout_with_mask(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != mask.shape() {
            return Err(shape_err("dropout", format!("mask {:?} vs input {:?}", mask.shape(), t.shape())));
        }
        let out = t.data().iter().zip(mask.data()).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("dropout", out, Op::Dropout { input: x, mask: mask.data().to_vec() }, &[x])
    }

    /// Binary cross-entropy on logits, summed over columns and averaged over rows.
    ///
    /// Uses `max(x,0) − x·y + ln(1 + e^{−|x|})`, which never overflows.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(shape_err("bce_with_logits", format!("logits {:?} vs targets {:?}", t.shape(), targets.shape())));
        }
        if t.shape().len() != 2 {
            return Err(shape_err("bce_with_logits", format!("expected [B,C], got {:?}", t.shape())));
        }
        if let Some((index, &value)) = targets.data().iter().enumerate().find(|(_, &y)| y != 0.0 && y != 1.0) {
            return Err(TensorError::InvalidTarget { index, value });
        }
        let rows = t.shape()[0] as Float;
        let total: Float = t.data().iter().zip(targets.data()).map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()).sum();
        self.push(
            "bce_with_logits",
            Tensor::scalar(total / rows),
            Op::BceWithLogits { logits, targets: targets.data().to_vec() },
            &[logits],
        )
    }

    /// Select slices along the leading axis; indices may repeat.
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let Some((&lead, rest)) = t.shape().split_first() else {
            return Err(shape_err("gather", "cannot gather from a scalar".into()));
        };
        if rows.is_empty() {
            return Err(shape_err("gather", "no rows requested".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= lead) {
            return Err(shape_err("gather", format!("row {bad} out of range for leading extent {lead}")));
        }
        let stride: usize = rest.iter().product();
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(rest);
        self.push("gather", Tensor::from_parts(shape, out), Op::Gather { input: x, rows: rows.to_vec() }, &[x])
    }

    /// For `x: [G·group, D]`, subtract from every row of each group the mean
    /// of that group's first `anchors` rows.
    pub fn center_on_anchors(&mut self, x: Var, group: usize, anchors: usize) -> Result<Var> {
        let t = self.value(x);
        let &[rows, d] = t.shape() else {
            return Err(shape_err("center_on_anchors", format!("expected [R,D], got {:?}", t.shape())));
        };
        if group == 0 || anchors == 0 || anchors > group || rows % group != 0 {
            return Err(TensorError::Config { op: "center_on_anchors", detail: format!("{rows} rows, group {group}, anchors {anchors}") });
        }
        let src = t.data();
        let inv = 1.0 / anchors as Float;
        let mut out = src.to_vec();
        let mut centroid = vec![0.0; d];
        for g in 0..rows / group {
            let block = &src[g * group * d..(g + 1) * group * d];
            centroid.iter_mut().for_each(|c| *c = 0.0);
            for a in 0..anchors {
                for (c, v) in centroid.iter_mut().zip(&block[a * d..(a + 1) * d]) {
                    *c += v;
                }
            }
            centroid.iter_mut().for_each(|c| *c *= inv);
            for row in out[g * group * d..(g + 1) * group * d].chunks_mut(d) {
                for (o, c) in row.iter_mut().zip(&centroid) {
                    *o -= c;
                }
            }
        }
        self.push("center_on_anchors", Tensor::from_parts(vec![rows, d], out), Op::CenterOnAnchors { input: x, group, anchors }, &[x])
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<Float>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => {
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g.unwrap_or_else(|| vec![0.0; node.value.numel()])))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn propagate(&self, node: &Node, g: &[Float], grads: &mut [Option<Vec<Float>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |dst| add_into(dst, g));
                self.accumulate(grads, *b, |dst| add_into(dst, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |dst| add_into(dst, g));
                self.accumulate(grads, *b, |dst| dst.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |dst| dst.iter_mut().zip(g.iter().zip(vb)).for_each(|(d, (g, y))| *d += g * y));
                self.accumulate(grads, *b, |dst| dst.iter_mut().zip(g.iter().zip(va)).for_each(|(d, (g, x))| *d += g * x));
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, |dst| dst.iter_mut().zip(g).for_each(|(d, g)| *d += g * f));
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |dst| dst.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let share = g[0] / val(*x).len() as Float;
                self.accumulate(grads, *x, |dst| dst.iter_mut().for_each(|d| *d += share));
            }
            Op::Relu(x) => {
                let vx = val(*x);
                self.accumulate(grads, *x, |dst| {
                    for ((d, g), v) in dst.iter_mut().zip(g).zip(vx) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |dst| dst.iter_mut().zip(g.iter().zip(y)).for_each(|(d, (g, y))| *d += g * y * (1.0 - y)));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |dst| add_into(dst, g)),
            Op::AvgPool2(x) => {
                let &[_, _, h, w] = self.nodes[x.0].value.shape() else { unreachable!() };
                let (oh, ow) = (h / 2, w / 2);
                self.accumulate(grads, *x, |dst| {
                    for (plane, go) in g.chunks(oh * ow).enumerate() {
                        let p = &mut dst[plane * h * w..(plane + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let share = 0.25 * go[oy * ow + ox];
                                let (y, x0) = (2 * oy, 2 * ox);
                                p[y * w + x0] += share;
                                p[y * w + x0 + 1] += share;
                                p[(y + 1) * w + x0] += share;
                                p[(y + 1) * w + x0 + 1] += share;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let &[_, _, h, w] = self.nodes[x.0].value.shape() else { unreachable!() };
                let inv = 1.0 / (h * w) as Float;
                self.accumulate(grads, *x, |dst| {
                    for (plane, &go) in dst.chunks_mut(h * w).zip(g) {
                        plane.iter_mut().for_each(|d| *d += go * inv);
                    }
                });
            }
            Op::Affine { input, weight, bias } => {
                let (n, d) = (self.nodes[input.0].value.shape()[0], self.nodes[input.0].value.shape()[1]);
                let m = self.nodes[weight.0].value.shape()[1];
                let (vi, vw) = (val(*input), val(*weight));
                self.accumulate(grads, *input, |dst| {
                    gemm(1.0, g, Layout::row_major(n, m), vw, Layout::transposed(m, d), 1.0, dst, Layout::row_major(n, d))
                });
                self.accumulate(grads, *weight, |dst| {
                    gemm(1.0, vi, Layout::transposed(d, n), g, Layout::row_major(n, m), 1.0, dst, Layout::row_major(d, m))
                });
                self.accumulate(grads, *bias, |dst| {
                    for row in g.chunks(m) {
                        add_into(dst, row);
                    }
                });
            }
            Op::Conv2d { input, kernel, bias, geom } => {
                let mut gk = self.take_or_zero(grads, *kernel);
                let mut gb = self.take_or_zero(grads, *bias);
                let mut gi = self.take_or_zero(grads, *input);
                geom.backward(val(*input), val(*kernel), g, gk.as_deref_mut(), gb.as_deref_mut(), gi.as_deref_mut());
                grads[kernel.0] = gk.or(grads[kernel.0].take());
                grads[bias.0] = gb.or(grads[bias.0].take());
                grads[input.0] = gi.or(grads[input.0].take());
            }
            Op::Dropout { input, mask } => {
                self.accumulate(grads, *input, |dst| dst.iter_mut().zip(g.iter().zip(mask)).for_each(|(d, (g, m))| *d += g * m));
            }
            Op::BceWithLogits { logits, targets } => {
                let lt = &self.nodes[logits.0].value;
                let scale = g[0] / lt.shape()[0] as Float;
                self.accumulate(grads, *logits, |dst| {
                    for ((d, &x), &y) in dst.iter_mut().zip(lt.data()).zip(targets) {
                        *d += scale * (stable_sigmoid(x) - y);
                    }
                });
            }
            Op::Gather { input, rows } => {
                let stride: usize = self.nodes[input.0].value.shape()[1..].iter().product();
                self.accumulate(grads, *input, |dst| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut dst[r * stride..(r + 1) * stride], &g[i * stride..(i + 1) * stride]);
                    }
                });
            }
            Op::CenterOnAnchors { input, group, anchors } => {
                let d = self.nodes[input.0].value.shape()[1];
                let (group, anchors) = (*group, *anchors);
                let inv = 1.0 / anchors as Float;
                self.accumulate(grads, *input, |dst| {
                    let mut total = vec![0.0; d];
                    for (blk_g, blk_d) in g.chunks(group * d).zip(dst.chunks_mut(group * d)) {
                        add_into(blk_d, blk_g);
                        total.iter_mut().for_each(|t| *t = 0.0);
                        for row in blk_g.chunks(d) {
                            add_into(&mut total, row);
                        }
                        for a in 0..anchors {
                            for (dv, t) in blk_d[a * d..(a + 1) * d].iter_mut().zip(&total) {
                                *dv -= t * inv;
                            }
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<Float>>], v: Var, f: impl FnOnce(&mut [Float])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn take_or_zero(&self, grads: &mut [Option<Vec<Float>>], v: Var) -> Option<Vec<Float>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]))
    }
}

fn add_into(dst: &mut [Float], src: &[Float]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn check_rate(rate: Float) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Config { op: "dropout", detail: format!("rate {rate} outside [0, 1)") });
    }
    Ok(())
}

/// Sample an inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1/(1-rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], rate: Float, rng: &mut R) -> Result<Tensor> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    let data = (0..n).map(|_| if (rng.gen::<f64>() as Float) < rate { 0.0 } else { keep }).collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf; `None` for any other node.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.leaves.get_mut(v.0).and_then(Option::take)
    }
}
