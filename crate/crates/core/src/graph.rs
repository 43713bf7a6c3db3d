//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. [`Graph::backward`] consumes the tape, walks it in reverse
//! and returns the gradient of a scalar root with respect to every leaf that
//! was created with `requires_grad`.
//!
//! Layout conventions: feature maps are `[height, width, channels]`, row
//! major, so a map also reads as a `[positions, channels]` matrix whose row
//! `i` is the feature vector at spatial position `i`.

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Lower clamp applied to probabilities inside the logarithms of the BCE loss.
pub const PROB_CLAMP: f64 = 1e-7;
/// Clamp applied to the foreground fraction of the BCE loss.
pub const ETA_CLAMP: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxColumns(Var),
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    AddBias(Var, Var),
    ScaleChannels(Var, Var),
    MulPositions(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    ConcatChannels(Var, Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    MeanPositions(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    WeightedBce {
        pred: Var,
        target: Tensor,
        eta: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a consumed [`Graph`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the leaf did not require gradients or did not reach the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", value.data())?;
        Ok(self.push_node(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Standard matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?}", [m, k], [k2, n]),
            ));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let value = Tensor::from_parts(vec![c, r], transpose_kernel(self.value(a).data(), r, c));
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    /// Softmax down each column of a matrix, with per-column max subtraction.
    pub fn softmax_columns(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("softmax_columns", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let max = (0..r).map(|i| x[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..r {
                let e = (x[i * c + j] - max).exp();
                out[i * c + j] = e;
                total += e;
            }
            for i in 0..r {
                out[i * c + j] /= total;
            }
        }
        let value = Tensor::from_parts(vec![r, c], out);
        self.push("softmax_columns", value, Op::SoftmaxColumns(a), &[a])
    }

    /// Zero-padded cross-correlation of an `[H, W, Cin]` map with a
    /// `[kh, kw, Cin, Cout]` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(k), stride, pad)?;
        let out = geom.forward(self.value(x).data(), self.value(k).data());
        let value = Tensor::from_parts(vec![geom.ho, geom.wo, geom.cout], out);
        self.push("conv2d", value, Op::Conv2d { x, k, stride, pad }, &[x, k])
    }

    /// Adds a per-channel bias `[C]` at every position of `[..., C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.channel_vector_len("add_bias", x, b)?;
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("add_bias", value, Op::AddBias(x, b), &[x, b])
    }

    /// Multiplies channel `c` of every position of `[..., C]` by `v[c]`.
    pub fn scale_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.channel_vector_len("scale_channels", x, v)?;
        let scale = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &s) in row.iter_mut().zip(scale) {
                *o *= s;
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("scale_channels", value, Op::ScaleChannels(x, v), &[x, v])
    }

    fn channel_vector_len(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let c = self.value(x).last_dim();
        if self.value(v).numel() != c {
            return Err(Error::dim(
                op,
                format!(
                    "channel vector {:?} does not match map {:?}",
                    self.shape(v),
                    self.shape(x)
                ),
            ));
        }
        Ok(c)
    }

    /// Multiplies every channel of position `p` of `[..., C]` by `g[p]`.
    pub fn mul_positions(&mut self, x: Var, g: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        let positions = self.value(x).numel() / c;
        if self.value(g).numel() != positions {
            return Err(Error::dim(
                "mul_positions",
                format!(
                    "{} per-position scalars for map {:?}",
                    self.value(g).numel(),
                    self.shape(x)
                ),
            ));
        }
        let gate = self.value(g).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &s) in out.chunks_exact_mut(c).zip(gate) {
            for o in row {
                *o *= s;
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("mul_positions", value, Op::MulPositions(x, g), &[x, g])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_with(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_with(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        self.push("abs", out, Op::Abs(a), &[a])
    }

    /// Concatenates `[..., Ca]` and `[..., Cb]` into `[..., Ca + Cb]`, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim(
                "concat_channels",
                format!("spatial shapes of {sa:?} and {sb:?} differ"),
            ));
        }
        let (ca, cb) = (self.value(a).last_dim(), self.value(b).last_dim());
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("nonempty shape") = ca + cb;
        let mut out = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        for (ra, rb) in self
            .value(a)
            .data()
            .chunks_exact(ca)
            .zip(self.value(b).data().chunks_exact(cb))
        {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let value = Tensor::from_parts(shape, out);
        self.push("concat_channels", value, Op::ConcatChannels(a, b), &[a, b])
    }

    /// Bilinear upsampling of `[H, W, C]` by an integer factor (align-corners false).
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [h, w, c] = *self.shape(x) else {
            return Err(Error::dim(
                "bilinear_upsample",
                format!("expected [H, W, C], got {:?}", self.shape(x)),
            ));
        };
        if factor == 0 {
            return Err(Error::dim("bilinear_upsample", "factor must be positive"));
        }
        let rows = lerp_taps(h, factor);
        let cols = lerp_taps(w, factor);
        let src = self.value(x).data();
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; ho * wo * c];
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, rx) in cols.iter().enumerate() {
                let base = (oy * wo + ox) * c;
                for ch in 0..c {
                    let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                    let top = lerp(at(ry.lo, rx.lo), at(ry.lo, rx.hi), rx.t);
                    let bottom = lerp(at(ry.hi, rx.lo), at(ry.hi, rx.hi), rx.t);
                    out[base + ch] = lerp(top, bottom, ry.t);
                }
            }
        }
        let value = Tensor::from_parts(vec![ho, wo, c], out);
        self.push(
            "bilinear_upsample",
            value,
            Op::Upsample { x, factor },
            &[x],
        )
    }

    /// Global average over every position of `[..., C]`, giving `[C]`.
    pub fn mean_positions(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        let positions = self.value(x).numel() / c;
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= positions as f64;
        }
        let value = Tensor::from_parts(vec![c], out);
        self.push("mean_positions", value, Op::MeanPositions(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", value, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Class-balanced binary cross entropy, summed over pixels.
    ///
    /// `eta` is the foreground fraction of `target`, clamped to
    /// `[ETA_CLAMP, 1 - ETA_CLAMP]`; predictions are clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the logarithms.
    pub fn weighted_bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim(
                "weighted_bce",
                format!(
                    "prediction {:?} vs mask {:?}",
                    self.shape(pred),
                    target.shape()
                ),
            ));
        }
        if target.data().iter().any(|&o| o != 0.0 && o != 1.0) {
            return Err(Error::data("weighted_bce: mask values must be 0 or 1"));
        }
        let foreground = target.data().iter().filter(|&&o| o == 1.0).count();
        let eta = (foreground as f64 / target.numel() as f64).clamp(ETA_CLAMP, 1.0 - ETA_CLAMP);
        let terms: Vec<f64> = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&y, &o)| {
                let y = y.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                if o == 1.0 {
                    -(1.0 - eta) * y.ln()
                } else {
                    -eta * (1.0 - y).ln()
                }
            })
            .collect();
        let value = Tensor::scalar(pairwise_sum(&terms));
        self.push(
            "weighted_bce",
            value,
            Op::WeightedBce {
                pred,
                target: target.clone(),
                eta,
            },
            &[pred],
        )
    }

    /// Consumes the tape and returns d`root`/d`leaf` for every gradient-tracking leaf.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("root must be a scalar, got {:?}", self.shape(root)),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            check_finite("backward", g.data())?;
            self.propagate(node, &g, &mut grads);
        }

        for (node, grad) in self.nodes.iter().zip(grads.iter_mut()) {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *grad = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(&delta) {
                        *a += d;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), delta));
                }
            }
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.nodes[a.0].requires_grad {
                    // g · bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] = dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                    send(a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    // aᵀ · g
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(av[i * k + p], grow, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                    send(b, gb);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                send(a, transpose_kernel(gd, c, r));
            }
            &Op::SoftmaxColumns(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                let y = node.value.data();
                let mut ga = vec![0.0; r * c];
                for j in 0..c {
                    let inner: f64 = (0..r).map(|i| gd[i * c + j] * y[i * c + j]).sum();
                    for i in 0..r {
                        ga[i * c + j] = y[i * c + j] * (gd[i * c + j] - inner);
                    }
                }
                send(a, ga);
            }
            &Op::Conv2d { x, k, stride, pad } => {
                let geom = ConvGeometry::new(self.shape(x), self.shape(k), stride, pad)
                    .expect("geometry validated in forward");
                let (gx, gk) = geom.backward(
                    self.value(x).data(),
                    self.value(k).data(),
                    gd,
                    self.nodes[x.0].requires_grad,
                    self.nodes[k.0].requires_grad,
                );
                if let Some(gx) = gx {
                    send(x, gx);
                }
                if let Some(gk) = gk {
                    send(k, gk);
                }
            }
            &Op::AddBias(x, b) => {
                let c = self.value(b).numel();
                send(x, gd.to_vec());
                let mut gb = vec![0.0; c];
                for row in gd.chunks_exact(c) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                send(b, gb);
            }
            &Op::ScaleChannels(x, v) => {
                let c = self.value(v).numel();
                let scale = self.value(v).data();
                let xv = self.value(x).data();
                let mut gx = gd.to_vec();
                let mut gv = vec![0.0; c];
                for (row, (grow, xrow)) in gx
                    .chunks_exact_mut(c)
                    .zip(gd.chunks_exact(c).zip(xv.chunks_exact(c)))
                {
                    for ch in 0..c {
                        row[ch] *= scale[ch];
                        gv[ch] += grow[ch] * xrow[ch];
                    }
                }
                send(x, gx);
                send(v, gv);
            }
            &Op::MulPositions(x, gate) => {
                let c = self.value(x).last_dim();
                let gate_v = self.value(gate).data();
                let xv = self.value(x).data();
                let mut gx = gd.to_vec();
                let mut gg = vec![0.0; gate_v.len()];
                for (p, (row, (grow, xrow))) in gx
                    .chunks_exact_mut(c)
                    .zip(gd.chunks_exact(c).zip(xv.chunks_exact(c)))
                    .enumerate()
                {
                    for o in row.iter_mut() {
                        *o *= gate_v[p];
                    }
                    gg[p] = dot(grow, xrow);
                }
                send(x, gx);
                send(gate, gg);
            }
            &Op::Add(a, b) => {
                send(a, gd.to_vec());
                send(b, gd.to_vec());
            }
            &Op::Sub(a, b) => {
                send(a, gd.to_vec());
                send(b, gd.iter().map(|v| -v).collect());
            }
            &Op::Scale(a, factor) => send(a, gd.iter().map(|v| v * factor).collect()),
            &Op::Relu(a) => {
                let x = self.value(a).data();
                send(
                    a,
                    gd.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                );
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                send(
                    a,
                    gd.iter().zip(y).map(|(&g, &y)| g * y * (1.0 - y)).collect(),
                );
            }
            &Op::Abs(a) => {
                let x = self.value(a).data();
                send(
                    a,
                    gd.iter()
                        .zip(x)
                        .map(|(&g, &x)| {
                            if x > 0.0 {
                                g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            &Op::ConcatChannels(a, b) => {
                let (ca, cb) = (self.value(a).last_dim(), self.value(b).last_dim());
                let mut ga = Vec::with_capacity(self.value(a).numel());
                let mut gb = Vec::with_capacity(self.value(b).numel());
                for row in gd.chunks_exact(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                send(a, ga);
                send(b, gb);
            }
            &Op::Upsample { x, factor } => {
                let [h, w, c] = *self.shape(x) else {
                    unreachable!("validated in forward")
                };
                let rows = lerp_taps(h, factor);
                let cols = lerp_taps(w, factor);
                let wo = w * factor;
                let mut gx = vec![0.0; h * w * c];
                for (oy, ry) in rows.iter().enumerate() {
                    for (ox, rx) in cols.iter().enumerate() {
                        let base = (oy * wo + ox) * c;
                        let taps = [
                            (ry.lo, rx.lo, (1.0 - ry.t) * (1.0 - rx.t)),
                            (ry.lo, rx.hi, (1.0 - ry.t) * rx.t),
                            (ry.hi, rx.lo, ry.t * (1.0 - rx.t)),
                            (ry.hi, rx.hi, ry.t * rx.t),
                        ];
                        for (y, xx, weight) in taps {
                            let dst = (y * w + xx) * c;
                            for ch in 0..c {
                                gx[dst + ch] += weight * gd[base + ch];
                            }
                        }
                    }
                }
                send(x, gx);
            }
            &Op::MeanPositions(x) => {
                let c = self.value(x).last_dim();
                let n = self.value(x).numel();
                let positions = (n / c) as f64;
                let gx = (0..n).map(|i| gd[i % c] / positions).collect();
                send(x, gx);
            }
            &Op::Sum(x) => send(x, vec![gd[0]; self.value(x).numel()]),
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                send(x, vec![gd[0] / n as f64; n]);
            }
            &Op::Reshape(x) => send(x, gd.to_vec()),
            Op::WeightedBce { pred, target, eta } => {
                let y = self.value(*pred).data();
                let gx = y
                    .iter()
                    .zip(target.data())
                    .map(|(&y, &o)| {
                        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&y) {
                            0.0
                        } else if o == 1.0 {
                            -gd[0] * (1.0 - eta) / y
                        } else {
                            gd[0] * eta / (1.0 - y)
                        }
                    })
                    .collect();
                send(*pred, gx);
            }
        }
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
    }
    out
}

fn transpose_kernel(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

struct Tap {
    lo: usize,
    hi: usize,
    t: f64,
}

/// Source taps for each output coordinate of an integer-factor upsample,
/// using half-pixel centers (align-corners false) and edge clamping.
fn lerp_taps(len: usize, factor: usize) -> Vec<Tap> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            let t = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, t }
        })
        .collect()
}

struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [h, w, cin] = *x else {
            return Err(Error::dim("conv2d", format!("input must be [H, W, C], got {x:?}")));
        };
        let [kh, kw, kcin, cout] = *k else {
            return Err(Error::dim(
                "conv2d",
                format!("kernel must be [kh, kw, Cin, Cout], got {k:?}"),
            ));
        };
        if kcin != cin {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k:?} expects {kcin} input channels, input {x:?} has {cin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel {k:?} must have odd extents")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let out_len = |len: usize, kl: usize| {
            let padded = len + 2 * pad;
            if padded < kl {
                0
            } else {
                (padded - kl) / stride + 1
            }
        };
        let (ho, wo) = (out_len(h, kh), out_len(w, kw));
        if ho == 0 || wo == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("input {x:?} with kernel {k:?}, pad {pad} gives an empty output"),
            ));
        }
        Ok(Self {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            ho,
            wo,
            stride,
            pad,
        })
    }

    /// Input row/column for an output coordinate and kernel tap, if inside the image.
    fn source(&self, o: usize, tap: usize, len: usize) -> Option<usize> {
        (o * self.stride + tap).checked_sub(self.pad).filter(|&i| i < len)
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let (cin, cout) = (self.cin, self.cout);
        let mut out = vec![0.0; self.ho * self.wo * cout];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let obase = (oy * self.wo + ox) * cout;
                let orow = &mut out[obase..obase + cout];
                for ky in 0..self.kh {
                    let Some(iy) = self.source(oy, ky, self.h) else { continue };
                    for kx in 0..self.kw {
                        let Some(ix) = self.source(ox, kx, self.w) else { continue };
                        let xin = &x[(iy * self.w + ix) * cin..][..cin];
                        let kbase = (ky * self.kw + kx) * cin * cout;
                        for (ci, &xv) in xin.iter().enumerate() {
                            axpy(xv, &k[kbase + ci * cout..][..cout], orow);
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(
        &self,
        x: &[f64],
        k: &[f64],
        g: &[f64],
        want_x: bool,
        want_k: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (cin, cout) = (self.cin, self.cout);
        let mut gx = want_x.then(|| vec![0.0; x.len()]);
        let mut gk = want_k.then(|| vec![0.0; k.len()]);
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let grow = &g[(oy * self.wo + ox) * cout..][..cout];
                for ky in 0..self.kh {
                    let Some(iy) = self.source(oy, ky, self.h) else { continue };
                    for kx in 0..self.kw {
                        let Some(ix) = self.source(ox, kx, self.w) else { continue };
                        let xbase = (iy * self.w + ix) * cin;
                        let kbase = (ky * self.kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let krange = kbase + ci * cout..kbase + (ci + 1) * cout;
                            if let Some(gx) = gx.as_mut() {
                                gx[xbase + ci] += dot(&k[krange.clone()], grow);
                            }
                            if let Some(gk) = gk.as_mut() {
                                axpy(x[xbase + ci], grow, &mut gk[krange]);
                            }
                        }
                    }
                }
            }
        }
        (gx, gk)
    }
}
