//! Reverse-mode differentiation over an explicit op recording.
//!
//! Every differentiable operation is a method on [`Graph`]. The forward
//! value is computed eagerly; when recording is enabled and any input
//! requires gradients, the op is pushed onto the graph so that
//! [`Graph::backward`] can replay it in exact reverse execution order.
//! Gradient accumulation is additive: a tensor consumed twice receives the
//! sum of both contributions.
//!
//! All math is double precision. Kernels are direct loops; the shapes in
//! this crate are small enough that clarity wins over throughput.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard for every norm/cosine denominator.
pub const NORM_EPS: f64 = 1e-12;

/// Convolution geometry; kernel extents come from the weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn unit() -> ConvSpec {
        ConvSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Matmul,
    MatmulNt,
    Conv2d { spec: ConvSpec, has_bias: bool },
    Relu,
    Add,
    Sub,
    Mul,
    Maximum,
    ScalarMul,
    Scale { c: f64 },
    AddScalar { c: f64 },
    Softmax,
    L2Normalize,
    BilinearUpsample { factor: usize },
    ReduceMean,
    ReduceSum,
    SumLastAxis,
    Exp,
    Log,
    Sqrt,
    GatherRows { indices: Vec<usize> },
    Transpose2d,
    Reshape,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::MatmulNt => "matmul_nt",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Maximum => "maximum",
            Op::ScalarMul => "scalar_mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Softmax => "softmax",
            Op::L2Normalize => "l2_normalize",
            Op::BilinearUpsample { .. } => "bilinear_upsample",
            Op::ReduceMean => "reduce_mean",
            Op::ReduceSum => "reduce_sum",
            Op::SumLastAxis => "sum_last_axis",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::GatherRows { .. } => "gather_rows",
            Op::Transpose2d => "transpose",
            Op::Reshape => "reshape",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Ordered record of executed differentiable ops.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// Recording graph for training.
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Non-recording graph: ops compute forward values only.
    pub fn inference() -> Graph {
        Graph {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn emit(&mut self, op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let track = self.recording && inputs.iter().any(Tensor::requires_grad);
        let out = if track {
            Tensor::param(shape, data)
        } else {
            Tensor::new(shape, data)
        };
        if track {
            self.nodes.push(Node {
                op,
                inputs,
                output: out.clone(),
            });
        }
        out
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `a (m×k) · b (k×n) → m×n`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = as_2d("matmul", a)?;
        let (k2, n) = as_2d("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", a, b));
        }
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        Ok(self.emit(Op::Matmul, vec![a.clone(), b.clone()], vec![m, n], data))
    }

    /// `a (m×k) · bᵀ (k×n) → m×n` where `b` is stored `n×k`.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = as_2d("matmul_nt", a)?;
        let (n, k2) = as_2d("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", a, b));
        }
        let data = matmul_nt_raw(a.data(), b.data(), m, k, n);
        Ok(self.emit(Op::MatmulNt, vec![a.clone(), b.clone()], vec![m, n], data))
    }

    /// Direct 2-D convolution. `x: Cin×H×W`, `w: Cout×Cin×kh×kw`,
    /// optional `bias: Cout`. Zero padding.
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        spec: ConvSpec,
    ) -> Result<Tensor> {
        if x.shape().len() != 3 || w.shape().len() != 4 {
            return Err(shape_err("conv2d", x, w));
        }
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cin_w, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if cin != cin_w {
            return Err(shape_err("conv2d", x, w));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                msg: format!("stride and dilation must be >= 1, got {spec:?}"),
            });
        }
        if let Some(b) = bias {
            if b.numel() != cout {
                return Err(shape_err("conv2d", w, b));
            }
        }
        let ho = conv_out_extent(h, kh, spec)?;
        let wo = conv_out_extent(wd, kw, spec)?;
        let data = conv2d_fwd(
            x.data(),
            w.data(),
            bias.map(Tensor::data),
            (cin, h, wd),
            (cout, kh, kw),
            (ho, wo),
            spec,
        );
        let mut inputs = vec![x.clone(), w.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(self.emit(
            Op::Conv2d {
                spec,
                has_bias: bias.is_some(),
            },
            inputs,
            vec![cout, ho, wo],
            data,
        ))
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.emit(Op::Relu, vec![x.clone()], x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.emit(Op::Add, vec![a.clone(), b.clone()], a.shape().to_vec(), data))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(self.emit(Op::Sub, vec![a.clone(), b.clone()], a.shape().to_vec(), data))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self.emit(Op::Mul, vec![a.clone(), b.clone()], a.shape().to_vec(), data))
    }

    /// Elementwise max; on ties the gradient goes to the first operand.
    pub fn maximum(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("maximum", a, b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        Ok(self.emit(Op::Maximum, vec![a.clone(), b.clone()], a.shape().to_vec(), data))
    }

    /// Product of a one-element tensor and a tensor; differentiable in both.
    pub fn scalar_mul(&mut self, s: &Tensor, t: &Tensor) -> Result<Tensor> {
        if !s.is_scalar() {
            return Err(shape_err("scalar_mul", s, t));
        }
        let sv = s.data()[0];
        let data = t.data().iter().map(|&v| sv * v).collect();
        Ok(self.emit(Op::ScalarMul, vec![s.clone(), t.clone()], t.shape().to_vec(), data))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, t: &Tensor, c: f64) -> Tensor {
        let data = t.data().iter().map(|&v| c * v).collect();
        self.emit(Op::Scale { c }, vec![t.clone()], t.shape().to_vec(), data)
    }

    /// Add a constant to every element.
    pub fn add_scalar(&mut self, t: &Tensor, c: f64) -> Tensor {
        let data = t.data().iter().map(|&v| v + c).collect();
        self.emit(Op::AddScalar { c }, vec![t.clone()], t.shape().to_vec(), data)
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        let cols = last_axis("softmax", x)?;
        let mut data = vec![0.0; x.numel()];
        for (row_out, row_in) in data.chunks_mut(cols).zip(x.data().chunks(cols)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.emit(Op::Softmax, vec![x.clone()], x.shape().to_vec(), data))
    }

    /// Unit-normalize each row (last axis). Rows with norm below
    /// [`NORM_EPS`] are rejected as degenerate.
    pub fn l2_normalize(&mut self, x: &Tensor) -> Result<Tensor> {
        let cols = last_axis("l2_normalize", x)?;
        let mut data = vec![0.0; x.numel()];
        for (r, (row_out, row_in)) in data.chunks_mut(cols).zip(x.data().chunks(cols)).enumerate() {
            let norm = l2_norm(row_in);
            if norm < NORM_EPS {
                return Err(Error::DegenerateVector {
                    op: "l2_normalize",
                    row: r,
                    eps: NORM_EPS,
                });
            }
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = v / norm;
            }
        }
        Ok(self.emit(Op::L2Normalize, vec![x.clone()], x.shape().to_vec(), data))
    }

    /// Bilinear upsampling of a `C×H×W` map by an integer factor.
    pub fn upsample_bilinear(&mut self, x: &Tensor, factor: usize) -> Result<Tensor> {
        if x.shape().len() != 3 {
            return Err(Error::InvalidArgument {
                op: "bilinear_upsample",
                msg: format!("expected C×H×W input, got {:?}", x.shape()),
            });
        }
        if factor == 0 {
            return Err(Error::InvalidArgument {
                op: "bilinear_upsample",
                msg: "factor must be >= 1".into(),
            });
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ho, wo) = (h * factor, w * factor);
        let mut data = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let src = &x.data()[ch * h * w..(ch + 1) * h * w];
            let dst = &mut data[ch * ho * wo..(ch + 1) * ho * wo];
            for oy in 0..ho {
                let (y0, y1, ty) = upsample_taps(oy, factor, h);
                for ox in 0..wo {
                    let (x0, x1, tx) = upsample_taps(ox, factor, w);
                    let v00 = src[y0 * w + x0];
                    let v01 = src[y0 * w + x1];
                    let v10 = src[y1 * w + x0];
                    let v11 = src[y1 * w + x1];
                    dst[oy * wo + ox] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                        + ty * ((1.0 - tx) * v10 + tx * v11);
                }
            }
        }
        Ok(self.emit(
            Op::BilinearUpsample { factor },
            vec![x.clone()],
            vec![c, ho, wo],
            data,
        ))
    }

    /// Mean over all elements, as a scalar.
    pub fn mean_all(&mut self, x: &Tensor) -> Tensor {
        let n = x.numel() as f64;
        let sum: f64 = x.data().iter().sum();
        self.emit(Op::ReduceMean, vec![x.clone()], vec![1], vec![sum / n])
    }

    /// Sum over all elements, as a scalar.
    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        let sum: f64 = x.data().iter().sum();
        self.emit(Op::ReduceSum, vec![x.clone()], vec![1], vec![sum])
    }

    /// Sum over the last axis: `[.., k] → [..]` (rank-1 input → scalar).
    pub fn sum_last_axis(&mut self, x: &Tensor) -> Result<Tensor> {
        let cols = last_axis("sum_last_axis", x)?;
        let rows = x.numel() / cols;
        let mut data = vec![0.0; rows];
        for (o, row) in data.iter_mut().zip(x.data().chunks(cols)) {
            *o = row.iter().sum();
        }
        let shape = if x.shape().len() == 1 {
            vec![1]
        } else {
            x.shape()[..x.shape().len() - 1].to_vec()
        };
        Ok(self.emit(Op::SumLastAxis, vec![x.clone()], shape, data))
    }

    pub fn exp(&mut self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|v| v.exp()).collect();
        self.emit(Op::Exp, vec![x.clone()], x.shape().to_vec(), data)
    }

    /// Natural log; requires strictly positive input.
    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        if let Some(idx) = x.data().iter().position(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument {
                op: "log",
                msg: format!("input must be strictly positive, element {idx} is {}", x.data()[idx]),
            });
        }
        let data = x.data().iter().map(|v| v.ln()).collect();
        Ok(self.emit(Op::Log, vec![x.clone()], x.shape().to_vec(), data))
    }

    /// Square root; requires non-negative input. The backward pass guards
    /// the denominator with [`NORM_EPS`].
    pub fn sqrt(&mut self, x: &Tensor) -> Result<Tensor> {
        if let Some(idx) = x.data().iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidArgument {
                op: "sqrt",
                msg: format!("input must be non-negative, element {idx} is {}", x.data()[idx]),
            });
        }
        let data = x.data().iter().map(|v| v.sqrt()).collect();
        Ok(self.emit(Op::Sqrt, vec![x.clone()], x.shape().to_vec(), data))
    }

    /// Select rows of a matrix: `out[r] = m[indices[r]]`.
    pub fn gather_rows(&mut self, m: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = as_2d("gather_rows", m)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                msg: format!("row index {bad} out of range for {rows} rows"),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&m.data()[i * cols..(i + 1) * cols]);
        }
        Ok(self.emit(
            Op::GatherRows {
                indices: indices.to_vec(),
            },
            vec![m.clone()],
            vec![indices.len(), cols],
            data,
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = as_2d("transpose", x)?;
        let data = transpose_raw(x.data(), rows, cols);
        Ok(self.emit(Op::Transpose2d, vec![x.clone()], vec![cols, rows], data))
    }

    /// Reinterpret the shape; element count must be preserved.
    pub fn reshape(&mut self, x: &Tensor, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::InvalidArgument {
                op: "reshape",
                msg: format!("cannot reshape {:?} into {:?}", x.shape(), shape),
            });
        }
        Ok(self.emit(Op::Reshape, vec![x.clone()], shape, x.data().to_vec()))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate `∂loss/∂leaf` for every gradient-tracking tensor reachable
    /// from `loss`, then clear the graph. Gradient accumulators of every
    /// tensor touched by this graph are zeroed first, so the result is the
    /// exact derivative of this loss regardless of prior state.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::LossNotScalar {
                shape: loss.shape().to_vec(),
            });
        }
        let on_graph = self.nodes.iter().any(|n| n.output.id() == loss.id());
        if !on_graph {
            return Err(Error::LossNotOnGraph);
        }
        for node in &self.nodes {
            node.output.zero_grad();
            for input in &node.inputs {
                input.zero_grad();
            }
        }
        loss.set_grad(vec![1.0]);
        for node in self.nodes.iter().rev() {
            backward_node(node);
        }
        self.nodes.clear();
        Ok(())
    }
}

fn backward_node(node: &Node) {
    let d_out = match node.output.grad() {
        Some(g) => g,
        None => return,
    };
    let ins = &node.inputs;
    let out = &node.output;
    match &node.op {
        Op::Matmul => {
            let (a, b) = (&ins[0], &ins[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                a.accumulate_grad(&matmul_nt_raw(&d_out, b.data(), m, n, k));
            }
            if b.requires_grad() {
                b.accumulate_grad(&matmul_tn_raw(a.data(), &d_out, m, k, n));
            }
        }
        Op::MatmulNt => {
            let (a, b) = (&ins[0], &ins[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[0];
            if a.requires_grad() {
                a.accumulate_grad(&matmul_raw(&d_out, b.data(), m, n, k));
            }
            if b.requires_grad() {
                b.accumulate_grad(&matmul_tn_raw(&d_out, a.data(), m, n, k));
            }
        }
        Op::Conv2d { spec, has_bias } => {
            let x = &ins[0];
            let w = &ins[1];
            let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
            let (ho, wo) = (out.shape()[1], out.shape()[2]);
            let (dx, dw) = conv2d_bwd(
                &d_out,
                x.data(),
                w.data(),
                (cin, h, wd),
                (cout, kh, kw),
                (ho, wo),
                *spec,
                x.requires_grad(),
                w.requires_grad(),
            );
            if let Some(dx) = dx {
                x.accumulate_grad(&dx);
            }
            if let Some(dw) = dw {
                w.accumulate_grad(&dw);
            }
            if *has_bias && ins[2].requires_grad() {
                let mut db = vec![0.0; cout];
                for oc in 0..cout {
                    db[oc] = d_out[oc * ho * wo..(oc + 1) * ho * wo].iter().sum();
                }
                ins[2].accumulate_grad(&db);
            }
        }
        Op::Relu => {
            // subgradient 0 at x = 0
            let x = ins[0].data();
            let dx: Vec<f64> = d_out
                .iter()
                .zip(x)
                .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                .collect();
            ins[0].accumulate_grad(&dx);
        }
        Op::Add => {
            ins[0].accumulate_grad(&d_out);
            ins[1].accumulate_grad(&d_out);
        }
        Op::Sub => {
            ins[0].accumulate_grad(&d_out);
            if ins[1].requires_grad() {
                let neg: Vec<f64> = d_out.iter().map(|d| -d).collect();
                ins[1].accumulate_grad(&neg);
            }
        }
        Op::Mul => {
            if ins[0].requires_grad() {
                let da: Vec<f64> = d_out.iter().zip(ins[1].data()).map(|(d, b)| d * b).collect();
                ins[0].accumulate_grad(&da);
            }
            if ins[1].requires_grad() {
                let db: Vec<f64> = d_out.iter().zip(ins[0].data()).map(|(d, a)| d * a).collect();
                ins[1].accumulate_grad(&db);
            }
        }
        Op::Maximum => {
            let (a, b) = (ins[0].data(), ins[1].data());
            if ins[0].requires_grad() {
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(a.iter().zip(b))
                    .map(|(&d, (&x, &y))| if x >= y { d } else { 0.0 })
                    .collect();
                ins[0].accumulate_grad(&da);
            }
            if ins[1].requires_grad() {
                let db: Vec<f64> = d_out
                    .iter()
                    .zip(a.iter().zip(b))
                    .map(|(&d, (&x, &y))| if x >= y { 0.0 } else { d })
                    .collect();
                ins[1].accumulate_grad(&db);
            }
        }
        Op::ScalarMul => {
            let (s, t) = (&ins[0], &ins[1]);
            if s.requires_grad() {
                let ds: f64 = d_out.iter().zip(t.data()).map(|(d, v)| d * v).sum();
                s.accumulate_grad(&[ds]);
            }
            if t.requires_grad() {
                let sv = s.data()[0];
                let dt: Vec<f64> = d_out.iter().map(|d| sv * d).collect();
                t.accumulate_grad(&dt);
            }
        }
        Op::Scale { c } => {
            let dx: Vec<f64> = d_out.iter().map(|d| c * d).collect();
            ins[0].accumulate_grad(&dx);
        }
        Op::AddScalar { .. } => {
            ins[0].accumulate_grad(&d_out);
        }
        Op::Softmax => {
            let y = out.data();
            let cols = *out.shape().last().unwrap();
            let mut dx = vec![0.0; y.len()];
            for r in 0..y.len() / cols {
                let base = r * cols;
                let dot: f64 = (0..cols).map(|c| d_out[base + c] * y[base + c]).sum();
                for c in 0..cols {
                    dx[base + c] = y[base + c] * (d_out[base + c] - dot);
                }
            }
            ins[0].accumulate_grad(&dx);
        }
        Op::L2Normalize => {
            let x = ins[0].data();
            let y = out.data();
            let cols = *out.shape().last().unwrap();
            let mut dx = vec![0.0; x.len()];
            for r in 0..x.len() / cols {
                let base = r * cols;
                let norm = l2_norm(&x[base..base + cols]);
                let dot: f64 = (0..cols).map(|c| d_out[base + c] * y[base + c]).sum();
                for c in 0..cols {
                    dx[base + c] = (d_out[base + c] - y[base + c] * dot) / norm;
                }
            }
            ins[0].accumulate_grad(&dx);
        }
        Op::BilinearUpsample { factor } => {
            let x = &ins[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (ho, wo) = (h * factor, w * factor);
            let mut dx = vec![0.0; x.numel()];
            for ch in 0..c {
                let src = &mut dx[ch * h * w..(ch + 1) * h * w];
                let dst = &d_out[ch * ho * wo..(ch + 1) * ho * wo];
                for oy in 0..ho {
                    let (y0, y1, ty) = upsample_taps(oy, *factor, h);
                    for ox in 0..wo {
                        let (x0, x1, tx) = upsample_taps(ox, *factor, w);
                        let g = dst[oy * wo + ox];
                        src[y0 * w + x0] += (1.0 - ty) * (1.0 - tx) * g;
                        src[y0 * w + x1] += (1.0 - ty) * tx * g;
                        src[y1 * w + x0] += ty * (1.0 - tx) * g;
                        src[y1 * w + x1] += ty * tx * g;
                    }
                }
            }
            x.accumulate_grad(&dx);
        }
        Op::ReduceMean => {
            let n = ins[0].numel();
            let g = d_out[0] / n as f64;
            ins[0].accumulate_grad(&vec![g; n]);
        }
        Op::ReduceSum => {
            ins[0].accumulate_grad(&vec![d_out[0]; ins[0].numel()]);
        }
        Op::SumLastAxis => {
            let cols = *ins[0].shape().last().unwrap();
            let mut dx = vec![0.0; ins[0].numel()];
            for (chunk, &d) in dx.chunks_mut(cols).zip(d_out.iter()) {
                chunk.iter_mut().for_each(|v| *v = d);
            }
            ins[0].accumulate_grad(&dx);
        }
        Op::Exp => {
            let dx: Vec<f64> = d_out.iter().zip(out.data()).map(|(d, y)| d * y).collect();
            ins[0].accumulate_grad(&dx);
        }
        Op::Log => {
            let dx: Vec<f64> = d_out.iter().zip(ins[0].data()).map(|(d, x)| d / x).collect();
            ins[0].accumulate_grad(&dx);
        }
        Op::Sqrt => {
            let dx: Vec<f64> = d_out
                .iter()
                .zip(out.data())
                .map(|(d, y)| d * 0.5 / y.max(NORM_EPS))
                .collect();
            ins[0].accumulate_grad(&dx);
        }
        Op::GatherRows { indices } => {
            let cols = ins[0].shape()[1];
            let mut dm = vec![0.0; ins[0].numel()];
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..cols {
                    dm[i * cols + c] += d_out[r * cols + c];
                }
            }
            ins[0].accumulate_grad(&dm);
        }
        Op::Transpose2d => {
            let (rows, cols) = (ins[0].shape()[0], ins[0].shape()[1]);
            ins[0].accumulate_grad(&transpose_raw(&d_out, cols, rows));
        }
        Op::Reshape => {
            ins[0].accumulate_grad(&d_out);
        }
    }
}

// ── helpers and raw kernels ──────────────────────────────────────────

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a, b));
    }
    Ok(())
}

fn as_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::InvalidArgument {
            op,
            msg: format!("expected a 2-D tensor, got {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn last_axis(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&k) if k > 0 => Ok(k),
        _ => Err(Error::InvalidArgument {
            op,
            msg: format!("tensor has no last axis: {:?}", t.shape()),
        }),
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` with `b` stored `n×k`.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ (k×m) · b (m×n)` with `a` stored `m×k`.
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn conv_out_extent(input: usize, kernel: usize, spec: ConvSpec) -> Result<usize> {
    let span = spec.dilation * (kernel - 1) + 1;
    let padded = input + 2 * spec.padding;
    if padded < span {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            msg: format!("kernel span {span} exceeds padded input extent {padded}"),
        });
    }
    Ok((padded - span) / spec.stride + 1)
}

/// Valid output-index range `[lo, hi)` such that `o*stride + off ∈ [0, limit)`.
fn conv_valid_range(limit: usize, out_extent: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off < 0 {
        (((-off) as usize) + stride - 1) / stride
    } else {
        0
    };
    let max_in = limit as isize - 1 - off;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = (max_in as usize / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_fwd(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    (cin, h, wd): (usize, usize, usize),
    (cout, kh, kw): (usize, usize, usize),
    (ho, wo): (usize, usize),
    spec: ConvSpec,
) -> Vec<f64> {
    let mut out = vec![0.0; cout * ho * wo];
    if let Some(b) = bias {
        for oc in 0..cout {
            out[oc * ho * wo..(oc + 1) * ho * wo]
                .iter_mut()
                .for_each(|v| *v = b[oc]);
        }
    }
    let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
    for oc in 0..cout {
        for ic in 0..cin {
            let xplane = &x[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..kh {
                let offy = (ky * d) as isize - p as isize;
                let (ylo, yhi) = conv_valid_range(h, ho, s, offy);
                for kx in 0..kw {
                    let wv = w[((oc * cin + ic) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let offx = (kx * d) as isize - p as isize;
                    let (xlo, xhi) = conv_valid_range(wd, wo, s, offx);
                    for oy in ylo..yhi {
                        let iy = (oy * s) as isize + offy;
                        let xrow = &xplane[iy as usize * wd..];
                        let orow = &mut out[(oc * ho + oy) * wo..];
                        for ox in xlo..xhi {
                            let ix = ((ox * s) as isize + offx) as usize;
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd(
    d_out: &[f64],
    x: &[f64],
    w: &[f64],
    (cin, h, wd): (usize, usize, usize),
    (cout, kh, kw): (usize, usize, usize),
    (ho, wo): (usize, usize),
    spec: ConvSpec,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dx = if need_dx {
        Some(vec![0.0; cin * h * wd])
    } else {
        None
    };
    let mut dw = if need_dw {
        Some(vec![0.0; cout * cin * kh * kw])
    } else {
        None
    };
    let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
    for oc in 0..cout {
        let dplane = &d_out[oc * ho * wo..(oc + 1) * ho * wo];
        for ic in 0..cin {
            let xplane = &x[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..kh {
                let offy = (ky * d) as isize - p as isize;
                let (ylo, yhi) = conv_valid_range(h, ho, s, offy);
                for kx in 0..kw {
                    let widx = ((oc * cin + ic) * kh + ky) * kw + kx;
                    let wv = w[widx];
                    let offx = (kx * d) as isize - p as isize;
                    let (xlo, xhi) = conv_valid_range(wd, wo, s, offx);
                    let mut wacc = 0.0;
                    for oy in ylo..yhi {
                        let iy = ((oy * s) as isize + offy) as usize;
                        let drow = &dplane[oy * wo..];
                        for ox in xlo..xhi {
                            let ix = ((ox * s) as isize + offx) as usize;
                            let g = drow[ox];
                            wacc += g * xplane[iy * wd + ix];
                            if let Some(dx) = dx.as_mut() {
                                dx[ic * h * wd + iy * wd + ix] += g * wv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Source taps and interpolation weight for bilinear upsampling by an
/// integer factor (half-pixel centers, clamped at the border).
fn upsample_taps(o: usize, factor: usize, in_extent: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) / factor as f64 - 0.5;
    if src <= 0.0 {
        return (0, 0, 0.0);
    }
    let i0 = src.floor() as usize;
    if i0 >= in_extent - 1 {
        return (in_extent - 1, in_extent - 1, 0.0);
    }
    (i0, i0 + 1, src - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::param(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = t(&[2], &[0.0, 0.0]);
        let y = g.softmax(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = t(&[2, 3], &[1.0, -2.0, 0.5, 100.0, 100.0, 99.0]);
        let y = g.softmax(&x).unwrap();
        for row in y.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn l2_normalize_345_triangle() {
        let mut g = Graph::new();
        let x = t(&[2], &[3.0, 4.0]);
        let y = g.l2_normalize(&x).unwrap();
        assert_eq!(y.data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_rejects_degenerate_rows() {
        let mut g = Graph::new();
        let x = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        match g.l2_normalize(&x) {
            Err(Error::DegenerateVector { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected degenerate vector error, got {other:?}"),
        }
    }

    #[test]
    fn upsample_of_constant_map_is_constant() {
        let mut g = Graph::new();
        for factor in [1, 2, 3, 8] {
            let x = t(&[1, 3, 3], &[7.5; 9]);
            let y = g.upsample_bilinear(&x, factor).unwrap();
            assert_eq!(y.shape(), &[1, 3 * factor, 3 * factor]);
            for &v in y.data() {
                assert_relative_eq!(v, 7.5, max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        let err = g.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = p(&[3], &[1.0, 2.0, 3.0]);
        let sq = g.mul(&x, &x).unwrap();
        let loss = g.sum_all(&sq);
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
        assert!(g.is_empty(), "graph must be cleared after backward");
    }

    #[test]
    fn backward_softmax_pick_first_of_two_zeros() {
        // hand-applied softmax Jacobian: grad = [0.25, -0.25]
        let mut g = Graph::new();
        let x = p(&[2], &[0.0, 0.0]);
        let y = g.softmax(&x).unwrap();
        let pick = t(&[2], &[1.0, 0.0]);
        let picked = g.mul(&y, &pick).unwrap();
        let loss = g.sum_all(&picked);
        g.backward(&loss).unwrap();
        let grad = x.grad().unwrap();
        assert_relative_eq!(grad[0], 0.25, max_relative = 1e-15);
        assert_relative_eq!(grad[1], -0.25, max_relative = 1e-15);
    }

    #[test]
    fn double_consumption_doubles_gradient_exactly() {
        // f(x) = g(x) + g(x) with g(x) = x∘x: grad must be exactly 2·grad g
        let mut g = Graph::new();
        let x = p(&[3], &[0.7, -1.3, 2.2]);
        let sq = g.mul(&x, &x).unwrap();
        let both = g.add(&sq, &sq).unwrap();
        let loss = g.sum_all(&both);
        g.backward(&loss).unwrap();
        let got = x.grad().unwrap();

        let mut g2 = Graph::new();
        let x2 = p(&[3], &[0.7, -1.3, 2.2]);
        let sq2 = g2.mul(&x2, &x2).unwrap();
        let loss2 = g2.sum_all(&sq2);
        g2.backward(&loss2).unwrap();
        let single = x2.grad().unwrap();

        for (a, b) in got.iter().zip(&single) {
            assert_eq!(*a, 2.0 * b, "accumulation must be exactly additive");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = p(&[2], &[1.0, 2.0]);
        let y = g.relu(&x);
        match g.backward(&y) {
            Err(Error::LossNotScalar { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected LossNotScalar, got {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_loss_not_on_graph() {
        let mut g = Graph::new();
        let x = p(&[2], &[1.0, 2.0]);
        let y = g.relu(&x);
        let _keep = y;
        let foreign = Tensor::param([1], vec![3.0]);
        match g.backward(&foreign) {
            Err(Error::LossNotOnGraph) => {}
            other => panic!("expected LossNotOnGraph, got {other:?}"),
        }
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut g = Graph::inference();
        let x = p(&[2], &[1.0, 2.0]);
        let y = g.relu(&x);
        assert!(!y.requires_grad());
        assert!(g.is_empty());
    }

    #[test]
    fn conv2d_identity_kernel() {
        // 1×1 kernel with weight 1 reproduces the input
        let mut g = Graph::new();
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let y = g.conv2d(&x, &w, None, ConvSpec::unit()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_known_3x3_sum_kernel() {
        // all-ones 3×3 kernel, padding 1: each output = sum of 3×3 neighborhood
        let mut g = Graph::new();
        let x = t(&[1, 3, 3], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let w = t(&[1, 1, 3, 3], &[1.0; 9]);
        let spec = ConvSpec {
            stride: 1,
            padding: 1,
            dilation: 1,
        };
        let y = g.conv2d(&x, &w, None, spec).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        // corners see 4 ones, edges 6, center 9
        assert_eq!(
            y.data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv2d_stride_and_dilation_shapes() {
        let mut g = Graph::new();
        let x = t(&[1, 8, 8], &[0.0; 64]);
        let w = t(&[2, 1, 3, 3], &[0.0; 18]);
        let y = g
            .conv2d(
                &x,
                &w,
                None,
                ConvSpec {
                    stride: 2,
                    padding: 1,
                    dilation: 1,
                },
            )
            .unwrap();
        assert_eq!(y.shape(), &[2, 4, 4]);
        let y = g
            .conv2d(
                &x,
                &w,
                None,
                ConvSpec {
                    stride: 1,
                    padding: 2,
                    dilation: 2,
                },
            )
            .unwrap();
        assert_eq!(y.shape(), &[2, 8, 8]);
    }

    #[test]
    fn matmul_and_transpose_agree() {
        let mut g = Graph::new();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[4, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let nt = g.matmul_nt(&a, &b).unwrap();
        let bt = g.transpose(&b).unwrap();
        let mm = g.matmul(&a, &bt).unwrap();
        assert_eq!(nt.data(), mm.data());
        assert_eq!(nt.shape(), &[2, 4]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = t(&[2], &[1.0, 0.0]);
        assert!(g.log(&x).is_err());
    }

    #[test]
    fn upsample_linear_ramp_midpoints() {
        // 1-D ramp [0, 1] upsampled ×2 with half-pixel centers:
        // sources at -0.25, 0.25, 0.75, 1.25 → clamped [0, 0.25, 0.75, 1]
        let mut g = Graph::new();
        let x = t(&[1, 1, 2], &[0.0, 1.0]);
        let y = g.upsample_bilinear(&x, 2).unwrap();
        let got = y.data();
        assert_relative_eq!(got[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(got[1], 0.25, epsilon = 1e-15);
        assert_relative_eq!(got[2], 0.75, epsilon = 1e-15);
        assert_relative_eq!(got[3], 1.0, epsilon = 1e-15);
    }
}
