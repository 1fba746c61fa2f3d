//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] is an append-only tape of operations over [`Tensor`] values.
//! Node ids are handed out in topological order, so the backward pass is a
//! single reverse sweep over the tape. Each backward call computes fresh
//! per-node adjoints and then adds them into the persistent grad buffers,
//! so repeated calls without [`Graph::zero_grads`] accumulate.
//!
//! Conventions fixed here: ReLU gradient at exactly 0 is 0; max-pool ties
//! break to the first element in scan order; dropout is inverted (survivors
//! scaled by `1/(1-p)` at train time, eval is identity).

use crate::tensor::{strides, Tensor};
use crate::{CmaError, Result};
use rand::Rng;

pub type NodeId = usize;

enum Op {
    Leaf,
    /// C = A[m,k] * B[k,n]
    MatMul { a: NodeId, b: NodeId },
    /// C = A[m,k] * B[n,k]^T
    MatMulNT { a: NodeId, b: NodeId },
    SoftmaxRows { x: NodeId },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        stride: usize,
        pad: usize,
    },
    /// 2x2 window, stride 2; argmax holds the flat input index per output.
    MaxPool2d { input: NodeId, argmax: Vec<usize> },
    BatchNormTrain {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    BatchNormEval {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    GlobalAvgPool { x: NodeId },
    Dropout { x: NodeId, mask: Vec<f64> },
    Reshape { x: NodeId },
    /// Item `index` of a batched map `[N, mid.., C]`, flattened to `[P, C]`.
    SliceItem { x: NodeId, index: usize },
    /// Inverse of SliceItem over all items.
    StackItems { items: Vec<NodeId> },
    /// `[B*K, C]` -> `[B, C]`, mean over each group of K consecutive rows.
    SegmentMean { x: NodeId, k: usize },
    /// Mean over rows of `-(logits[label] - logsumexp(logits))`.
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    Sum { x: NodeId },
    /// Scalar dot product with a constant probe vector.
    WeightedSum { x: NodeId, w: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// ---------------------------------------------------------------------------
// dense f64 matmul kernels (accumulating)

pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            c[i * n + j] += acc;
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n]
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for l in 0..k {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a[l * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d im2col helpers

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if input.len() != 4 || weight.len() != 4 {
        return Err(CmaError::dim("conv2d expects NHWC input and [kh,kw,Cin,Cout] weight", input, weight));
    }
    let (n, h, w, cin) = (input[0], input[1], input[2], input[3]);
    let (kh, kw, wcin, cout) = (weight[0], weight[1], weight[2], weight[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(CmaError::Shape(format!("conv2d kernel extents must be odd, got {}x{}", kh, kw)));
    }
    if !(stride == 1 || stride == 2) {
        return Err(CmaError::Param(format!("conv2d stride must be 1 or 2, got {}", stride)));
    }
    if wcin != cin {
        return Err(CmaError::dim("conv2d channel mismatch", input, weight));
    }
    let oh_num = (h + 2 * pad).checked_sub(kh);
    let ow_num = (w + 2 * pad).checked_sub(kw);
    match (oh_num, ow_num) {
        (Some(a), Some(b)) => Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            oh: a / stride + 1,
            ow: b / stride + 1,
        }),
        _ => Err(CmaError::dim("conv2d output extent < 1", input, weight)),
    }
}

/// Rows: one per (n, oh, ow); cols: kh*kw*cin.
fn im2col(input: &[f64], g: &ConvGeom, stride: usize, pad: usize) -> Vec<f64> {
    let cols = g.kh * g.kw * g.cin;
    let mut out = vec![0.0; g.n * g.oh * g.ow * cols];
    let row_stride = g.w * g.cin;
    let img_stride = g.h * row_stride;
    let mut r = 0;
    for n in 0..g.n {
        let img = &input[n * img_stride..(n + 1) * img_stride];
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let dst = &mut out[r * cols..(r + 1) * cols];
                for dh in 0..g.kh {
                    let ih = (oh * stride + dh) as isize - pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for dw in 0..g.kw {
                        let iw = (ow * stride + dw) as isize - pad as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        let src = ih as usize * row_stride + iw as usize * g.cin;
                        let d = (dh * g.kw + dw) * g.cin;
                        dst[d..d + g.cin].copy_from_slice(&img[src..src + g.cin]);
                    }
                }
                r += 1;
            }
        }
    }
    out
}

/// Scatter-add of a column matrix back onto the input layout.
fn col2im_acc(dcol: &[f64], g: &ConvGeom, stride: usize, pad: usize, dinput: &mut [f64]) {
    let cols = g.kh * g.kw * g.cin;
    let row_stride = g.w * g.cin;
    let img_stride = g.h * row_stride;
    let mut r = 0;
    for n in 0..g.n {
        let img = &mut dinput[n * img_stride..(n + 1) * img_stride];
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let src = &dcol[r * cols..(r + 1) * cols];
                for dh in 0..g.kh {
                    let ih = (oh * stride + dh) as isize - pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for dw in 0..g.kw {
                        let iw = (ow * stride + dw) as isize - pad as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        let dst = ih as usize * row_stride + iw as usize * g.cin;
                        let s = (dh * g.kw + dw) * g.cin;
                        for c in 0..g.cin {
                            img[dst + c] += src[s + c];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------

/// Shape of a batched feature map split as (batch, positions, channels).
fn map_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(CmaError::Shape(format!(
            "expected a batched map [N, ..., C], got {:?}",
            shape
        )));
    }
    let n = shape[0];
    let c = *shape.last().unwrap();
    let p: usize = shape[1..shape.len() - 1].iter().product();
    Ok((n, p, c))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // -- ops ----------------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CmaError::dim("matmul inner extents", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, req, Op::MatMul { a, b }))
    }

    /// `a[m,k] * b[n,k]^T`, the Q·Kᵀ building block.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(CmaError::dim("matmul_nt inner extents", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, req, Op::MatMulNT { a, b }))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(CmaError::Shape(format!("softmax_rows expects a matrix, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                orow[j] = e;
                sum += e;
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, req, Op::SoftmaxRows { x }))
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let g = conv_geometry(
            self.value(input).shape(),
            self.value(weight).shape(),
            stride,
            pad,
        )?;
        let col = im2col(self.value(input).data(), &g, stride, pad);
        let rows = g.n * g.oh * g.ow;
        let kcin = g.kh * g.kw * g.cin;
        let mut out = vec![0.0; rows * g.cout];
        matmul_acc(&col, self.value(weight).data(), rows, kcin, g.cout, &mut out);
        let req = self.req(&[input, weight]);
        Ok(self.push(
            Tensor::new(vec![g.n, g.oh, g.ow, g.cout], out)?,
            req,
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            },
        ))
    }

    pub fn max_pool2d(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(CmaError::Shape(format!(
                "max_pool2d expects NHWC with H,W >= 2, got {:?}",
                s
            )));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(input).data();
        let mut out = vec![0.0; n * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        let st = strides(&s);
        for ni in 0..n {
            for y in 0..oh {
                for x in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        // first-encountered max wins ties
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ni * st[0] + (2 * y + dy) * st[1] + (2 * x + dx) * st[2] + ch;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((ni * oh + y) * ow + x) * c + ch;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let req = self.req(&[input]);
        Ok(self.push(
            Tensor::new(vec![n, oh, ow, c], out)?,
            req,
            Op::MaxPool2d { input, argmax },
        ))
    }

    /// Batch norm over all positions per channel. Returns the node plus the
    /// batch statistics so the caller can update running state.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let s = self.value(input).shape().to_vec();
        let (n, p, c) = map_dims(&s)?;
        self.check_bn_params(gamma, beta, c)?;
        if eps <= 0.0 {
            return Err(CmaError::Param(format!("batch_norm eps must be > 0, got {}", eps)));
        }
        let m = n * p;
        if m == 0 {
            return Err(CmaError::Empty("batch_norm train mode with zero batch".into()));
        }
        let xd = self.value(input).data();
        // two-pass mean/variance per channel
        let mut mean = vec![0.0; c];
        for r in 0..m {
            for ch in 0..c {
                mean[ch] += xd[r * c + ch];
            }
        }
        for v in mean.iter_mut() {
            *v /= m as f64;
        }
        let mut var = vec![0.0; c];
        for r in 0..m {
            for ch in 0..c {
                let d = xd[r * c + ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= m as f64;
        }
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; xd.len()];
        for r in 0..m {
            for ch in 0..c {
                let xhat = (xd[r * c + ch] - mean[ch]) * invstd[ch];
                out[r * c + ch] = gd[ch] * xhat + bd[ch];
            }
        }
        let req = self.req(&[input, gamma, beta]);
        let id = self.push(
            Tensor::new(s, out)?,
            req,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                eps,
                mean: mean.clone(),
                var: var.clone(),
            },
        );
        Ok((id, mean, var))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<NodeId> {
        let s = self.value(input).shape().to_vec();
        let (_, _, c) = map_dims(&s)?;
        self.check_bn_params(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(CmaError::dim(
                "batch_norm running stats",
                &[running_mean.len()],
                &[c],
            ));
        }
        let xd = self.value(input).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let invstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; xd.len()];
        for (i, v) in xd.iter().enumerate() {
            let ch = i % c;
            out[i] = gd[ch] * (v - running_mean[ch]) * invstd[ch] + bd[ch];
        }
        let req = self.req(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::new(s, out)?,
            req,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                eps,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
            },
        ))
    }

    fn check_bn_params(&self, gamma: NodeId, beta: NodeId, c: usize) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(CmaError::dim(
                "batch_norm gamma/beta",
                self.value(gamma).shape(),
                &[c],
            ));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let shape = v.shape().to_vec();
        let req = self.req(&[x]);
        self.push(Tensor::new(shape, out).unwrap(), req, Op::Relu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa != sb {
            return Err(CmaError::dim("elementwise add", &sa, &sb));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(sa, out)?, req, Op::Add { a, b }))
    }

    /// `[.., C] + [C]`, broadcast over leading dims.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        let c = *sa.last().unwrap();
        if sb != [c] {
            return Err(CmaError::dim("add_bias", &sa, &sb));
        }
        let bd = self.value(bias).data().to_vec();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % c])
            .collect();
        let req = self.req(&[a, bias]);
        Ok(self.push(Tensor::new(sa, out)?, req, Op::AddBias { a, bias }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa != sb {
            return Err(CmaError::dim("elementwise mul", &sa, &sb));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(sa, out)?, req, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(CmaError::Param(format!("scale factor must be finite, got {}", c)));
        }
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().map(|a| a * c).collect();
        let shape = v.shape().to_vec();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, req, Op::Scale { x, c }))
    }

    /// `[N, ..., C]` -> `[N, C]`, mean over positions.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        let (n, p, c) = map_dims(&s)?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            for pi in 0..p {
                for ch in 0..c {
                    out[ni * c + ch] += xd[(ni * p + pi) * c + ch];
                }
            }
        }
        for v in out.iter_mut() {
            *v /= p as f64;
        }
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, req, Op::GlobalAvgPool { x }))
    }

    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, train: bool, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(CmaError::Param(format!("dropout p must satisfy 0 <= p < 1, got {}", p)));
        }
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if !train || p == 0.0 {
            let out = v.data().to_vec();
            let req = self.req(&[x]);
            let mask = vec![1.0; out.len()];
            return Ok(self.push(Tensor::new(shape, out)?, req, Op::Dropout { x, mask }));
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let out: Vec<f64> = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, req, Op::Dropout { x, mask }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        let req = self.req(&[x]);
        Ok(self.push(v, req, Op::Reshape { x }))
    }

    /// Batch item `index` of `[N, mid.., C]`, flattened to `[P, C]`.
    pub fn slice_item(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        let (n, p, c) = map_dims(&s)?;
        if index >= n {
            return Err(CmaError::Index(format!("batch item {} of {}", index, n)));
        }
        let xd = self.value(x).data();
        let out = xd[index * p * c..(index + 1) * p * c].to_vec();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(vec![p, c], out)?, req, Op::SliceItem { x, index }))
    }

    /// Stack `[P, C]` items back into `[N, mid.., C]` with the given map shape.
    pub fn stack_items(&mut self, items: &[NodeId], shape: Vec<usize>) -> Result<NodeId> {
        if items.is_empty() {
            return Err(CmaError::Empty("stack_items with no items".into()));
        }
        let (n, p, c) = map_dims(&shape)?;
        if n != items.len() {
            return Err(CmaError::dim("stack_items batch extent", &[items.len()], &[n]));
        }
        let mut out = Vec::with_capacity(n * p * c);
        for &it in items {
            let v = self.value(it);
            if v.shape() != [p, c] {
                return Err(CmaError::dim("stack_items item shape", v.shape(), &[p, c]));
            }
            out.extend_from_slice(v.data());
        }
        let req = self.req(items);
        Ok(self.push(
            Tensor::new(shape, out)?,
            req,
            Op::StackItems { items: items.to_vec() },
        ))
    }

    /// Mean over each group of `k` consecutive rows: `[B*K, C]` -> `[B, C]`.
    pub fn segment_mean(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || k == 0 || !s[0].is_multiple_of(k) {
            return Err(CmaError::Shape(format!(
                "segment_mean expects [B*K, C] with K={}, got {:?}",
                k, s
            )));
        }
        let (rows, c) = (s[0], s[1]);
        let b = rows / k;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ki in 0..k {
                for ch in 0..c {
                    out[bi * c + ch] += xd[(bi * k + ki) * c + ch];
                }
            }
        }
        for v in out.iter_mut() {
            *v /= k as f64;
        }
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(vec![b, c], out)?, req, Op::SegmentMean { x, k }))
    }

    /// Mean over rows of `-(logits[label] - logsumexp(logits))`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(CmaError::dim("cross_entropy rows vs labels", &s, &[labels.len()]));
        }
        let (m, c) = (s[0], s[1]);
        for &l in labels {
            if l >= c {
                return Err(CmaError::Index(format!("label {} out of range for {} classes", l, c)));
            }
        }
        let xd = self.value(logits).data();
        let mut total = 0.0;
        for i in 0..m {
            let row = &xd[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        let req = self.req(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / m as f64),
            req,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        let req = self.req(&[x]);
        self.push(Tensor::scalar(total), req, Op::Sum { x })
    }

    /// Scalar probe `sum(w .* x)` with constant weights; used by gradcheck to
    /// give every output coordinate a distinct adjoint.
    pub fn weighted_sum(&mut self, x: NodeId, w: &[f64]) -> Result<NodeId> {
        let v = self.value(x);
        if v.numel() != w.len() {
            return Err(CmaError::dim("weighted_sum probe", v.shape(), &[w.len()]));
        }
        let total: f64 = v.data().iter().zip(w).map(|(a, b)| a * b).sum();
        let req = self.req(&[x]);
        Ok(self.push(
            Tensor::scalar(total),
            req,
            Op::WeightedSum { x, w: w.to_vec() },
        ))
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from `loss` (must be scalar). Adjoints are computed in
    /// fresh buffers and then added into each node's persistent grad, so
    /// repeated calls accumulate on leaves.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CmaError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n_nodes = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        adj[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[id].requires_grad {
                let numel = self.nodes[id].value.numel();
                let slot = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; numel]);
                for (a, b) in slot.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn adj_slot<'a>(
        adj: &'a mut [Option<Vec<f64>>],
        nodes: &[Node],
        id: NodeId,
    ) -> Option<&'a mut Vec<f64>> {
        // requires_grad propagates upward, so a non-requiring node has no
        // requiring leaf beneath it and can be skipped entirely.
        if !nodes[id].requires_grad {
            return None;
        }
        Some(adj[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]))
    }

    fn propagate(&mut self, id: NodeId, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        // Borrow juggling: collect everything we need from the node, then
        // write into parent adjoints.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a].requires_grad {
                    let bd = self.nodes[b].value.data().to_vec();
                    if let Some(da) = Self::adj_slot(adj, &self.nodes, a) {
                        matmul_nt_acc(g, &bd, m, n, k, da); // dA = dC * B^T
                    }
                }
                if self.nodes[b].requires_grad {
                    let ad = self.nodes[a].value.data().to_vec();
                    if let Some(db) = Self::adj_slot(adj, &self.nodes, b) {
                        matmul_tn_acc(&ad, g, k, m, n, db); // dB = A^T * dC
                    }
                }
            }
            Op::MatMulNT { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[0]); // C = A[m,k] B[n,k]^T
                if self.nodes[a].requires_grad {
                    let bd = self.nodes[b].value.data().to_vec();
                    if let Some(da) = Self::adj_slot(adj, &self.nodes, a) {
                        matmul_acc(g, &bd, m, n, k, da); // dA = dC * B
                    }
                }
                if self.nodes[b].requires_grad {
                    let ad = self.nodes[a].value.data().to_vec();
                    if let Some(db) = Self::adj_slot(adj, &self.nodes, b) {
                        matmul_tn_acc(g, &ad, n, m, k, db); // dB = dC^T * A
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                if !self.nodes[x].requires_grad {
                    return;
                }
                let y = self.nodes[id].value.data().to_vec();
                let s = self.nodes[id].value.shape().to_vec();
                let (m, n) = (s[0], s[1]);
                if let Some(dx) = Self::adj_slot(adj, &self.nodes, x) {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            } => {
                let (input, weight, stride, pad) = (*input, *weight, *stride, *pad);
                let geom = conv_geometry(
                    self.nodes[input].value.shape(),
                    self.nodes[weight].value.shape(),
                    stride,
                    pad,
                )
                .expect("forward validated geometry");
                let rows = geom.n * geom.oh * geom.ow;
                let kcin = geom.kh * geom.kw * geom.cin;
                if self.nodes[weight].requires_grad {
                    // dW = col^T * dOut (im2col recomputed, not stored)
                    let col = im2col(self.nodes[input].value.data(), &geom, stride, pad);
                    if let Some(dw) = Self::adj_slot(adj, &self.nodes, weight) {
                        matmul_tn_acc(&col, g, kcin, rows, geom.cout, dw);
                    }
                }
                if self.nodes[input].requires_grad {
                    let wd = self.nodes[weight].value.data().to_vec();
                    let mut dcol = vec![0.0; rows * kcin];
                    matmul_nt_acc(g, &wd, rows, geom.cout, kcin, &mut dcol);
                    if let Some(dx) = Self::adj_slot(adj, &self.nodes, input) {
                        col2im_acc(&dcol, &geom, stride, pad, dx);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let input = *input;
                if !self.nodes[input].requires_grad {
                    return;
                }
                let argmax = argmax.clone();
                if let Some(dx) = Self::adj_slot(adj, &self.nodes, input) {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                eps,
                mean,
                var,
            } => {
                let (input, gamma, beta, eps) = (*input, *gamma, *beta, *eps);
                let mean = mean.clone();
                let var = var.clone();
                let c = mean.len();
                let xd = self.nodes[input].value.data().to_vec();
                let gd = self.nodes[gamma].value.data().to_vec();
                let m = xd.len() / c;
                let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                // channel reductions
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for r in 0..m {
                    for ch in 0..c {
                        let i = r * c + ch;
                        let xhat = (xd[i] - mean[ch]) * invstd[ch];
                        sum_dy[ch] += g[i];
                        sum_dy_xhat[ch] += g[i] * xhat;
                    }
                }
                if self.nodes[gamma].requires_grad {
                    if let Some(dg) = Self::adj_slot(adj, &self.nodes, gamma) {
                        for ch in 0..c {
                            dg[ch] += sum_dy_xhat[ch];
                        }
                    }
                }
                if self.nodes[beta].requires_grad {
                    if let Some(db) = Self::adj_slot(adj, &self.nodes, beta) {
                        for ch in 0..c {
                            db[ch] += sum_dy[ch];
                        }
                    }
                }
                if self.nodes[input].requires_grad {
                    let mf = m as f64;
                    if let Some(dx) = Self::adj_slot(adj, &self.nodes, input) {
                        for r in 0..m {
                            for ch in 0..c {
                                let i = r * c + ch;
                                let xhat = (xd[i] - mean[ch]) * invstd[ch];
                                dx[i] += gd[ch] * invstd[ch] / mf
                                    * (mf * g[i] - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
                            }
                        }
                    }
                }
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                eps,
                mean,
                var,
            } => {
                let (input, gamma, beta, eps) = (*input, *gamma, *beta, *eps);
                let mean = mean.clone();
                let var = var.clone();
                let c = mean.len();
                let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let xd = self.nodes[input].value.data().to_vec();
                let gd = self.nodes[gamma].value.data().to_vec();
                if self.nodes[gamma].requires_grad {
                    if let Some(dg) = Self::adj_slot(adj, &self.nodes, gamma) {
                        for (i, &gi) in g.iter().enumerate() {
                            let ch = i % c;
                            dg[ch] += gi * (xd[i] - mean[ch]) * invstd[ch];
                        }
                    }
                }
                if self.nodes[beta].requires_grad {
                    if let Some(db) = Self::adj_slot(adj, &self.nodes, beta) {
                        for (i, &gi) in g.iter().enumerate() {
                            db[i % c] += gi;
                        }
                    }
                }
                if self.nodes[input].requires_grad {
                    if let Some(dx) = Self::adj_slot(adj, &self.nodes, input) {
                        for (i, &gi) in g.iter().enumerate() {
                            let ch = i % c;
                            dx[i] += gi * gd[ch] * invstd[ch];
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if !self.nodes[x].requires_grad {
                    return;
                }
                let xd = self.nodes[x].value.data().to_vec();
                if let Some(dx) = Self::adj_slot(adj, &self.nodes, x) {
                    // gradient at exactly 0 is 0
                    for (i, &v) in xd.iter().enumerate() {
                        if v > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                for p in [a, b] {
                    if let Some(dp) = Self::adj_slot(adj, &self.nodes, p) {
                        for (d, &gi) in dp.iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::AddBias { a, bias } => {
                let (a, bias) = (*a, *bias);
                let c = self.nodes[bias].value.numel();
                if let Some(da) = Self::adj_slot(adj, &self.nodes, a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if let Some(db) = Self::adj_slot(adj, &self.nodes, bias) {
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % c] += gi;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let bd = self.nodes[b].value.data().to_vec();
                    if let Some(da) = Self::adj_slot(adj, &self.nodes, a) {
                        for i in 0..g.len() {
                            da[i] += g[i] * bd[i];
                        }
                    }
                }
                if self.nodes[b].requires_grad {
                    let ad = self.nodes[a].value.data().to_vec();
                    if let Some(db) = Self::adj_slot(adj, &self.nodes, b) {
                        for i in 0..g.len() {
                            db[i] += g[i] * ad[i];
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if let Some(dx) = Self::adj_slot(adj, &self.nodes, x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                if !self.nodes[x].requires_grad {
                    return;
                }
                let s = self.nodes[x].value.shape().to_vec();
                let (n, p, c) = map_dims(&s).unwrap();
                if let Some(dx) = Self::adj_slot(adj, &self.nodes, x) {
                    let inv = 1.0 / p as f64;
                    for ni in 0..n {
                        for pi in 0..p {
                            for ch in 0..c {
                                dx[(ni * p + pi) * c + ch] += g[ni * c + ch] * inv;
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                if let Some(dx) = Self::adj_slot(adj, &self.nodes, x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if let Some(dx) = Self::adj_slot(adj, &self.nodes, x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::SliceItem { x, index } => {
                let (x, index) = (*x, *index);
                let len = g.len();
                if let Some(dx) = Self::adj_slot(adj, &self.nodes, x) {
                    for i in 0..len {
                        dx[index * len + i] += g[i];
                    }
                }
            }
            Op::StackItems { items } => {
                let items = items.clone();
                let per = g.len() / items.len();
                for (n, &it) in items.iter().enumerate() {
                    if let Some(di) = Self::adj_slot(adj, &self.nodes, it) {
                        for i in 0..per {
                            di[i] += g[n * per + i];
                        }
                    }
                }
            }
            Op::SegmentMean { x, k } => {
                let (x, k) = (*x, *k);
                let s = self.nodes[x].value.shape().to_vec();
                let (rows, c) = (s[0], s[1]);
                if let Some(dx) = Self::adj_slot(adj, &self.nodes, x) {
                    let inv = 1.0 / k as f64;
                    for r in 0..rows {
                        let b = r / k;
                        for ch in 0..c {
                            dx[r * c + ch] += g[b * c + ch] * inv;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                if !self.nodes[logits].requires_grad {
                    return;
                }
                let s = self.nodes[logits].value.shape().to_vec();
                let (m, c) = (s[0], s[1]);
                let xd = self.nodes[logits].value.data().to_vec();
                let scale = g[0] / m as f64;
                if let Some(dx) = Self::adj_slot(adj, &self.nodes, logits) {
                    for i in 0..m {
                        let row = &xd[i * c..(i + 1) * c];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - mx).exp() / denom;
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            dx[i * c + j] += scale * (p - onehot);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if let Some(dx) = Self::adj_slot(adj, &self.nodes, x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                let x = *x;
                let w = w.clone();
                if let Some(dx) = Self::adj_slot(adj, &self.nodes, x) {
                    for i in 0..w.len() {
                        dx[i] += g[0] * w[i];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            vals in proptest::collection::vec(-50.0f64..50.0, 12)
        ) {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![3, 4], vals).unwrap(), false);
            let s = g.softmax_rows(x).unwrap();
            for row in g.value(s).data().chunks(4) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }

        #[test]
        fn relu_and_scale_compose_linearly(
            vals in proptest::collection::vec(-5.0f64..5.0, 6),
            c in 0.1f64..4.0
        ) {
            // scale(relu(x), c) == relu(scale(x, c)) for positive c
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![6], vals.clone()).unwrap(), false);
            let a = g.relu(x);
            let a = g.scale(a, c).unwrap();
            let b = g.scale(x, c).unwrap();
            let b = g.relu(b);
            prop_assert_eq!(g.value(a).data(), g.value(b).data());
        }
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rand::Rng::gen_range(rng, -1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::eye(2), false);
        let b = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_annihilator() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = g.leaf(Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap(), false);
        let c = g.matmul(a, b).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng(3);
        let ad = rand_vec(&mut r, 12);
        let bd = rand_vec(&mut r, 8);
        // brute-force triple loop reference
        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for t in 0..4 {
                    expect[i * 2 + j] += ad[i * 4 + t] * bd[t * 2 + j];
                }
            }
        }
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![3, 4], ad).unwrap(), false);
        let b = g.leaf(Tensor::new(vec![4, 2], bd).unwrap(), false);
        let c = g.matmul(a, b).unwrap();
        for (got, want) in g.value(c).data().iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = g.leaf(Tensor::zeros(vec![4, 2]), false);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), false);
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let mut r = rng(7);
        let row = rand_vec(&mut r, 5);
        let shifted: Vec<f64> = row.iter().map(|v| v + 3.25).collect();
        let a = g.leaf(Tensor::new(vec![1, 5], row).unwrap(), false);
        let b = g.leaf(Tensor::new(vec![1, 5], shifted).unwrap(), false);
        let sa = g.softmax_rows(a).unwrap();
        let sb = g.softmax_rows(b).unwrap();
        assert!(g.value(sa).max_abs_diff(g.value(sb)) <= 1e-15);
    }

    #[test]
    fn softmax_overflow_safe() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap(), false);
        let y = g.softmax_rows(x).unwrap();
        let d = g.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        // exp(-1000) underflows to 0 in f64; the exact value is ~5e-435
        assert!((d[0] - 1.0).abs() <= 1e-15 && d[1] >= 0.0 && d[1] < 1e-300);
    }

    #[test]
    fn conv1x1_identity() {
        let mut r = rng(11);
        let xd = rand_vec(&mut r, 3 * 3 * 2);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3, 3, 2], xd.clone()).unwrap(), false);
        let w = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &xd[..]);
    }

    #[test]
    fn conv1x1_equals_flat_matmul() {
        let mut r = rng(13);
        let xd = rand_vec(&mut r, 2 * 4 * 4 * 3);
        let wd = rand_vec(&mut r, 3 * 5);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 4, 4, 3], xd.clone()).unwrap(), false);
        let w = g.leaf(Tensor::new(vec![1, 1, 3, 5], wd.clone()).unwrap(), false);
        let conv = g.conv2d(x, w, 1, 0).unwrap();

        let xf = g.leaf(Tensor::new(vec![32, 3], xd).unwrap(), false);
        let wf = g.leaf(Tensor::new(vec![3, 5], wd).unwrap(), false);
        let mm = g.matmul(xf, wf).unwrap();
        // same im2col-backed accumulation order on both paths
        assert!(g.value(conv).data() == g.value(mm).data());
    }

    #[test]
    fn conv3x3_matches_six_loop_reference() {
        let mut r = rng(17);
        let (h, w, cin, cout) = (5, 5, 2, 3);
        let xd = rand_vec(&mut r, h * w * cin);
        let wd = rand_vec(&mut r, 3 * 3 * cin * cout);
        // naive six-loop convolution, pad 1, stride 1
        let mut expect = vec![0.0; h * w * cout];
        for oy in 0..h {
            for ox in 0..w {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for dy in 0..3usize {
                        for dx in 0..3usize {
                            let iy = oy as isize + dy as isize - 1;
                            let ix = ox as isize + dx as isize - 1;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += xd[(iy as usize * w + ix as usize) * cin + ci]
                                    * wd[((dy * 3 + dx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    expect[(oy * w + ox) * cout + co] = acc;
                }
            }
        }
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, h, w, cin], xd).unwrap(), false);
        let wt = g.leaf(Tensor::new(vec![3, 3, cin, cout], wd).unwrap(), false);
        let y = g.conv2d(x, wt, 1, 1).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_output_too_small_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 2, 2, 1]), false);
        let w = g.leaf(Tensor::zeros(vec![3, 3, 1, 1]), false);
        assert!(g.conv2d(x, w, 1, 0).is_err());
    }

    #[test]
    fn max_pool_constant_and_forced() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![1, 4, 4, 2], 3.5), false);
        let y = g.max_pool2d(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 3.5));

        let x2 = g.leaf(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let y2 = g.max_pool2d(x2).unwrap();
        assert_eq!(g.value(y2).data(), &[4.0]);
    }

    #[test]
    fn max_pool_matches_window_scan() {
        let mut r = rng(19);
        let xd = rand_vec(&mut r, 4 * 4 * 3);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 4, 4, 3], xd.clone()).unwrap(), false);
        let y = g.max_pool2d(x).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                for c in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(xd[((2 * oy + dy) * 4 + 2 * ox + dx) * 3 + c]);
                        }
                    }
                    assert_eq!(g.value(y).data()[(oy * 2 + ox) * 3 + c], best);
                }
            }
        }
    }

    #[test]
    fn batch_norm_gamma_zero_forces_zero_output() {
        let mut r = rng(23);
        let xd = rand_vec(&mut r, 2 * 3 * 3 * 4);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3, 3, 4], xd).unwrap(), false);
        let gamma = g.leaf(Tensor::zeros(vec![4]), false);
        let beta = g.leaf(Tensor::zeros(vec![4]), false);
        let (y, _, _) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_matches_two_pass_reference() {
        let mut r = rng(29);
        let (n, h, w, c) = (2, 3, 3, 4);
        let xd = rand_vec(&mut r, n * h * w * c);
        let gd = rand_vec(&mut r, c);
        let bd = rand_vec(&mut r, c);
        let eps = 1e-5;
        let m = n * h * w;
        // hand-rolled two-pass reference
        let mut mean = vec![0.0; c];
        for i in 0..m {
            for ch in 0..c {
                mean[ch] += xd[i * c + ch];
            }
        }
        for v in mean.iter_mut() {
            *v /= m as f64;
        }
        let mut var = vec![0.0; c];
        for i in 0..m {
            for ch in 0..c {
                var[ch] += (xd[i * c + ch] - mean[ch]).powi(2);
            }
        }
        for v in var.iter_mut() {
            *v /= m as f64;
        }
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![n, h, w, c], xd.clone()).unwrap(), false);
        let gamma = g.leaf(Tensor::new(vec![c], gd.clone()).unwrap(), false);
        let beta = g.leaf(Tensor::new(vec![c], bd.clone()).unwrap(), false);
        let (y, bm, bv) = g.batch_norm_train(x, gamma, beta, eps).unwrap();
        for ch in 0..c {
            assert!((bm[ch] - mean[ch]).abs() <= 1e-12);
            assert!((bv[ch] - var[ch]).abs() <= 1e-12);
        }
        for i in 0..m {
            for ch in 0..c {
                let want = gd[ch] * (xd[i * c + ch] - mean[ch]) / (var[ch] + eps).sqrt() + bd[ch];
                assert!((g.value(y).data()[i * c + ch] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_near_identity_on_standardized_input() {
        // per-channel zero-mean unit-variance input, gamma=1, beta=0
        let xd = vec![-1.0, 1.0, -1.0, 1.0];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![4, 1, 1, 1], xd.clone()).unwrap(), false);
        let gamma = g.leaf(Tensor::full(vec![1], 1.0), false);
        let beta = g.leaf(Tensor::zeros(vec![1]), false);
        let (y, _, _) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&xd) {
            assert!((got - want).abs() <= 1e-4);
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), false);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let a = g.leaf(Tensor::new(vec![2], vec![1.5, -2.5]).unwrap(), false);
        let z = g.leaf(Tensor::zeros(vec![2]), false);
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s).data(), g.value(a).data());

        // the Eq-style d_k=4 scaling halves every entry
        let h = g.scale(a, 1.0 / 4f64.sqrt()).unwrap();
        assert_eq!(g.value(h).data(), &[0.75, -1.25]);
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![2, 3, 3, 2], 7.0), false);
        let y = g.global_avg_pool(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 7.0).abs() <= 1e-12));

        let x2 = g.leaf(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let y2 = g.global_avg_pool(x2).unwrap();
        assert_eq!(g.value(y2).data(), &[2.5]);

        let mut r = rng(31);
        let xd = rand_vec(&mut r, 3 * 2 * 4);
        let x3 = g.leaf(Tensor::new(vec![1, 3, 2, 4], xd.clone()).unwrap(), false);
        let y3 = g.global_avg_pool(x3).unwrap();
        for ch in 0..4 {
            let want: f64 = (0..6).map(|p| xd[p * 4 + ch]).sum::<f64>() / 6.0;
            assert!((g.value(y3).data()[ch] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut r = rng(37);
        let xd = rand_vec(&mut r, 10);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![10], xd.clone()).unwrap(), false);
        let y0 = g.dropout(x, 0.0, true, &mut r).unwrap();
        assert_eq!(g.value(y0).data(), &xd[..]);
        let ye = g.dropout(x, 0.9, false, &mut r).unwrap();
        assert_eq!(g.value(ye).data(), &xd[..]);
        assert!(g.dropout(x, 1.0, true, &mut r).is_err());
    }

    #[test]
    fn dropout_reproducible_and_scaled() {
        let xd = vec![1.0; 1000];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1000], xd).unwrap(), false);
        let y1 = g.dropout(x, 0.7, true, &mut rng(41)).unwrap();
        let y2 = g.dropout(x, 0.7, true, &mut rng(41)).unwrap();
        assert_eq!(g.value(y1).data(), g.value(y2).data());
        let scale = 1.0 / 0.3;
        for &v in g.value(y1).data() {
            assert!(v == 0.0 || (v - scale).abs() <= 1e-12);
        }
        let survivors = g.value(y1).data().iter().filter(|&&v| v != 0.0).count();
        assert!(survivors > 200 && survivors < 400, "{survivors}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_disconnected_leaf_gets_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let other = g.leaf(Tensor::new(vec![2], vec![5.0, 6.0]).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(other).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 8]), false);
        let l = g.cross_entropy(x, &[3]).unwrap();
        assert!((g.value(l).data()[0] - (8f64).ln()).abs() <= 1e-12);
    }

    #[test]
    fn segment_mean_forced() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            false,
        );
        let y = g.segment_mean(x, 3).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }
}
