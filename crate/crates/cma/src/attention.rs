//! Cross-modality attention: the scaled dot-product CMA operation, the
//! residual CMA block around it, the non-local block as the same-modality
//! special case, and attention-map extraction.
//!
//! Queries come from feature map `x` (one modality); keys and values come
//! from `y` (the other modality). Positions are flattened over space (or
//! space-time for 5-D maps), and queries never attend across batch items.
//! The logits are divided by sqrt(d_k) before the softmax, i.e. standard
//! scaled dot-product attention.

use crate::graph::{Graph, NodeId};
use crate::param::{Bindings, BnLayer, Mode, Param};
use crate::tensor::Tensor;
use crate::{CmaError, Result};
use rand::Rng;

/// Learnable state of one CMA block: the q/k/v/out embeddings and the
/// output batch norm whose scale starts at zero (identity at init).
#[derive(Debug, Clone)]
pub struct CmaBlockParams {
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
    pub w_out: Param,
    pub out_norm: BnLayer,
    pub d_k: usize,
    pub pool_kv: bool,
}

impl CmaBlockParams {
    /// Default builder: d_k = floor(Cx/2) ("channels halved"), He-initialized
    /// embeddings, zero-initialized output-norm scale, spatial max-pooling
    /// before k and v.
    pub fn new<R: Rng>(prefix: &str, cx: usize, cy: usize, rng: &mut R) -> Result<Self> {
        if cx < 2 {
            return Err(CmaError::Param(format!(
                "CMA block needs at least 2 query channels, got {}",
                cx
            )));
        }
        Self::with_options(prefix, cx, cy, cx / 2, true, rng)
    }

    pub fn with_options<R: Rng>(
        prefix: &str,
        cx: usize,
        cy: usize,
        d_k: usize,
        pool_kv: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if d_k == 0 {
            return Err(CmaError::Param("d_k must be positive".into()));
        }
        Ok(CmaBlockParams {
            w_q: Param::he_init(format!("{prefix}.w_q"), vec![1, 1, cx, d_k], cx, rng),
            w_k: Param::he_init(format!("{prefix}.w_k"), vec![1, 1, cy, d_k], cy, rng),
            w_v: Param::he_init(format!("{prefix}.w_v"), vec![1, 1, cy, d_k], cy, rng),
            w_out: Param::he_init(format!("{prefix}.w_out"), vec![1, 1, d_k, cx], d_k, rng),
            out_norm: BnLayer::with_gamma(&format!("{prefix}.out_norm"), cx, 0.0),
            d_k,
            pool_kv,
        })
    }

    pub fn query_channels(&self) -> usize {
        self.w_q.value.shape()[2]
    }

    pub fn kv_channels(&self) -> usize {
        self.w_k.value.shape()[2]
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.w_q, &self.w_k, &self.w_v, &self.w_out];
        v.extend(self.out_norm.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_out];
        v.extend(self.out_norm.params_mut());
        v
    }
}

/// softmax(Q·Kᵀ / sqrt(d_k)) · V on 2-D position matrices.
pub fn cma_attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let (a, _) = cma_attention_with_weights(g, q, k, v)?;
    Ok(a)
}

/// Same as [`cma_attention`] but also returns the softmaxed weight node.
pub fn cma_attention_with_weights(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<(NodeId, NodeId)> {
    let sq = g.value(q).shape().to_vec();
    let sk = g.value(k).shape().to_vec();
    let sv = g.value(v).shape().to_vec();
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(CmaError::dim("attention d_k between Q and K", &sq, &sk));
    }
    if sv.len() != 2 || sv[0] != sk[0] {
        return Err(CmaError::dim("attention key/value row counts", &sk, &sv));
    }
    let d_k = sq[1];
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = g.softmax_rows(scaled)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// 1x1 embedding over flattened positions: `[N, ..., Cin] -> [N, ..., Cout]`.
fn embed(g: &mut Graph, x: NodeId, w: NodeId) -> Result<NodeId> {
    let xs = g.value(x).shape().to_vec();
    let ws = g.value(w).shape().to_vec(); // [1,1,cin,cout]
    let (cin, cout) = (ws[2], ws[3]);
    let last = *xs.last().unwrap();
    if last != cin {
        return Err(CmaError::dim("1x1 embedding channels", &xs, &ws));
    }
    let rows = g.value(x).numel() / cin;
    let flat = g.reshape(x, vec![rows, cin])?;
    let wmat = g.reshape(w, vec![cin, cout])?;
    let y = g.matmul(flat, wmat)?;
    let mut out_shape = xs;
    *out_shape.last_mut().unwrap() = cout;
    g.reshape(y, out_shape)
}

/// Spatial-only stride-2 max pooling; time is never pooled for 5-D maps.
fn pool_spatial(g: &mut Graph, y: NodeId) -> Result<NodeId> {
    let s = g.value(y).shape().to_vec();
    match s.len() {
        4 => g.max_pool2d(y),
        5 => {
            let (n, t, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
            let folded = g.reshape(y, vec![n * t, h, w, c])?;
            let pooled = g.max_pool2d(folded)?;
            let ps = g.value(pooled).shape().to_vec();
            g.reshape(pooled, vec![n, t, ps[1], ps[2], c])
        }
        _ => Err(CmaError::Shape(format!(
            "CMA expects NHWC or NTHWC maps, got {:?}",
            s
        ))),
    }
}

fn check_map_pair(xs: &[usize], ys: &[usize]) -> Result<()> {
    if xs.len() < 4 || xs.len() > 5 || ys.len() != xs.len() {
        return Err(CmaError::dim("CMA maps must both be NHWC or NTHWC", xs, ys));
    }
    if xs[0] != ys[0] {
        return Err(CmaError::dim("CMA batch extents", xs, ys));
    }
    Ok(())
}

/// The CMA operation: embed queries from `x`, (optionally pooled) keys and
/// values from `y`, attend per batch item over flattened positions, and
/// reshape to `x`'s spatial layout with `d_k` channels.
///
/// `capture`, when set, receives each batch item's softmaxed attention
/// matrix `[Nq, Nk]`.
pub fn cma_operation(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    params: &CmaBlockParams,
    trainable: bool,
    b: &mut Bindings,
    mut capture: Option<&mut Vec<Tensor>>,
) -> Result<NodeId> {
    let xs = g.value(x).shape().to_vec();
    let ys = g.value(y).shape().to_vec();
    check_map_pair(&xs, &ys)?;
    if *xs.last().unwrap() != params.query_channels() || *ys.last().unwrap() != params.kv_channels() {
        return Err(CmaError::dim("CMA block channels", &xs, &ys));
    }
    let w_q = b.bind(g, &params.w_q, trainable);
    let w_k = b.bind(g, &params.w_k, trainable);
    let w_v = b.bind(g, &params.w_v, trainable);

    let q_map = embed(g, x, w_q)?;
    let y_kv = if params.pool_kv { pool_spatial(g, y)? } else { y };
    let k_map = embed(g, y_kv, w_k)?;
    let v_map = embed(g, y_kv, w_v)?;

    let n = xs[0];
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let qi = g.slice_item(q_map, i)?;
        let ki = g.slice_item(k_map, i)?;
        let vi = g.slice_item(v_map, i)?;
        let (zi, wi) = cma_attention_with_weights(g, qi, ki, vi)?;
        if let Some(cap) = capture.as_deref_mut() {
            cap.push(g.value(wi).clone());
        }
        items.push(zi);
    }
    let mut z_shape = xs;
    *z_shape.last_mut().unwrap() = params.d_k;
    g.stack_items(&items, z_shape)
}

/// The CMA block: `out = batch_norm(conv_1x1(z; W_out)) + x`, same shape
/// as `x`. Identity at init because the output norm's scale starts at zero.
pub fn cma_block_forward(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    params: &mut CmaBlockParams,
    mode: Mode,
    trainable: bool,
    b: &mut Bindings,
) -> Result<NodeId> {
    cma_block_forward_captured(g, x, y, params, mode, trainable, b, None)
}

#[allow(clippy::too_many_arguments)]
pub fn cma_block_forward_captured(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    params: &mut CmaBlockParams,
    mode: Mode,
    trainable: bool,
    b: &mut Bindings,
    capture: Option<&mut Vec<Tensor>>,
) -> Result<NodeId> {
    let z = cma_operation(g, x, y, params, trainable, b, capture)?;
    let w_out = b.bind(g, &params.w_out, trainable);
    let projected = embed(g, z, w_out)?;
    let normed = params.out_norm.forward(g, projected, mode, trainable, b)?;
    g.add(normed, x)
}

/// Non-local block: the same-modality special case, `cma_block_forward(x, x)`.
pub fn nonlocal_block_forward(
    g: &mut Graph,
    x: NodeId,
    params: &mut CmaBlockParams,
    mode: Mode,
    trainable: bool,
    b: &mut Bindings,
) -> Result<NodeId> {
    cma_block_forward_captured(g, x, x, params, mode, trainable, b, None)
}

/// One query position's normalized attention row, with index maps for the
/// (post-pooling) key grid and a nearest-neighbor render at y's resolution.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    /// Weights over all key positions; sums to 1.
    pub row: Vec<f64>,
    /// Key grid extents after pooling, row-major (h, w).
    pub key_h: usize,
    pub key_w: usize,
    /// Flat query position index in x's spatial grid.
    pub query_index: usize,
    /// Render upsampled to y's spatial resolution by nearest neighbor.
    pub grid: Tensor,
}

/// Extract the attention row of `(qy, qx)` in `x`'s grid over all key
/// positions of `y`, for 4-D maps. Runs the block in eval mode on batch
/// item 0 without touching its state.
pub fn extract_attention_map(
    x: &Tensor,
    y: &Tensor,
    params: &CmaBlockParams,
    query: (usize, usize),
) -> Result<AttentionMap> {
    let xs = x.shape().to_vec();
    let ys = y.shape().to_vec();
    if xs.len() != 4 || ys.len() != 4 {
        return Err(CmaError::Shape(format!(
            "attention-map extraction expects NHWC maps, got {:?} / {:?}",
            xs, ys
        )));
    }
    let (qy, qx) = query;
    if qy >= xs[1] || qx >= xs[2] {
        return Err(CmaError::Index(format!(
            "query position ({}, {}) outside {}x{} grid",
            qy, qx, xs[1], xs[2]
        )));
    }
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let xn = g.leaf(x.clone(), false);
    let yn = g.leaf(y.clone(), false);
    let mut captured = Vec::new();
    cma_operation(&mut g, xn, yn, params, false, &mut b, Some(&mut captured))?;
    let weights = &captured[0];
    let nk = weights.shape()[1];
    let query_index = qy * xs[2] + qx;
    let row = weights.data()[query_index * nk..(query_index + 1) * nk].to_vec();

    let (key_h, key_w) = if params.pool_kv {
        (ys[1] / 2, ys[2] / 2)
    } else {
        (ys[1], ys[2])
    };
    debug_assert_eq!(key_h * key_w, nk);

    // nearest-neighbor upsample to y's resolution
    let (out_h, out_w) = (ys[1], ys[2]);
    let mut grid = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let ky = (oy * key_h / out_h).min(key_h - 1);
            let kx = (ox * key_w / out_w).min(key_w - 1);
            grid[oy * out_w + ox] = row[ky * key_w + kx];
        }
    }
    Ok(AttentionMap {
        row,
        key_h,
        key_w,
        query_index,
        grid: Tensor::new(vec![out_h, out_w], grid)?,
    })
}
