//! Two-branch residual classifier with cross-modality attention blocks.
//!
//! Each branch is a small residual CNN: 3x3 stem, three stages of residual
//! blocks with stride-2 transitions, global average pooling, dropout, and a
//! linear head. At each configured insertion point both branches carry an
//! attention block whose queries come from the owning branch and whose
//! keys/values come from the sibling branch's feature map at the same point.

use crate::attention::{cma_block_forward_captured, CmaBlockParams};
use crate::data::FLOW_CHANNELS;
use crate::graph::{Graph, NodeId};
use crate::param::{Bindings, BnLayer, Mode, Param};
use crate::tensor::Tensor;
use crate::{CmaError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// One persisted tensor: (name, shape, row-major values).
pub type WeightEntry = (String, Vec<usize>, Vec<f64>);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchConfig {
    pub input_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// (stage, after_block) insertion points; empty means plain two-stream.
    pub cma_insertion: Vec<(usize, usize)>,
    pub num_classes: usize,
}

impl BranchConfig {
    pub fn rgb_default() -> Self {
        BranchConfig {
            input_channels: 3,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            cma_insertion: vec![(1, 0), (2, 0)],
            num_classes: 8,
        }
    }

    pub fn flow_default() -> Self {
        BranchConfig {
            input_channels: FLOW_CHANNELS,
            ..BranchConfig::rgb_default()
        }
    }

    fn validate(&self, side: &str) -> Result<()> {
        if self.stage_channels.is_empty() || self.blocks_per_stage == 0 {
            return Err(CmaError::Config(format!(
                "{side} branch needs at least one stage and one block per stage"
            )));
        }
        for &(s, b) in &self.cma_insertion {
            if s >= self.stage_channels.len() || b >= self.blocks_per_stage {
                return Err(CmaError::Config(format!(
                    "{side} insertion point ({s},{b}) outside {} stages x {} blocks",
                    self.stage_channels.len(),
                    self.blocks_per_stage
                )));
            }
        }
        Ok(())
    }
}

pub struct Conv2dLayer {
    pub weight: Param,
}

impl Conv2dLayer {
    fn new<R: Rng>(name: &str, kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        Conv2dLayer {
            weight: Param::he_init(name, vec![kh, kw, cin, cout], kh * kw * cin, rng),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        b: &mut Bindings,
        x: NodeId,
        stride: usize,
        pad: usize,
        trainable: bool,
    ) -> Result<NodeId> {
        let w = b.bind(g, &self.weight, trainable);
        g.conv2d(x, w, stride, pad)
    }
}

pub struct LinearLayer {
    pub weight: Param,
    pub bias: Param,
}

impl LinearLayer {
    fn new<R: Rng>(prefix: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        LinearLayer {
            weight: Param::he_init(format!("{prefix}.w"), vec![cin, cout], cin, rng),
            bias: Param::new(format!("{prefix}.b"), Tensor::zeros(vec![cout]), false),
        }
    }

    fn forward(&self, g: &mut Graph, b: &mut Bindings, x: NodeId, trainable: bool) -> Result<NodeId> {
        let w = b.bind(g, &self.weight, trainable);
        let bias = b.bind(g, &self.bias, trainable);
        let y = g.matmul(x, w)?;
        g.add_bias(y, bias)
    }
}

/// conv-BN-ReLU-conv-BN plus skip, ReLU after the add. Stride-2 blocks
/// project the skip with a 1x1 conv + BN.
pub struct ResidualBlock {
    conv1: Conv2dLayer,
    bn1: BnLayer,
    conv2: Conv2dLayer,
    bn2: BnLayer,
    proj: Option<(Conv2dLayer, BnLayer)>,
    stride: usize,
}

impl ResidualBlock {
    fn new<R: Rng>(prefix: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let proj = if stride != 1 || cin != cout {
            Some((
                Conv2dLayer::new(&format!("{prefix}.proj.w"), 1, 1, cin, cout, rng),
                BnLayer::new(&format!("{prefix}.proj_bn"), cout),
            ))
        } else {
            None
        };
        ResidualBlock {
            conv1: Conv2dLayer::new(&format!("{prefix}.conv1.w"), 3, 3, cin, cout, rng),
            bn1: BnLayer::new(&format!("{prefix}.bn1"), cout),
            conv2: Conv2dLayer::new(&format!("{prefix}.conv2.w"), 3, 3, cout, cout, rng),
            bn2: BnLayer::new(&format!("{prefix}.bn2"), cout),
            proj,
            stride,
        }
    }

    fn forward(
        &mut self,
        g: &mut Graph,
        b: &mut Bindings,
        x: NodeId,
        mode: Mode,
        trainable: bool,
    ) -> Result<NodeId> {
        let h = self.conv1.forward(g, b, x, self.stride, 1, trainable)?;
        let h = self.bn1.forward(g, h, mode, trainable, b)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, b, h, 1, 1, trainable)?;
        let h = self.bn2.forward(g, h, mode, trainable, b)?;
        let skip = match &mut self.proj {
            Some((conv, bn)) => {
                let s = conv.forward(g, b, x, self.stride, 0, trainable)?;
                bn.forward(g, s, mode, trainable, b)?
            }
            None => x,
        };
        let out = g.add(h, skip)?;
        Ok(g.relu(out))
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.conv1.weight];
        p.extend(self.bn1.params());
        p.push(&self.conv2.weight);
        p.extend(self.bn2.params());
        if let Some((conv, bn)) = &self.proj {
            p.push(&conv.weight);
            p.extend(bn.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.conv1.weight];
        p.extend(self.bn1.params_mut());
        p.push(&mut self.conv2.weight);
        p.extend(self.bn2.params_mut());
        if let Some((conv, bn)) = &mut self.proj {
            p.push(&mut conv.weight);
            p.extend(bn.params_mut());
        }
        p
    }

    fn bn_layers(&self) -> Vec<&BnLayer> {
        let mut l = vec![&self.bn1, &self.bn2];
        if let Some((_, bn)) = &self.proj {
            l.push(bn);
        }
        l
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BnLayer> {
        let mut l = vec![&mut self.bn1, &mut self.bn2];
        if let Some((_, bn)) = &mut self.proj {
            l.push(bn);
        }
        l
    }
}

pub struct Branch {
    pub config: BranchConfig,
    stem: Conv2dLayer,
    stem_bn: BnLayer,
    stages: Vec<Vec<ResidualBlock>>,
    /// One attention block per insertion point, in `cma_insertion` order.
    cma: Vec<CmaBlockParams>,
    head: LinearLayer,
    pub frozen: bool,
}

impl Branch {
    fn new<R: Rng>(prefix: &str, cfg: &BranchConfig, sibling: &BranchConfig, rng: &mut R) -> Result<Self> {
        let stem = Conv2dLayer::new(
            &format!("{prefix}.stem.w"),
            3,
            3,
            cfg.input_channels,
            cfg.stage_channels[0],
            rng,
        );
        let stem_bn = BnLayer::new(&format!("{prefix}.stem_bn"), cfg.stage_channels[0]);
        let mut stages = Vec::new();
        let mut cin = cfg.stage_channels[0];
        for (s, &cout) in cfg.stage_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..cfg.blocks_per_stage {
                let stride = if s > 0 && bi == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(
                    &format!("{prefix}.s{s}b{bi}"),
                    cin,
                    cout,
                    stride,
                    rng,
                ));
                cin = cout;
            }
            stages.push(blocks);
        }
        let mut cma = Vec::new();
        for &(s, bi) in &cfg.cma_insertion {
            let cx = cfg.stage_channels[s];
            let cy = sibling.stage_channels[s];
            cma.push(CmaBlockParams::new(
                &format!("{prefix}.cma_s{s}b{bi}"),
                cx,
                cy,
                rng,
            )?);
        }
        let head = LinearLayer::new(
            &format!("{prefix}.head"),
            *cfg.stage_channels.last().unwrap(),
            cfg.num_classes,
            rng,
        );
        Ok(Branch {
            config: cfg.clone(),
            stem,
            stem_bn,
            stages,
            cma,
            head,
            frozen: false,
        })
    }

    fn cma_index(&self, stage: usize, block: usize) -> Option<usize> {
        self.config
            .cma_insertion
            .iter()
            .position(|&(s, b)| s == stage && b == block)
    }

    pub fn cma_block(&self, stage: usize, block: usize) -> Option<&CmaBlockParams> {
        self.cma_index(stage, block).map(|i| &self.cma[i])
    }

    fn stem_forward(
        &mut self,
        g: &mut Graph,
        b: &mut Bindings,
        x: NodeId,
        mode: Mode,
        trainable: bool,
    ) -> Result<NodeId> {
        let h = self.stem.forward(g, b, x, 1, 1, trainable)?;
        let h = self.stem_bn.forward(g, h, mode, trainable, b)?;
        Ok(g.relu(h))
    }

    #[allow(clippy::too_many_arguments)]
    fn head_forward<R: Rng>(
        &self,
        g: &mut Graph,
        b: &mut Bindings,
        x: NodeId,
        mode: Mode,
        trainable: bool,
        dropout: f64,
        rng: &mut R,
    ) -> Result<NodeId> {
        let pooled = g.global_avg_pool(x)?;
        let dropped = g.dropout(pooled, dropout, mode == Mode::Train, rng)?;
        self.head.forward(g, b, dropped, trainable)
    }

    /// Single-branch forward with every attention block skipped; the fresh
    /// model's interleaved forward must match this exactly.
    pub fn forward_standalone<R: Rng>(
        &mut self,
        g: &mut Graph,
        b: &mut Bindings,
        x: NodeId,
        mode: Mode,
        dropout: f64,
        rng: &mut R,
    ) -> Result<NodeId> {
        let trainable = !self.frozen;
        let mode = if self.frozen { Mode::Eval } else { mode };
        let mut h = self.stem_forward(g, b, x, mode, trainable)?;
        for s in 0..self.stages.len() {
            for bi in 0..self.stages[s].len() {
                h = self.stages[s][bi].forward(g, b, h, mode, trainable)?;
            }
        }
        self.head_forward(g, b, h, mode, trainable, dropout, rng)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.stem.weight];
        p.extend(self.stem_bn.params());
        for stage in &self.stages {
            for block in stage {
                p.extend(block.params());
            }
        }
        for c in &self.cma {
            p.extend(c.params());
        }
        p.push(&self.head.weight);
        p.push(&self.head.bias);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.stem.weight];
        p.extend(self.stem_bn.params_mut());
        for stage in &mut self.stages {
            for block in stage {
                p.extend(block.params_mut());
            }
        }
        for c in &mut self.cma {
            p.extend(c.params_mut());
        }
        p.push(&mut self.head.weight);
        p.push(&mut self.head.bias);
        p
    }

    fn bn_layers(&self) -> Vec<&BnLayer> {
        let mut l = vec![&self.stem_bn];
        for stage in &self.stages {
            for block in stage {
                l.extend(block.bn_layers());
            }
        }
        for c in &self.cma {
            l.push(&c.out_norm);
        }
        l
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BnLayer> {
        let mut l = vec![&mut self.stem_bn];
        for stage in &mut self.stages {
            for block in stage {
                l.extend(block.bn_layers_mut());
            }
        }
        for c in &mut self.cma {
            l.push(&mut c.out_norm);
        }
        l
    }

    pub fn stem_weight(&self) -> &Param {
        &self.stem.weight
    }

    pub fn stem_weight_mut(&mut self) -> &mut Param {
        &mut self.stem.weight
    }

    pub fn cma_blocks_mut(&mut self) -> &mut [CmaBlockParams] {
        &mut self.cma
    }
}

pub struct TwoBranchModel {
    pub rgb: Branch,
    pub flow: Branch,
    pub dropout: f64,
}

/// Names of the attention blocks available for map extraction, e.g.
/// `rgb_s1b0`.
pub fn cma_block_names(model: &TwoBranchModel) -> Vec<String> {
    let mut names = Vec::new();
    for (prefix, branch) in [("rgb", &model.rgb), ("flow", &model.flow)] {
        for &(s, b) in &branch.config.cma_insertion {
            names.push(format!("{prefix}_s{s}b{b}"));
        }
    }
    names
}

pub fn build_model(
    cfg_rgb: &BranchConfig,
    cfg_flow: &BranchConfig,
    dropout: f64,
    seed: u64,
) -> Result<TwoBranchModel> {
    cfg_rgb.validate("rgb")?;
    cfg_flow.validate("flow")?;
    if cfg_rgb.num_classes != cfg_flow.num_classes {
        return Err(CmaError::Config(format!(
            "class count mismatch: {} vs {}",
            cfg_rgb.num_classes, cfg_flow.num_classes
        )));
    }
    if cfg_flow.input_channels != FLOW_CHANNELS {
        return Err(CmaError::Config(format!(
            "flow branch expects {} input channels, got {}",
            FLOW_CHANNELS, cfg_flow.input_channels
        )));
    }
    if cfg_rgb.cma_insertion != cfg_flow.cma_insertion {
        return Err(CmaError::Config(
            "attention insertion points must match across branches".into(),
        ));
    }
    // the two branches must reach every shared insertion point with the
    // same spatial geometry, i.e. identical stage/block layout
    if cfg_rgb.stage_channels.len() != cfg_flow.stage_channels.len()
        || cfg_rgb.blocks_per_stage != cfg_flow.blocks_per_stage
    {
        return Err(CmaError::Config(
            "stage geometry mismatch between branches".into(),
        ));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(CmaError::Config(format!("dropout {} outside [0, 1)", dropout)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = Branch::new("rgb", cfg_rgb, cfg_flow, &mut rng)?;
    let flow = Branch::new("flow", cfg_flow, cfg_rgb, &mut rng)?;
    Ok(TwoBranchModel { rgb, flow, dropout })
}

impl TwoBranchModel {
    /// Forward one batch of snippets through both branches, stage-interleaved:
    /// at each insertion point the sibling's pre-attention feature at the same
    /// (stage, block) feeds the keys/values. Returns (rgb, flow) logits
    /// `[N, C]`. `tap` optionally captures the (query, key/value) feature
    /// tensors at a named block.
    pub fn forward_snippet<R: Rng>(
        &mut self,
        g: &mut Graph,
        b: &mut Bindings,
        rgb: &Tensor,
        flow: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(NodeId, NodeId)> {
        self.forward_snippet_tapped(g, b, rgb, flow, mode, rng, None, &mut None)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_snippet_tapped<R: Rng>(
        &mut self,
        g: &mut Graph,
        b: &mut Bindings,
        rgb: &Tensor,
        flow: &Tensor,
        mode: Mode,
        rng: &mut R,
        tap: Option<&str>,
        tap_out: &mut Option<(Tensor, Tensor)>,
    ) -> Result<(NodeId, NodeId)> {
        let rs = rgb.shape();
        let fs = flow.shape();
        if rs.len() != 4 || fs.len() != 4 {
            return Err(CmaError::Shape(format!(
                "expected NHWC snippet batches, got {:?} / {:?}",
                rs, fs
            )));
        }
        if rs[0] != fs[0] || rs[1] != fs[1] || rs[2] != fs[2] {
            return Err(CmaError::dim(
                "snippet batch extents",
                rs,
                fs,
            ));
        }
        let rgb_mode = if self.rgb.frozen { Mode::Eval } else { mode };
        let flow_mode = if self.flow.frozen { Mode::Eval } else { mode };
        let rgb_train = !self.rgb.frozen;
        let flow_train = !self.flow.frozen;

        let xr0 = g.leaf(rgb.clone(), false);
        let xf0 = g.leaf(flow.clone(), false);
        let mut xr = self.rgb.stem_forward(g, b, xr0, rgb_mode, rgb_train)?;
        let mut xf = self.flow.stem_forward(g, b, xf0, flow_mode, flow_train)?;

        let n_stages = self.rgb.stages.len();
        let n_blocks = self.rgb.config.blocks_per_stage;
        for s in 0..n_stages {
            for bi in 0..n_blocks {
                let pr = self.rgb.stages[s][bi].forward(g, b, xr, rgb_mode, rgb_train)?;
                let pf = self.flow.stages[s][bi].forward(g, b, xf, flow_mode, flow_train)?;
                if let Some(ci) = self.rgb.cma_index(s, bi) {
                    if let Some(name) = tap {
                        if name == format!("rgb_s{s}b{bi}") {
                            *tap_out = Some((g.value(pr).clone(), g.value(pf).clone()));
                        } else if name == format!("flow_s{s}b{bi}") {
                            *tap_out = Some((g.value(pf).clone(), g.value(pr).clone()));
                        }
                    }
                    xr = cma_block_forward_captured(
                        g,
                        pr,
                        pf,
                        &mut self.rgb.cma[ci],
                        rgb_mode,
                        rgb_train,
                        b,
                        None,
                    )?;
                    let cf = self
                        .flow
                        .cma_index(s, bi)
                        .expect("insertion lists validated to match");
                    xf = cma_block_forward_captured(
                        g,
                        pf,
                        pr,
                        &mut self.flow.cma[cf],
                        flow_mode,
                        flow_train,
                        b,
                        None,
                    )?;
                } else {
                    xr = pr;
                    xf = pf;
                }
            }
        }
        let lr = self
            .rgb
            .head_forward(g, b, xr, rgb_mode, rgb_train, self.dropout, rng)?;
        let lf = self
            .flow
            .head_forward(g, b, xf, flow_mode, flow_train, self.dropout, rng)?;
        Ok((lr, lf))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.rgb.params();
        p.extend(self.flow.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.rgb.params_mut();
        p.extend(self.flow.params_mut());
        p
    }

    /// All persistent state (parameters + normalization running statistics)
    /// as (name, shape, values), in a fixed order.
    pub fn entries(&self) -> Vec<WeightEntry> {
        let mut out = Vec::new();
        for p in self.params() {
            out.push((p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
        }
        for branch in [&self.rgb, &self.flow] {
            for bn in branch.bn_layers() {
                let prefix = bn.gamma.name.trim_end_matches(".gamma");
                out.push((
                    format!("{prefix}.running_mean"),
                    vec![bn.running_mean.len()],
                    bn.running_mean.clone(),
                ));
                out.push((
                    format!("{prefix}.running_var"),
                    vec![bn.running_var.len()],
                    bn.running_var.clone(),
                ));
            }
        }
        out
    }

    /// Overwrite state from named entries; every entry must exist with a
    /// matching shape and every slot must be covered.
    pub fn load_entries(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let mut map: HashMap<&str, (&[usize], &[f64])> = HashMap::new();
        for (name, shape, data) in entries {
            if map.insert(name.as_str(), (shape, data)).is_some() {
                return Err(CmaError::Format {
                    offset: 0,
                    message: format!("duplicate entry {name}"),
                });
            }
        }
        let mut used = 0usize;
        for p in self.params_mut() {
            let (shape, data) = map.get(p.name.as_str()).ok_or_else(|| CmaError::Format {
                offset: 0,
                message: format!("missing entry {}", p.name),
            })?;
            if *shape != p.value.shape() {
                return Err(CmaError::Format {
                    offset: 0,
                    message: format!(
                        "shape mismatch for {}: {:?} vs {:?}",
                        p.name,
                        shape,
                        p.value.shape()
                    ),
                });
            }
            p.value.data_mut().copy_from_slice(data);
            used += 1;
        }
        for branch in [&mut self.rgb, &mut self.flow] {
            for bn in branch.bn_layers_mut() {
                let prefix = bn.gamma.name.trim_end_matches(".gamma").to_string();
                for (suffix, buf) in [
                    ("running_mean", &mut bn.running_mean),
                    ("running_var", &mut bn.running_var),
                ] {
                    let key = format!("{prefix}.{suffix}");
                    let (shape, data) = map.get(key.as_str()).ok_or_else(|| CmaError::Format {
                        offset: 0,
                        message: format!("missing entry {key}"),
                    })?;
                    if shape.len() != 1 || shape[0] != buf.len() {
                        return Err(CmaError::Format {
                            offset: 0,
                            message: format!("shape mismatch for {key}"),
                        });
                    }
                    buf.copy_from_slice(data);
                    used += 1;
                }
            }
        }
        if used != entries.len() {
            return Err(CmaError::Format {
                offset: 0,
                message: format!("{} unused entries in checkpoint", entries.len() - used),
            });
        }
        Ok(())
    }

    /// Copy every name-matched entry into this model, leaving unmatched
    /// slots (e.g. attention blocks absent from a plain two-stream source)
    /// untouched. Returns the number of slots filled.
    pub fn adopt_matching(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<usize> {
        let mut map: HashMap<&str, (&[usize], &[f64])> = HashMap::new();
        for (name, shape, data) in entries {
            map.insert(name.as_str(), (shape, data));
        }
        let mut filled = 0usize;
        for p in self.params_mut() {
            if let Some((shape, data)) = map.get(p.name.as_str()) {
                if *shape != p.value.shape() {
                    return Err(CmaError::Shape(format!(
                        "adopting {}: shape {:?} vs {:?}",
                        p.name,
                        shape,
                        p.value.shape()
                    )));
                }
                p.value.data_mut().copy_from_slice(data);
                filled += 1;
            }
        }
        for branch in [&mut self.rgb, &mut self.flow] {
            for bn in branch.bn_layers_mut() {
                let prefix = bn.gamma.name.trim_end_matches(".gamma").to_string();
                for (suffix, buf) in [
                    ("running_mean", &mut bn.running_mean),
                    ("running_var", &mut bn.running_var),
                ] {
                    if let Some((shape, data)) = map.get(format!("{prefix}.{suffix}").as_str()) {
                        if shape.len() != 1 || shape[0] != buf.len() {
                            return Err(CmaError::Shape(format!(
                                "adopting {prefix}.{suffix}: length mismatch"
                            )));
                        }
                        buf.copy_from_slice(data);
                        filled += 1;
                    }
                }
            }
        }
        Ok(filled)
    }
}

// ---------------------------------------------------------------------------
// score-level helpers

/// Arithmetic mean of per-segment score vectors (the consensus over K
/// snippets).
pub fn tsn_consensus(scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(CmaError::Empty("consensus over zero segments".into()));
    }
    let c = scores[0].len();
    let mut out = vec![0.0; c];
    for s in scores {
        if s.len() != c {
            return Err(CmaError::dim("consensus score lengths", &[c], &[s.len()]));
        }
        for (o, &v) in out.iter_mut().zip(s) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= scores.len() as f64;
    }
    Ok(out)
}

/// Overflow-safe `-(G_label - log sum_j exp G_j)`.
pub fn video_loss(scores: &[f64], label: usize) -> Result<f64> {
    if label >= scores.len() {
        return Err(CmaError::Index(format!(
            "label {} out of range for {} classes",
            label,
            scores.len()
        )));
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|&s| (s - m).exp()).sum::<f64>().ln();
    Ok(lse - scores[label])
}

/// Weighted score fusion `w_rgb * s_rgb + w_flow * s_flow`.
pub fn fuse_scores(s_rgb: &[f64], s_flow: &[f64], w_rgb: f64, w_flow: f64) -> Result<Vec<f64>> {
    if s_rgb.len() != s_flow.len() {
        return Err(CmaError::dim(
            "fusion score lengths",
            &[s_rgb.len()],
            &[s_flow.len()],
        ));
    }
    if w_rgb < 0.0 || w_flow < 0.0 || (w_rgb == 0.0 && w_flow == 0.0) {
        return Err(CmaError::Param(format!(
            "fusion weights must be non-negative and not both zero, got ({w_rgb}, {w_flow})"
        )));
    }
    Ok(s_rgb
        .iter()
        .zip(s_flow)
        .map(|(&r, &f)| w_rgb * r + w_flow * f)
        .collect())
}

pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// checkpoint format: magic "CMAW", u32 version, u32 entry count, manifest of
// (name, shape, payload offset), then little-endian f64 payloads

const CKPT_MAGIC: &[u8; 4] = b"CMAW";
const CKPT_VERSION: u32 = 1;

pub fn model_to_bytes(model: &TwoBranchModel) -> Vec<u8> {
    let entries = model.entries();
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, data) in &entries {
        manifest.extend_from_slice(&(name.len() as u32).to_le_bytes());
        manifest.extend_from_slice(name.as_bytes());
        manifest.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            manifest.extend_from_slice(&(d as u32).to_le_bytes());
        }
        manifest.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for &v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(12 + manifest.len() + payload.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    out
}

fn ckpt_err(offset: usize, message: impl Into<String>) -> CmaError {
    CmaError::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn entries_from_bytes(bytes: &[u8]) -> Result<Vec<WeightEntry>> {
    let need = |off: usize, n: usize| -> Result<()> {
        if off + n > bytes.len() {
            Err(ckpt_err(off, "truncated checkpoint"))
        } else {
            Ok(())
        }
    };
    need(0, 12)?;
    if &bytes[0..4] != CKPT_MAGIC {
        return Err(ckpt_err(0, format!("bad magic, expected {:?}", CKPT_MAGIC)));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(ckpt_err(4, format!("unsupported version {version}")));
    }
    let n_entries = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut off = 12;
    let mut manifest = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        need(off, 4)?;
        let name_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        need(off, name_len)?;
        let name = std::str::from_utf8(&bytes[off..off + name_len])
            .map_err(|_| ckpt_err(off, "entry name is not UTF-8"))?
            .to_string();
        off += name_len;
        need(off, 4)?;
        let ndim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        need(off, ndim * 4 + 8)?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let payload_off = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        manifest.push((name, shape, payload_off));
    }
    let payload = &bytes[off..];
    let mut out = Vec::with_capacity(n_entries);
    for (name, shape, payload_off) in manifest {
        let numel: usize = shape.iter().product();
        if payload_off + numel * 8 > payload.len() {
            return Err(ckpt_err(
                off + payload_off,
                format!("payload for {name} runs past end of file"),
            ));
        }
        let mut data = Vec::with_capacity(numel);
        for c in payload[payload_off..payload_off + numel * 8].chunks_exact(8) {
            data.push(f64::from_le_bytes(c.try_into().unwrap()));
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

pub fn save_checkpoint(model: &TwoBranchModel, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&model_to_bytes(model))?;
    Ok(())
}

/// Load a checkpoint into a model built with the same configuration.
pub fn load_checkpoint(model: &mut TwoBranchModel, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let entries = entries_from_bytes(&bytes)?;
    model.load_entries(&entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfgs() -> (BranchConfig, BranchConfig) {
        let rgb = BranchConfig {
            input_channels: 3,
            stage_channels: vec![4, 8],
            blocks_per_stage: 1,
            cma_insertion: vec![(1, 0)],
            num_classes: 8,
        };
        let flow = BranchConfig {
            input_channels: FLOW_CHANNELS,
            ..rgb.clone()
        };
        (rgb, flow)
    }

    fn rand_input(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_configs_have_expected_input_channels() {
        let m = build_model(&BranchConfig::rgb_default(), &BranchConfig::flow_default(), 0.7, 0).unwrap();
        assert_eq!(m.rgb.stem_weight().value.shape(), &[3, 3, 3, 16]);
        assert_eq!(m.flow.stem_weight().value.shape(), &[3, 3, 10, 16]);
    }

    #[test]
    fn same_seed_builds_bitwise_identical_models() {
        let (r, f) = tiny_cfgs();
        let a = build_model(&r, &f, 0.5, 9).unwrap();
        let b = build_model(&r, &f, 0.5, 9).unwrap();
        assert_eq!(model_to_bytes(&a), model_to_bytes(&b));
        let c = build_model(&r, &f, 0.5, 10).unwrap();
        assert_ne!(model_to_bytes(&a), model_to_bytes(&c));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (r, f) = tiny_cfgs();
        let mut bad = r.clone();
        bad.cma_insertion = vec![(5, 0)];
        assert!(build_model(&bad, &f, 0.5, 0).is_err());
        let mut bad = f.clone();
        bad.input_channels = 6;
        assert!(build_model(&r, &bad, 0.5, 0).is_err());
        let mut bad = f.clone();
        bad.num_classes = 4;
        assert!(build_model(&r, &bad, 0.5, 0).is_err());
        let mut bad = f.clone();
        bad.cma_insertion = vec![];
        assert!(build_model(&r, &bad, 0.5, 0).is_err());
        assert!(build_model(&r, &f, 1.0, 0).is_err());
    }

    #[test]
    fn zero_insertion_is_plain_two_stream() {
        let (mut r, mut f) = tiny_cfgs();
        r.cma_insertion.clear();
        f.cma_insertion.clear();
        let m = build_model(&r, &f, 0.5, 3).unwrap();
        assert!(cma_block_names(&m).is_empty());
        assert!(m.rgb.cma_block(1, 0).is_none());
    }

    #[test]
    fn fresh_model_matches_isolated_branches() {
        // attention blocks start as identities, so the interleaved forward
        // must equal each branch run alone, exactly
        let (r, f) = tiny_cfgs();
        let mut m = build_model(&r, &f, 0.5, 4).unwrap();
        let rgb = rand_input(vec![2, 8, 8, 3], 1);
        let flow = rand_input(vec![2, 8, 8, 10], 2);

        let mut g = Graph::new();
        let mut b = Bindings::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (lr, lf) = m
            .forward_snippet(&mut g, &mut b, &rgb, &flow, Mode::Eval, &mut rng)
            .unwrap();
        let joint_r = g.value(lr).data().to_vec();
        let joint_f = g.value(lf).data().to_vec();

        let mut g2 = Graph::new();
        let mut b2 = Bindings::new();
        let xr = g2.leaf(rgb.clone(), false);
        let solo_r = m
            .rgb
            .forward_standalone(&mut g2, &mut b2, xr, Mode::Eval, 0.5, &mut rng)
            .unwrap();
        assert_eq!(g2.value(solo_r).data(), &joint_r[..]);

        let mut g3 = Graph::new();
        let mut b3 = Bindings::new();
        let xf = g3.leaf(flow.clone(), false);
        let solo_f = m
            .flow
            .forward_standalone(&mut g3, &mut b3, xf, Mode::Eval, 0.5, &mut rng)
            .unwrap();
        assert_eq!(g3.value(solo_f).data(), &joint_f[..]);
    }

    #[test]
    fn eval_forward_is_pure() {
        let (r, f) = tiny_cfgs();
        let mut m = build_model(&r, &f, 0.5, 4).unwrap();
        let rgb = rand_input(vec![2, 8, 8, 3], 1);
        let flow = rand_input(vec![2, 8, 8, 10], 2);
        let mut out = Vec::new();
        for _ in 0..2 {
            let mut g = Graph::new();
            let mut b = Bindings::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let (lr, lf) = m
                .forward_snippet(&mut g, &mut b, &rgb, &flow, Mode::Eval, &mut rng)
                .unwrap();
            out.push((g.value(lr).data().to_vec(), g.value(lf).data().to_vec()));
        }
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn zeroed_classifier_gives_zero_scores() {
        let (r, f) = tiny_cfgs();
        let mut m = build_model(&r, &f, 0.5, 4).unwrap();
        for p in m.params_mut() {
            if p.name.contains("head") {
                for v in p.value.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let rgb = rand_input(vec![1, 8, 8, 3], 3);
        let flow = rand_input(vec![1, 8, 8, 10], 4);
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (lr, lf) = m
            .forward_snippet(&mut g, &mut b, &rgb, &flow, Mode::Eval, &mut rng)
            .unwrap();
        assert!(g.value(lr).data().iter().all(|&v| v == 0.0));
        assert!(g.value(lf).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_mismatch_is_a_dimension_error() {
        let (r, f) = tiny_cfgs();
        let mut m = build_model(&r, &f, 0.5, 4).unwrap();
        let rgb = rand_input(vec![1, 8, 8, 3], 3);
        let flow = rand_input(vec![1, 4, 4, 10], 4);
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            m.forward_snippet(&mut g, &mut b, &rgb, &flow, Mode::Eval, &mut rng),
            Err(CmaError::Dim { .. })
        ));
    }

    #[test]
    fn tap_captures_features_at_named_block() {
        let (r, f) = tiny_cfgs();
        let mut m = build_model(&r, &f, 0.5, 4).unwrap();
        let rgb = rand_input(vec![1, 8, 8, 3], 3);
        let flow = rand_input(vec![1, 8, 8, 10], 4);
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tap = None;
        m.forward_snippet_tapped(
            &mut g, &mut b, &rgb, &flow, Mode::Eval, &mut rng,
            Some("rgb_s1b0"), &mut tap,
        )
        .unwrap();
        let (q, kv) = tap.expect("tap should capture");
        assert_eq!(q.shape(), &[1, 4, 4, 8]);
        assert_eq!(kv.shape(), &[1, 4, 4, 8]);
    }

    #[test]
    fn consensus_is_mean_and_commutes_with_affine() {
        assert_eq!(
            tsn_consensus(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
            vec![3.0, 4.0]
        );
        assert_eq!(tsn_consensus(&[vec![7.0, -1.0]]).unwrap(), vec![7.0, -1.0]);
        assert!(tsn_consensus(&[]).is_err());
        let gs: Vec<Vec<f64>> = vec![vec![0.5, -2.0, 3.0], vec![1.5, 0.0, -1.0]];
        let shifted: Vec<Vec<f64>> = gs
            .iter()
            .map(|g| g.iter().map(|v| 2.0 * v + 0.7).collect())
            .collect();
        let base = tsn_consensus(&gs).unwrap();
        let got = tsn_consensus(&shifted).unwrap();
        for (b, g) in base.iter().zip(&got) {
            assert!((2.0 * b + 0.7 - g).abs() < 1e-12);
        }
    }

    #[test]
    fn video_loss_reference_values() {
        let uniform = vec![0.0; 8];
        assert!((video_loss(&uniform, 3).unwrap() - (8.0f64).ln()).abs() < 1e-12);
        let mut sat = vec![0.0; 8];
        sat[2] = 30.0;
        assert!(video_loss(&sat, 2).unwrap() <= 1e-9);
        assert!(video_loss(&uniform, 8).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + g.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        assert!((video_loss(&g, 5).unwrap() - (lse - g[5])).abs() < 1e-12);
    }

    #[test]
    fn fuse_scores_contract() {
        let r = vec![1.0, 2.0];
        let f = vec![3.0, -1.0];
        assert_eq!(fuse_scores(&r, &f, 1.0, 0.0).unwrap(), r);
        assert_eq!(fuse_scores(&r, &f, 0.0, 1.0).unwrap(), f);
        let five_one = fuse_scores(&r, &f, 5.0, 1.0).unwrap();
        assert_eq!(five_one, vec![8.0, 9.0]);
        // argmax invariant under positive rescale of both weights
        let scaled = fuse_scores(&r, &f, 15.0, 3.0).unwrap();
        assert_eq!(argmax(&five_one), argmax(&scaled));
        assert!(fuse_scores(&r, &f, 0.0, 0.0).is_err());
        assert!(fuse_scores(&r, &f, -1.0, 2.0).is_err());
        assert!(fuse_scores(&r, &[1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (r, f) = tiny_cfgs();
        let mut src = build_model(&r, &f, 0.5, 21).unwrap();
        // perturb running stats so buffers are exercised too
        for bn in src.rgb.bn_layers_mut() {
            for v in bn.running_mean.iter_mut() {
                *v += 0.25;
            }
        }
        let bytes = model_to_bytes(&src);
        let mut dst = build_model(&r, &f, 0.5, 99).unwrap();
        dst.load_entries(&entries_from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(model_to_bytes(&dst), bytes);
    }

    #[test]
    fn checkpoint_round_trip_via_disk() {
        let (r, f) = tiny_cfgs();
        let src = build_model(&r, &f, 0.5, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cmaw");
        save_checkpoint(&src, &path).unwrap();
        let mut dst = build_model(&r, &f, 0.5, 77).unwrap();
        load_checkpoint(&mut dst, &path).unwrap();
        assert_eq!(model_to_bytes(&dst), model_to_bytes(&src));
    }

    #[test]
    fn checkpoint_errors_name_offsets() {
        let (r, f) = tiny_cfgs();
        let src = build_model(&r, &f, 0.5, 2).unwrap();
        let mut bytes = model_to_bytes(&src);
        assert!(matches!(
            entries_from_bytes(&bytes[..20]),
            Err(CmaError::Format { .. })
        ));
        bytes[0] = b'Z';
        assert!(matches!(
            entries_from_bytes(&bytes),
            Err(CmaError::Format { offset: 0, .. })
        ));
        // wrong-config load fails
        let mut other_cfg = r.clone();
        other_cfg.stage_channels = vec![4, 16];
        let mut other = build_model(
            &other_cfg,
            &BranchConfig { input_channels: FLOW_CHANNELS, ..other_cfg.clone() },
            0.5,
            0,
        )
        .unwrap();
        let good = model_to_bytes(&src);
        assert!(other.load_entries(&entries_from_bytes(&good).unwrap()).is_err());
    }

    #[test]
    fn cma_block_names_follow_insertions() {
        let m = build_model(&BranchConfig::rgb_default(), &BranchConfig::flow_default(), 0.7, 0).unwrap();
        assert_eq!(
            cma_block_names(&m),
            vec!["rgb_s1b0", "rgb_s2b0", "flow_s1b0", "flow_s2b0"]
        );
    }
}
