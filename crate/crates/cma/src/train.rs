//! Optimization and the iterative freeze-train protocol.
//!
//! The flow branch is trained standalone first on a plain two-stream model;
//! that model is the iteration-0 late-fusion baseline. The attention model
//! adopts its branch weights and then alternates: odd iterations train the
//! RGB branch with the flow branch frozen, even iterations the reverse.
//! The learning rate resets to its initial value at each iteration start
//! and drops by a fixed factor when validation accuracy plateaus.

use crate::attention::CmaBlockParams;
use crate::data::{
    augment, transform_snippet, tsn_sample_snippets, AugmentConfig, Dataset, SampleMode, Snippet,
    FLOW_CHANNELS,
};
use crate::graph::Graph;
use crate::model::{
    argmax, fuse_scores, BranchConfig, TwoBranchModel, build_model, model_to_bytes,
};
use crate::param::{Bindings, Mode, Param};
use crate::tensor::Tensor;
use crate::{CmaError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Videos per optimization step.
    pub batch_size: usize,
    /// Segments per video during training (K).
    pub segments_train: usize,
    pub segments_test: usize,
    pub epochs_per_iteration: usize,
    /// Epochs for the standalone branch training that builds the
    /// iteration-0 baseline.
    pub pretrain_epochs: usize,
    pub lr_drop_factor: f64,
    pub plateau_patience: usize,
    pub iteration_count: usize,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            dropout: 0.7,
            batch_size: 8,
            segments_train: 3,
            segments_test: 3,
            epochs_per_iteration: 10,
            pretrain_epochs: 10,
            lr_drop_factor: 10.0,
            plateau_patience: 3,
            iteration_count: 2,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(CmaError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CmaError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.segments_train == 0 || self.segments_test == 0 {
            return Err(CmaError::Config("segment counts must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CmaError::Config("batch_size must be >= 1".into()));
        }
        if self.lr_drop_factor <= 1.0 {
            return Err(CmaError::Config(format!(
                "lr_drop_factor must exceed 1, got {}",
                self.lr_drop_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(CmaError::Config(format!(
                "flip_prob {} outside [0, 1]",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

/// Fusion weights by iteration parity: 1:1 for the iteration-0 baseline,
/// 5:1 favoring RGB after odd (RGB-trained) iterations, 1:5 after even.
pub fn fusion_weights(iteration: usize) -> (f64, f64) {
    if iteration == 0 {
        (1.0, 1.0)
    } else if iteration % 2 == 1 {
        (5.0, 1.0)
    } else {
        (1.0, 5.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchSel {
    Rgb,
    Flow,
}

impl std::fmt::Display for BranchSel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BranchSel::Rgb => write!(f, "rgb"),
            BranchSel::Flow => write!(f, "flow"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalResult {
    pub rgb_top1: f64,
    pub flow_top1: f64,
    pub fused_top1: f64,
}

#[derive(Debug, Clone)]
pub struct IterationReport {
    pub iteration: usize,
    pub trained: Option<BranchSel>,
    pub rgb_top1: f64,
    pub flow_top1: f64,
    pub fused_top1: f64,
    pub w_rgb: f64,
    pub w_flow: f64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Trained-branch validation top-1 per epoch.
    pub val_curve: Vec<f64>,
}

// ---------------------------------------------------------------------------
// initialization

/// Flow stem from an RGB stem: every flow input-channel slice is the mean
/// over the three RGB input-channel slices.
pub fn init_flow_stem(rgb_stem: &Tensor, flow_channels: usize) -> Result<Tensor> {
    let s = rgb_stem.shape();
    if s.len() != 4 || s[2] != 3 {
        return Err(CmaError::Shape(format!(
            "expected [kh,kw,3,cout] RGB stem, got {:?}",
            s
        )));
    }
    let (kh, kw, cout) = (s[0], s[1], s[3]);
    let src = rgb_stem.data();
    let mut out = vec![0.0; kh * kw * flow_channels * cout];
    for k in 0..kh * kw {
        for o in 0..cout {
            let mean = (0..3).map(|c| src[(k * 3 + c) * cout + o]).sum::<f64>() / 3.0;
            for c in 0..flow_channels {
                out[(k * flow_channels + c) * cout + o] = mean;
            }
        }
    }
    Tensor::new(vec![kh, kw, flow_channels, cout], out)
}

/// Re-draw a block's conv weights from N(0, 2/fan_in) and zero its output
/// normalization scale and shift, restoring the identity-at-init state.
pub fn init_cma_block(params: &mut CmaBlockParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in [&mut params.w_q, &mut params.w_k, &mut params.w_v, &mut params.w_out] {
        let fan_in = w.value.shape()[2];
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        for v in w.value.data_mut() {
            *v = normal.sample(&mut rng);
        }
        for m in w.momentum.iter_mut() {
            *m = 0.0;
        }
    }
    for v in params.out_norm.gamma.value.data_mut() {
        *v = 0.0;
    }
    for v in params.out_norm.beta.value.data_mut() {
        *v = 0.0;
    }
}

// ---------------------------------------------------------------------------
// SGD

/// `v <- momentum*v + g + weight_decay*p; p <- p - lr*v`, with weight decay
/// skipped for parameters flagged decay-exempt (BN scale/shift, biases).
pub fn sgd_step(p: &mut Param, grad: &[f64], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if grad.len() != p.value.numel() {
        return Err(CmaError::dim(
            format!("gradient for {}", p.name),
            &[grad.len()],
            &[p.value.numel()],
        ));
    }
    let wd = if p.decay { weight_decay } else { 0.0 };
    let data = p.value.data_mut();
    for i in 0..grad.len() {
        p.momentum[i] = momentum * p.momentum[i] + grad[i] + wd * data[i];
        data[i] -= lr * p.momentum[i];
    }
    Ok(())
}

fn apply_grads(
    model: &mut TwoBranchModel,
    branch: BranchSel,
    g: &Graph,
    b: &Bindings,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let params = match branch {
        BranchSel::Rgb => model.rgb.params_mut(),
        BranchSel::Flow => model.flow.params_mut(),
    };
    for p in params {
        let node = b.node(&p.name).ok_or_else(|| {
            CmaError::Param(format!("parameter {} not bound in this graph", p.name))
        })?;
        let grad = g
            .grad(node)
            .ok_or_else(|| CmaError::Param(format!("no gradient recorded for {}", p.name)))?
            .to_vec();
        sgd_step(p, &grad, lr, momentum, weight_decay)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// batching

/// Stack per-video snippets (K each) into NHWC batches; per-video labels.
fn assemble(snippets: &[Vec<Snippet>]) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let first = snippets
        .first()
        .and_then(|v| v.first())
        .ok_or_else(|| CmaError::Empty("no snippets to batch".into()))?;
    let (h, w) = (first.rgb.shape()[0], first.rgb.shape()[1]);
    let n: usize = snippets.iter().map(|v| v.len()).sum();
    let mut rgb = Vec::with_capacity(n * h * w * 3);
    let mut flow = Vec::with_capacity(n * h * w * FLOW_CHANNELS);
    let mut labels = Vec::with_capacity(snippets.len());
    for per_video in snippets {
        labels.push(per_video[0].label);
        for s in per_video {
            rgb.extend_from_slice(s.rgb.data());
            flow.extend_from_slice(s.flow_stack.data());
        }
    }
    Ok((
        Tensor::new(vec![n, h, w, 3], rgb)?,
        Tensor::new(vec![n, h, w, FLOW_CHANNELS], flow)?,
        labels,
    ))
}

// ---------------------------------------------------------------------------
// evaluation

/// One evaluated video: (rgb scores, flow scores, true label).
pub type VideoScores = (Vec<f64>, Vec<f64>, usize);

/// Per-video averaged (rgb, flow) score vectors in eval mode, using
/// center-of-segment snippets and optional horizontal-flip averaging.
pub fn branch_scores(
    model: &mut TwoBranchModel,
    ds: &Dataset,
    segments: usize,
    flip_averaging: bool,
) -> Result<Vec<VideoScores>> {
    if ds.videos.is_empty() {
        return Err(CmaError::Empty("evaluation dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
    let mut out = Vec::with_capacity(ds.videos.len());
    const CHUNK: usize = 16;
    for chunk in ds.videos.chunks(CHUNK) {
        let mut views: Vec<Vec<Snippet>> = Vec::new();
        for v in chunk {
            let mut snips = tsn_sample_snippets(v, segments, &mut rng, SampleMode::Test)?;
            if flip_averaging {
                let flipped: Vec<Snippet> = snips
                    .iter()
                    .map(|s| transform_snippet(s, 0, 0, s.rgb.shape()[0], true))
                    .collect();
                snips.extend(flipped);
            }
            views.push(snips);
        }
        let per_video = views[0].len();
        let (rgb, flow, labels) = assemble(&views)?;
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let (lr, lf) = model.forward_snippet(&mut g, &mut b, &rgb, &flow, Mode::Eval, &mut rng)?;
        let c = ds.n_classes;
        let sr = g.value(lr).data();
        let sf = g.value(lf).data();
        for (vi, &label) in labels.iter().enumerate() {
            let mut mr = vec![0.0; c];
            let mut mf = vec![0.0; c];
            for s in 0..per_video {
                let row = vi * per_video + s;
                for j in 0..c {
                    mr[j] += sr[row * c + j];
                    mf[j] += sf[row * c + j];
                }
            }
            for j in 0..c {
                mr[j] /= per_video as f64;
                mf[j] /= per_video as f64;
            }
            out.push((mr, mf, label));
        }
    }
    Ok(out)
}

pub fn evaluate(
    model: &mut TwoBranchModel,
    ds: &Dataset,
    segments: usize,
    flip_averaging: bool,
    w_rgb: f64,
    w_flow: f64,
) -> Result<EvalResult> {
    let scores = branch_scores(model, ds, segments, flip_averaging)?;
    accuracy_from_scores(&scores, w_rgb, w_flow)
}

fn accuracy_from_scores(
    scores: &[VideoScores],
    w_rgb: f64,
    w_flow: f64,
) -> Result<EvalResult> {
    let n = scores.len() as f64;
    let (mut cr, mut cf, mut cz) = (0usize, 0usize, 0usize);
    for (sr, sf, label) in scores {
        if argmax(sr) == *label {
            cr += 1;
        }
        if argmax(sf) == *label {
            cf += 1;
        }
        let fused = fuse_scores(sr, sf, w_rgb, w_flow)?;
        if argmax(&fused) == *label {
            cz += 1;
        }
    }
    Ok(EvalResult {
        rgb_top1: cr as f64 / n,
        flow_top1: cf as f64 / n,
        fused_top1: cz as f64 / n,
    })
}

/// Fused accuracy at each grid point w_rgb = i/grid (w_flow = 1 - w_rgb);
/// returns the curve and the argmax weight. Scores are computed once —
/// fusion is linear, so snippet averaging commutes with weighting.
pub fn fusion_weight_sweep(
    model: &mut TwoBranchModel,
    ds: &Dataset,
    segments: usize,
    grid: usize,
) -> Result<(Vec<(f64, f64)>, f64)> {
    if grid == 0 {
        return Err(CmaError::Param("sweep grid must be >= 1".into()));
    }
    let scores = branch_scores(model, ds, segments, false)?;
    let mut curve = Vec::with_capacity(grid + 1);
    for i in 0..=grid {
        let w = i as f64 / grid as f64;
        // endpoints must equal single-branch accuracies exactly
        let acc = if w == 0.0 {
            accuracy_from_scores(&scores, 0.0, 1.0)?.flow_top1
        } else if w == 1.0 {
            accuracy_from_scores(&scores, 1.0, 0.0)?.rgb_top1
        } else {
            accuracy_from_scores(&scores, w, 1.0 - w)?.fused_top1
        };
        curve.push((w, acc));
    }
    // top-1 over a finite set plateaus, so exact ties between weights are
    // common; report the largest weight achieving the peak
    let best = curve
        .iter()
        .cloned()
        .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 >= a.1 { b } else { a });
    Ok((curve, best.0))
}

// ---------------------------------------------------------------------------
// training loops

#[allow(clippy::too_many_arguments)]
pub fn train_branch_iteration(
    model: &mut TwoBranchModel,
    branch: BranchSel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    iteration: usize,
    epochs: usize,
    seed: u64,
) -> Result<IterationReport> {
    cfg.validate()?;
    if train.videos.is_empty() {
        return Err(CmaError::Empty("training dataset is empty".into()));
    }
    model.rgb.frozen = branch != BranchSel::Rgb;
    model.flow.frozen = branch != BranchSel::Flow;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug = AugmentConfig {
        flip_prob: cfg.flip_prob,
        crop: train.height,
    };
    let mut lr = cfg.lr; // reset to initial at iteration start
    let mut best_val = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut loss_curve = Vec::with_capacity(epochs);
    let mut val_curve = Vec::with_capacity(epochs);
    let (w_rgb, w_flow) = fusion_weights(iteration);

    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.videos.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut snippets = Vec::with_capacity(chunk.len());
            for &vi in chunk {
                let raw = tsn_sample_snippets(
                    &train.videos[vi],
                    cfg.segments_train,
                    &mut rng,
                    SampleMode::Train,
                )?;
                let mut aug_snips = Vec::with_capacity(raw.len());
                for s in &raw {
                    aug_snips.push(augment(s, &mut rng, &aug)?);
                }
                snippets.push(aug_snips);
            }
            let (rgb, flow, labels) = assemble(&snippets)?;
            let mut g = Graph::new();
            let mut b = Bindings::new();
            let (lr_node, lf_node) =
                model.forward_snippet(&mut g, &mut b, &rgb, &flow, Mode::Train, &mut rng)?;
            let logits = match branch {
                BranchSel::Rgb => lr_node,
                BranchSel::Flow => lf_node,
            };
            let consensus = g.segment_mean(logits, cfg.segments_train)?;
            let loss = g.cross_entropy(consensus, &labels)?;
            loss_sum += g.value(loss).data()[0];
            batches += 1;
            g.backward(loss)?;
            apply_grads(model, branch, &g, &b, lr, cfg.momentum, cfg.weight_decay)?;
        }
        loss_curve.push(loss_sum / batches as f64);

        let val_res = evaluate(model, val, cfg.segments_test, false, w_rgb, w_flow)?;
        let tracked = match branch {
            BranchSel::Rgb => val_res.rgb_top1,
            BranchSel::Flow => val_res.flow_top1,
        };
        val_curve.push(tracked);
        if tracked > best_val {
            best_val = tracked;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                lr /= cfg.lr_drop_factor; // only ever decreases within an iteration
                stale = 0;
            }
        }
    }

    let final_res = evaluate(model, val, cfg.segments_test, false, w_rgb, w_flow)?;
    Ok(IterationReport {
        iteration,
        trained: Some(branch),
        rgb_top1: final_res.rgb_top1,
        flow_top1: final_res.flow_top1,
        fused_top1: final_res.fused_top1,
        w_rgb,
        w_flow,
        loss_curve,
        val_curve,
    })
}

pub struct TrainOutcome {
    pub model: TwoBranchModel,
    /// Plain two-stream model: the iteration-0 late-fusion baseline.
    pub baseline: TwoBranchModel,
    pub baseline_report: IterationReport,
    /// Reports for iterations 1..=iteration_count.
    pub reports: Vec<IterationReport>,
}

impl TrainOutcome {
    /// Report list as consumers see it: the alternating iterations, or just
    /// the baseline when no iterations were requested.
    pub fn report_list(&self) -> Vec<&IterationReport> {
        if self.reports.is_empty() {
            vec![&self.baseline_report]
        } else {
            self.reports.iter().collect()
        }
    }
}

/// Full protocol: standalone flow training first, then standalone RGB
/// (together forming the iteration-0 two-stream baseline), then the
/// alternating freeze-train iterations on the attention model, which adopts
/// the baseline's branch weights at the start.
pub fn iterative_train(
    cfg_rgb: &BranchConfig,
    cfg_flow: &BranchConfig,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut plain_rgb = cfg_rgb.clone();
    plain_rgb.cma_insertion.clear();
    let mut plain_flow = cfg_flow.clone();
    plain_flow.cma_insertion.clear();

    let mut baseline = build_model(&plain_rgb, &plain_flow, cfg.dropout, cfg.seed)?;
    let flow_stem = init_flow_stem(&baseline.rgb.stem_weight().value, cfg_flow.input_channels)?;
    baseline.flow.stem_weight_mut().value = flow_stem;

    train_branch_iteration(
        &mut baseline,
        BranchSel::Flow,
        train,
        val,
        cfg,
        0,
        cfg.pretrain_epochs,
        derive_seed(cfg.seed, 1),
    )?;
    train_branch_iteration(
        &mut baseline,
        BranchSel::Rgb,
        train,
        val,
        cfg,
        0,
        cfg.pretrain_epochs,
        derive_seed(cfg.seed, 2),
    )?;
    baseline.rgb.frozen = false;
    baseline.flow.frozen = false;
    let (w0r, w0f) = fusion_weights(0);
    let base_res = evaluate(&mut baseline, val, cfg.segments_test, false, w0r, w0f)?;
    let baseline_report = IterationReport {
        iteration: 0,
        trained: None,
        rgb_top1: base_res.rgb_top1,
        flow_top1: base_res.flow_top1,
        fused_top1: base_res.fused_top1,
        w_rgb: w0r,
        w_flow: w0f,
        loss_curve: Vec::new(),
        val_curve: Vec::new(),
    };

    let mut model = build_model(cfg_rgb, cfg_flow, cfg.dropout, cfg.seed)?;
    model.adopt_matching(&baseline.entries())?;

    let mut reports = Vec::with_capacity(cfg.iteration_count);
    for it in 1..=cfg.iteration_count {
        let branch = if it % 2 == 1 { BranchSel::Rgb } else { BranchSel::Flow };
        reports.push(train_branch_iteration(
            &mut model,
            branch,
            train,
            val,
            cfg,
            it,
            cfg.epochs_per_iteration,
            derive_seed(cfg.seed, 2 + it as u64),
        )?);
    }
    model.rgb.frozen = false;
    model.flow.frozen = false;
    Ok(TrainOutcome {
        model,
        baseline,
        baseline_report,
        reports,
    })
}

fn derive_seed(seed: u64, phase: u64) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(phase)
}

/// Byte image of one branch's persistent state, for freeze-contract checks.
pub fn branch_bytes(model: &TwoBranchModel, branch: BranchSel) -> Vec<u8> {
    let prefix = match branch {
        BranchSel::Rgb => "rgb.",
        BranchSel::Flow => "flow.",
    };
    let mut out = Vec::new();
    for (name, _, data) in model.entries() {
        if name.starts_with(prefix) {
            out.extend_from_slice(name.as_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Convenience wrapper used by determinism checks: full model bytes.
pub fn model_bytes(model: &TwoBranchModel) -> Vec<u8> {
    model_to_bytes(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_binding_dataset, GenConfig};

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

    fn small_sets(n_train: usize, n_val: usize) -> (Dataset, Dataset) {
        let gen = GenConfig::default();
        (
            generate_binding_dataset(n_train, &gen, 100).unwrap(),
            generate_binding_dataset(n_val, &gen, 200).unwrap(),
        )
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            dropout: 0.0,
            flip_prob: 0.0,
            epochs_per_iteration: 1,
            pretrain_epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn flow_stem_replicates_channel_means() {
        // equal slices stay equal
        let mut eq = vec![0.0; 3 * 3 * 3 * 2];
        for k in 0..9 {
            for c in 0..3 {
                for o in 0..2 {
                    eq[(k * 3 + c) * 2 + o] = k as f64 + o as f64 * 0.5;
                }
            }
        }
        let stem = Tensor::new(vec![3, 3, 3, 2], eq).unwrap();
        let flow = init_flow_stem(&stem, 10).unwrap();
        assert_eq!(flow.shape(), &[3, 3, 10, 2]);
        for k in 0..9 {
            for c in 0..10 {
                for o in 0..2 {
                    assert_eq!(
                        flow.data()[(k * 10 + c) * 2 + o],
                        stem.data()[(k * 3) * 2 + o]
                    );
                }
            }
        }

        // values 1,2,3 at a position -> flow slices get 2
        let mut w = vec![0.0; 3 * 3 * 3];
        w[0] = 1.0;
        w[1] = 2.0;
        w[2] = 3.0;
        let stem = Tensor::new(vec![3, 3, 3, 1], w).unwrap();
        let flow = init_flow_stem(&stem, 10).unwrap();
        for c in 0..10 {
            assert_eq!(flow.data()[c], 2.0);
        }
    }

    #[test]
    fn flow_stem_sum_is_ten_thirds_of_rgb_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stem = Param::he_init("stem", vec![3, 3, 3, 4], 27, &mut rng).value;
        let flow = init_flow_stem(&stem, 10).unwrap();
        for o in 0..4 {
            let rgb_sum: f64 = (0..9)
                .flat_map(|k| (0..3).map(move |c| (k, c)))
                .map(|(k, c)| stem.data()[(k * 3 + c) * 4 + o])
                .sum();
            let flow_sum: f64 = (0..9)
                .flat_map(|k| (0..10).map(move |c| (k, c)))
                .map(|(k, c)| flow.data()[(k * 10 + c) * 4 + o])
                .sum();
            assert!((flow_sum - rgb_sum * 10.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cma_reinit_zeroes_gamma_and_matches_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = CmaBlockParams::new("t", 64, 64, &mut rng).unwrap();
        init_cma_block(&mut params, 5);
        assert!(params.out_norm.gamma.value.data().iter().all(|&v| v == 0.0));
        assert!(params.out_norm.beta.value.data().iter().all(|&v| v == 0.0));
        let w = &params.w_q.value;
        let n = w.numel() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = 2.0 / 64.0;
        assert!(
            (var - expect).abs() / expect < 0.2,
            "variance {var} vs {expect}"
        );
    }

    #[test]
    fn sgd_vanilla_and_momentum_recurrence() {
        let mut p = Param::new("p", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true);
        sgd_step(&mut p, &[0.5, 0.5], 0.1, 0.0, 0.0).unwrap();
        assert!((p.value.data()[0] - 0.95).abs() < 1e-15);
        assert!((p.value.data()[1] + 2.05).abs() < 1e-15);

        // two steps, constant gradient g, momentum m: total update lr*g*(2+m)
        let mut p = Param::new("p", Tensor::new(vec![1], vec![0.0]).unwrap(), true);
        let (lr, m, g) = (0.1, 0.9, 1.0);
        sgd_step(&mut p, &[g], lr, m, 0.0).unwrap();
        sgd_step(&mut p, &[g], lr, m, 0.0).unwrap();
        assert!((p.value.data()[0] + lr * g * (2.0 + m)).abs() < 1e-12);

        // zero gradient, no decay: parameter unchanged
        let mut p = Param::new("p", Tensor::new(vec![1], vec![3.0]).unwrap(), true);
        sgd_step(&mut p, &[0.0], 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.value.data()[0], 3.0);

        // lr = 0 never moves parameters, though momentum state updates
        let mut p = Param::new("p", Tensor::new(vec![1], vec![3.0]).unwrap(), true);
        sgd_step(&mut p, &[1.0], 0.0, 0.9, 0.0).unwrap();
        assert_eq!(p.value.data()[0], 3.0);
        assert_eq!(p.momentum[0], 1.0);

        // decay exemption
        let mut p = Param::new("p", Tensor::new(vec![1], vec![2.0]).unwrap(), false);
        sgd_step(&mut p, &[0.0], 0.1, 0.0, 1.0).unwrap();
        assert_eq!(p.value.data()[0], 2.0);

        let mut p = Param::new("p", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), true);
        assert!(sgd_step(&mut p, &[1.0], 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn fusion_weights_by_parity() {
        assert_eq!(fusion_weights(0), (1.0, 1.0));
        assert_eq!(fusion_weights(1), (5.0, 1.0));
        assert_eq!(fusion_weights(2), (1.0, 5.0));
        assert_eq!(fusion_weights(3), (5.0, 1.0));
    }

    #[test]
    fn freeze_contract_holds_over_an_epoch() {
        let (r, f) = tiny_cfgs();
        let (train, val) = small_sets(8, 8);
        let mut m = build_model(&r, &f, 0.0, 1).unwrap();
        let before = branch_bytes(&m, BranchSel::Flow);
        train_branch_iteration(&mut m, BranchSel::Rgb, &train, &val, &fast_cfg(), 1, 1, 7).unwrap();
        assert_eq!(branch_bytes(&m, BranchSel::Flow), before);
        assert_ne!(branch_bytes(&m, BranchSel::Rgb), before); // sanity: rgb moved

        let before_rgb = branch_bytes(&m, BranchSel::Rgb);
        train_branch_iteration(&mut m, BranchSel::Flow, &train, &val, &fast_cfg(), 2, 1, 7).unwrap();
        assert_eq!(branch_bytes(&m, BranchSel::Rgb), before_rgb);
    }

    #[test]
    fn overfit_smoke_drives_loss_down() {
        let (r, f) = tiny_cfgs();
        let (train, _) = small_sets(8, 8);
        let mut m = build_model(&r, &f, 0.0, 2).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            weight_decay: 0.0,
            dropout: 0.0,
            flip_prob: 0.0,
            batch_size: 2,
            plateau_patience: 1000, // keep lr fixed for the smoke test
            ..TrainConfig::default()
        };
        let rep =
            train_branch_iteration(&mut m, BranchSel::Rgb, &train, &train, &cfg, 1, 150, 3).unwrap();
        let last = *rep.loss_curve.last().unwrap();
        assert!(last < 0.05, "final training loss {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let (r, f) = tiny_cfgs();
        let (train, val) = small_sets(8, 8);
        let mut out = Vec::new();
        for _ in 0..2 {
            let mut m = build_model(&r, &f, 0.5, 1).unwrap();
            let rep = train_branch_iteration(
                &mut m,
                BranchSel::Rgb,
                &train,
                &val,
                &TrainConfig::default(),
                1,
                2,
                9,
            )
            .unwrap();
            out.push((rep.loss_curve.clone(), model_bytes(&m)));
        }
        assert_eq!(out[0].0, out[1].0);
        assert_eq!(out[0].1, out[1].1);
    }

    #[test]
    fn evaluate_is_pure_and_errors_on_empty() {
        let (r, f) = tiny_cfgs();
        let (_, val) = small_sets(8, 8);
        let mut m = build_model(&r, &f, 0.5, 4).unwrap();
        let a = evaluate(&mut m, &val, 3, false, 1.0, 1.0).unwrap();
        let b = evaluate(&mut m, &val, 3, false, 1.0, 1.0).unwrap();
        assert_eq!(a.rgb_top1, b.rgb_top1);
        assert_eq!(a.fused_top1, b.fused_top1);
        let empty = Dataset {
            videos: vec![],
            height: 32,
            width: 32,
            frames_per_video: 9,
            n_classes: 8,
        };
        assert!(evaluate(&mut m, &empty, 3, false, 1.0, 1.0).is_err());
    }

    #[test]
    fn sweep_endpoints_equal_single_branch_accuracies() {
        let (r, f) = tiny_cfgs();
        let (_, val) = small_sets(8, 16);
        let mut m = build_model(&r, &f, 0.5, 4).unwrap();
        let (curve, _best) = fusion_weight_sweep(&mut m, &val, 3, 4).unwrap();
        let single = evaluate(&mut m, &val, 3, false, 1.0, 1.0).unwrap();
        assert_eq!(curve.first().unwrap().1, single.flow_top1);
        assert_eq!(curve.last().unwrap().1, single.rgb_top1);
        assert_eq!(curve.len(), 5);
    }

    #[test]
    fn iterative_train_alternates_and_handles_zero_iterations() {
        let (r, f) = tiny_cfgs();
        let (train, val) = small_sets(8, 8);
        let cfg = fast_cfg();
        let outcome = iterative_train(&r, &f, &train, &val, &cfg).unwrap();
        assert_eq!(outcome.reports.len(), 2);
        assert_eq!(outcome.reports[0].trained, Some(BranchSel::Rgb));
        assert_eq!(outcome.reports[1].trained, Some(BranchSel::Flow));
        assert_eq!(outcome.reports[0].iteration, 1);
        assert_eq!((outcome.reports[0].w_rgb, outcome.reports[0].w_flow), (5.0, 1.0));
        assert_eq!((outcome.reports[1].w_rgb, outcome.reports[1].w_flow), (1.0, 5.0));
        assert!(outcome.baseline_report.trained.is_none());

        let cfg0 = TrainConfig { iteration_count: 0, ..fast_cfg() };
        let outcome0 = iterative_train(&r, &f, &train, &val, &cfg0).unwrap();
        assert!(outcome0.reports.is_empty());
        let list = outcome0.report_list();
        assert_eq!(list.len(), 1);
        assert_eq!(list[0].iteration, 0);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad = [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { dropout: 1.0, ..Default::default() },
            TrainConfig { segments_train: 0, ..Default::default() },
            TrainConfig { lr_drop_factor: 1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        assert!(TrainConfig::default().validate().is_ok());
    }
}
