//! Command-line interface: data generation, training, evaluation,
//! verification, fusion sweeps, and attention-map export.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error. All randomness
//! flows from `--seed`; every run echoes its fully resolved configuration
//! before doing work.

use clap::{Parser, Subcommand};
use cma::attention::extract_attention_map;
use cma::config::FullConfig;
use cma::data::{generate_binding_dataset, read_dataset, tsn_sample_snippets, Dataset, SampleMode};
use cma::graph::Graph;
use cma::model::{build_model, load_checkpoint, save_checkpoint, cma_block_names, TwoBranchModel};
use cma::param::{Bindings, Mode};
use cma::pgm::{write_csv_grid, write_pgm};
use cma::train::{evaluate, fusion_weight_sweep, iterative_train, IterationReport};
use cma::verify::{gradcheck_suite, naive_attention_oracle, reports_to_text, DEFAULT_TOLERANCE};
use cma::{CmaError, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "cma", version, about = "Two-branch video classifier with cross-modality attention")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic motion-texture binding dataset file.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full iterative freeze-train protocol.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training dataset path.
        #[arg(long)]
        dataset: PathBuf,
        /// Validation dataset; without it, every fifth video of the
        /// training set is held out.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        segments: Option<usize>,
        /// Fusion weights as R:F, e.g. 5:1.
        #[arg(long)]
        weights: Option<String>,
        /// Also average scores over horizontal flips.
        #[arg(long)]
        flips: bool,
    },
    /// Finite-difference gradient checks for every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fused accuracy across a grid of fusion weights.
    FuseSweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 10)]
        grid: usize,
        #[arg(long)]
        segments: Option<usize>,
        /// Optional CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export one query position's attention map as PGM + raw CSV.
    AttnMap {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Block name, e.g. rgb_s1b0.
        #[arg(long)]
        block: String,
        /// Query position as Y,X in the block's feature grid.
        #[arg(long)]
        query: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the attention implementation against the double-loop oracle.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse(); // usage errors exit 2 via clap
    match run(cli.cmd) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<FullConfig> {
    let mut cfg = FullConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)?;
        cfg.apply_text(&text)?;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    println!("# resolved configuration\n{}", cfg.to_text());
    Ok(cfg)
}

fn rebuild_model(cfg: &FullConfig, checkpoint: &Path) -> Result<TwoBranchModel> {
    let (r, f) = cfg.branch_configs();
    let mut model = build_model(&r, &f, cfg.train.dropout, cfg.train.seed)?;
    load_checkpoint(&mut model, checkpoint)?;
    Ok(model)
}

fn parse_weights(spec: Option<&str>) -> Result<(f64, f64)> {
    match spec {
        None => Ok((1.0, 1.0)),
        Some(s) => {
            let (r, f) = s
                .split_once(':')
                .ok_or_else(|| CmaError::Param(format!("weights must be R:F, got {s:?}")))?;
            let wr: f64 = r.trim().parse().map_err(|_| CmaError::Param(format!("bad weight {r:?}")))?;
            let wf: f64 = f.trim().parse().map_err(|_| CmaError::Param(format!("bad weight {f:?}")))?;
            Ok((wr, wf))
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let ds = generate_binding_dataset(cfg.videos, &cfg.gen, cfg.train.seed)?;
            cma::data::write_dataset(&ds, &out)?;
            println!(
                "wrote {} videos ({}x{}x{} frames, {} classes) to {}",
                ds.videos.len(),
                ds.height,
                ds.width,
                ds.frames_per_video,
                ds.n_classes,
                out.display()
            );
            Ok(())
        }
        Cmd::Train { config, seed, dataset, val, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let full = read_dataset(&dataset)?;
            let (train_ds, val_ds) = match val {
                Some(p) => (full, read_dataset(&p)?),
                None => holdout_split(full),
            };
            println!(
                "training on {} videos, validating on {}",
                train_ds.videos.len(),
                val_ds.videos.len()
            );
            let (r, f) = cfg.branch_configs();
            let outcome = iterative_train(&r, &f, &train_ds, &val_ds, &cfg.train)?;
            std::fs::create_dir_all(&out)?;
            save_checkpoint(&outcome.model, &out.join("checkpoint.cmaw"))?;
            save_checkpoint(&outcome.baseline, &out.join("baseline.cmaw"))?;
            let mut csv = String::from("kind,iteration,trained,epoch,loss,val_top1,rgb_top1,flow_top1,fused_top1,w_rgb,w_flow\n");
            append_report_csv(&mut csv, &outcome.baseline_report);
            for rep in &outcome.reports {
                append_report_csv(&mut csv, rep);
            }
            std::fs::write(out.join("metrics.csv"), &csv)?;
            print_report("iter0 (two-stream baseline)", &outcome.baseline_report);
            for rep in &outcome.reports {
                print_report(&format!("iter{}", rep.iteration), rep);
            }
            println!("checkpoints and metrics written to {}", out.display());
            Ok(())
        }
        Cmd::Eval { config, checkpoint, dataset, segments, weights, flips } => {
            let cfg = load_config(config.as_deref(), None)?;
            let mut model = rebuild_model(&cfg, &checkpoint)?;
            let ds = read_dataset(&dataset)?;
            let segs = segments.unwrap_or(cfg.train.segments_test);
            let (wr, wf) = parse_weights(weights.as_deref())?;
            let res = evaluate(&mut model, &ds, segs, flips, wr, wf)?;
            println!(
                "rgb_top1 = {:.4}\nflow_top1 = {:.4}\nfused_top1 = {:.4} (weights {}:{})",
                res.rgb_top1, res.flow_top1, res.fused_top1, wr, wf
            );
            Ok(())
        }
        Cmd::Gradcheck { seed } => {
            println!("# gradcheck, seed {seed}, tolerance {DEFAULT_TOLERANCE:e}");
            let reports = gradcheck_suite(seed, DEFAULT_TOLERANCE)?;
            println!("{}", reports_to_text(&reports));
            if reports.iter().all(|r| r.pass) {
                Ok(())
            } else {
                let failing: Vec<&str> = reports
                    .iter()
                    .filter(|r| !r.pass)
                    .map(|r| r.op.as_str())
                    .collect();
                Err(CmaError::Param(format!(
                    "gradient check failed for: {}",
                    failing.join(", ")
                )))
            }
        }
        Cmd::FuseSweep { config, checkpoint, dataset, grid, segments, out } => {
            let cfg = load_config(config.as_deref(), None)?;
            let mut model = rebuild_model(&cfg, &checkpoint)?;
            let ds = read_dataset(&dataset)?;
            let segs = segments.unwrap_or(cfg.train.segments_test);
            let (curve, best) = fusion_weight_sweep(&mut model, &ds, segs, grid)?;
            let mut csv = String::from("w_rgb,fused_top1\n");
            for (w, acc) in &curve {
                println!("w_rgb = {w:.3}  fused_top1 = {acc:.4}");
                writeln!(csv, "{w},{acc}").unwrap();
            }
            println!("argmax w_rgb = {best:.3}");
            if let Some(p) = out {
                std::fs::write(&p, csv)?;
                println!("curve written to {}", p.display());
            }
            Ok(())
        }
        Cmd::AttnMap { config, checkpoint, dataset, block, query, out } => {
            let cfg = load_config(config.as_deref(), None)?;
            let mut model = rebuild_model(&cfg, &checkpoint)?;
            let ds = read_dataset(&dataset)?;
            let video = ds
                .videos
                .first()
                .ok_or_else(|| CmaError::Empty("dataset has no videos".into()))?;
            let (qy, qx) = {
                let (a, b) = query
                    .split_once(',')
                    .ok_or_else(|| CmaError::Param(format!("query must be Y,X, got {query:?}")))?;
                (
                    a.trim().parse::<usize>().map_err(|_| CmaError::Param(format!("bad query row {a:?}")))?,
                    b.trim().parse::<usize>().map_err(|_| CmaError::Param(format!("bad query col {b:?}")))?,
                )
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let snip = tsn_sample_snippets(video, 1, &mut rng, SampleMode::Test)?.remove(0);
            let (h, w) = (snip.rgb.shape()[0], snip.rgb.shape()[1]);
            let rgb = snip.rgb.reshaped(vec![1, h, w, 3])?;
            let flow = snip.flow_stack.reshaped(vec![1, h, w, snip.flow_stack.shape()[2]])?;

            let mut g = Graph::new();
            let mut b = Bindings::new();
            let mut tap = None;
            model.forward_snippet_tapped(
                &mut g, &mut b, &rgb, &flow, Mode::Eval, &mut rng, Some(&block), &mut tap,
            )?;
            let (x, y) = tap.ok_or_else(|| {
                CmaError::Param(format!(
                    "unknown block {block:?}; available: {}",
                    cma_block_names(&model).join(", ")
                ))
            })?;
            let params = block_params(&model, &block)?;
            let map = extract_attention_map(&x, &y, params, (qy, qx))?;

            std::fs::create_dir_all(&out)?;
            let stem = format!("attn_{block}_{qy}_{qx}");
            let (gh, gw) = (map.grid.shape()[0], map.grid.shape()[1]);
            write_pgm(&out.join(format!("{stem}.pgm")), gw, gh, map.grid.data())?;
            write_csv_grid(
                &out.join(format!("{stem}.csv")),
                map.key_w,
                map.key_h,
                &map.row,
            )?;
            println!(
                "attention map for {block} query ({qy},{qx}) over a {}x{} key grid written to {}",
                map.key_h,
                map.key_w,
                out.display()
            );
            Ok(())
        }
        Cmd::OracleCheck { seed } => {
            println!("# oracle check, seed {seed}, 100 instances");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst = 0.0f64;
            for _ in 0..100 {
                let nq = rng.gen_range(1..=16);
                let nk = rng.gen_range(1..=16);
                let dk = rng.gen_range(1..=8);
                let q = rand_tensor(&mut rng, vec![nq, dk]);
                let k = rand_tensor(&mut rng, vec![nk, dk]);
                let v = rand_tensor(&mut rng, vec![nk, dk]);
                let mut g = Graph::new();
                let qn = g.leaf(q.clone(), false);
                let kn = g.leaf(k.clone(), false);
                let vn = g.leaf(v.clone(), false);
                let out = cma::attention::cma_attention(&mut g, qn, kn, vn)?;
                let oracle = naive_attention_oracle(q.data(), k.data(), v.data(), nq, nk, dk);
                let diff = g.value(out).max_abs_diff(&Tensor::new(vec![nq, dk], oracle)?);
                worst = worst.max(diff);
            }
            println!("max abs difference over 100 instances: {worst:e}");
            if worst <= 1e-12 {
                Ok(())
            } else {
                Err(CmaError::Param(format!(
                    "attention deviates from oracle by {worst:e} (limit 1e-12)"
                )))
            }
        }
    }
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Every fifth video becomes validation; round-robin labels keep both
/// splits balanced.
fn holdout_split(full: Dataset) -> (Dataset, Dataset) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, v) in full.videos.into_iter().enumerate() {
        if i % 5 == 4 {
            val.push(v);
        } else {
            train.push(v);
        }
    }
    let mk = |videos| Dataset {
        videos,
        height: full.height,
        width: full.width,
        frames_per_video: full.frames_per_video,
        n_classes: full.n_classes,
    };
    (mk(train), mk(val))
}

fn block_params<'m>(
    model: &'m TwoBranchModel,
    name: &str,
) -> Result<&'m cma::attention::CmaBlockParams> {
    let err = || CmaError::Param(format!("unknown block {name:?}"));
    let rest = name.strip_prefix("rgb_s").map(|r| (true, r))
        .or_else(|| name.strip_prefix("flow_s").map(|r| (false, r)));
    let (is_rgb, rest) = rest.ok_or_else(err)?;
    let (s, b) = rest.split_once('b').ok_or_else(err)?;
    let s: usize = s.parse().map_err(|_| err())?;
    let b: usize = b.parse().map_err(|_| err())?;
    let branch = if is_rgb { &model.rgb } else { &model.flow };
    branch.cma_block(s, b).ok_or_else(err)
}

fn append_report_csv(csv: &mut String, rep: &IterationReport) {
    let trained = rep.trained.map(|b| b.to_string()).unwrap_or_else(|| "none".into());
    for (e, (loss, val)) in rep.loss_curve.iter().zip(&rep.val_curve).enumerate() {
        writeln!(
            csv,
            "epoch,{},{},{},{},{},,,,,",
            rep.iteration, trained, e, loss, val
        )
        .unwrap();
    }
    writeln!(
        csv,
        "iteration,{},{},,,,{},{},{},{},{}",
        rep.iteration, trained, rep.rgb_top1, rep.flow_top1, rep.fused_top1, rep.w_rgb, rep.w_flow
    )
    .unwrap();
}

fn print_report(label: &str, rep: &IterationReport) {
    println!(
        "{label}: rgb_top1 = {:.4}  flow_top1 = {:.4}  fused_top1 = {:.4} (weights {}:{})",
        rep.rgb_top1, rep.flow_top1, rep.fused_top1, rep.w_rgb, rep.w_flow
    );
}
