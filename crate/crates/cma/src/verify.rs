//! Independent verification oracles: central-difference gradients, a
//! double-loop attention reference, and the gradcheck suite that gates
//! every differentiable operation.
//!
//! The attention oracle here deliberately shares no arithmetic code with
//! [`crate::attention`]; it is plain loops over raw slices.

use crate::graph::{Graph, NodeId};

use crate::tensor::Tensor;
use crate::{CmaError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// "input_index:coord" of the worst coordinate.
    pub worst: String,
}

/// Central differences: `(f(x+eps e_i) - f(x-eps e_i)) / (2 eps)` per
/// coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe)?;
        probe[i] = x[i] - eps;
        let lo = f(&probe)?;
        probe[i] = x[i];
        if !hi.is_finite() || !lo.is_finite() {
            return Err(CmaError::NonFinite(format!(
                "finite_diff_grad at coordinate {}",
                i
            )));
        }
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(grad)
}

/// Literal per-pair evaluation of embedded-Gaussian attention: for each
/// query i, weights `w_j = exp(q_i.k_j / sqrt(d_k) - max_j) / sum`, output
/// `sum_j w_j v_j`. Explicit double loops, no shared code with the engine.
pub fn naive_attention_oracle(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, dk: usize) -> Vec<f64> {
    assert_eq!(q.len(), nq * dk);
    assert_eq!(k.len(), nk * dk);
    assert_eq!(v.len(), nk * dk);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; nq * dk];
    for i in 0..nq {
        let mut logits = vec![0.0; nk];
        for j in 0..nk {
            let mut dot = 0.0;
            for t in 0..dk {
                dot += q[i * dk + t] * k[j * dk + t];
            }
            logits[j] = dot * scale;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights = vec![0.0; nk];
        let mut sum = 0.0;
        for j in 0..nk {
            weights[j] = (logits[j] - mx).exp();
            sum += weights[j];
        }
        for j in 0..nk {
            let w = weights[j] / sum;
            for t in 0..dk {
                out[i * dk + t] += w * v[j * dk + t];
            }
        }
    }
    out
}

/// Relative error as used by every check: `|a-b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compare a recorded gradient with an independent estimate.
pub fn compare_grads(
    op: &str,
    recorded: &[(usize, Vec<f64>)],
    estimated: &[(usize, Vec<f64>)],
    tolerance: f64,
) -> GradReport {
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut worst = String::from("-");
    for ((ia, ra), (_, ea)) in recorded.iter().zip(estimated) {
        for (c, (&r, &e)) in ra.iter().zip(ea).enumerate() {
            let rel = relative_error(r, e);
            let abs = (r - e).abs();
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}:{}", ia, c);
            }
            max_abs = max_abs.max(abs);
        }
    }
    GradReport {
        op: op.to_string(),
        max_rel,
        max_abs,
        tolerance,
        pass: max_rel <= tolerance,
        worst,
    }
}

/// Builder closure turning input nodes into the scalar node under test.
type BuildFn<'a> = Box<dyn FnMut(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a>;

/// One gradcheck case: named inputs plus a builder producing a scalar node.
struct Case<'a> {
    name: String,
    inputs: Vec<Tensor>,
    build: BuildFn<'a>,
}

fn run_case(case: &mut Case, eps: f64, tolerance: f64) -> Result<GradReport> {
    // recorded gradients
    let mut g = Graph::new();
    let ids: Vec<NodeId> = case
        .inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect();
    let loss = (case.build)(&mut g, &ids)?;
    g.backward(loss)?;
    let recorded: Vec<(usize, Vec<f64>)> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (i, g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; case.inputs[i].numel()])))
        .collect();

    // finite differences per input
    let mut estimated = Vec::new();
    for i in 0..case.inputs.len() {
        let inputs = case.inputs.clone();
        let build = &mut case.build;
        let est = finite_diff_grad(
            |x: &[f64]| {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let t = if j == i {
                            Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap()
                        } else {
                            t.clone()
                        };
                        g.leaf(t, false)
                    })
                    .collect();
                let loss = build(&mut g, &ids)?;
                Ok(g.value(loss).data()[0])
            },
            case.inputs[i].data(),
            eps,
        )?;
        estimated.push((i, est));
    }
    Ok(compare_grads(&case.name, &recorded, &estimated, tolerance))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random values bounded away from zero, for kinked ops (ReLU).
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Random values with pairwise-distinct, well-separated entries so pooling
/// argmaxes are stable under the probe step.
fn rand_tensor_distinct(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 1e-3 - (n as f64 * 5e-4)).collect();
    // deterministic shuffle
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        data.swap(i, j);
    }
    for v in data.iter_mut() {
        *v += rng.gen_range(-1e-4..1e-4);
    }
    Tensor::new(shape, data).unwrap()
}

fn probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Central-difference checks for every differentiable op, three seeded
/// inputs each. Fails if any op exceeds the tolerance.
pub fn gradcheck_suite(seed: u64, tolerance: f64) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    for round in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(round.wrapping_mul(0x9e37_79b9)));
        reports.extend(gradcheck_round(&mut rng, round, tolerance)?);
    }
    Ok(reports)
}

fn gradcheck_round(rng: &mut ChaCha8Rng, round: u64, tolerance: f64) -> Result<Vec<GradReport>> {
    let mut cases: Vec<Case> = Vec::new();
    let tag = |name: &str| format!("{name}#{round}");

    // matmul
    {
        let w = probe(rng, 3 * 2);
        cases.push(Case {
            name: tag("matmul"),
            inputs: vec![rand_tensor(rng, vec![3, 4]), rand_tensor(rng, vec![4, 2])],
            build: Box::new(move |g, ids| {
                let c = g.matmul(ids[0], ids[1])?;
                g.weighted_sum(c, &w)
            }),
        });
    }
    // matmul_nt
    {
        let w = probe(rng, 3 * 5);
        cases.push(Case {
            name: tag("matmul_nt"),
            inputs: vec![rand_tensor(rng, vec![3, 4]), rand_tensor(rng, vec![5, 4])],
            build: Box::new(move |g, ids| {
                let c = g.matmul_nt(ids[0], ids[1])?;
                g.weighted_sum(c, &w)
            }),
        });
    }
    // softmax_rows
    {
        let w = probe(rng, 4 * 5);
        cases.push(Case {
            name: tag("softmax_rows"),
            inputs: vec![rand_tensor(rng, vec![4, 5])],
            build: Box::new(move |g, ids| {
                let s = g.softmax_rows(ids[0])?;
                g.weighted_sum(s, &w)
            }),
        });
    }
    // conv2d 3x3 stride 1 pad 1, and stride 2
    {
        let w = probe(rng, 2 * 5 * 5 * 3);
        cases.push(Case {
            name: tag("conv2d_s1"),
            inputs: vec![
                rand_tensor(rng, vec![2, 5, 5, 2]),
                rand_tensor(rng, vec![3, 3, 2, 3]),
            ],
            build: Box::new(move |g, ids| {
                let c = g.conv2d(ids[0], ids[1], 1, 1)?;
                g.weighted_sum(c, &w)
            }),
        });
        let w2 = probe(rng, 3 * 3 * 2);
        cases.push(Case {
            name: tag("conv2d_s2"),
            inputs: vec![
                rand_tensor(rng, vec![1, 5, 5, 3]),
                rand_tensor(rng, vec![3, 3, 3, 2]),
            ],
            build: Box::new(move |g, ids| {
                let c = g.conv2d(ids[0], ids[1], 2, 1)?;
                g.weighted_sum(c, &w2)
            }),
        });
    }
    // max_pool2d on distinct values (kink-free probe points)
    {
        let w = probe(rng, 2 * 2 * 3);
        cases.push(Case {
            name: tag("max_pool2d"),
            inputs: vec![rand_tensor_distinct(rng, vec![1, 4, 4, 3])],
            build: Box::new(move |g, ids| {
                let p = g.max_pool2d(ids[0])?;
                g.weighted_sum(p, &w)
            }),
        });
    }
    // batch_norm (train-mode statistics path)
    {
        let w = probe(rng, 2 * 3 * 3 * 2);
        cases.push(Case {
            name: tag("batch_norm"),
            inputs: vec![
                rand_tensor(rng, vec![2, 3, 3, 2]),
                rand_tensor(rng, vec![2]),
                rand_tensor(rng, vec![2]),
            ],
            build: Box::new(move |g, ids| {
                let (y, _, _) = g.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?;
                g.weighted_sum(y, &w)
            }),
        });
    }
    // elementwise: relu (off-kink), add, mul, scale
    {
        let w = probe(rng, 12);
        cases.push(Case {
            name: tag("relu"),
            inputs: vec![rand_tensor_off_kink(rng, vec![12])],
            build: Box::new(move |g, ids| {
                let y = g.relu(ids[0]);
                g.weighted_sum(y, &w)
            }),
        });
        let w2 = probe(rng, 8);
        cases.push(Case {
            name: tag("add_mul_scale"),
            inputs: vec![rand_tensor(rng, vec![8]), rand_tensor(rng, vec![8])],
            build: Box::new(move |g, ids| {
                let s = g.add(ids[0], ids[1])?;
                let m = g.mul(s, ids[1])?;
                let sc = g.scale(m, 0.5)?;
                g.weighted_sum(sc, &w2)
            }),
        });
    }
    // global_avg_pool
    {
        let w = probe(rng, 2 * 3);
        cases.push(Case {
            name: tag("global_avg_pool"),
            inputs: vec![rand_tensor(rng, vec![2, 4, 4, 3])],
            build: Box::new(move |g, ids| {
                let p = g.global_avg_pool(ids[0])?;
                g.weighted_sum(p, &w)
            }),
        });
    }
    // dropout with a replayed mask
    {
        let w = probe(rng, 16);
        let mask_seed = rng.gen::<u64>();
        cases.push(Case {
            name: tag("dropout"),
            inputs: vec![rand_tensor(rng, vec![16])],
            build: Box::new(move |g, ids| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                let d = g.dropout(ids[0], 0.3, true, &mut mask_rng)?;
                g.weighted_sum(d, &w)
            }),
        });
    }
    // attention (softmax(QK^T/sqrt(dk)) V)
    {
        let w = probe(rng, 3 * 4);
        cases.push(Case {
            name: tag("attention"),
            inputs: vec![
                rand_tensor(rng, vec![3, 4]),
                rand_tensor(rng, vec![5, 4]),
                rand_tensor(rng, vec![5, 4]),
            ],
            build: Box::new(move |g, ids| {
                let z = crate::attention::cma_attention(g, ids[0], ids[1], ids[2])?;
                g.weighted_sum(z, &w)
            }),
        });
    }
    // full CMA block: gradients w.r.t. x, y and every parameter
    {
        let cx = 4;
        let cy = 6;
        let dk = 2;
        let w = probe(rng, 2 * 4 * 4 * cx);
        let inputs = vec![
            rand_tensor(rng, vec![2, 4, 4, cx]),
            rand_tensor(rng, vec![2, 4, 4, cy]),
            rand_tensor(rng, vec![1, 1, cx, dk]),
            rand_tensor(rng, vec![1, 1, cy, dk]),
            rand_tensor(rng, vec![1, 1, cy, dk]),
            rand_tensor(rng, vec![1, 1, dk, cx]),
            rand_tensor(rng, vec![cx]), // gamma, nonzero so all paths carry signal
            rand_tensor(rng, vec![cx]), // beta
        ];
        cases.push(Case {
            name: tag("cma_block_forward"),
            inputs,
            build: Box::new(move |g, ids| {
                let out = cma_block_from_nodes(g, ids, dk)?;
                g.weighted_sum(out, &w)
            }),
        });
    }
    // video loss (cross entropy over logits)
    {
        cases.push(Case {
            name: tag("video_loss"),
            inputs: vec![rand_tensor(rng, vec![3, 6])],
            build: Box::new(move |g, ids| g.cross_entropy(ids[0], &[1, 4, 0])),
        });
    }
    // composite matmul -> softmax -> cross-entropy path
    {
        cases.push(Case {
            name: tag("matmul_softmax_ce"),
            inputs: vec![rand_tensor(rng, vec![2, 5]), rand_tensor(rng, vec![5, 4])],
            build: Box::new(move |g, ids| {
                let logits = g.matmul(ids[0], ids[1])?;
                g.cross_entropy(logits, &[2, 0])
            }),
        });
    }
    // segment mean
    {
        let w = probe(rng, 2 * 3);
        cases.push(Case {
            name: tag("segment_mean"),
            inputs: vec![rand_tensor(rng, vec![6, 3])],
            build: Box::new(move |g, ids| {
                let m = g.segment_mean(ids[0], 3)?;
                g.weighted_sum(m, &w)
            }),
        });
    }

    let mut out = Vec::new();
    for case in cases.iter_mut() {
        out.push(run_case(case, DEFAULT_EPS, tolerance)?);
    }
    Ok(out)
}

/// CMA block forward where q/k/v/out/bn parameters are existing graph leaves
/// (so finite differences can perturb them directly). Mirrors
/// `cma_block_forward`, which binds clones of its params; gradchecking needs
/// the very leaves under perturbation.
fn cma_block_from_nodes(g: &mut Graph, ids: &[NodeId], dk: usize) -> Result<NodeId> {
    let (x, y) = (ids[0], ids[1]);
    let (w_q, w_k, w_v, w_out, gamma, beta) = (ids[2], ids[3], ids[4], ids[5], ids[6], ids[7]);
    let xs = g.value(x).shape().to_vec();
    let cx = xs[3];

    let embed = |g: &mut Graph, m: NodeId, w: NodeId, cin: usize, cout: usize| -> Result<NodeId> {
        let ms = g.value(m).shape().to_vec();
        let rows = g.value(m).numel() / cin;
        let flat = g.reshape(m, vec![rows, cin])?;
        let wm = g.reshape(w, vec![cin, cout])?;
        let y = g.matmul(flat, wm)?;
        let mut os = ms;
        *os.last_mut().unwrap() = cout;
        g.reshape(y, os)
    };

    let cy = g.value(y).shape()[3];
    let q = embed(g, x, w_q, cx, dk)?;
    let yp = g.max_pool2d(y)?;
    let k = embed(g, yp, w_k, cy, dk)?;
    let v = embed(g, yp, w_v, cy, dk)?;
    let n = xs[0];
    let mut items = Vec::new();
    for i in 0..n {
        let qi = g.slice_item(q, i)?;
        let ki = g.slice_item(k, i)?;
        let vi = g.slice_item(v, i)?;
        items.push(crate::attention::cma_attention(g, qi, ki, vi)?);
    }
    let mut zs = xs.clone();
    *zs.last_mut().unwrap() = dk;
    let z = g.stack_items(&items, zs)?;
    let proj = embed(g, z, w_out, dk, cx)?;
    let (bn, _, _) = g.batch_norm_train(proj, gamma, beta, 1e-5)?;
    g.add(bn, x)
}

/// Plain-text report, one line per check.
pub fn reports_to_text(reports: &[GradReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!(
            "{:<28} max_rel={:>12.3e} max_abs={:>12.3e} worst={:<8} {}\n",
            r.op,
            r.max_rel,
            r.max_abs,
            r.worst,
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    s
}

/// Machine-readable CSV: `op,max_rel,max_abs,pass`.
pub fn reports_to_csv(reports: &[GradReport]) -> String {
    let mut s = String::from("op,max_rel,max_abs,pass\n");
    for r in reports {
        s.push_str(&format!("{},{:e},{:e},{}\n", r.op, r.max_rel, r.max_abs, r.pass));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_quadratic() {
        let f = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum());
        let g = finite_diff_grad(f, &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() <= 1e-9);
    }

    #[test]
    fn finite_diff_linear_exact() {
        let f = |x: &[f64]| Ok(2.0 * x[0] - 3.0 * x[1]);
        let g = finite_diff_grad(f, &[0.3, -0.7], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() <= 1e-10);
        assert!((g[1] + 3.0).abs() <= 1e-10);
    }

    #[test]
    fn oracle_single_key_returns_value_row() {
        let out = naive_attention_oracle(&[0.3, -0.5], &[0.9, 0.1], &[2.0, -7.0], 1, 1, 2);
        assert_eq!(out, vec![2.0, -7.0]);
    }

    #[test]
    fn oracle_identical_keys_mean_of_values() {
        let k = vec![0.4, 0.2, 0.4, 0.2, 0.4, 0.2];
        let v = vec![1.0, 0.0, 2.0, 0.0, 3.0, 6.0];
        let out = naive_attention_oracle(&[1.0, -1.0], &k, &v, 1, 3, 2);
        assert!((out[0] - 2.0).abs() <= 1e-12);
        assert!((out[1] - 2.0).abs() <= 1e-12);
    }

    #[test]
    fn gradcheck_suite_passes() {
        let reports = gradcheck_suite(1, DEFAULT_TOLERANCE).unwrap();
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(r.pass, "{}", reports_to_text(std::slice::from_ref(r)));
        }
    }

    #[test]
    fn gradcheck_infinite_tolerance_always_passes() {
        let reports = gradcheck_suite(2, f64::INFINITY).unwrap();
        assert!(reports.iter().all(|r| r.pass));
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        // negative control: a deliberately wrong recorded gradient must fail
        let recorded = vec![(0usize, vec![1.0, 2.0, 5.0])];
        let estimated = vec![(0usize, vec![1.0, 2.0, 3.0])];
        let r = compare_grads("matmul_corrupted", &recorded, &estimated, 1e-5);
        assert!(!r.pass);
        assert_eq!(r.worst, "0:2");
        assert!(r.op.contains("matmul"));
    }
}
