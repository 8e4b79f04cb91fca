//! Criteria that are checked exactly: gradients, masking, stop-gradient,
//! oracle equivalence, determinism and I/O.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wintr_core::autodiff::gradcheck::{check_gradients, GradCheckReport, DEFAULT_STEP};
use wintr_core::autodiff::{Graph, Tensor, Var, MASK_SENTINEL};
use wintr_core::dataset::{generate, load_dataset, save_dataset, SyntheticTaskSpec};
use wintr_core::experiment::{run, RunConfig, REPORT_FILE, SUMMARY_FILE};
use wintr_core::objectives::{
    cross_entropy, loss_s_con, loss_t_con, mmd_transfer, mstn_center_transfer,
    supervised_contrastive, total_loss, Bandwidths, LossTerms, StopSide,
};
use wintr_core::refinement::{knn_refine, weighted_kmeans_refine};
use wintr_core::transformer::{checkpoint, forward, ForwardOptions, ModelConfig, Params, WinTrModel};
use wintr_core::Result as CoreResult;

use crate::oracles::{self, Rows};

pub type Outcome = Result<String, String>;

const INSTANCES: usize = 20;

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn mat(r: &Rows) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

/// `Σ w ⊙ y` with fixed weights drawn from `seed`.
fn project(g: &mut Graph, y: Var, seed: u64) -> CoreResult<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> CoreResult<Var>>)>;

fn case<F>(make: F) -> Case
where
    F: Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> CoreResult<Var>>) + 'static,
{
    Box::new(make)
}

fn unary(shape: &'static [usize], lo: f64, hi: f64, op: fn(&mut Graph, Var) -> CoreResult<Var>) -> Case {
    case(move |rng| {
        let seed = rng.random();
        (
            vec![tensor(rng, shape, lo, hi)],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = op(g, v[0])?;
                project(g, y, seed)
            }),
        )
    })
}

fn binary(
    a: &'static [usize],
    b: &'static [usize],
    op: fn(&mut Graph, Var, Var) -> CoreResult<Var>,
) -> Case {
    case(move |rng| {
        let seed = rng.random();
        (
            vec![tensor(rng, a, -2.0, 2.0), tensor(rng, b, -2.0, 2.0)],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = op(g, v[0], v[1])?;
                project(g, y, seed)
            }),
        )
    })
}

fn primitive_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", binary(&[3, 4], &[3, 4], |g, a, b| g.add(a, b))),
        ("sub", binary(&[3, 4], &[3, 4], |g, a, b| g.sub(a, b))),
        ("mul", binary(&[3, 4], &[3, 4], |g, a, b| g.mul(a, b))),
        ("scale", unary(&[3, 4], -2.0, 2.0, |g, a| Ok(g.scale(a, -1.7)))),
        ("exp", unary(&[3, 4], -2.0, 2.0, |g, a| Ok(g.exp(a)))),
        ("log", unary(&[3, 4], 0.5, 3.0, |g, a| Ok(g.log(a)))),
        ("gelu", unary(&[3, 4], -3.0, 3.0, |g, a| Ok(g.gelu(a)))),
        // Kept away from the kink at 0.
        ("relu", unary(&[3, 4], 0.1, 2.0, |g, a| {
            let n = g.scale(a, -1.0);
            let p = g.relu(a);
            let z = g.relu(n);
            g.add(p, z)
        })),
        ("matmul", binary(&[3, 5], &[5, 2], |g, a, b| g.matmul(a, b))),
        ("batch_matmul", binary(&[2, 3, 4], &[2, 4, 3], |g, a, b| g.batch_matmul(a, b))),
        ("permute", unary(&[2, 3, 4], -2.0, 2.0, |g, a| g.permute(a, &[2, 0, 1]))),
        ("transpose", unary(&[3, 5], -2.0, 2.0, |g, a| g.transpose(a))),
        ("reshape", unary(&[3, 4], -2.0, 2.0, |g, a| g.reshape(a, &[2, 6]))),
        ("add_row", binary(&[3, 4], &[4], |g, a, b| g.add_row(a, b))),
        ("mul_row", binary(&[3, 4], &[4], |g, a, b| g.mul_row(a, b))),
        ("layer_norm", unary(&[3, 5], -2.0, 2.0, |g, a| Ok(g.layer_norm(a)))),
        ("softmax", unary(&[3, 5], -3.0, 3.0, |g, a| g.softmax_lastdim(a))),
        ("log_softmax", unary(&[3, 5], -3.0, 3.0, |g, a| g.log_softmax_lastdim(a))),
        ("sum", unary(&[3, 4], -2.0, 2.0, |g, a| {
            let s = g.sum(a);
            g.mul(s, s)
        })),
        ("mean", unary(&[3, 4], -2.0, 2.0, |g, a| {
            let s = g.mean(a);
            g.mul(s, s)
        })),
        ("l2_normalize", unary(&[3, 4], -2.0, 2.0, |g, a| Ok(g.l2_normalize_lastdim(a)))),
        ("gather_rows", unary(&[4, 3], -2.0, 2.0, |g, a| g.gather_rows(a, &[2, 0, 2, 3, 2]))),
        ("concat_rows", binary(&[2, 3], &[3, 3], |g, a, b| g.concat_rows(&[b, a, b]))),
        ("add_mask", unary(&[2, 4, 4], -2.0, 2.0, |g, a| {
            let mut m = Tensor::zeros(&[4, 4]);
            m.data_mut()[3] = MASK_SENTINEL;
            m.data_mut()[12] = MASK_SENTINEL;
            let m = g.constant(m);
            let s = g.add_mask(a, m)?;
            g.softmax_lastdim(s)
        })),
        ("pairwise_sq_dist", binary(&[3, 4], &[5, 4], |g, a, b| g.pairwise_sq_dist(a, b))),
    ]
}

fn loss_cases() -> Vec<(&'static str, Case)> {
    let features = |rng: &mut ChaCha8Rng, n: usize| tensor(rng, &[n, 5], -2.0, 2.0);
    vec![
        ("source cross-entropy", case(|rng| {
            let y = labels(rng, 6, 4);
            (vec![tensor(rng, &[6, 4], -3.0, 3.0)], Box::new(move |g: &mut Graph, v: &[Var]| cross_entropy(g, v[0], &y)))
        })),
        ("target pseudo-label cross-entropy", case(|rng| {
            let y = labels(rng, 5, 3);
            (vec![tensor(rng, &[5, 3], -3.0, 3.0)], Box::new(move |g: &mut Graph, v: &[Var]| cross_entropy(g, v[0], &y)))
        })),
        // The candidate side of the directional losses is frozen, so only
        // the anchors are differentiated; the two-sided form covers both.
        ("source-side contrastive", case(move |rng| {
            let (ys, yt) = (labels(rng, 6, 3), labels(rng, 5, 3));
            let frozen = features(rng, 6);
            (
                vec![features(rng, 5)],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let fs = g.constant(frozen.clone());
                    loss_s_con(g, fs, v[0], &ys, &yt, 0.5)
                }),
            )
        })),
        ("target-side contrastive", case(move |rng| {
            let (ys, yt) = (labels(rng, 6, 3), labels(rng, 5, 3));
            let frozen = features(rng, 5);
            (
                vec![features(rng, 6)],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let ft = g.constant(frozen.clone());
                    loss_t_con(g, v[0], ft, &ys, &yt, 0.5)
                }),
            )
        })),
        ("two-sided contrastive", case(move |rng| {
            let (la, lc) = (labels(rng, 5, 3), labels(rng, 6, 3));
            let tau = rng.random_range(0.1..1.0);
            (
                vec![features(rng, 5), features(rng, 6)],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    supervised_contrastive(g, v[0], v[1], &la, &lc, tau, StopSide::Neither)
                }),
            )
        })),
        ("mmd", case(move |rng| {
            let widths = Bandwidths::Fixed(vec![rng.random_range(2.0..8.0), rng.random_range(8.0..30.0)]);
            (
                vec![features(rng, 5), features(rng, 4)],
                Box::new(move |g: &mut Graph, v: &[Var]| mmd_transfer(g, v[0], v[1], &widths, StopSide::Neither)),
            )
        })),
        ("mstn", case(move |rng| {
            let (la, lb) = (labels(rng, 6, 3), labels(rng, 5, 3));
            (
                vec![features(rng, 6), features(rng, 5)],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    mstn_center_transfer(g, v[0], &la, v[1], &lb, StopSide::Neither)
                }),
            )
        })),
        ("total objective", case(move |rng| {
            let (ys, yt) = (labels(rng, 4, 3), labels(rng, 4, 3));
            let lambda = rng.random_range(0.1..2.0);
            let (frozen_s, frozen_t) = (features(rng, 4), features(rng, 4));
            (
                vec![
                    tensor(rng, &[4, 3], -2.0, 2.0),
                    tensor(rng, &[4, 3], -2.0, 2.0),
                    features(rng, 4),
                    features(rng, 4),
                ],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let fs = g.constant(frozen_s.clone());
                    let ft = g.constant(frozen_t.clone());
                    let terms = LossTerms {
                        l_s: cross_entropy(g, v[0], &ys)?,
                        l_t: cross_entropy(g, v[1], &yt)?,
                        l_s_con: loss_s_con(g, fs, v[2], &ys, &yt, 0.3)?,
                        l_t_con: loss_t_con(g, v[3], ft, &ys, &yt, 0.3)?,
                    };
                    Ok(total_loss(g, terms, lambda, 0.3)?.0)
                }),
            )
        })),
        ("transformer forward", case(move |rng| {
            let config = ModelConfig {
                image_side: 4,
                patch_side: 2,
                embed_dim: 8,
                num_heads: 2,
                depth: 1,
                num_classes: 2,
                ..ModelConfig::default()
            };
            let params = Params::init(&config, rng);
            let images = tensor(rng, &[2, 1, 4, 4], 0.0, 1.0);
            let y = labels(rng, 2, 2);
            let inputs = vec![params.token_src.clone(), params.token_tgt.clone(), params.blocks[0].attn.query.weight.clone()];
            (
                inputs,
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let mut bound = params.map(|_, t| g.constant(t.clone()));
                    bound.token_src = v[0];
                    bound.token_tgt = v[1];
                    bound.blocks[0].attn.query.weight = v[2];
                    let out = forward(g, &config, &bound, &images, ForwardOptions::default())?;
                    let a = cross_entropy(g, out.logits_src, &y)?;
                    let b = cross_entropy(g, out.logits_tgt, &y)?;
                    g.add(a, b)
                }),
            )
        })),
    ]
}

fn worst_over(cases: Vec<(&'static str, Case)>, seed: u64) -> std::result::Result<Vec<(&'static str, f64)>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, make) in cases {
        let mut worst = 0.0f64;
        for _ in 0..INSTANCES {
            let (inputs, f) = make(&mut rng);
            let report: GradCheckReport = check_gradients(&inputs, DEFAULT_STEP, |g, v| f(g, v))
                .map_err(|e| format!("{name}: {e}"))?;
            worst = worst.max(report.max_rel_error);
        }
        out.push((name, worst));
    }
    Ok(out)
}

pub fn gradient_correctness() -> Outcome {
    let primitives = worst_over(primitive_cases(), 1)?;
    let losses = worst_over(loss_cases(), 2)?;
    let bad: Vec<String> = primitives
        .iter()
        .filter(|(_, e)| !(*e < 1e-6))
        .chain(losses.iter().filter(|(_, e)| !(*e < 1e-4)))
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    let worst = |v: &[(&str, f64)]| v.iter().map(|p| p.1).fold(0.0, f64::max);
    let detail = format!(
        "{} primitives worst rel {:.2e}, {} losses worst rel {:.2e}, {INSTANCES} instances each",
        primitives.len(),
        worst(&primitives),
        losses.len(),
        worst(&losses)
    );
    if bad.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; over tolerance: {}", bad.join(", ")))
    }
}

fn random_images(rng: &mut ChaCha8Rng, config: &ModelConfig, batch: usize) -> Tensor {
    let side = config.image_side;
    tensor(rng, &[batch, config.channels, side, side], 0.0, 1.0)
}

pub fn mask_invariants() -> Outcome {
    let mut checked = 0;
    for seed in 0..3u64 {
        for depth in 1..=3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let config = ModelConfig { depth, ..ModelConfig::default() };
            let model = WinTrModel::new(config.clone(), &mut rng).map_err(|e| e.to_string())?;
            let images = random_images(&mut rng, &config, 3);
            let n = config.seq_len();

            let mut g = Graph::new();
            let p = model.bind_frozen(&mut g);
            let out = forward(&mut g, &config, &p, &images, ForwardOptions::default()).map_err(|e| e.to_string())?;
            for (layer, &attn) in out.attention.iter().enumerate() {
                let a = g.value(attn);
                for head in 0..a.shape()[0] {
                    let base = head * n * n;
                    let (x, y) = (a.data()[base + n - 1], a.data()[base + (n - 1) * n]);
                    if x != 0.0 || y != 0.0 {
                        return Err(format!(
                            "seed {seed} L={depth} layer {layer} head-slice {head}: attention {x:e}/{y:e}"
                        ));
                    }
                    checked += 1;
                }
            }

            if depth == 1 {
                let mut perturbed = model.clone();
                for v in perturbed.params.token_src.data_mut() {
                    *v += rng.random_range(-1.0..1.0);
                }
                let opts = ForwardOptions::default();
                let a = model.infer(&images, opts, 8).map_err(|e| e.to_string())?;
                let b = perturbed.infer(&images, opts, 8).map_err(|e| e.to_string())?;
                let same = a.feat_tgt_view.data().iter().zip(b.feat_tgt_view.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                if !same {
                    return Err(format!("seed {seed}: feat_tgt_view moved with token_src at L=1"));
                }
                if a.feat_src_view == b.feat_src_view {
                    return Err("token_src perturbation did not reach feat_src_view".into());
                }
                let open = ForwardOptions { mask_enabled: false, ..opts };
                let c = model.infer(&images, open, 8).map_err(|e| e.to_string())?;
                let d = perturbed.infer(&images, open, 8).map_err(|e| e.to_string())?;
                if c.feat_tgt_view == d.feat_tgt_view {
                    return Err("without the mask feat_tgt_view should depend on token_src".into());
                }
            }
        }
    }
    Ok(format!("{checked} head-slices across 3 seeds x L=1..3 exactly zero; L=1 tgt view bitwise invariant"))
}

struct Branches {
    grads_src_branch: Vec<f64>,
    grads_tgt_branch: Vec<f64>,
}

/// Runs the source images through one copy of the parameters and the
/// target images through another, so each copy is reachable only
/// through its own branch.
fn split_branch_gradients(
    model: &WinTrModel,
    source: &Tensor,
    target: &Tensor,
    ys: &[usize],
    yt: &[usize],
    source_side: bool,
    stop: StopSide,
) -> CoreResult<Branches> {
    let mut g = Graph::new();
    let ps = model.bind(&mut g);
    let pt = model.bind(&mut g);
    let opts = ForwardOptions::default();
    let os = forward(&mut g, &model.config, &ps, source, opts)?;
    let ot = forward(&mut g, &model.config, &pt, target, opts)?;
    let loss = if source_side {
        // Anchors: target in the source-oriented view; candidates f^s_s.
        match stop {
            StopSide::Second => loss_s_con(&mut g, os.feat_src_view, ot.feat_src_view, ys, yt, 0.1)?,
            _ => supervised_contrastive(&mut g, ot.feat_src_view, os.feat_src_view, yt, ys, 0.1, stop)?,
        }
    } else {
        // Anchors: source in the target-oriented view; candidates f^t_t.
        match stop {
            StopSide::Second => loss_t_con(&mut g, os.feat_tgt_view, ot.feat_tgt_view, ys, yt, 0.1)?,
            _ => supervised_contrastive(&mut g, os.feat_tgt_view, ot.feat_tgt_view, ys, yt, 0.1, stop)?,
        }
    };
    let grads = g.backward(loss)?;
    let collect = |p: &Params<Var>| -> Vec<f64> {
        p.flat()
            .into_iter()
            .flat_map(|&v| grads.get(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
            .collect()
    };
    Ok(Branches {
        grads_src_branch: collect(&ps),
        grads_tgt_branch: collect(&pt),
    })
}

pub fn stop_gradient_one_sided() -> Outcome {
    let mut trials = 0;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let config = ModelConfig { depth: 2, ..ModelConfig::default() };
        let model = WinTrModel::new(config.clone(), &mut rng).map_err(|e| e.to_string())?;
        let source = random_images(&mut rng, &config, 6);
        let target = random_images(&mut rng, &config, 6);
        let ys = vec![0, 1, 2, 3, 0, 1];
        let yt = vec![1, 0, 3, 2, 1, 0];
        let nonzero = |v: &[f64]| v.iter().any(|&x| x != 0.0);
        let zero = |v: &[f64]| v.iter().all(|&x| x == 0.0);

        for source_side in [true, false] {
            let what = if source_side { "L_s^con" } else { "L_t^con" };
            let with = split_branch_gradients(&model, &source, &target, &ys, &yt, source_side, StopSide::Second)
                .map_err(|e| e.to_string())?;
            let without = split_branch_gradients(&model, &source, &target, &ys, &yt, source_side, StopSide::Neither)
                .map_err(|e| e.to_string())?;
            let (frozen, live, frozen_open) = if source_side {
                (&with.grads_src_branch, &with.grads_tgt_branch, &without.grads_src_branch)
            } else {
                (&with.grads_tgt_branch, &with.grads_src_branch, &without.grads_tgt_branch)
            };
            if !zero(frozen) {
                return Err(format!("seed {seed} {what}: frozen branch has nonzero gradient"));
            }
            if !nonzero(live) {
                return Err(format!("seed {seed} {what}: anchor branch gradient is zero"));
            }
            if !nonzero(frozen_open) {
                return Err(format!("seed {seed} {what}: without stop-gradient the frozen branch stays zero"));
            }
            trials += 1;
        }
    }
    Ok(format!("{trials} checks: frozen branch exactly zero, nonzero without stop-gradient"))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn loss_value(build: impl FnOnce(&mut Graph) -> CoreResult<Var>) -> std::result::Result<f64, String> {
    let mut g = Graph::new();
    let v = build(&mut g).map_err(|e| e.to_string())?;
    Ok(g.value(v).item())
}

pub fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let trials = 200;
    let mut worst = 0.0f64;
    let mut note = |name: &str, got: f64, want: f64| -> std::result::Result<(), String> {
        worst = worst.max((got - want).abs());
        if close(got, want) {
            Ok(())
        } else {
            Err(format!("{name}: {got} vs oracle {want}"))
        }
    };
    for _ in 0..trials {
        let t = rng.random_range(5..=20);
        let c = rng.random_range(2..=4);
        let d = rng.random_range(2..=6);

        let feats = rows(&mut rng, t, d);
        let logits = rows(&mut rng, t, c);
        let rounds = rng.random_range(1..=3);
        let got = weighted_kmeans_refine(&mat(&feats), &mat(&logits), rounds).map_err(|e| e.to_string())?;
        let (want, centers) = oracles::weighted_kmeans(&feats, &logits, rounds);
        if got.labels != want {
            return Err(format!("weighted k-means labels {:?} vs oracle {want:?}", got.labels));
        }
        for (k, center) in centers.iter().enumerate() {
            if got.active[k] {
                for (x, y) in got.centers.row(k).iter().zip(center) {
                    note("k-means center", *x, *y)?;
                }
            }
        }

        let current = labels(&mut rng, t, c);
        let k = rng.random_range(1..t);
        let got = knn_refine(&mat(&feats), &current, k, c).map_err(|e| e.to_string())?;
        let want = oracles::knn(&feats, &current, k, c);
        if got != want {
            return Err(format!("knn labels {got:?} vs oracle {want:?}"));
        }

        let ns = rng.random_range(2..=12);
        let nt = rng.random_range(2..=12);
        let (src, tgt) = (rows(&mut rng, ns, d), rows(&mut rng, nt, d));
        let (ys, yt) = (labels(&mut rng, ns, c), labels(&mut rng, nt, c));
        let tau = rng.random_range(0.05..1.0);
        let got = loss_value(|g| {
            let (a, b) = (g.param(mat(&src)), g.param(mat(&tgt)));
            loss_s_con(g, a, b, &ys, &yt, tau)
        })?;
        note("L_s^con", got, oracles::contrastive(&tgt, &src, &yt, &ys, tau))?;
        let got = loss_value(|g| {
            let (a, b) = (g.param(mat(&src)), g.param(mat(&tgt)));
            loss_t_con(g, a, b, &ys, &yt, tau)
        })?;
        note("L_t^con", got, oracles::contrastive(&src, &tgt, &ys, &yt, tau))?;
        let logits_s = rows(&mut rng, ns, c);
        let got = loss_value(|g| {
            let l = g.param(mat(&logits_s));
            cross_entropy(g, l, &ys)
        })?;
        note("cross-entropy", got, oracles::cross_entropy(&logits_s, &ys))?;

        let widths: Vec<f64> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0.5..20.0)).collect();
        let got = loss_value(|g| {
            let (a, b) = (g.param(mat(&src)), g.param(mat(&tgt)));
            mmd_transfer(g, a, b, &Bandwidths::Fixed(widths.clone()), StopSide::Second)
        })?;
        note("mmd (fixed widths)", got, oracles::mmd(&src, &tgt, &widths))?;
        let multipliers = vec![0.5, 1.0, 2.0];
        let base = oracles::median_sq_distance(&src, &tgt);
        let median_widths: Vec<f64> = multipliers.iter().map(|m| m * base).collect();
        let got = loss_value(|g| {
            let (a, b) = (g.param(mat(&src)), g.param(mat(&tgt)));
            mmd_transfer(g, a, b, &Bandwidths::MedianHeuristic { multipliers }, StopSide::Second)
        })?;
        note("mmd (median widths)", got, oracles::mmd(&src, &tgt, &median_widths))?;

        let got = loss_value(|g| {
            let (a, b) = (g.param(mat(&src)), g.param(mat(&tgt)));
            mstn_center_transfer(g, a, &ys, b, &yt, StopSide::Second)
        })?;
        note("mstn", got, oracles::mstn(&src, &ys, &tgt, &yt))?;
    }
    Ok(format!(
        "{trials} random instances (T<=20, C<=4): refiner labels identical, worst value gap {worst:.1e}"
    ))
}

fn tiny_run_config(out: &std::path::Path) -> RunConfig {
    let mut config = RunConfig {
        seed: 9,
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    if let wintr_core::experiment::DataSource::Synthetic(spec) = &mut config.data {
        spec.samples_per_domain = 64;
    }
    config.model.embed_dim = 16;
    config.model.num_heads = 2;
    config.model.depth = 1;
    config.optimizer.batch_size = 16;
    config.stages.stage1_epochs = 2;
    config.stages.stage2_epochs = 2;
    config
}

pub fn determinism_and_io() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run(&tiny_run_config(out)).map_err(|e| e.to_string())?;
    }
    for name in [REPORT_FILE, SUMMARY_FILE] {
        let (x, y) = (std::fs::read(a.join(name)), std::fs::read(b.join(name)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => {}
            _ => return Err(format!("{name} differs between identical-seed runs")),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut models = 0;
    for depth in 1..=3 {
        let model = WinTrModel::new(ModelConfig { depth, ..ModelConfig::default() }, &mut rng).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("m{depth}.ckpt"));
        checkpoint::save(&model, &path).map_err(|e| e.to_string())?;
        let back = checkpoint::load(&path).map_err(|e| e.to_string())?;
        let exact = model.params.flat().iter().zip(back.params.flat()).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        });
        if !exact || model.config != back.config {
            return Err(format!("checkpoint round-trip changed the depth-{depth} model"));
        }
        models += 1;
    }

    let mut sets = 0;
    for seed in [0u64, 7] {
        let mut spec = SyntheticTaskSpec { seed, samples_per_domain: 40, ..SyntheticTaskSpec::default() };
        spec.balanced = seed == 0;
        let (source, target) = generate(&spec).map_err(|e| e.to_string())?;
        for set in [source, target] {
            let path = dir.path().join(format!("set{seed}_{sets}"));
            save_dataset(&set, &path).map_err(|e| e.to_string())?;
            let back = load_dataset(&path).map_err(|e| e.to_string())?;
            let exact = back.samples.len() == set.samples.len()
                && set.samples.iter().zip(&back.samples).all(|(x, y)| {
                    x.label == y.label
                        && x.id == y.id
                        && x.domain == y.domain
                        && x.image.iter().zip(&y.image).all(|(p, q)| p.to_bits() == q.to_bits())
                });
            if !exact {
                return Err(format!("dataset round-trip changed set {sets}"));
            }
            sets += 1;
        }
    }
    Ok(format!("report/summary bitwise equal; {models} checkpoints and {sets} datasets round-trip exactly"))
}
