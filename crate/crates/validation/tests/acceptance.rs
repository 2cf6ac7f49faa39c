//! Acceptance criteria 1 to 12. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stdout (bypassing the test harness capture) and then
//! asserts the same condition.

use std::sync::OnceLock;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uwkit_core::decoder::{DecoderConfig, MaskDecoder};
use uwkit_core::encoder::Role;
use uwkit_core::eupg::{ChannelAttention, PromptEmbedding, PromptHead};
use uwkit_core::gradcheck::{check_vars, worst};
use uwkit_core::graph::{build_graph_from_nodes, mask_nodes};
use uwkit_core::metrics::ap::{compute_ap, iou_thresholds, GroundTruth, IouType, Prediction, AREA_ALL};
use uwkit_core::metrics::{dataset_stats, evaluate};
use uwkit_core::mgukd::{gat_attention, mgukd_loss, Gat, GatConfig, GatHead};
use uwkit_core::nn::to_vec_f64;
use uwkit_core::synth::{degrade_value, synthetic_corpus};
use uwkit_core::{EncoderConfig, FeatureMap, Mask, ParamStore, SceneConfig, VitEncoder};

use uwkit_cli::checkpoint::Checkpoint;
use uwkit_cli::config::RunConfig;
use uwkit_cli::data::{load_split, Split};
use uwkit_cli::train::{evaluate_model, moving_average, run, StepLog, Trainer};
use uwkit_core::{DistillMode, EvalResult};

use uwkit_validation::probe::tap_probe_mse;
use uwkit_validation::report;

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_image_formation_golden_values() {
    let (bd, bb, veil) = (0.4, 0.2, 0.3);
    let mut worst_identity: f64 = 0.0;
    for j in [0.0, 0.1, 0.25, 0.5, 0.75, 1.0] {
        worst_identity = worst_identity.max((degrade_value(j, 0.0, bd, bb, veil) - j).abs());
    }
    let far = (degrade_value(0.8, 200.0, bd, bb, veil) - veil).abs();
    // 0.6·e^{-1} + 0.3·(1 - e^{-0.5}), evaluated independently
    let golden = 0.338_768_466_789_075_35;
    let mid = (degrade_value(0.6, 2.5, 0.4, 0.2, 0.3) - golden).abs();
    let pass = worst_identity <= 1e-12 && far <= 1e-6 && mid <= 1e-6;
    report(
        1,
        pass,
        format!("z=0 max err {worst_identity:.1e} (tol 1e-12); z=200 err {far:.1e} (tol 1e-6); mid err {mid:.1e} (tol 1e-6)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn oracle_cosine(values: &[f64], n: usize, c: usize) -> Vec<f64> {
    let norm = |i: usize| values[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (ni, nj) = (norm(i), norm(j));
            s[i * n + j] = if ni == 0.0 || nj == 0.0 {
                0.0
            } else if i == j {
                1.0
            } else {
                let dot: f64 = (0..c).map(|t| values[i * c + t] * values[j * c + t]).sum();
                (dot / (ni * nj)).clamp(-1.0, 1.0)
            };
        }
    }
    s
}

/// `j` is a neighbor of `i` when fewer than `k` nodes are strictly more
/// similar to `i` than `j` is.
fn oracle_neighbors(sim: &[f64], n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| (0..n).filter(|&l| sim[i * n + l] > sim[i * n + j]).count() < k)
                .collect()
        })
        .collect()
}

fn graph_neighbors(values: &[f64], n: usize, c: usize, k: usize) -> Vec<Vec<usize>> {
    let t = Tensor::from_vec(values.to_vec(), (n, c), &Device::Cpu).unwrap();
    build_graph_from_nodes(t, n, 1, k).unwrap().neighbors
}

#[test]
fn criterion_02_top_k_with_ties_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ks = [1, 2, 11];
    let mut mismatches = 0;
    let mut tied_rows = 0;
    let mut scale_failures = 0;
    for g in 0..100 {
        let n = rng.random_range(1..=64);
        let c = 3;
        let k = ks[g % 3];
        // Entries in {-1, 0, 1} make exact ties and zero nodes common.
        let values: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1i32..=1) as f64).collect();
        let got = graph_neighbors(&values, n, c, k);
        let want = oracle_neighbors(&oracle_cosine(&values, n, c), n, k.min(n));
        if got != want {
            mismatches += 1;
        }
        tied_rows += got.iter().filter(|nb| nb.len() > k.min(n)).count();

        // Positive power-of-two rescaling of every node leaves the graph and
        // every similarity bit-identical.
        let scaled: Vec<f64> = values
            .iter()
            .enumerate()
            .map(|(i, v)| v * f64::powi(2.0, (i / c % 7) as i32 - 3))
            .collect();
        if graph_neighbors(&scaled, n, c, k) != got
            || uwkit_core::graph::cosine_similarity_matrix(&scaled, n, c)
                != uwkit_core::graph::cosine_similarity_matrix(&values, n, c)
        {
            scale_failures += 1;
        }
        // Arbitrary positive scales on tie-free features keep the neighbor sets.
        let cont: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cont_scaled: Vec<f64> = cont.iter().enumerate().map(|(i, v)| v * (0.3 + (i / c) as f64 * 0.77)).collect();
        if graph_neighbors(&cont, n, c, k) != graph_neighbors(&cont_scaled, n, c, k) {
            scale_failures += 1;
        }
    }
    let pass = mismatches == 0 && scale_failures == 0 && tied_rows > 0;
    report(
        2,
        pass,
        format!("100 graphs: {mismatches} oracle mismatches, {scale_failures} scale-invariance failures, {tied_rows} rows with ties exercised"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_attention_weights_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum: f64 = 0.0;
    let mut nodes_checked = 0;
    let mut graph_id = 0;
    while nodes_checked < 1000 {
        let (h, w, c) = (5, 5, 6);
        let x = Tensor::randn(0f64, 1.0, (h * w, c), &Device::Cpu).unwrap();
        let graph = mask_nodes(&build_graph_from_nodes(x, h, w, 4).unwrap(), 0.3, graph_id).unwrap();
        let ps = ParamStore::new(graph_id, DType::F64);
        let head = GatHead::new(&ps, c, 4, 0.2).unwrap();
        for i in 0..h * w {
            let a = gat_attention(&graph, i, &head).unwrap();
            worst_sum = worst_sum.max((a.iter().sum::<f64>() - 1.0).abs());
            nodes_checked += 1;
        }
        graph_id += 1;
        let _ = rng.random::<u8>();
    }
    // k = 1 on distinct nodes: each node's only neighbor is itself.
    let x = Tensor::randn(0f64, 1.0, (9, 4), &Device::Cpu).unwrap();
    let graph = build_graph_from_nodes(x, 3, 3, 1).unwrap();
    let head = GatHead::new(&ParamStore::new(0, DType::F64), 4, 3, 0.2).unwrap();
    let singleton: Vec<f64> = (0..9).map(|i| gat_attention(&graph, i, &head).unwrap()).map(|a| a[0]).collect();
    let singles = graph.neighbors.iter().all(|nb| nb.len() == 1);
    let pass = worst_sum <= 1e-6 && singles && singleton.iter().all(|&v| v == 1.0);
    report(
        3,
        pass,
        format!("{nodes_checked} nodes: max |sum - 1| {worst_sum:.1e} (tol 1e-6); singleton weights exactly 1: {}", singleton.iter().all(|&v| v == 1.0)),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

const GRAD_TOL: f64 = 1e-4;
/// Near the optimal central-difference step for f64 (about 6e-6). Smaller
/// steps let round-off dominate on entries whose true gradient is exactly
/// zero, such as attention key biases under softmax shift invariance.
const FD_EPS: f64 = 1e-5;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn gat_gradients() -> f64 {
    let ps = ParamStore::new(11, DType::F64);
    let cfg = GatConfig {
        hidden_per_head: 3,
        heads: 2,
        ..GatConfig::default()
    };
    let gat = Gat::new(&ps, &cfg, 4, 5).unwrap();
    let graph = mask_nodes(&build_graph_from_nodes(randn(&[9, 4], 1), 3, 3, 3).unwrap(), 0.4, 5).unwrap();
    let w = randn(&[9, 5], 2);
    let loss = || -> uwkit_core::Result<Tensor> { Ok((gat.reconstruct(&graph)? * &w)?.sum_all()?) };
    worst(&check_vars(&ps.vars(), &loss, FD_EPS, 24).unwrap())
}

fn channel_attention_gradients() -> f64 {
    let ps = ParamStore::new(12, DType::F64);
    let ca = ChannelAttention::new(&ps, 4, 2, true).unwrap();
    let f = FeatureMap::new(randn(&[2, 6, 4], 3), 2, 3).unwrap();
    let w = randn(&[2, 6, 4], 4);
    let loss = || -> uwkit_core::Result<Tensor> { Ok((ca.forward(&f)?.tokens * &w)?.sum_all()?) };
    worst(&check_vars(&ps.vars(), &loss, FD_EPS, 24).unwrap())
}

fn prompt_head_gradients() -> f64 {
    let ps = ParamStore::new(13, DType::F64);
    let head = PromptHead::new(&ps, 3, 4, 2, 5, 2, 4, 2).unwrap();
    let roi = randn(&[2, 4, 4, 3], 5);
    let w = randn(&[2, 2, 4], 6);
    let loss = || -> uwkit_core::Result<Tensor> {
        let p = head.forward(&roi)?;
        Ok(((p.tokens * &w)?.sum_all()? + p.class_logits.sqr()?.sum_all()?)?)
    };
    worst(&check_vars(&ps.vars(), &loss, FD_EPS, 24).unwrap())
}

fn decoder_gradients() -> f64 {
    let ps = ParamStore::new(14, DType::F64);
    let cfg = DecoderConfig {
        width: 8,
        heads: 2,
        blocks: 1,
        mlp_dim: 8,
    };
    let dec = MaskDecoder::new(&ps, &cfg, 4).unwrap();
    let f = FeatureMap::new(randn(&[1, 4, 4], 7), 2, 2).unwrap();
    let p = PromptEmbedding {
        tokens: randn(&[2, 2, 8], 8),
        class_logits: Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap(),
    };
    let w = randn(&[2, 8, 8], 9);
    let loss = || -> uwkit_core::Result<Tensor> {
        let out = dec.decode(&f, 0, &p)?;
        Ok(((out.mask_logits * &w)?.sum_all()? + out.iou.sum_all()?)?)
    };
    worst(&check_vars(&ps.vars(), &loss, FD_EPS, 12).unwrap())
}

fn encoder_gradients() -> f64 {
    let ps = ParamStore::new(15, DType::F64);
    let cfg = EncoderConfig {
        image_size: 8,
        patch_size: 4,
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 2,
        role: Role::Student,
    };
    let enc = VitEncoder::new(&ps, &cfg).unwrap();
    let images = randn(&[1, 3, 8, 8], 10);
    let w = randn(&[1, 4, 8], 11);
    let loss = || -> uwkit_core::Result<Tensor> {
        let taps = enc.encode(&images)?;
        let mut total = Tensor::zeros((), DType::F64, &Device::Cpu)?;
        for l in 1..=taps.depth() {
            total = (total + (&taps.layer(l).unwrap().tokens * &w)?.sum_all()?)?;
        }
        Ok(total)
    };
    worst(&check_vars(&ps.vars(), &loss, FD_EPS, 12).unwrap())
}

#[test]
fn criterion_04_gradient_suite() {
    let results = [
        ("GAT", gat_gradients()),
        ("channel attention", channel_attention_gradients()),
        ("prompt head", prompt_head_gradients()),
        ("decoder", decoder_gradients()),
        ("encoder", encoder_gradients()),
    ];
    let pass = results.iter().all(|(_, e)| *e < GRAD_TOL);
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report(4, pass, format!("max rel err (tol {GRAD_TOL:.0e}): {}", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_distillation_loss_identities() {
    let teacher: Vec<Tensor> = (0..4).map(|i| randn(&[16, 8], 20 + i)).collect();
    let (zero, zero_report) = mgukd_loss(&teacher, &teacher, 1.0).unwrap();
    let zero_ok = to_vec_f64(&zero).unwrap()[0] == 0.0 && zero_report.per_layer.iter().all(|v| *v == 0.0);

    let deltas = [0.5, 0.125, 1.5, 0.01];
    let shifted: Vec<Tensor> = teacher.iter().zip(deltas).map(|(t, d)| (t + d).unwrap()).collect();
    let (_, r) = mgukd_loss(&teacher, &shifted, 1.0).unwrap();
    let delta_err = r
        .per_layer
        .iter()
        .zip(deltas)
        .map(|(v, d)| (v - d * d).abs())
        .fold(0.0, f64::max);
    let sum_exact = r.total == r.per_layer.iter().sum::<f64>();
    let pass = zero_ok && delta_err <= 1e-9 && sum_exact;
    report(
        5,
        pass,
        format!("zero on identical: {zero_ok}; delta offset max err {delta_err:.1e} (tol 1e-9); total == sum exactly: {sum_exact}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_masking_contract() {
    let x = randn(&[196, 8], 30);
    let g = build_graph_from_nodes(x, 14, 14, 11).unwrap();
    let a = mask_nodes(&g, 0.65, 99).unwrap();
    let b = mask_nodes(&g, 0.65, 99).unwrap();
    let bytes = |t: &Tensor| -> Vec<u8> { to_vec_f64(t).unwrap().iter().flat_map(|v| v.to_le_bytes()).collect() };
    let same = a.masked == b.masked && bytes(&a.masked_nodes().unwrap()) == bytes(&b.masked_nodes().unwrap());
    let other = mask_nodes(&g, 0.65, 100).unwrap();
    let pass = a.num_masked() == 127 && same && other.masked != a.masked;
    report(
        6,
        pass,
        format!("masked {} of 196 (want 127); same seed byte-identical: {same}; other seed differs: {}", a.num_masked(), other.masked != a.masked),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_loss_identities_on_every_step() {
    let logs = &students().distilled[0].logs;
    let mut additive = 0;
    let mut task_sum = 0;
    let mut worst_sub: f64 = 0.0;
    for l in logs {
        let r = &l.losses;
        if r.l_total != r.l_task + r.alpha * r.l_mgukd || l.l_distill_weighted != r.alpha * r.l_mgukd {
            additive += 1;
        }
        if r.l_task != r.l_cls + r.l_rpn + r.l_seg || r.l_mgukd != r.l_mgukd_per_layer.iter().sum::<f64>() {
            task_sum += 1;
        }
        // The rearranged form is exact up to one rounding of l_total.
        let ulp = f64::EPSILON * r.l_total.abs();
        worst_sub = worst_sub.max(((r.l_total - r.l_task) - r.alpha * r.l_mgukd).abs() / ulp);
    }
    let pass = logs.len() >= 300 && additive == 0 && task_sum == 0 && worst_sub <= 1.0 && logs.iter().all(|l| l.losses.l_mgukd > 0.0);
    report(
        7,
        pass,
        format!(
            "{} distillation steps: additive identity violations {additive}, task sum violations {task_sum}, subtraction form worst {worst_sub:.2} ulp (tol 1 ulp of l_total)",
            logs.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

fn rect(size: usize, x: usize, y: usize, w: usize, h: usize) -> Mask {
    Mask::from_fn(size, size, |yy, xx| (y..y + h).contains(&yy) && (x..x + w).contains(&xx))
}

fn oracle_mask_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut uni) = (0u64, 0u64);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(y, x), b.get(y, x));
            inter += u64::from(p && q);
            uni += u64::from(p || q);
        }
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

/// Greedy matching in descending score order, each detection taking the
/// best free ground truth at or above the threshold (later ground truth wins
/// ties), then 101-point interpolated precision, averaged over categories
/// and thresholds.
fn oracle_map(preds: &[Prediction], gts: &[GroundTruth]) -> f64 {
    let mut cats: Vec<usize> = gts.iter().map(|g| g.category).collect();
    cats.sort_unstable();
    cats.dedup();
    let mut images: Vec<u64> = gts.iter().map(|g| g.image_id).chain(preds.iter().map(|p| p.image_id)).collect();
    images.sort_unstable();
    images.dedup();
    let mut values = Vec::new();
    for &cat in &cats {
        for &t in &iou_thresholds() {
            let mut outcomes: Vec<(f64, bool)> = Vec::new();
            let mut num_gt = 0;
            for &img in &images {
                let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.image_id == img && g.category == cat).collect();
                let mut p: Vec<&Prediction> = preds.iter().filter(|p| p.image_id == img && p.category == cat).collect();
                p.sort_by(|a, b| b.score.total_cmp(&a.score));
                num_gt += g.len();
                let mut taken = vec![false; g.len()];
                for d in p {
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, gt) in g.iter().enumerate() {
                        let iou = oracle_mask_iou(d.mask.as_ref().unwrap(), gt.mask.as_ref().unwrap());
                        if taken[gi] || iou < t.min(1.0 - 1e-10) {
                            continue;
                        }
                        if best.map_or(true, |(_, b)| iou >= b) {
                            best = Some((gi, iou));
                        }
                    }
                    if let Some((gi, _)) = best {
                        taken[gi] = true;
                    }
                    outcomes.push((d.score, best.is_some()));
                }
            }
            outcomes.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut pr = Vec::new();
            let mut tp = 0;
            for (i, o) in outcomes.iter().enumerate() {
                tp += usize::from(o.1);
                pr.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
            }
            let mut sum = 0.0;
            for r in 0..=100 {
                let r = r as f64 * 0.01;
                let best = pr.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))));
                sum += best.unwrap_or(0.0);
            }
            values.push(sum / 101.0);
        }
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn criterion_08_ap_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let size = 16;
    let mut worst_diff: f64 = 0.0;
    let mut scenes = 0;
    while scenes < 50 {
        let n_img = rng.random_range(1..=2u64);
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for img in 1..=n_img {
            for _ in 0..rng.random_range(1..=3) {
                let (x, y) = (rng.random_range(0..10), rng.random_range(0..10));
                let (w, h) = (rng.random_range(2..=6), rng.random_range(2..=6));
                let cat = rng.random_range(0..2);
                let m = rect(size, x, y, w, h);
                gts.push(GroundTruth::from_mask(img, cat, m.clone()).unwrap());
                if rng.random_bool(0.8) {
                    // A jittered copy of the ground truth.
                    let j = rect(size, (x + rng.random_range(0..2)).min(14), y, w.max(1), (h + rng.random_range(0..2)).min(16 - y));
                    preds.push(Prediction { image_id: img, category: cat, score: rng.random(), bbox: j.bbox().unwrap(), mask: Some(j) });
                }
            }
            for _ in 0..rng.random_range(0..=2) {
                let m = rect(size, rng.random_range(0..12), rng.random_range(0..12), rng.random_range(2..=4), rng.random_range(2..=4));
                preds.push(Prediction { image_id: img, category: rng.random_range(0..2), score: rng.random(), bbox: m.bbox().unwrap(), mask: Some(m) });
            }
        }
        let got = compute_ap(&preds, &gts, &iou_thresholds(), AREA_ALL, IouType::Segm).unwrap();
        let want = oracle_map(&preds, &gts);
        worst_diff = worst_diff.max((got - want).abs());
        scenes += 1;
    }

    // Perfect predictions.
    let gts: Vec<GroundTruth> = (0..4).map(|i| GroundTruth::from_mask(1 + i % 2, (i % 2) as usize, rect(size, 2 * i as usize, 3, 4, 5)).unwrap()).collect();
    let perfect: Vec<Prediction> = gts
        .iter()
        .map(|g| Prediction { image_id: g.image_id, category: g.category, score: 0.9, bbox: g.bbox, mask: g.mask.clone() })
        .collect();
    let r = evaluate(&perfect, &gts).unwrap();
    let perfect_ok = [r.map_b, r.ap50_b, r.ap75_b, r.map_s, r.ap50_s, r.ap75_s].iter().all(|v| *v == 1.0);

    // Hand-worked: one 10x10 ground truth; predictions at IoU 0.9 (score 0.9)
    // and IoU 0.2 (score 0.8). AP50 = 1; AP at 0.95 = 0; over the ten
    // thresholds only 0.5..0.9 (nine of ten) are met, so mAP = 0.9.
    let g = GroundTruth::from_mask(1, 0, rect(size, 0, 0, 10, 10)).unwrap();
    let p1 = rect(size, 0, 0, 9, 10);
    let p2 = rect(size, 0, 0, 2, 10);
    let preds = [
        Prediction { image_id: 1, category: 0, score: 0.9, bbox: p1.bbox().unwrap(), mask: Some(p1) },
        Prediction { image_id: 1, category: 0, score: 0.8, bbox: p2.bbox().unwrap(), mask: Some(p2) },
    ];
    let gts = [g];
    let ap50 = compute_ap(&preds, &gts, &[0.5], AREA_ALL, IouType::Segm).unwrap();
    let ap95 = compute_ap(&preds, &gts, &[0.95], AREA_ALL, IouType::Segm).unwrap();
    let map = compute_ap(&preds, &gts, &iou_thresholds(), AREA_ALL, IouType::Segm).unwrap();
    let hand_err = (ap50 - 1.0).abs().max(ap95.abs()).max((map - 0.9).abs());

    let pass = worst_diff == 0.0 && perfect_ok && hand_err <= 1e-6;
    report(
        8,
        pass,
        format!("50 scenes: max |AP - oracle| {worst_diff:.1e} (exact); perfect = 1.0: {perfect_ok}; hand-worked err {hand_err:.1e} (tol 1e-6)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_dataset_statistics() {
    // Large radii so all three buckets are populated on 256-pixel images.
    let scene = SceneConfig {
        image_size: 256,
        min_radius: 3.0,
        max_radius: 70.0,
        ..SceneConfig::default()
    };
    let corpus = synthetic_corpus(9, 40, &scene).unwrap();
    let (mut small, mut medium, mut large) = (0, 0, 0);
    for img in &corpus {
        for inst in &img.instances {
            let mut area = 0u64;
            for y in 0..inst.mask.height() {
                for x in 0..inst.mask.width() {
                    area += u64::from(inst.mask.get(y, x));
                }
            }
            if area < 32 * 32 {
                small += 1;
            } else if area < 96 * 96 {
                medium += 1;
            } else {
                large += 1;
            }
        }
    }
    let stats = dataset_stats(&corpus, scene.num_classes);
    let b = stats.size_buckets;
    let buckets_ok = (b.small, b.medium, b.large) == (small, medium, large) && small > 0 && medium > 0 && large > 0;

    let default_corpus = synthetic_corpus(90, 200, &SceneConfig::default()).unwrap();
    let m = dataset_stats(&default_corpus, 4).channel_means;
    let red_ok = m[0] < m[1] && m[0] < m[2];

    let pass = buckets_ok && red_ok;
    report(
        9,
        pass,
        format!(
            "buckets small/medium/large {}/{}/{} vs oracle {small}/{medium}/{large}; 200-scene means R {:.3} G {:.3} B {:.3}; real-corpus bucket counts: skipped, corpus not available locally",
            b.small, b.medium, b.large, m[0], m[1], m[2]
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- shared training runs

/// Learning rate of the comparative runs. The command-line default keeps
/// the published 2e-4, which leaves masks unlearned within 320 steps.
const PROTOCOL_LR: f64 = 1e-3;
/// Distillation weight of the comparative runs: about 1 / ℒ_MG-UKD at step 0
/// against the protocol teacher (46.6), so the weighted term starts near 1.
const PROTOCOL_ALPHA: f64 = 0.02;
const SEEDS: [u64; 3] = [0, 1, 2];
/// Images of the training corpus scored for the train-subset mAP.
const TRAIN_SUBSET: usize = 32;

fn protocol_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.optim.lr = PROTOCOL_LR;
    cfg
}

struct TeacherRun {
    logs: Vec<StepLog>,
    untrained: EvalResult,
    trained: EvalResult,
    seconds: f64,
    checkpoint: Checkpoint,
}

fn teacher() -> &'static TeacherRun {
    static RUN: OnceLock<TeacherRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let cfg = protocol_config();
        let data = load_split(&cfg, Split::Train).unwrap();
        let subset = &data[..TRAIN_SUBSET];
        let mut t = Trainer::teacher(&cfg).unwrap();
        let untrained = evaluate_model(t.model(), subset, cfg.eval.batch_size).unwrap();
        let total = cfg.train.total_steps(data.len());
        let logs = run(&mut t, &data, total, None, &mut std::io::sink()).unwrap();
        let trained = evaluate_model(t.model(), subset, cfg.eval.batch_size).unwrap();
        TeacherRun {
            logs,
            untrained,
            trained,
            seconds: start.elapsed().as_secs_f64(),
            checkpoint: t.checkpoint().unwrap(),
        }
    })
}

struct StudentRun {
    map_s: f64,
    /// Held-out probe MSE averaged over tap layers.
    probe: f64,
    logs: Vec<StepLog>,
}

struct Students {
    distilled: Vec<StudentRun>,
    /// α = 0: identical to task-only training.
    control: Vec<StudentRun>,
    plain_mse: Vec<StudentRun>,
    /// α = 0 with the channel-attention gate forced to 1.
    no_channel_attention: Vec<StudentRun>,
}

fn train_student(cfg: &RunConfig, teacher: &Checkpoint) -> StudentRun {
    let data = load_split(cfg, Split::Train).unwrap();
    let hold = load_split(cfg, Split::Holdout).unwrap();
    let mut s = Trainer::student(cfg, teacher).unwrap();
    let logs = run(&mut s, &data, cfg.train.total_steps(data.len()), None, &mut std::io::sink()).unwrap();
    let map_s = evaluate_model(s.model(), &hold, cfg.eval.batch_size).unwrap().map_s;
    let per_layer = tap_probe_mse(
        &s.model().encoder,
        s.teacher_encoder().unwrap(),
        &cfg.distill.tap_layers,
        &data,
        &hold,
        cfg.eval.batch_size,
        cfg.train.precision.dtype(),
    )
    .unwrap();
    StudentRun {
        map_s,
        probe: per_layer.iter().sum::<f64>() / per_layer.len() as f64,
        logs,
    }
}

fn students() -> &'static Students {
    static RUNS: OnceLock<Students> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t = &teacher().checkpoint;
        let variant = |alpha: f64, mode: DistillMode, ca: bool| -> Vec<StudentRun> {
            SEEDS
                .iter()
                .map(|&seed| {
                    let mut cfg = protocol_config();
                    cfg.seed = seed;
                    cfg.distill.alpha = alpha;
                    cfg.distill.mode = mode;
                    cfg.model.eupg.channel_attention = ca;
                    train_student(&cfg, t)
                })
                .collect()
        };
        Students {
            distilled: variant(PROTOCOL_ALPHA, DistillMode::MgUkd, true),
            control: variant(0.0, DistillMode::MgUkd, true),
            plain_mse: variant(PROTOCOL_ALPHA, DistillMode::PlainMse, true),
            no_channel_attention: variant(0.0, DistillMode::MgUkd, false),
        }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn maps(runs: &[StudentRun]) -> Vec<f64> {
    runs.iter().map(|r| r.map_s).collect()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_teacher_training_smoke() {
    let t = teacher();
    let early = moving_average(&t.logs, 1, 10);
    let late = moving_average(&t.logs, 291, 300);
    let drop = 1.0 - late / early;
    let pass = t.logs.len() >= 300 && drop >= 0.5 && t.trained.map_s > t.untrained.map_s && t.seconds < 600.0;
    report(
        10,
        pass,
        format!(
            "l_task MA10 {early:.4} -> MA300 {late:.4} (drop {:.1}%, need >= 50%); train-subset mAP^s {:.4} vs untrained {:.4}; {:.0} s (limit 600 s)",
            100.0 * drop,
            t.trained.map_s,
            t.untrained.map_s,
            t.seconds
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_distillation_benefit() {
    let s = students();
    let (d, c, p) = (maps(&s.distilled), maps(&s.control), maps(&s.plain_mse));
    let probe = |r: &[StudentRun]| median(r.iter().map(|x| x.probe).collect());
    let (pd, pc, pp) = (probe(&s.distilled), probe(&s.control), probe(&s.plain_mse));
    let map_ok = median(d.clone()) >= median(c.clone());
    let probe_ok = pd < pc;
    let pass = map_ok && probe_ok;
    report(
        11,
        pass,
        format!(
            "held-out mAP^s median distilled {:.4} [{}] vs alpha=0 {:.4} [{}]; probe MSE median {pd:.4} vs {pc:.4}; not gated: plain-MSE mAP^s {:.4} [{}], probe {pp:.4}",
            median(d.clone()),
            fmt(&d),
            median(c.clone()),
            fmt(&c),
            median(p.clone()),
            fmt(&p)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 12

/// Seed-to-seed spread (max - min) of the full model's held-out mAP^s in
/// the first verified run: 0.0282 - 0.0101.
const NOISE_BAND: f64 = 0.0182;

#[test]
fn criterion_12_channel_attention_ablation() {
    let s = students();
    let (full, ablated) = (maps(&s.control), maps(&s.no_channel_attention));
    let gain = median(ablated.clone()) - median(full.clone());
    let spread = full.iter().cloned().fold(f64::MIN, f64::max) - full.iter().cloned().fold(f64::MAX, f64::min);
    let pass = gain <= NOISE_BAND;
    report(
        12,
        pass,
        format!(
            "median mAP^s without gate {:.4} [{}] vs full {:.4} [{}]; removal gain {gain:+.4} (band {NOISE_BAND:.4}); this run's seed spread {spread:.4}",
            median(ablated.clone()),
            fmt(&ablated),
            median(full.clone()),
            fmt(&full)
        ),
    );
    assert!(pass);
}
