//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit when any
//! criterion fails. Every oracle here is written independently of the code
//! under test.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix3};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use retinareg::dataset::{load_annotations, Class};
use retinareg::features::{ImageBuffer, Modality};
use retinareg::geometry::{corner_transfer_error, estimate_homography_dlt};
use retinareg::grid::Grid2;
use retinareg::keypoints::{nms, upsample_bicubic};
use retinareg::losses::{
    bce_detector_loss, hard_negative_mining, multitask_loss, quadruplet_loss, DescriptorBatch,
    LogitBatch, LossConfig, MinedNegatives, ToyEmbedder,
};
use retinareg::matching::{
    detect_and_describe, ransac_homography, RansacConfig, RegistrationStatus,
};
use retinareg::metrics::{
    euclidean_errors, evaluate_dataset, matching_inlier_ratio, repeatability, success_rate_mae,
    success_rate_me, Aggregate, ControlPointErrors, PairEvaluation, Thresholds,
};
use retinareg::{Correspondence, Homography, Point2};
use retinareg_cli::extract::extract_image;
use retinareg_cli::{
    cmd_evaluate, cmd_register, cmd_synth, cmd_train_toy, Manifest, PipelineConfig, RegisterArgs,
    SynthDatasetConfig, TrainToyConfig,
};

type Outcome = Result<String, String>;
type Criterion<'a> = Box<dyn FnOnce() -> Outcome + 'a>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

// ---------------------------------------------------------------- geometry

fn random_homography(rng: &mut ChaCha8Rng, size: f64) -> Homography {
    let theta = rng.random_range(-0.5..0.5f64);
    let s = rng.random_range(0.8..1.2);
    let (c, si) = (theta.cos() * s, theta.sin() * s);
    let shear = rng.random_range(-0.1..0.1);
    let m = Matrix3::new(
        c,
        -si + shear,
        rng.random_range(-0.1..0.1) * size,
        si,
        c,
        rng.random_range(-0.1..0.1) * size,
        rng.random_range(-5e-4..5e-4),
        rng.random_range(-5e-4..5e-4),
        1.0,
    );
    Homography::from_matrix(m).expect("well-conditioned draw")
}

fn apply(h: &Homography, p: Point2) -> Point2 {
    let m = h.matrix();
    let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
    Point2::new(
        (m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)]) / w,
        (m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)]) / w,
    )
}

fn dlt_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let size = 512.0;
    let t = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let h = random_homography(&mut rng, size);
        let pairs: Vec<Correspondence> = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
            .iter()
            .map(|&(qx, qy)| {
                let p = Point2::new(
                    (qx + rng.random_range(0.1..0.9)) * size / 2.0,
                    (qy + rng.random_range(0.1..0.9)) * size / 2.0,
                );
                Correspondence::new(p, apply(&h, p))
            })
            .collect();
        let est = estimate_homography_dlt(&pairs).map_err(|e| e.to_string())?;
        worst = worst.max(corner_transfer_error(&est, &h, size, size).map_err(|e| e.to_string())?);
    }
    let el = t.elapsed();
    check(
        worst < 1e-6 && within(el, 1.0),
        format!("max corner error {worst:.2e} px over 1000 draws in {el:.2?}"),
    )
}

fn ransac_robustness() -> Outcome {
    let size = 512.0;
    let t = Instant::now();
    let mut good = 0;
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let h = random_homography(&mut rng, size);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut pairs = Vec::with_capacity(200);
        for k in 0..200 {
            let p = Point2::new(rng.random_range(0.0..size), rng.random_range(0.0..size));
            let q = if k < 100 {
                let q = apply(&h, p);
                Point2::new(q.x + noise.sample(&mut rng), q.y + noise.sample(&mut rng))
            } else {
                Point2::new(rng.random_range(0.0..size), rng.random_range(0.0..size))
            };
            pairs.push(Correspondence::new(p, q));
        }
        pairs.shuffle(&mut rng);
        let cfg = RansacConfig {
            seed,
            ..RansacConfig::default()
        };
        let err = match ransac_homography(&pairs, &cfg) {
            Ok((est, _)) => corner_transfer_error(&est, &h, size, size).unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        };
        worst = worst.max(err);
        if err <= 1.0 {
            good += 1;
        }
    }
    let el = t.elapsed();
    check(
        good >= 99 && within(el, 10.0),
        format!("{good}/100 runs within 1 px (worst {worst:.3} px) in {el:.2?}"),
    )
}

// ---------------------------------------------------------------- gradients

const REL_TOL: f64 = 1e-4;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL_TOL * analytic.abs().max(numeric.abs()) + 1e-9
}

fn central(f: &mut dyn FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<Class> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                Class::Vessel
            } else {
                Class::Background
            }
        })
        .collect()
}

/// Distances and hinge values recomputed from scratch; a point is a kink
/// when any hinge or distance is within `gap` of zero.
fn quadruplet_is_smooth(b: &DescriptorBatch, m: &MinedNegatives, margin: f64, gap: f64) -> bool {
    let d = |x: &DMatrix<f64>, i: usize, y: &DMatrix<f64>, j: usize| {
        (0..x.ncols())
            .map(|k| (x[(i, k)] - y[(j, k)]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    (0..b.len()).all(|i| {
        let ap = d(&b.anchors, i, &b.positives, i);
        let an = d(&b.anchors, i, &b.positives, m.for_anchor[i]);
        let pn = d(&b.positives, i, &b.anchors, m.for_positive[i]);
        [ap, an, pn].iter().all(|v| *v > gap)
            && (margin + ap - an).abs() > gap
            && (margin + ap - pn).abs() > gap
    })
}

fn check_matrix_grad(
    rng: &mut ChaCha8Rng,
    base: &DescriptorBatch,
    grad_a: &DMatrix<f64>,
    grad_p: &DMatrix<f64>,
    loss: &mut dyn FnMut(&DescriptorBatch) -> Option<f64>,
    worst: &mut f64,
) -> Option<bool> {
    let h = 1e-6;
    let mut all = true;
    for which in 0..2 {
        for _ in 0..4 {
            let (i, k) = (
                rng.random_range(0..base.len()),
                rng.random_range(0..base.anchors.ncols()),
            );
            let mut eval = |delta: f64| {
                let mut b = base.clone();
                if which == 0 {
                    b.anchors[(i, k)] += delta;
                } else {
                    b.positives[(i, k)] += delta;
                }
                loss(&b)
            };
            let (plus, minus) = (eval(h)?, eval(-h)?);
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = if which == 0 {
                grad_a[(i, k)]
            } else {
                grad_p[(i, k)]
            };
            *worst = worst
                .max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12));
            all &= close(analytic, numeric);
        }
    }
    Some(all)
}

#[allow(clippy::needless_range_loop)]
fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut lines = Vec::new();
    let mut pass = true;

    // Binary cross-entropy on detector logits.
    let (mut ok, mut worst) = (0, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(1..12);
        let batch = LogitBatch {
            logits: (0..n)
                .map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)])
                .collect(),
            labels: random_labels(&mut rng, n),
        };
        let (_, grad) = bce_detector_loss(&batch);
        let mut all = true;
        for i in 0..n {
            for c in 0..2 {
                let numeric = central(
                    &mut |d| {
                        let mut b = batch.clone();
                        b.logits[i][c] += d;
                        bce_detector_loss(&b).0
                    },
                    1e-6,
                );
                worst = worst.max((grad[i][c] - numeric).abs() / grad[i][c].abs().max(1e-12));
                all &= close(grad[i][c], numeric);
            }
        }
        ok += all as usize;
    }
    pass &= ok == 50;
    lines.push(format!("bce {ok}/50 (worst rel {worst:.1e})"));

    // Quadruplet loss with mined negatives held fixed.
    let (mut ok, mut worst, mut drawn) = (0, 0.0f64, 0);
    while drawn < 50 {
        let (b, d) = (rng.random_range(2..10), rng.random_range(2..8));
        let batch =
            DescriptorBatch::new(random_matrix(&mut rng, b, d), random_matrix(&mut rng, b, d))
                .unwrap();
        let mined = hard_negative_mining(&batch).unwrap();
        let margin = rng.random_range(0.2..2.0);
        if !quadruplet_is_smooth(&batch, &mined, margin, 1e-3) {
            continue;
        }
        drawn += 1;
        let out = quadruplet_loss(&batch, &mined, margin).unwrap();
        let mut loss =
            |bb: &DescriptorBatch| Some(quadruplet_loss(bb, &mined, margin).unwrap().loss);
        let all = check_matrix_grad(
            &mut rng,
            &batch,
            &out.grad_anchors,
            &out.grad_positives,
            &mut loss,
            &mut worst,
        );
        ok += (all == Some(true)) as usize;
    }
    pass &= ok == 50;
    lines.push(format!("quadruplet {ok}/50 (worst rel {worst:.1e})"));

    // Multitask loss, mining recomputed at every evaluation.
    let (mut ok, mut worst, mut drawn) = (0, 0.0f64, 0);
    while drawn < 50 {
        let (b, d, n) = (
            rng.random_range(2..10),
            rng.random_range(2..8),
            rng.random_range(1..10),
        );
        let desc =
            DescriptorBatch::new(random_matrix(&mut rng, b, d), random_matrix(&mut rng, b, d))
                .unwrap();
        let det = LogitBatch {
            logits: (0..n)
                .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
                .collect(),
            labels: random_labels(&mut rng, n),
        };
        let cfg = LossConfig {
            margin: rng.random_range(0.2..2.0),
            lambda_det: rng.random_range(0.1..2.0),
            lambda_desc: rng.random_range(0.1..2.0),
        };
        let out = multitask_loss(&det, &desc, &cfg).unwrap();
        if !quadruplet_is_smooth(&desc, &out.mined, cfg.margin, 1e-3) {
            continue;
        }
        drawn += 1;
        let mined = out.mined.clone();
        let mut loss = |bb: &DescriptorBatch| {
            let o = multitask_loss(&det, bb, &cfg).ok()?;
            (o.mined == mined).then_some(o.loss)
        };
        let desc_ok = check_matrix_grad(
            &mut rng,
            &desc,
            &out.grad_anchors,
            &out.grad_positives,
            &mut loss,
            &mut worst,
        );
        let mut logit_ok = true;
        for i in 0..n {
            for c in 0..2 {
                let numeric = central(
                    &mut |dl| {
                        let mut dd = det.clone();
                        dd.logits[i][c] += dl;
                        multitask_loss(&dd, &desc, &cfg).unwrap().loss
                    },
                    1e-6,
                );
                logit_ok &= close(out.grad_logits[i][c], numeric);
            }
        }
        if desc_ok == Some(true) && logit_ok {
            ok += 1;
        }
    }
    pass &= ok == 50;
    lines.push(format!("multitask {ok}/50 (worst rel {worst:.1e})"));

    // Toy embedder: directional derivatives along random parameter directions.
    let (ok, worst, rejected) = toy_embedder_gradients(&mut rng);
    pass &= ok == 50;
    lines.push(format!(
        "toy embedder {ok}/50 (worst rel {worst:.1e}, {rejected} kink draws skipped)"
    ));

    let el = t.elapsed();
    pass &= within(el, 30.0);
    check(pass, format!("{} in {el:.2?}", lines.join(", ")))
}

fn toy_loss(
    model: &ToyEmbedder,
    x: &DMatrix<f64>,
    labels: &[Class],
    np: usize,
    cfg: &LossConfig,
) -> Option<(f64, MinedNegatives, ToyEmbedder)> {
    let cache = model.forward(x);
    let nd = labels.len();
    let det = LogitBatch {
        logits: (0..nd)
            .map(|i| [cache.logits[(i, 0)], cache.logits[(i, 1)]])
            .collect(),
        labels: labels.to_vec(),
    };
    let desc = DescriptorBatch::new(
        cache.descriptors.rows(nd, np).into_owned(),
        cache.descriptors.rows(nd + np, np).into_owned(),
    )
    .ok()?;
    let out = multitask_loss(&det, &desc, cfg).ok()?;
    let mut d_logits = DMatrix::zeros(x.nrows(), 2);
    for (i, g) in out.grad_logits.iter().enumerate() {
        d_logits[(i, 0)] = g[0];
        d_logits[(i, 1)] = g[1];
    }
    let mut d_desc = DMatrix::zeros(x.nrows(), model.descriptor_dim());
    d_desc.rows_mut(nd, np).copy_from(&out.grad_anchors);
    d_desc.rows_mut(nd + np, np).copy_from(&out.grad_positives);
    let grads = model.backward(&cache, &d_logits, &d_desc);
    Some((out.loss, out.mined, grads))
}

fn perturbed(model: &ToyEmbedder, dir: &[Vec<f64>], s: f64) -> ToyEmbedder {
    let mut m = model.clone();
    for (t, d) in m.tensors_mut().into_iter().zip(dir) {
        for (v, dv) in t.iter_mut().zip(d) {
            *v += s * dv;
        }
    }
    m
}

fn toy_embedder_gradients(rng: &mut ChaCha8Rng) -> (usize, f64, usize) {
    let (mut ok, mut worst, mut rejected, mut drawn) = (0, 0.0f64, 0, 0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    while drawn < 50 {
        let (nd, np) = (rng.random_range(2..7), rng.random_range(2..5));
        let mut model = ToyEmbedder::new(8, 4, rng.random());
        for b in [
            &mut model.b1,
            &mut model.b2,
            &mut model.b_det,
            &mut model.b_desc,
        ] {
            b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let x = DMatrix::from_fn(nd + 2 * np, model.input_dim(), |_, _| {
            rng.random_range(0.0..1.0)
        });
        let labels = random_labels(rng, nd);
        let cfg = LossConfig::default();
        let Some((_, mined, grads)) = toy_loss(&model, &x, &labels, np, &cfg) else {
            continue;
        };
        let dir: Vec<Vec<f64>> = model
            .tensors()
            .iter()
            .map(|t| (0..t.len()).map(|_| normal.sample(rng)).collect())
            .collect();
        let analytic: f64 = grads
            .tensors()
            .iter()
            .zip(&dir)
            .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let loss_at = |s: f64| {
            toy_loss(&perturbed(&model, &dir, s), &x, &labels, np, &cfg)
                .filter(|(_, m, _)| *m == mined)
                .map(|(l, _, _)| l)
        };
        let h = 1e-6;
        let fd = |h: f64| Some((loss_at(h)? - loss_at(-h)?) / (2.0 * h));
        let (Some(a), Some(b)) = (fd(h), fd(h / 2.0)) else {
            rejected += 1;
            continue;
        };
        // A ReLU kink inside the stencil makes the two step sizes disagree.
        if (a - b).abs() > 1e-6 * a.abs().max(1.0) {
            rejected += 1;
            continue;
        }
        drawn += 1;
        worst = worst.max((analytic - a).abs() / analytic.abs().max(a.abs()).max(1e-12));
        ok += close(analytic, a) as usize;
    }
    (ok, worst, rejected)
}

// ---------------------------------------------------------------- oracles

fn exhaustive_mining(b: &DescriptorBatch) -> (Vec<usize>, Vec<usize>) {
    let n = b.len();
    let dist = |i: usize, j: usize| {
        (0..b.anchors.ncols())
            .map(|k| (b.anchors[(i, k)] - b.positives[(j, k)]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let argmin = |f: &dyn Fn(usize) -> f64, skip: usize| {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == skip {
                continue;
            }
            let v = f(j);
            if best.is_none_or(|(_, bv)| v < bv) {
                best = Some((j, v));
            }
        }
        best.unwrap().0
    };
    (
        (0..n).map(|i| argmin(&|j| dist(i, j), i)).collect(),
        (0..n).map(|i| argmin(&|j| dist(j, i), i)).collect(),
    )
}

fn mining_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut agree = 0;
    for k in 0..100 {
        let b = 2 + (k * 37) % 63;
        let d = rng.random_range(2..17);
        let batch =
            DescriptorBatch::new(random_matrix(&mut rng, b, d), random_matrix(&mut rng, b, d))
                .unwrap();
        let mined = hard_negative_mining(&batch).unwrap();
        let (fa, fp) = exhaustive_mining(&batch);
        agree += (mined.for_anchor == fa && mined.for_positive == fp) as usize;
    }
    check(
        agree == 100,
        format!("{agree}/100 batches identical to exhaustive search (B in 2..=64)"),
    )
}

fn brute_force_nms(g: &Grid2, radius: f64) -> Vec<(usize, usize, f64)> {
    let mut idx: Vec<usize> = (0..g.data.len()).collect();
    idx.sort_by(|&a, &b| g.data[b].partial_cmp(&g.data[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for i in idx {
        let (x, y) = (i % g.width, i / g.width);
        let clear = kept.iter().all(|&(kx, ky, _)| {
            let (dx, dy) = (kx as f64 - x as f64, ky as f64 - y as f64);
            (dx * dx + dy * dy).sqrt() > radius
        });
        if clear {
            kept.push((x, y, g.data[i]));
        }
    }
    kept
}

fn min_separation(points: &[Point2]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min(points[i].distance(&points[j]));
        }
    }
    best
}

fn nms_oracle(dataset: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut agree = 0;
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let levels = rng.random_range(2..40);
        let g = Grid2::from_vec(
            w,
            h,
            (0..w * h)
                .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
                .collect(),
        );
        let radius = [1.0, 1.5, 2.0, 3.0, 4.0, 5.5][rng.random_range(0..6)];
        let fast: Vec<(usize, usize, f64)> = nms(&g, radius)
            .iter()
            .map(|k| (k.pos.x as usize, k.pos.y as usize, k.confidence))
            .collect();
        agree += (fast == brute_force_nms(&g, radius)) as usize;
    }
    // Separation on keypoints from real pipeline runs.
    let cfg = PipelineConfig::default();
    let mut worst_sep = f64::INFINITY;
    let mut runs = 0;
    let manifest = Manifest::load(&dataset.join("manifest.json")).map_err(|e| e.to_string())?;
    for e in manifest.pairs.iter().take(10) {
        for ann in [&e.annotation_a, &e.annotation_b] {
            let p = dataset.join(ann);
            let a = load_annotations(&p).map_err(|e| e.to_string())?;
            let img = ImageBuffer::load_png(a.image_path(&p)).map_err(|e| e.to_string())?;
            let fm = extract_image(&img, a.modality, &cfg).map_err(|e| e.to_string())?;
            let (kps, _) = detect_and_describe(&fm, &cfg.registration());
            let pts: Vec<Point2> = kps.iter().map(|k| k.pos).collect();
            worst_sep = worst_sep.min(min_separation(&pts));
            runs += 1;
        }
    }
    check(
        agree == 100 && worst_sep > 4.0,
        format!("{agree}/100 heatmaps identical to brute force; min separation {worst_sep:.2} px over {runs} pipeline runs"),
    )
}

fn bicubic_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut const_bad, mut ramp_err, mut commute_err) = (0, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (gw, gh) = (rng.random_range(2..20), rng.random_range(2..20));
        let f = rng.random_range(1..9);
        let (ow, oh) = (
            gw * f - rng.random_range(0..f),
            gh * f - rng.random_range(0..f),
        );
        let c = rng.random_range(-10.0..10.0);
        let up = upsample_bicubic(&Grid2::filled(gw, gh, c), f, ow, oh).unwrap();
        const_bad += up.data.iter().filter(|&&v| v != c).count();

        let (a, b, k) = (
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-5.0..5.0),
        );
        let ramp = Grid2::from_fn(gw, gh, |x, y| a * x as f64 + b * y as f64 + k);
        let up = upsample_bicubic(&ramp, f, ow, oh).unwrap();
        // Interior: all four taps of both axes lie inside the grid.
        for y in 0..oh {
            for x in 0..ow {
                let (u, v) = (
                    (x as f64 + 0.5) / f as f64 - 0.5,
                    (y as f64 + 0.5) / f as f64 - 0.5,
                );
                if u >= 1.0 && v >= 1.0 && u <= gw as f64 - 2.0 && v <= gh as f64 - 2.0 {
                    ramp_err = ramp_err.max((up.get(x, y) - (a * u + b * v + k)).abs());
                }
            }
        }

        let p = Grid2::from_vec(
            gw,
            gh,
            (0..gw * gh).map(|_| rng.random_range(-5.0..5.0)).collect(),
        );
        let q = Grid2::from_vec(
            gw,
            gh,
            (0..gw * gh).map(|_| rng.random_range(-5.0..5.0)).collect(),
        );
        let diff = upsample_bicubic(&p.zip_map(&q, |s, t| s - t), f, ow, oh).unwrap();
        let (up_p, up_q) = (
            upsample_bicubic(&p, f, ow, oh).unwrap(),
            upsample_bicubic(&q, f, ow, oh).unwrap(),
        );
        for i in 0..diff.data.len() {
            commute_err = commute_err.max((diff.data[i] - (up_p.data[i] - up_q.data[i])).abs());
        }
    }
    check(
        const_bad == 0 && ramp_err <= 1e-6 && commute_err <= 1e-6,
        format!("constant mismatches {const_bad}, ramp error {ramp_err:.1e}, commutation error {commute_err:.1e}"),
    )
}

// ---------------------------------------------------------------- end to end

fn end_to_end(dataset: &Path, synth_time: Duration, out: &Path) -> Outcome {
    let t = Instant::now();
    let report = cmd_evaluate(
        &dataset.join("manifest.json"),
        out,
        &PipelineConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let el = t.elapsed() + synth_time;
    let o = &report.aggregates.overall;
    check(
        o.pairs == 50 && o.sr_me >= 90.0 && o.sr_mae >= 80.0 && within(el, 120.0),
        format!(
            "{} pairs: SR_ME(3) {:.1}%, SR_MAE(5) {:.1}%, Rep(5) {:.1}%, MIR(5) {:.1}% in {el:.2?}",
            o.pairs,
            o.sr_me,
            o.sr_mae,
            100.0 * o.mean_rep,
            100.0 * o.mean_mir
        ),
    )
}

// ---------------------------------------------------------------- metrics

fn cp(errors: &[f64], status: RegistrationStatus) -> ControlPointErrors {
    ControlPointErrors {
        errors: errors.to_vec(),
        status,
    }
}

fn metric_formulas() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if got != want {
            failures.push(format!("{name}: got {got}, want {want}"));
        }
    };

    // 1. Euclidean errors: identity prediction against offsets of known length.
    let offsets = [
        (0.0, 0.0),
        (1.0, 0.0),
        (0.0, 2.0),
        (3.0, 0.0),
        (0.0, 4.0),
        (3.0, 4.0),
    ];
    let control: Vec<Correspondence> = offsets
        .iter()
        .enumerate()
        .map(|(i, &(dx, dy))| {
            let p = Point2::new(10.0 * i as f64, 7.0 * i as f64);
            Correspondence::new(p, Point2::new(p.x + dx, p.y + dy))
        })
        .collect();
    let e = euclidean_errors(&Homography::identity(), &control).unwrap();
    expect("errors mean", e.mean(), 2.5);
    expect("errors max", e.max(), 5.0);

    // 2. Success rates: means 1, 2.5, 3, 4 and maxima 2, 5, 6, 4 plus one failure.
    let sets = [
        cp(&[0.0, 2.0, 1.0, 1.0], RegistrationStatus::Ok),
        cp(&[0.0, 5.0, 2.5, 2.5], RegistrationStatus::Ok),
        cp(&[0.0, 6.0, 3.0, 3.0], RegistrationStatus::Ok),
        cp(&[4.0, 4.0, 4.0, 4.0], RegistrationStatus::Ok),
        cp(&[0.0, 0.0, 0.0, 0.0], RegistrationStatus::RansacFailed),
    ];
    expect("SR_ME(3)", success_rate_me(&sets, 3.0).unwrap(), 60.0);
    expect("SR_MAE(5)", success_rate_mae(&sets, 5.0).unwrap(), 60.0);
    expect("SR_ME(2.5)", success_rate_me(&sets, 2.5).unwrap(), 40.0);
    expect("SR_MAE(1)", success_rate_mae(&sets, 1.0).unwrap(), 0.0);

    // 3. Repeatability under a 10 px shift in 100x100 images. A: (5,5) ->
    // (15,5) repeated by B (16,5); (50,50) -> (60,50) repeated by (60,53);
    // (95,20) leaves B. B: (16,5) and (60,53) repeat; (80,80) -> (70,80)
    // has no A nearby; (3,3) -> (-7,3) leaves A. So (2 + 2) / (2 + 3).
    let a = [
        Point2::new(5.0, 5.0),
        Point2::new(50.0, 50.0),
        Point2::new(95.0, 20.0),
    ];
    let b = [
        Point2::new(16.0, 5.0),
        Point2::new(60.0, 53.0),
        Point2::new(80.0, 80.0),
        Point2::new(3.0, 3.0),
    ];
    let shift = Homography::translation(10.0, 0.0);
    expect(
        "Rep(3)",
        repeatability(&a, &b, &shift, 3.0, (100, 100), (100, 100)),
        0.8,
    );
    expect(
        "Rep(2)",
        repeatability(&a, &b, &shift, 2.0, (100, 100), (100, 100)),
        0.4,
    );

    // 4. Matching inlier ratio.
    expect("MIR 21/30", matching_inlier_ratio(21, 30).unwrap(), 0.7);
    expect("MIR 0/0", matching_inlier_ratio(0, 0).unwrap(), 0.0);

    // 5. Dataset aggregation over two modality pairs: CF-FA has one success
    // (mean 0.5) and one failure; IR-OCTA has one success.
    let control_a = [
        (10.0, 10.0),
        (90.0, 12.0),
        (50.0, 50.0),
        (12.0, 88.0),
        (88.0, 90.0),
        (30.0, 70.0),
    ]
    .map(|(x, y)| Point2::new(x, y));
    let control_b = control_a.map(|p| Point2::new(p.x + 0.5, p.y));
    let ok = retinareg::matching::RegistrationResult {
        status: RegistrationStatus::Ok,
        homography: Some(Homography::identity()),
        matches: vec![],
        inlier_mask: vec![],
        keypoints_a: 0,
        keypoints_b: 0,
        seed: 0,
    };
    let failed = retinareg::matching::RegistrationResult {
        status: RegistrationStatus::TooFewMatches,
        homography: None,
        ..ok.clone()
    };
    let pair = |id: &str, ma, mb, r| PairEvaluation {
        id: id.into(),
        modality_a: ma,
        modality_b: mb,
        result: r,
        keypoints_a: vec![],
        keypoints_b: vec![],
        dims_a: (100, 100),
        dims_b: (100, 100),
        control_a: &control_a,
        control_b: &control_b,
    };
    let report = evaluate_dataset(
        &[
            pair("p1", Modality::Cf, Modality::Fa, &ok),
            pair("p2", Modality::Cf, Modality::Fa, &failed),
            pair("p3", Modality::Ir, Modality::Octa, &ok),
        ],
        &Thresholds::default(),
    )
    .unwrap();
    expect("p1 mean error", report.pairs[0].mean_error.unwrap(), 0.5);
    expect(
        "CF-FA SR_ME",
        report.aggregates.by_modality_pair["CF-FA"].sr_me,
        50.0,
    );
    expect(
        "IR-OCTA SR_MAE",
        report.aggregates.by_modality_pair["IR-OCTA"].sr_mae,
        100.0,
    );
    let recomputed = Aggregate::from_records(&report.pairs, &report.thresholds);
    expect(
        "overall recomputed",
        (recomputed == report.aggregates.overall) as u8 as f64,
        1.0,
    );
    let sr_overall = report.aggregates.overall.sr_me;
    if (sr_overall - 200.0 / 3.0).abs() > 1e-12 {
        failures.push(format!("overall SR_ME {sr_overall}"));
    }

    // Properties over random error sets.
    let mut runner = TestRunner::new(PropConfig {
        cases: 256,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let errors = prop::collection::vec(
        (
            prop::collection::vec(0.0..20.0f64, 1..8),
            prop::bool::weighted(0.9),
        ),
        1..20,
    );
    let prop_result = runner.run(&(errors, 0.0..10.0f64, 0.0..10.0f64), |(sets, e1, e2)| {
        let sets: Vec<ControlPointErrors> = sets
            .iter()
            .map(|(e, ok)| {
                cp(
                    e,
                    if *ok {
                        RegistrationStatus::Ok
                    } else {
                        RegistrationStatus::RansacFailed
                    },
                )
            })
            .collect();
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(success_rate_me(&sets, lo).unwrap() <= success_rate_me(&sets, hi).unwrap());
        prop_assert!(success_rate_mae(&sets, lo).unwrap() <= success_rate_mae(&sets, hi).unwrap());
        prop_assert!(success_rate_mae(&sets, lo).unwrap() <= success_rate_me(&sets, lo).unwrap());
        Ok(())
    });
    if let Err(e) = prop_result {
        failures.push(format!("property: {e}"));
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "5 fixtures exact; monotonicity and SR_MAE <= SR_ME hold on 256 random cases".into()
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- training

fn toy_training(root: &Path) -> Outcome {
    let t = Instant::now();
    let data = root.join("toy_data");
    let cfg = SynthDatasetConfig {
        seed: 5,
        ..SynthDatasetConfig::default()
    }
    .resolve()
    .map_err(|e| e.to_string())?;
    let manifest = cmd_synth(&cfg, 80, &data).map_err(|e| e.to_string())?;
    let mut modalities = std::collections::BTreeSet::new();
    for e in &manifest.pairs {
        for a in [&e.annotation_a, &e.annotation_b] {
            modalities.insert(
                load_annotations(data.join(a))
                    .map_err(|e| e.to_string())?
                    .modality,
            );
        }
    }
    if modalities.len() != 3 {
        return Err(format!(
            "expected three pseudo-modalities, found {modalities:?}"
        ));
    }
    let mut train_cfg = TrainToyConfig::default();
    train_cfg.train.learning_rate = 1e-3;
    train_cfg.train.batch_descriptor = 96;
    let run = cmd_train_toy(
        &data,
        &train_cfg.resolve().map_err(|e| e.to_string())?,
        &root.join("toy_out"),
    )
    .map_err(|e| e.to_string())?;
    let el = t.elapsed();
    let curve = &run.outcome.curve;
    let initial = curve[0].train_loss;
    let first = curve.get(1).ok_or("no training epoch recorded")?.train_loss;
    let last = curve.last().unwrap();
    let ratio = last.train_loss / initial;
    check(
        ratio <= 0.5 && run.precision >= 0.9 && last.epoch <= 20 && within(el, 120.0),
        format!(
            "train loss {initial:.3} -> {:.3} after {} epochs ({:.0}% of the initial loss, {:.0}% of the epoch-1 loss {first:.3}); held-out mutual-NN precision {:.1}% in {el:.2?}",
            last.train_loss,
            last.epoch,
            100.0 * ratio,
            100.0 * last.train_loss / first,
            100.0 * run.precision
        ),
    )
}

// ---------------------------------------------------------------- determinism

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn determinism(dataset: &Path, root: &Path) -> Outcome {
    let small = root.join("det_data");
    let cfg = SynthDatasetConfig {
        seed: 21,
        ..SynthDatasetConfig::default()
    }
    .resolve()
    .map_err(|e| e.to_string())?;
    cmd_synth(&cfg, 4, &small).map_err(|e| e.to_string())?;
    let pcfg = PipelineConfig::default();
    let mut outputs = Vec::new();
    for (run, threads) in [(0, 1), (1, 4), (2, 4)] {
        let prefix = root.join(format!("det_reg_{run}"));
        let args = RegisterArgs {
            input_a: dataset.join("pair_003_a.png"),
            input_b: dataset.join("pair_003_b.png"),
            modality_a: Modality::SynthA,
            modality_b: Modality::Octa,
            out: prefix.clone(),
            overlay: false,
        };
        let ev = root.join(format!("det_eval_{run}"));
        in_pool(threads, || -> retinareg_cli::Result<()> {
            cmd_register(&args, &pcfg)?;
            cmd_evaluate(&small.join("manifest.json"), &ev, &pcfg)?;
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
        outputs.push((
            read(&prefix.with_extension("json"))?,
            read(&prefix.with_extension("h.txt"))?,
            read(&ev.join("report.json"))?,
            read(&ev.join("report.txt"))?,
        ));
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    check(
        same,
        "register JSON/homography and evaluate reports byte-identical over 3 runs (1, 4, 4 threads)".into(),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let dataset = root.path().join("synth50");
    let t = Instant::now();
    let synth = SynthDatasetConfig::default()
        .resolve()
        .and_then(|cfg| cmd_synth(&cfg, 50, &dataset));
    let synth_time = t.elapsed();
    if let Err(e) = synth {
        println!("FAIL  synthetic dataset generation: {e}");
        std::process::exit(1);
    }

    let criteria: Vec<(&str, Criterion)> = vec![
        ("DLT exactness", Box::new(dlt_exactness)),
        ("RANSAC robustness", Box::new(ransac_robustness)),
        ("gradient suite", Box::new(gradient_suite)),
        ("mining oracle", Box::new(mining_oracle)),
        ("NMS oracle", Box::new(|| nms_oracle(&dataset))),
        ("bicubic properties", Box::new(bicubic_properties)),
        (
            "end-to-end synthetic registration",
            Box::new(|| end_to_end(&dataset, synth_time, &root.path().join("eval50"))),
        ),
        ("metric formulas", Box::new(metric_formulas)),
        ("toy training", Box::new(|| toy_training(root.path()))),
        (
            "determinism",
            Box::new(|| determinism(&dataset, root.path())),
        ),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    println!("{failed} of 10 criteria failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
