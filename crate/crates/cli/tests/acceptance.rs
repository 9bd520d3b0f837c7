//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Every expected value comes from an oracle written here, not from
//! the library under test.

use std::collections::BTreeMap;
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use gigaslide_api::pipeline::{self, IngestOptions};
use gigaslide_api::{router, AppState};
use gigaslide_core::heatmap::{
    extract_polygons, interpolate, open_cross, remove_small_components, PatchPrediction,
};
use gigaslide_core::metrics::{auc, classification_metrics, confusion, recall_nt, recall_t, RegionTally};
use gigaslide_core::pyramid::{
    build_pyramid, extract_patch_grid, otsu_threshold, PatchGrid, TileFormat, TissueMask,
};
use gigaslide_core::raster::BinaryMask;
use gigaslide_core::semisup::{
    accuracy, confidence, pseudo_label, softmax, train_student, train_teacher, two_gaussian_clusters,
    weighted_cross_entropy, ClassifierHead, Hyper, IdentityFeatures, LabeledSet, UnlabeledSet,
};
use gigaslide_core::Config;
use gigaslide_store::{Role, SlideRecord, Store};
use http_body_util::BodyExt;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- oracles

fn halving_chain(w: u32, h: u32) -> Vec<(u32, u32)> {
    let mut chain = vec![(w, h)];
    while chain.last().unwrap() != &(1, 1) {
        let (a, b) = *chain.last().unwrap();
        chain.push(((a + 1) / 2, (b + 1) / 2));
    }
    chain.reverse();
    chain
}

/// Pastes every tile of a level at its nominal origin. Overlap pixels must
/// agree with whatever a neighbour already wrote.
fn paste_level(dir: &Path, level: usize, tile: u32, overlap: u32) -> Result<RgbImage, String> {
    let level_dir = dir.join(level.to_string());
    let mut tiles = Vec::new();
    for e in std::fs::read_dir(&level_dir).map_err(|e| format!("{}: {e}", level_dir.display()))? {
        let p = e.unwrap().path();
        let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
        let (c, r) = stem.split_once('_').ok_or(format!("bad tile name {stem}"))?;
        let img = image::open(&p).map_err(|e| e.to_string())?.to_rgb8();
        tiles.push((c.parse::<u32>().unwrap(), r.parse::<u32>().unwrap(), img));
    }
    let origin = |i: u32| (i * tile).saturating_sub(if i > 0 { overlap } else { 0 });
    let w = tiles.iter().map(|(c, _, t)| origin(*c) + t.width()).max().unwrap_or(0);
    let h = tiles.iter().map(|(_, r, t)| origin(*r) + t.height()).max().unwrap_or(0);
    let mut out = RgbImage::new(w, h);
    let mut written = BinaryMask::new(w, h);
    for (c, r, t) in &tiles {
        for (x, y, p) in t.enumerate_pixels() {
            let (gx, gy) = (origin(*c) + x, origin(*r) + y);
            if written.get(gx, gy) && out.get_pixel(gx, gy) != p {
                return Err(format!("level {level}: overlap disagrees at ({gx}, {gy})"));
            }
            out.put_pixel(gx, gy, *p);
            written.set(gx, gy, true);
        }
    }
    if written.count() != (w * h) as usize {
        return Err(format!("level {level}: tiles leave gaps"));
    }
    Ok(out)
}

fn brute_otsu(hist: &[u64; 256]) -> Option<u8> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total: f64 = hist.iter().map(|&c| c as f64).sum();
    let mut best: Option<(u8, f64)> = None;
    for t in 0..256usize {
        let (lo, hi) = hist.split_at(t + 1);
        let n0: f64 = lo.iter().map(|&c| c as f64).sum();
        let n1: f64 = hi.iter().map(|&c| c as f64).sum();
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let m0 = lo.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>() / n0;
        let m1 = hi.iter().enumerate().map(|(i, &c)| (i + t + 1) as f64 * c as f64).sum::<f64>() / n1;
        let var = (n0 / total) * (n1 / total) * (m0 - m1).powi(2);
        if best.is_none_or(|(_, b)| var > b) {
            best = Some((t as u8, var));
        }
    }
    best.map(|(t, _)| t)
}

/// Even-odd test at pixel centres.
fn rasterize(poly: &[(f64, f64)], w: u32, h: u32) -> BinaryMask {
    BinaryMask::from_fn(w, h, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut inside = false;
        for i in 0..poly.len() {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            if (a.1 > py) != (b.1 > py) && px < a.0 + (py - a.1) / (b.1 - a.1) * (b.0 - a.0) {
                inside = !inside;
            }
        }
        inside
    })
}

fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits().iter().zip(b.bits()) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    if union == 0 { 1.0 } else { inter as f64 / union as f64 }
}

fn reference_loss(head: &ClassifierHead, x: &[Vec<f64>], y: &[usize], w: &[f64]) -> f64 {
    let c = head.class_count;
    x.iter()
        .zip(y)
        .zip(w)
        .map(|((xi, &yi), &wi)| {
            let z: Vec<f64> = (0..c)
                .map(|k| head.bias[k] + xi.iter().enumerate().map(|(f, v)| v * head.weights[f * c + k]).sum::<f64>())
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            wi * (lse - z[yi])
        })
        .sum()
}

/// Fraction of (positive, negative) pairs ordered correctly, ties half.
fn pair_auc(scores: &[f64], truth: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &ti) in truth.iter().enumerate() {
        for (j, &tj) in truth.iter().enumerate() {
            if ti && !tj {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

// ------------------------------------------------------------- criteria

fn pyramid_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut levels_checked = 0;
    for i in 0..50 {
        let (w, h) = (rng.random_range(1..=3000u32), rng.random_range(1..=3000u32));
        let (a, b) = (rng.random_range(1..32u32), rng.random_range(1..32u32));
        let img = RgbImage::from_fn(w, h, |x, y| {
            Rgb([((x / a) * 37 % 256) as u8, ((y / b) * 53 % 256) as u8, ((x ^ y) & 0xff) as u8])
        });
        let name = format!("p{i}");
        let desc = build_pyramid(&img, &name, dir.path(), 254, 1, TileFormat::Png).map_err(|e| e.to_string())?;
        let chain = halving_chain(w, h);
        ensure!(desc.level_dims == chain, "{w}x{h}: levels {:?} != {:?}", desc.level_dims, chain);
        let files = dir.path().join(format!("{name}_files"));
        let on_disk = std::fs::read_dir(&files).map_err(|e| e.to_string())?.count();
        ensure!(on_disk == chain.len(), "{w}x{h}: {on_disk} level dirs, expected {}", chain.len());
        for (level, &(lw, lh)) in chain.iter().enumerate() {
            let got = paste_level(&files, level, 254, 1)?;
            ensure!(got.dimensions() == (lw, lh), "{w}x{h} level {level}: {:?} != {:?}", got.dimensions(), (lw, lh));
            levels_checked += 1;
        }
        let full = paste_level(&files, chain.len() - 1, 254, 1)?;
        ensure!(full == img, "{w}x{h}: full-resolution reassembly differs");
        std::fs::remove_dir_all(&files).map_err(|e| e.to_string())?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s (limit 60s)");
    Ok(format!("50 images, {levels_checked} levels, bit-exact, {secs:.1}s"))
}

fn patch_grid() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (w, h) = (rng.random_range(1..900u32), rng.random_range(1..900u32));
        let size = rng.random_range(1..200u32);
        let stride = rng.random_range(1..=size);
        let mask = TissueMask {
            mask: BinaryMask::filled(w, h),
            threshold_used: 0,
            degenerate: false,
        };
        let g = extract_patch_grid(&mask, size, stride, 0.0).map_err(|e| e.to_string())?;
        let mut brute = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if x % stride == 0 && y % stride == 0 && x + size <= w && y + size <= h {
                    brute.push((x, y));
                }
            }
        }
        ensure!(g.positions == brute, "{w}x{h} size {size} stride {stride}: positions differ");
        let formula = PatchGrid::axis_count(w, size, stride) * PatchGrid::axis_count(h, size, stride);
        ensure!(formula as usize == brute.len(), "{w}x{h} size {size} stride {stride}: formula {formula} != {}", brute.len());
    }
    let mask = TissueMask {
        mask: BinaryMask::filled(2048, 2048),
        threshold_used: 0,
        degenerate: false,
    };
    let g = extract_patch_grid(&mask, 512, 256, 0.0).map_err(|e| e.to_string())?;
    // ((2048 - 512) / 256 + 1)² = 7² patches.
    ensure!(g.positions.len() == 49, "2048² gave {} patches", g.positions.len());
    Ok("200 triples match enumeration; 2048² with 512/256 gives 49".into())
}

fn otsu() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100 {
        let mut hist = [0u64; 256];
        let bins = rng.random_range(1..60);
        for _ in 0..bins {
            hist[rng.random_range(0..256)] += rng.random_range(1..10_000);
        }
        let (got, want) = (otsu_threshold(&hist), brute_otsu(&hist));
        ensure!(got == want, "histogram {i}: {got:?} != {want:?}");
    }
    Ok("100 histograms, exact".into())
}

fn heatmap() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mask = TissueMask {
        mask: BinaryMask::filled(2048, 1536),
        threshold_used: 0,
        degenerate: false,
    };
    let grid = extract_patch_grid(&mask, 512, 256, 0.0).map_err(|e| e.to_string())?;
    let preds: Vec<PatchPrediction> = grid
        .positions
        .iter()
        .map(|&(x, y)| PatchPrediction {
            slide_name: "s".into(),
            x,
            y,
            prob: rng.random(),
        })
        .collect();
    let h = interpolate(&preds, &grid, 0.125).map_err(|e| e.to_string())?;
    let mut worst = 0f64;
    for p in &preds {
        let (cx, cy) = (p.x as f64 + 256.0, p.y as f64 + 256.0);
        worst = worst.max((h.sample(cx, cy) - p.prob).abs());
        worst = worst.max((h.map.get((cx / 8.0) as u32, (cy / 8.0) as u32) - p.prob).abs());
    }
    ensure!(worst <= 1e-9, "patch-centre error {worst:e}");

    // 2×2 lattice: left column 0, right column 1.
    let small = TissueMask {
        mask: BinaryMask::filled(768, 768),
        threshold_used: 0,
        degenerate: false,
    };
    let g2 = extract_patch_grid(&small, 512, 256, 0.0).map_err(|e| e.to_string())?;
    let corners: Vec<PatchPrediction> = g2
        .positions
        .iter()
        .zip([0.0, 1.0, 0.0, 1.0])
        .map(|(&(x, y), prob)| PatchPrediction {
            slide_name: "s".into(),
            x,
            y,
            prob,
        })
        .collect();
    let h2 = interpolate(&corners, &g2, 1.0).map_err(|e| e.to_string())?;
    let mid = h2.sample(384.0, 384.0);
    ensure!((mid - 0.5).abs() <= 1e-12, "midpoint {mid}");

    let mut worst_iou = 1f64;
    for _ in 0..20 {
        let disks: Vec<(f64, f64, f64)> = (0..rng.random_range(1..4))
            .map(|_| (rng.random_range(40.0..160.0), rng.random_range(40.0..160.0), rng.random_range(15.0..35.0)))
            .collect();
        let raw = BinaryMask::from_fn(200, 200, |x, y| {
            disks.iter().any(|&(cx, cy, r)| (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r)
        });
        let blob = remove_small_components(&open_cross(&raw), 100.0);
        let mut back = BinaryMask::new(200, 200);
        for p in extract_polygons(&blob) {
            let r = rasterize(&p.vertices, 200, 200);
            for (i, bit) in r.bits().iter().enumerate() {
                if *bit {
                    back.set(i as u32 % 200, i as u32 / 200, true);
                }
            }
        }
        worst_iou = worst_iou.min(iou(&back, &blob));
    }
    ensure!(worst_iou >= 0.90, "worst IoU {worst_iou:.4}");
    Ok(format!("centre error {worst:.1e}, midpoint {mid}, worst IoU {worst_iou:.4} over 20 blobs"))
}

fn semisup() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst_rel = 0f64;
    for _ in 0..50 {
        let dim = rng.random_range(1..6);
        let c = rng.random_range(2..5);
        let n = rng.random_range(1..10);
        let head = ClassifierHead {
            feature_dim: dim,
            class_count: c,
            weights: (0..dim * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, grad) = weighted_cross_entropy(&head, &x, &y, &w).map_err(|e| e.to_string())?;
        let step = 1e-6;
        let numeric = |perturb: &dyn Fn(&mut ClassifierHead, f64)| {
            let (mut plus, mut minus) = (head.clone(), head.clone());
            perturb(&mut plus, step);
            perturb(&mut minus, -step);
            (reference_loss(&plus, &x, &y, &w) - reference_loss(&minus, &x, &y, &w)) / (2.0 * step)
        };
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
        for i in 0..head.weights.len() {
            worst_rel = worst_rel.max(rel(grad.weights[i], numeric(&|h, d| h.weights[i] += d)));
        }
        for k in 0..c {
            worst_rel = worst_rel.max(rel(grad.bias[k], numeric(&|h, d| h.bias[k] += d)));
        }
    }
    ensure!(worst_rel <= 1e-5, "gradient relative error {worst_rel:e}");

    for _ in 0..1000 {
        let c = rng.random_range(2..10);
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-30.0..30.0)).collect();
        let (label, omega) = confidence(&softmax(&logits));
        let lo = 1.0 / c as f64;
        ensure!(omega >= lo - 1e-15 && omega <= 1.0, "ω {omega} outside [{lo}, 1]");
        let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ensure!(logits[label] == best, "pseudo label is not the argmax");
    }

    let f = IdentityFeatures { dim: 2 };
    let (mut teacher_acc, mut student_acc) = (Vec::new(), Vec::new());
    for seed in 0..10u64 {
        let data = two_gaussian_clusters(720, 3.0, seed);
        let labeled = LabeledSet {
            samples: data[..20].to_vec(),
            class_count: 2,
        };
        let unlabeled = UnlabeledSet {
            samples: data[20..520].iter().map(|(x, _)| x.clone()).collect(),
        };
        let held_out = LabeledSet {
            samples: data[520..].to_vec(),
            class_count: 2,
        };
        let hyper = Hyper::with_seed(seed);
        let (teacher, _) = train_teacher(&labeled, &f, &hyper).map_err(|e| e.to_string())?;
        let pseudo = pseudo_label(&teacher, &f, &unlabeled).map_err(|e| e.to_string())?;
        let (student, _) = train_student(&labeled, &pseudo, &f, &hyper).map_err(|e| e.to_string())?;
        teacher_acc.push(accuracy(&teacher, &f, &held_out));
        student_acc.push(accuracy(&student, &f, &held_out));
        if seed == 0 {
            let (alone, _) = train_student(&labeled, &[], &f, &hyper).map_err(|e| e.to_string())?;
            let bits = |h: &ClassifierHead| h.weights.iter().chain(&h.bias).map(|v| v.to_bits()).collect::<Vec<_>>();
            ensure!(bits(&alone) == bits(&teacher), "student without pseudo samples differs from teacher");
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (v[4] + v[5]) / 2.0
    };
    let (t, s) = (median(&mut teacher_acc), median(&mut student_acc));
    ensure!(s >= t, "median student {s:.4} < teacher {t:.4}");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s (limit 30s)");
    Ok(format!("grad rel err {worst_rel:.1e}; median teacher {t:.4}, student {s:.4}; {secs:.1}s"))
}

fn metrics() -> Outcome {
    let tally = RegionTally { tm: 10, nt: 2, tp: 12 };
    let rt = recall_t(&tally).map_err(|e| e.to_string())?;
    let rnt = recall_nt(&tally).map_err(|e| e.to_string())?;
    ensure!(rt == 0.8, "Recall_T {rt}");
    ensure!(rnt == 8.0 / 12.0, "Recall_NT {rnt}");

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let truth: Vec<usize> = (0..100).map(|_| rng.random_range(0..2)).collect();
        let scores: Vec<f64> = truth.iter().map(|&t| (rng.random_range(0..20) as f64 + 5.0 * t as f64) / 25.0).collect();
        let pred: Vec<usize> = scores.iter().map(|&s| (s >= 0.5) as usize).collect();
        let r = classification_metrics(&pred, &truth, Some(&scores), 2).map_err(|e| e.to_string())?;
        let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64;
        let tp = pred.iter().zip(&truth).filter(|&(&p, &t)| p == 1 && t == 1).count() as f64;
        let fp = pred.iter().zip(&truth).filter(|&(&p, &t)| p == 1 && t == 0).count() as f64;
        let fn_ = pred.iter().zip(&truth).filter(|&(&p, &t)| p == 0 && t == 1).count() as f64;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        let positives: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        ensure!((r.accuracy - correct / 100.0).abs() < 1e-12, "accuracy {} != {}", r.accuracy, correct / 100.0);
        ensure!((r.f1 - f1).abs() < 1e-12, "F1 {} != {f1}", r.f1);
        let want_auc = pair_auc(&scores, &positives);
        let got_auc = r.auc.ok_or("AUC missing")?;
        ensure!((got_auc - want_auc).abs() < 1e-12, "AUC {got_auc} != {want_auc}");
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let again = auc(&warped, &positives).map_err(|e| e.to_string())?;
        ensure!((again - got_auc).abs() < 1e-12, "AUC changed under a monotone transform");

        let classes: Vec<String> = ["a", "b", "c", "d"].map(String::from).to_vec();
        let expert: Vec<&str> = (0..100).map(|_| classes[rng.random_range(0..4)].as_str()).collect();
        let annot: Vec<&str> = (0..100).map(|_| classes[rng.random_range(0..4)].as_str()).collect();
        let m = confusion(&expert, &annot, &classes).map_err(|e| e.to_string())?;
        for (i, row) in m.normalized.iter().enumerate() {
            let n = expert.iter().filter(|e| **e == classes[i]).count();
            for (j, _) in row.iter().enumerate() {
                let count = expert.iter().zip(&annot).filter(|(e, a)| **e == classes[i] && **a == classes[j]).count();
                ensure!(m.counts[i][j] == count as u64, "confusion count ({i}, {j})");
            }
            let sum: f64 = row.iter().sum();
            ensure!(n == 0 || (sum - 1.0).abs() <= 1e-9, "row {i} sums to {sum}");
        }
    }
    Ok(format!("Recall_T {rt}, Recall_NT {rnt:.4}; 50 fixtures of 100 items match brute force"))
}

// ------------------------------------------------------------ API helpers

async fn call(app: &Router, method: Method, uri: &str, token: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("authorization", format!("Bearer {token}"))
        .body(Body::from(body.unwrap_or_default()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn polygon_body(batch: &str, slide: &str, geometry: Value, label: &str) -> String {
    json!({"batch_name": batch, "slide_name": slide, "kind": "polygon", "geometry": geometry, "label": label}).to_string()
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = Config {
        data_dir: dir.path().to_path_buf(),
        db_path: dir.path().join("db.sqlite"),
        ..Config::default()
    };
    let store = Arc::new(Store::open(&config.db_path, config.classes.clone()).map_err(|e| e.to_string())?);
    // Stained disk of radius 500 centred at (1000, 1100).
    let in_blob = |x: u32, y: u32| (x as f64 + 0.5 - 1000.0).powi(2) + (y as f64 + 0.5 - 1100.0).powi(2) < 500.0 * 500.0;
    let slide = RgbImage::from_fn(2048, 2048, |x, y| if in_blob(x, y) { Rgb([200, 80, 200]) } else { Rgb([248, 248, 248]) });
    pipeline::ingest_image(&store, &config, &slide, "wsi", IngestOptions::default()).map_err(|e| e.to_string())?;
    let expert = store.add_user("expert", Role::Expert).map_err(|e| e.to_string())?.token;
    let ann1 = store.add_user("ann1", Role::Annotator).map_err(|e| e.to_string())?.token;
    let ann2 = store.add_user("ann2", Role::Annotator).map_err(|e| e.to_string())?.token;
    store.create_batch("batch", &["wsi".into()], true).map_err(|e| e.to_string())?;
    store.assign_users("batch", &["ann1".into(), "ann2".into()]).map_err(|e| e.to_string())?;

    let grid: PatchGrid = serde_json::from_str(&store.slide("wsi").map_err(|e| e.to_string())?.patch_grid).map_err(|e| e.to_string())?;
    let mut csv = String::from("slide,x,y,prob\n");
    for (x, y) in grid.kept_positions() {
        csv.push_str(&format!("wsi,{x},{y},0.9\n"));
    }
    let app = router(AppState::new(store.clone(), config));
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let (status, _) = call(&app, Method::POST, "/api/predictions/wsi", &expert, Some(csv)).await;
        ensure!(status == StatusCode::ACCEPTED, "upload returned {status}");
        let mut job = Value::Null;
        for _ in 0..1200 {
            job = call(&app, Method::GET, "/api/predictions/wsi", &expert, None).await.1;
            if job["state"] == "succeeded" || job["state"] == "failed" {
                break;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        ensure!(job["state"] == "succeeded", "job did not succeed: {job}");

        let blob = BinaryMask::from_fn(2048, 2048, in_blob);
        let blob_px = blob.count() as f64;
        let mut proposals = BTreeMap::new();
        for (name, token) in [("ann1", &ann1), ("ann2", &ann2)] {
            let (status, view) = call(&app, Method::GET, "/api/annotations?batch=batch&slide=wsi", token, None).await;
            ensure!(status == StatusCode::OK, "{name} listing returned {status}");
            let pending: Vec<Value> = view.as_array().unwrap().iter().filter(|a| a["source"] == "model" && a["validation"] == "pending").cloned().collect();
            ensure!(!pending.is_empty(), "{name} has no pending proposal");
            let best = pending
                .iter()
                .map(|a| {
                    let pts: Vec<(f64, f64)> = a["geometry"].as_array().unwrap().iter().map(|p| (p[0].as_f64().unwrap(), p[1].as_f64().unwrap())).collect();
                    let r = rasterize(&pts, 2048, 2048);
                    r.bits().iter().zip(blob.bits()).filter(|(a, b)| **a && **b).count() as f64 / blob_px
                })
                .fold(0.0, f64::max);
            ensure!(best >= 0.80, "{name}: best proposal covers {:.1}% of the blob", best * 100.0);
            proposals.insert(name, (pending, best));
        }

        // ann1 accepts everything and adds one manual tumor region; ann2
        // rejects everything and adds one manual tumor and one stroma region.
        let n = proposals["ann1"].0.len() as u64;
        for (name, token, status) in [("ann1", &ann1, "accepted"), ("ann2", &ann2, "rejected")] {
            for a in &proposals[name].0 {
                let uri = format!("/api/annotations/{}/validation", a["id"]);
                let (s, _) = call(&app, Method::PUT, &uri, token, Some(json!({"status": status}).to_string())).await;
                ensure!(s == StatusCode::OK, "{name} {status} returned {s}");
            }
        }
        let square = json!([[100.0, 100.0], [300.0, 100.0], [300.0, 300.0], [100.0, 300.0]]);
        for (token, label) in [(&ann1, "tumor"), (&ann2, "tumor"), (&ann2, "stroma")] {
            let (s, _) = call(&app, Method::POST, "/api/annotations", token, Some(polygon_body("batch", "wsi", square.clone(), label))).await;
            ensure!(s == StatusCode::CREATED, "manual annotation returned {s}");
        }
        let expected = [
            ("ann1", RegionTally { tm: n, nt: 0, tp: n + 1 }),
            ("ann2", RegionTally { tm: n, nt: n, tp: 1 }),
        ];
        let (s, report) = call(&app, Method::GET, "/api/reports/agreement?batch=batch", &expert, None).await;
        ensure!(s == StatusCode::OK, "agreement report returned {s}");
        for (user, tally) in expected {
            let row = report["rows"].as_array().unwrap().iter().find(|r| r["user"] == user).ok_or(format!("no row for {user}"))?;
            let got: RegionTally = serde_json::from_value(row["tally"].clone()).map_err(|e| e.to_string())?;
            ensure!(got == tally, "{user}: tally {got:?} != {tally:?}");
            let want_rt = (tally.tm - tally.nt) as f64 / tally.tm as f64;
            let want_rnt = (tally.tm - tally.nt) as f64 / tally.tp as f64;
            ensure!(row["recall_t"].as_f64() == Some(want_rt), "{user}: recall_t {}", row["recall_t"]);
            ensure!(row["recall_nt"].as_f64() == Some(want_rnt), "{user}: recall_nt {}", row["recall_nt"]);
        }
        let secs = start.elapsed().as_secs_f64();
        ensure!(secs < 120.0, "took {secs:.1}s (limit 120s)");
        Ok(format!(
            "{n} proposal(s) per user, blob coverage {:.1}%, tallies match, {secs:.1}s",
            proposals["ann1"].1 * 100.0
        ))
    })
}

fn isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let cases = 40;
    let mut checks = 0usize;
    for case in 0..cases {
        let result: Outcome = rt.block_on(async {
            let config = Config::default();
            let store = Arc::new(Store::open_in_memory(config.classes.clone()).map_err(|e| e.to_string())?);
            let slides = ["s0", "s1", "s2"];
            for s in slides {
                store
                    .register_slide(
                        &SlideRecord {
                            name: s.into(),
                            width: 500,
                            height: 500,
                            scale_factor: 1.0,
                            pyramid_dir: "/nonexistent".into(),
                            tile_size: 254,
                            overlap: 1,
                            tile_format: "png".into(),
                            patch_grid: "{}".into(),
                        },
                        false,
                    )
                    .map_err(|e| e.to_string())?;
            }
            let users: Vec<String> = (0..rng.random_range(2..5)).map(|i| format!("u{i}")).collect();
            let tokens: Vec<String> = users.iter().map(|u| store.add_user(u, Role::Annotator).unwrap().token).collect();
            let batches = ["b0", "b1", "b2"];
            let mut assigned = vec![vec![false; users.len()]; batches.len()];
            for (bi, b) in batches.iter().enumerate() {
                let members: Vec<String> = slides.iter().filter(|_| rng.random_bool(0.6)).map(|s| s.to_string()).collect();
                store.create_batch(b, &members, rng.random_bool(0.5)).map_err(|e| e.to_string())?;
                for (ui, u) in users.iter().enumerate() {
                    assigned[bi][ui] = rng.random_bool(0.5);
                    if assigned[bi][ui] {
                        store.assign_users(b, std::slice::from_ref(u)).map_err(|e| e.to_string())?;
                    }
                }
            }
            let app = router(AppState::new(store.clone(), config));
            let mut owned: Vec<(usize, usize, usize, i64)> = Vec::new();
            for _ in 0..rng.random_range(1..25) {
                let (u, b, s) = (rng.random_range(0..users.len()), rng.random_range(0..3), rng.random_range(0..3));
                let geometry = json!([[10.0, 10.0], [rng.random_range(20.0..400.0), 12.0], [15.0, rng.random_range(20.0..400.0)]]);
                let (status, body) = call(&app, Method::POST, "/api/annotations", &tokens[u], Some(polygon_body(batches[b], slides[s], geometry, "tumor"))).await;
                let slide_in_batch = store.batch(batches[b]).unwrap().slide_names.iter().any(|n| n == slides[s]);
                match (assigned[b][u], slide_in_batch) {
                    (false, _) => ensure!(status == StatusCode::FORBIDDEN, "unassigned post returned {status}"),
                    (true, true) => {
                        ensure!(status == StatusCode::CREATED, "assigned post returned {status}");
                        owned.push((u, b, s, body["id"].as_i64().unwrap()));
                    }
                    (true, false) => ensure!(status.is_client_error(), "post to slide outside batch returned {status}"),
                }
            }
            for u in 0..users.len() {
                for b in 0..3 {
                    for s in 0..3 {
                        let uri = format!("/api/annotations?batch={}&slide={}", batches[b], slides[s]);
                        let (status, body) = call(&app, Method::GET, &uri, &tokens[u], None).await;
                        if !assigned[b][u] {
                            ensure!(status == StatusCode::FORBIDDEN, "unassigned listing returned {status}");
                            continue;
                        }
                        let mut seen: Vec<i64> = body.as_array().map(|a| a.iter().map(|v| v["id"].as_i64().unwrap()).collect()).unwrap_or_default();
                        seen.sort();
                        let want: Vec<i64> = owned.iter().filter(|o| o.0 == u && o.1 == b && o.2 == s).map(|o| o.3).collect();
                        ensure!(seen == want, "{} sees {seen:?} in {}/{}, expected {want:?}", users[u], batches[b], slides[s]);
                        checks += 1;
                    }
                }
                for o in owned.iter().filter(|o| o.0 != u) {
                    for (method, uri, body) in [
                        (Method::GET, format!("/api/annotations/{}", o.3), None),
                        (Method::DELETE, format!("/api/annotations/{}", o.3), None),
                        (Method::PUT, format!("/api/annotations/{}/style", o.3), Some(json!({"line_color": "#000000", "line_thickness": 1.0, "fill_color": "#000000", "fill_opacity": 0.5}).to_string())),
                    ] {
                        let (status, _) = call(&app, method.clone(), &uri, &tokens[u], body).await;
                        ensure!(status == StatusCode::NOT_FOUND, "{method} {uri} by {} returned {status}", users[u]);
                        checks += 1;
                    }
                }
            }
            Ok(String::new())
        });
        result.map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok(format!("{cases} random assignments, {checks} view checks, no leaks"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("pyramid correctness", pyramid_correctness),
        ("patch grid", patch_grid),
        ("otsu", otsu),
        ("heatmap", heatmap),
        ("semisup", semisup),
        ("metrics", metrics),
        ("end-to-end", end_to_end),
        ("isolation", isolation),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
