//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::sync::Arc;

use autodiff::{SamplePlan, Tape, Tensor, Var};
use capgen::detector::Detection;
use capgen::scene::BoundingBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- AP by brute force -------------------------------------------------

fn overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0);
    let (bx0, by0) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0);
    let (ax1, ay1) = (a.cx + a.w / 2.0, a.cy + a.h / 2.0);
    let (bx1, by1) = (b.cx + b.w / 2.0, b.cy + b.h / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)
}

/// True-positive count when only detections scoring at least `t` are kept,
/// recomputed from scratch.
fn true_positives_at(dets: &[Vec<Detection>], truths: &[Vec<BoundingBox>], t: f64) -> (usize, usize) {
    let mut kept: Vec<(usize, Detection)> = Vec::new();
    for (s, ds) in dets.iter().enumerate() {
        kept.extend(ds.iter().filter(|d| d.score >= t).map(|d| (s, *d)));
    }
    kept.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let mut used: Vec<Vec<bool>> = truths.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0;
    for (s, d) in &kept {
        let mut pick: Option<(usize, f64)> = None;
        for (g, gt) in truths[*s].iter().enumerate() {
            let v = overlap(&d.bbox, gt);
            if !used[*s][g] && v >= 0.5 && pick.map_or(true, |(_, pv)| v > pv) {
                pick = Some((g, v));
            }
        }
        if let Some((g, _)) = pick {
            used[*s][g] = true;
            tp += 1;
        }
    }
    (tp, kept.len())
}

/// Enumerates every score threshold, builds the (recall, precision)
/// table, and integrates max precision at recall at least r over r.
/// Requires distinct scores.
pub fn brute_force_ap(dets: &[Vec<Detection>], truths: &[Vec<BoundingBox>]) -> f64 {
    let n_gt: usize = truths.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = dets.iter().flatten().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let table: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let (tp, n) = true_positives_at(dets, truths, t);
            (tp as f64 / n_gt as f64, tp as f64 / n as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = table.iter().map(|p| p.0).collect();
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let best = table.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    ap
}

/// A small scene set with distinct scores: up to 6 detections and up to
/// 4 ground-truth boxes split over one or two scenes.
pub fn random_ap_case(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<BoundingBox>>) {
    let scenes = rng.gen_range(1..=2);
    let n_gt = rng.gen_range(0..=4);
    let n_det = rng.gen_range(0..=6);
    let mut truths = vec![Vec::new(); scenes];
    for _ in 0..n_gt {
        let b = BoundingBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3));
        truths[rng.gen_range(0..scenes)].push(b);
    }
    let all: Vec<(usize, BoundingBox)> = truths.iter().enumerate().flat_map(|(s, g)| g.iter().map(move |b| (s, *b))).collect();
    let mut scores: Vec<f64> = (0..n_det).map(|i| (i as f64 + rng.gen::<f64>()) / n_det as f64).collect();
    for i in (1..scores.len()).rev() {
        scores.swap(i, rng.gen_range(0..=i));
    }
    let mut dets = vec![Vec::new(); scenes];
    for score in scores {
        let (s, bbox) = if !all.is_empty() && rng.gen_bool(0.7) {
            let (s, g) = all[rng.gen_range(0..all.len())];
            let j = 0.4 * rng.gen::<f64>();
            (s, BoundingBox::new(g.cx + j * g.w * (rng.gen::<f64>() - 0.5), g.cy + j * g.h * (rng.gen::<f64>() - 0.5), g.w, g.h))
        } else {
            (rng.gen_range(0..scenes), BoundingBox::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), 0.2, 0.2))
        };
        dets[s].push(Detection { bbox, score });
    }
    (dets, truths)
}

// ---- finite differences ------------------------------------------------

/// Largest relative error between analytic and central-difference
/// gradients of `f` at `x`. Where both are below 1e-3 in magnitude the
/// absolute error is scaled by 100, so a 1e-4 bar means 1e-6 absolute.
pub fn gradient_error(x: &[f64], analytic: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let scale = numeric.abs().max(a.abs());
        let err = if scale < 1e-3 { (a - numeric).abs() * 100.0 } else { (a - numeric).abs() / scale };
        worst = worst.max(err);
    }
    worst
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

fn op_check(shapes: &[(&[usize], f64, f64)], build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let inputs: Vec<Tensor> = shapes.iter().map(|(s, lo, hi)| rand_tensor(rng, s, *lo, *hi)).collect();
    let eval = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars);
        (tape, vars, root)
    };
    let (tape, vars, root) = eval(&inputs);
    let grads = tape.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let err = gradient_error(input.data(), analytic.data(), 1e-5, |x| {
            let mut ts = inputs.clone();
            ts[i] = Tensor::new(input.shape(), x.to_vec()).unwrap();
            let (tape, _, root) = eval(&ts);
            tape.value(root).item()
        });
        worst = worst.max(err);
    }
    worst
}

/// Worst relative gradient error of every tape op over `cases` random
/// inputs each.
pub fn per_op_errors(cases: usize) -> Vec<(&'static str, f64)> {
    let pair: &[(&[usize], f64, f64)] = &[(&[2, 3], -2.0, 2.0), (&[2, 3], 0.5, 2.0)];
    let signed: &[(&[usize], f64, f64)] = &[(&[4], -2.0, 2.0)];
    let positive: &[(&[usize], f64, f64)] = &[(&[4], 0.2, 3.0)];
    let matrix: &[(&[usize], f64, f64)] = &[(&[3, 4], -2.0, 2.0)];
    let mm: &[(&[usize], f64, f64)] = &[(&[2, 3], -1.0, 1.0), (&[3, 4], -1.0, 1.0)];
    let conv: &[(&[usize], f64, f64)] = &[(&[1, 4, 4], -1.0, 1.0), (&[2, 1, 3, 3], -1.0, 1.0), (&[2], -1.0, 1.0)];
    let image: &[(&[usize], f64, f64)] = &[(&[2, 4, 4], 0.0, 1.0)];
    let plan = Arc::new(SamplePlan::new(4, 4, 3, 3, |x, y| Some((0.37 + 1.1 * x as f64, 0.81 + 0.9 * y as f64))));
    let index = Arc::new(vec![0usize, 5, 5, 2, 11]);
    let ops: Vec<(&'static str, &[(&[usize], f64, f64)], Build)> = vec![
        ("add", pair, Box::new(|t, v| { let y = t.add(v[0], v[1]).unwrap(); project(t, y, 1) })),
        ("sub", pair, Box::new(|t, v| { let y = t.sub(v[0], v[1]).unwrap(); project(t, y, 2) })),
        ("mul", pair, Box::new(|t, v| { let y = t.mul(v[0], v[1]).unwrap(); project(t, y, 3) })),
        ("div", pair, Box::new(|t, v| { let y = t.div(v[0], v[1]).unwrap(); project(t, y, 4) })),
        ("neg", signed, Box::new(|t, v| { let y = t.neg(v[0]); project(t, y, 5) })),
        ("exp", signed, Box::new(|t, v| { let y = t.exp(v[0]); project(t, y, 6) })),
        ("log", positive, Box::new(|t, v| { let y = t.log(v[0]); project(t, y, 7) })),
        ("powf", positive, Box::new(|t, v| { let y = t.powf(v[0], 2.5); project(t, y, 8) })),
        ("logistic", signed, Box::new(|t, v| { let y = t.logistic(v[0]); project(t, y, 9) })),
        ("affine", signed, Box::new(|t, v| { let y = t.affine(v[0], -1.5, 0.25); project(t, y, 10) })),
        ("leaky_relu", signed, Box::new(|t, v| { let y = t.leaky_relu(v[0], 0.1); project(t, y, 11) })),
        ("clamp", signed, Box::new(|t, v| { let y = t.clamp(v[0], -0.5, 0.7); project(t, y, 12) })),
        ("softmax", matrix, Box::new(|t, v| { let y = t.softmax(v[0]).unwrap(); project(t, y, 13) })),
        ("sum", matrix, Box::new(|t, v| { let y = t.exp(v[0]); t.sum(y) })),
        ("mean", matrix, Box::new(|t, v| { let y = t.exp(v[0]); t.mean(y) })),
        ("max", matrix, Box::new(|t, v| { let y = t.exp(v[0]); t.max(y).unwrap() })),
        ("matmul", mm, Box::new(|t, v| { let y = t.matmul(v[0], v[1]).unwrap(); project(t, y, 14) })),
        ("transpose2d", mm, Box::new(|t, v| { let y = t.transpose2d(v[1]).unwrap(); project(t, y, 15) })),
        ("reshape", mm, Box::new(|t, v| { let y = t.reshape(v[1], &[2, 6]).unwrap(); project(t, y, 16) })),
        ("gather", mm, Box::new(move |t, v| { let y = t.gather(v[1], index.clone(), &[5]).unwrap(); project(t, y, 17) })),
        ("conv2d", conv, Box::new(|t, v| { let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap(); project(t, y, 18) })),
        ("bilinear_sample", image, Box::new(move |t, v| { let y = t.bilinear_sample(v[0], plan.clone()).unwrap(); project(t, y, 19) })),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    ops.iter()
        .map(|(name, shapes, build)| {
            let worst = (0..cases).map(|_| op_check(shapes, build, &mut rng)).fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}
