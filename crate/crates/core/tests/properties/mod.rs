//! Randomized oracle comparisons and invariant properties, shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use logocap::cmp::{cmp_forward, init_params, CmpConfig, KamSet, LocalContext, Mode, NormVariant};
use logocap::decode::decode;
use logocap::kem::{local_kems, ReweighedHeatmaps};
use logocap::metrics::{evaluate_ap, oks, similarity_tensor, ApOptions};
use logocap::model::{DenseMaps, Pose, PoseSet};
use logocap::refine::contextual_adaptation;
use logocap::skeleton::{SkeletonSpec, COCO_KEYPOINT_NAMES};
use logocap::tensor::Tensor;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::reference::{self, max_abs_diff, random_gt, random_poses, uniform_tensor, K};

pub const ORACLE_TOLERANCE: f64 = 1e-12;

fn odd(rng: &mut ChaCha8Rng, max: usize) -> usize {
    2 * rng.random_range(0..=(max - 1) / 2) + 1
}

/// Worst deviation of `similarity_tensor` from the scalar reference on one
/// random instance set.
pub fn similarity_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SkeletonSpec::coco();
    let n = rng.random_range(1..=3);
    let k = odd(&mut rng, 25);
    let poses = random_poses(&mut rng, n, 200.0);
    let gts: Vec<_> = (0..rng.random_range(1..=3))
        .map(|g| random_gt(&mut rng, g, 200.0))
        .collect();
    let kems = local_kems(&poses, &spec, k).unwrap();
    (0..n)
        .map(|i| {
            let got = similarity_tensor(&kems, i, &gts, &spec);
            let want = reference::similarity_tensor(&poses.poses[i], &gts, spec.sigmas(), k);
            max_abs_diff(got.values.data(), &want)
        })
        .fold(0.0, f64::max)
}

pub fn adaptation_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let a = odd(&mut rng, 25);
    let k = odd(&mut rng, a.min(11));
    let hbar = ReweighedHeatmaps {
        values: uniform_tensor(&mut rng, &[n, K, a, a], -1.0, 1.0),
        window: a,
        sigma: (a as f64 - 1.0).max(1.0) / 6.0,
    };
    let kams = KamSet {
        values: uniform_tensor(&mut rng, &[n, K, k, k], 0.0, 1.0),
    };
    let got = contextual_adaptation(&hbar, &kams).unwrap();
    let want = reference::correlate(&hbar.values, &kams.values);
    max_abs_diff(got.values.data(), want.data())
}

pub fn cmp_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let d = rng.random_range(2..=8);
    let k = odd(&mut rng, 5);
    let config = CmpConfig {
        latent_dim: d,
        feature_channels: rng.random_range(1..=6),
        window: k,
        norm: if rng.random_bool(0.5) {
            NormVariant::Plain
        } else {
            NormVariant::Recalibrating
        },
        positional: true,
    };
    let mut params = init_params(seed, &config).unwrap();
    params.randomize(seed ^ 0x5eed, 0.5);
    let codes = uniform_tensor(&mut rng, &[n, K * d, k, k], -1.0, 1.0);
    let train = rng.random_bool(0.5);
    let mode = if train { Mode::Train } else { Mode::Eval };
    let (kams, _) = cmp_forward(
        &LocalContext {
            codes: codes.clone(),
        },
        &params,
        mode,
    )
    .unwrap();
    let want = reference::cmp_forward(&codes, &params, train);
    max_abs_diff(kams.values.data(), want.data())
}

fn argmax(plane: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in plane.iter().enumerate() {
        if *v > plane[best] {
            best = i;
        }
    }
    best
}

/// `(seed, n, a, k)` with odd windows and `k <= a`.
pub fn delta_strategy() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..=3, 0usize..=12).prop_flat_map(|(seed, n, ha)| {
        (Just(seed), Just(n), Just(2 * ha + 1), 0..=ha.min(5))
            .prop_map(|(s, n, a, hk)| (s, n, a, 2 * hk + 1))
    })
}

/// A delta KAM leaves the reweighed heatmap and its argmax unchanged.
pub fn delta_identity((seed, n, a, k): (u64, usize, usize, usize)) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hbar = ReweighedHeatmaps {
        values: uniform_tensor(&mut rng, &[n, K, a, a], -1.0, 1.0),
        window: a,
        sigma: 1.0,
    };
    let mut kams = Tensor::zeros(&[n, K, k, k]);
    for b in 0..n {
        for j in 0..K {
            kams.set(&[b, j, k / 2, k / 2], 1.0);
        }
    }
    let refined = contextual_adaptation(&hbar, &KamSet { values: kams }).unwrap();
    prop_assert_eq!(refined.values.data(), hbar.values.data());
    for b in 0..n {
        for j in 0..K {
            prop_assert_eq!(
                argmax(refined.values.slab(&[b, j])),
                argmax(hbar.values.slab(&[b, j]))
            );
        }
    }
    Ok(())
}

/// `(seed, h, w, stride, tx, ty, pad)`.
pub fn decode_strategy() -> impl Strategy<Value = (u64, usize, usize, usize, usize, usize, usize)> {
    (
        any::<u64>(),
        4usize..=14,
        4usize..=14,
        1usize..=4,
        0usize..=6,
        0usize..=6,
        0usize..=3,
    )
}

fn embed(src: &Tensor, h: usize, w: usize, tx: usize, ty: usize) -> Tensor {
    let s = src.shape();
    let mut out = Tensor::zeros(&[s[0], h, w]);
    for c in 0..s[0] {
        for y in 0..s[1] {
            for x in 0..s[2] {
                out.set(&[c, y + ty, x + tx], src.at(&[c, y, x]));
            }
        }
    }
    out
}

/// Shifting the maps by `(tx, ty)` texels shifts every decoded center and
/// keypoint by `stride * (tx, ty)` pixels and keeps the scores.
pub fn decode_equivariance(
    (seed, h, w, stride, tx, ty, pad): (u64, usize, usize, usize, usize, usize, usize),
) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heat = uniform_tensor(&mut rng, &[K + 1, h, w], 0.0, 1.0);
    let offsets = uniform_tensor(&mut rng, &[2 * K, h, w], -20.0, 20.0);
    let feats = uniform_tensor(&mut rng, &[1, h, w], 0.0, 1.0);
    let (bh, bw) = (h + ty + pad, w + tx + pad);
    let small = DenseMaps::new(heat.clone(), offsets.clone(), feats.clone(), stride).unwrap();
    let big = DenseMaps::new(
        embed(&heat, bh, bw, tx, ty),
        embed(&offsets, bh, bw, tx, ty),
        embed(&feats, bh, bw, tx, ty),
        stride,
    )
    .unwrap();
    let a = decode(&small, 30, 0.01);
    let b = decode(&big, 30, 0.01);
    prop_assert_eq!(a.len(), b.len());
    let (sx, sy) = ((stride * tx) as f64, (stride * ty) as f64);
    let close = |p: f64, q: f64| (p - q).abs() <= 1e-9 * (1.0 + p.abs());
    for (p, q) in a.iter().zip(b.iter()) {
        prop_assert!(close(p.center[0] + sx, q.center[0]) && close(p.center[1] + sy, q.center[1]));
        prop_assert_eq!(p.center[2], q.center[2]);
        prop_assert_eq!(p.score, q.score);
        for j in 0..K {
            prop_assert!(close(p.keypoints[j][0] + sx, q.keypoints[j][0]));
            prop_assert!(close(p.keypoints[j][1] + sy, q.keypoints[j][1]));
            prop_assert_eq!(p.keypoints[j][2], q.keypoints[j][2]);
        }
    }
    Ok(())
}

/// `(seed, k)` with odd `k <= 25`.
pub fn kem_strategy() -> impl Strategy<Value = (u64, usize)> {
    (any::<u64>(), 0usize..=12).prop_map(|(s, h)| (s, 2 * h + 1))
}

/// Adjacent local lattice cells of keypoint type `j` are exactly
/// `sigma_j / min(sigma)` apart and the center cell is the keypoint itself,
/// for arbitrary per-type sigmas.
pub fn kem_stride((seed, k): (u64, usize)) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigmas: Vec<f64> = (0..K).map(|_| rng.random_range(0.02..0.2)).collect();
    let names = COCO_KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect();
    let spec = SkeletonSpec::new(names, sigmas.clone()).unwrap();
    let min = sigmas.iter().cloned().fold(f64::INFINITY, f64::min);
    let n = rng.random_range(1..=3);
    let poses = random_poses(&mut rng, n, 500.0);
    let grid = local_kems(&poses, &spec, k).unwrap();
    let r = k / 2;
    for (n, pose) in poses.iter().enumerate() {
        for j in 0..K {
            let rate = sigmas[j] / min;
            prop_assert_eq!(grid.point(n, j, r, r), pose.xy(j));
            let tol = 1e-12 * (1.0 + pose.xy(j).0.abs().max(pose.xy(j).1.abs()));
            for u in 0..k {
                for v in 0..k {
                    let (x, y) = grid.point(n, j, u, v);
                    prop_assert!((x - pose.xy(j).0 - (v as f64 - r as f64) * rate).abs() <= tol);
                    prop_assert!((y - pose.xy(j).1 - (u as f64 - r as f64) * rate).abs() <= tol);
                    if v > 0 {
                        let (px, py) = grid.point(n, j, u, v - 1);
                        prop_assert!((x - px - rate).abs() <= tol && y == py);
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn oks_strategy() -> impl Strategy<Value = (u64, f64, f64)> {
    (any::<u64>(), -1000.0f64..1000.0, -1000.0f64..1000.0)
}

/// OKS is unchanged when prediction and ground truth move together.
pub fn oks_translation((seed, dx, dy): (u64, f64, f64)) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SkeletonSpec::coco();
    let mut gt = random_gt(&mut rng, 1, 300.0);
    let mut pred = gt_like(&gt);
    for kp in pred.keypoints.iter_mut() {
        kp[0] += rng.random_range(-30.0..30.0);
        kp[1] += rng.random_range(-30.0..30.0);
    }
    let before = oks(&pred, &gt, &spec).unwrap();
    for kp in pred.keypoints.iter_mut().chain(gt.keypoints.iter_mut()) {
        kp[0] += dx;
        kp[1] += dy;
    }
    let after = oks(&pred, &gt, &spec).unwrap();
    prop_assert!((before - after).abs() <= 1e-9, "{} vs {}", before, after);
    Ok(())
}

fn gt_like(gt: &logocap::model::GtInstance) -> Pose {
    let mut keypoints = gt.keypoints;
    for kp in keypoints.iter_mut() {
        kp[2] = 1.0;
    }
    Pose {
        center: [keypoints[0][0], keypoints[0][1], 1.0],
        keypoints,
        score: 1.0,
    }
}

pub fn ap_strategy() -> impl Strategy<Value = (u64, usize)> {
    (any::<u64>(), 1usize..=4)
}

/// Predictions identical to the ground truth score AP 1.0.
pub fn ap_perfect((seed, images): (u64, usize)) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SkeletonSpec::coco();
    let mut gts = Vec::new();
    let mut results = Vec::new();
    for id in 1..=images as u64 {
        let insts: Vec<_> = (0..rng.random_range(1..=4))
            .map(|g| random_gt(&mut rng, g, 400.0))
            .collect();
        let poses = insts
            .iter()
            .map(|g| {
                let mut p = gt_like(g);
                p.score = rng.random_range(0.01..1.0);
                p
            })
            .collect();
        results.push((id, PoseSet::new(poses)));
        gts.push((id, insts));
    }
    let report = evaluate_ap(&results, &gts, &spec, ApOptions::default());
    prop_assert!((report.ap - 1.0).abs() <= 1e-12, "ap {}", report.ap);
    for (_, v) in &report.per_threshold {
        prop_assert!((v - 1.0).abs() <= 1e-12);
    }
    Ok(())
}
