//! Keypoint similarity, OKS, greedy-matching AP, and the local-window
//! upper-bound oracle.

use std::fmt::Write as _;

use crate::coco::GroundTruth;
use crate::error::{Error, Result};
use crate::kem::local_kems;
use crate::model::{GtInstance, KemGrid, Pose, PoseSet};
use crate::skeleton::{SkeletonSpec, NUM_KEYPOINTS};
use crate::tensor::Tensor;

pub const DEFAULT_CLAMP_FLOOR: f64 = 0.5;
/// Area boundary between the medium and large COCO ranges, px^2.
pub const LARGE_AREA: f64 = 96.0 * 96.0;
pub const MEDIUM_AREA: f64 = 32.0 * 32.0;

/// `exp(-d^2 / (2 * area * (2 sigma)^2))`.
pub fn keypoint_similarity(pred: (f64, f64), gt: (f64, f64), sigma: f64, area: f64) -> Result<f64> {
    if !(area > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "area must be positive, got {area}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    Ok(similarity_unchecked(pred, gt, sigma, area))
}

#[inline]
fn similarity_unchecked(pred: (f64, f64), gt: (f64, f64), sigma: f64, area: f64) -> f64 {
    let dx = pred.0 - gt.0;
    let dy = pred.1 - gt.1;
    let k = 2.0 * sigma;
    (-(dx * dx + dy * dy) / (2.0 * area * k * k)).exp()
}

/// Mean keypoint similarity over the keypoints visible in `gt`.
pub fn oks(pred: &Pose, gt: &GtInstance, spec: &SkeletonSpec) -> Result<f64> {
    gt.validate()?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in (0..NUM_KEYPOINTS).filter(|&j| gt.is_visible(j)) {
        let g = (gt.keypoints[j][0], gt.keypoints[j][1]);
        sum += similarity_unchecked(pred.xy(j), g, spec.sigma(j), gt.area);
        count += 1;
    }
    if count == 0 {
        return Err(Error::UnmatchedInstance);
    }
    Ok(sum / count as f64)
}

/// Raw similarities `17 x k x k x N_gt` between one instance's local KEMs
/// and every ground-truth instance. Invisible ground-truth keypoints give 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTensor {
    pub values: Tensor,
    pub clamp_floor: f64,
}

impl SimilarityTensor {
    pub fn window(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn num_gt(&self) -> usize {
        self.values.shape()[3]
    }

    /// Elementwise `max(value, clamp_floor)`.
    pub fn clamped(&self) -> Tensor {
        let mut out = self.values.clone();
        for v in out.data_mut() {
            *v = v.max(self.clamp_floor);
        }
        out
    }

    /// Clamped `17 x k x k` slice for ground-truth index `g`.
    pub fn clamped_for(&self, g: usize) -> Vec<f64> {
        let ng = self.num_gt();
        self.values
            .data()
            .iter()
            .skip(g)
            .step_by(ng.max(1))
            .map(|v| v.max(self.clamp_floor))
            .collect()
    }
}

pub fn similarity_tensor(
    kems: &KemGrid,
    instance: usize,
    gts: &[GtInstance],
    spec: &SkeletonSpec,
) -> SimilarityTensor {
    let k = kems.window;
    let ng = gts.len();
    let mut values = Tensor::zeros(&[NUM_KEYPOINTS, k, k, ng]);
    let pts = kems.instance(instance);
    let out = values.data_mut();
    for j in 0..NUM_KEYPOINTS {
        let sigma = spec.sigma(j);
        for cell in 0..k * k {
            let p = (pts[2 * (j * k * k + cell)], pts[2 * (j * k * k + cell) + 1]);
            let base = (j * k * k + cell) * ng;
            for (g, gt) in gts.iter().enumerate() {
                if gt.is_visible(j) && gt.area > 0.0 {
                    let q = (gt.keypoints[j][0], gt.keypoints[j][1]);
                    out[base + g] = similarity_unchecked(p, q, sigma, gt.area);
                }
            }
        }
    }
    SimilarityTensor {
        values,
        clamp_floor: DEFAULT_CLAMP_FLOOR,
    }
}

/// Best-matching ground truth by mean clamped similarity; ties go to the
/// lowest index.
pub fn select_best_gt(s: &SimilarityTensor) -> Result<(usize, f64)> {
    let ng = s.num_gt();
    if ng == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut sums = vec![0.0; ng];
    for row in s.values.data().chunks_exact(ng) {
        for (acc, v) in sums.iter_mut().zip(row) {
            *acc += v.max(s.clamp_floor);
        }
    }
    let count = (s.values.len() / ng) as f64;
    let mut best = 0;
    for g in 1..ng {
        if sums[g] > sums[best] {
            best = g;
        }
    }
    Ok((best, sums[best] / count))
}

/// Matching of one predicted instance to ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceMatch {
    pub gt_index: usize,
    pub score: f64,
}

/// Matches every instance of `poses` to its best ground truth through its
/// local KEMs. Ground truth without visible keypoints never matches.
pub fn match_instances(
    kems: &KemGrid,
    gts: &[GtInstance],
    spec: &SkeletonSpec,
) -> Vec<Option<InstanceMatch>> {
    let usable: Vec<usize> = (0..gts.len())
        .filter(|&g| gts[g].num_visible() > 0 && gts[g].area > 0.0)
        .collect();
    let usable_gts: Vec<GtInstance> = usable.iter().map(|&g| gts[g].clone()).collect();
    (0..kems.num_instances())
        .map(|n| {
            let s = similarity_tensor(kems, n, &usable_gts, spec);
            select_best_gt(&s).ok().map(|(g, score)| InstanceMatch {
                gt_index: usable[g],
                score,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutput {
    pub poses: PoseSet,
    /// Matched ground-truth index and OKS after snapping, per instance.
    pub matches: Vec<Option<(usize, f64)>>,
    /// Mean OKS over matched instances (0 when nothing matched).
    pub mean_oks: f64,
}

/// Snaps every keypoint to its best-similarity cell in the local `k x k`
/// window against the instance's matched ground truth.
pub fn upper_bound_oracle(
    initial: &PoseSet,
    gts: &[GtInstance],
    spec: &SkeletonSpec,
    k: usize,
) -> Result<OracleOutput> {
    let kems = local_kems(initial, spec, k)?;
    let matches = match_instances(&kems, gts, spec);
    let center = (k / 2) * k + k / 2;
    let mut poses = initial.clone();
    let mut out_matches = Vec::with_capacity(initial.len());
    let mut total = 0.0;
    let mut matched = 0usize;
    for (n, m) in matches.iter().enumerate() {
        let Some(m) = m else {
            out_matches.push(None);
            continue;
        };
        let gt = &gts[m.gt_index];
        let pts = kems.instance(n);
        let pose = &mut poses.poses[n];
        for j in (0..NUM_KEYPOINTS).filter(|&j| gt.is_visible(j)) {
            let q = (gt.keypoints[j][0], gt.keypoints[j][1]);
            let at = |cell: usize| {
                let o = 2 * (j * k * k + cell);
                (pts[o], pts[o + 1])
            };
            let sim = |cell: usize| similarity_unchecked(at(cell), q, spec.sigma(j), gt.area);
            let mut best = center;
            let mut best_sim = sim(center);
            for cell in 0..k * k {
                let s = sim(cell);
                if s > best_sim {
                    best = cell;
                    best_sim = s;
                }
            }
            let (x, y) = at(best);
            pose.keypoints[j][0] = x;
            pose.keypoints[j][1] = y;
        }
        let score = oks(pose, gt, spec)?;
        total += score;
        matched += 1;
        out_matches.push(Some((m.gt_index, score)));
    }
    Ok(OracleOutput {
        poses,
        matches: out_matches,
        mean_oks: if matched > 0 {
            total / matched as f64
        } else {
            0.0
        },
    })
}

fn is_usable(gt: &GtInstance) -> bool {
    gt.num_visible() > 0 && gt.area > 0.0
}

/// OKS matrix `preds x gts`; unusable ground truth gets 0.
fn oks_matrix(preds: &[&Pose], gts: &[GtInstance], spec: &SkeletonSpec) -> Vec<Vec<f64>> {
    preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|g| {
                    if is_usable(g) {
                        oks(p, g, spec).unwrap_or(0.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Score-descending order, ties by original index.
fn score_order(poses: &PoseSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..poses.len()).collect();
    order.sort_by(|&a, &b| poses.poses[b].score.total_cmp(&poses.poses[a].score));
    order
}

/// Mean OKS over ground truth after one-to-one greedy matching (predictions
/// in score order take the best remaining ground truth). Unmatched ground
/// truth counts as 0.
pub fn mean_oks(results: &[(u64, PoseSet)], gts: &GroundTruth, spec: &SkeletonSpec) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (image_id, insts) in gts {
        let usable: Vec<GtInstance> = insts.iter().filter(|g| is_usable(g)).cloned().collect();
        count += usable.len();
        let Some((_, poses)) = results.iter().find(|(id, _)| id == image_id) else {
            continue;
        };
        let order = score_order(poses);
        let preds: Vec<&Pose> = order.iter().map(|&i| &poses.poses[i]).collect();
        let m = oks_matrix(&preds, &usable, spec);
        let mut taken = vec![false; usable.len()];
        for row in &m {
            let mut best: Option<usize> = None;
            for (g, &v) in row.iter().enumerate() {
                if !taken[g] && best.is_none_or(|b| v > row[b]) {
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                taken[g] = true;
                total += row[g];
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ApOptions {
    /// Only ground truth with area in `[lo, hi)` counts; others are ignored.
    pub area_range: Option<(f64, f64)>,
}

impl ApOptions {
    pub fn medium() -> Self {
        ApOptions {
            area_range: Some((MEDIUM_AREA, LARGE_AREA)),
        }
    }

    pub fn large() -> Self {
        ApOptions {
            area_range: Some((LARGE_AREA, f64::INFINITY)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    pub ap: f64,
    /// `(threshold, AP at threshold)`, thresholds 0.50..=0.95 step 0.05.
    pub per_threshold: Vec<(f64, f64)>,
    /// Set when there was no ground truth to evaluate against.
    pub empty: bool,
}

impl ApReport {
    pub fn thresholds() -> Vec<f64> {
        (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,ap\n");
        for (t, ap) in &self.per_threshold {
            let _ = writeln!(s, "{t:.2},{ap:.6}");
        }
        let _ = writeln!(s, "mean,{:.6}", self.ap);
        s
    }
}

struct Detection {
    score: f64,
    image: usize,
    index: usize,
    /// Per-threshold outcome: `Some(true)` TP, `Some(false)` FP, `None` ignored.
    outcome: Vec<Option<bool>>,
}

fn det_area(p: &Pose) -> f64 {
    let xs = p.keypoints.iter().map(|k| k[0]);
    let ys = p.keypoints.iter().map(|k| k[1]);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| {
        (a.min(y), b.max(y))
    });
    (x1 - x0) * (y1 - y0)
}

/// Simplified COCO keypoint AP: greedy score-ordered matching per image,
/// 101-point interpolated precision, averaged over OKS thresholds.
pub fn evaluate_ap(
    results: &[(u64, PoseSet)],
    gts: &GroundTruth,
    spec: &SkeletonSpec,
    options: ApOptions,
) -> ApReport {
    let thresholds = ApReport::thresholds();
    let in_range = |area: f64| match options.area_range {
        Some((lo, hi)) => area >= lo && area < hi,
        None => true,
    };
    let mut num_gt = 0usize;
    let mut dets: Vec<Detection> = Vec::new();
    for (img, (image_id, insts)) in gts.iter().enumerate() {
        let usable: Vec<GtInstance> = insts.iter().filter(|g| is_usable(g)).cloned().collect();
        let ignore: Vec<bool> = usable.iter().map(|g| !in_range(g.area)).collect();
        num_gt += ignore.iter().filter(|i| !**i).count();
        let Some((_, poses)) = results.iter().find(|(id, _)| id == image_id) else {
            continue;
        };
        let order = score_order(poses);
        let preds: Vec<&Pose> = order.iter().map(|&i| &poses.poses[i]).collect();
        let m = oks_matrix(&preds, &usable, spec);
        let mut outcomes = vec![vec![None; thresholds.len()]; preds.len()];
        for (ti, &t) in thresholds.iter().enumerate() {
            let mut taken = vec![false; usable.len()];
            for (d, row) in m.iter().enumerate() {
                // Prefer in-range ground truth, then highest OKS, then lowest index.
                let mut best: Option<usize> = None;
                for (g, &v) in row.iter().enumerate() {
                    if taken[g] || v < t {
                        continue;
                    }
                    best = match best {
                        None => Some(g),
                        Some(b) if ignore[b] && !ignore[g] => Some(g),
                        Some(b) if ignore[b] == ignore[g] && v > row[b] => Some(g),
                        keep => keep,
                    };
                }
                outcomes[d][ti] = match best {
                    Some(g) => {
                        taken[g] = true;
                        if ignore[g] {
                            None
                        } else {
                            Some(true)
                        }
                    }
                    None if !in_range(det_area(preds[d])) => None,
                    None => Some(false),
                };
            }
        }
        for (d, outcome) in outcomes.into_iter().enumerate() {
            dets.push(Detection {
                score: preds[d].score,
                image: img,
                index: order[d],
                outcome,
            });
        }
    }
    if num_gt == 0 {
        return ApReport {
            ap: 0.0,
            per_threshold: thresholds.iter().map(|&t| (t, 0.0)).collect(),
            empty: true,
        };
    }
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.index.cmp(&b.index))
    });
    let per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .enumerate()
        .map(|(ti, &t)| {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut recall = Vec::new();
            let mut precision = Vec::new();
            for det in &dets {
                match det.outcome[ti] {
                    Some(true) => tp += 1,
                    Some(false) => fp += 1,
                    None => continue,
                }
                recall.push(tp as f64 / num_gt as f64);
                precision.push(tp as f64 / (tp + fp) as f64);
            }
            (t, interpolated_ap(&recall, &precision))
        })
        .collect();
    let ap = per_threshold.iter().map(|(_, v)| v).sum::<f64>() / per_threshold.len() as f64;
    ApReport {
        ap,
        per_threshold,
        empty: false,
    }
}

/// Area under the monotone precision envelope, sampled at 101 recall points.
fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < target);
        if idx < envelope.len() {
            sum += envelope[idx];
        }
    }
    sum / 101.0
}
