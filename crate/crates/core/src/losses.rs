//! Training objectives with exact gradients, and ground-truth target rendering.

use serde::{Deserialize, Serialize};

use crate::cmp::KamSet;
use crate::error::{Error, Result};
use crate::metrics::{match_instances, SimilarityTensor};
use crate::model::{GtInstance, KemGrid, PoseSet, HEATMAP_CHANNELS, OFFSET_CHANNELS};
use crate::refine::RefinedHeatmaps;
use crate::skeleton::{SkeletonSpec, NUM_KEYPOINTS};
use crate::tensor::Tensor;

pub const DEFAULT_HEATMAP_SIGMA: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the offset and kernel terms of the total loss.
    pub lambda_total: f64,
    pub fg_weight: f64,
    pub bg_weight: f64,
    /// SmoothL1 cut-off.
    pub beta: f64,
    pub top1_lambda: f64,
    /// Exponent applied to the person area in the offset loss.
    pub area_exponent: f64,
    /// Regress KAMs onto the clamped (rather than raw) similarity tensor.
    pub clamp_kernel_target: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_total: 0.01,
            fg_weight: 1.0,
            bg_weight: 0.1,
            beta: 1.0 / 9.0,
            top1_lambda: crate::refine::DEFAULT_TOP1_WEIGHT,
            area_exponent: 1.0,
            clamp_kernel_target: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.fg_weight, self.bg_weight, self.beta, self.top1_lambda];
        if positive.iter().any(|v| !(*v > 0.0)) || !(self.lambda_total >= 0.0) {
            return Err(Error::InvalidArgument(
                "loss weights must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn gaussian(dx: f64, dy: f64, sigma: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Ground-truth center texel of an instance: its visible-keypoint bbox
/// center, rounded to the nearest texel.
pub fn gt_center_texel(
    gt: &GtInstance,
    stride: usize,
    h: usize,
    w: usize,
) -> Option<(usize, usize)> {
    let bb = gt.bbox()?;
    let s = stride as f64;
    let cx = ((bb[0] + bb[2]) / 2.0 / s)
        .round()
        .clamp(0.0, (w - 1) as f64);
    let cy = ((bb[1] + bb[3]) / 2.0 / s)
        .round()
        .clamp(0.0, (h - 1) as f64);
    Some((cx as usize, cy as usize))
}

/// Rendered training targets for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapTargets {
    /// `18 x h x w`, keypoints then center; peak value 1.
    pub heatmaps: Tensor,
    /// `h x w`, 1 on annotated-person regions, 0 elsewhere.
    pub mask: Tensor,
}

/// Unnormalized Gaussians (std `sigma` texels) at every visible keypoint and
/// at each instance center, max-combined across instances. The foreground
/// mask covers each person's keypoint bbox grown by `3 sigma`.
pub fn render_gt_heatmaps(
    gts: &[GtInstance],
    stride: usize,
    h: usize,
    w: usize,
    sigma: f64,
) -> HeatmapTargets {
    let mut heatmaps = Tensor::zeros(&[HEATMAP_CHANNELS, h, w]);
    let mut mask = Tensor::zeros(&[h, w]);
    let s = stride as f64;
    for gt in gts {
        for j in (0..NUM_KEYPOINTS).filter(|&j| gt.is_visible(j)) {
            let (kx, ky) = (gt.keypoints[j][0] / s, gt.keypoints[j][1] / s);
            let plane = heatmaps.slab_mut(&[j]);
            for y in 0..h {
                for x in 0..w {
                    let v = gaussian(x as f64 - kx, y as f64 - ky, sigma);
                    let o = &mut plane[y * w + x];
                    *o = o.max(v);
                }
            }
        }
        if let Some((cx, cy)) = gt_center_texel(gt, stride, h, w) {
            let plane = heatmaps.slab_mut(&[crate::model::CENTER_CHANNEL]);
            for y in 0..h {
                for x in 0..w {
                    let v = gaussian(x as f64 - cx as f64, y as f64 - cy as f64, sigma);
                    let o = &mut plane[y * w + x];
                    *o = o.max(v);
                }
            }
        }
        if let Some(bb) = gt.bbox() {
            let grow = 3.0 * sigma;
            let x0 = (bb[0] / s - grow).floor().max(0.0) as usize;
            let y0 = (bb[1] / s - grow).floor().max(0.0) as usize;
            let x1 = ((bb[2] / s + grow).ceil().max(0.0) as usize).min(w.saturating_sub(1));
            let y1 = ((bb[3] / s + grow).ceil().max(0.0) as usize).min(h.saturating_sub(1));
            for y in y0..=y1.max(y0).min(h - 1) {
                for x in x0..=x1.max(x0).min(w - 1) {
                    mask.set(&[y, x], 1.0);
                }
            }
        }
    }
    HeatmapTargets { heatmaps, mask }
}

/// A ground-truth center texel with the area of its person.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtCenter {
    pub x: usize,
    pub y: usize,
    pub area: f64,
}

pub fn gt_centers(gts: &[GtInstance], stride: usize, h: usize, w: usize) -> Vec<GtCenter> {
    gts.iter()
        .filter_map(|g| {
            gt_center_texel(g, stride, h, w).map(|(x, y)| GtCenter { x, y, area: g.area })
        })
        .collect()
}

/// `34 x h x w` offsets (image pixels) from each texel within `radius`
/// (Chebyshev, texels) of a center to that person's keypoints. Texels near
/// several centers take the nearest one; ties go to the earlier instance.
pub fn render_gt_offsets(
    gts: &[GtInstance],
    stride: usize,
    h: usize,
    w: usize,
    radius: usize,
) -> Tensor {
    let mut out = Tensor::zeros(&[OFFSET_CHANNELS, h, w]);
    let mut owner_dist = vec![usize::MAX; h * w];
    let s = stride as f64;
    let plane = h * w;
    for gt in gts {
        let Some((cx, cy)) = gt_center_texel(gt, stride, h, w) else {
            continue;
        };
        for y in cy.saturating_sub(radius)..=(cy + radius).min(h - 1) {
            for x in cx.saturating_sub(radius)..=(cx + radius).min(w - 1) {
                let d = (x as isize - cx as isize).pow(2) + (y as isize - cy as isize).pow(2);
                let at = y * w + x;
                if (d as usize) >= owner_dist[at] {
                    continue;
                }
                owner_dist[at] = d as usize;
                let data = out.data_mut();
                for j in 0..NUM_KEYPOINTS {
                    data[2 * j * plane + at] = gt.keypoints[j][0] - x as f64 * s;
                    data[(2 * j + 1) * plane + at] = gt.keypoints[j][1] - y as f64 * s;
                }
            }
        }
    }
    out
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `(1/|D|) sum (w(x) (pred - gt))^2` with `w` = fg/bg weight from `mask`.
pub fn heatmap_loss(
    pred: &Tensor,
    gt: &Tensor,
    mask: &Tensor,
    weights: &LossWeights,
) -> Result<(f64, Tensor)> {
    same_shape(pred, gt, "heatmap loss")?;
    let plane = mask.len();
    if pred.ndim() != 3 || pred.shape()[1] * pred.shape()[2] != plane {
        return Err(Error::Shape(format!(
            "mask {:?} does not cover heatmaps {:?}",
            mask.shape(),
            pred.shape()
        )));
    }
    let count = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    let m = mask.data();
    for (i, ((p, g), dg)) in pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(grad.data_mut())
        .enumerate()
    {
        let w = if m[i % plane] > 0.0 {
            weights.fg_weight
        } else {
            weights.bg_weight
        };
        let r = w * (p - g);
        loss += r * r;
        *dg = 2.0 * w * r / count;
    }
    Ok((loss / count, grad))
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Area-weighted SmoothL1 over the 34 offset channels at each ground-truth
/// center, averaged over centers.
pub fn offset_loss(
    pred: &Tensor,
    gt: &Tensor,
    centers: &[GtCenter],
    weights: &LossWeights,
) -> Result<(f64, Tensor)> {
    same_shape(pred, gt, "offset loss")?;
    if centers.is_empty() {
        return Err(Error::NoCenters);
    }
    let (h, w) = (pred.shape()[1], pred.shape()[2]);
    let plane = h * w;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    let inv = 1.0 / centers.len() as f64;
    for c in centers {
        if c.x >= w || c.y >= h {
            return Err(Error::InvalidArgument(format!(
                "center ({}, {}) outside {w}x{h}",
                c.x, c.y
            )));
        }
        let at = c.y * w + c.x;
        let area_w = c.area.powf(weights.area_exponent);
        for ch in 0..OFFSET_CHANNELS {
            let i = ch * plane + at;
            let r = pred.data()[i] - gt.data()[i];
            loss += area_w * smooth_l1(r, weights.beta) * inv;
            grad.data_mut()[i] += area_w * smooth_l1_grad(r, weights.beta) * inv;
        }
    }
    Ok((loss, grad))
}

/// Refined-heatmap targets `N x 17 x a x a`: unit-peak Gaussians (std
/// `sigma`) at each matched ground-truth keypoint, evaluated on the global
/// lattice. Unmatched instances and invisible keypoints give zero planes.
pub fn local_gt_heatmaps(
    grid: &KemGrid,
    matched: &[Option<&GtInstance>],
    sigma: f64,
) -> Result<Tensor> {
    let n = grid.num_instances();
    if matched.len() != n {
        return Err(Error::Shape(format!(
            "{} matches for {n} instances",
            matched.len()
        )));
    }
    let a = grid.window;
    let mut out = Tensor::zeros(&[n, NUM_KEYPOINTS, a, a]);
    for (i, gt) in matched.iter().enumerate() {
        let Some(gt) = gt else { continue };
        for j in (0..NUM_KEYPOINTS).filter(|&j| gt.is_visible(j)) {
            let (gx, gy) = (gt.keypoints[j][0], gt.keypoints[j][1]);
            let pts = &grid.coords.data()[grid.coords.offset(&[i, j, 0, 0, 0])..][..a * a * 2];
            let plane = out.slab_mut(&[i, j]);
            for (cell, o) in plane.iter_mut().enumerate() {
                *o = gaussian(pts[2 * cell] - gx, pts[2 * cell + 1] - gy, sigma);
            }
        }
    }
    Ok(out)
}

/// Mean squared error over all cells.
pub fn refined_heatmap_loss(refined: &RefinedHeatmaps, target: &Tensor) -> Result<(f64, Tensor)> {
    same_shape(&refined.values, target, "refined heatmap loss")?;
    let mut grad = Tensor::zeros(target.shape());
    if target.is_empty() {
        return Ok((0.0, grad));
    }
    let count = target.len() as f64;
    let mut loss = 0.0;
    for ((r, t), g) in refined
        .values
        .data()
        .iter()
        .zip(target.data())
        .zip(grad.data_mut())
    {
        let d = r - t;
        loss += d * d;
        *g = 2.0 * d / count;
    }
    Ok((loss / count, grad))
}

/// Regression target for one instance's KAMs.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTarget {
    /// `17 x k x k` similarity map against the matched ground truth.
    pub target: Vec<f64>,
    /// Matching score of the selected ground truth.
    pub match_score: f64,
    /// Similarity of each current keypoint to its matched ground truth.
    pub keypoint_weights: [f64; NUM_KEYPOINTS],
    pub gt_index: usize,
}

/// Matches each instance through its local KEMs and assembles its KAM target.
pub fn kernel_targets(
    poses: &PoseSet,
    local: &KemGrid,
    gts: &[GtInstance],
    spec: &SkeletonSpec,
    clamp: bool,
) -> Vec<Option<KernelTarget>> {
    let matches = match_instances(local, gts, spec);
    matches
        .into_iter()
        .enumerate()
        .map(|(n, m)| {
            let m = m?;
            let gt = &gts[m.gt_index];
            let s = crate::metrics::similarity_tensor(local, n, std::slice::from_ref(gt), spec);
            let target = if clamp {
                s.clamped_for(0)
            } else {
                SimilarityTensor {
                    clamp_floor: f64::NEG_INFINITY,
                    ..s
                }
                .clamped_for(0)
            };
            let mut keypoint_weights = [0.0; NUM_KEYPOINTS];
            for (j, w) in keypoint_weights.iter_mut().enumerate() {
                if gt.is_visible(j) {
                    let q = (gt.keypoints[j][0], gt.keypoints[j][1]);
                    *w = crate::metrics::keypoint_similarity(
                        poses.poses[n].xy(j),
                        q,
                        spec.sigma(j),
                        gt.area,
                    )
                    .unwrap_or(0.0);
                }
            }
            Some(KernelTarget {
                target,
                match_score: m.score,
                keypoint_weights,
                gt_index: m.gt_index,
            })
        })
        .collect()
}

/// `s_n* * sum_{k,i,j} s_k (K - S)^2` per instance, averaged over the batch.
/// Similarity weights are constants.
pub fn oks_kernel_loss(kams: &KamSet, targets: &[Option<KernelTarget>]) -> Result<(f64, Tensor)> {
    let n = kams.num_instances();
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for {n} instances",
            targets.len()
        )));
    }
    let mut grad = Tensor::zeros(kams.values.shape());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let kk = kams.window() * kams.window();
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        if t.target.len() != NUM_KEYPOINTS * kk {
            return Err(Error::Shape(
                "kernel target size does not match KAMs".into(),
            ));
        }
        for j in 0..NUM_KEYPOINTS {
            let wgt = t.match_score * t.keypoint_weights[j] * inv;
            let kam = kams.values.slab(&[i, j]);
            let tgt = &t.target[j * kk..(j + 1) * kk];
            let g = grad.slab_mut(&[i, j]);
            for c in 0..kk {
                let d = kam[c] - tgt[c];
                loss += wgt * d * d;
                g[c] = 2.0 * wgt * d;
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub heatmap: f64,
    pub refined: f64,
    pub offset: f64,
    pub kernel: f64,
}

/// `L = L_H + L_H~ + lambda (L_O + L_K)` and its partial derivative with
/// respect to each part.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> (f64, LossParts) {
    let lambda = weights.lambda_total;
    let value = parts.heatmap + parts.refined + lambda * (parts.offset + parts.kernel);
    (
        value,
        LossParts {
            heatmap: 1.0,
            refined: 1.0,
            offset: lambda,
            kernel: lambda,
        },
    )
}
