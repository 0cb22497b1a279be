//! Local-global contextual adaptation: each instance's KAMs act as dynamic
//! correlation kernels over its reweighed global heatmap windows, and the
//! refined windows are decoded into final poses.

use crate::cmp::KamSet;
use crate::error::{Error, Result};
use crate::kem::ReweighedHeatmaps;
use crate::model::{KemGrid, Pose, PoseSet};
use crate::skeleton::NUM_KEYPOINTS;
use crate::tensor::Tensor;

pub const DEFAULT_TOP1_WEIGHT: f64 = 0.75;

/// Refined heatmaps `N x 17 x a x a`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedHeatmaps {
    pub values: Tensor,
}

fn check_shapes(hbar: &Tensor, kams: &Tensor) -> Result<(usize, usize, usize)> {
    let hs = hbar.shape();
    let ks = kams.shape();
    if hs.len() != 4 || ks.len() != 4 || hs[1] != NUM_KEYPOINTS || ks[1] != NUM_KEYPOINTS {
        return Err(Error::Shape(format!(
            "expected N x 17 x a x a and N x 17 x k x k, got {hs:?} and {ks:?}"
        )));
    }
    if hs[0] != ks[0] {
        return Err(Error::Shape(format!(
            "instance count differs: heatmaps {} vs kernels {}",
            hs[0], ks[0]
        )));
    }
    if hs[2] != hs[3] || ks[2] != ks[3] || ks[2] % 2 == 0 {
        return Err(Error::Shape(
            "windows must be square and kernels odd".into(),
        ));
    }
    Ok((hs[0], hs[2], ks[2]))
}

/// Same-size 2-D correlation of one `a x a` plane with one `k x k` kernel,
/// zero padding `k / 2`, accumulated into `out`.
fn correlate_plane(input: &[f64], kernel: &[f64], a: usize, k: usize, out: &mut [f64]) {
    let r = (k / 2) as isize;
    for p in 0..k {
        let dy = p as isize - r;
        let (y0, y1) = (
            (-dy).max(0) as usize,
            (a as isize - dy).min(a as isize) as usize,
        );
        for q in 0..k {
            let wv = kernel[p * k + q];
            if wv == 0.0 {
                continue;
            }
            let dx = q as isize - r;
            let (x0, x1) = (
                (-dx).max(0) as usize,
                (a as isize - dx).min(a as isize) as usize,
            );
            for y in y0..y1 {
                let src_row = (y as isize + dy) as usize * a;
                let dst = &mut out[y * a + x0..y * a + x1];
                let src = &input[(src_row as isize + x0 as isize + dx) as usize
                    ..(src_row as isize + x1 as isize + dx) as usize];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += wv * s;
                }
            }
        }
    }
}

/// `H~[n, j] = correlate(H_bar[n, j], K[n, j])`, no kernel flip.
pub fn contextual_adaptation(hbar: &ReweighedHeatmaps, kams: &KamSet) -> Result<RefinedHeatmaps> {
    let (n, a, k) = check_shapes(&hbar.values, &kams.values)?;
    let mut values = Tensor::zeros(&[n, NUM_KEYPOINTS, a, a]);
    let plane = a * a;
    let kk = k * k;
    let hb = hbar.values.data();
    let kd = kams.values.data();
    for (nj, out) in values.data_mut().chunks_exact_mut(plane).enumerate() {
        correlate_plane(
            &hb[nj * plane..(nj + 1) * plane],
            &kd[nj * kk..(nj + 1) * kk],
            a,
            k,
            out,
        );
    }
    Ok(RefinedHeatmaps { values })
}

/// Gradients of the per-plane correlation with respect to the reweighed
/// heatmaps and the kernels.
pub fn adaptation_backward(
    hbar: &ReweighedHeatmaps,
    kams: &KamSet,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, a, k) = check_shapes(&hbar.values, &kams.values)?;
    if upstream.shape() != hbar.values.shape() {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match refined heatmaps {:?}",
            upstream.shape(),
            hbar.values.shape()
        )));
    }
    let plane = a * a;
    let kk = k * k;
    let r = (k / 2) as isize;
    let mut dh = Tensor::zeros(hbar.values.shape());
    let mut dk = Tensor::zeros(kams.values.shape());
    let hb = hbar.values.data();
    let kd = kams.values.data();
    let up = upstream.data();
    for nj in 0..n * NUM_KEYPOINTS {
        let g = &up[nj * plane..(nj + 1) * plane];
        let h = &hb[nj * plane..(nj + 1) * plane];
        let kern = &kd[nj * kk..(nj + 1) * kk];
        // dK[p, q] = sum_y,x g[y, x] * H[y + dy, x + dx]
        let dkp = &mut dk.data_mut()[nj * kk..(nj + 1) * kk];
        for p in 0..k {
            let dy = p as isize - r;
            let (y0, y1) = (
                (-dy).max(0) as usize,
                (a as isize - dy).min(a as isize) as usize,
            );
            for q in 0..k {
                let dx = q as isize - r;
                let (x0, x1) = (
                    (-dx).max(0) as usize,
                    (a as isize - dx).min(a as isize) as usize,
                );
                let mut acc = 0.0;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let gs = &g[y * a + x0..y * a + x1];
                    let hs = &h[(sy * a) as usize + (x0 as isize + dx) as usize
                        ..(sy * a) + (x1 as isize + dx) as usize];
                    acc += gs.iter().zip(hs).map(|(u, v)| u * v).sum::<f64>();
                }
                dkp[p * k + q] = acc;
            }
        }
        // dH is the correlation of g with the flipped kernel.
        let mut flipped = vec![0.0; kk];
        for (i, v) in kern.iter().enumerate() {
            flipped[kk - 1 - i] = *v;
        }
        correlate_plane(
            g,
            &flipped,
            a,
            k,
            &mut dh.data_mut()[nj * plane..(nj + 1) * plane],
        );
    }
    Ok((dh, dk))
}

/// Adaptation layer that keeps its inputs for the backward pass.
#[derive(Default)]
pub struct Adaptation {
    cache: Option<(ReweighedHeatmaps, KamSet)>,
}

impl Adaptation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, hbar: ReweighedHeatmaps, kams: KamSet) -> Result<RefinedHeatmaps> {
        let out = contextual_adaptation(&hbar, &kams)?;
        self.cache = Some((hbar, kams));
        Ok(out)
    }

    pub fn backward(&self, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
        let (hbar, kams) = self.cache.as_ref().ok_or(Error::MissingCache)?;
        adaptation_backward(hbar, kams, upstream)
    }
}

/// Best and second-best distinct cells, ties broken by row-major order.
pub fn top2(plane: &[f64]) -> ((usize, f64), (usize, f64)) {
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut second = (0usize, f64::NEG_INFINITY);
    for (i, &v) in plane.iter().enumerate() {
        if v > best.1 {
            second = best;
            best = (i, v);
        } else if v > second.1 {
            second = (i, v);
        }
    }
    if plane.len() == 1 {
        second = best;
    }
    (best, second)
}

/// Final poses from refined windows. Per keypoint: convex average of the top-2
/// cells (weight `lambda` on the best) mapped through the global lattice;
/// final score = averaged confidence x center score, clamped into `[0, 1]`.
/// Keypoints with final score <= 0 keep their coordinates with score 0;
/// instances without any positive keypoint are dropped. Instance score is
/// the mean of the positive keypoint scores.
pub fn decode_final(
    refined: &RefinedHeatmaps,
    grid: &KemGrid,
    centers: &[[f64; 3]],
    lambda: f64,
) -> Result<PoseSet> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let shape = refined.values.shape();
    let (n, a) = (shape[0], shape[2]);
    if grid.num_instances() != n || grid.window != a || centers.len() != n {
        return Err(Error::Shape(format!(
            "refined {shape:?}, grid {:?}, {} centers disagree",
            grid.coords.shape(),
            centers.len()
        )));
    }
    let mut poses = Vec::new();
    for (i, center) in centers.iter().enumerate() {
        let mut keypoints = [[0.0; 3]; NUM_KEYPOINTS];
        let mut valid = 0usize;
        let mut total = 0.0;
        for (j, kp) in keypoints.iter_mut().enumerate() {
            let plane = refined.values.slab(&[i, j]);
            let ((c1, s1), (c2, s2)) = top2(plane);
            let (x1, y1) = grid.point(i, j, c1 / a, c1 % a);
            let (x2, y2) = grid.point(i, j, c2 / a, c2 % a);
            let confidence = lambda * s1 + (1.0 - lambda) * s2;
            let score = (confidence * center[2]).clamp(0.0, 1.0);
            *kp = [
                lambda * x1 + (1.0 - lambda) * x2,
                lambda * y1 + (1.0 - lambda) * y2,
                score,
            ];
            if score > 0.0 {
                valid += 1;
                total += score;
            }
        }
        if valid > 0 {
            poses.push(Pose {
                center: *center,
                keypoints,
                score: total / valid as f64,
            });
        }
    }
    Ok(PoseSet::new(poses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kem::global_kems;

    fn rh(values: Tensor) -> ReweighedHeatmaps {
        ReweighedHeatmaps {
            values,
            window: 0,
            sigma: 1.0,
        }
    }

    fn ramp(shape: &[usize]) -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..len)
                .map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0)
                .collect(),
        )
        .unwrap()
    }

    fn delta(n: usize, k: usize) -> KamSet {
        let mut t = Tensor::zeros(&[n, 17, k, k]);
        for nj in 0..n * 17 {
            t.data_mut()[nj * k * k + (k / 2) * k + k / 2] = 1.0;
        }
        KamSet { values: t }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let h = ramp(&[2, 17, 13, 13]);
        let out = contextual_adaptation(&rh(h.clone()), &delta(2, 5)).unwrap();
        assert_eq!(out.values, h);
    }

    #[test]
    fn constant_input_interior_scales_by_kernel_sum() {
        let h = Tensor::filled(&[1, 17, 15, 15], 0.5);
        let kams = KamSet {
            values: ramp(&[1, 17, 5, 5]),
        };
        let out = contextual_adaptation(&rh(h), &kams).unwrap();
        for j in 0..17 {
            let ksum: f64 = kams.values.slab(&[0, j]).iter().sum();
            for y in 2..13 {
                for x in 2..13 {
                    assert!((out.values.at(&[0, j, y, x]) - 0.5 * ksum).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn size_mismatch_errors() {
        let h = Tensor::zeros(&[2, 17, 9, 9]);
        assert!(contextual_adaptation(&rh(h), &delta(1, 3)).is_err());
    }

    #[test]
    fn delta_backward_passes_upstream_through() {
        let h = ramp(&[1, 17, 9, 9]);
        let up = ramp(&[1, 17, 9, 9]);
        let (dh, _) = adaptation_backward(&rh(h), &delta(1, 3), &up).unwrap();
        assert_eq!(dh, up);
        let (dh, dk) = adaptation_backward(
            &rh(ramp(&[1, 17, 9, 9])),
            &delta(1, 3),
            &Tensor::zeros(&[1, 17, 9, 9]),
        )
        .unwrap();
        assert!(dh.data().iter().chain(dk.data()).all(|&v| v == 0.0));
        assert!(matches!(
            Adaptation::new().backward(&up),
            Err(Error::MissingCache)
        ));
    }

    fn pose_at(x: f64, y: f64) -> Pose {
        Pose {
            center: [x, y, 0.9],
            keypoints: [[x, y, 0.9]; NUM_KEYPOINTS],
            score: 0.9,
        }
    }

    #[test]
    fn convex_top2_decoding() {
        // 21x21 window centered on (10, 10): cell (row, col) maps to (col, row)
        let poses = PoseSet::new(vec![pose_at(10.0, 10.0)]);
        let grid = global_kems(&poses, 21, None).unwrap();
        let mut v = Tensor::zeros(&[1, 17, 21, 21]);
        for j in 0..17 {
            v.set(&[0, j, 10, 10], 0.8);
            v.set(&[0, j, 10, 12], 0.4);
        }
        let out = decode_final(
            &RefinedHeatmaps { values: v },
            &grid,
            &poses.centers(),
            0.75,
        )
        .unwrap();
        let kp = out.poses[0].keypoints[4];
        assert!((kp[0] - 10.5).abs() < 1e-12);
        assert!((kp[1] - 10.0).abs() < 1e-12);
        assert!((kp[2] - 0.63).abs() < 1e-12);
        assert!((out.poses[0].score - 0.63).abs() < 1e-12);
    }

    #[test]
    fn equal_top_cells_average_in_place() {
        let poses = PoseSet::new(vec![pose_at(5.0, 5.0)]);
        let grid = global_kems(&poses, 3, None).unwrap();
        let mut v = Tensor::zeros(&[1, 17, 3, 3]);
        for j in 0..17 {
            v.set(&[0, j, 1, 1], 0.6);
            v.set(&[0, j, 1, 2], 0.6);
        }
        let out = decode_final(
            &RefinedHeatmaps { values: v },
            &grid,
            &poses.centers(),
            0.75,
        )
        .unwrap();
        let kp = out.poses[0].keypoints[0];
        // best is the first in row-major order, second the next equal cell
        assert!((kp[0] - 5.25).abs() < 1e-12);
        assert!((kp[2] - 0.6 * 0.9).abs() < 1e-12);
    }

    #[test]
    fn all_zero_map_drops_instance() {
        let poses = PoseSet::new(vec![pose_at(5.0, 5.0)]);
        let grid = global_kems(&poses, 5, None).unwrap();
        let out = decode_final(
            &RefinedHeatmaps {
                values: Tensor::zeros(&[1, 17, 5, 5]),
            },
            &grid,
            &poses.centers(),
            0.75,
        )
        .unwrap();
        assert!(out.is_empty());
        assert!(decode_final(
            &RefinedHeatmaps {
                values: Tensor::zeros(&[1, 17, 5, 5]),
            },
            &grid,
            &poses.centers(),
            1.5,
        )
        .is_err());
    }
}
