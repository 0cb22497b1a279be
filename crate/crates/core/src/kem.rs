//! Keypoint expansion maps (KEMs) and Gaussian-reweighed pose-guided heatmaps.

use crate::error::{Error, Result};
use crate::model::{KemGrid, PoseSet};
use crate::sample::BilinearTaps;
use crate::skeleton::{SkeletonSpec, NUM_KEYPOINTS};
use crate::tensor::Tensor;

pub const LOCAL_WINDOW: usize = 11;
pub const GLOBAL_WINDOW: usize = 97;

/// `(a - 1) / 6`: the 3-sigma rule over half the window.
pub fn reweigh_sigma(window: usize) -> f64 {
    (window as f64 - 1.0) / (2.0 * 3.0)
}

fn check_odd(k: usize, what: &str) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "{what} window must be odd, got {k}"
        )));
    }
    Ok(())
}

/// Builds `N x 17 x k x k x 2` lattices centered on each keypoint with
/// per-type stride `rates[j]`.
fn lattice(poses: &PoseSet, k: usize, rates: &[f64; NUM_KEYPOINTS]) -> KemGrid {
    let r = (k / 2) as f64;
    let n = poses.len();
    let mut coords = Tensor::zeros(&[n, NUM_KEYPOINTS, k, k, 2]);
    let data = coords.data_mut();
    let mut off = 0;
    for pose in poses.iter() {
        for (j, rate) in rates.iter().enumerate() {
            let (x, y) = pose.xy(j);
            for u in 0..k {
                let dy = (u as f64 - r) * rate;
                for v in 0..k {
                    let dx = (v as f64 - r) * rate;
                    data[off] = x + dx;
                    data[off + 1] = y + dy;
                    off += 2;
                }
            }
        }
    }
    KemGrid { coords, window: k }
}

/// Local KEMs: offsets `[-r, r]` (inclusive, `r = k / 2`) scaled by
/// `sigma_j / min(sigma)` for keypoint type `j`.
pub fn local_kems(poses: &PoseSet, spec: &SkeletonSpec, k: usize) -> Result<KemGrid> {
    check_odd(k, "local")?;
    let mut rates = [0.0; NUM_KEYPOINTS];
    for (j, r) in rates.iter_mut().enumerate() {
        *r = spec.expansion_rate(j);
    }
    Ok(lattice(poses, k, &rates))
}

/// Global KEMs: unit-stride lattice `[-(a-1)/2, (a-1)/2]^2` per keypoint.
/// With `scaled`, the per-type expansion rates of the local KEMs are applied.
pub fn global_kems(poses: &PoseSet, a: usize, scaled: Option<&SkeletonSpec>) -> Result<KemGrid> {
    check_odd(a, "global")?;
    let mut rates = [1.0; NUM_KEYPOINTS];
    if let Some(spec) = scaled {
        for (j, r) in rates.iter_mut().enumerate() {
            *r = spec.expansion_rate(j);
        }
    }
    Ok(lattice(poses, a, &rates))
}

/// Bilinear upsampling by an integer factor. Output texel `(Y, X)` reads the
/// input at `(X / f, Y / f)`, so texel centers stay aligned.
pub fn upsample_heatmaps(maps: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "upsampling factor must be >= 1".into(),
        ));
    }
    if maps.ndim() != 3 {
        return Err(Error::Shape(format!(
            "upsampling needs (c, h, w), got {:?}",
            maps.shape()
        )));
    }
    if factor == 1 {
        return Ok(maps.clone());
    }
    let (c, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    if h == 0 || w == 0 {
        return Err(Error::EmptyTensor);
    }
    let (oh, ow) = (h * factor, w * factor);
    let taps: Vec<BilinearTaps> = (0..oh)
        .flat_map(|y| {
            (0..ow).map(move |x| {
                BilinearTaps::new(x as f64 / factor as f64, y as f64 / factor as f64, h, w)
            })
        })
        .collect();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let src = maps.slab(&[ch]);
        let dst = out.slab_mut(&[ch]);
        for (o, t) in dst.iter_mut().zip(&taps) {
            *o = t.apply(src);
        }
    }
    Ok(out)
}

/// `a x a` Gaussian prior `exp(-((u-c)^2 + (v-c)^2) / (2 sigma^2))`, `c = (a-1)/2`.
pub fn gaussian_window(a: usize, sigma: f64) -> Vec<f64> {
    let c = (a as f64 - 1.0) / 2.0;
    let denom = 2.0 * sigma * sigma;
    let mut g = Vec::with_capacity(a * a);
    for u in 0..a {
        for v in 0..a {
            let du = u as f64 - c;
            let dv = v as f64 - c;
            g.push((-(du * du + dv * dv) / denom).exp());
        }
    }
    g
}

/// Pose-guided heatmaps `N x 17 x a x a` after Gaussian reweighing.
#[derive(Clone, Debug, PartialEq)]
pub struct ReweighedHeatmaps {
    pub values: Tensor,
    pub window: usize,
    pub sigma: f64,
}

/// Samples each keypoint channel on its global lattice and multiplies by the
/// centered Gaussian prior.
pub fn sample_and_reweigh(
    heatmaps: &Tensor,
    grid: &KemGrid,
    sigma: f64,
) -> Result<ReweighedHeatmaps> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if heatmaps.ndim() != 3 || heatmaps.shape()[0] != NUM_KEYPOINTS {
        return Err(Error::Shape(format!(
            "expected {NUM_KEYPOINTS} keypoint heatmap channels, got {:?}",
            heatmaps.shape()
        )));
    }
    let (h, w) = (heatmaps.shape()[1], heatmaps.shape()[2]);
    if h == 0 || w == 0 {
        return Err(Error::EmptyTensor);
    }
    let a = grid.window;
    let n = grid.num_instances();
    let prior = gaussian_window(a, sigma);
    let mut values = Tensor::zeros(&[n, NUM_KEYPOINTS, a, a]);
    let cells = a * a;
    let src = grid.coords.data();
    let dst = values.data_mut();
    for nj in 0..n * NUM_KEYPOINTS {
        let plane = heatmaps.slab(&[nj % NUM_KEYPOINTS]);
        let pts = &src[nj * cells * 2..(nj + 1) * cells * 2];
        let out = &mut dst[nj * cells..(nj + 1) * cells];
        for (cell, o) in out.iter_mut().enumerate() {
            let taps = BilinearTaps::new(pts[2 * cell], pts[2 * cell + 1], h, w);
            *o = taps.apply(plane) * prior[cell];
        }
    }
    Ok(ReweighedHeatmaps {
        values,
        window: a,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Pose;

    fn pose_at(points: &[(f64, f64)]) -> Pose {
        let mut kps = [[0.0; 3]; NUM_KEYPOINTS];
        for (j, k) in kps.iter_mut().enumerate() {
            let (x, y) = points[j % points.len()];
            *k = [x, y, 1.0];
        }
        Pose {
            center: [0.0, 0.0, 1.0],
            keypoints: kps,
            score: 1.0,
        }
    }

    #[test]
    fn eye_lattice_has_unit_stride() {
        let grid = local_kems(
            &PoseSet::new(vec![pose_at(&[(100.0, 100.0)])]),
            &SkeletonSpec::coco(),
            11,
        )
        .unwrap();
        assert_eq!(grid.coords.shape(), &[1, 17, 11, 11, 2]);
        assert_eq!(grid.point(0, 1, 0, 0), (95.0, 95.0));
        assert_eq!(grid.point(0, 1, 10, 10), (105.0, 105.0));
        assert_eq!(grid.point(0, 1, 5, 6), (101.0, 100.0));
        assert_eq!(grid.point(0, 1, 5, 5), (100.0, 100.0));
    }

    #[test]
    fn ankle_lattice_uses_sigma_ratio() {
        let grid = local_kems(
            &PoseSet::new(vec![pose_at(&[(50.0, 50.0)])]),
            &SkeletonSpec::coco(),
            11,
        )
        .unwrap();
        let stride = 0.089 / 0.025;
        assert!((stride - 3.56f64).abs() < 1e-12);
        let (x0, _) = grid.point(0, 15, 5, 0);
        let (x1, _) = grid.point(0, 15, 5, 10);
        assert!((x0 - (50.0 - 17.8)).abs() < 1e-12);
        assert!((x1 - (50.0 + 17.8)).abs() < 1e-12);
        let (xa, _) = grid.point(0, 15, 5, 3);
        let (xb, _) = grid.point(0, 15, 5, 4);
        assert!((xb - xa - stride).abs() < 1e-12);
    }

    #[test]
    fn empty_and_even_windows() {
        let grid = local_kems(&PoseSet::default(), &SkeletonSpec::coco(), 11).unwrap();
        assert_eq!(grid.coords.shape(), &[0, 17, 11, 11, 2]);
        assert!(local_kems(&PoseSet::default(), &SkeletonSpec::coco(), 10).is_err());
        assert!(global_kems(&PoseSet::default(), 96, None).is_err());
    }

    #[test]
    fn global_lattice_spans_window() {
        let poses = PoseSet::new(vec![pose_at(&[(48.0, 48.0)]), pose_at(&[(10.0, 3.0)])]);
        let grid = global_kems(&poses, 97, None).unwrap();
        assert_eq!(grid.coords.shape(), &[2, 17, 97, 97, 2]);
        assert_eq!(grid.point(0, 0, 0, 0), (0.0, 0.0));
        assert_eq!(grid.point(0, 16, 96, 96), (96.0, 96.0));
        let small = global_kems(&poses, 3, None).unwrap();
        assert_eq!(small.point(1, 4, 0, 0), (9.0, 2.0));
        assert_eq!(small.point(1, 4, 2, 2), (11.0, 4.0));
    }

    #[test]
    fn reweigh_sigma_at_default_window() {
        assert_eq!(reweigh_sigma(97), 16.0);
    }

    #[test]
    fn corner_weight_is_exp_minus_nine() {
        let g = gaussian_window(97, 16.0);
        assert_eq!(g[48 * 97 + 48], 1.0);
        assert!((g[0] - (-9.0f64).exp()).abs() < 1e-15);
        assert!((g[0] - 1.23410e-4).abs() < 1e-9);
    }

    #[test]
    fn constant_heatmap_yields_prior() {
        let maps = Tensor::filled(&[17, 40, 40], 1.0);
        let grid = global_kems(&PoseSet::new(vec![pose_at(&[(20.0, 20.0)])]), 9, None).unwrap();
        let hbar = sample_and_reweigh(&maps, &grid, reweigh_sigma(9)).unwrap();
        let g = gaussian_window(9, reweigh_sigma(9));
        for j in 0..17 {
            assert_eq!(hbar.values.slab(&[0, j]), &g[..]);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let maps = Tensor::filled(&[18, 8, 8], 1.0);
        let grid = global_kems(&PoseSet::new(vec![pose_at(&[(2.0, 2.0)])]), 3, None).unwrap();
        assert!(sample_and_reweigh(&maps, &grid, 1.0).is_err());
    }

    #[test]
    fn upsample_identity_and_midpoint() {
        let m = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(upsample_heatmaps(&m, 1).unwrap(), m);
        let up = upsample_heatmaps(&m, 2).unwrap();
        assert_eq!(up.shape(), &[1, 4, 4]);
        for row in 0..4 {
            assert_eq!(up.at(&[0, row, 1]), 0.5);
            assert_eq!(up.at(&[0, row, 0]), 0.0);
            assert_eq!(up.at(&[0, row, 2]), 1.0);
        }
        let c = Tensor::filled(&[2, 3, 5], 0.7);
        let upc = upsample_heatmaps(&c, 3).unwrap();
        assert!(upc.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }
}
