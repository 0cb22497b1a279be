//! Center-offset decoding of initial poses.

use crate::model::{DenseMaps, Pose, PoseSet};
use crate::skeleton::NUM_KEYPOINTS;
use crate::tensor::Tensor;

pub const DEFAULT_MAX_CENTERS: usize = 30;
pub const DEFAULT_CENTER_THRESHOLD: f64 = 0.01;

/// Strict 3x3 local maximum on the center heatmap, in texel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterCandidate {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// Pixels strictly greater than all existing 8-neighbors and `>= threshold`,
/// best `max_n` by score (ties in row-major order).
pub fn extract_centers(center_map: &Tensor, max_n: usize, threshold: f64) -> Vec<CenterCandidate> {
    assert_eq!(center_map.ndim(), 2, "center map must be (h, w)");
    let (h, w) = (center_map.shape()[0], center_map.shape()[1]);
    let d = center_map.data();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = d[y * w + x];
            if !(v >= threshold) {
                continue;
            }
            let mut is_peak = true;
            'nbr: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if (ny, nx) != (y, x) && d[ny * w + nx] >= v {
                        is_peak = false;
                        break 'nbr;
                    }
                }
            }
            if is_peak {
                out.push(CenterCandidate { x, y, score: v });
            }
        }
    }
    // stable: equal scores keep row-major order
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(max_n);
    out
}

/// Reads the offset vectors at each integer center texel. Keypoint and
/// instance scores start at the center score.
pub fn decode_initial_poses(maps: &DenseMaps, candidates: &[CenterCandidate]) -> PoseSet {
    let w = maps.width();
    let plane = maps.height() * w;
    let off = maps.offsets.data();
    let s = maps.stride as f64;
    let poses = candidates
        .iter()
        .map(|c| {
            let cx = c.x as f64 * s;
            let cy = c.y as f64 * s;
            let at = c.y * w + c.x;
            let mut keypoints = [[0.0; 3]; NUM_KEYPOINTS];
            for (j, kp) in keypoints.iter_mut().enumerate() {
                *kp = [
                    cx + off[2 * j * plane + at],
                    cy + off[(2 * j + 1) * plane + at],
                    c.score,
                ];
            }
            Pose {
                center: [cx, cy, c.score],
                keypoints,
                score: c.score,
            }
        })
        .collect();
    PoseSet::new(poses)
}

/// Convenience: extract centers from channel 17 and decode.
pub fn decode(maps: &DenseMaps, max_n: usize, threshold: f64) -> PoseSet {
    let candidates = extract_centers(&maps.center_map(), max_n, threshold);
    decode_initial_poses(maps, &candidates)
}
