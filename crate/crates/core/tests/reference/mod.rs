//! Scalar-loop reference implementations and random instance builders.

#![allow(dead_code)]

use logocap::cmp::CmpParams;
use logocap::model::{GtInstance, Pose, PoseSet};
use logocap::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const K: usize = 17;

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn random_pose(rng: &mut ChaCha8Rng, extent: f64) -> Pose {
    let mut keypoints = [[0.0; 3]; K];
    for kp in keypoints.iter_mut() {
        *kp = [
            rng.random_range(0.0..extent),
            rng.random_range(0.0..extent),
            rng.random_range(0.05..1.0),
        ];
    }
    Pose {
        center: [
            rng.random_range(0.0..extent),
            rng.random_range(0.0..extent),
            rng.random_range(0.05..1.0),
        ],
        keypoints,
        score: rng.random_range(0.05..1.0),
    }
}

pub fn random_poses(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PoseSet {
    PoseSet::new((0..n).map(|_| random_pose(rng, extent)).collect())
}

/// Random annotation with at least one visible keypoint.
pub fn random_gt(rng: &mut ChaCha8Rng, id: u64, extent: f64) -> GtInstance {
    let mut keypoints = [[0.0; 3]; K];
    for kp in keypoints.iter_mut() {
        let v = if rng.random_bool(0.8) { 2.0 } else { 0.0 };
        *kp = [
            rng.random_range(0.0..extent),
            rng.random_range(0.0..extent),
            v,
        ];
    }
    keypoints[rng.random_range(0..K)][2] = 2.0;
    GtInstance {
        id,
        keypoints,
        area: rng.random_range(100.0..20000.0),
    }
}

/// COCO keypoint similarity, `exp(-d^2 / (2 s^2 kappa^2))` with
/// `s^2 = area` and `kappa = 2 sigma`.
pub fn similarity(p: (f64, f64), q: (f64, f64), sigma: f64, area: f64) -> f64 {
    let d2 = (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
    let kappa = 2.0 * sigma;
    (-d2 / (2.0 * area * kappa * kappa)).exp()
}

/// Similarities `[j][u][v][g]` of one instance's local lattice, built from
/// scratch: cell `(u, v)` of keypoint `j` sits at
/// `kp + ((v - r), (u - r)) * sigma_j / min(sigma)`.
pub fn similarity_tensor(pose: &Pose, gts: &[GtInstance], sigmas: &[f64], k: usize) -> Vec<f64> {
    let r = (k / 2) as f64;
    let min = sigmas.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut out = Vec::with_capacity(K * k * k * gts.len());
    for j in 0..K {
        let rate = sigmas[j] / min;
        for u in 0..k {
            for v in 0..k {
                let p = (
                    pose.keypoints[j][0] + (v as f64 - r) * rate,
                    pose.keypoints[j][1] + (u as f64 - r) * rate,
                );
                for gt in gts {
                    out.push(if gt.keypoints[j][2] > 0.0 && gt.area > 0.0 {
                        similarity(
                            p,
                            (gt.keypoints[j][0], gt.keypoints[j][1]),
                            sigmas[j],
                            gt.area,
                        )
                    } else {
                        0.0
                    });
                }
            }
        }
    }
    out
}

/// Same-size correlation of every `(n, j)` plane with its own kernel,
/// zero padding, no kernel flip.
pub fn correlate(hbar: &Tensor, kams: &Tensor) -> Tensor {
    let (n, a) = (hbar.shape()[0], hbar.shape()[2]);
    let k = kams.shape()[2];
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(&[n, K, a, a]);
    for b in 0..n {
        for j in 0..K {
            for y in 0..a {
                for x in 0..a {
                    let mut acc = 0.0;
                    for p in 0..k {
                        for q in 0..k {
                            let sy = y as isize + p as isize - r;
                            let sx = x as isize + q as isize - r;
                            if sy < 0 || sx < 0 || sy >= a as isize || sx >= a as isize {
                                continue;
                            }
                            acc +=
                                kams.at(&[b, j, p, q]) * hbar.at(&[b, j, sy as usize, sx as usize]);
                        }
                    }
                    out.set(&[b, j, y, x], acc);
                }
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Message-passing network on codes `N x 17d x k x k`, one scalar at a time.
/// `train` selects batch statistics over `(N, k, k)`; otherwise the stored
/// running statistics are used.
pub fn cmp_forward(codes: &Tensor, params: &CmpParams, train: bool) -> Tensor {
    let s = codes.shape();
    let (n, ch, k) = (s[0], s[1], s[2]);
    let w = &params.weights;
    let mut x = codes.clone();
    for (l, lw) in w.layers.iter().enumerate() {
        let mut z = Tensor::zeros(&[n, ch, k, k]);
        for b in 0..n {
            for o in 0..ch {
                for u in 0..k {
                    for v in 0..k {
                        let mut acc = lw.conv_b.at(&[o]);
                        for i in 0..ch {
                            for dy in -1isize..=1 {
                                for dx in -1isize..=1 {
                                    let (su, sv) = (u as isize + dy, v as isize + dx);
                                    if su < 0 || sv < 0 || su >= k as isize || sv >= k as isize {
                                        continue;
                                    }
                                    let tap = ((dy + 1) * 3 + (dx + 1)) as usize;
                                    acc += lw.conv_w.at(&[o, i * 9 + tap])
                                        * x.at(&[b, i, su as usize, sv as usize]);
                                }
                            }
                        }
                        z.set(&[b, o, u, v], acc);
                    }
                }
            }
        }
        let count = (n * k * k) as f64;
        let mut xhat = Tensor::zeros(&[n, ch, k, k]);
        for c in 0..ch {
            let (mean, var) = if train {
                let mut m = 0.0;
                for b in 0..n {
                    for u in 0..k {
                        for v in 0..k {
                            m += z.at(&[b, c, u, v]);
                        }
                    }
                }
                m /= count;
                let mut var = 0.0;
                for b in 0..n {
                    for u in 0..k {
                        for v in 0..k {
                            var += (z.at(&[b, c, u, v]) - m).powi(2);
                        }
                    }
                }
                (m, var / count)
            } else {
                (params.stats[l].mean.at(&[c]), params.stats[l].var.at(&[c]))
            };
            for b in 0..n {
                for u in 0..k {
                    for v in 0..k {
                        xhat.set(
                            &[b, c, u, v],
                            (z.at(&[b, c, u, v]) - mean) / (var + 1e-5).sqrt(),
                        );
                    }
                }
            }
        }
        let mut y = Tensor::zeros(&[n, ch, k, k]);
        for b in 0..n {
            let mut gate = vec![0.0; 2 * ch];
            if let (Some(gw), Some(gb)) = (&lw.gate_w, &lw.gate_b) {
                let mut pooled = vec![0.0; ch];
                for (c, p) in pooled.iter_mut().enumerate() {
                    for u in 0..k {
                        for v in 0..k {
                            *p += xhat.at(&[b, c, u, v]);
                        }
                    }
                    *p /= (k * k) as f64;
                }
                for (m, g) in gate.iter_mut().enumerate() {
                    *g = gb.at(&[m]);
                    for (c, p) in pooled.iter().enumerate() {
                        *g += gw.at(&[m, c]) * p;
                    }
                }
            }
            for c in 0..ch {
                let (scale, shift) = if lw.gate_w.is_some() {
                    (
                        lw.gamma.at(&[c]) * 2.0 * sigmoid(gate[c]),
                        lw.beta.at(&[c]) + gate[ch + c],
                    )
                } else {
                    (lw.gamma.at(&[c]), lw.beta.at(&[c]))
                };
                for u in 0..k {
                    for v in 0..k {
                        let val = xhat.at(&[b, c, u, v]) * scale + shift;
                        y.set(&[b, c, u, v], val.max(0.0));
                    }
                }
            }
        }
        x = y;
    }
    let mut out = Tensor::zeros(&[n, K, k, k]);
    for b in 0..n {
        for j in 0..K {
            for u in 0..k {
                for v in 0..k {
                    let mut acc = w.head_b.at(&[j]);
                    for c in 0..ch {
                        acc += w.head_w.at(&[j, c]) * x.at(&[b, c, u, v]);
                    }
                    out.set(&[b, j, u, v], sigmoid(acc));
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
