//! Shared value types passed between pipeline stages.

use crate::error::{Error, Result};
use crate::skeleton::NUM_KEYPOINTS;
use crate::tensor::Tensor;

/// Channel index of the person-center heatmap.
pub const CENTER_CHANNEL: usize = NUM_KEYPOINTS;
pub const HEATMAP_CHANNELS: usize = NUM_KEYPOINTS + 1;
pub const OFFSET_CHANNELS: usize = 2 * NUM_KEYPOINTS;

/// Per-image network outputs: keypoint/center heatmaps, center-to-keypoint
/// offsets (image pixels), and a backbone feature map.
///
/// All maps live at `stride` image pixels per texel; texel `(i, j)` has its
/// center at image coordinate `(stride * j, stride * i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMaps {
    pub heatmaps: Tensor,
    pub offsets: Tensor,
    pub features: Tensor,
    pub stride: usize,
}

impl DenseMaps {
    pub fn new(heatmaps: Tensor, offsets: Tensor, features: Tensor, stride: usize) -> Result<Self> {
        let maps = DenseMaps {
            heatmaps,
            offsets,
            features,
            stride,
        };
        maps.validate()?;
        Ok(maps)
    }

    pub fn validate(&self) -> Result<()> {
        let hs = self.heatmaps.shape();
        let os = self.offsets.shape();
        let fs = self.features.shape();
        if hs.len() != 3 || os.len() != 3 || fs.len() != 3 {
            return Err(Error::Shape("dense maps must be 3-D (c, h, w)".into()));
        }
        if hs[0] != HEATMAP_CHANNELS {
            return Err(Error::Shape(format!(
                "heatmaps need {HEATMAP_CHANNELS} channels, got {}",
                hs[0]
            )));
        }
        if os[0] != OFFSET_CHANNELS {
            return Err(Error::Shape(format!(
                "offsets need {OFFSET_CHANNELS} channels, got {}",
                os[0]
            )));
        }
        if hs[1..] != os[1..] || hs[1..] != fs[1..] {
            return Err(Error::Shape(format!(
                "spatial dims differ: heatmaps {hs:?}, offsets {os:?}, features {fs:?}"
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.heatmaps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.heatmaps.shape()[2]
    }

    pub fn feature_channels(&self) -> usize {
        self.features.shape()[0]
    }

    /// Keypoint heatmap channels 0..17 as their own tensor.
    pub fn keypoint_heatmaps(&self) -> Tensor {
        let plane = self.height() * self.width();
        Tensor::from_vec(
            &[NUM_KEYPOINTS, self.height(), self.width()],
            self.heatmaps.data()[..NUM_KEYPOINTS * plane].to_vec(),
        )
        .expect("slice length matches shape")
    }

    pub fn center_map(&self) -> Tensor {
        Tensor::from_vec(
            &[self.height(), self.width()],
            self.heatmaps.slab(&[CENTER_CHANNEL]).to_vec(),
        )
        .expect("slice length matches shape")
    }
}

pub type Keypoint = [f64; 3];

/// One pose instance: center `(x, y, score)`, 17 keypoints `(x, y, score)`
/// in image pixels, and the instance ranking score.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub center: [f64; 3],
    pub keypoints: [Keypoint; NUM_KEYPOINTS],
    pub score: f64,
}

impl Pose {
    pub fn xy(&self, j: usize) -> (f64, f64) {
        (self.keypoints[j][0], self.keypoints[j][1])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseSet {
    pub poses: Vec<Pose>,
}

impl PoseSet {
    pub fn new(poses: Vec<Pose>) -> Self {
        PoseSet { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Pose> {
        self.poses.iter()
    }

    /// `N x 3` center rows.
    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.poses.iter().map(|p| p.center).collect()
    }

    /// `N x 17 x 2` keypoint coordinates.
    pub fn coords(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.len(), NUM_KEYPOINTS, 2]);
        for (n, p) in self.poses.iter().enumerate() {
            for j in 0..NUM_KEYPOINTS {
                out.set(&[n, j, 0], p.keypoints[j][0]);
                out.set(&[n, j, 1], p.keypoints[j][1]);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (n, p) in self.poses.iter().enumerate() {
            let finite = p.center.iter().all(|v| v.is_finite())
                && p.keypoints.iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidArgument(format!(
                    "pose {n} has non-finite values"
                )));
            }
            let in_unit = |s: f64| (0.0..=1.0).contains(&s);
            if !in_unit(p.center[2]) || !p.keypoints.iter().all(|k| in_unit(k[2])) {
                return Err(Error::InvalidArgument(format!(
                    "pose {n} has scores outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Annotated person: keypoints `(x, y, visibility)` with visibility in
/// `{0, 1, 2}`, segmentation area in px^2.
#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub id: u64,
    pub keypoints: [Keypoint; NUM_KEYPOINTS],
    pub area: f64,
}

impl GtInstance {
    pub fn is_visible(&self, j: usize) -> bool {
        self.keypoints[j][2] > 0.0
    }

    pub fn num_visible(&self) -> usize {
        (0..NUM_KEYPOINTS).filter(|&j| self.is_visible(j)).count()
    }

    /// Bounding box `(x0, y0, x1, y1)` of the visible keypoints.
    pub fn bbox(&self) -> Option<[f64; 4]> {
        let mut bb = [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ];
        let mut any = false;
        for kp in self.keypoints.iter().filter(|k| k[2] > 0.0) {
            any = true;
            bb[0] = bb[0].min(kp[0]);
            bb[1] = bb[1].min(kp[1]);
            bb[2] = bb[2].max(kp[0]);
            bb[3] = bb[3].max(kp[1]);
        }
        any.then_some(bb)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.area > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "instance {} has non-positive area {}",
                self.id, self.area
            )));
        }
        Ok(())
    }
}

/// Per-keypoint coordinate lattices, shape `N x 17 x k x k x 2` holding
/// `(x, y)` image pixels. Axis 2 runs along y, axis 3 along x.
#[derive(Clone, Debug, PartialEq)]
pub struct KemGrid {
    pub coords: Tensor,
    pub window: usize,
}

impl KemGrid {
    pub fn num_instances(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn point(&self, n: usize, j: usize, u: usize, v: usize) -> (f64, f64) {
        let off = self.coords.offset(&[n, j, u, v, 0]);
        let d = self.coords.data();
        (d[off], d[off + 1])
    }

    /// Lattice of a single instance, `17 x k x k x 2`.
    pub fn instance(&self, n: usize) -> &[f64] {
        self.coords.slab(&[n])
    }
}
