use crate::error::{Error, Result};

pub const NUM_KEYPOINTS: usize = 17;

pub const COCO_KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Per-keypoint falloff constants published with the COCO keypoint benchmark.
pub const COCO_SIGMAS: [f64; NUM_KEYPOINTS] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Horizontal mirror pairs, used by the synthetic template.
pub const COCO_FLIP_PAIRS: [(usize, usize); 8] = [
    (1, 2),
    (3, 4),
    (5, 6),
    (7, 8),
    (9, 10),
    (11, 12),
    (13, 14),
    (15, 16),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSpec {
    names: Vec<String>,
    sigmas: Vec<f64>,
}

impl SkeletonSpec {
    pub fn coco() -> Self {
        SkeletonSpec {
            names: COCO_KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            sigmas: COCO_SIGMAS.to_vec(),
        }
    }

    pub fn new(names: Vec<String>, sigmas: Vec<f64>) -> Result<Self> {
        if names.len() != NUM_KEYPOINTS || sigmas.len() != NUM_KEYPOINTS {
            return Err(Error::InvalidArgument(format!(
                "skeleton needs {NUM_KEYPOINTS} names and sigmas, got {} and {}",
                names.len(),
                sigmas.len()
            )));
        }
        if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(
                "keypoint sigmas must be finite and positive".into(),
            ));
        }
        Ok(SkeletonSpec { names, sigmas })
    }

    pub fn num_keypoints(&self) -> usize {
        NUM_KEYPOINTS
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, j: usize) -> f64 {
        self.sigmas[j]
    }

    pub fn min_sigma(&self) -> f64 {
        self.sigmas.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Lattice stride multiplier for keypoint type `j`: `sigma_j / min(sigma)`.
    pub fn expansion_rate(&self, j: usize) -> f64 {
        self.sigmas[j] / self.min_sigma()
    }
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        Self::coco()
    }
}
