//! Deterministic synthetic scenes: articulated stick people, their ground
//! truth, and as-if-predicted dense maps with controlled noise.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coco::{coco_annotations_json, load_coco_keypoints, GroundTruth};
use crate::error::{Error, Result};
use crate::losses::{render_gt_heatmaps, render_gt_offsets};
use crate::model::{DenseMaps, GtInstance, PoseSet, CENTER_CHANNEL};
use crate::skeleton::NUM_KEYPOINTS;
use crate::tensor::{load_tensor, save_tensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Per-keypoint Gaussian activations at the predicted keypoints.
    GaussianEncoding,
    /// Smooth random fields unrelated to the people.
    RandomSmooth,
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-encoding" => Ok(FeatureMode::GaussianEncoding),
            "random-smooth" => Ok(FeatureMode::RandomSmooth),
            other => Err(Error::InvalidArgument(format!(
                "unknown feature mode '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Image pixels per map texel.
    pub stride: usize,
    /// Inclusive person-count range.
    pub persons: (usize, usize),
    /// Inclusive range of template height in pixels.
    pub scale: (f64, f64),
    /// Max absolute in-plane rotation, radians.
    pub max_rotation: f64,
    /// Std (px) of the displacement of predicted heatmap and feature peaks.
    pub keypoint_jitter: f64,
    /// Std (px) of additive noise on predicted offsets.
    pub offset_noise: f64,
    /// Std of additive pixel noise on predicted keypoint heatmaps.
    pub heatmap_noise: f64,
    /// Heatmap Gaussian std in texels.
    pub heatmap_sigma: f64,
    pub feature_channels: usize,
    /// Std (texels) of the narrowest feature Gaussian.
    pub feature_sigma: f64,
    pub feature_mode: FeatureMode,
    /// Chebyshev radius (texels) of the offset field around each center.
    pub offset_radius: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            height: 256,
            width: 256,
            stride: 4,
            persons: (1, 3),
            scale: (80.0, 100.0),
            max_rotation: 0.2,
            keypoint_jitter: 1.0,
            offset_noise: 0.0,
            heatmap_noise: 0.01,
            heatmap_sigma: crate::losses::DEFAULT_HEATMAP_SIGMA,
            feature_channels: 34,
            feature_sigma: 2.0,
            feature_mode: FeatureMode::GaussianEncoding,
            offset_radius: 2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.height == 0 || self.width == 0 || self.stride == 0 {
            return bad("image dims and stride must be positive");
        }
        if self.height % self.stride != 0 || self.width % self.stride != 0 {
            return bad("image dims must be multiples of the stride");
        }
        if self.persons.0 > self.persons.1 || self.scale.0 > self.scale.1 || !(self.scale.0 > 0.0) {
            return bad("person and scale ranges must be ordered and positive");
        }
        let sigmas = [
            self.keypoint_jitter,
            self.offset_noise,
            self.heatmap_noise,
            self.max_rotation,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise levels must be non-negative");
        }
        if !(self.heatmap_sigma > 0.0) || !(self.feature_sigma > 0.0) || self.feature_channels == 0
        {
            return bad("heatmap/feature widths and channel count must be positive");
        }
        Ok(())
    }

    fn map_dims(&self) -> (usize, usize) {
        (self.height / self.stride, self.width / self.stride)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub gts: Vec<GtInstance>,
    /// As-if-predicted maps carrying the configured noise.
    pub maps: DenseMaps,
    pub clean_maps: DenseMaps,
}

/// Standing pose in units of body height, hip midpoint at the origin.
const TEMPLATE: [[f64; 2]; NUM_KEYPOINTS] = [
    [0.0, -0.86],
    [0.035, -0.89],
    [-0.035, -0.89],
    [0.075, -0.87],
    [-0.075, -0.87],
    [0.17, -0.66],
    [-0.17, -0.66],
    [0.24, -0.39],
    [-0.24, -0.39],
    [0.27, -0.13],
    [-0.27, -0.13],
    [0.10, 0.0],
    [-0.10, 0.0],
    [0.11, 0.38],
    [-0.11, 0.38],
    [0.12, 0.76],
    [-0.12, 0.76],
];

/// (child, parent) limbs in the order they are posed.
const LIMBS: [(usize, usize); 8] = [
    (7, 5),
    (9, 7),
    (8, 6),
    (10, 8),
    (13, 11),
    (15, 13),
    (14, 12),
    (16, 14),
];

const LIMB_SWING: f64 = 0.35;

fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Template with random limb swings, in body-height units.
fn articulate(rng: &mut ChaCha8Rng) -> [[f64; 2]; NUM_KEYPOINTS] {
    let mut pts = TEMPLATE;
    let mut angle = [0.0; NUM_KEYPOINTS];
    for &(child, parent) in &LIMBS {
        let a = angle[parent] + rng.random_range(-LIMB_SWING..=LIMB_SWING);
        angle[child] = a;
        let bone = [
            TEMPLATE[child][0] - TEMPLATE[parent][0],
            TEMPLATE[child][1] - TEMPLATE[parent][1],
        ];
        let r = rotate(bone, a);
        pts[child] = [pts[parent][0] + r[0], pts[parent][1] + r[1]];
    }
    pts
}

fn bbox_of(kps: &[[f64; 3]; NUM_KEYPOINTS]) -> [f64; 4] {
    let mut bb = [
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    ];
    for k in kps {
        bb[0] = bb[0].min(k[0]);
        bb[1] = bb[1].min(k[1]);
        bb[2] = bb[2].max(k[0]);
        bb[3] = bb[3].max(k[1]);
    }
    bb
}

fn overlaps(a: &[f64; 4], b: &[f64; 4], margin: f64) -> bool {
    a[0] - margin <= b[2] && b[0] - margin <= a[2] && a[1] - margin <= b[3] && b[1] - margin <= a[3]
}

const PLACEMENT_TRIES: usize = 200;

fn place_people(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<GtInstance> {
    let count = rng.random_range(cfg.persons.0..=cfg.persons.1);
    let margin = 2.0 * cfg.stride as f64;
    let mut placed: Vec<GtInstance> = Vec::new();
    let mut boxes: Vec<[f64; 4]> = Vec::new();
    let mut tries = 0;
    while placed.len() < count && tries < PLACEMENT_TRIES * count.max(1) {
        tries += 1;
        let height = rng.random_range(cfg.scale.0..=cfg.scale.1);
        let angle = if cfg.max_rotation > 0.0 {
            rng.random_range(-cfg.max_rotation..=cfg.max_rotation)
        } else {
            0.0
        };
        let pts = articulate(rng);
        let mut kps = [[0.0; 3]; NUM_KEYPOINTS];
        for (k, p) in kps.iter_mut().zip(pts.iter()) {
            let r = rotate(*p, angle);
            *k = [(r[0] * height).round(), (r[1] * height).round(), 2.0];
        }
        let bb = bbox_of(&kps);
        let (bw, bh) = (bb[2] - bb[0], bb[3] - bb[1]);
        let room_x = cfg.width as f64 - 1.0 - 2.0 * margin - bw;
        let room_y = cfg.height as f64 - 1.0 - 2.0 * margin - bh;
        if room_x < 0.0 || room_y < 0.0 {
            continue;
        }
        let tx = (margin - bb[0] + rng.random_range(0.0..=room_x)).round();
        let ty = (margin - bb[1] + rng.random_range(0.0..=room_y)).round();
        for k in kps.iter_mut() {
            k[0] += tx;
            k[1] += ty;
        }
        let bb = bbox_of(&kps);
        if boxes.iter().any(|b| overlaps(b, &bb, margin)) {
            continue;
        }
        boxes.push(bb);
        placed.push(GtInstance {
            id: placed.len() as u64 + 1,
            keypoints: kps,
            area: (bb[2] - bb[0]) * (bb[3] - bb[1]),
        });
    }
    placed
}

fn add_gaussian_into(
    plane: &mut [f64],
    w: usize,
    cx: f64,
    cy: f64,
    sigma: f64,
    amp: f64,
    max_combine: bool,
) {
    let denom = 2.0 * sigma * sigma;
    for (i, o) in plane.iter_mut().enumerate() {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let v = amp * (-((x - cx).powi(2) + (y - cy).powi(2)) / denom).exp();
        if max_combine {
            *o = o.max(v);
        } else {
            *o += v;
        }
    }
}

/// Keypoint heatmaps and features rendered at the given (possibly jittered)
/// keypoint positions, with a clean center channel.
fn render_prediction(
    cfg: &SceneConfig,
    gts: &[GtInstance],
    peaks: &[[[f64; 2]; NUM_KEYPOINTS]],
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor) {
    let (h, w) = cfg.map_dims();
    let s = cfg.stride as f64;
    let clean = render_gt_heatmaps(gts, cfg.stride, h, w, cfg.heatmap_sigma).heatmaps;
    let mut heatmaps = Tensor::zeros(clean.shape());
    heatmaps
        .slab_mut(&[CENTER_CHANNEL])
        .copy_from_slice(clean.slab(&[CENTER_CHANNEL]));
    for p in peaks {
        for (j, q) in p.iter().enumerate() {
            add_gaussian_into(
                heatmaps.slab_mut(&[j]),
                w,
                q[0] / s,
                q[1] / s,
                cfg.heatmap_sigma,
                1.0,
                true,
            );
        }
    }
    let mut features = Tensor::zeros(&[cfg.feature_channels, h, w]);
    match cfg.feature_mode {
        FeatureMode::GaussianEncoding => {
            for c in 0..cfg.feature_channels {
                let j = c % NUM_KEYPOINTS;
                let sigma = cfg.feature_sigma * (1 + c / NUM_KEYPOINTS) as f64;
                for p in peaks {
                    add_gaussian_into(
                        features.slab_mut(&[c]),
                        w,
                        p[j][0] / s,
                        p[j][1] / s,
                        sigma,
                        1.0,
                        true,
                    );
                }
            }
        }
        FeatureMode::RandomSmooth => {
            let amp = Normal::new(0.0, 1.0).expect("unit normal");
            for c in 0..cfg.feature_channels {
                for _ in 0..8 {
                    let cx = rng.random_range(0.0..w as f64);
                    let cy = rng.random_range(0.0..h as f64);
                    let a = amp.sample(rng);
                    add_gaussian_into(
                        features.slab_mut(&[c]),
                        w,
                        cx,
                        cy,
                        2.0 * cfg.feature_sigma,
                        a,
                        false,
                    );
                }
            }
        }
    }
    (heatmaps, features)
}

/// Draws one scene from `config.seed`.
pub fn sample_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gts = place_people(config, &mut rng);
    let (h, w) = config.map_dims();

    let clean_peaks: Vec<[[f64; 2]; NUM_KEYPOINTS]> = gts
        .iter()
        .map(|g| std::array::from_fn(|j| [g.keypoints[j][0], g.keypoints[j][1]]))
        .collect();
    let clean_offsets = render_gt_offsets(&gts, config.stride, h, w, config.offset_radius);
    let (clean_heatmaps, clean_features) = {
        let mut quiet = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f00d);
        render_prediction(config, &gts, &clean_peaks, &mut quiet)
    };

    let jitter = Normal::new(0.0, config.keypoint_jitter.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let peaks: Vec<[[f64; 2]; NUM_KEYPOINTS]> = clean_peaks
        .iter()
        .map(|p| {
            std::array::from_fn(|j| {
                if config.keypoint_jitter > 0.0 {
                    [
                        p[j][0] + jitter.sample(&mut rng),
                        p[j][1] + jitter.sample(&mut rng),
                    ]
                } else {
                    p[j]
                }
            })
        })
        .collect();
    let mut feature_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f00d);
    let (mut heatmaps, features) = render_prediction(config, &gts, &peaks, &mut feature_rng);
    if config.heatmap_noise > 0.0 {
        let noise = Normal::new(0.0, config.heatmap_noise)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in heatmaps.data_mut()[..NUM_KEYPOINTS * h * w].iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let mut offsets = clean_offsets.clone();
    if config.offset_noise > 0.0 {
        let noise = Normal::new(0.0, config.offset_noise)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in offsets.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(Scene {
        gts,
        maps: DenseMaps::new(heatmaps, offsets, features, config.stride)?,
        clean_maps: DenseMaps::new(clean_heatmaps, clean_offsets, clean_features, config.stride)?,
    })
}

/// Seed of scene `index` in a set generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed
        ^ (index as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `count` scenes with per-scene derived seeds.
pub fn sample_scenes(config: &SceneConfig, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| {
            sample_scene(&SceneConfig {
                seed: scene_seed(config.seed, i),
                ..config.clone()
            })
        })
        .collect()
}

/// Displaces every keypoint by i.i.d. uniform noise in `[-sigma, sigma]` per
/// axis; centers and scores are untouched.
pub fn perturb_poses(poses: &PoseSet, sigma: f64, seed: u64) -> Result<PoseSet> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "perturbation must be >= 0, got {sigma}"
        )));
    }
    let mut out = poses.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for pose in out.poses.iter_mut() {
        for kp in pose.keypoints.iter_mut() {
            kp[0] += rng.random_range(-sigma..=sigma);
            kp[1] += rng.random_range(-sigma..=sigma);
        }
    }
    Ok(out)
}

const MANIFEST: &str = "manifest.json";
const GT_FILE: &str = "gt.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub config: SceneConfig,
    pub image_ids: Vec<u64>,
}

/// A scene set as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSet {
    pub config: SceneConfig,
    pub image_ids: Vec<u64>,
    pub scenes: Vec<Scene>,
}

impl SceneSet {
    pub fn generate(config: &SceneConfig, count: usize) -> Result<Self> {
        Ok(SceneSet {
            config: config.clone(),
            image_ids: (1..=count as u64).collect(),
            scenes: sample_scenes(config, count)?,
        })
    }

    pub fn ground_truth(&self) -> GroundTruth {
        self.image_ids
            .iter()
            .zip(&self.scenes)
            .map(|(&id, s)| (id, s.gts.clone()))
            .collect()
    }

    fn scene_dir(root: &Path, image_id: u64) -> std::path::PathBuf {
        root.join(format!("scene_{image_id:05}"))
    }

    /// Writes into `dir`, which must not exist yet. The set is staged in a
    /// sibling directory and renamed into place, so a failure leaves nothing.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.save_with(dir, &[])
    }

    /// Like [`SceneSet::save`], with extra JSON files written into the same
    /// staging directory.
    pub fn save_with(
        &self,
        dir: impl AsRef<Path>,
        extras: &[(&str, &serde_json::Value)],
    ) -> Result<()> {
        let dir = dir.as_ref();
        if dir.exists() {
            return Err(Error::InvalidArgument(format!(
                "output directory {} already exists",
                dir.display()
            )));
        }
        let name = dir.file_name().ok_or_else(|| {
            Error::InvalidArgument(format!("invalid output path {}", dir.display()))
        })?;
        let parent = match dir.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => std::path::PathBuf::from("."),
        };
        let staging = parent.join(format!(".{}.partial", name.to_string_lossy()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        let result = self
            .write_into(&staging)
            .and_then(|_| {
                extras
                    .iter()
                    .try_for_each(|(name, v)| write_json(&staging.join(name), v))
            })
            .and_then(|_| fs::rename(&staging, dir).map_err(|e| Error::io(dir, e)));
        if result.is_err() {
            let _ = fs::remove_dir_all(&staging);
        }
        result
    }

    fn write_into(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = SceneManifest {
            config: self.config.clone(),
            image_ids: self.image_ids.clone(),
        };
        write_json(
            &dir.join(MANIFEST),
            &serde_json::to_value(&manifest).expect("manifest serializes"),
        )?;
        let gt = coco_annotations_json(
            &self.ground_truth(),
            self.config.width as u64,
            self.config.height as u64,
        );
        write_json(&dir.join(GT_FILE), &gt)?;
        for (&id, scene) in self.image_ids.iter().zip(&self.scenes) {
            let sd = Self::scene_dir(dir, id);
            fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
            save_maps(&scene.maps, &sd, "")?;
            save_maps(&scene.clean_maps, &sd, "clean_")?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: SceneManifest = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        let gt = load_coco_keypoints(dir.join(GT_FILE))?;
        let mut scenes = Vec::with_capacity(manifest.image_ids.len());
        for &id in &manifest.image_ids {
            let sd = Self::scene_dir(dir, id);
            let gts = gt
                .iter()
                .find(|(i, _)| *i == id)
                .map(|(_, g)| g.clone())
                .unwrap_or_default();
            scenes.push(Scene {
                gts,
                maps: load_maps(&sd, "", manifest.config.stride)?,
                clean_maps: load_maps(&sd, "clean_", manifest.config.stride)?,
            });
        }
        Ok(SceneSet {
            config: manifest.config,
            image_ids: manifest.image_ids,
            scenes,
        })
    }
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_maps(maps: &DenseMaps, dir: &Path, prefix: &str) -> Result<()> {
    save_tensor(&maps.heatmaps, dir.join(format!("{prefix}heatmaps.lgct")))?;
    save_tensor(&maps.offsets, dir.join(format!("{prefix}offsets.lgct")))?;
    save_tensor(&maps.features, dir.join(format!("{prefix}features.lgct")))
}

fn load_maps(dir: &Path, prefix: &str, stride: usize) -> Result<DenseMaps> {
    DenseMaps::new(
        load_tensor(dir.join(format!("{prefix}heatmaps.lgct")))?,
        load_tensor(dir.join(format!("{prefix}offsets.lgct")))?,
        load_tensor(dir.join(format!("{prefix}features.lgct")))?,
        stride,
    )
}
