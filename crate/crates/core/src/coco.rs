//! COCO keypoint annotation parsing and results-file serialization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GtInstance, Keypoint, Pose, PoseSet};
use crate::skeleton::NUM_KEYPOINTS;

pub const PERSON_CATEGORY: u64 = 1;
const KEYPOINT_ARRAY_LEN: usize = 3 * NUM_KEYPOINTS;

#[derive(Debug, Deserialize)]
struct AnnotationFile {
    #[serde(default)]
    images: Vec<ImageRecord>,
    annotations: Vec<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
    #[serde(default)]
    pub width: u64,
    #[serde(default)]
    pub height: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    #[serde(default = "person")]
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    pub num_keypoints: Option<u64>,
    pub area: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default)]
    pub iscrowd: u8,
}

fn person() -> u64 {
    PERSON_CATEGORY
}

/// One entry of the standard keypoint results array. `center` is an
/// optional extension carrying the detected person center.
#[derive(Debug, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 3]>,
}

/// Ground truth grouped by image, sorted by image id.
pub type GroundTruth = Vec<(u64, Vec<GtInstance>)>;

fn unpack_keypoints(values: &[f64], context: &str) -> Result<[Keypoint; NUM_KEYPOINTS]> {
    if values.len() != KEYPOINT_ARRAY_LEN {
        return Err(Error::parse(
            context,
            format!(
                "keypoints array has {} values, expected {KEYPOINT_ARRAY_LEN}",
                values.len()
            ),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::parse(context, "non-finite keypoint value"));
    }
    let mut out = [[0.0; 3]; NUM_KEYPOINTS];
    for (j, kp) in out.iter_mut().enumerate() {
        kp.copy_from_slice(&values[3 * j..3 * j + 3]);
    }
    Ok(out)
}

fn pack_keypoints(kps: &[Keypoint; NUM_KEYPOINTS]) -> Vec<f64> {
    kps.iter().flatten().copied().collect()
}

pub fn parse_coco_keypoints(text: &str, source: &str) -> Result<GroundTruth> {
    let file: AnnotationFile =
        serde_json::from_str(text).map_err(|e| Error::parse(source, e.to_string()))?;
    let mut by_image: BTreeMap<u64, Vec<GtInstance>> = BTreeMap::new();
    for img in &file.images {
        by_image.entry(img.id).or_default();
    }
    for (i, raw) in file.annotations.into_iter().enumerate() {
        let context = format!("{source}: annotation #{i}");
        let rec: AnnotationRecord =
            serde_json::from_value(raw).map_err(|e| Error::parse(&context, e.to_string()))?;
        let context = format!("{source}: annotation #{i} (id {})", rec.id);
        if rec.category_id != PERSON_CATEGORY {
            continue;
        }
        let keypoints = unpack_keypoints(&rec.keypoints, &context)?;
        if keypoints
            .iter()
            .any(|k| !matches!(k[2] as i64, 0..=2) || k[2].fract() != 0.0)
        {
            return Err(Error::parse(&context, "visibility flag outside {0, 1, 2}"));
        }
        if !(rec.area > 0.0) {
            return Err(Error::parse(
                &context,
                format!("non-positive area {}", rec.area),
            ));
        }
        by_image.entry(rec.image_id).or_default().push(GtInstance {
            id: rec.id,
            keypoints,
            area: rec.area,
        });
    }
    Ok(by_image.into_iter().collect())
}

pub fn load_coco_keypoints(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco_keypoints(&text, &path.display().to_string())
}

/// Serializes ground truth in the COCO annotation schema.
pub fn coco_annotations_json(gts: &GroundTruth, width: u64, height: u64) -> serde_json::Value {
    let images: Vec<ImageRecord> = gts
        .iter()
        .map(|(id, _)| ImageRecord {
            id: *id,
            file_name: None,
            width,
            height,
        })
        .collect();
    let annotations: Vec<AnnotationRecord> = gts
        .iter()
        .flat_map(|(image_id, insts)| {
            insts.iter().map(move |g| AnnotationRecord {
                id: g.id,
                image_id: *image_id,
                category_id: PERSON_CATEGORY,
                keypoints: pack_keypoints(&g.keypoints),
                num_keypoints: Some(g.num_visible() as u64),
                area: g.area,
                bbox: g.bbox().map(|b| [b[0], b[1], b[2] - b[0], b[3] - b[1]]),
                iscrowd: 0,
            })
        })
        .collect();
    serde_json::json!({
        "images": images,
        "annotations": annotations,
        "categories": [{
            "id": PERSON_CATEGORY,
            "name": "person",
            "keypoints": crate::skeleton::COCO_KEYPOINT_NAMES,
        }],
    })
}

pub fn results_records(results: &[(u64, PoseSet)]) -> Vec<ResultRecord> {
    results
        .iter()
        .flat_map(|(image_id, poses)| {
            poses.iter().map(move |p| ResultRecord {
                image_id: *image_id,
                category_id: PERSON_CATEGORY,
                keypoints: pack_keypoints(&p.keypoints),
                score: p.score,
                center: Some(p.center),
            })
        })
        .collect()
}

pub fn results_to_string(results: &[(u64, PoseSet)]) -> Result<String> {
    serde_json::to_string(&results_records(results))
        .map_err(|e| Error::parse("results", e.to_string()))
}

pub fn save_results(results: &[(u64, PoseSet)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = results_to_string(results)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a results array back into per-image pose sets (sorted by image id,
/// record order preserved within an image).
pub fn parse_results(text: &str, source: &str) -> Result<Vec<(u64, PoseSet)>> {
    let raw: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| Error::parse(source, e.to_string()))?;
    let mut by_image: BTreeMap<u64, Vec<Pose>> = BTreeMap::new();
    for (i, value) in raw.into_iter().enumerate() {
        let context = format!("{source}: result #{i}");
        let rec: ResultRecord =
            serde_json::from_value(value).map_err(|e| Error::parse(&context, e.to_string()))?;
        let keypoints = unpack_keypoints(&rec.keypoints, &context)?;
        if !rec.score.is_finite() {
            return Err(Error::parse(&context, "non-finite score"));
        }
        by_image.entry(rec.image_id).or_default().push(Pose {
            center: rec.center.unwrap_or([0.0, 0.0, rec.score]),
            keypoints,
            score: rec.score,
        });
    }
    Ok(by_image
        .into_iter()
        .map(|(id, poses)| (id, PoseSet::new(poses)))
        .collect())
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<(u64, PoseSet)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text, &path.display().to_string())
}
