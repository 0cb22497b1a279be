//! End-to-end refinement, toy training and checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmp::{
    init_params, sample_context, CmpConfig, CmpNet, CmpParams, KamSet, Mode, NormStats, NormVariant,
};
use crate::decode::{decode, DEFAULT_CENTER_THRESHOLD, DEFAULT_MAX_CENTERS};
use crate::error::{Error, Result};
use crate::kem::{
    global_kems, local_kems, reweigh_sigma, sample_and_reweigh, upsample_heatmaps, GLOBAL_WINDOW,
    LOCAL_WINDOW,
};
use crate::losses::{
    gt_centers, heatmap_loss, kernel_targets, local_gt_heatmaps, offset_loss, oks_kernel_loss,
    refined_heatmap_loss, render_gt_heatmaps, render_gt_offsets, total_loss, LossParts,
    LossWeights,
};
use crate::model::{DenseMaps, GtInstance, KemGrid, PoseSet};
use crate::optim::{optimizer_step, AdamConfig, AdamState};
use crate::refine::{decode_final, Adaptation, RefinedHeatmaps, DEFAULT_TOP1_WEIGHT};
use crate::skeleton::SkeletonSpec;
use crate::synth::{perturb_poses, scene_seed, write_json, Scene};
use crate::tensor::{load_tensor, save_tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub local_window: usize,
    pub global_window: usize,
    pub top1_lambda: f64,
    pub max_centers: usize,
    pub center_threshold: f64,
    /// Apply the per-type expansion rates to the global lattice too.
    pub scaled_global: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            local_window: LOCAL_WINDOW,
            global_window: GLOBAL_WINDOW,
            top1_lambda: DEFAULT_TOP1_WEIGHT,
            max_centers: DEFAULT_MAX_CENTERS,
            center_threshold: DEFAULT_CENTER_THRESHOLD,
            scaled_global: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_window % 2 == 0 || self.global_window % 2 == 0 {
            return Err(Error::InvalidArgument("windows must be odd".into()));
        }
        if !(0.0..=1.0).contains(&self.top1_lambda) {
            return Err(Error::InvalidArgument(
                "top1 lambda must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Initial poses: decode, then optionally perturb.
pub fn initial_poses(
    maps: &DenseMaps,
    cfg: &RefineConfig,
    perturb: f64,
    seed: u64,
) -> Result<PoseSet> {
    perturb_poses(
        &decode(maps, cfg.max_centers, cfg.center_threshold),
        perturb,
        seed,
    )
}

/// Everything one refinement pass produces.
pub struct RefineOutput {
    pub local: KemGrid,
    pub global: KemGrid,
    pub kams: KamSet,
    pub refined: RefinedHeatmaps,
    pub poses: PoseSet,
}

struct Stages {
    local: KemGrid,
    global: KemGrid,
    kams: KamSet,
    refined: RefinedHeatmaps,
}

fn run_stages(
    maps: &DenseMaps,
    initial: &PoseSet,
    net: &mut CmpNet,
    adapt: &mut Adaptation,
    cfg: &RefineConfig,
    spec: &SkeletonSpec,
    mode: Mode,
) -> Result<Stages> {
    let cmp_cfg = &net.params.config;
    if cmp_cfg.window != cfg.local_window {
        return Err(Error::InvalidArgument(format!(
            "checkpoint window {} does not match local window {}",
            cmp_cfg.window, cfg.local_window
        )));
    }
    if cmp_cfg.feature_channels != maps.feature_channels() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint expects {} feature channels, maps have {}",
            cmp_cfg.feature_channels,
            maps.feature_channels()
        )));
    }
    let local = local_kems(initial, spec, cfg.local_window)?;
    let samples = sample_context(&maps.features, maps.stride, &local)?;
    let kams = net.forward(samples, mode)?;
    let up = upsample_heatmaps(&maps.keypoint_heatmaps(), maps.stride)?;
    let global = global_kems(
        initial,
        cfg.global_window,
        cfg.scaled_global.then_some(spec),
    )?;
    let hbar = sample_and_reweigh(&up, &global, reweigh_sigma(cfg.global_window))?;
    let refined = adapt.forward(hbar, kams.clone())?;
    Ok(Stages {
        local,
        global,
        kams,
        refined,
    })
}

/// Runs local KEMs -> context -> CMP -> reweighing -> adaptation -> decoding
/// from the given initial poses, with running normalization statistics.
pub fn refine_poses(
    maps: &DenseMaps,
    initial: &PoseSet,
    params: &CmpParams,
    cfg: &RefineConfig,
    spec: &SkeletonSpec,
) -> Result<RefineOutput> {
    cfg.validate()?;
    let mut net = CmpNet::new(params.clone());
    let mut adapt = Adaptation::new();
    let st = run_stages(maps, initial, &mut net, &mut adapt, cfg, spec, Mode::Eval)?;
    let poses = decode_final(&st.refined, &st.global, &initial.centers(), cfg.top1_lambda)?;
    Ok(RefineOutput {
        local: st.local,
        global: st.global,
        kams: st.kams,
        refined: st.refined,
        poses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Upper bound on optimizer steps (one scene per step).
    pub max_steps: usize,
    pub latent_dim: usize,
    pub norm: NormVariant,
    pub positional: bool,
    /// Uniform perturbation (px) of the decoded initial poses.
    pub perturb: f64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub refine: RefineConfig,
}

pub const TOY_LATENT_DIM: usize = 16;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 4,
            max_steps: 400,
            latent_dim: TOY_LATENT_DIM,
            norm: NormVariant::Recalibrating,
            positional: true,
            perturb: 4.0,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            refine: RefineConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn cmp_config(&self, feature_channels: usize) -> CmpConfig {
        CmpConfig {
            latent_dim: self.latent_dim,
            feature_channels,
            window: self.refine.local_window,
            norm: self.norm,
            positional: self.positional,
        }
    }
}

/// Constant (backbone-side) loss terms and targets of one scene.
struct SceneTargets {
    heatmap: f64,
    offset: f64,
}

fn scene_targets(scene: &Scene, w: &LossWeights, sigma_hm: f64) -> Result<SceneTargets> {
    let maps = &scene.maps;
    let (h, wd) = (maps.height(), maps.width());
    let t = render_gt_heatmaps(&scene.gts, maps.stride, h, wd, sigma_hm);
    let (heatmap, _) = heatmap_loss(&maps.heatmaps, &t.heatmaps, &t.mask, w)?;
    let centers = gt_centers(&scene.gts, maps.stride, h, wd);
    let offset = if centers.is_empty() {
        0.0
    } else {
        let gt = render_gt_offsets(&scene.gts, maps.stride, h, wd, 0);
        offset_loss(&maps.offsets, &gt, &centers, w)?.0
    };
    Ok(SceneTargets { heatmap, offset })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub parts: LossParts,
    pub total: f64,
}

pub fn loss_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,L_H,L_Hr,L_O,L_K,total\n");
    for r in log {
        s.push_str(&format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}\n",
            r.step, r.parts.heatmap, r.parts.refined, r.parts.offset, r.parts.kernel, r.total
        ));
    }
    s
}

/// Loss terms and parameter gradients of the refinement head on one scene.
pub struct SceneLoss {
    pub parts: LossParts,
    pub total: f64,
    pub grads: crate::cmp::Weights,
    pub stats: Vec<NormStats>,
}

/// Forward and backward pass of the trainable head for one scene, starting
/// from `initial`. Backbone terms `L_H`, `L_O` enter as constants.
pub fn scene_loss(
    scene: &Scene,
    initial: &PoseSet,
    params: &CmpParams,
    cfg: &TrainConfig,
    spec: &SkeletonSpec,
    constants: (f64, f64),
) -> Result<SceneLoss> {
    let mut net = CmpNet::new(params.clone());
    let mut adapt = Adaptation::new();
    let st = run_stages(
        &scene.maps,
        initial,
        &mut net,
        &mut adapt,
        &cfg.refine,
        spec,
        Mode::Train,
    )?;
    let targets = kernel_targets(
        initial,
        &st.local,
        &scene.gts,
        spec,
        cfg.loss.clamp_kernel_target,
    );
    let (l_k, dk_kernel) = oks_kernel_loss(&st.kams, &targets)?;
    let matched: Vec<Option<&GtInstance>> = targets
        .iter()
        .map(|t| t.as_ref().map(|t| &scene.gts[t.gt_index]))
        .collect();
    let target = local_gt_heatmaps(
        &st.global,
        &matched,
        reweigh_sigma(cfg.refine.global_window),
    )?;
    let (l_r, dr) = refined_heatmap_loss(&st.refined, &target)?;
    let parts = LossParts {
        heatmap: constants.0,
        refined: l_r,
        offset: constants.1,
        kernel: l_k,
    };
    let (total, scale) = total_loss(&parts, &cfg.loss);
    if !total.is_finite() {
        return Err(Error::NonFinite(0));
    }
    let (_, dk_adapt) = adapt.backward(&dr)?;
    let mut dk = dk_adapt;
    for (g, k) in dk.data_mut().iter_mut().zip(dk_kernel.data()) {
        *g = scale.refined * *g + scale.kernel * k;
    }
    let grads = net.backward(&dk, &[])?;
    net.commit_stats();
    Ok(SceneLoss {
        parts,
        total,
        grads,
        stats: net.params.stats,
    })
}

pub struct TrainOutcome {
    pub params: CmpParams,
    pub log: Vec<StepLog>,
}

/// Trains projection + CMP on the scenes with Adam, one scene per step.
/// Each epoch visits the scenes in a seeded random order. Initial poses are
/// re-perturbed at every step.
pub fn train(scenes: &[Scene], cfg: &TrainConfig, spec: &SkeletonSpec) -> Result<TrainOutcome> {
    cfg.refine.validate()?;
    cfg.loss.validate()?;
    let feature_channels = scenes
        .first()
        .map(|s| s.maps.feature_channels())
        .ok_or_else(|| Error::InvalidArgument("no scenes to train on".into()))?;
    let mut params = init_params(cfg.seed, &cfg.cmp_config(feature_channels))?;
    let mut state = AdamState::new(&params.weights);
    let mut log = Vec::new();
    let sigma_hm = crate::losses::DEFAULT_HEATMAP_SIGMA;
    let constants: Vec<(f64, f64)> = scenes
        .iter()
        .map(|s| scene_targets(s, &cfg.loss, sigma_hm).map(|t| (t.heatmap, t.offset)))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut step = 0;
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            if step >= cfg.max_steps {
                break 'outer;
            }
            let initial = initial_poses(
                &scenes[i].maps,
                &cfg.refine,
                cfg.perturb,
                scene_seed(cfg.seed ^ 0xa5a5_a5a5, step),
            )?;
            let out = scene_loss(&scenes[i], &initial, &params, cfg, spec, constants[i]).map_err(
                |e| match e {
                    Error::NonFinite(_) => Error::NonFinite(step),
                    other => other,
                },
            )?;
            optimizer_step(&mut params.weights, &out.grads, &mut state, &cfg.adam).map_err(
                |e| match e {
                    Error::NonFiniteGradient(name) => {
                        Error::NonFiniteGradient(format!("{name} at step {step}"))
                    }
                    other => other,
                },
            )?;
            params.stats = out.stats;
            log.push(StepLog {
                step,
                parts: out.parts,
                total: out.total,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome { params, log })
}

const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    config: CmpConfig,
    tensors: Vec<String>,
}

fn stat_names(l: usize) -> (String, String) {
    (
        format!("layer{l}.norm.running_mean"),
        format!("layer{l}.norm.running_var"),
    )
}

/// Writes the config manifest plus one tensor file per named weight and
/// running statistic.
pub fn save_checkpoint(params: &CmpParams, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for (name, t) in params.weights.named() {
        save_tensor(t, dir.join(format!("{name}.lgct")))?;
        names.push(name);
    }
    for (l, s) in params.stats.iter().enumerate() {
        let (m, v) = stat_names(l);
        save_tensor(&s.mean, dir.join(format!("{m}.lgct")))?;
        save_tensor(&s.var, dir.join(format!("{v}.lgct")))?;
        names.push(m);
        names.push(v);
    }
    let manifest = CheckpointManifest {
        config: params.config.clone(),
        tensors: names,
    };
    write_json(
        &dir.join(CHECKPOINT_MANIFEST),
        &serde_json::to_value(&manifest).expect("manifest serializes"),
    )
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<CmpParams> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let mut params = init_params(0, &manifest.config)?;
    let names: Vec<String> = params.weights.named().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(params.weights.tensors_mut()) {
        let loaded = load_tensor(dir.join(format!("{name}.lgct")))?;
        if loaded.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "checkpoint tensor {name} has shape {:?}, config implies {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        *t = loaded;
    }
    for (l, s) in params.stats.iter_mut().enumerate() {
        let (m, v) = stat_names(l);
        s.mean = load_tensor(dir.join(format!("{m}.lgct")))?;
        s.var = load_tensor(dir.join(format!("{v}.lgct")))?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sample_scene, SceneConfig};

    fn tiny_scene() -> Scene {
        sample_scene(&SceneConfig {
            height: 96,
            width: 96,
            persons: (1, 1),
            scale: (40.0, 44.0),
            feature_channels: 17,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            latent_dim: 4,
            epochs: 1,
            max_steps: 2,
            refine: RefineConfig {
                global_window: 33,
                ..RefineConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let scene = tiny_scene();
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let out = train(std::slice::from_ref(&scene), &cfg, &SkeletonSpec::coco()).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.params, init_params(0, &cfg.cmp_config(17)).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let mut p = init_params(1, &CmpConfig::new(4, 17)).unwrap();
        p.randomize(2, 0.3);
        save_checkpoint(&p, tmp.path()).unwrap();
        assert_eq!(load_checkpoint(tmp.path()).unwrap(), p);
    }

    #[test]
    fn refine_runs_and_keeps_instances() {
        let scene = tiny_scene();
        let spec = SkeletonSpec::coco();
        let cfg = tiny_cfg();
        let params = init_params(0, &cfg.cmp_config(17)).unwrap();
        let initial = initial_poses(&scene.maps, &cfg.refine, 2.0, 5).unwrap();
        let out = refine_poses(&scene.maps, &initial, &params, &cfg.refine, &spec).unwrap();
        assert_eq!(out.poses.len(), initial.len());
        let again = refine_poses(&scene.maps, &initial, &params, &cfg.refine, &spec).unwrap();
        assert_eq!(out.poses, again.poses);
    }

    #[test]
    fn training_is_deterministic() {
        let scene = tiny_scene();
        let spec = SkeletonSpec::coco();
        let a = train(std::slice::from_ref(&scene), &tiny_cfg(), &spec).unwrap();
        let b = train(std::slice::from_ref(&scene), &tiny_cfg(), &spec).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 1);
    }
}
