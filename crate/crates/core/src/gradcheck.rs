//! Central finite-difference checks of every trainable operation and loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cmp::{
    init_params, sample_context, CmpConfig, CmpNet, CmpParams, ContextSamples, KamSet, Mode,
    NormVariant,
};
use crate::error::Result;
use crate::kem::{local_kems, ReweighedHeatmaps};
use crate::losses::{
    heatmap_loss, offset_loss, oks_kernel_loss, refined_heatmap_loss, GtCenter, KernelTarget,
    LossWeights,
};
use crate::model::PoseSet;
use crate::pipeline::{initial_poses, scene_loss, RefineConfig, TrainConfig};
use crate::refine::{adaptation_backward, contextual_adaptation, RefinedHeatmaps};
use crate::skeleton::{SkeletonSpec, NUM_KEYPOINTS};
use crate::synth::{sample_scene, Scene, SceneConfig};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error in units of `max(1, |f|)`.
/// Rounding noise in `f` limits what a step of `FD_STEP` can resolve to
/// roughly `1e-8 |f|`, so gradients far below `1e-3 |f|` are compared in
/// absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub step: f64,
    pub entries: usize,
    /// Coordinates passed over because the stencil crossed a ReLU kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR * max(1, |f|))`.
pub fn relative_error(analytic: f64, numeric: f64, objective: f64) -> f64 {
    let floor = REL_FLOOR * objective.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type Pattern<'a> = &'a mut dyn FnMut(&[f64]) -> Result<Vec<bool>>;

/// Compares `analytic[i]` with the central difference of `f` in coordinate
/// `i` of `x`, for at most `max` random coordinates. With `kinks`, a
/// coordinate whose stencil flips any ReLU is skipped and another is drawn.
fn check_entries(
    name: &str,
    analytic: &[f64],
    x: &[f64],
    max: usize,
    step: f64,
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    mut kinks: Option<Pattern<'_>>,
) -> Result<CheckResult> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(rng);
    let mut probe = x.to_vec();
    let objective = f(&probe)?;
    let mut worst: f64 = 0.0;
    let (mut entries, mut skipped) = (0, 0);
    for &i in &order {
        if entries == max {
            break;
        }
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe)?;
        let up_pattern = kinks.as_mut().map(|k| k(&probe)).transpose()?;
        probe[i] = orig - step;
        let down = f(&probe)?;
        let down_pattern = kinks.as_mut().map(|k| k(&probe)).transpose()?;
        probe[i] = orig;
        if up_pattern != down_pattern {
            skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric, objective));
        entries += 1;
    }
    Ok(CheckResult {
        name: name.to_string(),
        step,
        entries,
        skipped,
        max_rel_error: worst,
        passed: worst <= TOLERANCE && entries > 0,
    })
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Random direction of unit length, so objectives stay O(1).
fn unit_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random_tensor(shape, -1.0, 1.0, rng);
    let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    t.data_mut().iter_mut().for_each(|v| *v /= norm);
    t
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_entry(params: &CmpParams, tensor: usize, values: &[f64]) -> CmpParams {
    let mut p = params.clone();
    p.weights.tensors_mut()[tensor]
        .data_mut()
        .copy_from_slice(values);
    p
}

/// Projection + CMP parameters under `sum(w * KAM)`.
fn check_cmp(norm: NormVariant, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let cfg = CmpConfig {
        latent_dim: 4,
        feature_channels: 5,
        window: 5,
        norm,
        positional: true,
    };
    let mut params = init_params(rng.random(), &cfg)?;
    params.randomize(rng.random(), 0.3);
    let samples = ContextSamples {
        values: random_tensor(&[2, NUM_KEYPOINTS, 5, 5, 5], -1.0, 1.0, rng),
    };
    let w = unit_tensor(&[2, NUM_KEYPOINTS, 5, 5], rng);
    let objective = |p: &CmpParams| -> Result<f64> {
        let mut net = CmpNet::new(p.clone());
        Ok(dot(&net.forward(samples.clone(), mode)?.values, &w))
    };
    let mut net = CmpNet::new(params.clone());
    net.forward(samples.clone(), mode)?;
    let grads = net.backward(&w, &[])?;
    let tag = format!(
        "cmp[{norm},{}]",
        if mode == Mode::Train { "train" } else { "eval" }
    );
    let mut out = Vec::new();
    for (t, ((name, g), (_, p))) in grads
        .named()
        .into_iter()
        .zip(params.weights.named())
        .enumerate()
    {
        let mut pattern = |x: &[f64]| -> Result<Vec<bool>> {
            let mut net = CmpNet::new(with_entry(&params, t, x));
            net.forward(samples.clone(), mode)?;
            Ok(net.relu_pattern().unwrap_or_default())
        };
        let r = check_entries(
            &format!("{tag}.{name}"),
            g.data(),
            p.data(),
            12,
            FD_STEP,
            rng,
            |x| objective(&with_entry(&params, t, x)),
            Some(&mut pattern),
        )?;
        out.push(r);
    }
    Ok(out)
}

fn check_adaptation(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let (n, a, k) = (2, 13, 5);
    let h = random_tensor(&[n, NUM_KEYPOINTS, a, a], 0.0, 1.0, rng);
    let kam = random_tensor(&[n, NUM_KEYPOINTS, k, k], 0.0, 1.0, rng);
    let w = unit_tensor(&[n, NUM_KEYPOINTS, a, a], rng);
    let rh = |v: Tensor| ReweighedHeatmaps {
        values: v,
        window: a,
        sigma: 2.0,
    };
    let (dh, dk) = adaptation_backward(
        &rh(h.clone()),
        &KamSet {
            values: kam.clone(),
        },
        &w,
    )?;
    let f_h = |x: &[f64]| -> Result<f64> {
        let hv = Tensor::from_vec(h.shape(), x.to_vec())?;
        Ok(dot(
            &contextual_adaptation(
                &rh(hv),
                &KamSet {
                    values: kam.clone(),
                },
            )?
            .values,
            &w,
        ))
    };
    let f_k = |x: &[f64]| -> Result<f64> {
        let kv = Tensor::from_vec(kam.shape(), x.to_vec())?;
        Ok(dot(
            &contextual_adaptation(&rh(h.clone()), &KamSet { values: kv })?.values,
            &w,
        ))
    };
    Ok(vec![
        check_entries(
            "adaptation.heatmaps",
            dh.data(),
            h.data(),
            60,
            FD_STEP,
            rng,
            f_h,
            None,
        )?,
        check_entries(
            "adaptation.kernels",
            dk.data(),
            kam.data(),
            60,
            FD_STEP,
            rng,
            f_k,
            None,
        )?,
    ])
}

fn check_losses(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let weights = LossWeights::default();
    let mut out = Vec::new();

    let pred = random_tensor(&[18, 4, 5], 0.0, 1.0, rng);
    let gt = random_tensor(&[18, 4, 5], 0.0, 1.0, rng);
    let mut mask = Tensor::zeros(&[4, 5]);
    for v in mask.data_mut().iter_mut().take(9) {
        *v = 1.0;
    }
    let (_, g) = heatmap_loss(&pred, &gt, &mask, &weights)?;
    out.push(check_entries(
        "loss.heatmap",
        g.data(),
        pred.data(),
        80,
        FD_STEP,
        rng,
        |x| {
            Ok(heatmap_loss(
                &Tensor::from_vec(pred.shape(), x.to_vec())?,
                &gt,
                &mask,
                &weights,
            )?
            .0)
        },
        None,
    )?);

    let pred = random_tensor(&[34, 4, 5], -1.0, 1.0, rng);
    let gt = random_tensor(&[34, 4, 5], -1.0, 1.0, rng);
    let centers = [
        GtCenter {
            x: 1,
            y: 2,
            area: 3.0,
        },
        GtCenter {
            x: 4,
            y: 0,
            area: 0.5,
        },
    ];
    // keep residuals away from the smoothL1 cut-off where the second derivative jumps
    let mut pred_v = pred.data().to_vec();
    for (p, t) in pred_v.iter_mut().zip(gt.data()) {
        let r = *p - t;
        if (r.abs() - weights.beta).abs() < 1e-3 {
            *p += 0.01;
        }
    }
    let pred = Tensor::from_vec(pred.shape(), pred_v)?;
    let (_, g) = offset_loss(&pred, &gt, &centers, &weights)?;
    out.push(check_entries(
        "loss.offset",
        g.data(),
        pred.data(),
        80,
        FD_STEP,
        rng,
        |x| {
            Ok(offset_loss(
                &Tensor::from_vec(pred.shape(), x.to_vec())?,
                &gt,
                &centers,
                &weights,
            )?
            .0)
        },
        None,
    )?);

    let r = random_tensor(&[2, NUM_KEYPOINTS, 7, 7], 0.0, 1.0, rng);
    let t = random_tensor(&[2, NUM_KEYPOINTS, 7, 7], 0.0, 1.0, rng);
    let (_, g) = refined_heatmap_loss(&RefinedHeatmaps { values: r.clone() }, &t)?;
    out.push(check_entries(
        "loss.refined",
        g.data(),
        r.data(),
        80,
        FD_STEP,
        rng,
        |x| {
            let values = Tensor::from_vec(r.shape(), x.to_vec())?;
            Ok(refined_heatmap_loss(&RefinedHeatmaps { values }, &t)?.0)
        },
        None,
    )?);

    let k = 5;
    let kam = random_tensor(&[2, NUM_KEYPOINTS, k, k], 0.0, 1.0, rng);
    let targets: Vec<Option<KernelTarget>> = vec![
        Some(KernelTarget {
            target: (0..NUM_KEYPOINTS * k * k)
                .map(|_| rng.random_range(0.5..1.0))
                .collect(),
            match_score: rng.random_range(0.1..1.0),
            keypoint_weights: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            gt_index: 0,
        }),
        None,
    ];
    let (_, g) = oks_kernel_loss(
        &KamSet {
            values: kam.clone(),
        },
        &targets,
    )?;
    out.push(check_entries(
        "loss.kernel",
        g.data(),
        kam.data(),
        80,
        FD_STEP,
        rng,
        |x| {
            let values = Tensor::from_vec(kam.shape(), x.to_vec())?;
            Ok(oks_kernel_loss(&KamSet { values }, &targets)?.0)
        },
        None,
    )?);
    Ok(out)
}

/// Total training loss through sampling, CMP, reweighing and adaptation.
fn check_pipeline(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let scene: Scene = sample_scene(&SceneConfig {
        seed: rng.random(),
        height: 96,
        width: 96,
        persons: (2, 2),
        scale: (36.0, 40.0),
        feature_channels: 17,
        ..SceneConfig::default()
    })?;
    let spec = SkeletonSpec::coco();
    let cfg = TrainConfig {
        latent_dim: 4,
        refine: RefineConfig {
            global_window: 25,
            ..RefineConfig::default()
        },
        ..TrainConfig::default()
    };
    let initial: PoseSet = initial_poses(&scene.maps, &cfg.refine, 3.0, rng.random())?;
    let mut params = init_params(rng.random(), &cfg.cmp_config(17))?;
    params.randomize(rng.random(), 0.2);
    // operate where KAMs are small, as after training, so the loss is O(1)
    params
        .weights
        .head_b
        .data_mut()
        .iter_mut()
        .for_each(|b| *b -= 3.0);
    let constants = (0.0, 0.0);
    let local = local_kems(&initial, &spec, cfg.refine.local_window)?;
    let samples = sample_context(&scene.maps.features, scene.maps.stride, &local)?;
    let base = scene_loss(&scene, &initial, &params, &cfg, &spec, constants)?;
    let mut out = Vec::new();
    for (t, ((name, g), (_, p))) in base
        .grads
        .named()
        .into_iter()
        .zip(params.weights.named())
        .enumerate()
    {
        let mut pattern = |x: &[f64]| -> Result<Vec<bool>> {
            let mut net = CmpNet::new(with_entry(&params, t, x));
            net.forward(samples.clone(), Mode::Train)?;
            Ok(net.relu_pattern().unwrap_or_default())
        };
        let r = check_entries(
            &format!("chain.total.{name}"),
            g.data(),
            p.data(),
            6,
            FD_STEP,
            rng,
            |x| {
                Ok(scene_loss(
                    &scene,
                    &initial,
                    &with_entry(&params, t, x),
                    &cfg,
                    &spec,
                    constants,
                )?
                .total)
            },
            Some(&mut pattern),
        )?;
        out.push(r);
    }
    Ok(out)
}

/// Runs the whole suite from one seed.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for norm in [NormVariant::Plain, NormVariant::Recalibrating] {
        out.extend(check_cmp(norm, Mode::Train, &mut rng)?);
    }
    out.extend(check_cmp(NormVariant::Recalibrating, Mode::Eval, &mut rng)?);
    out.extend(check_adaptation(&mut rng)?);
    out.extend(check_losses(&mut rng)?);
    out.extend(check_pipeline(&mut rng)?);
    Ok(out)
}

pub fn report_table(results: &[CheckResult]) -> String {
    let mut s = format!(
        "{:<48} {:>7} {:>7} {:>7} {:>12}  status\n",
        "check", "step", "entries", "skipped", "max rel err"
    );
    for r in results {
        s.push_str(&format!(
            "{:<48} {:>7.0e} {:>7} {:>7} {:>12.3e}  {}\n",
            r.name,
            r.step,
            r.entries,
            r.skipped,
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}
