use super::{components, erode_margin, project_to_3d, select_grasp, CameraIntrinsics, Mask, SuctionConfig};
use crate::error::{Error, Result};
use crate::gan::NUM_CLASSES;
use crate::scenegen::{generate_scene, CorpusConfig, SceneSample, BACKGROUND};
use crate::tensor::Tensor;
use crate::training::SegModel;

pub const CONTAMINANT_SCENES: usize = 58;
pub const BACKGROUND_SCENES: usize = 10;

/// Anything producing `[C, H, W]` class scores for a scene.
pub trait Segmenter {
    fn logits(&self, scene: &SceneSample) -> Result<Tensor<f32>>;
}

impl Segmenter for SegModel {
    fn logits(&self, scene: &SceneSample) -> Result<Tensor<f32>> {
        SegModel::logits(self, std::slice::from_ref(&scene.image))?
            .pop()
            .ok_or_else(|| Error::contract("segmenter returned nothing"))
    }
}

/// Ground-truth one-hot planes used as logits.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn logits(&self, scene: &SceneSample) -> Result<Tensor<f32>> {
        Ok(scene.one_hot(NUM_CLASSES))
    }
}

/// A scene with the contaminant class the robot is asked to pick, or none for a paper-only scene.
#[derive(Clone, Debug)]
pub struct PickScene {
    pub scene: SceneSample,
    pub target: Option<u8>,
    /// Index into `scene.objects` of the designated object.
    pub target_object: Option<usize>,
}

/// Scenes of the pick protocol: `contaminant` cluttered scenes whose largest
/// contaminant is the target, then `background` paper-only scenes.
pub fn pick_protocol_scenes(cfg: &CorpusConfig, contaminant: usize, background: usize) -> Result<Vec<PickScene>> {
    let mut out = Vec::with_capacity(contaminant + background);
    let mut index = 0u64;
    while out.len() < contaminant {
        let scene = generate_scene(cfg, index)?;
        index += 1;
        let best = scene
            .objects
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.area.cmp(&b.1.area).then(b.0.cmp(&a.0)));
        if let Some((i, o)) = best {
            let class = o.class;
            out.push(PickScene {
                scene,
                target: Some(class),
                target_object: Some(i),
            });
        }
        if index > 1000 * (contaminant as u64 + 1) {
            return Err(Error::config("scene generator produces no contaminants"));
        }
    }
    let paper = CorpusConfig {
        clutter_density: 0.0,
        ..cfg.clone()
    };
    for k in 0..background {
        out.push(PickScene {
            scene: generate_scene(&paper, index + k as u64)?,
            target: None,
            target_object: None,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PickRunReport {
    /// Category recognized on the target object.
    pub a_c: f64,
    /// Recognized and the suction disk fits inside a ground-truth region of the class.
    pub a_g: f64,
    /// Paper-only scenes where some contaminant grasp was emitted.
    pub fpr: f64,
    pub contaminant_runs: usize,
    pub background_runs: usize,
    pub no_grasp: usize,
    pub projection_failures: usize,
}

fn majority(labels: impl Iterator<Item = u8>) -> Option<u8> {
    let mut counts = [0usize; 256];
    let mut any = false;
    for l in labels {
        counts[l as usize] += 1;
        any = true;
    }
    any.then(|| (0..256).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).expect("nonempty") as u8)
}

/// Whether the disk of `radius` at `(row, col)` lies inside the connected ground-truth region of `class`.
pub fn grasp_fits(scene: &SceneSample, class: u8, row: usize, col: usize, radius: usize) -> bool {
    let r = scene.resolution;
    let Ok(mask) = Mask::from_labels(r, r, &scene.mask, class) else {
        return false;
    };
    erode_margin(&mask, radius).data[row * r + col]
        && components(&mask).iter().any(|c| c.binary_search(&(row, col)).is_ok())
}

/// Runs every scene through `seg`, then grasp selection on the target class
/// (or every contaminant class for paper-only scenes).
pub fn simulate_pick_run(
    seg: &impl Segmenter,
    scenes: &[PickScene],
    suction: &SuctionConfig,
    intr: &CameraIntrinsics,
) -> Result<PickRunReport> {
    suction.validate()?;
    intr.validate()?;
    let (mut recognised, mut grasped, mut false_pos) = (0usize, 0usize, 0usize);
    let (mut runs, mut bg_runs, mut no_grasp, mut proj_fail) = (0usize, 0usize, 0usize, 0usize);
    for ps in scenes {
        let s = &ps.scene;
        let logits = seg.logits(s)?;
        let pred = super::argmax_labels(&logits);
        match (ps.target, ps.target_object) {
            (Some(class), Some(obj)) => {
                runs += 1;
                let owner = s.object_map();
                let seen = majority(
                    owner
                        .iter()
                        .zip(&pred)
                        .filter(|(o, _)| **o == Some(obj))
                        .map(|(_, &p)| p),
                );
                if seen != Some(class) {
                    continue;
                }
                recognised += 1;
                let out = select_grasp(&logits, class, suction)?;
                let Some(best) = out.candidates().first() else {
                    no_grasp += 1;
                    continue;
                };
                let depth = s.depth_map();
                if project_to_3d(best.row, best.col, &depth, s.resolution, s.resolution, intr).is_err() {
                    proj_fail += 1;
                    continue;
                }
                if grasp_fits(s, class, best.row, best.col, suction.radius_px) {
                    grasped += 1;
                }
            }
            _ => {
                bg_runs += 1;
                let mut emitted = false;
                for class in 1..NUM_CLASSES as u8 {
                    emitted |= !select_grasp(&logits, class, suction)?.candidates().is_empty();
                }
                if emitted {
                    false_pos += 1;
                }
                if s.mask.iter().any(|&m| m != BACKGROUND) {
                    return Err(Error::contract("paper-only pick scene contains contaminants"));
                }
            }
        }
    }
    let frac = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    Ok(PickRunReport {
        a_c: frac(recognised, runs),
        a_g: frac(grasped, runs),
        fpr: frac(false_pos, bg_runs),
        contaminant_runs: runs,
        background_runs: bg_runs,
        no_grasp,
        projection_failures: proj_fail,
    })
}
