//! Procedural cluttered waste scenes with exact ground-truth masks.

mod corpus;
mod shapes;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

pub use corpus::{generate_corpus, load_corpus, read_manifest, read_mask, save_generated, Corpus, CorpusEntry, Manifest, Split, MANIFEST};
pub use shapes::ShapeDescriptor;

use crate::error::{Error, Result};
use crate::gan::NUM_CLASSES;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const RIGID_PLASTIC: u8 = 1;
pub const CARDBOARD: u8 = 2;
pub const METAL: u8 = 3;
pub const SOFT_PLASTIC: u8 = 4;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background+paper", "rigid plastic", "cardboard", "metal", "soft plastic"];

/// Background never drops below this pixel fraction.
pub const MIN_BACKGROUND: f64 = 0.4;

/// Plane depth and object top depth, in meters, of the flat evaluation scene.
pub const TABLE_DEPTH: f64 = 1.0;
pub const OBJECT_DEPTH: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub resolution: usize,
    /// Labeled training scenes.
    pub count: usize,
    /// Held-out scenes, generated after the training indices.
    pub test_count: usize,
    pub seed: u64,
    /// Relative pixel frequency per class, background first.
    pub class_frequency_targets: [f64; NUM_CLASSES],
    /// Mean number of objects per scene.
    pub clutter_density: f64,
    pub texture_noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            count: 100,
            test_count: 200,
            seed: 0,
            // background, rigid plastic, cardboard, metal, soft plastic
            class_frequency_targets: [0.70, 0.04, 0.15, 0.02, 0.09],
            clutter_density: 6.0,
            texture_noise: 0.1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::config(format!("scene resolution must be at least 16, got {}", self.resolution)));
        }
        let t = &self.class_frequency_targets;
        if t.iter().any(|&f| !(f >= 0.0) || !f.is_finite()) || t.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("class frequency targets must be non-negative and not all zero"));
        }
        if t[0] / t.iter().sum::<f64>() < MIN_BACKGROUND {
            return Err(Error::config("background target must be at least 0.4"));
        }
        if !(self.clutter_density >= 0.0) || !self.clutter_density.is_finite() {
            return Err(Error::config("clutter density must be a finite non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.texture_noise) {
            return Err(Error::config("texture noise must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Targets scaled to sum to one.
    pub fn normalized_targets(&self) -> [f64; NUM_CLASSES] {
        let s: f64 = self.class_frequency_targets.iter().sum();
        self.class_frequency_targets.map(|f| f / s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: u8,
    pub shape: ShapeDescriptor,
    /// Visible pixels after occlusion.
    pub area: usize,
}

/// One scene: `[3, H, W]` image in `[-1, 1]` (8-bit quantized), index mask and objects.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub resolution: usize,
    pub image: Tensor<f32>,
    /// Row-major class indices.
    pub mask: Vec<u8>,
    pub objects: Vec<SceneObject>,
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn from_byte(b: u8) -> f32 {
    (b as f64 / 255.0 * 2.0 - 1.0) as f32
}

impl SceneSample {
    /// Interleaved 8-bit RGB, row-major.
    pub fn rgb_bytes(&self) -> Vec<u8> {
        let plane = self.resolution * self.resolution;
        let d = self.image.data();
        (0..plane)
            .flat_map(|p| (0..3).map(move |c| to_byte(d[c * plane + p] as f64)))
            .collect()
    }

    /// Rebuilds a sample from 8-bit rasters.
    pub fn from_bytes(resolution: usize, rgb: &[u8], mask: Vec<u8>, objects: Vec<SceneObject>) -> Result<Self> {
        let plane = resolution * resolution;
        if rgb.len() != 3 * plane || mask.len() != plane {
            return Err(Error::dim("scene rasters", &[3 * plane, plane], &[rgb.len(), mask.len()]));
        }
        if let Some(&bad) = mask.iter().find(|&&m| m as usize >= NUM_CLASSES) {
            return Err(Error::Format(format!("mask index {bad} out of range")));
        }
        let mut data = vec![0f32; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = from_byte(rgb[3 * p + c]);
            }
        }
        Ok(Self {
            resolution,
            image: Tensor::new(&[3, resolution, resolution], data)?,
            mask,
            objects,
        })
    }

    pub fn image_as<T: Scalar>(&self) -> Tensor<T> {
        self.image.cast()
    }

    /// `[C, H, W]` one-hot label planes.
    pub fn one_hot<T: Scalar>(&self, classes: usize) -> Tensor<T> {
        let plane = self.mask.len();
        let mut data = vec![T::zero(); classes * plane];
        for (p, &m) in self.mask.iter().enumerate() {
            data[m as usize * plane + p] = T::one();
        }
        Tensor::new(&[classes, self.resolution, self.resolution], data).expect("one-hot shape")
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        self.mask.iter().for_each(|&m| c[m as usize] += 1);
        c
    }

    /// Index into `objects` of the object owning each pixel; later objects occlude earlier ones.
    pub fn object_map(&self) -> Vec<Option<usize>> {
        let res = self.resolution;
        let mut owner = vec![None; res * res];
        for (i, o) in self.objects.iter().enumerate() {
            for (p, slot) in owner.iter_mut().enumerate() {
                if o.shape.contains((p / res) as f64 + 0.5, (p % res) as f64 + 0.5) {
                    *slot = Some(i);
                }
            }
        }
        owner
    }

    /// Flat table at [`TABLE_DEPTH`] with every object raised to [`OBJECT_DEPTH`].
    pub fn depth_map(&self) -> Vec<f64> {
        self.mask
            .iter()
            .map(|&m| if m == BACKGROUND { TABLE_DEPTH } else { OBJECT_DEPTH })
            .collect()
    }
}

type Rgb = [f64; 3];

const PAPER: [Rgb; 3] = [[0.80, 0.78, 0.72], [0.70, 0.70, 0.68], [0.86, 0.84, 0.80]];
const RIGID: [Rgb; 4] = [[0.20, 0.35, 0.75], [0.85, 0.85, 0.88], [0.75, 0.20, 0.20], [0.30, 0.65, 0.35]];
const CARDBOARD_RGB: Rgb = [0.66, 0.52, 0.34];
const METAL_RGB: Rgb = [0.55, 0.57, 0.60];
const FILM: [Rgb; 3] = [[0.90, 0.90, 0.95], [0.20, 0.20, 0.25], [0.85, 0.80, 0.30]];

/// Per-object area (pixels) so that `clutter_density` objects leave the
/// background target uncovered on average. The factor compensates for
/// clipping at the image border.
fn object_area(cfg: &CorpusConfig) -> f64 {
    const BORDER_LOSS: f64 = 1.22;
    let bg = cfg.normalized_targets()[0].max(MIN_BACKGROUND);
    let r2 = (cfg.resolution * cfg.resolution) as f64;
    if cfg.clutter_density == 0.0 {
        return 0.0;
    }
    -bg.ln() / cfg.clutter_density * r2 * BORDER_LOSS
}

fn pick(r: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = r.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn jitter(r: &mut ChaCha8Rng, c: Rgb, amount: f64) -> Rgb {
    let shift = r.random_range(-amount..amount);
    c.map(|v| v + shift + r.random_range(-amount..amount) * 0.3)
}

/// Renders scene `index` of the corpus described by `cfg`; a pure function of
/// `(cfg, index)`.
pub fn generate_scene(cfg: &CorpusConfig, index: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    r.set_stream(index);
    let res = cfg.resolution;
    let plane = res * res;
    let rf = res as f64;

    // background: a few overlapping paper sheets
    let mut rgb: Vec<Rgb> = vec![jitter(&mut r, PAPER[0], 0.04); plane];
    for _ in 0..r.random_range(2..5) {
        let base = PAPER[r.random_range(0..PAPER.len())];
        let tone = jitter(&mut r, base, 0.05);
        let sheet_area = rf * rf * r.random_range(0.1..0.35);
        let sheet = shapes::random_polygon(&mut r, sheet_area, rf, 4);
        for p in 0..plane {
            let (y, x) = ((p / res) as f64 + 0.5, (p % res) as f64 + 0.5);
            if sheet.contains(y, x) {
                rgb[p] = tone;
            }
        }
    }

    let targets = cfg.normalized_targets();
    let contaminant: Vec<f64> = targets[1..].to_vec();
    let n_objects = if cfg.clutter_density > 0.0 && contaminant.iter().sum::<f64>() > 0.0 {
        Poisson::new(cfg.clutter_density)
            .map_err(|e| Error::config(format!("clutter density: {e}")))?
            .sample(&mut r) as usize
    } else {
        0
    };
    let base_area = object_area(cfg);
    let mut owner: Vec<Option<usize>> = vec![None; plane];
    let mut mask = vec![BACKGROUND; plane];
    let mut painted: Vec<(u8, ShapeDescriptor)> = Vec::new();
    let min_bg = (MIN_BACKGROUND * plane as f64).ceil() as usize;
    let mut bg_count = plane;
    for _ in 0..n_objects {
        let class = pick(&mut r, &contaminant) as u8 + 1;
        let area = base_area * r.random_range(0.5..1.5);
        let variant: f64 = r.random();
        let corners = r.random_range(4..8);
        let shape = match class {
            RIGID_PLASTIC if variant < 0.5 => shapes::random_ellipse(&mut r, area, rf),
            RIGID_PLASTIC => shapes::random_polygon(&mut r, area, rf, corners.max(5)),
            CARDBOARD => shapes::random_polygon(&mut r, area, rf, corners.min(5)),
            METAL => shapes::random_ellipse(&mut r, area, rf),
            _ if variant < 0.7 => shapes::random_strip(&mut r, area, rf),
            _ => shapes::random_ellipse(&mut r, area, rf),
        };
        let covered: Vec<usize> = (0..plane)
            .filter(|&p| shape.contains((p / res) as f64 + 0.5, (p % res) as f64 + 0.5))
            .collect();
        let newly_covered = covered.iter().filter(|&&p| mask[p] == BACKGROUND).count();
        // colour draws happen even for skipped objects so later objects do not depend on the skip
        let swatch = r.random_range(0..RIGID.len());
        let colour = match class {
            RIGID_PLASTIC => jitter(&mut r, RIGID[swatch], 0.05),
            CARDBOARD => jitter(&mut r, CARDBOARD_RGB, 0.06),
            METAL => jitter(&mut r, METAL_RGB, 0.05),
            _ => FILM[swatch % FILM.len()],
        };
        let light: (f64, f64) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        if covered.is_empty() || bg_count - newly_covered < min_bg {
            continue;
        }
        let id = painted.len();
        let (cy, cx) = shape.centre();
        for &p in &covered {
            let (y, x) = ((p / res) as f64 + 0.5, (p % res) as f64 + 0.5);
            rgb[p] = match class {
                METAL => {
                    let s = 0.15 * ((y - cy) * light.0 + (x - cx) * light.1) / rf * 4.0;
                    colour.map(|v| v + s)
                }
                // translucent film shows what lies beneath
                SOFT_PLASTIC => {
                    let under = rgb[p];
                    [0, 1, 2].map(|c| 0.55 * under[c] + 0.45 * colour[c])
                }
                _ => colour,
            };
            if mask[p] == BACKGROUND {
                bg_count -= 1;
            }
            mask[p] = class;
            owner[p] = Some(id);
        }
        painted.push((class, shape));
    }

    let mut data = vec![0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let noise = if cfg.texture_noise > 0.0 {
                r.random_range(-cfg.texture_noise..cfg.texture_noise)
            } else {
                0.0
            };
            let v = (rgb[p][c] + noise) * 2.0 - 1.0;
            data[c * plane + p] = from_byte(to_byte(v));
        }
    }
    let mut areas = vec![0usize; painted.len()];
    owner.iter().flatten().for_each(|&i| areas[i] += 1);
    let objects = painted
        .into_iter()
        .zip(areas)
        .filter(|(_, a)| *a > 0)
        .map(|((class, shape), area)| SceneObject { class, shape, area })
        .collect();
    Ok(SceneSample {
        resolution: res,
        image: Tensor::new(&[3, res, res], data)?,
        mask,
        objects,
    })
}

/// Per-class pixel frequency over a set of scenes.
pub fn class_frequencies(scenes: &[SceneSample]) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for s in scenes {
        for (c, n) in s.class_counts().iter().enumerate() {
            counts[c] += n;
        }
    }
    let total: usize = counts.iter().sum();
    counts.map(|c| c as f64 / total.max(1) as f64)
}
