//! Grasp-point inference on segmentation output, pinhole projection and a
//! simulated pick evaluation.

mod pick;

pub use pick::{
    pick_protocol_scenes, simulate_pick_run, OracleSegmenter, PickRunReport, PickScene, Segmenter,
    BACKGROUND_SCENES, CONTAMINANT_SCENES,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::NUM_CLASSES;
use crate::tensor::Tensor;

/// Row-major binary image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("mask", &[height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Pixels of `labels` equal to `class`.
    pub fn from_labels(height: usize, width: usize, labels: &[u8], class: u8) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == class).collect())
    }

    pub fn get(&self, row: isize, col: isize) -> bool {
        row >= 0
            && col >= 0
            && (row as usize) < self.height
            && (col as usize) < self.width
            && self.data[row as usize * self.width + col as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
    }
}

/// Offsets `(dy, dx)` with `dy² + dx² ≤ r²`, row-major.
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Erosion by a Euclidean disk; pixels outside the image count as background.
pub fn erode_margin(mask: &Mask, radius_px: usize) -> Mask {
    let d = disk(radius_px);
    let mut out = Mask::empty(mask.height, mask.width);
    for (row, col) in mask.pixels() {
        let keep = d
            .iter()
            .all(|&(dy, dx)| mask.get(row as isize + dy, col as isize + dx));
        out.data[row * mask.width + col] = keep;
    }
    out
}

/// 4-connected components, each as row-major pixel list; components are ordered by first pixel.
pub fn components(mask: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            comp.push((p / w, p % w));
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.data[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// The pixel closest to the mean position of `pixels`, lowest `(row, col)` on ties.
fn central_pixel(pixels: &[(usize, usize)]) -> (usize, usize) {
    let n = pixels.len() as f64;
    let my = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let mx = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let dist = |p: &(usize, usize)| (p.0 as f64 - my).powi(2) + (p.1 as f64 - mx).powi(2);
    *pixels
        .iter()
        .min_by(|a, b| dist(a).total_cmp(&dist(b)).then(a.cmp(b)))
        .expect("non-empty component")
}

/// Repeated radius-1 erosion; every cluster that the next erosion would
/// remove contributes one point, its pixel nearest to the cluster mean.
pub fn centroid_points(mask: &Mask) -> Vec<(usize, usize)> {
    let mut current = mask.clone();
    let mut out = Vec::new();
    while !current.is_empty() {
        let next = erode_margin(&current, 1);
        for comp in components(&current) {
            if comp.iter().all(|&(r, c)| !next.data[r * next.width + c]) {
                out.push(central_pixel(&comp));
            }
        }
        current = next;
    }
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Raw class logit.
    #[default]
    Logit,
    /// Softmax probability of the class.
    Probability,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuctionConfig {
    pub radius_px: usize,
    pub top_k: usize,
    pub score: ScoreKind,
}

impl Default for SuctionConfig {
    fn default() -> Self {
        Self {
            radius_px: 2,
            top_k: 1,
            score: ScoreKind::Logit,
        }
    }
}

impl SuctionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius_px == 0 || self.top_k == 0 {
            return Err(Error::config("suction radius and top_k must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraspCandidate {
    pub row: usize,
    pub col: usize,
    pub class_id: u8,
    pub score: f64,
    pub point3d: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GraspOutcome {
    /// Best first, at most `top_k`.
    Candidates(Vec<GraspCandidate>),
    NoGraspPoint,
}

impl GraspOutcome {
    pub fn candidates(&self) -> &[GraspCandidate] {
        match self {
            Self::Candidates(c) => c,
            Self::NoGraspPoint => &[],
        }
    }
}

/// Per-pixel argmax over `[C, H, W]` scores, lowest class on ties.
pub fn argmax_labels(logits: &Tensor<f32>) -> Vec<u8> {
    let s = logits.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let d = logits.data();
    (0..plane)
        .map(|p| (1..c).fold(0, |best, ch| if d[ch * plane + p] > d[best * plane + p] { ch } else { best }) as u8)
        .collect()
}

/// One-hot `[classes, H, W]` scores of an index mask, usable as oracle logits.
pub fn mask_logits(height: usize, width: usize, labels: &[u8], classes: usize) -> Result<Tensor<f32>> {
    if labels.len() != height * width {
        return Err(Error::dim("mask_logits", &[height, width], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::config(format!("mask label {bad} outside 0..{classes}")));
    }
    let plane = height * width;
    let mut data = vec![0f32; classes * plane];
    for (p, &l) in labels.iter().enumerate() {
        data[l as usize * plane + p] = 1.0;
    }
    Tensor::new(&[classes, height, width], data)
}

/// Class score plane used for ranking.
fn score_plane(logits: &Tensor<f32>, class: usize, kind: ScoreKind) -> Vec<f64> {
    let s = logits.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let d = logits.data();
    match kind {
        ScoreKind::Logit => d[class * plane..(class + 1) * plane].iter().map(|&v| v as f64).collect(),
        ScoreKind::Probability => (0..plane)
            .map(|p| {
                let mx = (0..c).map(|ch| d[ch * plane + p] as f64).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|ch| (d[ch * plane + p] as f64 - mx).exp()).sum();
                (d[class * plane + p] as f64 - mx).exp() / z
            })
            .collect(),
    }
}

/// Mean of `plane` over the in-image part of the disk at `(row, col)`, summed in row-major offset order.
pub fn disk_mean(plane: &[f64], height: usize, width: usize, row: usize, col: usize, radius: usize) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (dy, dx) in disk(radius) {
        let (r, c) = (row as isize + dy, col as isize + dx);
        if r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
            sum += plane[r as usize * width + c as usize];
            n += 1;
        }
    }
    sum / n as f64
}

/// Ranks suction points on the `class_id` region of `[C, H, W]` logits.
pub fn select_grasp(logits: &Tensor<f32>, class_id: u8, cfg: &SuctionConfig) -> Result<GraspOutcome> {
    cfg.validate()?;
    let s = logits.shape();
    if s.len() != 3 || s[0] < 2 {
        return Err(Error::dim("select_grasp", s, &[NUM_CLASSES, 0, 0]));
    }
    if class_id == 0 || class_id as usize >= s[0] {
        return Err(Error::contract(format!("grasp class must be a contaminant in 1..{}, got {class_id}", s[0])));
    }
    let (h, w) = (s[1], s[2]);
    let mask = Mask::from_labels(h, w, &argmax_labels(logits), class_id)?;
    let points = centroid_points(&erode_margin(&mask, cfg.radius_px));
    if points.is_empty() {
        return Ok(GraspOutcome::NoGraspPoint);
    }
    let plane = score_plane(logits, class_id as usize, cfg.score);
    let mut cands: Vec<GraspCandidate> = points
        .into_iter()
        .map(|(row, col)| GraspCandidate {
            row,
            col,
            class_id,
            score: disk_mean(&plane, h, w, row, col, cfg.radius_px),
            point3d: None,
        })
        .collect();
    if cands.iter().any(|c| !c.score.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            term: "grasp score".into(),
        });
    }
    cands.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.row, a.col).cmp(&(b.row, b.col))));
    cands.truncate(cfg.top_k);
    Ok(GraspOutcome::Candidates(cands))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::config(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Square image of side `resolution` with the principal point at its centre.
    pub fn centred(resolution: usize, focal: f64) -> Self {
        let c = resolution as f64 / 2.0;
        Self {
            fx: focal,
            fy: focal,
            cx: c,
            cy: c,
        }
    }
}

fn valid_depth(z: f64) -> bool {
    z.is_finite() && z > 0.0
}

/// Pinhole back-projection; a zero depth is replaced by the median of valid 3x3 neighbours.
pub fn project_to_3d(
    row: usize,
    col: usize,
    depth: &[f64],
    height: usize,
    width: usize,
    intr: &CameraIntrinsics,
) -> Result<[f64; 3]> {
    intr.validate()?;
    if depth.len() != height * width {
        return Err(Error::dim("project_to_3d", &[height, width], &[depth.len()]));
    }
    if row >= height || col >= width {
        return Err(Error::contract(format!("pixel ({row}, {col}) outside {height}x{width}")));
    }
    let mut z = depth[row * width + col];
    if !valid_depth(z) {
        let mut around: Vec<f64> = Vec::with_capacity(8);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (r, c) = (row as isize + dy, col as isize + dx);
                if (dy, dx) != (0, 0) && r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
                    let v = depth[r as usize * width + c as usize];
                    if valid_depth(v) {
                        around.push(v);
                    }
                }
            }
        }
        z = crate::evalkit::median(&around).ok_or(Error::ProjectionFailed { row, col })?;
    }
    Ok([
        (col as f64 - intr.cx) * z / intr.fx,
        (row as f64 - intr.cy) * z / intr.fy,
        z,
    ])
}
