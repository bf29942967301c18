// Brute-force grasp selection and the oracle-segmentation geometric suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wastegan::grasp::{select_grasp, GraspOutcome, ScoreKind, SuctionConfig};
use wastegan::scenegen::{generate_scene, CorpusConfig};
use wastegan::Tensor;

pub const SIDE: usize = 16;
pub const CLASSES: usize = 5;

pub struct Instance {
    pub logits: Tensor<f32>,
    pub class_id: u8,
    pub cfg: SuctionConfig,
}

/// Blobby label map turned into quantized logits, so score ties are common.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0u8; SIDE * SIDE];
    for _ in 0..rng.random_range(1..7) {
        let class = rng.random_range(1..CLASSES as u8);
        let (cy, cx) = (rng.random_range(0..SIDE) as f64, rng.random_range(0..SIDE) as f64);
        let (ry, rx) = (rng.random_range(1.0..6.0), rng.random_range(1.0..6.0));
        let square = rng.random_bool(0.5);
        for r in 0..SIDE {
            for c in 0..SIDE {
                let (dy, dx) = ((r as f64 - cy) / ry, (c as f64 - cx) / rx);
                let inside = if square { dy.abs() <= 1.0 && dx.abs() <= 1.0 } else { dy * dy + dx * dx <= 1.0 };
                if inside {
                    labels[r * SIDE + c] = class;
                }
            }
        }
    }
    let mut data = vec![0f32; CLASSES * SIDE * SIDE];
    for ch in 0..CLASSES {
        for p in 0..SIDE * SIDE {
            let noise = rng.random_range(0..4) as f32 * 0.25;
            data[ch * SIDE * SIDE + p] = if labels[p] as usize == ch { 2.0 + noise } else { noise };
        }
    }
    let cfg = SuctionConfig {
        radius_px: rng.random_range(1..3),
        top_k: rng.random_range(1..5),
        score: if rng.random_bool(0.25) { ScoreKind::Probability } else { ScoreKind::Logit },
    };
    let present: Vec<u8> = (1..CLASSES as u8).filter(|c| labels.contains(c)).collect();
    let class_id = if present.is_empty() || rng.random_bool(0.1) {
        rng.random_range(1..CLASSES as u8)
    } else {
        present[rng.random_range(0..present.len())]
    };
    Instance {
        logits: Tensor::new(&[CLASSES, SIDE, SIDE], data).unwrap(),
        class_id,
        cfg,
    }
}

fn in_disk(dy: isize, dx: isize, r: usize) -> bool {
    (dy * dy + dx * dx) as usize <= r * r
}

/// Pixels whose whole disk lies in the image and in `mask`.
fn erode(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let ri = r as isize;
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut ok = mask[y * w + x];
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if !in_disk(dy, dx, r) {
                        continue;
                    }
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    ok &= yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && mask[yy as usize * w + xx as usize];
                }
            }
            out[y * w + x] = ok;
        }
    }
    out
}

/// 4-connected component labels by min-label propagation to a fixed point.
fn labels(mask: &[bool], h: usize, w: usize) -> Vec<Option<usize>> {
    let mut lab: Vec<Option<usize>> = (0..h * w).map(|i| mask[i].then_some(i)).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let Some(mut m) = lab[y * w + x] else { continue };
                let nb = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                for (yy, xx) in nb {
                    if yy < h && xx < w {
                        if let Some(o) = lab[yy * w + xx] {
                            m = m.min(o);
                        }
                    }
                }
                if Some(m) != lab[y * w + x] {
                    lab[y * w + x] = Some(m);
                    changed = true;
                }
            }
        }
        if !changed {
            return lab;
        }
    }
}

fn collapse(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut cur = mask.to_vec();
    let mut out = Vec::new();
    while cur.iter().any(|&b| b) {
        let next = erode(&cur, h, w, 1);
        let lab = labels(&cur, h, w);
        let mut ids: Vec<usize> = lab.iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            let px: Vec<usize> = (0..h * w).filter(|&i| lab[i] == Some(id)).collect();
            if px.iter().any(|&i| next[i]) {
                continue;
            }
            let n = px.len() as f64;
            let my = px.iter().map(|&i| (i / w) as f64).sum::<f64>() / n;
            let mx = px.iter().map(|&i| (i % w) as f64).sum::<f64>() / n;
            let mut best: Option<(f64, usize)> = None;
            for &i in &px {
                let d = ((i / w) as f64 - my).powi(2) + ((i % w) as f64 - mx).powi(2);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, i));
                }
            }
            let i = best.unwrap().1;
            out.push((i / w, i % w));
        }
        cur = next;
    }
    out
}

fn score_at(logits: &Tensor<f32>, class: usize, kind: ScoreKind, y: usize, x: usize) -> f64 {
    let s = logits.shape();
    let d = logits.data();
    let at = |ch: usize| d[(ch * s[1] + y) * s[2] + x] as f64;
    match kind {
        ScoreKind::Logit => at(class),
        ScoreKind::Probability => {
            let mx = (0..s[0]).map(at).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..s[0]).map(|c| (at(c) - mx).exp()).sum();
            (at(class) - mx).exp() / z
        }
    }
}

/// `(row, col, score)` of the best `top_k` points, found by exhaustive scan.
pub fn brute_force(inst: &Instance) -> Vec<(usize, usize, f64)> {
    let s = inst.logits.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = inst.logits.data();
    let mask: Vec<bool> = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * h * w + p] > d[best * h * w + p] {
                    best = ch;
                }
            }
            best == inst.class_id as usize
        })
        .collect();
    let r = inst.cfg.radius_px;
    let points = collapse(&erode(&mask, h, w, r), h, w);
    let ri = r as isize;
    let mut scored: Vec<(usize, usize, f64)> = points
        .into_iter()
        .map(|(y, x)| {
            let (mut sum, mut n) = (0.0, 0);
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if in_disk(dy, dx, r) && yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        sum += score_at(&inst.logits, inst.class_id as usize, inst.cfg.score, yy as usize, xx as usize);
                        n += 1;
                    }
                }
            }
            (y, x, sum / n as f64)
        })
        .collect();
    let mut out = Vec::new();
    while out.len() < inst.cfg.top_k && !scored.is_empty() {
        let mut bi = 0;
        for i in 1..scored.len() {
            let (a, b) = (scored[i], scored[bi]);
            if a.2 > b.2 || (a.2 == b.2 && (a.0, a.1) < (b.0, b.1)) {
                bi = i;
            }
        }
        out.push(scored.swap_remove(bi));
    }
    out
}

/// Instances where `select_grasp` differs from the exhaustive scan, and how
/// many instances produced at least one candidate.
pub fn oracle_mismatches(instances: u64) -> (Vec<String>, usize) {
    let (mut bad, mut nonempty) = (Vec::new(), 0);
    for seed in 0..instances {
        let inst = random_instance(seed);
        let got: Vec<(usize, usize, f64)> = select_grasp(&inst.logits, inst.class_id, &inst.cfg)
            .unwrap()
            .candidates()
            .iter()
            .map(|c| (c.row, c.col, c.score))
            .collect();
        let want = brute_force(&inst);
        nonempty += usize::from(!want.is_empty());
        if got != want {
            bad.push(format!("seed {seed}: got {got:?}, want {want:?}"));
        }
    }
    (bad, nonempty)
}

#[derive(Debug, Default)]
pub struct GeometricTally {
    pub targets: usize,
    pub grasps: usize,
    pub no_grasp: usize,
    pub violations: Vec<String>,
}

/// Ground-truth one-hot logits for every contaminant class of every scene;
/// each emitted point must sit on an object of the class with its suction
/// disk inside the class region, and NoGraspPoint only when no disk fits.
pub fn geometric_suite(scenes: u64, radius_px: usize) -> GeometricTally {
    let cfg = CorpusConfig::default();
    let suction = SuctionConfig {
        radius_px,
        top_k: 16,
        score: ScoreKind::Logit,
    };
    let mut t = GeometricTally::default();
    for index in 0..scenes {
        let scene = generate_scene(&cfg, index).unwrap();
        let n = scene.resolution;
        let logits = scene.one_hot::<f32>(CLASSES);
        let owner = scene.object_map();
        for class in 1..CLASSES as u8 {
            let region: Vec<bool> = scene.mask.iter().map(|&m| m == class).collect();
            if !region.iter().any(|&b| b) {
                continue;
            }
            t.targets += 1;
            let fits = erode(&region, n, n, radius_px);
            match select_grasp(&logits, class, &suction).unwrap() {
                GraspOutcome::NoGraspPoint => {
                    t.no_grasp += 1;
                    if fits.iter().any(|&b| b) {
                        t.violations.push(format!("scene {index} class {class}: NoGraspPoint but a disk fits"));
                    }
                }
                GraspOutcome::Candidates(cands) => {
                    for c in cands {
                        t.grasps += 1;
                        let p = c.row * n + c.col;
                        let on_object = owner[p].is_some_and(|o| scene.objects[o].class == class);
                        if !fits[p] || !on_object {
                            t.violations.push(format!("scene {index} class {class}: bad point ({}, {})", c.row, c.col));
                        }
                    }
                }
            }
        }
    }
    t
}
