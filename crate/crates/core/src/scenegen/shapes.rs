use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Object outline in pixel coordinates `(row, col)`; pixel `(i, j)` is sampled at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeDescriptor {
    Ellipse {
        centre: [f64; 2],
        radii: [f64; 2],
        angle: f64,
    },
    /// Convex polygon, vertices in angular order.
    Polygon { vertices: Vec<[f64; 2]> },
    /// Quadratic Bézier ribbon.
    Strip { control: [[f64; 2]; 3], half_width: f64 },
}

const STRIP_SEGMENTS: usize = 24;

fn bezier(c: &[[f64; 2]; 3], t: f64) -> [f64; 2] {
    let u = 1.0 - t;
    [0, 1].map(|k| u * u * c[0][k] + 2.0 * u * t * c[1][k] + t * t * c[2][k])
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dy, dx) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dy + (p[1] - a[1]) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qy, qx) = (a[0] + t * dy - p[0], a[1] + t * dx - p[1]);
    (qy * qy + qx * qx).sqrt()
}

impl ShapeDescriptor {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Self::Ellipse { centre, radii, angle } => {
                let (dy, dx) = (y - centre[0], x - centre[1]);
                let (s, c) = angle.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / radii[1]).powi(2) + (v / radii[0]).powi(2) <= 1.0
            }
            Self::Polygon { vertices } => {
                let n = vertices.len();
                let mut sign = 0.0f64;
                for i in 0..n {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    let cross = (b[0] - a[0]) * (x - a[1]) - (b[1] - a[1]) * (y - a[0]);
                    if cross != 0.0 {
                        if sign != 0.0 && cross.signum() != sign {
                            return false;
                        }
                        sign = cross.signum();
                    }
                }
                true
            }
            Self::Strip { control, half_width } => {
                let p = [y, x];
                let mut prev = control[0];
                for i in 1..=STRIP_SEGMENTS {
                    let next = bezier(control, i as f64 / STRIP_SEGMENTS as f64);
                    if segment_distance(p, prev, next) <= *half_width {
                        return true;
                    }
                    prev = next;
                }
                false
            }
        }
    }

    pub fn centre(&self) -> (f64, f64) {
        match self {
            Self::Ellipse { centre, .. } => (centre[0], centre[1]),
            Self::Polygon { vertices } => {
                let n = vertices.len() as f64;
                (
                    vertices.iter().map(|v| v[0]).sum::<f64>() / n,
                    vertices.iter().map(|v| v[1]).sum::<f64>() / n,
                )
            }
            Self::Strip { control, .. } => {
                let m = bezier(control, 0.5);
                (m[0], m[1])
            }
        }
    }
}

fn random_centre(r: &mut ChaCha8Rng, extent: f64) -> [f64; 2] {
    [r.random_range(0.0..extent), r.random_range(0.0..extent)]
}

/// Ellipse of roughly `area` pixels, centred anywhere in the image.
pub(crate) fn random_ellipse(r: &mut ChaCha8Rng, area: f64, extent: f64) -> ShapeDescriptor {
    let aspect: f64 = r.random_range(0.45..1.0);
    let major = (area / (PI * aspect)).sqrt();
    ShapeDescriptor::Ellipse {
        centre: random_centre(r, extent),
        radii: [major * aspect, major],
        angle: r.random_range(0.0..PI),
    }
}

/// Convex polygon with `k` vertices, jittered around a regular `k`-gon of `area` pixels.
pub(crate) fn random_polygon(r: &mut ChaCha8Rng, area: f64, extent: f64, k: usize) -> ShapeDescriptor {
    let radius = (2.0 * area / (k as f64 * (TAU / k as f64).sin())).sqrt();
    let c = random_centre(r, extent);
    let rot = r.random_range(0.0..TAU);
    let step = TAU / k as f64;
    let vertices = (0..k)
        .map(|i| {
            // angular jitter below half a step keeps the vertex order, radii near 1 keep convexity
            let a = rot + step * (i as f64 + r.random_range(-0.2..0.2));
            let rr = radius * r.random_range(0.9..1.05);
            [c[0] + rr * a.sin(), c[1] + rr * a.cos()]
        })
        .collect();
    ShapeDescriptor::Polygon { vertices }
}

/// Bent ribbon of roughly `area` pixels.
pub(crate) fn random_strip(r: &mut ChaCha8Rng, area: f64, extent: f64) -> ShapeDescriptor {
    let width = (area / 5.0).sqrt().max(2.0);
    // rounded end caps add a disc
    let length = ((area - PI * width * width / 4.0) / width).max(width);
    let c = random_centre(r, extent);
    let a = r.random_range(0.0..TAU);
    let (s, co) = a.sin_cos();
    let bend = r.random_range(-0.5..0.5);
    let unit = [[-0.5 * s, -0.5 * co], [bend * co, -bend * s], [0.5 * s, 0.5 * co]];
    let mut arc = 0.0;
    let mut prev = unit[0];
    for i in 1..=STRIP_SEGMENTS {
        let next = bezier(&unit, i as f64 / STRIP_SEGMENTS as f64);
        arc += ((next[0] - prev[0]).powi(2) + (next[1] - prev[1]).powi(2)).sqrt();
        prev = next;
    }
    let k = length / arc;
    ShapeDescriptor::Strip {
        control: unit.map(|p| [c[0] + k * p[0], c[1] + k * p[1]]),
        half_width: width / 2.0,
    }
}
