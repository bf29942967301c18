// Symmetric-logarithm properties checked over random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wastegan::autodiff::{slog_derivative, slog_value};
use wastegan::Graph;

pub const POINTS: usize = 10_000;

/// Returns a description of every violated property, empty when all hold.
pub fn violations(points: usize, seed: u64) -> Vec<String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for _ in 0..points {
        let a: f64 = r.random_range(1e-3..10.0);
        let scale = 10f64.powf(r.random_range(-6.0..6.0));
        let x: f64 = r.random_range(-1.0..1.0) * scale;
        let y: f64 = r.random_range(-1.0..1.0) * scale;
        if slog_value(-x, a) != -slog_value(x, a) {
            bad.push(format!("odd: x={x} a={a}"));
        }
        let (lo, hi) = if x < y { (x, y) } else { (y, x) };
        if lo < hi && slog_value(lo, a) > slog_value(hi, a) {
            bad.push(format!("monotone: {lo} {hi} a={a}"));
        }
        let d = slog_derivative(x, a);
        if !(d > 0.0 && d <= a) {
            bad.push(format!("derivative range: x={x} a={a} d={d}"));
        }
        // the recorded backward rule must agree with the closed form
        let mut g = Graph::<f64>::new();
        let v = g.param(wastegan::Tensor::scalar(x)).unwrap();
        let s = g.slog(v, a).unwrap();
        g.backward(s).unwrap();
        if g.grad(v).unwrap()[0] != d {
            bad.push(format!("backward: x={x} a={a}"));
        }
    }
    for a in [1e-3, 0.5, 1.0, 7.0] {
        if slog_derivative(0.0, a) != a {
            bad.push(format!("derivative at 0 for a={a}"));
        }
    }
    bad
}
