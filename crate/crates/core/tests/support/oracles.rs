// Finite-difference oracle cases shared by the gradient tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wastegan::autodiff::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use wastegan::gan::{GanConfig, GanModel};
use wastegan::losses::{self, FeatureExtractor, HingeConfig};
use wastegan::{Graph, Result, Tensor, Var};

pub const INSTANCES: u64 = 20;
pub const TOLERANCE: f64 = 1e-4;

pub struct OracleCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradCheckReport>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed)
}

/// Uniform entries in `[-1.5, 1.5]`.
fn smooth(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Entries with magnitude in `[0.05, 1.5]`, away from the kink at zero.
fn off_kink(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = r.random_range(0.05..1.5);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn dims(r: &mut ChaCha8Rng, lo: usize, hi: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| r.random_range(lo..=hi)).collect()
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

fn unary(seed: u64, kink: bool, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let s = dims(&mut r, 1, 4, 3);
    let x = if kink { off_kink(&mut r, &s) } else { smooth(&mut r, &s) };
    check_gradients(&[x], opts(), |g, v| f(g, v[0]))
}

fn binary(seed: u64, f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let s = dims(&mut r, 1, 4, 3);
    let a = smooth(&mut r, &s);
    let b = smooth(&mut r, &s);
    check_gradients(&[a, b], opts(), |g, v| f(g, v[0], v[1]))
}

fn conv_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (n, ci, co) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let k = [1, 3][r.random_range(0..2)];
    let stride = r.random_range(1..=2);
    let pad = if k == 3 { r.random_range(0..=1) } else { 0 };
    let h = r.random_range(3..=6);
    let x = smooth(&mut r, &[n, ci, h, h + 1]);
    let w = smooth(&mut r, &[co, ci, k, k]);
    check_gradients(&[x, w], opts(), |g, v| g.conv2d(v[0], v[1], stride, pad))
}

fn matmul_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let d = dims(&mut r, 1, 5, 3);
    let a = smooth(&mut r, &[d[0], d[1]]);
    let b = smooth(&mut r, &[d[1], d[2]]);
    check_gradients(&[a, b], opts(), |g, v| g.matmul(v[0], v[1]))
}

fn channel_case(seed: u64, scale: bool) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let d = dims(&mut r, 1, 3, 4);
    let x = smooth(&mut r, &d);
    let p = if scale { smooth(&mut r, &d[..2]) } else { smooth(&mut r, &d[1..2]) };
    check_gradients(&[x, p], opts(), |g, v| {
        if scale {
            g.scale_channels(v[0], v[1])
        } else {
            g.add_bias(v[0], v[1])
        }
    })
}

fn softmax_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let d = dims(&mut r, 1, 4, 4);
    let x = smooth(&mut r, &d);
    check_gradients(&[x], opts(), |g, v| g.softmax_channels(v[0]))
}

fn shape_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let d = dims(&mut r, 1, 3, 3);
    let n = r.random_range(1..=3);
    let x = smooth(&mut r, &[1, d[0], d[1], d[2]]);
    let y = smooth(&mut r, &[n, d[0] + 1, d[1], d[2]]);
    check_gradients(&[x, y], opts(), |g, v| {
        let up = g.upsample2x(v[0])?;
        let rep = g.repeat_batch(up, n)?;
        let small = g.reshape(rep, &[n, d[0], 2 * d[1] * 2 * d[2]])?;
        let small = g.reshape(small, &[n, d[0], 2 * d[1], 2 * d[2]])?;
        let y2 = g.upsample2x(v[1])?;
        let cat = g.concat_channels(&[small, y2])?;
        g.mean_batch(cat)
    })
}

fn reduction_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let d = dims(&mut r, 1, 4, 3);
    let a = smooth(&mut r, &d);
    let b = off_kink(&mut r, &d);
    check_gradients(&[a, b], opts(), |g, v| {
        let s = g.sum(v[0])?;
        let m = g.mean(v[1])?;
        let c = g.scale(s, 0.3)?;
        let c = g.add_scalar(c, 0.1)?;
        let c = g.mul(c, m)?;
        let diff = g.neg(v[1])?;
        let e = g.mae(v[0], diff)?;
        g.add(c, e)
    })
}

fn cross_entropy_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let d = dims(&mut r, 1, 4, 4);
    let x = smooth(&mut r, &d);
    let targets: Vec<usize> = (0..d[0] * d[2] * d[3]).map(|_| r.random_range(0..d[1])).collect();
    check_gradients(&[x], opts(), |g, v| g.cross_entropy(v[0], &targets))
}

/// Pixel values in `[-1, 1]` whose luminance sits at least `margin` bin
/// widths from every bin centre, so the triangular kernel is smooth around them.
fn off_centre_image(r: &mut ChaCha8Rng, n: usize, h: usize, w: usize, bins: usize) -> Tensor<f64> {
    let width = 2.0 / bins as f64;
    let mut data = vec![0.0; n * 3 * h * w];
    for b in 0..n {
        for p in 0..h * w {
            loop {
                let rgb: Vec<f64> = (0..3).map(|_| r.random_range(-0.95..0.95)).collect();
                let lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                let t = (lum + 1.0) / width - 0.5;
                let frac = t - t.floor();
                if (0.05..0.95).contains(&frac) && t > 0.05 && t < bins as f64 - 1.05 {
                    for c in 0..3 {
                        data[(b * 3 + c) * h * w + p] = rgb[c];
                    }
                    break;
                }
            }
        }
    }
    Tensor::new(&[n, 3, h, w], data).unwrap()
}

fn histogram_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let bins = r.random_range(2..=8);
    let (n, c, h, w) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3));
    let img = off_centre_image(&mut r, n, h, w, bins);
    let labels = Tensor::new(&[n, c, h, w], (0..n * c * h * w).map(|_| r.random_range(0.1..1.0)).collect())?;
    check_gradients(&[img, labels], opts(), |g, v| {
        let p = losses::cond_dist_graph(g, v[0], v[1], bins)?;
        g.square(p)
    })
}

fn normalize_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let d = dims(&mut r, 2, 5, 2);
    let x = Tensor::new(&d, (0..d[0] * d[1]).map(|_| r.random_range(0.05..1.0)).collect())?;
    check_gradients(&[x], opts(), |g, v| g.normalize_columns(v[0]))
}

fn hypot_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let s = dims(&mut r, 1, 4, 3);
    let a = off_kink(&mut r, &s);
    let b = off_kink(&mut r, &s);
    check_gradients(&[a, b], opts(), |g, v| g.hypot(v[0], v[1]))
}

fn tiny_gan(seed: u64) -> GanModel<f64> {
    GanModel::new(GanConfig {
        resolution: 8,
        gen_channels: vec![4],
        disc_channels: vec![4],
        z_dim: 4,
        w_dim: 4,
        mapping_layers: 2,
        init_seed: seed,
        ..GanConfig::default()
    })
    .unwrap()
}

fn disc_loss_case(seed: u64, seg: bool) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let m = tiny_gan(seed);
    let d = if seg { m.d_seg.clone() } else { m.d_rgb.clone() };
    let ch = d.in_channels();
    let real = smooth(&mut r, &[2, ch, 8, 8]);
    let fake = smooth(&mut r, &[2, ch, 8, 8]);
    let mut inputs = vec![real, fake];
    inputs.extend(d.params.tensors().iter().cloned());
    let cfg = HingeConfig::default();
    let o = GradCheckOptions {
        max_entries: 12,
        ..opts()
    };
    check_gradients(&inputs, o, |g, v| {
        let p = d.params.wrap(g, v[2..].to_vec())?;
        let sr = d.forward(g, &p, v[0])?;
        let sf = d.forward(g, &p, v[1])?;
        if seg {
            losses::loss_d_seg(g, sr, sf, &cfg)
        } else {
            losses::loss_d_rgb(g, sr, sf, &cfg)
        }
    })
}

fn hinge_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let s: Vec<Tensor<f64>> = (0..4)
        .map(|_| {
            let n = r.random_range(1..=4);
            smooth(&mut r, &[n])
        })
        .collect();
    let cfg = HingeConfig {
        k: 0.5,
        alpha: r.random_range(0.0..1.0),
    };
    check_gradients(&s, opts(), |g, v| losses::loss_g_hinge(g, v[0], v[1], v[2], v[3], &cfg))
}

fn quality_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let fx = FeatureExtractor::<f64>::with_widths(seed, &[3, 4]);
    let real = smooth(&mut r, &[2, 3, 6, 6]);
    let fake = smooth(&mut r, &[1, 3, 6, 6]);
    check_gradients(&[fake], opts(), |g, v| {
        let p = fx.bind(g)?;
        let rv = g.constant(real.clone())?;
        Ok(losses::loss_quality(g, rv, v[0], &fx, &p)?.total)
    })
}

/// Two-pixel, two-class toy generator: parameters are the raw image and logits.
fn toy_total_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let bins = 4;
    let pre = smooth(&mut r, &[1, 3, 1, 2]);
    let logits = smooth(&mut r, &[1, 2, 1, 2]);
    let head = smooth(&mut r, &[6, 1]);
    let real_table = {
        let t = Tensor::new(&[bins, 2], (0..bins * 2).map(|_| r.random_range(0.05..1.0)).collect())?;
        let mut g = Graph::<f64>::new();
        let v = g.constant(t)?;
        let v = g.normalize_columns(v)?;
        g.value(v).clone()
    };
    let real_img = smooth(&mut r, &[1, 3, 1, 2]);
    let fx = FeatureExtractor::<f64>::with_widths(seed, &[2]);
    let cfg = HingeConfig::default();
    check_gradients(&[pre, logits], opts(), |g, v| {
        let img = g.tanh(v[0])?;
        let mask = g.softmax_channels(v[1])?;
        let w = g.constant(head.clone())?;
        let flat = g.reshape(img, &[1, 6])?;
        let s = g.matmul(flat, w)?;
        let s_fake = g.slog(s, 1.0)?;
        let s_fake = g.reshape(s_fake, &[1])?;
        let s_real = g.constant(Tensor::new(&[1], vec![0.3])?)?;
        let h = losses::loss_g_hinge(g, s_fake, s_real, s_fake, s_real, &cfg)?;
        let fp = fx.bind(g)?;
        let rv = g.constant(real_img.clone())?;
        let q = losses::loss_quality(g, rv, img, &fx, &fp)?.total;
        let p_gen = losses::cond_dist_graph(g, img, mask, bins)?;
        let p_real = g.constant(real_table.clone())?;
        let imc = losses::loss_imc(g, p_real, p_gen)?;
        losses::loss_g_total(g, h, q, imc)
    })
}

/// Generator objective through mapping, generator, both discriminators, the
/// quality term and the soft histogram, differentiated w.r.t. mapping and generator weights.
fn full_generator_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let m = tiny_gan(seed);
    let bins = 8;
    let z = smooth(&mut r, &[2, 4]);
    let real = smooth(&mut r, &[2, 3, 8, 8]);
    let real_lbl = {
        let mut g = Graph::<f64>::new();
        let x = g.constant(smooth(&mut r, &[2, 5, 8, 8]))?;
        let x = g.scale(x, 3.0)?;
        let s = g.softmax_channels(x)?;
        g.value(s).clone()
    };
    let fx = FeatureExtractor::<f64>::with_widths(seed, &[3, 4]);
    let real_table = {
        let mut g = Graph::<f64>::new();
        let x = g.constant(real.clone())?;
        let y = g.constant(real_lbl.clone())?;
        let t = losses::cond_dist_graph(&mut g, x, y, bins)?;
        g.value(t).clone()
    };
    let n_map = m.mapping.params.len();
    let mut inputs: Vec<Tensor<f64>> = m.mapping.params.tensors().to_vec();
    inputs.extend(m.generator.params.tensors().iter().cloned());
    let cfg = HingeConfig::default();
    let o = GradCheckOptions {
        max_entries: 6,
        ..opts()
    };
    check_gradients(&inputs, o, |g, v| {
        let mp = m.mapping.params.wrap(g, v[..n_map].to_vec())?;
        let gp = m.generator.params.wrap(g, v[n_map..].to_vec())?;
        let drgb = m.d_rgb.params.bind(g, false)?;
        let dseg = m.d_seg.params.bind(g, false)?;
        let zv = g.constant(z.clone())?;
        let w = m.mapping.forward(g, &mp, zv)?;
        let out = m.generator.forward(g, &gp, w)?;
        let xr = g.constant(real.clone())?;
        let yr = g.constant(real_lbl.clone())?;
        let rf = m.d_rgb.forward(g, &drgb, out.image)?;
        let rr = m.d_rgb.forward(g, &drgb, xr)?;
        let cf = g.concat_channels(&[out.image, out.soft_mask])?;
        let cr = g.concat_channels(&[xr, yr])?;
        let sf = m.d_seg.forward(g, &dseg, cf)?;
        let sr = m.d_seg.forward(g, &dseg, cr)?;
        let h = losses::loss_g_hinge(g, rf, rr, sf, sr, &cfg)?;
        let fp = fx.bind(g)?;
        let q = losses::loss_quality(g, xr, out.image, &fx, &fp)?.total;
        let p_gen = losses::cond_dist_graph(g, out.image, out.soft_mask, bins)?;
        let p_real = g.constant(real_table.clone())?;
        let imc = losses::loss_imc(g, p_real, p_gen)?;
        losses::loss_g_total(g, h, q, imc)
    })
}

pub fn cases() -> Vec<OracleCase> {
    vec![
        OracleCase { name: "add", run: |s| binary(s, |g, a, b| g.add(a, b)) },
        OracleCase { name: "sub", run: |s| binary(s, |g, a, b| g.sub(a, b)) },
        OracleCase { name: "mul", run: |s| binary(s, |g, a, b| g.mul(a, b)) },
        OracleCase { name: "hypot", run: hypot_case },
        OracleCase { name: "scale_add_scalar_neg", run: |s| unary(s, false, |g, x| {
            let y = g.scale(x, -1.7)?;
            let y = g.add_scalar(y, 0.4)?;
            g.neg(y)
        }) },
        OracleCase { name: "add_bias", run: |s| channel_case(s, false) },
        OracleCase { name: "scale_channels", run: |s| channel_case(s, true) },
        OracleCase { name: "matmul", run: matmul_case },
        OracleCase { name: "conv2d", run: conv_case },
        OracleCase { name: "leaky_relu", run: |s| unary(s, true, |g, x| g.leaky_relu(x, 0.2)) },
        OracleCase { name: "relu", run: |s| unary(s, true, |g, x| g.relu(x)) },
        OracleCase { name: "tanh", run: |s| unary(s, false, |g, x| g.tanh(x)) },
        OracleCase { name: "slog", run: |s| unary(s, true, |g, x| g.slog(x, 0.5 + (s % 4) as f64)) },
        OracleCase { name: "abs", run: |s| unary(s, true, |g, x| g.abs(x)) },
        OracleCase { name: "square", run: |s| unary(s, false, |g, x| g.square(x)) },
        OracleCase { name: "softmax_channels", run: softmax_case },
        OracleCase { name: "shape_ops", run: shape_case },
        OracleCase { name: "reductions_mae", run: reduction_case },
        OracleCase { name: "cross_entropy", run: cross_entropy_case },
        OracleCase { name: "soft_histogram", run: histogram_case },
        OracleCase { name: "normalize_columns", run: normalize_case },
        OracleCase { name: "loss_d_rgb", run: |s| disc_loss_case(s, false) },
        OracleCase { name: "loss_d_seg", run: |s| disc_loss_case(s, true) },
        OracleCase { name: "loss_g_hinge", run: hinge_case },
        OracleCase { name: "loss_quality", run: quality_case },
        OracleCase { name: "loss_g_total_toy", run: toy_total_case },
        OracleCase { name: "loss_g_total_full", run: full_generator_case },
    ]
}

/// Worst relative error of a case over all instances.
pub fn worst(case: &OracleCase) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        worst = worst.max((case.run)(seed)?.max_rel_err);
    }
    Ok(worst)
}
