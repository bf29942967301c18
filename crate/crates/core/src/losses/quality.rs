use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Per-pixel Sobel gradient magnitude, `[H, W]`, nonnegative.
#[derive(Clone, Debug, PartialEq)]
pub struct SharpnessMap<T> {
    pub magnitude: Tensor<T>,
}

/// `[n, 3, h, w]` RGB to `[n, 1, h, w]` luma.
pub fn luminance<T: Scalar>(g: &mut Graph<T>, images: Var) -> Result<Var> {
    let w = g.constant(Tensor::from_f64(&[1, 3, 1, 1], &LUMA)?)?;
    g.conv2d(images, w, 1, 0)
}

/// `sqrt((x * S_x)^2 + (x * S_y)^2)` of `[n, 1, h, w]`, zero padded.
pub fn sobel_magnitude<T: Scalar>(g: &mut Graph<T>, lum: Var) -> Result<Var> {
    let sx = g.constant(Tensor::from_f64(&[1, 1, 3, 3], &SOBEL_X)?)?;
    let sy = g.constant(Tensor::from_f64(&[1, 1, 3, 3], &SOBEL_Y)?)?;
    let gx = g.conv2d(lum, sx, 1, 1)?;
    let gy = g.conv2d(lum, sy, 1, 1)?;
    g.hypot(gx, gy)
}

/// Sharpness map of a `[3, H, W]` RGB image or a `[1, H, W]` / `[H, W]` luminance plane.
pub fn sobel_sharpness<T: Scalar>(image: &Tensor<T>) -> Result<SharpnessMap<T>> {
    let s = image.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] | [3, h, w] => (*h, *w),
        _ => return Err(Error::dim("sobel_sharpness", s, &[3, 0, 0])),
    };
    let mut g = Graph::new();
    let lum = if s.len() == 3 && s[0] == 3 {
        let x = g.constant(image.clone().reshape(&[1, 3, h, w])?)?;
        luminance(&mut g, x)?
    } else {
        g.constant(image.clone().reshape(&[1, 1, h, w])?)?
    };
    let m = sobel_magnitude(&mut g, lum)?;
    Ok(SharpnessMap {
        magnitude: g.value(m).clone().reshape(&[h, w])?,
    })
}

/// Frozen convolutional feature pyramid standing in for pretrained perceptual features.
///
/// Three stride-2 stages with widths 16, 32 and 64; weights come from a seeded
/// He-normal draw and are never trained.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Scalar> {
    params: ParamSet<T>,
    stages: Vec<(ParamId, ParamId)>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub const WIDTHS: [usize; 3] = [16, 32, 64];

    pub fn new(seed: u64) -> Self {
        Self::with_widths(seed, &Self::WIDTHS)
    }

    pub fn with_widths(seed: u64, widths: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new("features");
        let mut c_in = 3;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let w = params.add_normal(&format!("{i}.weight"), &[c, c_in, 3, 3], c_in * 9, 2f64.sqrt(), &mut rng);
                let b = params.add_const(&format!("{i}.bias"), &[c], 0.0);
                c_in = c;
                (w, b)
            })
            .collect();
        Self { params, stages }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound> {
        self.params.bind(g, false)
    }

    /// Activations after every stage for `[n, 3, h, w]` images.
    pub fn features(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Vec<Var>> {
        let mut x = images;
        let mut out = Vec::with_capacity(self.stages.len());
        for &(w, b) in &self.stages {
            x = g.conv2d(x, p.get(w), 2, 1)?;
            x = g.add_bias(x, p.get(b))?;
            x = g.leaky_relu(x, T::lit(0.2))?;
            out.push(x);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QualityTerms {
    pub perceptual: Var,
    pub sharpness: Var,
    pub total: Var,
}

/// `L_p + L_s` on batch statistics.
///
/// `L_p` sums, over the extractor stages, the MAE between batch-mean
/// activations of real and fake images; `L_s` is the MAE between batch-mean
/// Sobel magnitudes. Batches may differ in size.
pub fn loss_quality<T: Scalar>(
    g: &mut Graph<T>,
    real: Var,
    fake: Var,
    fx: &FeatureExtractor<T>,
    fx_params: &Bound,
) -> Result<QualityTerms> {
    let (rs, fs) = (g.shape(real).to_vec(), g.shape(fake).to_vec());
    if rs.len() != 4 || fs.len() != 4 || rs[1..] != fs[1..] || rs[1] != 3 {
        return Err(Error::dim("loss_quality", &rs, &fs));
    }
    let fr = fx.features(g, fx_params, real)?;
    let ff = fx.features(g, fx_params, fake)?;
    let mut perceptual: Option<Var> = None;
    for (a, b) in fr.into_iter().zip(ff) {
        let ma = g.mean_batch(a)?;
        let mb = g.mean_batch(b)?;
        let term = g.mae(ma, mb)?;
        perceptual = Some(match perceptual {
            Some(p) => g.add(p, term)?,
            None => term,
        });
    }
    let perceptual = perceptual.ok_or_else(|| Error::config("feature extractor has no stages"))?;
    let lr = luminance(g, real)?;
    let lf = luminance(g, fake)?;
    let sr = sobel_magnitude(g, lr)?;
    let sf = sobel_magnitude(g, lf)?;
    let sr = g.mean_batch(sr)?;
    let sf = g.mean_batch(sf)?;
    let sharpness = g.mae(sr, sf)?;
    let total = g.add(perceptual, sharpness)?;
    Ok(QualityTerms {
        perceptual,
        sharpness,
        total,
    })
}
