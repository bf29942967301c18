//! Adversarial hinge losses, the generator composite loss and its quality and
//! image-label correlation terms.

mod imc;
mod quality;

use serde::{Deserialize, Serialize};

pub use imc::{cond_dist_graph, ema_update, estimate_cond_dist, loss_imc, loss_imc_value, CondPixelLabelDist};
pub use quality::{
    luminance, loss_quality, sobel_magnitude, sobel_sharpness, FeatureExtractor, QualityTerms, SharpnessMap,
};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Margin `k` of the discriminator hinges and weight `alpha` of the generator hinge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HingeConfig {
    pub k: f64,
    pub alpha: f64,
}

impl Default for HingeConfig {
    fn default() -> Self {
        Self { k: 0.5, alpha: 0.8 }
    }
}

impl HingeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.k) || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("hinge k and alpha must lie in [0, 1], got {self:?}")));
        }
        Ok(())
    }
}

/// `mean(relu(k - real)) + mean(relu(k + fake))`.
fn discriminator_hinge<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var, k: f64) -> Result<Var> {
    let k = T::lit(k);
    let r = g.neg(real)?;
    let r = g.add_scalar(r, k)?;
    let r = g.relu(r)?;
    let r = g.mean(r)?;
    let f = g.add_scalar(fake, k)?;
    let f = g.relu(f)?;
    let f = g.mean(f)?;
    g.add(r, f)
}

/// Hinge loss of the RGB discriminator over its real and fake scores.
pub fn loss_d_rgb<T: Scalar>(g: &mut Graph<T>, real_scores: Var, fake_scores: Var, cfg: &HingeConfig) -> Result<Var> {
    discriminator_hinge(g, real_scores, fake_scores, cfg.k)
}

/// Hinge loss of the image+label discriminator; same form as [`loss_d_rgb`].
pub fn loss_d_seg<T: Scalar>(g: &mut Graph<T>, real_scores: Var, fake_scores: Var, cfg: &HingeConfig) -> Result<Var> {
    discriminator_hinge(g, real_scores, fake_scores, cfg.k)
}

/// Unbalanced generator hinge:
/// `-α·E[drgb_fake] + (1-α)·E[drgb_real] - α·E[dseg_fake] + (1-α)·E[dseg_real]`.
pub fn loss_g_hinge<T: Scalar>(
    g: &mut Graph<T>,
    drgb_fake: Var,
    drgb_real: Var,
    dseg_fake: Var,
    dseg_real: Var,
    cfg: &HingeConfig,
) -> Result<Var> {
    let a = T::lit(cfg.alpha);
    let b = T::one() - a;
    let mut terms = Vec::with_capacity(4);
    for (v, w) in [(drgb_fake, -a), (drgb_real, b), (dseg_fake, -a), (dseg_real, b)] {
        let m = g.mean(v)?;
        terms.push(g.scale(m, w)?);
    }
    let s = g.add(terms[0], terms[1])?;
    let s = g.add(s, terms[2])?;
    g.add(s, terms[3])
}

/// `L_h + L_q + L_imc`, unweighted.
pub fn loss_g_total<T: Scalar>(g: &mut Graph<T>, hinge: Var, quality: Var, imc: Var) -> Result<Var> {
    for (name, v) in [("hinge", hinge), ("quality", quality), ("imc", imc)] {
        if g.value(v).len() != 1 || !g.data(v)[0].is_finite() {
            return Err(Error::contract(format!("generator loss term {name} must be a finite scalar")));
        }
    }
    let s = g.add(hinge, quality)?;
    g.add(s, imc)
}

fn score_var<T: Scalar>(g: &mut Graph<T>, what: &str, scores: &[f64]) -> Result<Var> {
    if scores.is_empty() {
        return Err(Error::contract(format!("{what} score list is empty")));
    }
    g.constant(Tensor::from_f64(&[scores.len()], scores)?)
}

/// Value of [`loss_d_rgb`] on plain score lists.
pub fn loss_d_rgb_value(real: &[f64], fake: &[f64], cfg: &HingeConfig) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let r = score_var(&mut g, "real", real)?;
    let f = score_var(&mut g, "fake", fake)?;
    let l = loss_d_rgb(&mut g, r, f, cfg)?;
    Ok(g.data(l)[0])
}

/// Value of [`loss_d_seg`] on plain score lists.
pub fn loss_d_seg_value(real: &[f64], fake: &[f64], cfg: &HingeConfig) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let r = score_var(&mut g, "real", real)?;
    let f = score_var(&mut g, "fake", fake)?;
    let l = loss_d_seg(&mut g, r, f, cfg)?;
    Ok(g.data(l)[0])
}

/// Value of [`loss_g_hinge`] on plain score lists.
pub fn loss_g_hinge_value(
    drgb_fake: &[f64],
    drgb_real: &[f64],
    dseg_fake: &[f64],
    dseg_real: &[f64],
    cfg: &HingeConfig,
) -> Result<f64> {
    cfg.validate()?;
    let mut g = Graph::<f64>::new();
    let a = score_var(&mut g, "drgb fake", drgb_fake)?;
    let b = score_var(&mut g, "drgb real", drgb_real)?;
    let c = score_var(&mut g, "dseg fake", dseg_fake)?;
    let d = score_var(&mut g, "dseg real", dseg_real)?;
    let l = loss_g_hinge(&mut g, a, b, c, d, cfg)?;
    Ok(g.data(l)[0])
}

/// Value of [`loss_g_total`] on plain scalars.
pub fn loss_g_total_value(hinge: f64, quality: f64, imc: f64) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let h = g.scalar(hinge).map_err(|_| Error::contract("hinge term must be finite"))?;
    let q = g.scalar(quality).map_err(|_| Error::contract("quality term must be finite"))?;
    let i = g.scalar(imc).map_err(|_| Error::contract("imc term must be finite"))?;
    let l = loss_g_total(&mut g, h, q, i)?;
    Ok(g.data(l)[0])
}
