use rand::Rng;

use super::{GanConfig, LEAKY_SLOPE};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
struct ResBlock {
    conv0: (ParamId, ParamId),
    conv1: (ParamId, ParamId),
    skip: ParamId,
}

/// Residual downsampling critic with a symmetric-logarithm output.
///
/// Used twice: on RGB images (`drgb`) and on image/label concatenations
/// (`dseg`, image channels first).
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    pub params: ParamSet<T>,
    in_channels: usize,
    from_input: (ParamId, ParamId),
    blocks: Vec<ResBlock>,
    fc: (ParamId, ParamId),
    slog_a: T,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(prefix: &str, in_channels: usize, cfg: &GanConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new(prefix);
        let gain = 2f64.sqrt();
        let d = &cfg.disc_channels;
        let from_input = (
            params.add_weight(cfg.equalized_lr, "from_input.weight", &[d[0], in_channels, 1, 1], in_channels, gain, rng),
            params.add_const("from_input.bias", &[d[0]], 0.0),
        );
        let mut blocks = Vec::new();
        for (i, &c_out) in d.iter().enumerate() {
            let c_in = if i == 0 { d[0] } else { d[i - 1] };
            let pre = format!("block{i}");
            blocks.push(ResBlock {
                conv0: (
                    params.add_weight(cfg.equalized_lr, &format!("{pre}.conv0.weight"), &[c_in, c_in, 3, 3], c_in * 9, gain, rng),
                    params.add_const(&format!("{pre}.conv0.bias"), &[c_in], 0.0),
                ),
                conv1: (
                    params.add_weight(cfg.equalized_lr, &format!("{pre}.conv1.weight"), &[c_out, c_in, 3, 3], c_in * 9, gain, rng),
                    params.add_const(&format!("{pre}.conv1.bias"), &[c_out], 0.0),
                ),
                skip: params.add_weight(cfg.equalized_lr, &format!("{pre}.skip.weight"), &[c_out, c_in, 1, 1], c_in, 1.0, rng),
            });
        }
        let last = *d.last().expect("validated non-empty");
        let fc = (
            params.add_weight(cfg.equalized_lr, "fc.weight", &[last * 16, 1], last * 16, 1.0, rng),
            params.add_const("fc.bias", &[1], 0.0),
        );
        Self {
            params,
            in_channels,
            from_input,
            blocks,
            fc,
            slog_a: T::lit(cfg.slog_a),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn slog_a(&self) -> T {
        self.slog_a
    }

    /// Pre-activation of the score head, `[n, 1]`.
    pub fn logits(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.in_channels {
            return Err(Error::contract(format!(
                "{} expects {} input channels, got shape {xs:?}",
                self.params.prefix(),
                self.in_channels
            )));
        }
        let slope = T::lit(LEAKY_SLOPE);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let mut h = g.conv2d(x, p.get(self.from_input.0), 1, 0)?;
        h = g.add_bias(h, p.get(self.from_input.1))?;
        h = g.leaky_relu(h, slope)?;
        for b in &self.blocks {
            let skip = g.conv2d(h, p.get(b.skip), 2, 0)?;
            let mut m = g.conv2d(h, p.get(b.conv0.0), 1, 1)?;
            m = g.add_bias(m, p.get(b.conv0.1))?;
            m = g.leaky_relu(m, slope)?;
            m = g.conv2d(m, p.get(b.conv1.0), 2, 1)?;
            m = g.add_bias(m, p.get(b.conv1.1))?;
            m = g.leaky_relu(m, slope)?;
            let sum = g.add(m, skip)?;
            h = g.scale(sum, inv_sqrt2)?;
        }
        let hs = g.shape(h).to_vec();
        let flat = g.reshape(h, &[hs[0], hs[1] * hs[2] * hs[3]])?;
        let out = g.matmul(flat, p.get(self.fc.0))?;
        g.add_bias(out, p.get(self.fc.1))
    }

    /// Scores `[n]` for inputs `[n, in_channels, h, w]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let pre = self.logits(g, p, x)?;
        let s = g.slog(pre, self.slog_a)?;
        g.reshape(s, &[n])
    }
}
