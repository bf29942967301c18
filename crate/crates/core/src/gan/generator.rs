use rand::Rng;

use super::{count_generator_forward, GanConfig, GeneratedSample, LEAKY_SLOPE};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct StyleConv {
    affine_w: ParamId,
    affine_b: ParamId,
    conv: ParamId,
    bias: ParamId,
}

/// Image and label synthesis network.
///
/// A learned 4x4 constant is upsampled by one block per entry of
/// `gen_channels`; each block stacks `style_layers` style-modulated 3x3
/// convolutions. Two 1x1 heads read the final features: a tanh-squashed RGB
/// image and per-pixel class logits.
#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    pub params: ParamSet<T>,
    constant: ParamId,
    blocks: Vec<Vec<StyleConv>>,
    to_rgb: (ParamId, ParamId),
    to_label: (ParamId, ParamId),
    classes: usize,
}

/// Batched generator result, all `[n, c, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    pub image: Var,
    pub logits: Var,
    pub soft_mask: Var,
}

impl GeneratorOutput {
    /// Copies each batch entry out of the graph.
    pub fn split<T: Scalar>(&self, g: &Graph<T>) -> Vec<GeneratedSample<T>> {
        let s = g.shape(self.image);
        let n = s[0];
        let take = |v: Var, i: usize| {
            let shape = g.shape(v)[1..].to_vec();
            let len: usize = shape.iter().product();
            Tensor::new(&shape, g.data(v)[i * len..(i + 1) * len].to_vec()).expect("slice shape")
        };
        (0..n)
            .map(|i| GeneratedSample {
                image: take(self.image, i),
                label_logits: take(self.logits, i),
                soft_mask: take(self.soft_mask, i),
            })
            .collect()
    }
}

impl<T: Scalar> Generator<T> {
    pub fn new(cfg: &GanConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new("gen");
        let c0 = cfg.gen_channels[0];
        let constant = params.add_weight(cfg.equalized_lr, "const", &[1, c0, 4, 4], 1, 1.0, rng);
        let gain = 2f64.sqrt();
        let mut blocks = Vec::new();
        let mut c_in = c0;
        for (b, &c_out) in cfg.gen_channels.iter().enumerate() {
            let mut layers = Vec::new();
            for l in 0..cfg.style_layers {
                let ci = if l == 0 { c_in } else { c_out };
                let pre = format!("block{b}.style{l}");
                // affine initialized to identity modulation: w -> 1
                let affine_w = params.add_weight(cfg.equalized_lr, &format!("{pre}.affine.weight"), &[cfg.w_dim, ci], cfg.w_dim, 0.1, rng);
                let affine_b = params.add_const(&format!("{pre}.affine.bias"), &[ci], 1.0);
                let conv = params.add_weight(cfg.equalized_lr, &format!("{pre}.conv"), &[c_out, ci, 3, 3], ci * 9, gain, rng);
                let bias = params.add_const(&format!("{pre}.bias"), &[c_out], 0.0);
                layers.push(StyleConv {
                    affine_w,
                    affine_b,
                    conv,
                    bias,
                });
            }
            blocks.push(layers);
            c_in = c_out;
        }
        let to_rgb = (
            params.add_weight(cfg.equalized_lr, "to_rgb.weight", &[3, c_in, 1, 1], c_in, 1.0, rng),
            params.add_const("to_rgb.bias", &[3], 0.0),
        );
        let to_label = (
            params.add_weight(cfg.equalized_lr, "to_label.weight", &[cfg.classes, c_in, 1, 1], c_in, 1.0, rng),
            params.add_const("to_label.bias", &[cfg.classes], 0.0),
        );
        Self {
            params,
            constant,
            blocks,
            to_rgb,
            to_label,
            classes: cfg.classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Style-conv count per block, derived from the parameter names.
    pub fn style_layer_audit(&self) -> Vec<usize> {
        (0..self.blocks.len())
            .map(|b| {
                let prefix = format!("gen.block{b}.style");
                self.params
                    .names()
                    .iter()
                    .filter(|n| n.starts_with(&prefix) && n.ends_with(".conv"))
                    .count()
            })
            .collect()
    }

    /// `w: [n, w_dim]` to image, logits and soft mask.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, w: Var) -> Result<GeneratorOutput> {
        let n = g.shape(w)[0];
        count_generator_forward(n);
        let slope = T::lit(LEAKY_SLOPE);
        let mut x = g.repeat_batch(p.get(self.constant), n)?;
        for block in &self.blocks {
            x = g.upsample2x(x)?;
            for layer in block {
                let s = g.matmul(w, p.get(layer.affine_w))?;
                let s = g.add_bias(s, p.get(layer.affine_b))?;
                x = g.scale_channels(x, s)?;
                x = g.conv2d(x, p.get(layer.conv), 1, 1)?;
                x = g.add_bias(x, p.get(layer.bias))?;
                x = g.leaky_relu(x, slope)?;
            }
        }
        let rgb = g.conv2d(x, p.get(self.to_rgb.0), 1, 0)?;
        let rgb = g.add_bias(rgb, p.get(self.to_rgb.1))?;
        let image = g.tanh(rgb)?;
        let logits = g.conv2d(x, p.get(self.to_label.0), 1, 0)?;
        let logits = g.add_bias(logits, p.get(self.to_label.1))?;
        let soft_mask = g.softmax_channels(logits)?;
        Ok(GeneratorOutput {
            image,
            logits,
            soft_mask,
        })
    }
}
