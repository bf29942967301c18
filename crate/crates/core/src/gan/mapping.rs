use rand::Rng;

use super::{GanConfig, LEAKY_SLOPE};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamSet};
use crate::scalar::Scalar;

/// Fully connected `z -> w` network: affine layers with leaky ReLU between them.
///
/// The last layer is purely affine.
#[derive(Clone, Debug)]
pub struct MappingNet<T: Scalar> {
    pub params: ParamSet<T>,
    layers: Vec<(ParamId, ParamId)>,
}

impl<T: Scalar> MappingNet<T> {
    pub fn new(cfg: &GanConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new("mapping");
        let mut layers = Vec::with_capacity(cfg.mapping_layers);
        for l in 0..cfg.mapping_layers {
            let d_in = if l == 0 { cfg.z_dim } else { cfg.w_dim };
            let w = params.add_weight(cfg.equalized_lr, &format!("{l}.weight"), &[d_in, cfg.w_dim], d_in, 2f64.sqrt(), rng);
            let b = params.add_const(&format!("{l}.bias"), &[cfg.w_dim], 0.0);
            layers.push((w, b));
        }
        Self { params, layers }
    }

    /// `(weight, bias)` ids per layer.
    pub fn layer_ids(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// `z: [n, z_dim] -> w: [n, w_dim]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let mut x = z;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            x = g.matmul(x, p.get(w))?;
            x = g.add_bias(x, p.get(b))?;
            if l + 1 < self.layers.len() {
                x = g.leaky_relu(x, T::lit(LEAKY_SLOPE))?;
            }
        }
        Ok(x)
    }
}
