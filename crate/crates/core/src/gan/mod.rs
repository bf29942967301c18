//! Mapping network, three-style-layer generator and the two residual
//! discriminators with a symmetric-logarithm score head.

mod discriminator;
mod generator;
mod mapping;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use discriminator::Discriminator;
pub use generator::{Generator, GeneratorOutput};
pub use mapping::MappingNet;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of semantic classes: background+paper, rigid plastic, cardboard, metal, soft plastic.
pub const NUM_CLASSES: usize = 5;

/// Negative slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    /// Output side length; must be `4 * 2^gen_channels.len()`.
    pub resolution: usize,
    pub classes: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    /// Feature width of each upsampling block, from coarse to fine.
    pub gen_channels: Vec<usize>,
    /// Style-modulated convolutions per block (3; 2 reproduces the base design).
    pub style_layers: usize,
    /// Width of each discriminator downsampling block, from fine to coarse.
    pub disc_channels: Vec<usize>,
    /// Slope `a` of the symmetric-logarithm score head.
    pub slog_a: f64,
    /// Store weights at unit scale and apply the He constant in the forward pass.
    pub equalized_lr: bool,
    pub init_seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            classes: NUM_CLASSES,
            z_dim: 64,
            w_dim: 64,
            mapping_layers: 4,
            gen_channels: vec![128, 64, 32],
            style_layers: 3,
            disc_channels: vec![32, 64, 128],
            slog_a: 1.0,
            equalized_lr: false,
            init_seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let blocks = self.gen_channels.len();
        if blocks == 0 || self.resolution != 4 << blocks {
            return Err(Error::config(format!(
                "resolution {} does not match {} generator blocks (expected {})",
                self.resolution,
                blocks,
                4usize << blocks
            )));
        }
        if self.disc_channels.len() != blocks {
            return Err(Error::config("discriminator needs one block per generator block"));
        }
        if !(self.slog_a > 0.0) {
            return Err(Error::config(format!("slog slope must be positive, got {}", self.slog_a)));
        }
        if self.style_layers == 0 || self.mapping_layers == 0 || self.classes < 2 {
            return Err(Error::config("style layers, mapping layers and classes must be positive"));
        }
        if self.gen_channels.iter().chain(&self.disc_channels).any(|&c| c == 0) || self.z_dim == 0 || self.w_dim == 0 {
            return Err(Error::config("zero channel width"));
        }
        Ok(())
    }

    /// Number of resolution blocks (`log2(resolution / 4)`).
    pub fn blocks(&self) -> usize {
        self.gen_channels.len()
    }
}

/// Gaussian latent vector `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T>(pub Vec<T>);

/// Intermediate style vector `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode<T>(pub Vec<T>);

impl<T: Scalar> LatentCode<T> {
    pub fn sample(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self(
            (0..dim)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(rng);
                    T::lit(v)
                })
                .collect(),
        )
    }
}

/// One synthetic image/label couple.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample<T> {
    /// `[3, H, W]` in `[-1, 1]`.
    pub image: Tensor<T>,
    /// `[C, H, W]` raw class scores.
    pub label_logits: Tensor<T>,
    /// `[C, H, W]` channel-wise softmax of the logits.
    pub soft_mask: Tensor<T>,
}

impl<T: Scalar> GeneratedSample<T> {
    /// Hard label map (argmax over classes), row-major `H*W`.
    pub fn hard_mask(&self) -> Vec<u8> {
        let s = self.soft_mask.shape();
        let (c, plane) = (s[0], s[1] * s[2]);
        let d = self.soft_mask.data();
        (0..plane)
            .map(|p| {
                let mut best = 0;
                for ch in 1..c {
                    if d[ch * plane + p] > d[best * plane + p] {
                        best = ch;
                    }
                }
                best as u8
            })
            .collect()
    }
}

static GENERATOR_SAMPLE_FORWARDS: AtomicU64 = AtomicU64::new(0);

/// Total samples pushed through the generator by this process.
pub fn generator_forward_count() -> u64 {
    GENERATOR_SAMPLE_FORWARDS.load(Ordering::Relaxed)
}

pub(crate) fn count_generator_forward(n: usize) {
    GENERATOR_SAMPLE_FORWARDS.fetch_add(n as u64, Ordering::Relaxed);
}

/// All four networks plus their shared configuration.
#[derive(Clone, Debug)]
pub struct GanModel<T: Scalar> {
    pub config: GanConfig,
    pub mapping: MappingNet<T>,
    pub generator: Generator<T>,
    pub d_rgb: Discriminator<T>,
    pub d_seg: Discriminator<T>,
}

impl<T: Scalar> GanModel<T> {
    /// Builds freshly initialized networks; identical configs give identical weights.
    pub fn new(config: GanConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mapping = MappingNet::new(&config, &mut rng);
        let generator = Generator::new(&config, &mut rng);
        let d_rgb = Discriminator::new("drgb", 3, &config, &mut rng);
        let d_seg = Discriminator::new("dseg", 3 + config.classes, &config, &mut rng);
        Ok(Self {
            config,
            mapping,
            generator,
            d_rgb,
            d_seg,
        })
    }

    pub fn mapping_forward(&self, z: &LatentCode<T>) -> Result<StyleCode<T>> {
        if z.0.len() != self.config.z_dim {
            return Err(Error::contract(format!(
                "latent code has {} entries, expected {}",
                z.0.len(),
                self.config.z_dim
            )));
        }
        let mut g = Graph::new();
        let p = self.mapping.params.bind(&mut g, false)?;
        let zv = g.constant(Tensor::new(&[1, z.0.len()], z.0.clone())?)?;
        let w = self.mapping.forward(&mut g, &p, zv)?;
        Ok(StyleCode(g.data(w).to_vec()))
    }

    pub fn generator_forward(&self, w: &StyleCode<T>) -> Result<GeneratedSample<T>> {
        if w.0.len() != self.config.w_dim {
            return Err(Error::contract(format!(
                "style code has {} entries, expected {}",
                w.0.len(),
                self.config.w_dim
            )));
        }
        let mut g = Graph::new();
        let p = self.generator.params.bind(&mut g, false)?;
        let wv = g.constant(Tensor::new(&[1, w.0.len()], w.0.clone())?)?;
        let out = self.generator.forward(&mut g, &p, wv)?;
        Ok(out.split(&g).remove(0))
    }

    /// Score of one `[3, H, W]` image.
    pub fn d_rgb_forward(&self, image: &Tensor<T>) -> Result<T> {
        let r = self.config.resolution;
        if image.shape() != [3, r, r] {
            return Err(Error::dim("d_rgb_forward", image.shape(), &[3, r, r]));
        }
        let mut g = Graph::new();
        let p = self.d_rgb.params.bind(&mut g, false)?;
        let x = g.constant(image.clone().reshape(&[1, 3, r, r])?)?;
        let s = self.d_rgb.forward(&mut g, &p, x)?;
        Ok(g.data(s)[0])
    }

    /// Score of one `[3, H, W]` image with `[C, H, W]` label planes.
    pub fn d_seg_forward(&self, image: &Tensor<T>, label: &Tensor<T>) -> Result<T> {
        let r = self.config.resolution;
        if image.shape() != [3, r, r] {
            return Err(Error::dim("d_seg_forward", image.shape(), &[3, r, r]));
        }
        if label.shape() != [self.config.classes, r, r] {
            return Err(Error::dim("d_seg_forward", label.shape(), &[self.config.classes, r, r]));
        }
        let mut g = Graph::new();
        let p = self.d_seg.params.bind(&mut g, false)?;
        let x = g.constant(image.clone().reshape(&[1, 3, r, r])?)?;
        let y = g.constant(label.clone().reshape(&[1, self.config.classes, r, r])?)?;
        let xy = g.concat_channels(&[x, y])?;
        let s = self.d_seg.forward(&mut g, &p, xy)?;
        Ok(g.data(s)[0])
    }

    /// Style-modulated convolutions per generator block, read from parameter names.
    pub fn style_layer_audit(&self) -> Vec<usize> {
        self.generator.style_layer_audit()
    }

    pub fn export(&self, ck: &mut Checkpoint) {
        self.mapping.params.export(ck);
        self.generator.params.export(ck);
        self.d_rgb.params.export(ck);
        self.d_seg.params.export(ck);
    }

    pub fn import(&mut self, ck: &Checkpoint) -> Result<()> {
        self.mapping.params.import(ck)?;
        self.generator.params.import(ck)?;
        self.d_rgb.params.import(ck)?;
        self.d_seg.params.import(ck)
    }

    /// Canonical parameter names in checkpoint order.
    pub fn parameter_names(&self) -> Vec<String> {
        [&self.mapping.params, &self.generator.params, &self.d_rgb.params, &self.d_seg.params]
            .iter()
            .flat_map(|p| p.names().iter().cloned())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.mapping.params.is_finite()
            && self.generator.params.is_finite()
            && self.d_rgb.params.is_finite()
            && self.d_seg.params.is_finite()
    }
}

/// Draws `n` latent codes from `seed` and runs them through mapping and generator.
///
/// Every sample costs exactly one generator forward; there is no per-sample
/// optimization loop.
pub fn sample_batch<T: Scalar>(model: &GanModel<T>, n: usize, seed: u64) -> Result<Vec<GeneratedSample<T>>> {
    if n == 0 {
        return Err(Error::contract("sample_batch needs n >= 1"));
    }
    const CHUNK: usize = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<LatentCode<T>> = (0..n).map(|_| LatentCode::sample(model.config.z_dim, &mut rng)).collect();
    let mut out = Vec::with_capacity(n);
    for chunk in codes.chunks(CHUNK) {
        let mut g = Graph::new();
        let mp = model.mapping.params.bind(&mut g, false)?;
        let gp = model.generator.params.bind(&mut g, false)?;
        let flat: Vec<T> = chunk.iter().flat_map(|z| z.0.iter().copied()).collect();
        let z = g.constant(Tensor::new(&[chunk.len(), model.config.z_dim], flat)?)?;
        let w = model.mapping.forward(&mut g, &mp, z)?;
        let res = model.generator.forward(&mut g, &gp, w)?;
        out.extend(res.split(&g));
    }
    Ok(out)
}
