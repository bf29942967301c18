use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mix::{MixDataset, SegSample};
use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gan::{LEAKY_SLOPE, NUM_CLASSES};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    /// Widths at full, 1/2, 1/4 and 1/8 resolution.
    pub widths: [usize; 4],
    pub classes: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 48, 64],
            classes: NUM_CLASSES,
            learning_rate: 1e-3,
            batch_size: 16,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.classes < 2 || self.batch_size == 0 {
            return Err(Error::config(format!("invalid segmenter settings {self:?}")));
        }
        self.adam().validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

type Conv = (ParamId, ParamId);

/// Compact U-Net: three stride-2 down blocks, three upsampling blocks that
/// concatenate the matching encoder features, and a 1x1 class head.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: SegConfig,
    pub params: ParamSet<f32>,
    stem: [Conv; 2],
    down: Vec<[Conv; 2]>,
    up: Vec<[Conv; 2]>,
    head: Conv,
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

fn conv(p: &mut ParamSet<f32>, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv {
    let w = p.add_normal(&format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k, 2f64.sqrt(), rng);
    let b = p.add_const(&format!("{name}.bias"), &[c_out], 0.0);
    (w, b)
}

impl SegModel {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new("seg");
        let w = config.widths;
        let stem = [conv(&mut p, "stem.0", 3, w[0], 3, &mut rng), conv(&mut p, "stem.1", w[0], w[0], 3, &mut rng)];
        let down = (1..4)
            .map(|i| {
                [
                    conv(&mut p, &format!("down{i}.0"), w[i - 1], w[i], 3, &mut rng),
                    conv(&mut p, &format!("down{i}.1"), w[i], w[i], 3, &mut rng),
                ]
            })
            .collect();
        let up = (0..3)
            .rev()
            .map(|i| {
                [
                    conv(&mut p, &format!("up{i}.0"), w[i + 1] + w[i], w[i], 3, &mut rng),
                    conv(&mut p, &format!("up{i}.1"), w[i], w[i], 3, &mut rng),
                ]
            })
            .collect();
        let head = conv(&mut p, "head", w[0], config.classes, 1, &mut rng);
        Ok(Self {
            config,
            params: p,
            stem,
            down,
            up,
            head,
            epoch_losses: Vec::new(),
        })
    }

    fn layer(&self, g: &mut Graph<f32>, b: &Bound, x: Var, c: Conv, stride: usize) -> Result<Var> {
        let k = g.shape(b.get(c.0))[2];
        let y = g.conv2d(x, b.get(c.0), stride, k / 2)?;
        let y = g.add_bias(y, b.get(c.1))?;
        g.leaky_relu(y, LEAKY_SLOPE as f32)
    }

    /// `[n, 3, H, W]` images to `[n, C, H, W]` class logits; `H` and `W` must be multiples of 8.
    pub fn forward(&self, g: &mut Graph<f32>, b: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] % 8 != 0 || s[3] % 8 != 0 || s[2] == 0 {
            return Err(Error::dim("segmenter input", &s, &[0, 3, 8, 8]));
        }
        let mut h = self.layer(g, b, x, self.stem[0], 1)?;
        h = self.layer(g, b, h, self.stem[1], 1)?;
        let mut skips = vec![h];
        for blk in &self.down {
            h = self.layer(g, b, h, blk[0], 2)?;
            h = self.layer(g, b, h, blk[1], 1)?;
            skips.push(h);
        }
        skips.pop();
        for blk in &self.up {
            let skip = skips.pop().expect("one skip per up block");
            let u = g.upsample2x(h)?;
            let cat = g.concat_channels(&[u, skip])?;
            h = self.layer(g, b, cat, blk[0], 1)?;
            h = self.layer(g, b, h, blk[1], 1)?;
        }
        let y = g.conv2d(h, b.get(self.head.0), 1, 0)?;
        g.add_bias(y, b.get(self.head.1))
    }

    /// `[C, H, W]` logits per image.
    pub fn logits(&self, images: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let mut g = Graph::new();
            let b = self.params.bind(&mut g, false)?;
            let x = g.constant(stack(chunk)?)?;
            let y = self.forward(&mut g, &b, x)?;
            let s = g.shape(y).to_vec();
            let len = s[1] * s[2] * s[3];
            for i in 0..chunk.len() {
                out.push(Tensor::new(&s[1..], g.data(y)[i * len..(i + 1) * len].to_vec())?);
            }
        }
        Ok(out)
    }

    pub fn export(&self, ck: &mut Checkpoint) {
        self.params.export(ck);
    }

    pub fn import(&mut self, ck: &Checkpoint) -> Result<()> {
        self.params.import(ck)
    }
}

fn stack(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::contract("no images"))?;
    let s = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for t in images {
        if t.shape() != s.as_slice() {
            return Err(Error::dim("image stack", &s, t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(&s);
    Tensor::new(&shape, data)
}

/// Argmax class map per image.
pub fn predict(model: &SegModel, images: &[Tensor<f32>]) -> Result<Vec<Vec<u8>>> {
    Ok(model.logits(images)?.iter().map(argmax_channels).collect())
}

pub(crate) fn argmax_channels(t: &Tensor<f32>) -> Vec<u8> {
    let s = t.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let d = t.data();
    (0..plane)
        .map(|p| (1..c).fold(0, |best, ch| if d[ch * plane + p] > d[best * plane + p] { ch } else { best }) as u8)
        .collect()
}

/// Trains a fresh segmenter with per-pixel cross-entropy on the shuffled union of `mix`.
pub fn train_seg(mix: &MixDataset, cfg: &SegConfig, epochs: usize, seed: u64) -> Result<SegModel> {
    if mix.is_empty() {
        return Err(Error::contract("segmentation dataset is empty"));
    }
    let data = mix.samples();
    train_on(&data, cfg, epochs, seed)
}

pub(crate) fn train_on(data: &[SegSample], cfg: &SegConfig, epochs: usize, seed: u64) -> Result<SegModel> {
    if data.is_empty() {
        return Err(Error::contract("segmentation dataset is empty"));
    }
    let mut model = SegModel::new(cfg.clone(), seed)?;
    let mut opt = AdamState::new(cfg.adam(), model.params.tensors())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<Tensor<f32>> = chunk.iter().map(|&i| data[i].image.clone()).collect();
            let targets: Vec<usize> = chunk
                .iter()
                .flat_map(|&i| data[i].labels.iter().map(|&l| l as usize))
                .collect();
            let mut g = Graph::new();
            let b = model.params.bind(&mut g, true)?;
            let x = g.constant(stack(&images)?)?;
            let y = model.forward(&mut g, &b, x)?;
            let loss = g.cross_entropy(y, &targets)?;
            let v = g.data(loss)[0] as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step: epoch,
                    term: "segmentation cross-entropy".into(),
                });
            }
            g.backward(loss)?;
            model.params.collect_grads(&g, &b);
            adam_step(model.params.tensors_mut(), &mut opt)?;
            model.params.zero_grad();
            total += v;
            batches += 1;
        }
        model.epoch_losses.push(total / batches as f64);
    }
    Ok(model)
}
