use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gan::{GanConfig, GanModel, LatentCode};
use crate::losses::{self, ema_update, estimate_cond_dist, CondPixelLabelDist, FeatureExtractor, HingeConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::scenegen::SceneSample;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,loss_drgb,loss_dseg,loss_h,loss_q,loss_imc,loss_g";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    pub lr_mapping: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub hinge: HingeConfig,
    pub ema_decay: f64,
    pub histogram_bins: usize,
    pub seed: u64,
    /// Observer cadence in steps; 0 only observes the end of training.
    pub checkpoint_every: usize,
    pub feature_seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr_d: 1e-4,
            lr_g: 1e-4,
            lr_mapping: 1e-6,
            beta1: 0.0,
            beta2: 0.99,
            epsilon: 1e-8,
            hinge: HingeConfig::default(),
            ema_decay: 0.99,
            histogram_bins: 32,
            seed: 0,
            checkpoint_every: 200,
            feature_seed: 7,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch size must be at least 1"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::config(format!("ema decay must lie in (0, 1), got {}", self.ema_decay)));
        }
        if self.histogram_bins < 2 {
            return Err(Error::config("need at least 2 histogram bins"));
        }
        self.hinge.validate()?;
        for lr in [self.lr_d, self.lr_g, self.lr_mapping] {
            self.adam(lr).validate()?;
        }
        Ok(())
    }

    pub fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Loss values of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_drgb: f64,
    pub loss_dseg: f64,
    pub loss_h: f64,
    pub loss_q: f64,
    pub loss_imc: f64,
    pub loss_g: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss_drgb, self.loss_dseg, self.loss_h, self.loss_q, self.loss_imc, self.loss_g
        )
    }
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// One optimizer per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GanOptimizers<T> {
    pub mapping: AdamState<T>,
    pub generator: AdamState<T>,
    pub d_rgb: AdamState<T>,
    pub d_seg: AdamState<T>,
}

/// Stacked real batch: `[n, 3, h, w]` images and `[n, C, h, w]` one-hot labels.
#[derive(Clone, Debug)]
pub struct RealBatch<T> {
    pub images: Tensor<T>,
    pub labels: Tensor<T>,
    per_image: Vec<Tensor<T>>,
    per_label: Vec<Tensor<T>>,
}

impl<T: Scalar> RealBatch<T> {
    pub fn from_scenes(scenes: &[&SceneSample], classes: usize) -> Result<Self> {
        let first = scenes.first().ok_or_else(|| Error::contract("real batch is empty"))?;
        let r = first.resolution;
        let n = scenes.len();
        let mut per_image = Vec::with_capacity(n);
        let mut per_label = Vec::with_capacity(n);
        for s in scenes {
            if s.resolution != r {
                return Err(Error::dim("real batch", &[r, r], &[s.resolution, s.resolution]));
            }
            per_image.push(s.image_as::<T>());
            per_label.push(s.one_hot::<T>(classes));
        }
        let flat = |ts: &[Tensor<T>]| ts.iter().flat_map(|t| t.data().iter().copied()).collect::<Vec<T>>();
        Ok(Self {
            images: Tensor::new(&[n, 3, r, r], flat(&per_image))?,
            labels: Tensor::new(&[n, classes, r, r], flat(&per_label))?,
            per_image,
            per_label,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything that evolves during GAN training.
#[derive(Clone, Debug)]
pub struct GanTrainer<T: Scalar> {
    pub config: GanTrainConfig,
    pub model: GanModel<T>,
    pub optimizers: GanOptimizers<T>,
    /// EMA estimate of the real conditional pixel/label distribution.
    pub real_dist: CondPixelLabelDist<T>,
    pub features: FeatureExtractor<T>,
    /// Completed steps.
    pub step: usize,
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { term, .. } => Error::NonFinite { step, term },
        other => other,
    }
}

fn finite(step: usize, term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            step,
            term: term.to_string(),
        })
    }
}

fn latent_batch<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Result<Tensor<T>> {
    let data = (0..n).flat_map(|_| LatentCode::<T>::sample(dim, rng).0).collect();
    Tensor::new(&[n, dim], data)
}

fn apply<T: Scalar>(params: &mut ParamSet<T>, opt: &mut AdamState<T>) -> Result<()> {
    adam_step(params.tensors_mut(), opt)?;
    params.zero_grad();
    Ok(())
}

impl<T: Scalar> GanTrainer<T> {
    pub fn new(gan: GanConfig, config: GanTrainConfig) -> Result<Self> {
        config.validate()?;
        let model = GanModel::new(gan)?;
        let optimizers = GanOptimizers {
            mapping: AdamState::new(config.adam(config.lr_mapping), model.mapping.params.tensors())?,
            generator: AdamState::new(config.adam(config.lr_g), model.generator.params.tensors())?,
            d_rgb: AdamState::new(config.adam(config.lr_d), model.d_rgb.params.tensors())?,
            d_seg: AdamState::new(config.adam(config.lr_d), model.d_seg.params.tensors())?,
        };
        let real_dist = CondPixelLabelDist::uniform(config.histogram_bins, model.config.classes, config.ema_decay);
        let features = FeatureExtractor::new(config.feature_seed);
        Ok(Self {
            config,
            model,
            optimizers,
            real_dist,
            features,
            step: 0,
        })
    }

    /// Random generator for `step`, independent of how training got there.
    /// Stream `3 * step` picks the real batch, the next two draw the latents of each phase.
    fn step_rng(&self, step: usize, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.config.seed);
        r.set_stream(3 * step as u64 + stream);
        r
    }

    /// Draws the real batch used at `step`.
    pub fn real_batch(&self, corpus: &[SceneSample], step: usize) -> Result<RealBatch<T>> {
        let bs = self.config.batch_size;
        if corpus.len() < bs {
            return Err(Error::config(format!(
                "corpus has {} labeled samples, batch needs {bs}",
                corpus.len()
            )));
        }
        let mut rng = self.step_rng(step, 0);
        let mut picks = index::sample(&mut rng, corpus.len(), bs).into_vec();
        picks.sort_unstable();
        let scenes: Vec<&SceneSample> = picks.iter().map(|&i| &corpus[i]).collect();
        RealBatch::from_scenes(&scenes, self.model.config.classes)
    }

    /// One discriminator update followed by one generator/mapping update.
    pub fn train_step(&mut self, real: &RealBatch<T>) -> Result<StepMetrics> {
        let step = self.step + 1;
        self.step_inner(real, step).map_err(|e| with_step(e, step))
    }

    fn step_inner(&mut self, real: &RealBatch<T>, step: usize) -> Result<StepMetrics> {
        let (loss_drgb, loss_dseg) = self.discriminator_phase(real, step)?;
        let [loss_h, loss_q, loss_imc, loss_g] = self.generator_phase(real, step)?;
        if !self.model.is_finite() {
            return Err(Error::NonFinite {
                step,
                term: "parameters".into(),
            });
        }
        self.step = step;
        Ok(StepMetrics {
            step,
            loss_drgb,
            loss_dseg,
            loss_h,
            loss_q,
            loss_imc,
            loss_g,
        })
    }

    /// First half of step `step`: hinge losses of both discriminators on a
    /// fresh fake batch and one ADAM update of each. Returns `(L_Drgb, L_Dseg)`.
    pub fn discriminator_phase(&mut self, real: &RealBatch<T>, step: usize) -> Result<(f64, f64)> {
        if real.is_empty() {
            return Err(Error::contract("real batch is empty"));
        }
        let hinge = self.config.hinge;
        let mut rng = self.step_rng(step, 1);
        let mut g = Graph::new();
        let mp = self.model.mapping.params.bind(&mut g, false)?;
        let gp = self.model.generator.params.bind(&mut g, false)?;
        let z = g.constant(latent_batch(&mut rng, real.len(), self.model.config.z_dim)?)?;
        let w = self.model.mapping.forward(&mut g, &mp, z)?;
        let fake = self.model.generator.forward(&mut g, &gp, w)?;
        let xr = g.constant(real.images.clone())?;
        let yr = g.constant(real.labels.clone())?;
        let dr = self.model.d_rgb.params.bind(&mut g, true)?;
        let ds = self.model.d_seg.params.bind(&mut g, true)?;
        let real_rgb = self.model.d_rgb.forward(&mut g, &dr, xr)?;
        let fake_rgb = self.model.d_rgb.forward(&mut g, &dr, fake.image)?;
        let cr = g.concat_channels(&[xr, yr])?;
        let cf = g.concat_channels(&[fake.image, fake.soft_mask])?;
        let real_seg = self.model.d_seg.forward(&mut g, &ds, cr)?;
        let fake_seg = self.model.d_seg.forward(&mut g, &ds, cf)?;
        let l_rgb = losses::loss_d_rgb(&mut g, real_rgb, fake_rgb, &hinge)?;
        let l_seg = losses::loss_d_seg(&mut g, real_seg, fake_seg, &hinge)?;
        let total = g.add(l_rgb, l_seg)?;
        let lr = finite(step, "loss_drgb", g.data(l_rgb)[0].to_f64().unwrap_or(f64::NAN))?;
        let ls = finite(step, "loss_dseg", g.data(l_seg)[0].to_f64().unwrap_or(f64::NAN))?;
        g.backward(total)?;
        self.model.d_rgb.params.collect_grads(&g, &dr);
        self.model.d_seg.params.collect_grads(&g, &ds);
        apply(&mut self.model.d_rgb.params, &mut self.optimizers.d_rgb)?;
        apply(&mut self.model.d_seg.params, &mut self.optimizers.d_seg)?;
        Ok((lr, ls))
    }

    /// Second half of step `step`: EMA update of the real conditional table,
    /// the composite generator loss on a new fake batch and one ADAM update of
    /// the generator and mapping network. Returns `[L_h, L_q, L_imc, L_G]`.
    ///
    /// The discriminators only enter as constants, so the real-score hinge
    /// terms carry a value but no gradient.
    pub fn generator_phase(&mut self, real: &RealBatch<T>, step: usize) -> Result<[f64; 4]> {
        if real.is_empty() {
            return Err(Error::contract("real batch is empty"));
        }
        let cfg = self.config.clone();
        let mut rng = self.step_rng(step, 2);
        let batch_dist = estimate_cond_dist(&real.per_image, &real.per_label, cfg.histogram_bins, cfg.ema_decay)?;
        self.real_dist = ema_update(&self.real_dist, &batch_dist)?;
        let mut g = Graph::new();
        let mp = self.model.mapping.params.bind(&mut g, true)?;
        let gp = self.model.generator.params.bind(&mut g, true)?;
        let dr = self.model.d_rgb.params.bind(&mut g, false)?;
        let ds = self.model.d_seg.params.bind(&mut g, false)?;
        let fp = self.features.bind(&mut g)?;
        let z = g.constant(latent_batch(&mut rng, real.len(), self.model.config.z_dim)?)?;
        let w = self.model.mapping.forward(&mut g, &mp, z)?;
        let fake = self.model.generator.forward(&mut g, &gp, w)?;
        let xr = g.constant(real.images.clone())?;
        let yr = g.constant(real.labels.clone())?;
        let fake_rgb = self.model.d_rgb.forward(&mut g, &dr, fake.image)?;
        let real_rgb = self.model.d_rgb.forward(&mut g, &dr, xr)?;
        let cf = g.concat_channels(&[fake.image, fake.soft_mask])?;
        let cr = g.concat_channels(&[xr, yr])?;
        let fake_seg = self.model.d_seg.forward(&mut g, &ds, cf)?;
        let real_seg = self.model.d_seg.forward(&mut g, &ds, cr)?;
        let l_h = losses::loss_g_hinge(&mut g, fake_rgb, real_rgb, fake_seg, real_seg, &cfg.hinge)?;
        let l_q = losses::loss_quality(&mut g, xr, fake.image, &self.features, &fp)?.total;
        let p_gen = losses::cond_dist_graph(&mut g, fake.image, fake.soft_mask, cfg.histogram_bins)?;
        let p_real = g.constant(self.real_dist.table.clone())?;
        let l_imc = losses::loss_imc(&mut g, p_real, p_gen)?;
        let value = |v| g.data(v)[0].to_f64().unwrap_or(f64::NAN);
        let terms = [
            finite(step, "loss_h", value(l_h))?,
            finite(step, "loss_q", value(l_q))?,
            finite(step, "loss_imc", value(l_imc))?,
        ];
        let l_g = losses::loss_g_total(&mut g, l_h, l_q, l_imc)?;
        let total = finite(step, "loss_g", g.data(l_g)[0].to_f64().unwrap_or(f64::NAN))?;
        g.backward(l_g)?;
        self.model.mapping.params.collect_grads(&g, &mp);
        self.model.generator.params.collect_grads(&g, &gp);
        apply(&mut self.model.mapping.params, &mut self.optimizers.mapping)?;
        apply(&mut self.model.generator.params, &mut self.optimizers.generator)?;
        Ok([terms[0], terms[1], terms[2], total])
    }

    /// Model weights, optimizer moments, EMA state and step counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.model.export(&mut ck);
        let groups = [
            (&self.model.mapping.params, &self.optimizers.mapping),
            (&self.model.generator.params, &self.optimizers.generator),
            (&self.model.d_rgb.params, &self.optimizers.d_rgb),
            (&self.model.d_seg.params, &self.optimizers.d_seg),
        ];
        for (params, opt) in groups {
            for ((name, t), (m, v)) in params
                .names()
                .iter()
                .zip(params.tensors())
                .zip(opt.first_moment.iter().zip(&opt.second_moment))
            {
                ck.push(format!("opt.{name}.m"), &Tensor::new(t.shape(), m.clone()).expect("moment shape"));
                ck.push(format!("opt.{name}.v"), &Tensor::new(t.shape(), v.clone()).expect("moment shape"));
            }
            ck.push(
                format!("opt.{}.step", params.prefix()),
                &Tensor::<f64>::scalar(opt.step_count as f64),
            );
        }
        ck.push("imc.real_dist", &self.real_dist.table);
        let empty: Vec<f64> = self.real_dist.empty.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
        ck.push(
            "imc.real_empty",
            &Tensor::<f64>::new(&[empty.len()], empty).expect("flag shape"),
        );
        ck.push("train.step", &Tensor::<f64>::scalar(self.step as f64));
        ck
    }

    /// Restores state saved by [`GanTrainer::checkpoint`] into a trainer built with the same configs.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.model.import(ck)?;
        let opts = [
            (&self.model.mapping.params, &mut self.optimizers.mapping),
            (&self.model.generator.params, &mut self.optimizers.generator),
            (&self.model.d_rgb.params, &mut self.optimizers.d_rgb),
            (&self.model.d_seg.params, &mut self.optimizers.d_seg),
        ];
        for (params, opt) in opts {
            for (i, name) in params.names().iter().enumerate() {
                for (suffix, dst) in [("m", &mut opt.first_moment[i]), ("v", &mut opt.second_moment[i])] {
                    let src = ck.require(&format!("opt.{name}.{suffix}"))?;
                    if src.len() != dst.len() {
                        return Err(Error::dim("optimizer restore", &[dst.len()], src.shape()));
                    }
                    dst.iter_mut().zip(src.data()).for_each(|(d, &s)| *d = T::lit(s as f64));
                }
            }
            opt.step_count = ck.require(&format!("opt.{}.step", params.prefix()))?.item() as u64;
        }
        let table = ck.require("imc.real_dist")?;
        if table.shape() != self.real_dist.table.shape() {
            return Err(Error::dim("imc restore", self.real_dist.table.shape(), table.shape()));
        }
        self.real_dist.table = table.cast();
        let empty = ck.require("imc.real_empty")?;
        if empty.len() != self.real_dist.classes {
            return Err(Error::dim("imc restore", &[self.real_dist.classes], empty.shape()));
        }
        self.real_dist.empty = empty.data().iter().map(|&e| e != 0.0).collect();
        self.step = ck.require("train.step")?.item() as usize;
        Ok(())
    }
}

/// Result of [`train_gan`].
pub struct GanTrainOutcome<T: Scalar> {
    pub trainer: GanTrainer<T>,
    pub metrics: Vec<StepMetrics>,
}

/// Runs `trainer` up to `trainer.config.steps` total steps on `corpus`.
///
/// `observe` sees the trainer after every `checkpoint_every` steps and after the last one.
pub fn train_gan<T: Scalar>(
    mut trainer: GanTrainer<T>,
    corpus: &[SceneSample],
    mut observe: impl FnMut(&GanTrainer<T>) -> Result<()>,
) -> Result<GanTrainOutcome<T>> {
    let total = trainer.config.steps;
    if corpus.len() < trainer.config.batch_size {
        return Err(Error::config(format!(
            "corpus has {} labeled samples, batch needs {}",
            corpus.len(),
            trainer.config.batch_size
        )));
    }
    let every = trainer.config.checkpoint_every;
    let mut metrics = Vec::with_capacity(total.saturating_sub(trainer.step));
    while trainer.step < total {
        let batch = trainer.real_batch(corpus, trainer.step + 1)?;
        metrics.push(trainer.train_step(&batch)?);
        if (every > 0 && trainer.step % every == 0) || trainer.step == total {
            observe(&trainer)?;
        }
    }
    Ok(GanTrainOutcome { trainer, metrics })
}
