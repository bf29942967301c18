use wastegan::evalkit::miou;
use wastegan::gan::{GanConfig, GeneratedSample};
use wastegan::losses::{self, HingeConfig};
use wastegan::scenegen::{Corpus, CorpusConfig, SceneSample};
use wastegan::training::*;
use wastegan::{Checkpoint, Error, Graph, Tensor};

fn tiny_gan() -> GanConfig {
    GanConfig {
        resolution: 16,
        gen_channels: vec![8, 8],
        disc_channels: vec![8, 8],
        z_dim: 8,
        w_dim: 8,
        mapping_layers: 2,
        ..GanConfig::default()
    }
}

fn tiny_train(steps: usize) -> GanTrainConfig {
    GanTrainConfig {
        steps,
        batch_size: 4,
        checkpoint_every: 2,
        ..GanTrainConfig::default()
    }
}

fn scenes(n: usize) -> Vec<SceneSample> {
    Corpus::generate(&CorpusConfig {
        resolution: 16,
        count: n,
        test_count: 0,
        ..CorpusConfig::default()
    })
    .unwrap()
    .train
}

fn trainer(steps: usize) -> GanTrainer<f32> {
    GanTrainer::new(tiny_gan(), tiny_train(steps)).unwrap()
}

#[test]
fn discriminators_update_before_the_generator() {
    let corpus = scenes(6);
    let mut t = trainer(1);
    let batch = t.real_batch(&corpus, 1).unwrap();
    let g0 = t.model.generator.params.clone();
    let m0 = t.model.mapping.params.clone();
    let d0 = (t.model.d_rgb.params.clone(), t.model.d_seg.params.clone());
    t.discriminator_phase(&batch, 1).unwrap();
    assert_ne!(t.model.d_rgb.params, d0.0);
    assert_ne!(t.model.d_seg.params, d0.1);
    assert_eq!(t.model.generator.params, g0);
    assert_eq!(t.model.mapping.params, m0);
    let d1 = (t.model.d_rgb.params.clone(), t.model.d_seg.params.clone());
    t.generator_phase(&batch, 1).unwrap();
    assert_ne!(t.model.generator.params, g0);
    assert_ne!(t.model.mapping.params, m0);
    assert_eq!((t.model.d_rgb.params.clone(), t.model.d_seg.params.clone()), d1);
}

#[test]
fn zero_learning_rates_leave_parameters_bitwise_unchanged() {
    let corpus = scenes(4);
    let cfg = GanTrainConfig {
        lr_d: 0.0,
        lr_g: 0.0,
        lr_mapping: 0.0,
        ..tiny_train(2)
    };
    let t = GanTrainer::<f32>::new(tiny_gan(), cfg).unwrap();
    let before = t.model.clone();
    let out = train_gan(t, &corpus, |_| Ok(())).unwrap();
    assert_eq!(out.metrics.len(), 2);
    assert!(out.metrics.iter().all(|m| m.loss_g.is_finite() && m.loss_drgb > 0.0));
    let after = &out.trainer.model;
    assert_eq!(after.generator.params, before.generator.params);
    assert_eq!(after.mapping.params, before.mapping.params);
    assert_eq!(after.d_rgb.params, before.d_rgb.params);
    assert_eq!(after.d_seg.params, before.d_seg.params);
}

#[test]
fn each_group_gets_its_own_learning_rate() {
    let t = trainer(1);
    assert_eq!(t.optimizers.mapping.learning_rate(), 1e-6);
    assert_eq!(t.optimizers.generator.learning_rate(), 1e-4);
    assert_eq!(t.optimizers.d_rgb.learning_rate(), 1e-4);
    assert_eq!(t.optimizers.d_seg.learning_rate(), 1e-4);
    assert_eq!((t.optimizers.d_rgb.config.beta1, t.optimizers.d_rgb.config.beta2), (0.0, 0.99));
}

#[test]
fn discriminator_losses_contain_no_gradient_penalty() {
    let mut g = Graph::<f64>::new();
    let r = g.param(Tensor::new(&[3], vec![0.2, -0.4, 1.0]).unwrap()).unwrap();
    let f = g.param(Tensor::new(&[3], vec![0.1, 0.3, -2.0]).unwrap()).unwrap();
    let l = losses::loss_d_rgb(&mut g, r, f, &HingeConfig::default()).unwrap();
    let l2 = losses::loss_d_seg(&mut g, r, f, &HingeConfig::default()).unwrap();
    for root in [l, l2] {
        let ops = g.ancestry_op_names(root);
        assert!(!ops.is_empty());
        for op in ops {
            assert!(
                ["leaf", "scale", "add_scalar", "leaky_relu", "mean", "add"].contains(&op),
                "unexpected op {op} in discriminator loss"
            );
        }
    }
}

#[test]
fn metrics_log_has_one_row_per_step_and_observer_cadence() {
    let corpus = scenes(4);
    let mut seen = Vec::new();
    let out = train_gan(trainer(5), &corpus, |t| {
        seen.push(t.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![2, 4, 5]);
    let csv = metrics_csv(&out.metrics);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 6);
    assert!(lines[5].starts_with("5,"));
}

#[test]
fn corpus_smaller_than_batch_is_a_config_error() {
    let r = train_gan(trainer(1), &scenes(3), |_| Ok(()));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn resume_reproduces_the_remaining_metrics() {
    let corpus = scenes(6);
    let full = train_gan(trainer(6), &corpus, |_| Ok(())).unwrap();

    let mut saved = None;
    train_gan(trainer(3), &corpus, |t| {
        saved = Some(t.checkpoint().to_bytes());
        Ok(())
    })
    .unwrap();
    let ck = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
    let mut resumed = trainer(6);
    resumed.restore(&ck).unwrap();
    assert_eq!(resumed.step, 3);
    let rest = train_gan(resumed, &corpus, |_| Ok(())).unwrap();
    assert_eq!(rest.metrics, full.metrics[3..]);
    assert_eq!(rest.trainer.checkpoint().to_bytes(), full.trainer.checkpoint().to_bytes());
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let corpus = scenes(5);
    let a = train_gan(trainer(3), &corpus, |_| Ok(())).unwrap();
    let b = train_gan(trainer(3), &corpus, |_| Ok(())).unwrap();
    assert_eq!(a.trainer.checkpoint().to_bytes(), b.trainer.checkpoint().to_bytes());
    let other = GanTrainConfig { seed: 1, ..tiny_train(3) };
    let c = train_gan(GanTrainer::<f32>::new(tiny_gan(), other).unwrap(), &corpus, |_| Ok(())).unwrap();
    assert_ne!(a.metrics, c.metrics);
}

#[test]
fn checkpoint_restores_the_imc_state() {
    let corpus = scenes(4);
    let out = train_gan(trainer(2), &corpus, |_| Ok(())).unwrap();
    let ck = out.trainer.checkpoint();
    assert!(ck.names().any(|n| n == "imc.real_dist"));
    assert!(ck.names().any(|n| n.starts_with("opt.mapping.")));
    let mut fresh = trainer(2);
    fresh.restore(&ck).unwrap();
    assert_eq!(fresh.real_dist, out.trainer.real_dist);
    assert_eq!(fresh.optimizers, out.trainer.optimizers);
}

fn fake_samples(n: usize) -> Vec<GeneratedSample<f32>> {
    (0..n)
        .map(|_| GeneratedSample {
            image: Tensor::zeros(&[3, 16, 16]),
            label_logits: Tensor::zeros(&[5, 16, 16]),
            soft_mask: Tensor::full(&[5, 16, 16], 0.2),
        })
        .collect()
}

#[test]
fn mix_sizes_follow_the_ratio() {
    let real = scenes(4);
    assert_eq!(MixDataset::real_only(real.clone()).unwrap().len(), 4);
    let m = MixDataset::new(real.clone(), fake_samples(100), 25).unwrap();
    assert_eq!(m.len(), 104);
    assert_eq!(m.samples().len(), 104);
    assert!(matches!(MixDataset::new(real, fake_samples(7), 2), Err(Error::Contract(_))));
}

#[test]
fn synthetic_labels_are_hardened_by_argmax() {
    let mut s = fake_samples(1);
    let plane = 256;
    s[0].soft_mask.data_mut()[3 * plane + 5] = 0.9;
    let seg = SegSample::from(&s[0]);
    assert_eq!(seg.labels[5], 3);
    assert_eq!(seg.labels[6], 0);
}

#[test]
fn segmenter_overfits_four_images() {
    let real = Corpus::generate(&CorpusConfig {
        count: 4,
        test_count: 0,
        ..CorpusConfig::default()
    })
    .unwrap()
    .train;
    let mix = MixDataset::real_only(real.clone()).unwrap();
    let model = train_seg(&mix, &SegConfig::default(), 200, 0).unwrap();
    let images: Vec<Tensor<f32>> = real.iter().map(|s| s.image.clone()).collect();
    let gt: Vec<Vec<u8>> = real.iter().map(|s| s.mask.clone()).collect();
    let r = miou(&predict(&model, &images).unwrap(), &gt, 5).unwrap();
    assert!(r.miou >= 0.95, "train mIoU {} after 200 epochs", r.miou);
    assert!(model.epoch_losses.last().unwrap() < &model.epoch_losses[0]);
}
