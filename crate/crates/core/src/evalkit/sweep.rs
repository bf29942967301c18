use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{histogram_distance, label_histogram, median, miou};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gan::{sample_batch, GanModel};
use crate::scenegen::Corpus;
use crate::tensor::Tensor;
use crate::training::seg::{predict, train_on, SegConfig, SegModel};
use crate::training::SegSample;

pub const DEFAULT_RATIOS: [usize; 5] = [0, 1, 5, 10, 25];

/// Latent seeds of the synthetic pools are offset from the training seeds.
const POOL_SALT: u64 = 0x5A3D_11E7_0000_0000;
const HISTOGRAM_SEED: u64 = 0x4157_0000_0000_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ratios: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Passes over the mixed set per cell, identical for every ratio.
    pub epochs: usize,
    pub seg: SegConfig,
    /// GAN samples drawn for the label-frequency comparison.
    pub histogram_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS.to_vec(),
            seeds: vec![0, 1, 2],
            epochs: 10,
            seg: SegConfig::default(),
            histogram_samples: 256,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("sweep needs at least one ratio and one seed"));
        }
        if self.epochs == 0 || self.histogram_samples == 0 {
            return Err(Error::config("sweep epochs and histogram samples must be positive"));
        }
        self.seg.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: usize,
    pub seed: u64,
    pub miou: f64,
    /// `None` where the class has zero union on the test split.
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub config_hash: String,
    pub corpus_checksum: String,
    pub checkpoint_sha256: String,
    /// Digest of the three hashes above.
    pub provenance: String,
    pub real_histogram: Vec<f64>,
    pub gan_histogram: Vec<f64>,
    pub histogram_distance: f64,
}

fn fmt_iou(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x:.6}"))
}

impl SweepRow {
    pub fn csv_header(classes: usize) -> String {
        let mut s = String::from("ratio,seed,miou");
        for c in 0..classes {
            let _ = write!(s, ",iou_c{c}");
        }
        s
    }

    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{},{:.6}", self.ratio, self.seed, self.miou);
        for &v in &self.per_class {
            let _ = write!(s, ",{}", fmt_iou(v));
        }
        s
    }
}

impl SweepReport {
    pub fn csv(&self) -> String {
        let classes = self.rows.first().map_or(0, |r| r.per_class.len());
        let mut s = SweepRow::csv_header(classes);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    /// Median mIoU per ratio, in first-appearance order.
    pub fn medians(&self) -> Vec<(usize, f64)> {
        let mut ratios: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !ratios.contains(&r.ratio) {
                ratios.push(r.ratio);
            }
        }
        ratios
            .into_iter()
            .map(|ratio| {
                let v: Vec<f64> = self.rows.iter().filter(|r| r.ratio == ratio).map(|r| r.miou).collect();
                (ratio, median(&v).expect("ratio has rows"))
            })
            .collect()
    }

    /// Smallest `median(r) / median(0)` over the ratios, if ratio 0 was run.
    pub fn worst_relative_median(&self) -> Option<f64> {
        let m = self.medians();
        let base = m.iter().find(|(r, _)| *r == 0)?.1;
        m.iter().map(|(_, v)| v / base).min_by(f64::total_cmp)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "provenance {}", self.provenance);
        let _ = writeln!(s, "config_hash {}", self.config_hash);
        let _ = writeln!(s, "corpus_checksum {}", self.corpus_checksum);
        let _ = writeln!(s, "checkpoint_sha256 {}", self.checkpoint_sha256);
        let _ = writeln!(s, "miou_convention dataset-level IoU per class; classes with zero union are excluded from the mean");
        for (r, m) in self.medians() {
            let _ = writeln!(s, "median_miou ratio={r} {m:.6}");
        }
        let list = |h: &[f64]| h.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "histogram_real {}", list(&self.real_histogram));
        let _ = writeln!(s, "histogram_gan {}", list(&self.gan_histogram));
        let _ = writeln!(s, "histogram_l1 {:.6}", self.histogram_distance);
        s
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl SweepConfig {
    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("sweep config serializes"))
    }
}

fn pool(model: &GanModel<f32>, n: usize, seed: u64) -> Result<Vec<SegSample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    Ok(sample_batch(model, n, seed)?.iter().map(SegSample::from).collect())
}

fn score_cell(
    data: &[SegSample],
    test_images: &[Tensor<f32>],
    test_masks: &[Vec<u8>],
    cfg: &SweepConfig,
    ratio: usize,
    seed: u64,
) -> Result<(SegModel, SweepRow)> {
    let seg = train_on(data, &cfg.seg, cfg.epochs, seed)?;
    let pred = predict(&seg, test_images)?;
    let m = miou(&pred, test_masks, cfg.seg.classes)?;
    let row = SweepRow {
        ratio,
        seed,
        miou: m.miou,
        per_class: m.per_class,
    };
    Ok((seg, row))
}

/// One sweep cell on its own: the segmenter trained on the real split plus
/// `ratio * len(train)` GAN samples, and its test-split score. Matches the
/// corresponding row of [`augmentation_sweep`].
pub fn sweep_cell(model: &GanModel<f32>, corpus: &Corpus, cfg: &SweepConfig, ratio: usize, seed: u64) -> Result<(SegModel, SweepRow)> {
    cfg.validate()?;
    if corpus.train.is_empty() || corpus.test.is_empty() {
        return Err(Error::config("sweep needs non-empty train and test splits"));
    }
    let mut data: Vec<SegSample> = corpus.train.iter().map(SegSample::from).collect();
    data.extend(pool(model, ratio * corpus.train.len(), seed ^ POOL_SALT)?);
    let test_images: Vec<Tensor<f32>> = corpus.test.iter().map(|s| s.image.clone()).collect();
    let test_masks: Vec<Vec<u8>> = corpus.test.iter().map(|s| s.mask.clone()).collect();
    score_cell(&data, &test_images, &test_masks, cfg, ratio, seed)
}

/// Trains one segmenter per `(ratio, seed)` on the real training split plus
/// `ratio * len(train)` GAN samples and scores it on the test split.
///
/// Cells run on up to `jobs` threads; results do not depend on `jobs`.
pub fn augmentation_sweep(model: &GanModel<f32>, corpus: &Corpus, cfg: &SweepConfig, jobs: usize) -> Result<SweepReport> {
    cfg.validate()?;
    if corpus.train.is_empty() || corpus.test.is_empty() {
        return Err(Error::config("sweep needs non-empty train and test splits"));
    }
    let classes = cfg.seg.classes;
    let real: Vec<SegSample> = corpus.train.iter().map(SegSample::from).collect();
    let test_images: Vec<Tensor<f32>> = corpus.test.iter().map(|s| s.image.clone()).collect();
    let test_masks: Vec<Vec<u8>> = corpus.test.iter().map(|s| s.mask.clone()).collect();
    let max_ratio = cfg.ratios.iter().copied().max().unwrap_or(0);
    // one pool per seed; every ratio takes a prefix of it
    let pools = cfg
        .seeds
        .iter()
        .map(|&s| pool(model, max_ratio * real.len(), s ^ POOL_SALT))
        .collect::<Result<Vec<_>>>()?;

    let cells: Vec<(usize, usize)> = cfg
        .ratios
        .iter()
        .flat_map(|&r| (0..cfg.seeds.len()).map(move |k| (r, k)))
        .collect();
    let run = |&(ratio, k): &(usize, usize)| -> Result<SweepRow> {
        let seed = cfg.seeds[k];
        let mut data = real.clone();
        data.extend_from_slice(&pools[k][..ratio * real.len()]);
        score_cell(&data, &test_images, &test_masks, cfg, ratio, seed).map(|(_, row)| row)
    };
    let results: Vec<Mutex<Option<Result<SweepRow>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let r = run(&cells[i]);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    let rows = results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;

    let real_masks: Vec<Vec<u8>> = corpus.train.iter().map(|s| s.mask.clone()).collect();
    let real_histogram = label_histogram(&real_masks, classes)?;
    let gan_masks: Vec<Vec<u8>> = sample_batch(model, cfg.histogram_samples, HISTOGRAM_SEED)?
        .iter()
        .map(|s| s.hard_mask())
        .collect();
    let gan_histogram = label_histogram(&gan_masks, classes)?;
    let distance = histogram_distance(&real_histogram, &gan_histogram)?;

    let mut ck = Checkpoint::new();
    model.export(&mut ck);
    let checkpoint_sha256 = sha256_hex(&ck.to_bytes());
    let config_hash = cfg.hash();
    let provenance = sha256_hex(format!("{config_hash}:{}:{checkpoint_sha256}", corpus.checksum).as_bytes());
    Ok(SweepReport {
        rows,
        config_hash,
        corpus_checksum: corpus.checksum.clone(),
        checkpoint_sha256,
        provenance,
        real_histogram,
        gan_histogram,
        histogram_distance: distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::GanConfig;
    use crate::scenegen::CorpusConfig;

    fn tiny() -> (GanModel<f32>, Corpus, SweepConfig) {
        let gan = GanModel::new(GanConfig {
            resolution: 16,
            gen_channels: vec![8, 8],
            disc_channels: vec![8, 8],
            z_dim: 8,
            w_dim: 8,
            ..GanConfig::default()
        })
        .unwrap();
        let corpus = Corpus::generate(&CorpusConfig {
            resolution: 16,
            count: 4,
            test_count: 4,
            ..CorpusConfig::default()
        })
        .unwrap();
        let cfg = SweepConfig {
            ratios: vec![0, 1],
            seeds: vec![3, 4],
            epochs: 1,
            seg: SegConfig {
                widths: [4, 4, 4, 4],
                ..SegConfig::default()
            },
            histogram_samples: 4,
        };
        (gan, corpus, cfg)
    }

    #[test]
    fn one_row_per_cell_and_deterministic_across_jobs() {
        let (gan, corpus, cfg) = tiny();
        let a = augmentation_sweep(&gan, &corpus, &cfg, 1).unwrap();
        assert_eq!(a.rows.len(), 4);
        assert_eq!((a.rows[1].ratio, a.rows[1].seed), (0, 4));
        assert!(a.csv().starts_with("ratio,seed,miou,iou_c0,iou_c1,iou_c2,iou_c3,iou_c4\n"));
        let b = augmentation_sweep(&gan, &corpus, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.medians().len(), 2);
        let (_, row) = sweep_cell(&gan, &corpus, &cfg, 1, 4).unwrap();
        assert_eq!(row, a.rows[3]);
    }

    #[test]
    fn provenance_tracks_config_and_corpus() {
        let (gan, corpus, cfg) = tiny();
        let cfg = SweepConfig { ratios: vec![0], seeds: vec![0], ..cfg };
        let a = augmentation_sweep(&gan, &corpus, &cfg, 1).unwrap();
        let other_cfg = SweepConfig { epochs: 2, ..cfg.clone() };
        assert_ne!(a.provenance, augmentation_sweep(&gan, &corpus, &other_cfg, 1).unwrap().provenance);
        let other_corpus = Corpus::generate(&CorpusConfig {
            resolution: 16,
            count: 4,
            test_count: 4,
            seed: 9,
            ..CorpusConfig::default()
        })
        .unwrap();
        assert_ne!(a.provenance, augmentation_sweep(&gan, &other_corpus, &cfg, 1).unwrap().provenance);
    }
}
