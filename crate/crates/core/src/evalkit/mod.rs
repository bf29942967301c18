//! Segmentation metrics, label-frequency analysis and the augmentation-ratio sweep.

mod sweep;

pub use sweep::{augmentation_sweep, sweep_cell, SweepConfig, SweepReport, SweepRow, DEFAULT_RATIOS};

use crate::error::{Error, Result};

/// `[gt][pred]` pixel counts over a set of masks.
pub fn confusion_matrix(pred: &[Vec<u8>], gt: &[Vec<u8>], classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!("{} predictions for {} ground-truth masks", pred.len(), gt.len())));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::contract(format!(
                "mask {i}: prediction has {} pixels, ground truth {}",
                p.len(),
                g.len()
            )));
        }
        for (&a, &b) in p.iter().zip(g) {
            if a as usize >= classes || b as usize >= classes {
                return Err(Error::contract(format!("mask {i}: class index out of range 0..{classes}")));
            }
            m[b as usize][a as usize] += 1;
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouResult {
    pub miou: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Dataset-level IoU per class and their mean over classes with nonzero union.
pub fn miou(pred: &[Vec<u8>], gt: &[Vec<u8>], classes: usize) -> Result<MiouResult> {
    let m = confusion_matrix(pred, gt, classes)?;
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let tp = m[c][c];
            let fn_: u64 = m[c].iter().sum::<u64>() - tp;
            let fp: u64 = (0..classes).map(|r| m[r][c]).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::contract("no pixels to score"));
    }
    Ok(MiouResult {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

/// Per-class pixel frequencies over `masks`.
pub fn label_histogram(masks: &[Vec<u8>], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; classes];
    for m in masks {
        for &c in m {
            let slot = counts
                .get_mut(c as usize)
                .ok_or_else(|| Error::contract(format!("class index {c} out of range 0..{classes}")))?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::contract("label histogram of an empty mask set"));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// L1 distance between two class histograms, in `[0, 2]`.
pub fn histogram_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("histograms have {} and {} classes", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
