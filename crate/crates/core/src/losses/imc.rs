use super::quality::luminance;
use crate::autodiff::{empty_column_mass, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Conditional distribution of binned pixel luminance given the class label.
///
/// `table` is `[bins, classes]` row-major; column `j` holds `P(p_i | l_j)`
/// over the luminance bins and sums to one. Columns with no label mass in the
/// estimating batch are uniform and flagged in `empty`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondPixelLabelDist<T> {
    pub bins: usize,
    pub classes: usize,
    pub table: Tensor<T>,
    pub ema_decay: f64,
    pub empty: Vec<bool>,
}

impl<T: Scalar> CondPixelLabelDist<T> {
    pub fn uniform(bins: usize, classes: usize, ema_decay: f64) -> Self {
        Self {
            bins,
            classes,
            table: Tensor::full(&[bins, classes], T::one() / T::from_usize_lossy(bins)),
            ema_decay,
            empty: vec![true; classes],
        }
    }

    pub fn column(&self, class: usize) -> Vec<T> {
        (0..self.bins).map(|b| self.table.data()[b * self.classes + class]).collect()
    }

    pub fn column_sums(&self) -> Vec<T> {
        (0..self.classes).map(|c| self.column(c).into_iter().sum()).collect()
    }
}

/// Graph form of the estimate: `[n, 3, h, w]` images in `[-1, 1]` and
/// `[n, c, h, w]` per-pixel label distributions to a `[bins, c]` table.
///
/// Differentiable in both the pixel values and the label weights.
pub fn cond_dist_graph<T: Scalar>(g: &mut Graph<T>, images: Var, labels: Var, bins: usize) -> Result<Var> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::dim("cond_dist", &s, g.shape(labels)));
    }
    let lum = luminance(g, images)?;
    let lum = g.reshape(lum, &[s[0], s[2], s[3]])?;
    let joint = g.soft_histogram(lum, labels, bins)?;
    g.normalize_columns(joint)
}

/// Estimates the conditional table from paired `[3, H, W]` images and `[C, H, W]` label planes.
pub fn estimate_cond_dist<T: Scalar>(
    images: &[Tensor<T>],
    masks: &[Tensor<T>],
    bins: usize,
    ema_decay: f64,
) -> Result<CondPixelLabelDist<T>> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(Error::contract(format!(
            "need matching non-empty batches, got {} images and {} masks",
            images.len(),
            masks.len()
        )));
    }
    let is = images[0].shape().to_vec();
    let ms = masks[0].shape().to_vec();
    if is.len() != 3 || ms.len() != 3 || is[0] != 3 || is[1..] != ms[1..] {
        return Err(Error::dim("estimate_cond_dist", &is, &ms));
    }
    let n = images.len();
    let mut g = Graph::new();
    let stack = |ts: &[Tensor<T>], shape: &[usize]| -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(n * ts[0].len());
        for t in ts {
            if t.shape() != shape {
                return Err(Error::dim("estimate_cond_dist", shape, t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let mut full = vec![n];
        full.extend_from_slice(shape);
        Tensor::new(&full, data)
    };
    let x = g.constant(stack(images, &is)?)?;
    let y = g.constant(stack(masks, &ms)?)?;
    let lum = luminance(&mut g, x)?;
    let lum = g.reshape(lum, &[n, is[1], is[2]])?;
    let joint = g.soft_histogram(lum, y, bins)?;
    let classes = ms[0];
    let mass: Vec<T> = (0..classes)
        .map(|c| (0..bins).map(|b| g.data(joint)[b * classes + c]).sum())
        .collect();
    let table = g.normalize_columns(joint)?;
    Ok(CondPixelLabelDist {
        bins,
        classes,
        table: g.value(table).clone(),
        ema_decay,
        empty: mass.iter().map(|&m| m <= empty_column_mass()).collect(),
    })
}

/// `decay * state + (1 - decay) * batch`, column-renormalized.
///
/// Columns the batch did not observe keep their state; a state column that has
/// never been observed takes the batch column directly.
pub fn ema_update<T: Scalar>(
    state: &CondPixelLabelDist<T>,
    batch: &CondPixelLabelDist<T>,
) -> Result<CondPixelLabelDist<T>> {
    if state.bins != batch.bins || state.classes != batch.classes {
        return Err(Error::dim(
            "ema_update",
            &[state.bins, state.classes],
            &[batch.bins, batch.classes],
        ));
    }
    let (bins, classes) = (state.bins, state.classes);
    let d = T::lit(state.ema_decay);
    let mut out = state.table.clone();
    for c in 0..classes {
        if batch.empty[c] {
            continue;
        }
        let (keep, take) = if state.empty[c] { (T::zero(), T::one()) } else { (d, T::one() - d) };
        let mut sum = T::zero();
        for b in 0..bins {
            let i = b * classes + c;
            let v = keep * state.table.data()[i] + take * batch.table.data()[i];
            out.data_mut()[i] = v;
            sum += v;
        }
        for b in 0..bins {
            out.data_mut()[b * classes + c] /= sum;
        }
    }
    Ok(CondPixelLabelDist {
        bins,
        classes,
        table: out,
        ema_decay: state.ema_decay,
        empty: state.empty.iter().zip(&batch.empty).map(|(&a, &b)| a && b).collect(),
    })
}

/// Mean absolute difference between two `[bins, classes]` tables.
pub fn loss_imc<T: Scalar>(g: &mut Graph<T>, p_real: Var, p_gen: Var) -> Result<Var> {
    if g.shape(p_real) != g.shape(p_gen) {
        return Err(Error::dim("loss_imc", g.shape(p_real), g.shape(p_gen)));
    }
    g.mae(p_real, p_gen)
}

pub fn loss_imc_value<T: Scalar>(p_real: &CondPixelLabelDist<T>, p_gen: &CondPixelLabelDist<T>) -> Result<T> {
    let mut g = Graph::new();
    let a = g.constant(p_real.table.clone())?;
    let b = g.constant(p_gen.table.clone())?;
    let l = loss_imc(&mut g, a, b)?;
    Ok(g.data(l)[0])
}
