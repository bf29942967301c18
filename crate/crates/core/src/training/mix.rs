use crate::error::{Error, Result};
use crate::gan::GeneratedSample;
use crate::scenegen::SceneSample;
use crate::tensor::Tensor;

/// Image with hard per-pixel class indices, as consumed by the segmenter.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `[3, H, W]` in `[-1, 1]`.
    pub image: Tensor<f32>,
    /// Row-major `H*W` class indices.
    pub labels: Vec<u8>,
}

impl From<&SceneSample> for SegSample {
    fn from(s: &SceneSample) -> Self {
        Self {
            image: s.image.clone(),
            labels: s.mask.clone(),
        }
    }
}

impl From<&GeneratedSample<f32>> for SegSample {
    /// Soft labels are hardened by argmax.
    fn from(s: &GeneratedSample<f32>) -> Self {
        Self {
            image: s.image.clone(),
            labels: s.hard_mask(),
        }
    }
}

/// Real scenes plus exactly `ratio` synthetic samples per real one.
#[derive(Clone, Debug)]
pub struct MixDataset {
    pub real: Vec<SceneSample>,
    pub synthetic: Vec<GeneratedSample<f32>>,
    pub ratio: usize,
}

impl MixDataset {
    pub fn new(real: Vec<SceneSample>, synthetic: Vec<GeneratedSample<f32>>, ratio: usize) -> Result<Self> {
        if synthetic.len() != ratio * real.len() {
            return Err(Error::contract(format!(
                "ratio {ratio} with {} real samples needs {} synthetic, got {}",
                real.len(),
                ratio * real.len(),
                synthetic.len()
            )));
        }
        let res = real.first().map(|s| s.resolution);
        let same = real.iter().all(|s| Some(s.resolution) == res)
            && synthetic.iter().all(|s| Some(s.image.shape()[1]) == res && Some(s.image.shape()[2]) == res);
        if !same {
            return Err(Error::contract("mixed resolutions in segmentation dataset"));
        }
        Ok(Self { real, synthetic, ratio })
    }

    /// Only real samples.
    pub fn real_only(real: Vec<SceneSample>) -> Result<Self> {
        Self::new(real, Vec::new(), 0)
    }

    pub fn len(&self) -> usize {
        self.real.len() + self.synthetic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Real samples first, then synthetic.
    pub fn samples(&self) -> Vec<SegSample> {
        self.real
            .iter()
            .map(SegSample::from)
            .chain(self.synthetic.iter().map(SegSample::from))
            .collect()
    }
}
