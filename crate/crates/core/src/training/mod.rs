//! GAN training loop, segmentation network and mixed real/synthetic datasets.

mod gan;
mod mix;
pub(crate) mod seg;

pub use gan::{
    metrics_csv, train_gan, GanOptimizers, GanTrainConfig, GanTrainOutcome, GanTrainer, RealBatch, StepMetrics,
    METRICS_HEADER,
};
pub use mix::{MixDataset, SegSample};
pub use seg::{predict, train_seg, SegConfig, SegModel};
