//! Two-stage training: the compressor first, then the flow on frozen
//! compressor outputs.

mod ema;
mod optim;
mod pipeline;
mod report;
mod schedule;

pub use ema::{ema_update, EmaState};
pub use optim::{optimizer_step, AdamW, OptimizerState};
pub use pipeline::{compute_compact_stats, train_flow, train_src, train_src_from, CompactPath, FlowData, MetricsRow};
pub use report::{noise_schedule_report, NoiseReport, NoiseReportRow};
pub use schedule::lr_schedule;

use crate::error::{Error, Result};
use crate::tokenfield::NoiseSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub cosine_start_epoch: usize,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub noise: NoiseSpec,
}

impl TrainConfig {
    /// Compressor stage at full scale: 16 epochs, batch 256, lr 2e-4, cosine
    /// after one warmup epoch, per-example noise up to 0.8.
    pub fn src_full_scale() -> Self {
        Self {
            epochs: 16,
            batch_size: 256,
            lr: 2e-4,
            weight_decay: 0.0,
            warmup_epochs: 1,
            cosine_start_epoch: 1,
            ema_decay: 0.9999,
            grad_clip: 1.0,
            seed: 0,
            noise: NoiseSpec::PerSampleUniform(0.8),
        }
    }

    /// Flow stage at full scale: 320 epochs, batch 256, lr 1e-4, cosine from
    /// epoch 160, EMA 0.9999, constant noise 0.4.
    pub fn flow_full_scale() -> Self {
        Self {
            epochs: 320,
            batch_size: 256,
            lr: 1e-4,
            weight_decay: 0.0,
            warmup_epochs: 0,
            cosine_start_epoch: 160,
            ema_decay: 0.9999,
            grad_clip: 1.0,
            seed: 0,
            noise: NoiseSpec::Constant(0.4),
        }
    }

    /// Same schedule shape with a small batch (about 2k steps on 4k examples).
    pub fn src_desk() -> Self {
        Self { batch_size: 32, lr: 1e-3, ..Self::src_full_scale() }
    }

    /// Same schedule shape with a small batch (about 20k steps on 4k
    /// examples) and a shorter EMA horizon.
    pub fn flow_desk() -> Self {
        Self { batch_size: 64, lr: 5e-4, ema_decay: 0.999, ..Self::flow_full_scale() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.cosine_start_epoch > self.epochs || self.warmup_epochs > self.epochs {
            return bad("warmup/cosine start beyond the last epoch");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        self.noise.validate()
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { weight_decay: self.weight_decay, grad_clip: self.grad_clip, ..AdamW::default() }
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }
}
