//! Rate-distortion training and numerical verification.

pub mod gradcheck;
pub mod loss;
pub mod stage;
pub mod synth;

pub use loss::{rd_loss, rd_loss_var, RdLossBreakdown};
pub use stage::{run_stage, ClipSource, StageConfig, StageReport, TrainOptions, Trainer};
pub use synth::{synth_clip, SynthConfig};
