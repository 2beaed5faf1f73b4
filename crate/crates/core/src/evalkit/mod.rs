//! Evaluation toolkit: dataset preprocessing, metrics, BD-rate and reports.

pub mod bdrate;
pub mod color;
pub mod dataset;
pub mod metrics;
pub mod report;

pub use bdrate::{bd_rate, RdCurve, RdPoint};
pub use color::{yuv420_to_rgb_bt709, Rgb8, Yuv420};
pub use dataset::{crop_dataset, ColorPipeline, CropRule, DatasetSpec};
pub use metrics::{bpp, container_bpp, psnr_frames, psnr_from_mse, psnr_rgb};
pub use report::{curve_from_records, emit_report, parse_rd_csv, write_rd_csv, RdRecord, Report};
