//! Synthetic data, on-disk formats and configuration files.
//!
//! All binary formats are little-endian:
//!
//! * SFTK datasets: `"SFTK"`, version, example count, `N`, `c` (u32 each), a
//!   has-labels byte, then `count·N·c` f32 values and, if labeled, `count`
//!   u32 labels. Channel statistics use the same layout with `count = 2`,
//!   `N = 1` (rows `mu`, `sigma`).
//! * SFCK checkpoints: `"SFCK"`, version, config text (u32 length + UTF-8),
//!   u32 section count, sections of (u32 name length, name, u32 rank, rank
//!   u32 dims, f32 payload), then a CRC32 of every preceding byte.

mod artifact;
mod config;
mod csv;
mod format;
mod synth;

pub use artifact::{Compressor, FlowArtifact, SrcArtifact};
pub use config::{format_noise, parse_noise, PipelineConfig};
pub use csv::{metrics_csv, nll_csv, noise_report_csv, spectrum_csv, verify_csv};
pub use format::{
    read_checkpoint, read_dataset, read_stats, write_checkpoint, write_dataset, write_stats, write_text_atomic,
    Checkpoint, Section, CHECKPOINT_VERSION, DATASET_VERSION,
};
pub use synth::{gen_class_mixture, gen_low_rank, mixture_means, sample_mixture_class, Dataset, MIXTURE_STD};
