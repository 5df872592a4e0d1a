//! Masked discrete diffusion on a quantized latent grid, with exact
//! small-scale posteriors for verification and a measurement-guided sampler.

pub mod check;
pub mod codebook;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod image;
pub mod measure;
pub mod opt;
pub mod oracle;
pub mod pgm;
pub mod sampler;
pub mod schedule;
pub mod state;
pub mod table;
pub mod world;

pub use codebook::{Codebook, DenseCodebook, Quantizer, MAX_BINARY_DIM};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use image::Image;
pub use measure::{Kernel, LossKind, MeasurementSpec, Operator};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use state::TokenState;
pub use table::{LogitTable, ProbTable, PROB_FLOOR};
