//! Mask-conditioned 3D diffusion: volumes, the cosine schedule, forward and
//! reverse processes, the U-Net noise predictor, training, metrics, data
//! handling and the downstream segmentation experiment.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod seg;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use rng::Rng;
pub use schedule::{cosine_schedule, Schedule};
pub use volume::{Dims, LabelVolume, Volume};
