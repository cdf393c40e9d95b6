//! Single-event-upset fault injection for binary16 diffusion-model weights.
//!
//! The crate flips individual bits of stored weights, runs a deterministic
//! toy latent-diffusion UNet with the corrupted parameters, scores the
//! generated images and aggregates the results over seeded campaigns.

pub mod campaign;
pub mod checkpoint;
pub mod config;
pub mod half16;
pub mod image;
pub mod injector;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod selector;

pub use campaign::{run_campaign, CampaignResult, CampaignRun, RunOptions};
pub use checkpoint::{CheckpointError, CheckpointStore, CheckpointView};
pub use config::{load_config, CampaignConfig, Metric, Target};
pub use half16::{BitField, BitPosition, Half16};
pub use image::Image;
pub use model::{DiffuserConfig, ModelError, ToyModel};
pub use selector::{BlockKind, LayerKind, MatrixRole, NamingScheme, TensorSelector, UnetTopology};
