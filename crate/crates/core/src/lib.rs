//! One-shot text-to-image personalization on a miniature diffusion stack.

pub mod analysis;
pub mod assets;
pub mod augment;
pub mod config;
pub mod dataset;
pub mod autograd;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod img;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod persistence;
pub mod pretrain;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod world;

pub use diffusion::{NoisePredictor, NoiseSchedule, ScheduleKind};
pub use error::{Error, Result};
pub use img::ImageTensor;
pub use params::ParamStore;
pub use tensor::Tensor;
