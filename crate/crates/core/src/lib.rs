//! Autoregressive next-view prediction for multi-view diffusion, at a scale
//! that trains on a CPU.

pub mod arpipeline;
pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod gridops;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod poseplan;
pub mod recon3d;
pub mod seeding;
pub mod synthdata;

pub use error::{Error, Result};
