//! Preference post-training of a toy diffusion model, comparing the
//! Diffusion-DPO baseline with Inversion-DPO, where the posterior over
//! denoising trajectories is taken from deterministic DDIM inversion.
//!
//! Everything runs on 2-D Gaussian-mixture data with a small MLP noise
//! predictor and a self-contained numeric substrate.

pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod dpo;
pub mod error;
pub mod experiment;
pub mod inversion;
pub mod numerics;
pub mod par;
pub mod preference;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
