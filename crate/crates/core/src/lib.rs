//! Audiovisual masked autoencoders: tokenization, masked pretraining with
//! several fusion strategies, and finetuning/probing of the pretrained
//! encoders.

pub mod audio;
pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod finetune;
pub mod masking;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod tokens;
pub mod train;
pub mod video;

pub use error::{Error, Result};
