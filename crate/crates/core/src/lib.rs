//! Prompt-controllable singing voice synthesis at desk scale.

pub mod audio;
pub mod codec;
pub mod error;
pub mod experiment;
pub mod features;
pub mod fsutil;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pitch;
pub mod prompt;
pub mod prompt_encoder;
pub mod toy;
pub mod transformer;

pub use error::{Error, Result};
