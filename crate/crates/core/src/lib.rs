//! Latent-space image watermarking.
//!
//! Trainable, zero-initialized embedding modules are injected at the tap
//! points of a frozen staged decoder so that decoding a latent also embeds a
//! k-bit message. A CNN extractor recovers the bits after image attacks, and
//! soft matching with exact binomial false-positive control turns the bits
//! into detection and attribution decisions.

pub mod attacks;
pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod corpus;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod grid;
pub mod message;
pub mod matching;
pub mod metrics;
pub mod perceptual;
pub mod trainer;
pub mod nn;

pub use config::WatermarkConfig;
pub use error::{Error, Result};
pub use grid::{ImageGrid, ImageSource, LatentGrid};
pub use message::BitMessage;
pub use attacks::{AttackKind, AttackSpec};
pub use autoencoder::{Autoencoder, AutoencoderConfig};
pub use embedder::EmbedderStack;
pub use eval::{EvalMode, EvalReport};
pub use extractor::Extractor;
pub use matching::MatchReport;
pub use trainer::WatermarkModels;
