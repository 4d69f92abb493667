//! Logit-bias watermarking for language models: generation, detection,
//! intensity calibration and downstream task evaluation.

pub mod analysis;
pub mod bundled;
pub mod calibrate;
pub mod corpus;
pub mod detect;
pub mod error;
pub mod hashing;
pub mod lm;
pub mod pipeline;
pub mod taskeval;
pub mod watermark;

pub use corpus::{TokenId, TokenSequence, Vocabulary};
pub use error::{Error, Result};
pub use lm::{LogitSource, LogitTransform, LogitVector, NGramConfig, NGramModel};
pub use watermark::{Scheme, WatermarkSpec, Watermarker};
