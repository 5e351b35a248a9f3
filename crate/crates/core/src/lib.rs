//! Foundation-model pipeline for smart-home binary sensor event streams.
//!
//! Raw events become windows, windows become per-event embeddings (attribute
//! fusion) and then contextualized embeddings (a transformer over the
//! window). Both encoders are pretrained with masking-based InfoNCE and
//! adapted to activity recognition and next-k event forecasting.

pub mod context_encoder;
pub mod downstream;
pub mod embedding;
pub mod error;
pub mod event;
pub mod event_encoder;
pub mod evaluation;
pub mod ingestion;
pub mod model;
pub mod pretraining;
pub mod segmentation;

pub use error::{CoreError, Result};
