//! ID-free multimodal token representations for recommenders.
//!
//! Items are described by discrete token ids obtained from product
//! quantization of their modality features; shared trainable token
//! embedding tables plus a Token Cross Network replace the per-item ID
//! embedding table. Backbones (BPR-MF, LightGCN, VBPR) train end-to-end
//! with the BPR objective and are evaluated by full ranking.

pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod kmeans;
pub mod quantizer;
pub mod synthetic;
pub mod tcn;
pub mod token_store;
pub mod trainer;

pub use error::{MotorError, Result};
