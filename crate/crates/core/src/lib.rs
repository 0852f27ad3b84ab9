//! Masked multi-shape vision transformer for image anomaly localization.
//!
//! Each image is split into square patches and (optionally) full-width row
//! stripes and full-height column stripes. Every shape is embedded and run
//! through its own transformer encoder whose self-attention has the diagonal
//! removed, so a token is rebuilt from the other tokens. Stripe embeddings are
//! cut into segments and attached to the square patches they contain, and a
//! shared MLP decoder reconstructs each square. The per-pixel reconstruction
//! error, smoothed with a Gaussian, is the anomaly map.

pub mod anomaly;
pub mod attention;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patching;
pub mod trainer;

pub use config::MetalConfig;
pub use error::{Error, Result};
pub use model::{MetalModel, ShapeCombo};
pub use patching::ImageTensor;
