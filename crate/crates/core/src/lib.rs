//! Mechanics of layered transparent image generation at desk scale.
//!
//! - [`layout`]: anonymous region layouts, their JSON wire format and box geometry
//! - [`transparency`]: transparency encoding, alpha compositing, synthetic layered data
//! - [`latent`]: toy latent encoder, token packing and `(layer, row, col)` ids
//! - [`rope`]: 1D/3D rotary position embeddings
//! - [`attention`]: rotary attention, the three layer-interaction schemes, cost model
//! - [`decoder`]: trainable toy multi-layer RGBA decoder with exact gradients
//! - [`planner`]: rule-based layout planner
//! - [`metrics`]: PSNR and SSIM
//! - [`io`]: PNG and manifest I/O

pub mod attention;
pub mod decoder;
pub mod error;
pub mod io;
pub mod latent;
pub mod layout;
pub mod metrics;
pub mod planner;
pub mod raster;
pub mod rope;
pub mod transparency;

pub use error::{Error, Result};
pub use raster::Raster;
