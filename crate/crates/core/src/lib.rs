//! Depth-aware spatial cross-attention (DA-SCA) and depth-aware negative
//! suppression (DNS) for camera-only BEV detection, at desk scale.
//!
//! The crate contains the geometric pieces (pinhole cameras, object rays,
//! BEV grid), the sine positional encoding of `(u, v, d)`, the attention layer
//! with exact gradients, the depth head, the DNS loss, a synthetic
//! multi-camera scene generator, nuScenes-style metrics, and a training
//! harness tying them together.

pub mod attention;
pub mod depth_head;
pub mod dns;
pub mod encoding;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod params;
pub mod scene_sim;

pub use error::{Error, Result};
