//! Dense backward motion flows built from sparse motion anchors with local
//! affine models, regularized by a latent root anchor (DAM) and by a layer of
//! latent intermediate anchors (HDAM), and fitted per image pair by
//! adaptive-moment gradient descent.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: normalized coordinates and 2-D affine maps.
//! - [`flow`]: anchor-local flows, mask blending, mask normalization.
//! - [`warp`]: bilinear backward warping and image pyramids.
//! - [`structure`]: root/intermediate prior flows and the DAM/HDAM losses.
//! - [`losses`]: reconstruction, equivariance and weighted totals.
//! - [`fit`]: per-pair parameter fitting and gradient checking.
//! - [`synth`]: synthetic articulated scenes with exact ground truth.
//! - [`metrics`]: L1, AKD and endpoint error.
//! - [`io`]: binary flow/mask formats, PNM images, JSON documents.
//! - [`cli`]: the `damflow` command-line tool.

pub mod cli;
pub mod error;
pub mod fit;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod structure;
pub mod synth;
pub mod warp;

pub(crate) mod numeric;

pub use error::{DamError, Result};
pub use flow::{AnchorSet, FlowField, LatentAnchor, MaskStack, MotionAnchor};
pub use geometry::{Affine2, GridSpec, Mat2, Point2};
pub use warp::ImageGrid;
