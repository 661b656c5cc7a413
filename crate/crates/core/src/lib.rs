//! Surfel-based simultaneous tracking and reconstruction of dynamic RGB-D
//! scenes.
//!
//! A scene is kept as a set of surfels deformed by an embedded deformation
//! graph whose edge regularization depends on node semantic labels. Every
//! frame the pipeline
//!
//! 1. renders the previous geometry ([`render`]),
//! 2. registers measurement pixels to geometry surfels through optical flow
//!    and solves for per-node rigid transforms ([`align`]),
//! 3. warps the geometry with dual-quaternion blending ([`warpfield`]),
//! 4. fuses, appends and removes surfels and grows the graph ([`fusion`]).
//!
//! Inputs come from on-disk sequences or the synthetic scene generator in
//! [`measurement`]; [`pipeline`] wires everything together.

pub mod align;
pub mod fusion;
pub mod grid;
pub mod measurement;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod warpfield;

pub use grid::Grid;
