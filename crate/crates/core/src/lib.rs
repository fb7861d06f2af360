//! Event-camera human-pose data path.
//!
//! Events are accumulated into a rasterized 5-D point cloud per time window
//! ([`raster`]), optionally sharpened by Sobel edge weighting of the polarity
//! channel ([`edge`]), grouped into temporal slice tokens and refined by a
//! small residual dilated convolution ([`temporal`]), and pushed through a
//! PointNet-style network with coordinate-classification heads
//! ([`micronet`]). Two views are fused by linear triangulation and scored
//! with the mean per-joint position error ([`geometry`]).

pub mod edge;
pub mod error;
pub mod event;
pub mod geometry;
pub mod micronet;
pub mod raster;
pub mod real;
pub mod synth;
pub mod temporal;
pub mod weights;

pub use error::{Error, Result};
pub use event::{Event, EventStream, TimeWindow, WindowMode, WindowSpan};
pub use raster::{RasterCloud, RasterPoint, VoxelCell, VoxelGrid};

/// DAVIS346 resolution.
pub const DEFAULT_SENSOR_WIDTH: u16 = 346;
pub const DEFAULT_SENSOR_HEIGHT: u16 = 260;

/// Temporal slices per window.
pub const DEFAULT_SLICES: usize = 4;

/// Points fed to the network per sample.
pub const DEFAULT_SAMPLE_POINTS: usize = 2048;

/// Events per count-based window.
pub const DEFAULT_WINDOW_EVENTS: usize = 7500;
