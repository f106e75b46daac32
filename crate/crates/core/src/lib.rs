//! Certified robustness of image classifiers against one-axis camera motion.
//!
//! A scene is a colored point cloud seen through a pinhole camera. Moving the
//! camera along one axis over `[-b, b]` changes the rendered image; the library
//! splits that range into partitions fine enough that every intermediate frame
//! is close to a partition frame, smooths the classifier with Gaussian pixel
//! noise at each partition frame, and certifies when the worst adjacent-frame
//! distance stays below every smoothing radius.

pub mod certify;
pub mod classifier;
pub mod cli;
pub mod error;
pub mod formats;
pub mod geometry;
pub mod intervals;
pub mod rasterizer;
pub mod scenes;
pub mod smoothing;

pub use error::{PwsError, Result};
pub use geometry::{Axis, CameraModel, MotionSpec, MotionValue, PixelPosition, Point3};
pub use rasterizer::{ColoredPointCloud, Image};
