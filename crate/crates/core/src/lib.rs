//! Self-supervised keypoint detection and description: a two-headed
//! convolutional network trained from homographically warped image pairs,
//! plus an evaluation harness for any detector/descriptor pair.

pub mod augment;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod keypoints;
pub mod losses;
pub mod matching;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Homography, Point, PointSet};
pub use grid::{Heatmap, Image, Tensor3};
