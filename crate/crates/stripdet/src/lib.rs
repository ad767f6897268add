//! Lightweight pillar-based 3D object detection with strip attention,
//! built from scratch: tensor core with reverse-mode gradients, the
//! primitive neural ops, the attention blocks, a three-stage backbone with
//! an anchor head, a static parameter/MAC analyzer, and the file formats
//! and CLI around them.

pub mod analyzer;
pub mod attention;
pub mod backbone;
pub mod boxes;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod kitti;
pub mod losses;
pub mod model;
pub mod ops;
pub mod pillars;
pub mod real;
pub mod runconfig;
pub mod seed;
pub mod synth;
pub mod tape;
pub mod targets;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
