//! One-stage mutual gaze detection.
//!
//! A transformer encoder-decoder turns an image into a fixed set of
//! (head, head, gaze) triples. Training matches predictions to the padded
//! ground truth with the Hungarian method and optimizes class and box terms
//! jointly; evaluation reports the two-class mAP.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod instances;
pub mod losses;
pub mod matcher;
pub mod model;
pub mod pipeline;

pub use error::{MgtrError, Result};
