//! High-order vision state-space U-Net for prostate histopathology
//! segmentation, plus the data pipeline, tissue-graph mask estimation and
//! evaluation harness around it.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod model;
pub mod error;
pub mod metrics;
pub mod selective_scan;
pub mod synthetic;
pub mod tissue_graph;
pub mod training;

pub use error::{Error, Result};
