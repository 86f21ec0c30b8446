//! Joint multi-sequence cardiac MR registration, myocardium extraction and
//! myocardial pathology segmentation.

pub mod clinquant;
pub mod datapipe;
pub mod error;
pub mod label;
pub mod losses;
pub mod metrics;
pub mod netarch;
pub mod tps;
pub mod trainer;

pub use error::{Error, Result};
pub use label::{Class, LabelMask};
