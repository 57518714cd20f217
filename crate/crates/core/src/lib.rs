//! Long-tailed classification under domain shift.
//!
//! Distribution-calibrated classification, visual-semantic prototype
//! alignment, semantic-similarity-guided implicit feature augmentation and an
//! episodic meta-train/meta-test optimizer, together with a synthetic
//! long-tailed multi-domain benchmark and a leave-one-domain-out evaluation
//! protocol with open-class rejection.

pub mod banks;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mathcore;
pub mod meta;
pub mod model;

pub use error::{Error, Result};
