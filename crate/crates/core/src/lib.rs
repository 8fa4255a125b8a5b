//! Zone-of-proximal-development analytics for in-context learning.
//!
//! The crate measures which queries a language model solves directly, only
//! with demonstrations, or not at all; builds demonstration pools and greedy
//! likelihood-maximising demonstration sequences; fits item-response models
//! that predict those zones for unseen queries; and turns the predictions
//! into selective-ICL routing policies and curriculum schedules.

pub mod curriculum;
pub mod data;
pub mod error;
pub mod gateway;
pub mod irt;
pub mod oracle;
pub mod prompt;
pub mod retrieval;
pub mod rng;
pub mod scoring;
pub mod selective;
pub mod zones;

pub use error::{Error, Result};
