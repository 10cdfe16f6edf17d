//! Hierarchical answerability detection with answer/refusal generation,
//! trained by supervised fine-tuning followed by reward-guided,
//! KL-regularized policy optimization.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
