//! Skill-gated synthetic POMDP with a small softmax policy and a
//! difficulty-routed, tier-tailored RL trainer.

pub mod env;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod plot;
pub mod policy;
pub mod prior;
pub mod rollout;
pub mod router;
pub mod skillbank;
pub mod trainer;

pub use error::{Error, Result};
