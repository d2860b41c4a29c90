//! Single-pass continual learning with sparse experience replay.
//!
//! Tasks arrive as one stream of mini-batches. Learners see each batch once
//! and may revisit earlier data only through an [`memory::EpisodicMemory`]
//! that is read on a fixed, sparse schedule ([`episodes::ReplaySchedule`]).
//! [`learners::train`] runs any of the meta-learners or baselines;
//! [`experiment::run_experiment`] drives whole config files.

pub mod diagnostics;
pub mod episodes;
pub mod error;
pub mod experiment;
pub mod learners;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod stream;
pub mod verify;

pub use error::{Error, Result};

// Book chapters, so `cargo test --doc` runs their snippets.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    pub mod schedule {}
    #[doc = include_str!("../../../book/src/episodes.md")]
    pub mod episodes {}
    #[doc = include_str!("../../../book/src/learners.md")]
    pub mod learners {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    pub mod gradients {}
}
