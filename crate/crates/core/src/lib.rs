//! Coverage-guided fuzzing of tensor computation graphs.
//!
//! Graphs are grown and mutated under three layer-level coverage criteria,
//! executed on several backends, and compared with a crash/NaN/D_MAD oracle.
//! [`scheduler::run_campaign`] drives the whole loop.
//!
//! ```
//! use layerfuzz::registry::Registry;
//! use layerfuzz::scheduler::{run_campaign, CampaignConfig, RunOptions};
//!
//! let config = CampaignConfig {
//!     max_iterations: Some(50),
//!     ..CampaignConfig::default()
//! };
//! let result = run_campaign(&config, &Registry::builtin(), &RunOptions::default()).unwrap();
//! assert_eq!(result.iterations, 50);
//! ```

pub mod coverage;
pub mod difftest;
pub mod dtype;
pub mod generate;
pub mod graph;
pub mod mutation;
pub mod registry;
pub mod rng;
pub mod scheduler;
pub mod synthesis;
pub mod tensor;
pub mod zoo;

// Book chapters, so their code blocks run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/campaign.md")]
    mod campaign {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/coverage.md")]
    mod coverage {}
    #[doc = include_str!("../../../book/src/mutation.md")]
    mod mutation {}
    #[doc = include_str!("../../../book/src/synthesis.md")]
    mod synthesis {}
    #[doc = include_str!("../../../book/src/scheduling.md")]
    mod scheduling {}
    #[doc = include_str!("../../../book/src/difftest.md")]
    mod difftest {}
    #[doc = include_str!("../../../book/src/bridge.md")]
    mod bridge {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
