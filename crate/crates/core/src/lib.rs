pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod hsi;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod presets;
pub mod tensor;

pub use error::{Error, Result};

// The guide's snippets compile and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
