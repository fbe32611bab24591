pub mod autodiff;
pub mod config;
pub mod data;
mod error;
pub mod init;
pub mod io;
pub mod meta_ad;
pub mod metrics;
pub mod scoring;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};

// The guide's listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/artifacts.md")]
    mod artifacts {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
