//! Joint low-light enhancement and motion deblurring guided by
//! vision-language degradation heatmaps.
//!
//! The guide in `book/` walks through each stage; its code listings run as
//! doctests of this crate.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod error;
pub mod fusion;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod resize;
pub mod restore;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/synthesis.md")]
    mod synthesis {}
    #[doc = include_str!("../../../book/src/heatmaps.md")]
    mod heatmaps {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
