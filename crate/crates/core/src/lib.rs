//! Probabilistic multi-step forecasting of one-way packet delay.
//!
//! Packets become learned tokens ([`tokenizer`]), a backbone ([`models`])
//! maps a window of tokens to Gaussian mixture parameters ([`mdn`]), and
//! [`train`] fits them by negative log-likelihood on windows cut from real or
//! simulated traces ([`sim`], [`dataset`]). [`eval`] scores forecasts and
//! [`experiment`] ties the stages together.
//!
//! ```
//! use owdf::mdn::MixtureParams;
//!
//! let m = MixtureParams::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
//! assert_eq!(m.mean(), 0.0);
//! assert!((m.cdf(0.0) - 0.5).abs() < 1e-12);
//! ```

pub mod dataset;
pub mod diff;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mdn;
pub mod models;
pub mod sim;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};

// The guide's chapters compile and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/windows.md")]
    mod windows {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/backbones.md")]
    mod backbones {}
    #[doc = include_str!("../../../book/src/mixture.md")]
    mod mixture {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
