//! PAC-Bayesian generalization bounds for linear time-invariant predictors
//! learned from a single trajectory.

pub mod bounds;
pub mod cli;
pub mod constants;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod lti;
pub mod oracle;
pub mod posterior;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/systems.md")]
    mod systems {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/constants.md")]
    mod constants {}
    #[doc = include_str!("../../../book/src/bounds.md")]
    mod bounds {}
    #[doc = include_str!("../../../book/src/posterior.md")]
    mod posterior {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
