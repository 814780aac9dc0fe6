//! Safety-critical receding-horizon control of a differential-drive robot
//! through dynamic feedback linearization.
//!
//! The unicycle is extended with a speed integrator and mapped to two
//! double integrators, where a condensed MPC problem with discrete-time
//! control barrier function rows is solved by SQP at every sample.

// `!(a < b)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dfl;
pub mod error;
pub mod lti;
pub mod model;
pub mod mpc;
pub mod safety;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/linearization.md")]
    mod linearization {}
    #[doc = include_str!("../../../book/src/terminal.md")]
    mod terminal {}
    #[doc = include_str!("../../../book/src/barrier.md")]
    mod barrier {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
