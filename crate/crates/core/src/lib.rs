//! Transmission scheduling for an energy-harvesting sensor over a two-state
//! Markov channel, where the transmitter may pay a small amount of energy to
//! sense the channel before deciding whether to send.
//!
//! * [`model`]: parameters, battery quanta and channel dynamics.
//! * [`bellman`]: belief grid and value iteration on the belief MDP.
//! * [`policy`]: policy maps, threshold detection and baseline policies.
//! * [`sim`]: Monte Carlo simulation and throughput sweeps.
//! * [`verify`]: structural checks and an independent finite-horizon oracle.
//! * [`io`], [`cli`]: CSV artifacts and the command-line front-end.

pub mod bellman;
pub mod cli;
pub mod error;
pub mod io;
pub mod model;
pub mod policy;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/value_iteration.md")]
    struct ValueIteration;
    #[doc = include_str!("../../../book/src/thresholds.md")]
    struct Thresholds;
    #[doc = include_str!("../../../book/src/simulation.md")]
    struct Simulation;
    #[doc = include_str!("../../../book/src/verification.md")]
    struct Verification;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
