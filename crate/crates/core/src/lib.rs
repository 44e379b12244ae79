//! Cul-de-sac navigation benchmark: a grid world with dead-end pockets, an
//! optimistic A* expert, behavior-cloned CNN, LSTM and value-iteration
//! policies on a from-scratch autodiff tape, a DQN baseline, and the rollout
//! metrics that compare them.
//!
//! The guide in `book/` walks through each part with runnable examples.

pub mod cli;
pub mod error;
pub mod eval;
pub mod expert;
pub mod gridworld;
pub mod models;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/gridworld.md")]
    mod gridworld {}
    #[doc = include_str!("../../../book/src/expert.md")]
    mod expert {}
    #[doc = include_str!("../../../book/src/aliasing.md")]
    mod aliasing {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/vin.md")]
    mod vin {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
