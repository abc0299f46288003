//! Vocabulary-matching inversion of decoder-only transformer hidden states,
//! including sequence-, hidden- and factorized-2D-permuted states, with the
//! noising defenses and numerical checks of the supporting theory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod capture;
mod clock;
pub mod data;
pub mod defense;
pub mod embedrec;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod permutation;
pub mod theory;

pub use error::{Error, Result};
