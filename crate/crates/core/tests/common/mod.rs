//! Shared oracles for integration tests. Kept independent from the library
//! code paths they check.
#![allow(dead_code)]

pub mod gradcheck;
pub mod shrink;

pub use shrink::shrink_equivalence_gap;
