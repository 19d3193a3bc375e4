//! Checks shared by the focused test targets and the acceptance run.

#![allow(dead_code)]

pub mod gradcheck;
pub mod invariants;
pub mod oracles;
