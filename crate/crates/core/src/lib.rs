//! Actor-critic training with simplicial embedding heads, C51 critics and
//! representation diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agents;
pub mod diagnostics;
pub mod diffcore;
pub mod distrl;
pub mod envs;
pub mod error;
pub mod harness;
pub mod heads;
pub mod networks;
pub mod par;

pub use error::{Error, Result};
