//! Flexible optimization: per-user decision intervals for shared convex
//! resource problems.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(a > b)` deliberately rejects NaN

pub mod error;
pub mod flexo;
pub mod harness;
pub mod problem;
pub mod response;
pub mod robust;
pub mod saddle;

pub use error::{FlexError, Result};
