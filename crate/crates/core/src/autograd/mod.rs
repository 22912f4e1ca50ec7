//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every op records its output on a [`Tape`]; [`Tape::backward`] replays the
//! records in reverse. Ops reject non-finite results at the point they are
//! produced.

mod conv;
mod elementwise;
mod linalg;
mod nn;
mod reduce;
mod shape;
mod tape;

pub use conv::{conv_out_extent, ConvSpec};
pub use shape::concat;
pub use tape::{OpCounts, Tape, Var};
