//! Dense arrays and reverse-mode differentiation.
//!
//! [`DenseArray`] is a plain row-major value. A [`Tape`] records operations
//! on arrays it owns, addressed by [`Var`] handles, and replays them in
//! reverse in [`Tape::backward`].

mod array;
mod tape;

pub use array::DenseArray;
pub use tape::{Tape, Var};
