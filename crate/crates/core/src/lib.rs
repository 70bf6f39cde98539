// SPDX-License-Identifier: MIT OR Apache-2.0

//! Locate-then-edit knowledge editing on a toy transformer.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration and
//! the command line live in the companion `kedit` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod edit;
pub mod experiment;
pub mod hash;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trace;
pub mod train;
pub mod world;

pub use numerics::Matrix;
