// Each test binary uses a different subset.
#![allow(dead_code, unused_imports, clippy::neg_cmp_op_on_partial_ord)]

mod classifier;
mod closed_loop;
mod cwt;
mod dosing;
mod pump;

pub use classifier::*;
pub use closed_loop::*;
pub use cwt::*;
pub use dosing::*;
pub use pump::*;
