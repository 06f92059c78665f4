//! Executable checks: CSLA/GR training equivalence, structural conversion
//! and the identity-variance study.

mod conversion;
mod equivalence;
mod variance;

pub use conversion::*;
pub use equivalence::*;
pub use variance::*;
