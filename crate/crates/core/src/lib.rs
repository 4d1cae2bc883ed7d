//! Sequential synthetic difference-in-differences for staggered adoption.

pub mod balancing;
pub mod dgp;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod oracle;
pub mod panel;
pub mod placebo;
pub mod sequential;

pub use error::{Error, Result};
