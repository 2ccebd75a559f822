//! Data-driven two-degrees-of-freedom control toolkit.

pub mod error;
pub mod certify;
pub mod nic;
pub mod pipeline;
pub mod signals;
pub mod simloop;
pub mod sysid;
pub mod vrft;

pub use error::{Error, Result};
