pub mod error;
pub mod fmbsd;
pub mod graph;
pub mod harness;
pub mod m2cpc;
pub mod numkit;
pub mod sgws;

pub use error::{Error, Result};
