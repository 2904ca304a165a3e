pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gan;
pub mod ka;
pub mod macs;
pub mod net;
pub mod prune;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
