//! File formats, the out-of-process guidance client, run configuration and
//! run-directory output around `hoi-core`.

pub mod config;
pub mod error;
pub mod image_io;
pub mod provider;
pub mod rig;
pub mod run;
pub mod vxf;

pub use error::{Error, Result};
pub use hoi_core;
