pub mod bench;
pub mod config;
pub mod error;
pub mod lang;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod seed;
pub mod steering;
pub mod worldsim;

pub use error::{Error, Result};
