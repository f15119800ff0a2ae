pub mod cli;
pub mod control;
pub mod devices;
pub mod error;
pub mod network;
pub mod oracle;
pub mod par;
pub mod profiles;
pub mod services;
pub mod sim;

pub use error::{Error, Result};
