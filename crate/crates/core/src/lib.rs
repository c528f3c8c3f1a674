pub mod cli;
pub mod error;
pub mod instance;
pub mod numeric;
pub mod optimize;
pub mod schedules;
pub mod spectrum;
pub mod statevec;

pub use error::{Error, Result};
