pub mod attacks;
pub mod cli;
pub mod error;
pub mod fixtures;
pub mod interp;
pub mod layout;
pub mod memenc;
pub mod mir;
pub mod noncebuf;
pub mod taint;
pub mod transform;
pub mod verify;

pub use error::{Error, Result};
