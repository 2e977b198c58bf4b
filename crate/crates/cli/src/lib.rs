//! Command line and HTTP front end for the eyeglasses editor.

pub mod commands;
pub mod server;

pub use commands::{exit_code, run, Cli};
