//! Command-line front end for `phaed-core`: corpus files, checkpoints and the
//! train / eval / generate / chat / attn / stats commands.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod run;

pub use error::{CliError, CliResult};
pub use phaed_core;
pub use run::{run, Command, Invocation};
