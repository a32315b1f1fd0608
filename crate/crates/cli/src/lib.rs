//! File formats and subcommands behind the `ppc-uq` binary.

pub mod commands;
pub mod io;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PPC_UQ_THREADS";
