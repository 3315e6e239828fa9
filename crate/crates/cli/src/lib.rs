//! Library surface of the `lite` command-line tool: configuration, the LTEN
//! tensor container, CSV reports, worker pools, and the command bodies.

pub mod commands;
pub mod config;
pub mod exec;
pub mod lten;
pub mod report;

/// Sub-stream salts for seed derivation.
pub const MODEL_SALT: u64 = 0x4d4f_4445;
pub const EVAL_SALT: u64 = 0x4556_414c;
pub const GRAD_SALT: u64 = 0x4752_4144;
