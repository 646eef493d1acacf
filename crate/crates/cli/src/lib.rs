//! Command-line experiment runner: data loading, TOML experiment configs and
//! result files.

pub mod config;
pub mod data;
pub mod error;
pub mod run;
pub mod selftest;
