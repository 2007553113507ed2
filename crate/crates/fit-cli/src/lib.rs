//! Example library for `fitcore`, exposed both as a `fit` binary and as
//! callable run functions.

pub mod commands;
pub mod data;
pub mod gan;
pub mod models;
